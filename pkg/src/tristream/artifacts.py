"""Manifest headers shared by every artifact file.

Text artifacts start with one comment line `# manifest: {json}`; binary
containers carry the same JSON in their header block.  The manifest records
config hash, seed, producing command, and format version so any output can
be traced back to the run that made it.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import DataError

FORMAT_VERSION = 1


def config_hash(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()[:16]


def make_manifest(kind: str, seed: int | None = None, command: str = "",
                  cfg_hash: str = "", extra: dict | None = None) -> dict:
    m = {
        "kind": kind,
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "command": command,
        "config_hash": cfg_hash,
    }
    if extra:
        m.update(extra)
    return m


def manifest_line(manifest: dict) -> str:
    return "# manifest: " + json.dumps(manifest, sort_keys=True)


def read_text_artifact(path: str | Path) -> tuple[dict, list[tuple[int, str]]]:
    """Returns (manifest, [(line number, data line), ...]).

    Truncation (missing trailing newline) is rejected with the byte offset;
    comment lines beyond the manifest are skipped.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw and not raw.endswith(b"\n"):
        raise DataError(f"{path}: truncated file, no newline at byte offset {len(raw)}")
    text = raw.decode("utf-8")
    lines = text.split("\n")[:-1]
    manifest: dict = {}
    data: list[tuple[int, str]] = []
    for i, line in enumerate(lines, start=1):
        if line.startswith("# manifest:"):
            try:
                manifest = json.loads(line.split(":", 1)[1])
            except json.JSONDecodeError as e:
                raise DataError(f"{path} line {i}: bad manifest json: {e}") from None
            continue
        if line.startswith("#") or not line.strip():
            continue
        data.append((i, line))
    return manifest, data


def write_text_artifact(path: str | Path, manifest: dict, lines: list[str]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(manifest_line(manifest) + "\n")
        for line in lines:
            f.write(line + "\n")
    tmp.replace(path)
