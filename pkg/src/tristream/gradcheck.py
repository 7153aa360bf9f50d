"""Finite-difference gradient verification.

The checker never touches the recorded graph: it re-evaluates the forward
closure at perturbed parameter values, so it is an independent oracle for
the backward rules in tensor.py.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

# Relative error uses a floored denominator: for gradients below the floor the
# test degrades into an absolute tolerance of rel_tol * floor, which keeps
# near-zero entries from amplifying finite-difference noise.
_DENOM_FLOOR = 1e-3


def _eval_scalar(f: Callable[[], Tensor]) -> float:
    with no_grad():
        return float(f().data)


def finite_difference(f: Callable[[], Tensor], param: Tensor, coords,
                      eps: float = 1e-5) -> np.ndarray:
    """Central-difference df/dparam at the given flat coordinates."""
    flat = param.data.reshape(-1)
    out = np.empty(len(coords), dtype=np.float64)
    for j, c in enumerate(coords):
        keep = flat[c]
        flat[c] = keep + eps
        hi = _eval_scalar(f)
        flat[c] = keep - eps
        lo = _eval_scalar(f)
        flat[c] = keep
        out[j] = (hi - lo) / (2.0 * eps)
    return out


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor],
                    eps: float = 1e-5, rel_tol: float = 1e-4,
                    sample: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Compare backward() gradients of scalar f() against finite differences.

    sample: per-tensor cap on checked coordinates (None = every entry).
    Returns the max relative error; raises AssertionError past rel_tol.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, g in zip(params, grads):
        n = p.size
        if sample is not None and n > sample:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=sample, replace=False)
        else:
            coords = np.arange(n)
        fd = finite_difference(f, p, coords, eps)
        an = g.reshape(-1)[coords]
        err = np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), _DENOM_FLOOR)
        worst = max(worst, float(err.max()) if err.size else 0.0)
        if worst > rel_tol:
            bad = int(np.argmax(err))
            raise AssertionError(
                f"gradient mismatch at flat index {coords[bad]} of shape {p.shape}: "
                f"analytic {an[bad]:.8g} vs finite-diff {fd[bad]:.8g} "
                f"(rel err {err[bad]:.3g} > {rel_tol:g})")
    return worst
