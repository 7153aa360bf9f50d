import numpy as np
import pytest

from tristream import tensor as T


@pytest.fixture(autouse=True)
def fp64_default():
    """Verification precision is float64; individual tests opt into fp32."""
    T.set_default_dtype("float64")
    yield
    T.set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def mini_cfg(**overrides):
    """Smallest config that exercises every pipeline stage."""
    from tristream.config import RunConfig
    base = dict(
        d_h=16, n_heads=2, recent_layers=1, mid_layers=1, decoder_layers=1,
        idx_heads=2, idx_width=8, level_sizes=[5, 6, 4], mode="d", m_slots=3,
        topk=4, r_window=8, l_window=48, t_cap=64, n_users=40, n_items=120,
        horizon=160, plant_rate=0.2, plant_mid_rate=0.1, n_clusters=6,
        item_dim=8, test_fraction=0.2, min_len=12, batch_size=4,
        stage_steps=[2, 3, 2, 2], warmup_steps=2, seed=0, precision="fp64",
        eval_ks=[4], out_dir="unused")
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def shared_bundle():
    """One mini dataset + codebook for every test that needs real data."""
    from tristream.studies import build_data
    return build_data(mini_cfg())


@pytest.fixture(scope="session")
def shared_store(shared_bundle):
    from tristream.studies import build_memory
    return build_memory(mini_cfg(), shared_bundle.ds)
