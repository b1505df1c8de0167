"""Shared builders for randomized-but-valid problems and posterior states."""

import numpy as np
import pytest

from brtf.inference import VBEngine
from brtf.state import FactorPosterior, new_state


def random_problem(seed, shape=(4, 3, 3), observed_fraction=0.8):
    """A random data tensor and mask with at least one observed entry."""
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(shape)
    mask = rng.random(shape) < observed_fraction
    if not mask.any():
        mask.reshape(-1)[0] = True
    return y, mask


def random_spd(rng, rank, scale=1.0):
    a = rng.standard_normal((rank, rank))
    return scale * (a @ a.T / rank + np.eye(rank))


def random_state(seed, y, mask, rank, shared_cov=False):
    """A valid posterior state that is far from any update's fixed point."""
    rng = np.random.default_rng(seed)
    state = new_state(y, mask, rank, seed=seed)
    for n, factor in enumerate(state.factors):
        mean = rng.standard_normal(factor.mean.shape)
        if shared_cov:
            cov = random_spd(rng, rank, scale=rng.uniform(0.2, 1.5))[None]
        else:
            cov = np.stack([random_spd(rng, rank, scale=rng.uniform(0.2, 1.5))
                            for _ in range(factor.rows)])
        state.factors[n] = FactorPosterior(mean, cov)
    state.sparse.mean[mask] = rng.standard_normal(int(mask.sum()))
    state.sparse.var[mask] = rng.uniform(0.2, 2.0, int(mask.sum()))
    state.entry_precisions.shape = rng.uniform(0.5, 3.0)
    state.entry_precisions.rate[mask] = rng.uniform(0.2, 2.0, int(mask.sum()))
    state.column_precisions.shape = rng.uniform(0.5, 3.0, rank)
    state.column_precisions.rate = rng.uniform(0.5, 3.0, rank)
    state.noise.shape = rng.uniform(0.5, 3.0)
    state.noise.rate = rng.uniform(0.5, 3.0)
    state.refresh_quad()
    return state


def random_engine(seed, shape=(4, 3, 3), rank=2, observed_fraction=0.8,
                  force_general_path=False):
    y, mask = random_problem(seed, shape, observed_fraction)
    state = random_state(seed + 999, y, mask, rank)
    return VBEngine(y, mask, state, force_general_path=force_general_path)


@pytest.fixture(scope="session")
def warm_kernels():
    """Trigger JIT compilation once so timed tests measure steady state."""
    y, mask = random_problem(0, shape=(4, 4, 4), observed_fraction=0.7)
    state = new_state(y, mask, 2, seed=0)
    engine = VBEngine(y, mask, state)
    for mode in range(3):
        engine.update_factor(mode)
    engine.update_lambda()
    engine.update_tau()
    engine.update_sparse()
    engine.update_gamma()
    engine.elbo()
    return True
