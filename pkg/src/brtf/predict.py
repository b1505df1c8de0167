"""Student-t predictive distribution over tensor entries from a fitted state.

The predictive mean is the CP reconstruction of the posterior factor means.
The scale aggregates the noise posterior with a first-order propagation of
the factor-row uncertainties (one mode perturbed at a time; cross-mode
covariance products are deliberately not included).  Outlier estimates are
not extrapolated: they exist only at observed locations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .state import ModelState
from .tensor_ops import cp_reconstruct

__all__ = ["PredictiveParams", "predictive_params", "impute"]


@dataclass
class PredictiveParams:
    """Student-t parameters for one entry: mean, precision-like scale, dof."""

    mean: float
    scale: float
    dof: float

    @property
    def variance(self) -> float:
        if self.dof <= 2.0:
            raise ValueError("predictive variance is undefined for dof <= 2")
        return self.dof / (self.dof - 2.0) / self.scale


def _check_index(shape, index) -> tuple:
    index = tuple(int(i) for i in index)
    if len(index) != len(shape):
        raise IndexError(f"index {index} has wrong arity for shape {shape}")
    for i, extent in zip(index, shape):
        if not 0 <= i < extent:
            raise IndexError(f"index {index} out of range for shape {shape}")
    return index


def predictive_params(state: ModelState, index) -> PredictiveParams:
    """Student-t parameters of the predictive distribution at one entry."""
    index = _check_index(state.shape, index)
    rows = [f.mean[i] for f, i in zip(state.factors, index)]
    mean = float(np.prod(np.stack(rows), axis=0).sum())
    quad = 0.0
    for n, (f, i) in enumerate(zip(state.factors, index)):
        h = np.ones(state.rank)
        for k, r in enumerate(rows):
            if k != n:
                h *= r
        quad += float(h @ f.cov(i) @ h)
    inv_scale = state.noise.rate / state.noise.shape + quad
    return PredictiveParams(mean=mean, scale=1.0 / inv_scale, dof=2.0 * state.noise.shape)


def _quad_terms(state: ModelState, idx: np.ndarray) -> np.ndarray:
    """Sum over modes of h^T V h at each requested entry, where h is the
    elementwise product of the other modes' mean rows."""
    rank = state.rank
    count = idx.shape[0]
    gathered = [f.mean[idx[:, k]] for k, f in enumerate(state.factors)]
    quad = np.zeros(count)
    for n, f in enumerate(state.factors):
        h = np.ones((count, rank))
        for k, g in enumerate(gathered):
            if k != n:
                h *= g
        if f.shared_cov:
            quad += np.einsum("er,rs,es->e", h, f.row_cov[0], h)
        else:
            # group by the mode-n row so covariances are never gathered per entry
            order = np.argsort(idx[:, n], kind="stable")
            rows_sorted = idx[order, n]
            bounds = np.searchsorted(rows_sorted, np.arange(f.rows + 1))
            out = np.empty(count)
            for i in range(f.rows):
                lo, hi = bounds[i], bounds[i + 1]
                if lo == hi:
                    continue
                hs = h[order[lo:hi]]
                out[order[lo:hi]] = np.einsum("er,rs,es->e", hs, f.row_cov[i], hs)
            quad += out
    return quad


def impute(state: ModelState, mask: np.ndarray | None = None,
           missing_only: bool = True):
    """Predictive means and variances over the requested entries.

    With ``missing_only`` the complement of the observation mask is
    evaluated, otherwise every entry.  Returns ``(means, variances,
    evaluated)`` where ``evaluated`` flags the requested entries; means and
    variances are zero elsewhere.  The mean tensor over all entries equals
    the CP reconstruction of the posterior means exactly.
    """
    shape = state.shape
    if missing_only:
        if mask is None:
            raise ValueError("missing-only imputation needs the observation mask")
        evaluated = ~np.asarray(mask, dtype=bool)
    else:
        evaluated = np.ones(shape, dtype=bool)
    dof = 2.0 * state.noise.shape
    if dof <= 2.0:
        raise ValueError("predictive variance is undefined for dof <= 2")

    means = np.zeros(shape)
    variances = np.zeros(shape)
    idx = np.argwhere(evaluated)
    if idx.size == 0:
        return means, variances, evaluated

    full_mean = cp_reconstruct(state.factor_means())
    means[evaluated] = full_mean[evaluated]
    inv_scale = state.noise.rate / state.noise.shape + _quad_terms(state, idx)
    variances.reshape(-1)[np.ravel_multi_index(idx.T, shape)] = \
        dof / (dof - 2.0) * inv_scale
    return means, variances, evaluated
