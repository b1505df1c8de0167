"""Variational state: posterior parameter records for every latent quantity.

The generative model is  Y = low-rank CP tensor + per-entry outliers + noise,
observed on a subset of entries.  All posteriors are conjugate exponential
family: Gaussian rows for the factor matrices, a Gaussian per observed entry
for the outlier tensor, and Gamma distributions for the three precision
groups (shared column precisions, per-entry outlier precisions, noise).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor_ops import as_mask, as_tensor, matricize

__all__ = [
    "HyperPriors",
    "FactorPosterior",
    "ColumnPrecisionPosterior",
    "SparsePosterior",
    "EntryPrecisionPosterior",
    "NoisePosterior",
    "ModelState",
    "new_state",
]


@dataclass
class HyperPriors:
    """Top-level Gamma hyperparameters (shape/rate pairs).

    The outlier pair is tuned during fitting by empirical Bayes; the other
    four stay fixed.  The defaults give noninformative priors.
    """

    column_shape: float = 1e-6
    column_rate: float = 1e-6
    outlier_shape: float = 1e-6
    outlier_rate: float = 1e-6
    noise_shape: float = 1e-6
    noise_rate: float = 1e-6

    def __post_init__(self):
        for name in ("column_shape", "column_rate", "outlier_shape",
                     "outlier_rate", "noise_shape", "noise_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"hyperprior {name} must be nonnegative")

    def copy(self) -> "HyperPriors":
        return replace(self)


@dataclass
class FactorPosterior:
    """Row-independent Gaussian posterior over one mode's factor matrix.

    ``row_cov`` has shape (rows, R, R), or (1, R, R) when every row shares
    the same covariance (the complete-tensor fast path).
    """

    mean: np.ndarray
    row_cov: np.ndarray

    @property
    def rows(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.mean.shape[1]

    @property
    def shared_cov(self) -> bool:
        return self.row_cov.shape[0] == 1

    def cov(self, i: int) -> np.ndarray:
        return self.row_cov[0] if self.shared_cov else self.row_cov[i]

    def cov_sum(self) -> np.ndarray:
        """Sum of the row covariances (R x R)."""
        if self.shared_cov:
            return self.rows * self.row_cov[0]
        return self.row_cov.sum(axis=0)

    def second_moments(self) -> np.ndarray:
        """Per-row E[a a^T], vectorized: shape (rows, R * R)."""
        outer = self.mean[:, :, None] * self.mean[:, None, :]
        return (outer + self.row_cov).reshape(self.rows, -1)

    def copy(self) -> "FactorPosterior":
        return FactorPosterior(self.mean.copy(), self.row_cov.copy())


@dataclass
class ColumnPrecisionPosterior:
    """Gamma posteriors over the R column precisions shared by all modes."""

    shape: np.ndarray
    rate: np.ndarray

    def expectation(self) -> np.ndarray:
        return self.shape / self.rate

    def copy(self) -> "ColumnPrecisionPosterior":
        return ColumnPrecisionPosterior(self.shape.copy(), self.rate.copy())


@dataclass
class SparsePosterior:
    """Gaussian posterior over the outlier tensor.

    Both fields are full tensors that are exactly zero off the observed set.
    """

    mean: np.ndarray
    var: np.ndarray

    def copy(self) -> "SparsePosterior":
        return SparsePosterior(self.mean.copy(), self.var.copy())


@dataclass
class EntryPrecisionPosterior:
    """Gamma posteriors over the per-entry outlier precisions.

    The shape parameter is spatially constant, so it is stored as a scalar.
    ``rate`` is a full tensor, zero off the observed set where the posterior
    is undefined.
    """

    shape: float
    rate: np.ndarray

    def expectation_obs(self, mask: np.ndarray) -> np.ndarray:
        return self.shape / self.rate[mask]

    def copy(self) -> "EntryPrecisionPosterior":
        return EntryPrecisionPosterior(self.shape, self.rate.copy())


@dataclass
class NoisePosterior:
    """Gamma posterior over the isotropic noise precision."""

    shape: float
    rate: float

    def expectation(self) -> float:
        return self.shape / self.rate

    def copy(self) -> "NoisePosterior":
        return NoisePosterior(self.shape, self.rate)


@dataclass
class ModelState:
    """The full variational state plus the vectorized second-moment cache.

    ``quad[n]`` caches ``factors[n].second_moments()`` and must be refreshed
    whenever that factor posterior changes.  The cache is derived data; it is
    recomputed rather than serialized.
    """

    factors: list  # of FactorPosterior
    column_precisions: ColumnPrecisionPosterior
    sparse: SparsePosterior
    entry_precisions: EntryPrecisionPosterior
    noise: NoisePosterior
    priors: HyperPriors
    quad: list = field(default_factory=list)  # of (rows, R*R) arrays

    def __post_init__(self):
        if not self.quad:
            self.quad = [f.second_moments() for f in self.factors]

    @property
    def ndim(self) -> int:
        return len(self.factors)

    @property
    def shape(self) -> tuple:
        return tuple(f.rows for f in self.factors)

    @property
    def rank(self) -> int:
        return self.factors[0].rank

    def refresh_quad(self, mode: int | None = None) -> None:
        if mode is None:
            self.quad = [f.second_moments() for f in self.factors]
        else:
            self.quad[mode] = self.factors[mode].second_moments()

    def factor_means(self) -> list:
        return [f.mean for f in self.factors]

    def copy(self) -> "ModelState":
        return ModelState(
            factors=[f.copy() for f in self.factors],
            column_precisions=self.column_precisions.copy(),
            sparse=self.sparse.copy(),
            entry_precisions=self.entry_precisions.copy(),
            noise=self.noise.copy(),
            priors=self.priors.copy(),
            quad=[q.copy() for q in self.quad],
        )


def _svd_factor(y0: np.ndarray, mode: int, rank: int, rng) -> np.ndarray:
    """Scaled left singular vectors of the mode unfolding; surplus columns
    beyond the available singular vectors are drawn standard normal."""
    unfolding = matricize(y0, mode)
    u, s, _ = np.linalg.svd(unfolding, full_matrices=False)
    avail = min(rank, s.size)
    mean = np.empty((y0.shape[mode], rank))
    mean[:, :avail] = u[:, :avail] * np.sqrt(s[:avail])
    if avail < rank:
        mean[:, avail:] = rng.standard_normal((y0.shape[mode], rank - avail))
    return mean


def new_state(
    y: np.ndarray,
    mask: np.ndarray,
    init_rank: int,
    priors: HyperPriors | None = None,
    init_scheme: str = "random",
    seed: int = 0,
    sparse_init: str = "zero",
) -> ModelState:
    """Build the initial variational state for the observed tensor ``y``.

    Expectations start at identity column precisions, unit noise precision
    and unit per-entry outlier precisions.  Factor means are drawn standard
    normal per row, or taken from the SVD of each mode unfolding of ``y``
    (missing entries zero-filled) under the ``svd`` scheme.

    The outlier means start at zero, their prior mean; ``sparse_init=
    "random"`` draws them standard normal instead, which measurably hurts
    rank recovery by contaminating the first factor sweep.
    """
    if init_scheme not in ("random", "svd"):
        raise ValueError(f"unknown init scheme {init_scheme!r}")
    if sparse_init not in ("zero", "random"):
        raise ValueError(f"unknown sparse init {sparse_init!r}")
    if init_rank < 1:
        raise ValueError("init_rank must be at least 1")
    y = as_tensor(y, allow_nan=True)
    mask = as_mask(mask, y.shape)
    priors = priors.copy() if priors is not None else HyperPriors()
    rng = np.random.default_rng(seed)

    y0 = np.where(mask, y, 0.0)
    rank = int(init_rank)
    factors = []
    for n in range(y.ndim):
        if init_scheme == "svd":
            mean = _svd_factor(y0, n, rank, rng)
        else:
            mean = rng.standard_normal((y.shape[n], rank))
        cov = np.eye(rank)[None, :, :]  # shared across rows: E[Lambda]^{-1} = I
        factors.append(FactorPosterior(mean, cov))

    sparse_mean = np.zeros(y.shape)
    if sparse_init == "random":
        sparse_mean[mask] = rng.standard_normal(int(mask.sum()))
    sparse_var = np.zeros(y.shape)
    sparse_var[mask] = 1.0
    gamma_rate = np.zeros(y.shape)
    gamma_rate[mask] = 1.0

    return ModelState(
        factors=factors,
        column_precisions=ColumnPrecisionPosterior(np.ones(rank), np.ones(rank)),
        sparse=SparsePosterior(sparse_mean, sparse_var),
        entry_precisions=EntryPrecisionPosterior(1.0, gamma_rate),
        noise=NoisePosterior(1.0, 1.0),
        priors=priors,
    )
