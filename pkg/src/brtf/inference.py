"""Mean-field coordinate-ascent engine for robust CP factorization.

One sweep updates, in order: the N factor-matrix posteriors, the shared
column precisions, the noise precision, the outlier tensor, and the
per-entry outlier precisions; then the evidence lower bound is evaluated,
the outlier hyperpriors are re-optimized by empirical Bayes, and dead
components are pruned.  Every coordinate update is the exact conditional
maximizer, so the bound never decreases between consecutive evaluations
that are not separated by a prune step.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, polygamma, xlogy

from .complete import expected_cp_norm_sq, gram_complete
from .kernels import (
    ObservationLayout,
    cp_means_at_obs,
    expected_sq_norm_obs,
    mode_gram_proj,
)
from .state import (
    FactorPosterior,
    HyperPriors,
    ModelState,
    new_state,
)
from .tensor_ops import as_mask, as_tensor, cp_reconstruct, kr_forward

__all__ = [
    "FitConfig",
    "FitReport",
    "NumericalBreakdownError",
    "VBEngine",
    "fit",
    "default_init_rank",
]

_LN2PI = math.log(2.0 * math.pi)

HYPER_CLAMP = (1e-8, 1e6)


class NumericalBreakdownError(RuntimeError):
    """Raised when a posterior update cannot be completed numerically.

    When raised from a fit loop, ``report`` carries the partial trace.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class FitConfig:
    max_iters: int = 200
    tol: float = 1e-6
    prune_threshold: float = 1e-8
    optimize_gamma_priors: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.prune_threshold < 0:
            raise ValueError("prune_threshold must be nonnegative")


@dataclass
class FitReport:
    elbo_trace: list = field(default_factory=list)
    inferred_rank: int = 0
    iterations_run: int = 0
    converged: bool = False
    wall_time: float = 0.0
    prune_events: list = field(default_factory=list)  # (iteration, removed)
    hyperprior_opt_failures: int = 0

    def to_dict(self) -> dict:
        return {
            "elbo_trace": [float(v) for v in self.elbo_trace],
            "inferred_rank": int(self.inferred_rank),
            "iterations_run": int(self.iterations_run),
            "converged": bool(self.converged),
            "wall_time": float(self.wall_time),
            "prune_events": [[int(i), int(k)] for i, k in self.prune_events],
            "hyperprior_opt_failures": int(self.hyperprior_opt_failures),
        }


def default_init_rank(shape) -> int:
    """Initial number of components when the caller does not choose one."""
    return min(max(shape), 100)


def _gamma_prior_term(shape0, rate0, e_log, e_val):
    """E_q[ln Gamma(x | shape0, rate0)] summed over components.

    Constants of an improper (zero shape or rate) prior are dropped, which
    only shifts the bound by a constant.
    """
    n = np.size(e_log)
    const = xlogy(shape0, rate0) - (gammaln(shape0) if shape0 > 0 else 0.0)
    return n * const + (shape0 - 1.0) * np.sum(e_log) - rate0 * np.sum(e_val)


def _gamma_entropy(shape, rate):
    return shape - np.log(rate) + gammaln(shape) + (1.0 - shape) * digamma(shape)


def _solve_log_minus_digamma(target: float) -> float:
    """Solve ln(x) - digamma(x) = target for x > 0 by safeguarded Newton.

    The left side decreases strictly from +inf to 0, so the root is unique;
    the solution is clamped to the hyperparameter box.
    """
    lo, hi = HYPER_CLAMP
    if target <= math.log(hi) - digamma(hi):
        return hi
    if target >= math.log(lo) - digamma(lo):
        return lo
    # standard starting point for this gamma-shape equation
    x = (3.0 - target + math.sqrt((target - 3.0) ** 2 + 24.0 * target)) / (12.0 * target)
    x = min(max(x, lo), hi)
    for _ in range(60):
        f = math.log(x) - digamma(x) - target
        fprime = 1.0 / x - polygamma(1, x)
        x_new = min(max(x - f / fprime, lo), hi)
        if abs(x_new - x) <= 1e-10 * max(1.0, abs(x)):
            return x_new
        x = x_new
    raise FloatingPointError("gamma shape equation did not converge")


class VBEngine:
    """Coordinate-ascent updates for one observed tensor and one state.

    The engine owns the observation bookkeeping (index layout, gathered
    observed values) and mutates ``state`` in place.  A fully observed
    tensor takes the shared-covariance fast path unless
    ``force_general_path`` is set.
    """

    def __init__(self, y: np.ndarray, mask: np.ndarray, state: ModelState,
                 force_general_path: bool = False):
        y = as_tensor(y, allow_nan=True)
        mask = as_mask(mask, y.shape)
        if y.ndim < 2:
            raise ValueError("the model needs at least two modes")
        if not mask.any():
            raise ValueError("the observation mask selects no entries")
        if not np.all(np.isfinite(y[mask])):
            raise ValueError("observed entries contain non-finite values")
        if state.shape != y.shape:
            raise ValueError(f"state shape {state.shape} does not match data {y.shape}")
        self.y = np.where(mask, y, 0.0)
        self.mask = mask
        self.state = state
        self.layout = ObservationLayout(mask)
        self.count = self.layout.count
        self.y_obs = self.layout.gather(self.y)
        self.fast_path = bool(mask.all()) and not force_general_path

    @property
    def ndim(self) -> int:
        return self.state.ndim

    # ---------------------------------------------------------------- factors

    def _spd_inverse(self, systems: np.ndarray, context: str) -> np.ndarray:
        """Invert a stack of symmetric positive-definite matrices, adding a
        small diagonal jitter and retrying up to 3 times on failure."""
        h = systems
        rank = h.shape[-1]
        for attempt in range(4):
            try:
                np.linalg.cholesky(h)
                break
            except np.linalg.LinAlgError:
                if attempt == 3:
                    raise NumericalBreakdownError(
                        f"non-positive-definite system in {context}")
                trace = np.trace(h, axis1=-2, axis2=-1) / rank
                h = h + (1e-10 * trace)[..., None, None] * np.eye(rank)
        cov = np.linalg.inv(h)
        return (cov + np.swapaxes(cov, -1, -2)) / 2.0

    def update_factor(self, mode: int) -> FactorPosterior:
        """Exact Gaussian update of one mode's factor posterior."""
        st = self.state
        e_tau = st.noise.expectation()
        e_lam = st.column_precisions.expectation()
        rank = st.rank
        if self.fast_path:
            gram = gram_complete(st.factors, skip=mode)
            cov = self._spd_inverse(e_tau * gram[None] + np.diag(e_lam)[None],
                                    f"factor update, mode {mode}")
            resid = self.y - st.sparse.mean
            unfold = np.moveaxis(resid, mode, 0).reshape(resid.shape[mode], -1)
            kr = kr_forward([f.mean for k, f in enumerate(st.factors) if k != mode])
            mean = e_tau * (unfold @ kr) @ cov[0]
        else:
            resid_obs = self.y_obs - self.layout.gather(st.sparse.mean)
            gram_rows, proj = mode_gram_proj(
                self.layout, self.mask, resid_obs,
                st.factor_means(), st.quad, mode)
            systems = e_tau * gram_rows.reshape(-1, rank, rank) + np.diag(e_lam)[None]
            cov = self._spd_inverse(systems, f"factor update, mode {mode}")
            mean = e_tau * np.einsum("irs,is->ir", cov, proj)
        st.factors[mode] = FactorPosterior(mean, cov)
        st.refresh_quad(mode)
        return st.factors[mode]

    def expected_kr_gram(self, mode: int, row: int):
        """E of the restricted Khatri-Rao Gram matrix for one row: the sum,
        over observed entries in the row's subtensor, of the elementwise
        products of the other modes' second-moment rows."""
        offsets = self.layout.offsets[mode]
        lo, hi = offsets[row], offsets[row + 1]
        if lo == hi:
            raise ValueError(f"row {row} of mode {mode} has no observed entries")
        entries = self.layout.idx[self.layout.order[mode][lo:hi]]
        rank = self.state.rank
        q = np.ones((hi - lo, rank * rank))
        for k in range(self.ndim):
            if k == mode:
                continue
            q *= self.state.quad[k][entries[:, k]]
        return q.sum(axis=0).reshape(rank, rank)

    # ----------------------------------------------------------- precisions

    def update_lambda(self):
        """Gamma update of the shared column precisions."""
        st = self.state
        pri = st.priors
        total_rows = sum(st.shape)
        w = self._component_sq_norms()
        shape = np.full(st.rank, pri.column_shape + 0.5 * total_rows)
        rate = pri.column_rate + 0.5 * w
        st.column_precisions.shape = shape
        st.column_precisions.rate = rate
        return st.column_precisions

    def _component_sq_norms(self) -> np.ndarray:
        """Per-component expected squared column norm, summed over modes."""
        st = self.state
        w = np.zeros(st.rank)
        for f in st.factors:
            w += np.sum(f.mean ** 2, axis=0) + np.diagonal(f.cov_sum())
        return w

    def update_tau(self):
        """Gamma update of the noise precision."""
        st = self.state
        st.noise.shape = st.priors.noise_shape + 0.5 * self.count
        st.noise.rate = st.priors.noise_rate + 0.5 * self.expected_residual_sq()
        return st.noise

    def expected_residual_sq(self) -> float:
        """Expected squared norm of the observed residual
        Y - CP reconstruction - outliers under the current posterior."""
        st = self.state
        x_obs = self._cp_means_obs()
        s_obs = self.layout.gather(st.sparse.mean)
        svar_obs = self.layout.gather(st.sparse.var)
        if self.fast_path:
            e_sq = expected_cp_norm_sq(st.factors)
        else:
            e_sq = expected_sq_norm_obs(self.layout, self.mask, st.quad)
        y_obs = self.y_obs
        total = (
            float(y_obs @ y_obs)
            - 2.0 * float(y_obs @ x_obs)
            + e_sq
            - 2.0 * float(y_obs @ s_obs)
            + 2.0 * float(x_obs @ s_obs)
            + float(np.sum(s_obs ** 2 + svar_obs))
        )
        floor = -1e-9 * float(y_obs @ y_obs)
        if total < floor:
            raise NumericalBreakdownError(
                f"expected residual {total} is negative beyond numerical slack")
        return max(total, 0.0)

    def _cp_means_obs(self) -> np.ndarray:
        if self.fast_path:
            return cp_reconstruct(self.state.factor_means()).reshape(-1)
        return cp_means_at_obs(self.layout, self.state.factor_means())

    # -------------------------------------------------------------- outliers

    def update_sparse(self):
        """Gaussian update of the outlier posterior on the observed entries."""
        st = self.state
        e_tau = st.noise.expectation()
        e_gam = st.entry_precisions.expectation_obs(self.mask)
        x_obs = self._cp_means_obs()
        var_obs = 1.0 / (e_gam + e_tau)
        mean_obs = var_obs * e_tau * (self.y_obs - x_obs)
        mean = np.zeros(self.y.shape)
        var = np.zeros(self.y.shape)
        mean.reshape(-1)[self.layout.flat] = mean_obs
        var.reshape(-1)[self.layout.flat] = var_obs
        st.sparse.mean = mean
        st.sparse.var = var
        return st.sparse

    def update_gamma(self):
        """Gamma update of the per-entry outlier precisions."""
        st = self.state
        pri = st.priors
        s_obs = self.layout.gather(st.sparse.mean)
        svar_obs = self.layout.gather(st.sparse.var)
        rate = np.zeros(self.y.shape)
        rate.reshape(-1)[self.layout.flat] = pri.outlier_rate + 0.5 * (s_obs ** 2 + svar_obs)
        st.entry_precisions.shape = pri.outlier_shape + 0.5
        st.entry_precisions.rate = rate
        return st.entry_precisions

    # ------------------------------------------------------------------ elbo

    def elbo(self) -> float:
        """Evidence lower bound under the current posterior, in closed form."""
        st = self.state
        pri = st.priors
        m_obs = self.count
        rank = st.rank

        e_tau = st.noise.expectation()
        eln_tau = digamma(st.noise.shape) - math.log(st.noise.rate)
        e_lam = st.column_precisions.expectation()
        eln_lam = digamma(st.column_precisions.shape) - np.log(st.column_precisions.rate)
        a_g = st.entry_precisions.shape
        b_g = st.entry_precisions.rate[self.mask]
        e_gam = a_g / b_g
        eln_gam = digamma(a_g) - np.log(b_g)

        total_rows = sum(st.shape)
        w = self._component_sq_norms()
        s_obs = self.layout.gather(st.sparse.mean)
        svar_obs = self.layout.gather(st.sparse.var)
        s_sq = s_obs ** 2 + svar_obs

        value = 0.5 * m_obs * (eln_tau - _LN2PI) - 0.5 * e_tau * self.expected_residual_sq()
        value += 0.5 * total_rows * float(np.sum(eln_lam)) \
            - 0.5 * total_rows * rank * _LN2PI - 0.5 * float(e_lam @ w)
        value += _gamma_prior_term(pri.column_shape, pri.column_rate, eln_lam, e_lam)
        value += 0.5 * float(np.sum(eln_gam)) - 0.5 * m_obs * _LN2PI \
            - 0.5 * float(e_gam @ s_sq)
        value += _gamma_prior_term(pri.outlier_shape, pri.outlier_rate, eln_gam, e_gam)
        value += _gamma_prior_term(pri.noise_shape, pri.noise_rate, eln_tau, e_tau)

        value += self._factor_entropy()
        value += float(np.sum(_gamma_entropy(st.column_precisions.shape,
                                             st.column_precisions.rate)))
        value += 0.5 * float(np.sum(np.log(2.0 * math.pi * math.e * svar_obs)))
        value += m_obs * (a_g + gammaln(a_g) + (1.0 - a_g) * digamma(a_g)) \
            - float(np.sum(np.log(b_g)))
        value += float(_gamma_entropy(st.noise.shape, st.noise.rate))

        if not np.isfinite(value):
            raise NumericalBreakdownError("evidence lower bound is not finite")
        return float(value)

    def _factor_entropy(self) -> float:
        total = 0.0
        for f in self.state.factors:
            chol = np.linalg.cholesky(f.row_cov)
            logdets = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
            if f.shared_cov:
                logdet_sum = f.rows * float(logdets[0])
            else:
                logdet_sum = float(np.sum(logdets))
            total += 0.5 * logdet_sum + 0.5 * f.rows * f.rank * (1.0 + _LN2PI)
        return total

    # ------------------------------------------------------ empirical Bayes

    def _hyperprior_objective(self, a0: float, b0: float) -> float:
        """The bound's dependence on the outlier hyperprior pair."""
        st = self.state
        a_g = st.entry_precisions.shape
        b_g = st.entry_precisions.rate[self.mask]
        p_sum = float(np.sum(digamma(a_g) - np.log(b_g)))
        e_sum = float(np.sum(a_g / b_g))
        return (-self.count * gammaln(a0) + self.count * a0 * math.log(b0)
                + (a0 - 1.0) * p_sum - b0 * e_sum)

    def optimize_gamma_hyperpriors(self) -> bool:
        """Maximize the bound over the outlier hyperprior pair.

        The rate optimum is closed-form given the shape; substituting it
        into the shape stationarity condition leaves one monotone scalar
        equation, solved by Newton iteration (the fixed point of
        alternating the two coordinate optima, reached directly).  Both
        values are clamped to a fixed box.  Returns False and keeps the
        previous pair if the solve fails or does not improve the bound.
        """
        st = self.state
        m_obs = self.count
        a_g = st.entry_precisions.shape
        b_g = st.entry_precisions.rate[self.mask]
        e_gam_sum = float(np.sum(a_g / b_g))
        mean_log = float(digamma(a_g) - np.mean(np.log(b_g)))

        lo, hi = HYPER_CLAMP
        # stationarity with the rate eliminated: ln a0 - digamma(a0) equals
        # log of the mean expectation minus the mean log expectation (>= 0)
        gap = math.log(e_gam_sum / m_obs) - mean_log
        try:
            a0 = _solve_log_minus_digamma(max(gap, 0.0))
            b0 = min(max(m_obs * a0 / e_gam_sum, lo), hi)
        except (FloatingPointError, OverflowError, ValueError):
            return False
        if not (np.isfinite(a0) and np.isfinite(b0)):
            return False
        before = self._hyperprior_objective(st.priors.outlier_shape,
                                            st.priors.outlier_rate)
        after = self._hyperprior_objective(a0, b0)
        if not np.isfinite(after) or after < before:
            return False
        st.priors.outlier_shape = a0
        st.priors.outlier_rate = b0
        return True

    # ---------------------------------------------------------------- prune

    def component_energies(self) -> np.ndarray:
        """Squared column norms of the posterior means, summed over modes.

        Dead components' means collapse multiplicatively toward zero while
        their covariance floor does not, so the mean energy is the quantity
        that separates live from dead components by many orders of magnitude.
        """
        st = self.state
        energy = np.zeros(st.rank)
        for f in st.factors:
            energy += np.sum(f.mean ** 2, axis=0)
        return energy

    def prune(self, threshold: float) -> int:
        """Drop components whose relative mean energy falls below
        ``threshold``; never drops the last remaining component.
        Returns the number of removed components."""
        st = self.state
        if st.rank <= 1 or threshold <= 0:
            return 0
        energy = self.component_energies()
        total = float(energy.sum())
        if total <= 0.0:
            return 0
        keep = energy / total >= threshold
        if not keep.any():
            keep[int(np.argmax(energy))] = True
        removed = int(np.size(keep) - np.count_nonzero(keep))
        if removed == 0:
            return 0
        idx = np.flatnonzero(keep)
        for n, f in enumerate(st.factors):
            st.factors[n] = FactorPosterior(
                np.ascontiguousarray(f.mean[:, idx]),
                np.ascontiguousarray(f.row_cov[:, idx][:, :, idx]))
        st.column_precisions.shape = st.column_precisions.shape[idx].copy()
        st.column_precisions.rate = st.column_precisions.rate[idx].copy()
        st.refresh_quad()
        return removed

    # ------------------------------------------------------------------ run

    def run(self, config: FitConfig) -> FitReport:
        """Iterate full sweeps until the bound stabilizes or the iteration
        budget is exhausted."""
        start = time.perf_counter()
        report = FitReport()
        previous = None
        pruned_since_previous = False
        try:
            for iteration in range(1, config.max_iters + 1):
                for mode in range(self.ndim):
                    self.update_factor(mode)
                self.update_lambda()
                self.update_tau()
                self.update_sparse()
                self.update_gamma()
                value = self.elbo()
                report.elbo_trace.append(value)
                report.iterations_run = iteration
                if (previous is not None and not pruned_since_previous
                        and abs(value - previous) < config.tol * abs(value)):
                    report.converged = True
                    break
                previous = value
                pruned_since_previous = False
                if config.optimize_gamma_priors and iteration > 3:
                    if not self.optimize_gamma_hyperpriors():
                        report.hyperprior_opt_failures += 1
                if iteration > 2 and config.prune_threshold > 0:
                    removed = self.prune(config.prune_threshold)
                    if removed:
                        report.prune_events.append((iteration, removed))
                        pruned_since_previous = True
        except NumericalBreakdownError as err:
            report.inferred_rank = self.state.rank
            report.wall_time = time.perf_counter() - start
            raise NumericalBreakdownError(str(err), report=report) from err
        report.inferred_rank = self.state.rank
        report.wall_time = time.perf_counter() - start
        return report


def rescale_state(state: ModelState, factor: float) -> ModelState:
    """Rescale a posterior in place as if the data were multiplied by
    ``factor``: CP means pick up factor^(1/N) per mode, variances and the
    precision rates transform accordingly.  Returns the state."""
    mode_scale = factor ** (1.0 / state.ndim)
    for f in state.factors:
        f.mean *= mode_scale
        f.row_cov *= mode_scale ** 2
    state.column_precisions.rate *= mode_scale ** 2
    state.sparse.mean *= factor
    state.sparse.var *= factor ** 2
    state.entry_precisions.rate *= factor ** 2
    state.noise.rate *= factor ** 2
    state.priors.outlier_rate *= factor ** 2  # tracks the learned pair
    state.refresh_quad()
    return state


def fit(
    y: np.ndarray,
    mask: np.ndarray | None = None,
    config: FitConfig | None = None,
    priors: HyperPriors | None = None,
    init_rank: int | None = None,
    init_scheme: str = "random",
    init_state: ModelState | None = None,
    force_general_path: bool = False,
):
    """Fit the model to an observed tensor; returns ``(state, report)``.

    ``mask`` defaults to fully observed.  ``init_state`` (for example a
    loaded checkpoint) resumes from an existing posterior and overrides the
    initialization arguments; it is copied, not mutated.

    The data is standardized internally so that its observed root mean
    square matches the scale of a standard-normal rank-R initialization
    (rms sqrt(R)); results are therefore invariant to the data scale.
    Hyperpriors are interpreted on the standardized scale and the returned
    posterior is expressed on the original scale.  The bound trace in the
    report refers to the standardized problem.
    """
    y = as_tensor(y, allow_nan=True)
    if mask is None:
        mask = np.ones(y.shape, dtype=bool)
    mask = as_mask(mask, y.shape)
    config = config if config is not None else FitConfig()

    if init_state is not None:
        rank = init_state.rank
    elif init_rank is not None:
        rank = init_rank
    else:
        rank = default_init_rank(y.shape)

    rms = float(np.sqrt(np.mean(y[mask] ** 2)))
    scale = rms / math.sqrt(rank) if np.isfinite(rms) and rms > 0.0 else 1.0
    y_std = y / scale

    if init_state is not None:
        state = rescale_state(init_state.copy(), 1.0 / scale)
    else:
        state = new_state(y_std, mask, rank, priors=priors,
                          init_scheme=init_scheme, seed=config.seed)
    engine = VBEngine(y_std, mask, state, force_general_path=force_general_path)
    report = engine.run(config)
    return rescale_state(engine.state, scale), report
