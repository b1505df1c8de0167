"""Hot inner loops of the inference engine, in numba and pure-numpy form.

The numba kernels stream over the observed entries and accumulate per-row
moments; the numpy fallback expresses the same sums as unfolded-mask matrix
products.  Both backends return identical values up to float rounding.

Backend selection: set ``BRTF_BACKEND=numpy`` or ``BRTF_BACKEND=numba``
(default: numba when importable, else numpy).  ``BRTF_THREADS`` caps the
numba thread pool (0 or unset = automatic).
"""

from __future__ import annotations

import os

import numpy as np

from .tensor_ops import kr_forward

__all__ = [
    "HAS_NUMBA",
    "get_backend",
    "set_backend",
    "ObservationLayout",
    "mode_gram_proj",
    "expected_sq_norm_obs",
    "cp_means_at_obs",
]

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

if HAS_NUMBA:
    _threads = int(os.environ.get("BRTF_THREADS", "0") or "0")
    if _threads > 0:
        numba.set_num_threads(min(_threads, numba.config.NUMBA_NUM_THREADS))

_BACKEND = os.environ.get("BRTF_BACKEND", "").strip().lower() or None
if _BACKEND is None:
    _BACKEND = "numba" if HAS_NUMBA else "numpy"


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Select the kernel backend; returns the previous one."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    previous = _BACKEND
    _BACKEND = name
    return previous


class ObservationLayout:
    """Index bookkeeping for the observed entries of a masked tensor.

    ``idx`` holds the observed multi-indices in C order, ``flat`` the same
    entries as flat indices.  For each mode there is a stable ordering of the
    observed entries by that mode's index plus CSR-style row offsets, which
    lets a kernel accumulate one output row per thread with a fixed,
    reproducible reduction order.
    """

    def __init__(self, mask: np.ndarray):
        self.shape = mask.shape
        self.ndim = mask.ndim
        self.idx = np.ascontiguousarray(np.argwhere(mask).astype(np.int64))
        self.count = self.idx.shape[0]
        self.flat = np.ravel_multi_index(self.idx.T, mask.shape).astype(np.int64)
        self.order = []
        self.offsets = []
        for n in range(mask.ndim):
            order_n = np.argsort(self.idx[:, n], kind="stable").astype(np.int64)
            counts = np.bincount(self.idx[:, n], minlength=mask.shape[n])
            offsets_n = np.zeros(mask.shape[n] + 1, dtype=np.int64)
            np.cumsum(counts, out=offsets_n[1:])
            self.order.append(order_n)
            self.offsets.append(offsets_n)

    def gather(self, full: np.ndarray) -> np.ndarray:
        """Values of a full tensor at the observed entries, C order."""
        return full.reshape(-1)[self.flat]


def _cat(arrays):
    """Stack per-mode row blocks into one array plus row offsets."""
    ptr = np.zeros(len(arrays) + 1, dtype=np.int64)
    np.cumsum([a.shape[0] for a in arrays], out=ptr[1:])
    return np.ascontiguousarray(np.concatenate(arrays, axis=0)), ptr


if HAS_NUMBA:

    @njit(cache=True, parallel=True)
    def _mode_gram_proj_njit(idx, order, offsets, means_cat, quads_cat, mode_ptr,
                             resid, mode, gram, proj):
        n_modes = idx.shape[1]
        rank = means_cat.shape[1]
        rank2 = quads_cat.shape[1]
        for i in prange(offsets.shape[0] - 1):
            g = np.zeros(rank2)
            p = np.zeros(rank)
            h = np.empty(rank)
            q = np.empty(rank2)
            for t in range(offsets[i], offsets[i + 1]):
                e = order[t]
                for r in range(rank):
                    h[r] = 1.0
                for r in range(rank2):
                    q[r] = 1.0
                for k in range(n_modes):
                    if k == mode:
                        continue
                    row = mode_ptr[k] + idx[e, k]
                    for r in range(rank):
                        h[r] *= means_cat[row, r]
                    for r in range(rank2):
                        q[r] *= quads_cat[row, r]
                re = resid[e]
                for r in range(rank):
                    p[r] += h[r] * re
                for r in range(rank2):
                    g[r] += q[r]
            gram[i] = g
            proj[i] = p

    @njit(cache=True, parallel=True)
    def _expected_sq_norm_njit(idx, quads_cat, mode_ptr):
        n_entries, n_modes = idx.shape
        rank2 = quads_cat.shape[1]
        total = 0.0
        for e in prange(n_entries):
            q = np.ones(rank2)
            for k in range(n_modes):
                row = mode_ptr[k] + idx[e, k]
                for r in range(rank2):
                    q[r] *= quads_cat[row, r]
            s = 0.0
            for r in range(rank2):
                s += q[r]
            total += s
        return total

    @njit(cache=True, parallel=True)
    def _cp_means_njit(idx, means_cat, mode_ptr, out):
        n_entries, n_modes = idx.shape
        rank = means_cat.shape[1]
        for e in prange(n_entries):
            h = np.ones(rank)
            for k in range(n_modes):
                row = mode_ptr[k] + idx[e, k]
                for r in range(rank):
                    h[r] *= means_cat[row, r]
            s = 0.0
            for r in range(rank):
                s += h[r]
            out[e] = s


def _unfold_c(full: np.ndarray, mode: int) -> np.ndarray:
    # C-order unfolding: columns pair with kr_forward of the remaining modes.
    return np.moveaxis(full, mode, 0).reshape(full.shape[mode], -1)


def _mode_gram_proj_numpy(layout, mask, resid_obs, means, quads, mode):
    rest_q = [q for k, q in enumerate(quads) if k != mode]
    rest_m = [m for k, m in enumerate(means) if k != mode]
    gram = _unfold_c(mask.astype(np.float64), mode) @ kr_forward(rest_q)
    resid_full = np.zeros(mask.size)
    resid_full[layout.flat] = resid_obs
    proj = _unfold_c(resid_full.reshape(mask.shape), mode) @ kr_forward(rest_m)
    return gram, proj


def mode_gram_proj(layout: ObservationLayout, mask: np.ndarray, resid_obs: np.ndarray,
                   means, quads, mode: int):
    """Per-row moments of one mode over the observed entries.

    Returns ``(gram, proj)`` with shapes (I_mode, R*R) and (I_mode, R):
    row i of ``gram`` sums the elementwise products of the other modes'
    second-moment rows over the observed entries whose mode index is i,
    and row i of ``proj`` sums the elementwise products of the other
    modes' mean rows weighted by ``resid_obs``.
    """
    if _BACKEND == "numpy":
        return _mode_gram_proj_numpy(layout, mask, resid_obs, means, quads, mode)
    rank = means[0].shape[1]
    means_cat, mode_ptr = _cat(means)
    quads_cat, _ = _cat(quads)
    gram = np.empty((layout.shape[mode], rank * rank))
    proj = np.empty((layout.shape[mode], rank))
    _mode_gram_proj_njit(layout.idx, layout.order[mode], layout.offsets[mode],
                         means_cat, quads_cat, mode_ptr,
                         np.ascontiguousarray(resid_obs), mode, gram, proj)
    return gram, proj


def expected_sq_norm_obs(layout: ObservationLayout, mask: np.ndarray, quads) -> float:
    """Sum over observed entries of the expected squared CP value, i.e. the
    total of all R*R elementwise products of the second-moment rows."""
    if _BACKEND == "numpy":
        gram0 = _unfold_c(mask.astype(np.float64), 0) @ kr_forward(quads[1:])
        return float(np.sum(quads[0] * gram0))
    quads_cat, mode_ptr = _cat(quads)
    return float(_expected_sq_norm_njit(layout.idx, quads_cat, mode_ptr))


def cp_means_at_obs(layout: ObservationLayout, means) -> np.ndarray:
    """Posterior-mean CP values at the observed entries, C order."""
    if _BACKEND == "numpy":
        rank = means[0].shape[1]
        h = np.ones((layout.count, rank))
        for k, m in enumerate(means):
            h *= m[layout.idx[:, k]]
        return h.sum(axis=1)
    means_cat, mode_ptr = _cat(means)
    out = np.empty(layout.count)
    _cp_means_njit(layout.idx, means_cat, mode_ptr, out)
    return out
