"""Dense multilinear algebra primitives used throughout the package.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) layout, the
last index varying fastest.  Modes are 0-based.  ``matricize`` uses the
classical unfolding in which the lowest remaining mode varies fastest
along columns, so that for CP factors ``A_0, ..., A_{N-1}``

    matricize(cp_reconstruct(factors), n)
        == factors[n] @ khatri_rao_except(factors, n).T

holds exactly, ``khatri_rao`` taking its factor list in reverse order.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "as_tensor",
    "as_mask",
    "matricize",
    "khatri_rao",
    "khatri_rao_except",
    "hadamard_all",
    "generalized_inner_product",
    "cp_reconstruct",
    "masked_frobenius_sq",
]


def as_tensor(data, allow_nan: bool = False) -> np.ndarray:
    """Coerce to a C-contiguous float64 array and validate basic invariants."""
    t = np.ascontiguousarray(data, dtype=np.float64)
    if t.ndim < 1:
        raise ValueError("a tensor needs at least one mode")
    if t.size == 0:
        raise ValueError("every mode extent must be at least 1")
    if not allow_nan and not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite values")
    return t


def as_mask(flags, shape=None) -> np.ndarray:
    """Coerce to a boolean observation mask, optionally checking its shape."""
    m = np.ascontiguousarray(flags)
    if m.dtype != np.bool_:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask entries must be 0/1 or boolean")
        m = m.astype(bool)
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match tensor shape {tuple(shape)}")
    return m


def _check_mode(ndim: int, mode: int) -> None:
    if not 0 <= mode < ndim:
        raise ValueError(f"mode {mode} out of range for a {ndim}-way tensor")


def matricize(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding into a matrix of shape (I_mode, prod of the rest).

    Columns enumerate the remaining indices with the lowest mode varying
    fastest, matching the reverse-order Khatri-Rao convention.
    """
    t = np.asarray(t)
    _check_mode(t.ndim, mode)
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1, order="F")


def kr_forward(matrices) -> np.ndarray:
    """Columnwise Kronecker product with the first matrix varying slowest.

    Row ordering pairs with C-order flattening (last mode fastest); the
    public :func:`khatri_rao` is this product applied to the reversed list.
    """
    mats = [np.asarray(m) for m in matrices]
    if not mats:
        raise ValueError("need at least one matrix")
    cols = mats[0].shape[1]
    for m in mats:
        if m.ndim != 2 or m.shape[1] != cols:
            raise ValueError("all matrices must share the same column count")
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, cols)
    return out


def khatri_rao(matrices) -> np.ndarray:
    """Khatri-Rao product of a list of matrices, taken in reverse order.

    Column r is kron(last[:, r], ..., first[:, r]).
    """
    return kr_forward(list(reversed(list(matrices))))


def khatri_rao_except(matrices, skip: int) -> np.ndarray:
    """Reverse-order Khatri-Rao product of all matrices except ``matrices[skip]``."""
    mats = list(matrices)
    _check_mode(len(mats), skip)
    return khatri_rao([m for k, m in enumerate(mats) if k != skip])


def hadamard_all(matrices) -> np.ndarray:
    """Elementwise product across a list of same-shape arrays."""
    mats = [np.asarray(m) for m in matrices]
    if not mats:
        raise ValueError("need at least one array")
    shape = mats[0].shape
    for m in mats:
        if m.shape != shape:
            raise ValueError(f"shape mismatch in elementwise product: {m.shape} vs {shape}")
    out = mats[0].astype(np.float64, copy=True)
    for m in mats[1:]:
        out *= m
    return out


def generalized_inner_product(arrays) -> float:
    """Sum of elementwise products of N same-shape vectors or matrices."""
    return float(np.sum(hadamard_all(arrays)))


def cp_reconstruct(factors) -> np.ndarray:
    """Dense tensor whose (i_0, ..., i_{N-1}) entry is the generalized inner
    product of the corresponding factor rows."""
    mats = [np.asarray(f, dtype=np.float64) for f in factors]
    cols = mats[0].shape[1]
    for m in mats:
        if m.ndim != 2 or m.shape[1] != cols:
            raise ValueError("all factor matrices must share the same column count")
    shape = tuple(m.shape[0] for m in mats)
    if len(mats) == 1:
        return mats[0].sum(axis=1)
    rest = kr_forward(mats[1:])
    return (mats[0] @ rest.T).reshape(shape)


def masked_frobenius_sq(t: np.ndarray, mask: np.ndarray) -> float:
    """Squared Frobenius norm restricted to the observed entries."""
    t = np.asarray(t)
    m = as_mask(mask, t.shape)
    return float(np.sum(t[m] ** 2))
