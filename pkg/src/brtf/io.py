"""Binary file formats, checkpointing, and tabular outputs.

All multi-byte header fields are little-endian.  Layouts:

tensor file   magic "BRTF" | version u16 | order u16 | extents u64 each |
              encoding u8 | payload (float64, row-major).  Encoding 0 is
              dense; encoding 1 marks missing entries with IEEE-754 NaN.
mask file     magic "BRTM" | same header, encoding 0 | one byte per entry.
checkpoint    magic "BRTC" | version u16 | record count u32 | records of
              (name, dtype u8, ndim u16, dims u64 each, payload).

Writes go to a temporary file in the target directory followed by an
atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .state import (
    ColumnPrecisionPosterior,
    EntryPrecisionPosterior,
    FactorPosterior,
    HyperPriors,
    ModelState,
    NoisePosterior,
    SparsePosterior,
)

__all__ = [
    "FormatError",
    "FORMAT_VERSION",
    "write_tensor",
    "read_tensor",
    "write_mask",
    "read_mask",
    "save_checkpoint",
    "load_checkpoint",
    "write_report",
    "read_report",
    "METRICS_HEADER",
    "write_metrics_csv",
]

FORMAT_VERSION = 1

TENSOR_MAGIC = b"BRTF"
MASK_MAGIC = b"BRTM"
CHECKPOINT_MAGIC = b"BRTC"

ENC_DENSE = 0
ENC_NAN_MISSING = 1

# Hard cap on total entries read from a header (8 GiB of float64 payload).
_MAX_ELEMENTS = 1 << 30


class FormatError(ValueError):
    """File format violation; ``code`` identifies the failure kind."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack_header(magic: bytes, shape, encoding: int) -> bytes:
    parts = [magic, struct.pack("<H", FORMAT_VERSION), struct.pack("<H", len(shape))]
    parts += [struct.pack("<Q", extent) for extent in shape]
    parts.append(struct.pack("<B", encoding))
    return b"".join(parts)


def _unpack_header(data: bytes, magic: bytes, path: str):
    if len(data) < 4 or data[:4] != magic:
        raise FormatError("bad-magic", f"{path} is not a {magic.decode()} file")
    if len(data) < 8:
        raise FormatError("truncated-payload", f"{path}: header cut short")
    version, order = struct.unpack_from("<HH", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError("bad-version", f"{path}: unsupported version {version}")
    if order < 1 or order > 64:
        raise FormatError("extent-overflow", f"{path}: implausible order {order}")
    need = 8 + 8 * order + 1
    if len(data) < need:
        raise FormatError("truncated-payload", f"{path}: header cut short")
    shape = struct.unpack_from(f"<{order}Q", data, 8)
    total = 1
    for extent in shape:
        if extent < 1:
            raise FormatError("extent-overflow", f"{path}: zero extent")
        total *= extent
        if total > _MAX_ELEMENTS:
            raise FormatError("extent-overflow",
                              f"{path}: {shape} exceeds the element cap")
    encoding = data[8 + 8 * order]
    return shape, encoding, total, need


def write_tensor(path: str, tensor: np.ndarray, mask: np.ndarray | None = None,
                 encoding: int = ENC_DENSE) -> None:
    """Write a dense float64 tensor; with encoding 1, entries outside
    ``mask`` are stored as NaN."""
    t = np.ascontiguousarray(tensor, dtype=np.float64)
    if encoding not in (ENC_DENSE, ENC_NAN_MISSING):
        raise FormatError("bad-encoding", f"unknown encoding {encoding}")
    if encoding == ENC_NAN_MISSING and mask is not None:
        t = np.where(np.asarray(mask, dtype=bool), t, np.nan)
    payload = _pack_header(TENSOR_MAGIC, t.shape, encoding) + t.tobytes(order="C")
    _atomic_write(path, payload)


def read_tensor(path: str):
    """Read a tensor file; returns ``(tensor, mask_or_None)``.

    NaN-encoded files yield a mask that is False at NaN positions, with
    zeros substituted in the data.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    shape, encoding, total, offset = _unpack_header(data, TENSOR_MAGIC, path)
    if encoding not in (ENC_DENSE, ENC_NAN_MISSING):
        raise FormatError("bad-encoding", f"{path}: unknown encoding {encoding}")
    if len(data) - offset != 8 * total:
        raise FormatError("truncated-payload",
                          f"{path}: expected {8 * total} payload bytes, "
                          f"got {len(data) - offset}")
    t = np.frombuffer(data, dtype="<f8", count=total, offset=offset).reshape(shape)
    t = np.ascontiguousarray(t)
    if encoding == ENC_NAN_MISSING:
        mask = ~np.isnan(t)
        return np.where(mask, t, 0.0), mask
    return t, None


def write_mask(path: str, mask: np.ndarray) -> None:
    m = np.ascontiguousarray(mask, dtype=bool)
    payload = _pack_header(MASK_MAGIC, m.shape, ENC_DENSE) + m.astype(np.uint8).tobytes()
    _atomic_write(path, payload)


def read_mask(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    shape, _, total, offset = _unpack_header(data, MASK_MAGIC, path)
    if len(data) - offset != total:
        raise FormatError("truncated-payload",
                          f"{path}: expected {total} payload bytes, "
                          f"got {len(data) - offset}")
    flags = np.frombuffer(data, dtype=np.uint8, count=total, offset=offset)
    bad = (flags > 1).sum()
    if bad:
        raise FormatError("bad-flag", f"{path}: {bad} mask bytes are not 0/1")
    return flags.reshape(shape).astype(bool)


# ------------------------------------------------------------- checkpoints

_DTYPES = {0: "<f8", 1: "<i8", 2: "u1"}
_DTYPE_TAGS = {np.dtype(np.float64): 0, np.dtype(np.int64): 1, np.dtype(np.uint8): 2}


def _pack_record(name: str, array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array)
    tag = _DTYPE_TAGS[arr.dtype]
    encoded = name.encode("utf-8")
    parts = [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", tag),
             struct.pack("<H", arr.ndim)]
    parts += [struct.pack("<Q", d) for d in arr.shape]
    parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def _checkpoint_records(state: ModelState, mask: np.ndarray) -> dict:
    records = {
        "mask": mask.astype(np.uint8),
        "lambda_shape": state.column_precisions.shape,
        "lambda_rate": state.column_precisions.rate,
        "sparse_mean": state.sparse.mean,
        "sparse_var": state.sparse.var,
        "gamma_shape": np.array([state.entry_precisions.shape]),
        "gamma_rate": state.entry_precisions.rate,
        "tau": np.array([state.noise.shape, state.noise.rate]),
        "priors": np.array([
            state.priors.column_shape, state.priors.column_rate,
            state.priors.outlier_shape, state.priors.outlier_rate,
            state.priors.noise_shape, state.priors.noise_rate,
        ]),
    }
    for n, f in enumerate(state.factors):
        records[f"factor_mean_{n}"] = f.mean
        records[f"factor_cov_{n}"] = f.row_cov
    return records


def save_checkpoint(path: str, state: ModelState, mask: np.ndarray) -> None:
    """Serialize the exact posterior parameters so a fit can be resumed and
    predictions reproduce bit-for-bit."""
    records = _checkpoint_records(state, np.asarray(mask, dtype=bool))
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", FORMAT_VERSION),
             struct.pack("<I", len(records))]
    for name, arr in records.items():
        parts.append(_pack_record(name, np.asarray(arr)))
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path: str):
    """Read a checkpoint; returns ``(state, mask)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad-magic", f"{path} is not a checkpoint file")
    if len(data) < 10:
        raise FormatError("truncated-payload", f"{path}: header cut short")
    version, = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError("bad-version", f"{path}: unsupported version {version}")
    count, = struct.unpack_from("<I", data, 6)
    offset = 10
    records = {}
    for _ in range(count):
        try:
            name_len, = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            tag, ndim = struct.unpack_from("<BH", data, offset)
            offset += 3
            dims = struct.unpack_from(f"<{ndim}Q", data, offset)
            offset += 8 * ndim
            dtype = np.dtype(_DTYPES[tag])
            total = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            nbytes = total * dtype.itemsize
            if offset + nbytes > len(data):
                raise FormatError("truncated-payload", f"{path}: record {name} cut short")
            arr = np.frombuffer(data, dtype=dtype, count=total, offset=offset)
            records[name] = np.ascontiguousarray(arr).reshape(dims)
            offset += nbytes
        except (struct.error, KeyError, UnicodeDecodeError) as err:
            raise FormatError("truncated-payload", f"{path}: corrupt record table") from err

    try:
        mask = records["mask"].astype(bool)
        factors = []
        n = 0
        while f"factor_mean_{n}" in records:
            factors.append(FactorPosterior(records[f"factor_mean_{n}"].astype(np.float64),
                                           records[f"factor_cov_{n}"].astype(np.float64)))
            n += 1
        priors_vec = records["priors"]
        state = ModelState(
            factors=factors,
            column_precisions=ColumnPrecisionPosterior(
                records["lambda_shape"].astype(np.float64),
                records["lambda_rate"].astype(np.float64)),
            sparse=SparsePosterior(records["sparse_mean"].astype(np.float64),
                                   records["sparse_var"].astype(np.float64)),
            entry_precisions=EntryPrecisionPosterior(
                float(records["gamma_shape"][0]),
                records["gamma_rate"].astype(np.float64)),
            noise=NoisePosterior(float(records["tau"][0]), float(records["tau"][1])),
            priors=HyperPriors(*[float(v) for v in priors_vec]),
        )
    except KeyError as err:
        raise FormatError("missing-record", f"{path}: incomplete checkpoint") from err
    return state, mask


# ------------------------------------------------------------ text outputs

def write_report(path: str, report_dict: dict) -> None:
    _atomic_write(path, (json.dumps(report_dict, indent=2) + "\n").encode("utf-8"))


def read_report(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


METRICS_HEADER = ("label,seed,outlier_fraction,outlier_magnitude,"
                  "missing_fraction,rrse,rrse_missing,fme,inferred_rank,"
                  "runtime_s,converged,error")


def write_metrics_csv(path: str, rows) -> None:
    """Write experiment/evaluation rows under the fixed header line."""
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(",".join([
            str(r.label), str(r.seed),
            f"{r.outlier_fraction:g}", str(r.outlier_magnitude),
            f"{r.missing_fraction:g}",
            f"{r.rrse:.10g}", f"{r.rrse_missing:.10g}", f"{r.fme:.10g}",
            str(r.inferred_rank), f"{r.runtime_s:.6g}",
            str(bool(r.converged)).lower(),
            str(r.error).replace(",", ";"),
        ]))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
