"""Binary weight files and training checkpoints.

Weight file layout (all integers little-endian):

    magic   4 bytes  "OSTW"
    version u32      1
    count   u32      number of parameters
    per parameter, sorted by name:
        name_len u16, name utf-8, rank u8, dims rank*u32,
        payload  float32 little-endian, C order

A checkpoint is a weight file with appended sections, each introduced by
its own 4-byte magic: "OPT1" (Adam moments and counters), "HIS1"
(per-epoch history rows), "MET1" (seed, next epoch, config JSON).

Round trips are bitwise lossless; readers validate eagerly and never
partially mutate a target state.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import WeightFormatError, WeightShapeError
from .tensor import Tensor

MAGIC = b"OSTW"
VERSION = 1


def _write_param(buf, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    if len(nb) > 0xFFFF:
        raise WeightFormatError(f"parameter name too long: {name[:40]}...")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise WeightFormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def _read_param(buf) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(buf, 1))
    dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(buf, 4 * count)
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return name, arr


def _write_weights_block(buf, params: dict[str, Tensor]) -> None:
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(params)))
    for name in sorted(params):
        _write_param(buf, name, params[name].data)


def _read_weights_block(buf) -> dict[str, np.ndarray]:
    magic = _read_exact(buf, 4)
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", _read_exact(buf, 8))
    if version != VERSION:
        raise WeightFormatError(f"unsupported weight format version {version}")
    return dict(_read_param(buf) for _ in range(count))


def save_weights(state, path: str) -> None:
    """Write a ModelState (or plain name->Tensor dict) to a weight file."""
    params = state.params if hasattr(state, "params") else state
    with open(path, "wb") as fh:
        _write_weights_block(fh, params)


def load_weights(path: str, expected_shapes: dict[str, tuple[int, ...]] | None = None):
    """Read a weight file into a fresh name->Tensor map.

    With `expected_shapes`, the stored names and shapes must match exactly;
    the error names the first offending parameter path.
    """
    with open(path, "rb") as fh:
        arrays = _read_weights_block(fh)
        if fh.read(1):
            raise WeightFormatError("trailing bytes after weight block")
    if expected_shapes is not None:
        _check_against(arrays, expected_shapes)
    return {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}


def _check_against(arrays: dict[str, np.ndarray], expected: dict[str, tuple[int, ...]]) -> None:
    for name in sorted(set(arrays) | set(expected)):
        if name not in arrays:
            raise WeightShapeError(f"parameter {name!r} missing from file")
        if name not in expected:
            raise WeightShapeError(f"unexpected parameter {name!r} in file")
        if tuple(arrays[name].shape) != tuple(expected[name]):
            raise WeightShapeError(
                f"parameter {name!r} has shape {tuple(arrays[name].shape)}, "
                f"expected {tuple(expected[name])}"
            )


def load_weights_into(state, path: str, prefix: str = "") -> None:
    """Overwrite the matching subset of `state` from a weight file.

    Validation happens before any assignment, so a bad file leaves the
    state untouched.
    """
    with open(path, "rb") as fh:
        arrays = _read_weights_block(fh)
    target = {k: v for k, v in state.params.items() if k.startswith(prefix)}
    _check_against(arrays, {k: v.shape for k, v in target.items()})
    for name, arr in arrays.items():
        state.params[name].data = np.ascontiguousarray(arr, dtype=np.float32)


# ---------------------------------------------------------------------------
# checkpoint sections


_OPT_MAGIC = b"OPT1"
_HIST_MAGIC = b"HIS1"
_META_MAGIC = b"MET1"


def write_checkpoint(path: str, params: dict[str, Tensor], frozen: set[str],
                     opt_t: int, opt_hyper: tuple[float, float, float, float],
                     moments_m: dict[str, np.ndarray], moments_v: dict[str, np.ndarray],
                     history_rows: list[tuple], seed: int, next_epoch: int,
                     config_json: str) -> None:
    buf = io.BytesIO()
    _write_weights_block(buf, params)

    buf.write(_OPT_MAGIC)
    buf.write(struct.pack("<Q", opt_t))
    buf.write(struct.pack("<4d", *opt_hyper))
    buf.write(struct.pack("<I", len(moments_m)))
    for name in sorted(moments_m):
        _write_param(buf, name, moments_m[name])
        _write_param(buf, name, moments_v[name])

    buf.write(_HIST_MAGIC)
    buf.write(struct.pack("<I", len(history_rows)))
    for epoch, tl, ta, vl, va, wall in history_rows:
        buf.write(struct.pack("<I5d", epoch, tl, ta, vl, va, wall))

    meta = json.dumps({
        "seed": seed,
        "next_epoch": next_epoch,
        "frozen": sorted(frozen),
        "config": config_json,
    }).encode("utf-8")
    buf.write(_META_MAGIC)
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)

    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path: str) -> dict:
    """Parse a checkpoint into a plain dict of its sections."""
    with open(path, "rb") as fh:
        weights = _read_weights_block(fh)

        if _read_exact(fh, 4) != _OPT_MAGIC:
            raise WeightFormatError("missing optimizer section")
        (opt_t,) = struct.unpack("<Q", _read_exact(fh, 8))
        opt_hyper = struct.unpack("<4d", _read_exact(fh, 32))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        moments_m: dict[str, np.ndarray] = {}
        moments_v: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, m = _read_param(fh)
            name_v, v = _read_param(fh)
            if name_v != name:
                raise WeightFormatError(f"optimizer moments out of order at {name!r}")
            moments_m[name] = m
            moments_v[name] = v

        if _read_exact(fh, 4) != _HIST_MAGIC:
            raise WeightFormatError("missing history section")
        (rows,) = struct.unpack("<I", _read_exact(fh, 4))
        history = [struct.unpack("<I5d", _read_exact(fh, 44)) for _ in range(rows)]

        if _read_exact(fh, 4) != _META_MAGIC:
            raise WeightFormatError("missing metadata section")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        if fh.read(1):
            raise WeightFormatError("trailing bytes after checkpoint")

    return {
        "weights": weights,
        "opt_t": opt_t,
        "opt_hyper": opt_hyper,
        "moments_m": moments_m,
        "moments_v": moments_v,
        "history": history,
        "meta": meta,
    }
