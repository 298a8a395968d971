"""File formats, sequence windowing and the synthetic traverse generator.

Descriptor file (little-endian)::

    magic   4 bytes  b"SDVD"
    version u32      1
    rows    u64
    cols    u64
    dtype   u8       1 = float32, 2 = float64
    payload rows*cols values, row-major

Checkpoint file: magic ``b"SDCK"``, version u32, array count u32, then per
array ``name_len u16, name bytes, rows u64, cols u64, dtype u8, payload``.
"""
from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import (
    CorruptCheckpoint,
    CorruptFile,
    TooFewFrames,
    UnsupportedDtype,
    VersionMismatch,
)

DESCRIPTOR_MAGIC = b"SDVD"
CHECKPOINT_MAGIC = b"SDCK"
FORMAT_VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}

_FILE_HEADER = struct.Struct("<4sI")
_ARRAY_HEADER = struct.Struct("<QQB")
_NAME_LEN = struct.Struct("<H")
_COUNT = struct.Struct("<I")
_MAX_DIM = 2**40


# --------------------------------------------------------------------------
# descriptor matrices


def _array_bytes(matrix: np.ndarray, dtype) -> bytes:
    dt = np.dtype(dtype).newbyteorder("<")
    m = np.ascontiguousarray(matrix, dtype=dt)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return _ARRAY_HEADER.pack(m.shape[0], m.shape[1], DTYPE_CODES[dt]) + m.tobytes()


def _read_array(buf: bytes, offset: int, error, dtype_error=None):
    if len(buf) - offset < _ARRAY_HEADER.size:
        raise error("truncated array header")
    rows, cols, code = _ARRAY_HEADER.unpack_from(buf, offset)
    offset += _ARRAY_HEADER.size
    if code not in DTYPES:
        raise (dtype_error or error)(f"unknown dtype code {code}")
    dtype = DTYPES[code]
    if max(rows, cols) > _MAX_DIM:
        raise error(f"implausible shape {rows}x{cols}")
    # Python ints: rows * cols may exceed 64 bits
    nbytes = rows * cols * dtype.itemsize
    if nbytes > len(buf) - offset:
        raise error(f"payload needs {nbytes} bytes, {len(buf) - offset} available")
    m = np.frombuffer(buf, dtype=dtype, count=rows * cols, offset=offset).reshape(rows, cols).copy()
    return m, offset + nbytes


def write_descriptors(matrix, path, dtype=np.float32) -> None:
    path = Path(path)
    data = _FILE_HEADER.pack(DESCRIPTOR_MAGIC, FORMAT_VERSION) + _array_bytes(matrix, dtype)
    path.write_bytes(data)


def read_descriptors(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _FILE_HEADER.size:
        raise CorruptFile(f"{path}: file too short")
    magic, version = _FILE_HEADER.unpack_from(buf, 0)
    if magic != DESCRIPTOR_MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    m, end = _read_array(buf, _FILE_HEADER.size, CorruptFile, UnsupportedDtype)
    if end != len(buf):
        raise CorruptFile(f"{path}: {len(buf) - end} trailing bytes")
    return m


# --------------------------------------------------------------------------
# checkpoints


def _is_vector(name: str) -> bool:
    base = name.split(".", 1)[1] if name.startswith("momentum.") else name
    return base == "kernel.w" or base.startswith("lstm.b_") or base == "proj.b"


def write_arrays(arrays: dict[str, np.ndarray], path) -> None:
    parts = [_FILE_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION), _COUNT.pack(len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        parts.append(_NAME_LEN.pack(len(raw)) + raw)
        parts.append(_array_bytes(np.atleast_1d(arr), np.float64))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def read_arrays(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < _FILE_HEADER.size + _COUNT.size:
        raise CorruptCheckpoint(f"{path}: file too short")
    magic, version = _FILE_HEADER.unpack_from(buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {FORMAT_VERSION}")
    (count,) = _COUNT.unpack_from(buf, _FILE_HEADER.size)
    offset = _FILE_HEADER.size + _COUNT.size
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) - offset < _NAME_LEN.size:
            raise CorruptCheckpoint(f"{path}: truncated entry")
        (nlen,) = _NAME_LEN.unpack_from(buf, offset)
        offset += _NAME_LEN.size
        if len(buf) - offset < nlen:
            raise CorruptCheckpoint(f"{path}: truncated name")
        try:
            name = buf[offset:offset + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpoint(f"{path}: undecodable array name") from exc
        offset += nlen
        arr, offset = _read_array(buf, offset, CorruptCheckpoint)
        if name in arrays:
            raise CorruptCheckpoint(f"{path}: duplicate array {name!r}")
        arrays[name] = arr.reshape(-1) if _is_vector(name) else arr
    if offset != len(buf):
        raise CorruptCheckpoint(f"{path}: {len(buf) - offset} trailing bytes")
    return arrays


_KERNEL_MODE_CODES = {"full_vector": 0, "conv_collapse": 1}


def save_checkpoint(params, state, path) -> None:
    """Write parameters, momentum buffers and trainer counters at float64."""
    arrays: dict[str, np.ndarray] = {}
    for name, p in params.named():
        arrays[name] = p.values
    arrays["meta.kernel_mode"] = np.array([[_KERNEL_MODE_CODES[params.kernel.mode]]], dtype=np.float64)
    arrays["meta.kernel_learnable"] = np.array([[float(params.kernel.learnable)]])
    arrays["meta.l2_normalize"] = np.array([[float(params.l2_normalize)]])
    if params.seq_len is not None:
        arrays["meta.seq_len"] = np.array([[params.seq_len]], dtype=np.float64)
    if state is not None:
        arrays["state.epoch"] = np.array([[state.epoch]], dtype=np.float64)
        arrays["state.step"] = np.array([[state.step]], dtype=np.float64)
        arrays["state.best_recall"] = np.array([[state.best_recall]], dtype=np.float64)
        arrays["state.best_epoch"] = np.array([[state.best_epoch]], dtype=np.float64)
        for name, buf in state.momentum.items():
            arrays[f"momentum.{name}"] = buf
    write_arrays(arrays, path)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(DsdParams, TrainState | None)``."""
    from .diffgraph import Param
    from .dsd import GATES, DeltaKernel, DsdParams, LstmCellParams
    from .trainer import TrainState

    arrays = read_arrays(path)

    def take(name):
        try:
            return arrays[name]
        except KeyError:
            raise CorruptCheckpoint(f"{path}: missing array {name!r}") from None

    def scalar(name):
        v = take(name)
        if v.size != 1:
            raise CorruptCheckpoint(f"{path}: {name} is not a scalar")
        return float(v.reshape(-1)[0])

    modes = {v: k for k, v in _KERNEL_MODE_CODES.items()}
    mode_code = scalar("meta.kernel_mode")
    if mode_code not in modes:
        raise CorruptCheckpoint(f"{path}: bad kernel mode {mode_code}")
    try:
        kernel = DeltaKernel(
            modes[mode_code], Param("kernel.w", take("kernel.w"), trainable=bool(scalar("meta.kernel_learnable")))
        )
        lstm = LstmCellParams(
            W={g: Param(f"lstm.W_{g}", take(f"lstm.W_{g}")) for g in GATES},
            U={g: Param(f"lstm.U_{g}", take(f"lstm.U_{g}")) for g in GATES},
            b={g: Param(f"lstm.b_{g}", take(f"lstm.b_{g}")) for g in GATES},
        )
        proj_W = Param("proj.W", arrays["proj.W"]) if "proj.W" in arrays else None
        proj_b = Param("proj.b", arrays["proj.b"]) if "proj.b" in arrays else None
        _check_lstm_shapes(lstm, proj_W, proj_b)
        seq_len = int(scalar("meta.seq_len")) if "meta.seq_len" in arrays else None
        if seq_len is not None and seq_len < 1:
            raise CorruptCheckpoint(f"{path}: bad seq_len {seq_len}")
        params = DsdParams(kernel, lstm, proj_W, proj_b, bool(scalar("meta.l2_normalize")), seq_len)
    except CorruptCheckpoint:
        raise
    except Exception as exc:
        raise CorruptCheckpoint(f"{path}: inconsistent parameters ({exc})") from exc

    state = None
    if "state.epoch" in arrays:
        momentum = {}
        for name, p in params.named():
            key = f"momentum.{name}"
            if key in arrays:
                if arrays[key].shape != p.values.shape:
                    raise CorruptCheckpoint(f"{path}: momentum buffer {name} has wrong shape")
                momentum[name] = arrays[key]
        try:
            state = TrainState(
                epoch=int(scalar("state.epoch")),
                step=int(scalar("state.step")),
                momentum=momentum,
                best_recall=scalar("state.best_recall"),
                best_epoch=int(scalar("state.best_epoch")),
            )
        except (ValueError, OverflowError) as exc:
            raise CorruptCheckpoint(f"{path}: bad trainer counters ({exc})") from exc
    return params, state


def _check_lstm_shapes(lstm, proj_W, proj_b):
    d, C = lstm.W["i"].values.shape
    for g, p in lstm.W.items():
        if p.values.shape != (d, C):
            raise CorruptCheckpoint(f"lstm.W_{g} has shape {p.values.shape}")
    for g, p in lstm.U.items():
        if p.values.shape != (d, d):
            raise CorruptCheckpoint(f"lstm.U_{g} has shape {p.values.shape}")
    for g, p in lstm.b.items():
        if p.values.shape != (d,):
            raise CorruptCheckpoint(f"lstm.b_{g} has shape {p.values.shape}")
    if proj_W is not None and (proj_W.values.shape != (d, C) or proj_b.values.shape != (d,)):
        raise CorruptCheckpoint("projection shapes do not match the LSTM")


# --------------------------------------------------------------------------
# poses


@dataclass
class Poses:
    frames: np.ndarray  # integer frame ids, strictly increasing
    positions: np.ndarray  # (N,) frame indices or (N, 2) metres
    metric: str  # "frame_difference" | "euclidean_meters"

    def __len__(self):
        return self.frames.shape[0]

    def reversed(self) -> "Poses":
        return Poses(self.frames[::-1].copy(), self.positions[::-1].copy(), self.metric)


def write_poses(poses: Poses, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if poses.metric == "euclidean_meters":
            w.writerow(["frame", "x", "y"])
            for f, (x, y) in zip(poses.frames, poses.positions):
                w.writerow([int(f), repr(float(x)), repr(float(y))])
        else:
            w.writerow(["frame", "index"])
            for f, idx in zip(poses.frames, poses.positions):
                w.writerow([int(f), repr(float(idx))])


def read_poses(path) -> Poses:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CorruptFile(f"{path}: empty pose file")
    header = [h.strip() for h in rows[0]]
    if header == ["frame", "x", "y"]:
        metric, width = "euclidean_meters", 2
    elif header == ["frame", "index"]:
        metric, width = "frame_difference", 1
    else:
        raise CorruptFile(f"{path}: unexpected header {header}")
    frames, positions = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width + 1:
            raise CorruptFile(f"{path}:{lineno}: expected {width + 1} columns")
        try:
            frames.append(int(row[0]))
            positions.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise CorruptFile(f"{path}:{lineno}: {exc}") from exc
    frames = np.array(frames, dtype=np.int64)
    if frames.size and np.any(np.diff(frames) <= 0):
        raise CorruptFile(f"{path}: frame column must be strictly increasing")
    pos = np.array(positions, dtype=np.float64).reshape(len(frames), width)
    if width == 1:
        pos = pos[:, 0]
    return Poses(frames, pos, metric)


# --------------------------------------------------------------------------
# windows


def window_sequences(frames: np.ndarray, seq_len: int) -> np.ndarray:
    """Trailing windows: row ``i - seq_len + 1`` holds ``frames[i - seq_len + 1 : i + 1]``.

    Returns an array of shape (F - seq_len + 1, seq_len, C).
    """
    frames = np.asarray(frames)
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    if frames.ndim != 2 or frames.shape[0] < seq_len:
        raise TooFewFrames(f"need at least {seq_len} frames, got {frames.shape[0] if frames.ndim else 0}")
    view = np.lib.stride_tricks.sliding_window_view(frames, seq_len, axis=0)
    return np.ascontiguousarray(view.transpose(0, 2, 1))


# --------------------------------------------------------------------------
# synthetic traverses


@dataclass(frozen=True)
class SyntheticSpec:
    places: int = 50
    frames: int = 150
    dim: int = 16
    noise: float = 0.8
    drift: float = 0.2
    drift_smoothness: float = 3.0
    metric: str = "frames"  # "frames" | "meters"
    symmetric: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.places < 2:
            raise ValueError("need at least 2 places")
        if self.frames < self.places:
            raise ValueError("need at least one frame per place")
        if self.noise < 0 or self.drift < 0 or self.drift_smoothness < 0:
            raise ValueError("noise, drift and drift_smoothness must be >= 0")
        if self.metric not in ("frames", "meters"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class Dataset:
    ref_frames: np.ndarray
    query_frames: np.ndarray
    ref_poses: Poses
    query_poses: Poses


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Reference and query traverses over ``spec.places`` latent places.

    Reference frame t is its place's latent vector plus a smooth drift;
    query frame t revisits the same place and viewpoint with i.i.d.
    Gaussian noise of scale ``spec.noise`` on top. With ``symmetric`` the route is out-and-back, so the
    reference traverse (frames and positions) is its own reversal.
    """
    rng = np.random.default_rng(spec.seed)
    F, C = spec.frames, spec.dim
    latents = rng.standard_normal((spec.places, C))
    white = rng.standard_normal((F, C))
    drift = gaussian_filter1d(white, spec.drift_smoothness, axis=0, mode="nearest") if spec.drift_smoothness > 0 else white
    drift = drift / drift.std(axis=0, keepdims=True)

    t = np.arange(F)
    u = np.minimum(t, F - 1 - t) if spec.symmetric else t
    per_place = F // spec.places
    place = np.minimum(u // per_place, spec.places - 1)
    ref = latents[place] + spec.drift * drift[u]
    query = ref + spec.noise * rng.standard_normal((F, C))

    if spec.metric == "meters" or spec.symmetric:
        positions = np.stack([u.astype(np.float64), np.zeros(F)], axis=1)
        metric = "euclidean_meters"
    else:
        positions = t.astype(np.float64)
        metric = "frame_difference"
    ref_poses = Poses(t.copy(), positions.copy(), metric)
    query_poses = Poses(t.copy(), positions.copy(), metric)
    return Dataset(ref, query, ref_poses, query_poses)


DATASET_FILES = {
    "ref_frames": "ref_frames.sdvd",
    "query_frames": "query_frames.sdvd",
    "ref_poses": "ref_poses.csv",
    "query_poses": "query_poses.csv",
}


def save_dataset(data: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_descriptors(data.ref_frames, d / DATASET_FILES["ref_frames"])
    write_descriptors(data.query_frames, d / DATASET_FILES["query_frames"])
    write_poses(data.ref_poses, d / DATASET_FILES["ref_poses"])
    write_poses(data.query_poses, d / DATASET_FILES["query_poses"])


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    ds = Dataset(
        read_descriptors(d / DATASET_FILES["ref_frames"]).astype(np.float64),
        read_descriptors(d / DATASET_FILES["query_frames"]).astype(np.float64),
        read_poses(d / DATASET_FILES["ref_poses"]),
        read_poses(d / DATASET_FILES["query_poses"]),
    )
    if len(ds.ref_poses) != ds.ref_frames.shape[0] or len(ds.query_poses) != ds.query_frames.shape[0]:
        raise CorruptFile(f"{d}: pose rows do not match descriptor rows")
    return ds
