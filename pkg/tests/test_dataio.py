import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from seqdelta.dataio import (
    Poses,
    SyntheticSpec,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    read_arrays,
    read_descriptors,
    read_poses,
    save_checkpoint,
    save_dataset,
    window_sequences,
    write_arrays,
    write_descriptors,
    write_poses,
)
from seqdelta.dsd import init_dsd_params
from seqdelta.errors import CorruptCheckpoint, CorruptFile, DataError, TooFewFrames, UnsupportedDtype, VersionMismatch
from seqdelta.trainer import TrainState


# --------------------------------------------------------------------------
# windows


def test_window_counts():
    frames = np.arange(35.0).reshape(7, 5)
    assert window_sequences(frames[:5], 5).shape == (1, 5, 5)
    assert np.array_equal(window_sequences(frames, 1)[:, 0], frames)
    w = window_sequences(frames, 3)
    assert w.shape == (5, 3, 5) and np.array_equal(w[0], frames[0:3])


def test_window_too_short():
    with pytest.raises(TooFewFrames):
        window_sequences(np.zeros((3, 2)), 4)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 4))), st.integers(1, 5))
def test_window_is_pure(frames, ell):
    if frames.shape[0] < ell:
        return
    a = window_sequences(frames, ell)
    b = window_sequences(frames.copy(), ell)
    assert np.array_equal(a, b, equal_nan=True)
    for r in range(a.shape[0]):
        assert np.array_equal(a[r], frames[r:r + ell], equal_nan=True)


# --------------------------------------------------------------------------
# descriptor files


def test_descriptor_roundtrip(tmp_path):
    m = np.array([[1.5, -2.0, 3.25], [0.0, 1e-3, 7.0]], dtype=np.float32)
    write_descriptors(m, tmp_path / "a.sdvd")
    back = read_descriptors(tmp_path / "a.sdvd")
    assert back.dtype == np.float32 and np.array_equal(back, m)
    raw = (tmp_path / "a.sdvd").read_bytes()
    assert raw[:4] == b"SDVD" and struct.unpack_from("<IQQB", raw, 4) == (1, 2, 3, 1)
    assert len(raw) == 4 + 4 + 8 + 8 + 1 + 6 * 4


@settings(max_examples=30)
@given(hnp.arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(0, 6))))
def test_descriptor_roundtrip_bitwise(tmp_path_factory, m):
    path = tmp_path_factory.mktemp("d") / "m.sdvd"
    write_descriptors(m, path)
    assert read_descriptors(path).tobytes() == m.tobytes()


def test_float64_payload(tmp_path):
    m = np.random.default_rng(0).standard_normal((3, 2))
    write_descriptors(m, tmp_path / "d.sdvd", dtype=np.float64)
    assert np.array_equal(read_descriptors(tmp_path / "d.sdvd"), m)


def test_bad_magic(tmp_path):
    write_descriptors(np.zeros((1, 1)), tmp_path / "a.sdvd")
    raw = bytearray((tmp_path / "a.sdvd").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "a.sdvd").write_bytes(bytes(raw))
    with pytest.raises(CorruptFile):
        read_descriptors(tmp_path / "a.sdvd")


def test_payload_overflow(tmp_path):
    header = b"SDVD" + struct.pack("<IQQB", 1, 2**62, 2**62, 1)
    (tmp_path / "a.sdvd").write_bytes(header + b"\0" * 16)
    with pytest.raises(CorruptFile):
        read_descriptors(tmp_path / "a.sdvd")


def test_unknown_dtype_and_version(tmp_path):
    (tmp_path / "a.sdvd").write_bytes(b"SDVD" + struct.pack("<IQQB", 1, 1, 1, 9) + b"\0" * 4)
    with pytest.raises(UnsupportedDtype):
        read_descriptors(tmp_path / "a.sdvd")
    (tmp_path / "b.sdvd").write_bytes(b"SDVD" + struct.pack("<IQQB", 2, 1, 1, 1) + b"\0" * 4)
    with pytest.raises(VersionMismatch):
        read_descriptors(tmp_path / "b.sdvd")


def test_trailing_bytes(tmp_path):
    write_descriptors(np.zeros((1, 1)), tmp_path / "a.sdvd")
    with open(tmp_path / "a.sdvd", "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(CorruptFile):
        read_descriptors(tmp_path / "a.sdvd")


# --------------------------------------------------------------------------
# checkpoints


def checkpoint(tmp_path, **kw):
    p = init_dsd_params(6, 5, seed=3, **kw)
    state = TrainState(epoch=7, step=123, best_recall=0.625, best_epoch=4)
    state.momentum = {n: np.random.default_rng(1).standard_normal(q.values.shape) for n, q in p.named()}
    path = tmp_path / "m.sdck"
    save_checkpoint(p, state, path)
    return p, state, path


@pytest.mark.parametrize("kw", [{}, {"kernel_mode": "full_vector", "kernel_learnable": False}, {"hidden_dim": 4}, {"l2_normalize": False}])
def test_checkpoint_roundtrip(tmp_path, kw):
    p, state, path = checkpoint(tmp_path, **kw)
    q, s = load_checkpoint(path)
    for (n, a), (m, b) in zip(p.named(), q.named()):
        assert n == m and a.values.tobytes() == b.values.tobytes() and a.trainable == b.trainable
    assert (q.kernel.mode, q.l2_normalize, q.seq_len) == (p.kernel.mode, p.l2_normalize, 5)
    assert (s.epoch, s.step, s.best_recall, s.best_epoch) == (7, 123, 0.625, 4)
    assert all(s.momentum[n].tobytes() == state.momentum[n].tobytes() for n in state.momentum)
    # saving the loaded checkpoint reproduces the file byte for byte
    save_checkpoint(q, s, tmp_path / "again.sdck")
    assert (tmp_path / "again.sdck").read_bytes() == path.read_bytes()


def test_checkpoint_without_state(tmp_path):
    p = init_dsd_params(4, 3)
    save_checkpoint(p, None, tmp_path / "p.sdck")
    _, state = load_checkpoint(tmp_path / "p.sdck")
    assert state is None


def test_truncated_checkpoint(tmp_path):
    _, _, path = checkpoint(tmp_path)
    raw = path.read_bytes()
    for cut in (3, 10, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)


def test_checkpoint_version_bump(tmp_path):
    _, _, path = checkpoint(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[4] += 1
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatch):
        load_checkpoint(path)


def test_checkpoint_missing_array(tmp_path):
    _, _, path = checkpoint(tmp_path)
    arrays = read_arrays(path)
    del arrays["lstm.W_g"]
    write_arrays(arrays, path)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


# --------------------------------------------------------------------------
# poses


def test_pose_roundtrip(tmp_path):
    frames = Poses(np.array([0, 2, 5]), np.array([0.0, 2.0, 5.0]), "frame_difference")
    meters = Poses(np.array([1, 2]), np.array([[0.5, 1.0], [2.0, -3.0]]), "euclidean_meters")
    for poses in (frames, meters):
        write_poses(poses, tmp_path / "p.csv")
        back = read_poses(tmp_path / "p.csv")
        assert back.metric == poses.metric
        assert np.array_equal(back.frames, poses.frames) and np.array_equal(back.positions, poses.positions)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "frame,x,y"


@pytest.mark.parametrize("text", ["", "frame,z\n1,2\n", "frame,index\n1,2\n1,3\n", "frame,index\n2,1\n1,3\n", "frame,index\nx,1\n", "frame,x,y\n1,2\n"])
def test_bad_pose_files(tmp_path, text):
    (tmp_path / "p.csv").write_text(text)
    with pytest.raises(CorruptFile):
        read_poses(tmp_path / "p.csv")


# --------------------------------------------------------------------------
# synthetic data


def test_noiseless_query_equals_reference():
    ds = generate_synthetic(SyntheticSpec(noise=0.0, seed=4))
    assert np.array_equal(ds.query_frames, ds.ref_frames)


def test_generation_reproducible(tmp_path):
    spec = SyntheticSpec(seed=11)
    save_dataset(generate_synthetic(spec), tmp_path / "a")
    save_dataset(generate_synthetic(spec), tmp_path / "b")
    for name in ("ref_frames.sdvd", "query_frames.sdvd", "ref_poses.csv", "query_poses.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ds = load_dataset(tmp_path / "a")
    assert ds.ref_frames.shape == (150, 16)
    other = generate_synthetic(SyntheticSpec(seed=12))
    assert not np.array_equal(other.ref_frames, generate_synthetic(spec).ref_frames)


def test_place_structure():
    spec = SyntheticSpec(places=5, frames=15, drift=0.0, noise=0.0, seed=0)
    ds = generate_synthetic(spec)
    # without drift every frame of a place is that place's latent vector
    for p in range(5):
        block = ds.ref_frames[3 * p:3 * p + 3]
        assert np.all(block == block[0])
    assert not np.array_equal(ds.ref_frames[0], ds.ref_frames[3])


def test_symmetric_route_is_palindromic():
    ds = generate_synthetic(SyntheticSpec(symmetric=True, seed=1))
    assert np.array_equal(ds.ref_frames, ds.ref_frames[::-1])
    assert np.array_equal(ds.ref_poses.positions, ds.ref_poses.positions[::-1])
    assert ds.ref_poses.metric == "euclidean_meters"


def test_meter_positions():
    ds = generate_synthetic(SyntheticSpec(metric="meters", seed=0))
    assert ds.ref_poses.positions.shape == (150, 2)
    assert np.all(np.diff(ds.ref_poses.positions[:, 0]) == 1.0)


def test_spec_validation():
    for kw in ({"places": 1}, {"noise": -1.0}, {"frames": 10, "places": 20}, {"metric": "miles"}):
        with pytest.raises(ValueError):
            SyntheticSpec(**kw)


def test_load_dataset_mismatch(tmp_path):
    ds = generate_synthetic(SyntheticSpec(places=4, frames=12))
    save_dataset(ds, tmp_path)
    write_descriptors(ds.ref_frames[:5], tmp_path / "ref_frames.sdvd")
    with pytest.raises(DataError):
        load_dataset(tmp_path)
