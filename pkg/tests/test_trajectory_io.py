"""Binary trajectory format: round trips, header fields, importers."""

import numpy as np
import pytest

from dwnet.trajectory import (Trajectory, import_external, load_trajectory,
                              pooled_stats, save_trajectory)


def sample_traj(seed=0, t=5, m=2, h=8, w=8):
    rng = np.random.default_rng(seed)
    return Trajectory(rng.standard_normal((t, m, h, w)).astype(np.float32),
                      dt=0.25, field_names=["density", "potential"][:m] or ["f"],
                      periodic=(True, False)).with_stats()


def test_round_trip_bit_exact(tmp_path):
    traj = sample_traj()
    p = tmp_path / "a.dwtrj"
    save_trajectory(p, traj)
    back = load_trajectory(p)
    assert np.array_equal(back.fields, traj.fields)
    assert back.dt == traj.dt
    assert back.field_names == traj.field_names
    assert back.periodic == traj.periodic
    assert np.array_equal(back.mean, traj.mean)
    assert np.array_equal(back.std, traj.std)


def test_file_is_byte_stable(tmp_path):
    traj = sample_traj()
    p1, p2 = tmp_path / "a", tmp_path / "b"
    save_trajectory(p1, traj)
    save_trajectory(p2, traj)
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_and_header_layout(tmp_path):
    traj = sample_traj(t=3, m=2, h=4, w=8)
    p = tmp_path / "a.dwtrj"
    save_trajectory(p, traj)
    raw = p.read_bytes()
    assert raw[:6] == b"DWTRJ1"
    header = np.frombuffer(raw[6:26], dtype="<u4")
    assert list(header) == [1, 3, 2, 4, 8]
    dt = np.frombuffer(raw[26:34], dtype="<f8")[0]
    assert dt == 0.25
    assert raw[34] == 1 and raw[35] == 0  # periodic flags y, x


def test_payload_is_little_endian_float32_frame_major(tmp_path):
    fields = np.arange(2 * 1 * 2 * 2, dtype=np.float32).reshape(2, 1, 2, 2)
    traj = Trajectory(fields, 1.0, ["f"])
    p = tmp_path / "a.dwtrj"
    save_trajectory(p, traj)
    raw = p.read_bytes()
    payload = np.frombuffer(raw[-fields.size * 4:], dtype="<f4")
    assert np.array_equal(payload, fields.ravel())


def test_wrong_magic_rejected(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE!!" + b"\0" * 64)
    with pytest.raises(ValueError):
        load_trajectory(p)


def test_non_finite_fields_rejected():
    arr = np.zeros((2, 1, 4, 4), np.float32)
    arr[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Trajectory(arr, 1.0, ["f"])


def test_field_names_length_checked():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((2, 2, 4, 4), np.float32), 1.0, ["only-one"])


class TestImport:
    def test_npy_import(self, tmp_path):
        arr = np.random.default_rng(0).standard_normal((4, 3, 8, 8)).astype(np.float32)
        src = tmp_path / "ext.npy"
        np.save(src, arr)
        traj = import_external(src, dt=1.5, field_names=["d", "vx", "vy"])
        assert np.array_equal(traj.fields, arr)
        assert traj.dt == 1.5
        assert traj.field_names == ["d", "vx", "vy"]
        assert traj.periodic == (False, False)

    def test_npz_import_with_metadata(self, tmp_path):
        arr = np.random.default_rng(1).standard_normal((3, 2, 4, 4)).astype(np.float32)
        src = tmp_path / "ext.npz"
        np.savez(src, fields=arr, dt=np.float64(2.0),
                 field_names=np.array(["p", "u"]))
        traj = import_external(src)
        assert traj.dt == 2.0
        assert traj.field_names == ["p", "u"]

    def test_import_then_save_round_trip(self, tmp_path):
        arr = np.random.default_rng(2).standard_normal((3, 1, 8, 8)).astype(np.float32)
        src = tmp_path / "ext.npy"
        np.save(src, arr)
        traj = import_external(src, dt=1.0)
        out = tmp_path / "conv.dwtrj"
        save_trajectory(out, traj)
        back = load_trajectory(out)
        assert np.array_equal(back.fields, arr)

    def test_bad_rank_rejected(self, tmp_path):
        src = tmp_path / "bad.npy"
        np.save(src, np.zeros((4, 8, 8), np.float32))
        with pytest.raises(ValueError):
            import_external(src)


def test_pooled_stats_match_concatenation():
    rng = np.random.default_rng(3)
    trajs = [Trajectory(rng.standard_normal((t, 2, 4, 4)).astype(np.float32) + i,
                        1.0, ["a", "b"]) for i, t in enumerate((3, 7, 5))]
    mean, std = pooled_stats(trajs)
    allf = np.concatenate([tr.fields for tr in trajs]).astype(np.float64)
    assert np.allclose(mean, allf.mean(axis=(0, 2, 3)), atol=1e-12)
    assert np.allclose(std, allf.std(axis=(0, 2, 3)), atol=1e-7)
