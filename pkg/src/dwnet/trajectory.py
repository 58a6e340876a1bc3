"""Trajectory container and its binary on-disk format.

A trajectory is a time-ordered stack of multi-field 2D snapshots:
fields[t, m, y, x] as float32, with the output time step, field names,
periodicity flags, and per-field normalization statistics.

File layout (all integers little-endian):
  magic   b"DWTRJ1"
  u32     version (1)
  u32 x4  T, M, H, W
  f64     dt
  u8 x2   periodic flags (y, x)
  M x     u32 name length + UTF-8 field name
  M x     f64 mean, f64 std
  payload float32, frame-major then field-major, row-major spatial

Importers for externally generated datasets (.npy / .npz) convert into this
container so the rest of the pipeline never sees another layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MAGIC = b"DWTRJ1"
_VERSION = 1


@dataclass
class Trajectory:
    fields: np.ndarray                 # (T, M, H, W) float32
    dt: float
    field_names: list[str]
    periodic: tuple[bool, bool] = (True, True)
    mean: np.ndarray | None = None     # (M,) float64
    std: np.ndarray | None = None      # (M,) float64
    meta: dict = field(default_factory=dict)   # in-memory only (not serialized)

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float32)
        if self.fields.ndim != 4:
            raise ValueError(f"fields must be (T, M, H, W), got {self.fields.shape}")
        if len(self.field_names) != self.fields.shape[1]:
            raise ValueError("field_names length must match the field axis")
        if not np.all(np.isfinite(self.fields)):
            raise ValueError("trajectory contains non-finite values")

    @property
    def frames(self) -> int:
        return self.fields.shape[0]

    @property
    def num_fields(self) -> int:
        return self.fields.shape[1]

    def with_stats(self) -> "Trajectory":
        """Fill per-field mean/std from the data if not already set."""
        if self.mean is None or self.std is None:
            self.mean = self.fields.astype(np.float64).mean(axis=(0, 2, 3))
            self.std = self.fields.astype(np.float64).std(axis=(0, 2, 3))
        return self


def save_trajectory(path, traj: Trajectory) -> None:
    traj = traj.with_stats()
    t, m, h, w = traj.fields.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIIII", _VERSION, t, m, h, w))
        f.write(struct.pack("<d", float(traj.dt)))
        f.write(struct.pack("<BB", int(traj.periodic[0]), int(traj.periodic[1])))
        for name in traj.field_names:
            enc = name.encode()
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
        for i in range(m):
            f.write(struct.pack("<dd", float(traj.mean[i]), float(traj.std[i])))
        data = traj.fields.astype("<f4", copy=False)
        f.write(np.ascontiguousarray(data).tobytes())


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as f:
        if f.read(6) != _MAGIC:
            raise ValueError(f"{path}: not a trajectory file")
        version, t, m, h, w = struct.unpack("<IIIII", f.read(20))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        (dt,) = struct.unpack("<d", f.read(8))
        py, px = struct.unpack("<BB", f.read(2))
        names = []
        for _ in range(m):
            (ln,) = struct.unpack("<I", f.read(4))
            names.append(f.read(ln).decode())
        mean = np.empty(m, np.float64)
        std = np.empty(m, np.float64)
        for i in range(m):
            mean[i], std[i] = struct.unpack("<dd", f.read(16))
        payload = f.read(4 * t * m * h * w)
        fields = np.frombuffer(payload, dtype="<f4").reshape(t, m, h, w).copy()
    return Trajectory(fields, dt, names, (bool(py), bool(px)), mean, std)


def import_external(src, dt: float | None = None, field_names=None,
                    periodic=(False, False)) -> Trajectory:
    """Convert an external .npy/.npz snapshot stack into a Trajectory.

    Accepts a (T, M, H, W) array, either bare .npy or an .npz with a
    'fields' entry (plus optional 'dt' and 'field_names' entries that are
    used unless overridden by the arguments).
    """
    src = Path(src)
    if src.suffix == ".npz":
        with np.load(src, allow_pickle=False) as z:
            if "fields" not in z:
                raise ValueError(f"{src}: .npz must contain a 'fields' array")
            arr = z["fields"]
            if dt is None and "dt" in z:
                dt = float(z["dt"])
            if field_names is None and "field_names" in z:
                field_names = [str(s) for s in z["field_names"]]
    else:
        arr = np.load(src, allow_pickle=False)
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"{src}: expected (T, M, H, W), got shape {arr.shape}")
    if dt is None:
        dt = 1.0
    if field_names is None:
        field_names = [f"field{i}" for i in range(arr.shape[1])]
    return Trajectory(arr, dt, list(field_names), tuple(periodic)).with_stats()


def pooled_stats(trajs: list[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    """Per-field mean/std pooled over a set of trajectories (training stats)."""
    if not trajs:
        raise ValueError("no trajectories")
    m = trajs[0].num_fields
    for tr in trajs:
        if tr.num_fields != m:
            raise ValueError("trajectories disagree on field count")
    counts = np.array([tr.fields[:, 0].size for tr in trajs], np.float64)
    means = np.stack([tr.fields.astype(np.float64).mean(axis=(0, 2, 3)) for tr in trajs])
    sqs = np.stack([(tr.fields.astype(np.float64) ** 2).mean(axis=(0, 2, 3)) for tr in trajs])
    wts = counts[:, None] / counts.sum()
    mean = (means * wts).sum(axis=0)
    second = (sqs * wts).sum(axis=0)
    var = np.maximum(second - mean ** 2, 0.0)
    return mean, np.sqrt(var)
