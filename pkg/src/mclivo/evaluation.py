"""Trajectory error metrics, TUM trajectory files and binary PLY maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import MalformedFile, TooFewPairs
from .geom import Pose


@dataclass
class TrajectoryFile:
    t: np.ndarray          # (N,)
    p: np.ndarray          # (N, 3)
    q: np.ndarray          # (N, 4) as x, y, z, w

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 4)
        if not len(self.t) == len(self.p) == len(self.q):
            raise ValueError("length mismatch")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if len(self.q) and np.abs(np.linalg.norm(self.q, axis=1) - 1).max() > 1e-6:
            raise ValueError("quaternions must be unit norm")

    def __len__(self):
        return len(self.t)

    @classmethod
    def from_rotations(cls, t, p, R):
        q = Rotation.from_matrix(np.asarray(R)).as_quat() if len(t) else np.zeros((0, 4))
        return cls(t, p, q)

    def rotations(self) -> np.ndarray:
        return Rotation.from_quat(self.q).as_matrix()

    def transformed(self, T: Pose) -> "TrajectoryFile":
        R = T.R @ self.rotations()
        return TrajectoryFile.from_rotations(self.t, T.apply(self.p), R)


def write_tum(path, traj: TrajectoryFile) -> None:
    with open(path, "w") as fh:
        for t, p, q in zip(traj.t, traj.p, traj.q):
            fh.write(f"{t:.6f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                     f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


def read_tum(path) -> TrajectoryFile:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise MalformedFile(f"{path}:{n}: expected 8 fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise MalformedFile(f"{path}:{n}: {exc}") from exc
    a = np.array(rows).reshape(-1, 8)
    q = a[:, 4:8]
    if len(q):
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
    return TrajectoryFile(a[:, 0], a[:, 1:4], q)


def associate(est: TrajectoryFile, gt: TrajectoryFile, max_gap: float = 0.01):
    """Mutual nearest-timestamp pairs closer than ``max_gap``; never interpolates."""
    if len(est) == 0 or len(gt) == 0:
        return np.zeros(0, int), np.zeros(0, int)

    def nearest(a, b):
        k = np.clip(np.searchsorted(b, a), 1, len(b) - 1) if len(b) > 1 else np.zeros(len(a), int)
        if len(b) == 1:
            return k
        left = b[k - 1]
        right = b[k]
        return np.where(np.abs(a - left) <= np.abs(right - a), k - 1, k)

    ie = np.arange(len(est))
    ig = nearest(est.t, gt.t)
    back = nearest(gt.t, est.t)
    ok = (back[ig] == ie) & (np.abs(est.t - gt.t[ig]) <= max_gap + 1e-12)
    return ie[ok], ig[ok]


def rigid_fit(src, dst) -> Pose:
    """Least-squares rotation and translation with ``dst ~ R src + t``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ S @ Vt
    return Pose(R, mu_d - R @ mu_s)


def align(est: TrajectoryFile, gt: TrajectoryFile, max_gap: float = 0.01) -> Pose:
    """Rigid transform (no scale) that maps the estimate onto ground truth."""
    ie, ig = associate(est, gt, max_gap)
    if len(ie) < 3:
        raise TooFewPairs(f"{len(ie)} associated poses, need at least 3")
    return rigid_fit(est.p[ie], gt.p[ig])


def ate_rmse(est: TrajectoryFile, gt: TrajectoryFile, max_gap: float = 0.01) -> float:
    ie, ig = associate(est, gt, max_gap)
    if len(ie) < 3:
        raise TooFewPairs(f"{len(ie)} associated poses, need at least 3")
    T = rigid_fit(est.p[ie], gt.p[ig])
    err = T.apply(est.p[ie]) - gt.p[ig]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


# --- PLY -----------------------------------------------------------------------------

_PLY_PROPS = [("x", "f8"), ("y", "f8"), ("z", "f8"),
              ("red", "u1"), ("green", "u1"), ("blue", "u1"),
              ("voxel_x", "i4"), ("voxel_y", "i4"), ("voxel_z", "i4"),
              ("n_obs", "u2")]
_PLY_TYPES = {"f8": "double", "u1": "uchar", "i4": "int", "u2": "ushort", "f4": "float"}
_PLY_BACK = {"double": "f8", "float64": "f8", "float": "f4", "float32": "f4", "uchar": "u1",
             "uint8": "u1", "int": "i4", "int32": "i4", "ushort": "u2", "uint16": "u2",
             "char": "i1", "short": "i2", "uint": "u4"}


def write_ply(path, xyz, rgb, voxel, n_obs) -> None:
    """Binary little-endian PLY with colour, source voxel key and observation count."""
    n = len(xyz)
    dt = np.dtype([(name, "<" + t) for name, t in _PLY_PROPS])
    data = np.zeros(n, dtype=dt)
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    rgb = np.asarray(rgb).reshape(-1, 3)
    voxel = np.asarray(voxel).reshape(-1, 3)
    for k, c in enumerate("xyz"):
        data[c] = xyz[:, k]
        data["voxel_" + c] = voxel[:, k]
    for k, c in enumerate(("red", "green", "blue")):
        data[c] = rgb[:, k]
    data["n_obs"] = np.asarray(n_obs).reshape(-1)
    header = ["ply", "format binary_little_endian 1.0",
              "comment voxel_x/y/z: integer key of the map voxel the point came from",
              "comment n_obs: number of camera observations behind the colour",
              f"element vertex {n}"]
    header += [f"property {_PLY_TYPES[t]} {name}" for name, t in _PLY_PROPS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    end = raw.find(marker)
    if not raw.startswith(b"ply\n") or end < 0:
        raise MalformedFile(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii", "replace").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise MalformedFile(f"{path}: only binary little-endian PLY is supported")
    n = None
    fields = []
    for ln in lines:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "element":
            raise MalformedFile(f"{path}: unexpected element {parts[1]!r}")
        elif parts[:1] == ["property"]:
            if len(parts) != 3 or parts[1] not in _PLY_BACK:
                raise MalformedFile(f"{path}: unsupported property line {ln!r}")
            fields.append((parts[2], "<" + _PLY_BACK[parts[1]]))
    if n is None:
        raise MalformedFile(f"{path}: missing vertex element")
    dt = np.dtype(fields)
    body = raw[end + len(marker):]
    if len(body) != n * dt.itemsize:
        raise MalformedFile(f"{path}: expected {n * dt.itemsize} bytes of data, got {len(body)}")
    return np.frombuffer(body, dtype=dt, count=n)


def count_colored_points(path) -> int:
    """Points that received colour from at least one camera observation."""
    data = read_ply(path)
    if "n_obs" in data.dtype.names:
        return int(np.count_nonzero(data["n_obs"] > 0))
    return len(data)
