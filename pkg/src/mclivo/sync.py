"""Sensor records and assembly of per-epoch measurement packets.

Camera triggers define the epochs. Packet ``k`` holds the LiDAR points with
timestamps in ``(t_{k-1}, t_k]``, the IMU samples spanning ``[t_{k-1}, t_k]``
and the simultaneously triggered frames at ``t_k``. Inside a packet every
LiDAR point is tagged with the temporally nearest camera trigger.
"""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyFrameList, ImuGap, UnsyncedFrames

SYNC_TOL = 1e-6
IMU_GAP_FACTOR = 3.0


@dataclass(frozen=True)
class TimedPoint:
    position: np.ndarray
    timestamp: float
    intensity: float = 0.0


@dataclass
class LidarPoints:
    """Column-oriented batch of timed LiDAR returns (sensor frame)."""

    xyz: np.ndarray
    t: np.ndarray
    intensity: np.ndarray = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        if self.intensity is None:
            self.intensity = np.zeros(len(self.t))
        self.intensity = np.asarray(self.intensity, dtype=float).reshape(-1)

    def __len__(self):
        return len(self.t)

    @classmethod
    def from_points(cls, points: Iterable[TimedPoint]) -> "LidarPoints":
        points = list(points)
        if not points:
            return cls.empty()
        return cls(np.array([p.position for p in points]),
                   np.array([p.timestamp for p in points]),
                   np.array([p.intensity for p in points]))

    @classmethod
    def empty(cls) -> "LidarPoints":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0))

    def select(self, mask) -> "LidarPoints":
        return LidarPoints(self.xyz[mask], self.t[mask], self.intensity[mask])

    @classmethod
    def concat(cls, parts: Sequence["LidarPoints"]) -> "LidarPoints":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(np.vstack([p.xyz for p in parts]),
                   np.concatenate([p.t for p in parts]),
                   np.concatenate([p.intensity for p in parts]))


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class CameraFrame:
    """One raw image. ``cam_id`` is a 0-based index into the rig."""

    cam_id: int
    image: np.ndarray
    exposure: float
    t: float


@dataclass
class MeasurementPacket:
    epoch: int
    t_prev: float
    t: float
    points: LidarPoints
    segment: np.ndarray          # per point: 0 -> frame at t_prev, 1 -> frame at t
    imu: list
    frames: list = field(default_factory=list)

    @property
    def trigger(self) -> float:
        return self.t


def assign_point(point_ts: float, frame_timestamps: Sequence[float]) -> int:
    """Index of the temporally nearest frame; ties go to the earlier frame."""
    if len(frame_timestamps) == 0:
        raise EmptyFrameList("no camera frames to assign to")
    i = bisect.bisect_left(frame_timestamps, point_ts)
    if i == 0:
        return 0
    if i == len(frame_timestamps):
        return i - 1
    before = point_ts - frame_timestamps[i - 1]
    after = frame_timestamps[i] - point_ts
    return i - 1 if before <= after else i


def assign_points(point_ts, frame_timestamps) -> np.ndarray:
    """Vectorised :func:`assign_point`."""
    ft = np.asarray(frame_timestamps, dtype=float)
    if ft.size == 0:
        raise EmptyFrameList("no camera frames to assign to")
    ts = np.asarray(point_ts, dtype=float)
    i = np.searchsorted(ft, ts, side="left")
    lo = np.clip(i - 1, 0, ft.size - 1)
    hi = np.clip(i, 0, ft.size - 1)
    pick_lo = (ts - ft[lo]) <= (ft[hi] - ts)
    out = np.where(pick_lo, lo, hi)
    out[i == 0] = 0
    out[i == ft.size] = ft.size - 1
    return out


def check_synced(frames: Sequence[CameraFrame], tol: float = SYNC_TOL) -> float:
    if not frames:
        raise EmptyFrameList("packet has no camera frames")
    ts = np.array([f.t for f in frames])
    if ts.max() - ts.min() > tol:
        raise UnsyncedFrames(f"trigger spread {ts.max() - ts.min():.3g} s exceeds {tol:g} s")
    return float(ts[0])


def check_imu(imu: Sequence[ImuSample], t_start: float, t_end: float,
              nominal_period: float | None = None) -> None:
    if not imu:
        raise ImuGap("no IMU samples")
    ts = np.array([s.t for s in imu])
    if nominal_period is None:
        nominal_period = float(np.median(np.diff(ts))) if len(ts) > 1 else np.inf
    limit = IMU_GAP_FACTOR * nominal_period
    if len(ts) > 1 and np.diff(ts).max() > limit:
        raise ImuGap(f"IMU gap {np.diff(ts).max():.4g} s > {limit:.4g} s")
    if ts[0] > t_start + 1e-9 or ts[-1] < t_end - 1e-9:
        raise ImuGap(f"IMU span [{ts[0]:.4f}, {ts[-1]:.4f}] does not cover "
                     f"[{t_start:.4f}, {t_end:.4f}]")


def assemble_packet(scan, imu: Sequence[ImuSample], frames: Sequence[CameraFrame],
                    t_prev: float | None = None, epoch: int = 0,
                    nominal_period: float | None = None,
                    sync_tol: float = SYNC_TOL, t: float | None = None) -> MeasurementPacket:
    """Build one packet from an already-windowed scan, IMU span and frame set.

    ``frames`` may be empty only for a LiDAR-inertial run, in which case the
    epoch time ``t`` must be passed explicitly.
    """
    if not isinstance(scan, LidarPoints):
        scan = LidarPoints.from_points(scan)
    if frames or t is None:
        t = check_synced(frames, sync_tol)
    if t_prev is None:
        t_prev = float(imu[0].t) if imu else t
    check_imu(imu, t_prev, t, nominal_period)
    if len(scan):
        span = (imu[0].t, imu[-1].t)
        if scan.t.min() < span[0] - 1e-12 or scan.t.max() > span[1] + 1e-12:
            raise ImuGap("LiDAR points outside the IMU span")
    segment = assign_points(scan.t, [t_prev, t]) if len(scan) else np.zeros(0, int)
    return MeasurementPacket(epoch, t_prev, t, scan, segment, list(imu), list(frames))


class PacketAssembler:
    """Streams packets from continuous LiDAR / IMU streams and trigger times.

    Consecutive packets share exactly the IMU sample at the common trigger
    time; every LiDAR point with ``t_first < tau <= t_last`` ends up in
    exactly one packet.
    """

    def __init__(self, points: LidarPoints, imu: Sequence[ImuSample],
                 nominal_period: float | None = None, sync_tol: float = SYNC_TOL):
        order = np.argsort(points.t, kind="stable")
        self.points = points.select(order)
        self.imu = list(imu)
        self.imu_t = np.array([s.t for s in self.imu])
        self.nominal_period = nominal_period
        self.sync_tol = sync_tol

    def packet(self, epoch: int, t_prev: float, frames: Sequence[CameraFrame],
               t: float | None = None) -> MeasurementPacket:
        if frames:
            t = check_synced(frames, self.sync_tol)
        elif t is None:
            raise EmptyFrameList("need frames or an explicit epoch time")
        lo = np.searchsorted(self.points.t, t_prev, side="right")
        hi = np.searchsorted(self.points.t, t, side="right")
        scan = self.points.select(slice(lo, hi))
        i0 = np.searchsorted(self.imu_t, t_prev + 1e-9, side="right") - 1
        i1 = np.searchsorted(self.imu_t, t - 1e-9, side="left")
        imu = self.imu[max(i0, 0): i1 + 1]
        check_imu(imu, t_prev, t, self.nominal_period)
        segment = assign_points(scan.t, [t_prev, t]) if len(scan) else np.zeros(0, int)
        return MeasurementPacket(epoch, t_prev, t, scan, segment, imu, list(frames))


# --- recorded-sequence layout -------------------------------------------------

def write_pgm(path: Path, image: np.ndarray) -> None:
    """16-bit binary PGM of an intensity image in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    data = np.round(img * 65535).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(float) / maxval


def write_sequence(out_dir, points: LidarPoints, imu: Sequence[ImuSample],
                   frames_by_epoch: Iterable[Sequence[CameraFrame]]) -> None:
    """Dump streams in the on-disk layout read by :func:`load_sequence`.

    ``lidar/<epoch>.csv`` holds the points of ``(t_{k-1}, t_k]``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "imu.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "wx", "wy", "wz", "ax", "ay", "az"])
        for s in imu:
            w.writerow([repr(float(s.t)), *map(repr, map(float, s.gyro)),
                        *map(repr, map(float, s.accel))])
    (out / "lidar").mkdir(exist_ok=True)
    metas: dict[int, list] = {}
    t_prev = -np.inf
    for epoch, frames in enumerate(frames_by_epoch):
        t = frames[0].t
        sel = (points.t > t_prev) & (points.t <= t)
        with open(out / "lidar" / f"{epoch}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "z", "intensity"])
            for tt, p, it in zip(points.t[sel], points.xyz[sel], points.intensity[sel]):
                w.writerow([repr(float(tt)), *map(repr, map(float, p)), repr(float(it))])
        for f in frames:
            cdir = out / f"cam{f.cam_id}"
            cdir.mkdir(exist_ok=True)
            write_pgm(cdir / f"{epoch}.pgm", f.image)
            metas.setdefault(f.cam_id, []).append((f.t, f.exposure))
        t_prev = t
    for cam_id, rows in metas.items():
        with open(out / f"cam{cam_id}" / "meta.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_trigger", "exposure"])
            for t, e in rows:
                w.writerow([repr(float(t)), repr(float(e))])


def load_sequence(in_dir):
    """Read the recorded layout; returns ``(points, imu, frames_by_epoch)``."""
    root = Path(in_dir)
    imu_rows = np.loadtxt(root / "imu.csv", delimiter=",", skiprows=1, ndmin=2)
    imu = [ImuSample(r[0], r[1:4].copy(), r[4:7].copy()) for r in imu_rows]
    lidar_files = sorted((root / "lidar").glob("*.csv"), key=lambda p: int(p.stem))
    parts = []
    for f in lidar_files:
        lines = f.read_text().splitlines()[1:]
        if lines:
            rows = np.array([[float(v) for v in ln.split(",")] for ln in lines])
            parts.append(LidarPoints(rows[:, 1:4], rows[:, 0], rows[:, 4]))
    points = LidarPoints.concat(parts)
    cam_dirs = sorted(root.glob("cam*"), key=lambda p: int(p.name[3:]))
    per_cam = []
    for cdir in cam_dirs:
        cam_id = int(cdir.name[3:])
        meta = np.loadtxt(cdir / "meta.csv", delimiter=",", skiprows=1, ndmin=2)
        frames = [CameraFrame(cam_id, read_pgm(cdir / f"{k}.pgm"), float(m[1]), float(m[0]))
                  for k, m in enumerate(meta)]
        per_cam.append(frames)
    n_epochs = len(lidar_files)
    frames_by_epoch = [[frames[k] for frames in per_cam] for k in range(n_epochs)]
    return points, imu, frames_by_epoch
