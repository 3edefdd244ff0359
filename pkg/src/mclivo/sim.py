"""Synthetic planar world, sensor rig and ground truth for closed-loop runs.

The world is a set of textured rectangles. Cameras render it by casting one
ray per pixel and then applying the inverse photometric model, so that
normalizing a render gives back scene radiance. LiDAR rays are cast from the
ground-truth pose at each point's own timestamp.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage

from .errors import OutOfRange, ScenarioError
from .geom import CameraModel, Pose, pixel_rays
from .imgproc import bilinear
from .imu import GRAVITY, ProcessNoise
from .photo import PhotometricCalib
from .sync import CameraFrame, ImuSample, LidarPoints, TimedPoint, assemble_packet

# --- world ---------------------------------------------------------------------


@dataclass
class WorldPlane:
    """Rectangle ``origin + a*u + b*v`` for ``a in [0, extent[0]]``, ``b in [0, extent[1]]``."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    extent: tuple
    texture: np.ndarray
    texel: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if min(self.extent) <= 0:
            raise ScenarioError("plane extents must be positive")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)

    def shade(self, a, b) -> np.ndarray:
        tex = self.texture
        ta = np.clip(np.asarray(a) / self.texel, 0.0, tex.shape[1] - 1.0)
        tb = np.clip(np.asarray(b) / self.texel, 0.0, tex.shape[0] - 1.0)
        return bilinear(tex, ta, tb)


def noise_texture(shape, rng, sigmas=(5.0, 14.0, 40.0), weights=(0.5, 0.35, 0.25),
                  lo: float = 0.05, hi: float = 0.75) -> np.ndarray:
    """Sum of Gaussian-smoothed white-noise octaves squashed smoothly into ``(lo, hi)``.

    A tanh squash instead of clipping keeps the texture free of kinks, so
    resampled renders differ only by interpolation error.
    """
    acc = np.zeros(shape)
    for s, w in zip(sigmas, weights):
        n = ndimage.gaussian_filter(rng.standard_normal(shape), s, mode="wrap")
        acc += w * n / n.std()
    acc /= np.sqrt(np.sum(np.square(weights)))
    return 0.5 * (lo + hi) + 0.5 * (hi - lo) * np.tanh(acc / 3.0)


@dataclass(frozen=True)
class WorldSpec:
    kind: str = "ring"          # ring corridor or box room
    outer: float = 10.3         # half-size of the outer square [m]
    inner: float = 6.3          # half-size of the inner block (ring only) [m]
    height: float = 3.0
    texel: float = 0.01
    texture_sigmas: tuple = (5.0, 14.0, 40.0)   # in texels
    uniform: float | None = None   # constant radiance instead of noise


class World:
    def __init__(self, spec: WorldSpec, seed: int):
        self.spec = spec
        self.planes: list[WorldPlane] = []
        ss = np.random.SeedSequence([seed, 1])
        h = spec.height
        rects = []
        o, i = spec.outer, spec.inner
        ex, ey, ez = np.eye(3)
        # floor and ceiling
        rects.append(([-o, -o, 0.0], ex, ey, (2 * o, 2 * o)))
        rects.append(([-o, -o, h], ex, ey, (2 * o, 2 * o)))
        # outer walls
        rects.append(([-o, -o, 0.0], ex, ez, (2 * o, h)))
        rects.append(([-o, o, 0.0], ex, ez, (2 * o, h)))
        rects.append(([-o, -o, 0.0], ey, ez, (2 * o, h)))
        rects.append(([o, -o, 0.0], ey, ez, (2 * o, h)))
        if spec.kind == "ring":
            rects.append(([-i, -i, 0.0], ex, ez, (2 * i, h)))
            rects.append(([-i, i, 0.0], ex, ez, (2 * i, h)))
            rects.append(([-i, -i, 0.0], ey, ez, (2 * i, h)))
            rects.append(([i, -i, 0.0], ey, ez, (2 * i, h)))
        elif spec.kind != "box":
            raise ScenarioError(f"unknown world kind {spec.kind!r}")
        for (org, u, v, ext), child in zip(rects, ss.spawn(len(rects))):
            shape = (int(np.ceil(ext[1] / spec.texel)) + 1, int(np.ceil(ext[0] / spec.texel)) + 1)
            if spec.uniform is not None:
                tex = np.full(shape, float(spec.uniform))
            else:
                tex = noise_texture(shape, np.random.default_rng(child), spec.texture_sigmas)
            self.planes.append(WorldPlane(org, u, v, ext, tex, spec.texel))
        self._n = np.array([p.normal for p in self.planes])
        self._o = np.array([p.origin for p in self.planes])
        self._u = np.array([p.u for p in self.planes])
        self._v = np.array([p.v for p in self.planes])
        self._ext = np.array([p.extent for p in self.planes], dtype=float)

    def intersect(self, origins, dirs):
        """Nearest hit per ray: ``(s, plane index, a, b)`` with ``s = inf`` on a miss."""
        origins = np.broadcast_to(np.asarray(origins, dtype=float), np.shape(dirs))
        dirs = np.asarray(dirs, dtype=float)
        n = len(dirs)
        best = np.full(n, np.inf)
        idx = np.full(n, -1)
        aa = np.zeros(n)
        bb = np.zeros(n)
        for j in range(len(self.planes)):
            nj = self._n[j]
            denom = dirs @ nj
            with np.errstate(divide="ignore", invalid="ignore"):
                s = ((self._o[j] - origins) @ nj) / denom
            ok = np.isfinite(s) & (s > 1e-9) & (s < best)
            if not ok.any():
                continue
            hit = origins[ok] + s[ok, None] * dirs[ok]
            rel = hit - self._o[j]
            a = rel @ self._u[j]
            b = rel @ self._v[j]
            tol = 1e-9
            inside = (a >= -tol) & (a <= self._ext[j, 0] + tol) & (b >= -tol) & (b <= self._ext[j, 1] + tol)
            sel = np.flatnonzero(ok)[inside]
            best[sel] = s[sel]
            idx[sel] = j
            aa[sel] = a[inside]
            bb[sel] = b[inside]
        return best, idx, aa, bb

    def radiance(self, idx, a, b) -> np.ndarray:
        out = np.zeros(len(idx))
        for j in np.unique(idx):
            if j < 0:
                continue
            m = idx == j
            out[m] = self.planes[j].shade(a[m], b[m])
        return out

    def plane_of(self, j) -> tuple:
        """``(n, d)`` with ``n . x + d = 0``."""
        n = self._n[j]
        return n, float(-n @ self._o[j])


# --- trajectories --------------------------------------------------------------

@dataclass(frozen=True)
class TrajectorySpec:
    family: str = "corridor"    # corridor | circle | figure_eight
    duration: float = 60.0
    speed: float = 1.0          # mean speed [m/s]; sets the loop size
    height: float = 1.5
    corner: float = 1.0 / 9.0   # corridor corner sharpness
    loops: float = 1.0
    z_amp: float = 0.0
    z_period: float = 10.0
    roll_amp: float = 0.0
    pitch_amp: float = 0.0
    roll_period: float = 7.0
    pitch_period: float = 11.0


@dataclass
class GtSample:
    pose: Pose
    velocity: np.ndarray
    acceleration: np.ndarray
    omega: np.ndarray           # body-frame angular rate


def _rot_zyx(yaw, pitch, roll) -> np.ndarray:
    """Stacked ``Rz(yaw) Ry(pitch) Rx(roll)`` for array inputs, shape (N, 3, 3)."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty(np.shape(yaw) + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


class Trajectory:
    """Closed-form ground truth; yaw follows the horizontal velocity."""

    def __init__(self, spec: TrajectorySpec):
        if spec.family not in ("corridor", "circle", "figure_eight"):
            raise ScenarioError(f"unknown trajectory family {spec.family!r}")
        if not spec.duration > 0:
            raise ScenarioError("duration must be positive")
        self.spec = spec
        self.omega = 2.0 * np.pi * spec.loops / spec.duration
        length = spec.speed * spec.duration / spec.loops
        th = np.linspace(0.0, 2.0 * np.pi, 200_001)
        unit = self._shape(th, 1.0)[0]
        self.scale = length / np.sum(np.abs(np.diff(unit)))

    def _shape(self, th, scale):
        """Planar curve and its first two derivatives w.r.t. ``th``."""
        s = self.spec
        if s.family == "circle":
            z = scale * np.exp(1j * th)
            return z, 1j * z, -z
        if s.family == "figure_eight":
            z = scale * (np.sin(th) + 0.5j * np.sin(2 * th))
            d1 = scale * (np.cos(th) + 1j * np.cos(2 * th))
            d2 = scale * (-np.sin(th) - 2j * np.sin(2 * th))
            return z, d1, d2
        k = s.corner
        rot = scale * np.exp(1j * np.pi / 4)
        e1, e3 = np.exp(1j * th), np.exp(-3j * th)
        return (rot * (e1 + k * e3), rot * (1j * e1 - 3j * k * e3), rot * (-e1 - 9 * k * e3))

    def _phase(self, t):
        # corridor starts mid-way along a straight side
        return self.omega * t + (np.pi / 4 if self.spec.family == "corridor" else 0.0)

    def evaluate(self, t):
        """Vectorised pose, velocity, acceleration and body rates at ``t``."""
        s = self.spec
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < -1e-12) or np.any(t > s.duration + 1e-12):
            raise OutOfRange(f"time outside [0, {s.duration}]")
        w = self.omega
        z, d1, d2 = self._shape(self._phase(t), self.scale)
        c1, c2 = d1 * w, d2 * w * w
        wz = 2 * np.pi / s.z_period
        pos = np.column_stack([z.real, z.imag, s.height + s.z_amp * np.sin(wz * t)])
        vel = np.column_stack([c1.real, c1.imag, s.z_amp * wz * np.cos(wz * t)])
        acc = np.column_stack([c2.real, c2.imag, -s.z_amp * wz * wz * np.sin(wz * t)])
        yaw = np.angle(c1)
        sp2 = np.abs(c1) ** 2
        yaw_rate = np.divide((np.conj(c1) * c2).imag, sp2, out=np.zeros_like(sp2), where=sp2 > 0)
        wr, wp = 2 * np.pi / s.roll_period, 2 * np.pi / s.pitch_period
        roll = s.roll_amp * np.sin(wr * t)
        droll = s.roll_amp * wr * np.cos(wr * t)
        pitch = s.pitch_amp * np.sin(wp * t)
        dpitch = s.pitch_amp * wp * np.cos(wp * t)
        R = _rot_zyx(yaw, pitch, roll)
        cp, sp = np.cos(pitch), np.sin(pitch)
        cr, sr = np.cos(roll), np.sin(roll)
        # Rx^T (Ry^T (0, 0, yaw_rate) + (0, dpitch, 0)) + (droll, 0, 0)
        a0 = -sp * yaw_rate
        a1 = dpitch
        a2 = cp * yaw_rate
        omega = np.column_stack([a0 + droll, cr * a1 + sr * a2, -sr * a1 + cr * a2])
        return pos, vel, acc, R, omega, yaw_rate

    def gt_pose(self, t: float) -> GtSample:
        pos, vel, acc, R, om, _ = self.evaluate(t)
        return GtSample(Pose(R[0], pos[0]), vel[0], acc[0], om[0])

    def turn_windows(self, frac: float = 0.5, step: float = 0.01) -> list:
        """Time intervals where the yaw rate exceeds ``frac`` of its peak."""
        t = np.arange(0.0, self.spec.duration + 1e-9, step)
        rate = np.abs(self.evaluate(t)[5])
        hot = rate >= frac * rate.max()
        if rate.max() < 1e-9:
            return []
        edges = np.flatnonzero(np.diff(hot.astype(int)))
        out = []
        start = 0.0 if hot[0] else None
        for e in edges:
            if start is None:
                start = t[e + 1]
            else:
                out.append((start, t[e]))
                start = None
        if start is not None:
            out.append((start, t[-1]))
        return out


def gt_pose(spec: TrajectorySpec, t: float) -> GtSample:
    return Trajectory(spec).gt_pose(t)


# --- rig -----------------------------------------------------------------------

# camera optical frame: x right, y down, z forward; body: x forward, y left, z up
_R_BODY_FRONT = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
CAMERA_YAWS = (0.0, 90.0, -90.0, 180.0)      # front, left, right, back


@dataclass(frozen=True)
class RigSpec:
    cameras: int = 4
    width: int = 320
    height: int = 240
    fov_deg: float = 90.0
    lever: float = 0.1
    alphas: tuple = (1.0, 1.5, 1.25, 2.0)
    vignetting: tuple = (0.3, 0.0, 0.0)
    image_noise: float = 0.0
    corrupt_camera: int | None = None
    corrupt_sigma: float = 30.0 / 255.0


def build_cameras(rig: RigSpec) -> list:
    f = 0.5 * rig.width / np.tan(np.radians(rig.fov_deg) / 2)
    cams = []
    for k in range(rig.cameras):
        yaw = np.radians(CAMERA_YAWS[k % 4]) + (k // 4) * np.pi / 4
        cz, sz = np.cos(yaw), np.sin(yaw)
        Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1.0]])
        R_bc = Rz @ _R_BODY_FRONT
        t_bc = Rz @ np.array([rig.lever, 0.0, 0.0])
        T_cb = Pose(R_bc, t_bc).inverse()
        cams.append(CameraModel(f, f, (rig.width - 1) / 2, (rig.height - 1) / 2,
                                rig.width, rig.height, T_cb))
    return cams


def build_calibs(rig: RigSpec, cams) -> list:
    return [PhotometricCalib.for_camera(c, rig.alphas[k % len(rig.alphas)], rig.vignetting)
            for k, c in enumerate(cams)]


def render_camera(world: World, T_wc: Pose, cam: CameraModel, calib: PhotometricCalib,
                  noise: float = 0.0, rng=None, return_depth: bool = False):
    """Raw image ``L / (alpha * V)`` of the world seen from camera pose ``T_wc``."""
    rays = pixel_rays(cam) @ T_wc.R.T
    s, idx, a, b = world.intersect(T_wc.t, rays)
    L = world.radiance(idx, a, b).reshape(cam.height, cam.width)
    raw = L / calib.gain_image(L.shape)
    if noise > 0:
        raw = raw + (rng or np.random.default_rng()).normal(scale=noise, size=raw.shape)
    raw = np.clip(raw, 0.0, 1.0)
    if return_depth:
        return raw, s.reshape(cam.height, cam.width)
    return raw


# --- lidar and imu ---------------------------------------------------------------

@dataclass(frozen=True)
class LidarSpec:
    azimuth: int = 360
    elevation: int = 16
    fov_deg: tuple = (-20.0, 20.0)
    scan_period: float = 0.1
    range_noise: float = 0.01
    max_range: float = 30.0


def lidar_directions(spec: LidarSpec) -> np.ndarray:
    """(azimuth, elevation, 3) unit rays in the body frame."""
    az = 2 * np.pi * np.arange(spec.azimuth) / spec.azimuth
    el = np.radians(np.linspace(spec.fov_deg[0], spec.fov_deg[1], spec.elevation))
    A, E = np.meshgrid(az, el, indexing="ij")
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)


def scan_lidar(world: World, traj: Trajectory, t0: float, spec: LidarSpec, rng=None,
               as_points: bool = False):
    """One sweep over ``(t0, t0 + period]``; columns are timed linearly in azimuth."""
    dirs = lidar_directions(spec)
    times = t0 + spec.scan_period * (np.arange(spec.azimuth) + 1) / spec.azimuth
    pos, _, _, R, _, _ = traj.evaluate(np.minimum(times, traj.spec.duration))
    world_dirs = np.einsum("aij,aej->aei", R, dirs)
    origins = np.repeat(pos, spec.elevation, axis=0)
    s, idx, _, _ = world.intersect(origins, world_dirs.reshape(-1, 3))
    t = np.repeat(times, spec.elevation)
    if spec.range_noise > 0:
        s = s + (rng or np.random.default_rng()).normal(scale=spec.range_noise, size=s.shape)
    ok = np.isfinite(s) & (s > 0.1) & (s < spec.max_range)
    xyz = dirs.reshape(-1, 3)[ok] * s[ok, None]
    pts = LidarPoints(xyz, t[ok], np.zeros(int(ok.sum())))
    if as_points:
        return [TimedPoint(p, tt) for p, tt in zip(pts.xyz, pts.t)]
    return pts


@dataclass(frozen=True)
class ImuSpec:
    rate: float = 200.0
    gyro_noise: float = 1e-3       # density, rad/s/sqrt(Hz)
    accel_noise: float = 1e-2      # density, m/s^2/sqrt(Hz)
    gyro_bias: tuple = (0.002, -0.001, 0.0015)
    accel_bias: tuple = (0.02, -0.01, 0.015)


def sample_imu(traj: Trajectory, spec: ImuSpec, rng=None, t0: float = 0.0,
               t1: float | None = None) -> list:
    if spec.rate < 100:
        raise ScenarioError("IMU rate must be at least 100 Hz")
    t1 = traj.spec.duration if t1 is None else t1
    n = int(np.floor((t1 - t0) * spec.rate + 1e-9)) + 1
    t = t0 + np.arange(n) / spec.rate
    pos, vel, acc, R, om, _ = traj.evaluate(t)
    f_w = acc - GRAVITY
    accel = np.einsum("nji,nj->ni", R, f_w) + np.asarray(spec.accel_bias)
    gyro = om + np.asarray(spec.gyro_bias)
    if rng is not None:
        sd = np.sqrt(spec.rate)
        gyro = gyro + rng.normal(scale=spec.gyro_noise * sd, size=gyro.shape)
        accel = accel + rng.normal(scale=spec.accel_noise * sd, size=accel.shape)
    return [ImuSample(float(t[k]), gyro[k], accel[k]) for k in range(n)]


# --- scenario --------------------------------------------------------------------

@dataclass(frozen=True)
class FilterSpec:
    lidar_sigma: float = 0.02
    photo_sigma: float = 4.0 / 255.0
    max_iter: int = 5
    schedule: str = "sequential"
    map_voxel: float = 0.5
    scan_voxel: float = 0.2
    grid_size: int = 40
    max_depth: float = 8.0
    t_mig: float = 1.0


@dataclass(frozen=True)
class Scenario:
    name: str = "corridor"
    seed: int = 7
    world: WorldSpec = field(default_factory=WorldSpec)
    trajectory: TrajectorySpec = field(default_factory=lambda: TrajectorySpec(
        z_amp=0.05, roll_amp=0.02, pitch_amp=0.02))
    rig: RigSpec = field(default_factory=RigSpec)
    lidar: LidarSpec = field(default_factory=LidarSpec)
    imu: ImuSpec = field(default_factory=ImuSpec)
    filter: FilterSpec = field(default_factory=FilterSpec)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {"world": WorldSpec, "trajectory": TrajectorySpec, "rig": RigSpec,
             "lidar": LidarSpec, "imu": ImuSpec, "filter": FilterSpec}


def scenario_from_dict(data: dict, base: Scenario | None = None) -> Scenario:
    base = base or Scenario()
    changes = {}
    for key, value in (data or {}).items():
        if key in ("name", "seed"):
            changes[key] = value
            continue
        if key not in _SECTIONS:
            raise ScenarioError(f"unknown scenario section {key!r}")
        if not isinstance(value, dict):
            raise ScenarioError(f"section {key!r} must be a mapping")
        current = getattr(base, key)
        known = set(current.__dataclass_fields__)
        bad = set(value) - known
        if bad:
            raise ScenarioError(f"unknown keys in {key}: {sorted(bad)}")
        fixed = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
        changes[key] = replace(current, **fixed)
    return replace(base, **changes)


def builtin_scenarios() -> list:
    root = resources.files("mclivo") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def read_scenario_data(path_or_name) -> dict:
    """Raw mapping of a YAML scenario file, or of a built-in one by name."""
    p = Path(str(path_or_name))
    if p.is_file():
        text = p.read_text()
    else:
        res = resources.files("mclivo") / "scenarios" / f"{path_or_name}.yaml"
        if not res.is_file():
            raise ScenarioError(f"no scenario file or built-in named {path_or_name!r}")
        text = res.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"bad YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ScenarioError("scenario file must hold a mapping")
    return data or {}


def load_scenario(path_or_name) -> Scenario:
    """Scenario from a YAML file or built-in name; a ``run`` section is ignored here."""
    data = dict(read_scenario_data(path_or_name))
    data.pop("run", None)
    return scenario_from_dict(data)


# --- simulation --------------------------------------------------------------------

class Simulation:
    """Lazily generated sensor streams for one scenario and seed.

    Clean renders are cached as 16-bit images; per-frame image noise is drawn
    on top from a stream keyed by (seed, epoch, camera), so results do not
    depend on the order in which frames are requested.
    """

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.traj = Trajectory(scenario.trajectory)
        self.cams = build_cameras(scenario.rig)
        self.calibs = build_calibs(scenario.rig, self.cams)
        self.renders = 0
        self._cache: dict = {}

    @cached_property
    def world(self) -> World:
        return World(self.sc.world, self.sc.seed)

    @property
    def period(self) -> float:
        return self.sc.lidar.scan_period

    @property
    def n_epochs(self) -> int:
        return int(np.floor(self.sc.trajectory.duration / self.period + 1e-9))

    def epoch_time(self, k: int) -> float:
        return k * self.period

    def _rng(self, *key) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.sc.seed, *key]))

    @cached_property
    def imu(self) -> list:
        return sample_imu(self.traj, self.sc.imu, self._rng(2))

    def scan(self, k: int) -> LidarPoints:
        """Points of ``(t_{k-1}, t_k]`` in the body frame at their own times."""
        return scan_lidar(self.world, self.traj, self.epoch_time(k - 1), self.sc.lidar,
                          self._rng(3, k))

    def body_pose(self, t: float) -> Pose:
        return self.traj.gt_pose(t).pose

    def camera_pose(self, t: float, cam_id: int) -> Pose:
        return self.body_pose(t) @ self.cams[cam_id].T_cb.inverse()

    def clean_frame(self, k: int, cam_id: int) -> np.ndarray:
        key = (k, cam_id)
        if key not in self._cache:
            raw = render_camera(self.world, self.camera_pose(self.epoch_time(k), cam_id),
                                self.cams[cam_id], self.calibs[cam_id])
            self._cache[key] = np.round(raw * 65535).astype(np.uint16)
            self.renders += 1
        return self._cache[key].astype(float) / 65535.0

    def frame(self, k: int, cam_id: int) -> CameraFrame:
        img = self.clean_frame(k, cam_id)
        rig = self.sc.rig
        sigma = rig.image_noise
        if rig.corrupt_camera is not None and cam_id == rig.corrupt_camera:
            sigma = np.hypot(sigma, rig.corrupt_sigma)
        if sigma > 0:
            img = np.clip(img + self._rng(4, k, cam_id).normal(scale=sigma, size=img.shape),
                          0.0, 1.0)
        return CameraFrame(cam_id, img, self.calibs[cam_id].alpha, self.epoch_time(k))

    def frames(self, k: int, cams=None) -> list:
        cams = range(len(self.cams)) if cams is None else cams
        return [self.frame(k, c) for c in cams]

    def imu_between(self, t0: float, t1: float) -> list:
        rate = self.sc.imu.rate
        i0 = int(np.floor(t0 * rate + 1e-9))
        i1 = int(np.ceil(t1 * rate - 1e-9))
        return self.imu[i0:i1 + 1]

    def packet(self, k: int, cams=None):
        """Synchronized packet for epoch ``k >= 1``; ``cams=[]`` skips rendering."""
        t_prev, t = self.epoch_time(k - 1), self.epoch_time(k)
        frames = self.frames(k, cams) if cams is None or len(cams) else []
        return assemble_packet(self.scan(k), self.imu_between(t_prev, t), frames,
                               t_prev=t_prev, epoch=k, nominal_period=1.0 / self.sc.imu.rate,
                               t=t)

    def gt_trajectory(self):
        ts = np.array([self.epoch_time(k) for k in range(self.n_epochs + 1)])
        pos, _, _, R, _, _ = self.traj.evaluate(ts)
        return ts, pos, R

    def process_noise(self) -> ProcessNoise:
        s = self.sc.imu
        return ProcessNoise(gyro=s.gyro_noise, accel=s.accel_noise)

    def dump(self, out_dir, cams=None, n_epochs: int | None = None) -> None:
        from .sync import write_sequence
        n = self.n_epochs if n_epochs is None else min(n_epochs, self.n_epochs)
        scans = LidarPoints.concat([self.scan(k) for k in range(1, n + 1)])
        frames = [self.frames(k, cams) for k in range(n + 1)]
        imu = [s for s in self.imu if s.t <= self.epoch_time(n) + 1e-9]
        write_sequence(out_dir, scans, imu, frames)
