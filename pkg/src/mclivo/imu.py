"""Navigation state on its manifold, IMU forward propagation and scan deskewing.

Error-state layout (dimension ``18 + C``)::

    [0:3] dtheta   right-multiplicative attitude error
    [3:6] dp       position
    [6:9] dv       velocity
    [9:12] dbg     gyro bias
    [12:15] dba    accel bias
    [15:18] dg     gravity
    [18:]  dlogtau per-camera log inverse exposure
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonMonotoneTimestamps, TimestampOutOfRange
from .geom import (Pose, hat, orthonormalize, so3_exp, so3_exp_many, so3_log,
                   so3_right_jacobian)

THETA, POS, VEL, BG, BA, GRAV = (slice(0, 3), slice(3, 6), slice(6, 9),
                                 slice(9, 12), slice(12, 15), slice(15, 18))
BASE_DIM = 18
GRAVITY = np.array([0.0, 0.0, -9.81])


def tau_slice(k: int) -> int:
    return BASE_DIM + k


@dataclass(frozen=True)
class NavState:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    g: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    log_tau: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("R", "p", "v", "bg", "ba", "g", "log_tau"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def n_cams(self) -> int:
        return len(self.log_tau)

    @property
    def dim(self) -> int:
        return BASE_DIM + self.n_cams

    @property
    def tau(self) -> np.ndarray:
        """Per-camera inverse exposure factors."""
        return np.exp(self.log_tau)

    @property
    def pose(self) -> Pose:
        """Body-to-world pose."""
        return Pose(self.R, self.p)

    def copy(self, **changes) -> "NavState":
        return replace(self, **changes)


def boxplus(x: NavState, dx) -> NavState:
    dx = np.asarray(dx, dtype=float)
    return NavState(R=x.R @ so3_exp(dx[THETA]),
                    p=x.p + dx[POS],
                    v=x.v + dx[VEL],
                    bg=x.bg + dx[BG],
                    ba=x.ba + dx[BA],
                    g=x.g + dx[GRAV],
                    log_tau=x.log_tau + dx[BASE_DIM:BASE_DIM + x.n_cams])


def boxminus(a: NavState, b: NavState) -> np.ndarray:
    """Local difference ``d`` with ``boxplus(b, d) == a``."""
    return np.concatenate([so3_log(b.R.T @ a.R), a.p - b.p, a.v - b.v,
                           a.bg - b.bg, a.ba - b.ba, a.g - b.g,
                           a.log_tau - b.log_tau])


@dataclass(frozen=True)
class ProcessNoise:
    """Continuous-time noise densities."""

    gyro: float = 1e-3          # rad/s/sqrt(Hz)
    accel: float = 1e-2         # m/s^2/sqrt(Hz)
    gyro_bias: float = 1e-5     # rad/s^2/sqrt(Hz)
    accel_bias: float = 1e-5    # m/s^3/sqrt(Hz)
    gravity: float = 0.0
    log_tau: float = 0.0        # exposures frozen unless raised


def _imu_arrays(imu):
    t = np.array([s.t for s in imu], dtype=float)
    w = np.array([s.gyro for s in imu], dtype=float).reshape(-1, 3)
    a = np.array([s.accel for s in imu], dtype=float).reshape(-1, 3)
    return t, w, a


def imu_step(x: NavState, dt: float, w0, w1, a0, a1):
    """One midpoint step; returns the new state and the error transition."""
    wbar = 0.5 * (w0 + w1) - x.bg
    phi = wbar * dt
    E = so3_exp(phi)
    R0 = x.R
    R1 = R0 @ E
    a0b, a1b = a0 - x.ba, a1 - x.ba
    aw = 0.5 * (R0 @ a0b + R1 @ a1b) + x.g
    p1 = x.p + x.v * dt + 0.5 * aw * dt * dt
    v1 = x.v + aw * dt

    D = x.dim
    F = np.eye(D)
    Jr = so3_right_jacobian(phi)
    A_th = -0.5 * (R0 @ hat(a0b) + R0 @ hat(E @ a1b))
    A_bg = 0.5 * R1 @ hat(a1b) @ Jr * dt
    A_ba = -0.5 * (R0 + R1)
    I3 = np.eye(3)
    F[THETA, THETA] = E.T
    F[THETA, BG] = -Jr * dt
    F[VEL, THETA] = A_th * dt
    F[VEL, BG] = A_bg * dt
    F[VEL, BA] = A_ba * dt
    F[VEL, GRAV] = I3 * dt
    F[POS, VEL] = I3 * dt
    F[POS, THETA] = 0.5 * A_th * dt * dt
    F[POS, BG] = 0.5 * A_bg * dt * dt
    F[POS, BA] = 0.5 * A_ba * dt * dt
    F[POS, GRAV] = 0.5 * I3 * dt * dt
    x1 = replace(x, R=R1, p=p1, v=v1)
    return x1, F, Jr, R1


def _step_noise(x: NavState, dt: float, Jr, R1, noise: ProcessNoise) -> np.ndarray:
    D = x.dim
    Q = np.zeros((D, D))
    g_var = noise.gyro**2 * dt
    Q[THETA, THETA] = g_var * Jr @ Jr.T
    a_var = noise.accel**2 * dt
    Q[VEL, VEL] = a_var * np.eye(3)
    Q[POS, POS] = a_var * dt * dt / 4.0 * np.eye(3)
    Q[POS, VEL] = Q[VEL, POS] = a_var * dt / 2.0 * np.eye(3)
    Q[BG, BG] = noise.gyro_bias**2 * dt * np.eye(3)
    Q[BA, BA] = noise.accel_bias**2 * dt * np.eye(3)
    Q[GRAV, GRAV] = noise.gravity**2 * dt * np.eye(3)
    if x.n_cams:
        idx = np.arange(BASE_DIM, D)
        Q[idx, idx] = noise.log_tau**2 * dt
    return Q


def propagate(x: NavState, P: np.ndarray, imu, noise: ProcessNoise | None = None,
              with_trajectory: bool = False):
    """Strapdown integration from ``imu[0].t`` to ``imu[-1].t``.

    ``x`` is taken to be the state at the first sample's time. With
    ``with_trajectory`` a list of ``(t, R, p)`` tuples, one per sample, is
    returned as a third element for scan deskewing.
    """
    noise = noise or ProcessNoise()
    if len(imu) == 0:
        raise ValueError("propagation needs at least one IMU sample")
    t, w, a = _imu_arrays(imu)
    if np.any(np.diff(t) <= 0):
        raise NonMonotoneTimestamps("IMU timestamps must be strictly increasing")
    P = np.array(P, dtype=float)
    traj = [(t[0], x.R, x.p)]
    for k in range(len(t) - 1):
        dt = t[k + 1] - t[k]
        x, F, Jr, R1 = imu_step(x, dt, w[k], w[k + 1], a[k], a[k + 1])
        x = replace(x, R=orthonormalize(x.R))
        P = F @ P @ F.T + _step_noise(x, dt, Jr, R1, noise)
        P = 0.5 * (P + P.T)
        traj.append((t[k + 1], x.R, x.p))
    if with_trajectory:
        return x, P, traj
    return x, P


def transition_matrix(x: NavState, imu) -> np.ndarray:
    """Product of the per-step error transitions over an IMU span."""
    t, w, a = _imu_arrays(imu)
    F_tot = np.eye(x.dim)
    for k in range(len(t) - 1):
        x, F, _, _ = imu_step(x, t[k + 1] - t[k], w[k], w[k + 1], a[k], a[k + 1])
        x = replace(x, R=orthonormalize(x.R))
        F_tot = F @ F_tot
    return F_tot


def interpolate_poses(traj, times):
    """Constant-velocity interpolation between trajectory knots.

    Returns rotations ``(N, 3, 3)`` and positions ``(N, 3)``.
    """
    kt = np.array([k[0] for k in traj])
    times = np.asarray(times, dtype=float)
    if times.size and (times.min() < kt[0] - 1e-9 or times.max() > kt[-1] + 1e-9):
        raise TimestampOutOfRange(
            f"timestamps [{times.min():.4f}, {times.max():.4f}] outside "
            f"trajectory [{kt[0]:.4f}, {kt[-1]:.4f}]")
    KR = np.array([k[1] for k in traj])
    Kp = np.array([k[2] for k in traj])
    if len(kt) == 1:
        return np.repeat(KR, len(times), axis=0), np.repeat(Kp, len(times), axis=0)
    i = np.clip(np.searchsorted(kt, times, side="right") - 1, 0, len(kt) - 2)
    span = kt[i + 1] - kt[i]
    s = np.clip((times - kt[i]) / span, 0.0, 1.0)
    rel = np.array([so3_log(KR[j].T @ KR[j + 1]) for j in range(len(kt) - 1)])
    Rs = KR[i] @ so3_exp_many(rel[i] * s[:, None])
    ps = Kp[i] + s[:, None] * (Kp[i + 1] - Kp[i])
    return Rs, ps


def undistort_scan(points, traj, t_end: float | None = None) -> np.ndarray:
    """Express every point in the body frame at ``t_end`` (default: last knot).

    ``points`` is a :class:`~mclivo.sync.LidarPoints` in the body frame at
    each point's own timestamp.
    """
    if t_end is None:
        t_end = traj[-1][0]
    if len(points) == 0:
        return np.zeros((0, 3))
    if points.t.max() > t_end + 1e-9:
        raise TimestampOutOfRange("point timestamp after scan end")
    Rs, ps = interpolate_poses(traj, points.t)
    R_end, p_end = interpolate_poses(traj, [t_end])
    pw = np.einsum("nij,nj->ni", Rs, points.xyz) + ps
    return (pw - p_end[0]) @ R_end[0]
