"""Rotation and rigid-pose algebra plus the pinhole camera model.

Rotations are plain 3x3 numpy arrays. Poses map points from a source frame
into a target frame: ``p_target = R @ p_source + t``. All perturbations in
this package are right-multiplicative, ``R_perturbed = R @ so3_exp(dtheta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, NonPositiveDepth

SMALL_ANGLE = 1e-8
DEPTH_MIN = 0.01


def hat(w):
    """Skew-symmetric matrix such that ``hat(w) @ v == cross(w, v)``."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy],
                     [wz, 0.0, -wx],
                     [-wy, wx, 0.0]])


def vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues formula, second-order Taylor expansion below ``SMALL_ANGLE``."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = hat(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    return (np.eye(3) + np.sin(theta) / theta * W
            + (1.0 - np.cos(theta)) / theta**2 * W @ W)


def so3_log(R) -> np.ndarray:
    """Inverse of :func:`so3_exp` with angle in ``[0, pi]``.

    At exactly ``pi`` the axis sign is ambiguous; we return the axis whose
    largest-magnitude component is positive, so a half turn about +x or -x
    both map to ``[pi, 0, 0]``.
    """
    R = np.asarray(R, dtype=float)
    v = vee(R - R.T)
    s = 0.5 * np.linalg.norm(v)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta < SMALL_ANGLE:
        return 0.5 * v
    if c > -0.9:
        return theta * v / (2.0 * s)
    # near pi: recover the axis from the symmetric part, sign from v
    A = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(A)))
    axis = A[:, k] / np.sqrt(max(A[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    d = axis @ v
    if abs(d) > 1e-12:
        axis = axis if d > 0 else -axis
    elif axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    return theta * axis


def so3_right_jacobian(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = hat(omega)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + W @ W / 6.0
    return (np.eye(3) - (1.0 - np.cos(theta)) / theta**2 * W
            + (theta - np.sin(theta)) / theta**3 * W @ W)


def orthonormalize(R) -> np.ndarray:
    """Gram-Schmidt on the columns; keeps a right-handed frame."""
    R = np.asarray(R, dtype=float)
    x = R[:, 0] / np.linalg.norm(R[:, 0])
    y = R[:, 1] - (x @ R[:, 1]) * x
    y /= np.linalg.norm(y)
    z = np.cross(x, y)
    return np.column_stack([x, y, z])


def rotation_angle(R) -> float:
    return float(np.linalg.norm(so3_log(R)))


@dataclass(frozen=True)
class Pose:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, p) -> np.ndarray:
        """Transform one point ``(3,)`` or a batch ``(N, 3)``."""
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T


def compose(a: Pose, b: Pose) -> Pose:
    """``(a o b).apply(p) == a.apply(b.apply(p))``."""
    return Pose(a.R @ b.R, a.R @ b.t + a.t)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; ``T_cb`` maps body-frame points into the camera frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    T_cb: Pose = field(default_factory=Pose.identity)
    depth_min: float = DEPTH_MIN

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def in_image(self, uv, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        u, v = uv[..., 0], uv[..., 1]
        return ((u >= margin) & (u <= self.width - 1 - margin)
                & (v >= margin) & (v <= self.height - 1 - margin))


def project(cam: CameraModel, p_cam) -> np.ndarray:
    p = np.asarray(p_cam, dtype=float)
    if p[2] <= cam.depth_min:
        raise BehindCamera(f"depth {p[2]:.4g} m <= {cam.depth_min} m")
    return np.array([cam.fx * p[0] / p[2] + cam.cx,
                     cam.fy * p[1] / p[2] + cam.cy])


def project_many(cam: CameraModel, p_cam):
    """Vectorised projection; returns ``(uv, valid)`` with NaN where invalid."""
    p = np.atleast_2d(np.asarray(p_cam, dtype=float))
    valid = p[:, 2] > cam.depth_min
    z = np.where(valid, p[:, 2], 1.0)
    uv = np.column_stack([cam.fx * p[:, 0] / z + cam.cx,
                          cam.fy * p[:, 1] / z + cam.cy])
    uv[~valid] = np.nan
    return uv, valid


def project_jacobian(cam: CameraModel, p_cam) -> np.ndarray:
    """d(pixel)/d(p_cam), shape (2, 3)."""
    x, y, z = np.asarray(p_cam, dtype=float)
    iz = 1.0 / z
    return np.array([[cam.fx * iz, 0.0, -cam.fx * x * iz * iz],
                     [0.0, cam.fy * iz, -cam.fy * y * iz * iz]])


def unproject(cam: CameraModel, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepth(f"depth {depth} must be positive")
    u, v = pixel
    return np.array([(u - cam.cx) / cam.fx * depth,
                     (v - cam.cy) / cam.fy * depth,
                     depth])


def pixel_rays(cam: CameraModel) -> np.ndarray:
    """Unit-depth camera-frame rays for every pixel centre, shape (H*W, 3)."""
    u, v = np.meshgrid(np.arange(cam.width, dtype=float),
                       np.arange(cam.height, dtype=float))
    return np.column_stack([((u - cam.cx) / cam.fx).ravel(),
                            ((v - cam.cy) / cam.fy).ravel(),
                            np.ones(u.size)])


def so3_exp_many(omegas) -> np.ndarray:
    """Batched :func:`so3_exp` for ``(N, 3)`` inputs, returns ``(N, 3, 3)``."""
    w = np.asarray(omegas, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(w, axis=1)
    W = np.zeros((len(w), 3, 3))
    W[:, 0, 1], W[:, 0, 2] = -w[:, 2], w[:, 1]
    W[:, 1, 0], W[:, 1, 2] = w[:, 2], -w[:, 0]
    W[:, 2, 0], W[:, 2, 1] = -w[:, 1], w[:, 0]
    WW = W @ W
    small = theta < SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(ts) / ts)
    b = np.where(small, 0.5, (1.0 - np.cos(ts)) / ts**2)
    return np.eye(3) + a[:, None, None] * W + b[:, None, None] * WW
