"""Direct photometric residuals within and across cameras.

Reference intensities are warped into the current view once per epoch, at
the prior state, and then held fixed; only the current-image samples move
with the state, which keeps the analytic Jacobian exact for every iterate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import BehindCamera, OutOfBounds, PlaneTooClose
from .geom import CameraModel, Pose, project_many
from .imgproc import bilinear, inside
from .imu import POS, THETA, NavState, tau_slice
from .voxmap import ObservationRecord, VisualPoint

PATCH_SIZE = 8
D_MIN = 0.05


@dataclass(frozen=True)
class PhotometricCalib:
    """Exposure scale and radial vignetting of one camera.

    ``r2`` is normalized so the farthest image corner sits at 1.
    """

    alpha: float = 1.0
    beta: tuple = (0.0, 0.0, 0.0)
    center: tuple = (0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        r2 = np.linspace(0.0, 1.0, 101)
        if np.any(self.vignetting(r2) <= 0):
            raise ValueError("vignetting must stay positive on [0, 1]")

    @classmethod
    def for_camera(cls, cam: CameraModel, alpha: float = 1.0, beta=(0.0, 0.0, 0.0)):
        corners = np.array([[0, 0], [cam.width - 1, 0], [0, cam.height - 1],
                            [cam.width - 1, cam.height - 1]], dtype=float)
        radius = float(np.max(np.hypot(corners[:, 0] - cam.cx, corners[:, 1] - cam.cy)))
        return cls(float(alpha), tuple(float(b) for b in beta), (cam.cx, cam.cy), radius)

    def r2(self, u, v):
        return ((np.asarray(u) - self.center[0]) ** 2
                + (np.asarray(v) - self.center[1]) ** 2) / self.radius ** 2

    def vignetting(self, r2):
        r2 = np.asarray(r2, dtype=float)
        b1, b2, b3 = self.beta
        return 1.0 + r2 * (b1 + r2 * (b2 + r2 * b3))

    def normalize(self, intensity, pixel):
        return self.alpha * self.vignetting(self.r2(pixel[0], pixel[1])) * intensity

    def gain_image(self, shape) -> np.ndarray:
        """Per-pixel factor ``alpha * V``; raw images are multiplied by it."""
        v, u = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
        return self.alpha * self.vignetting(self.r2(u, v))

    def normalize_image(self, raw: np.ndarray) -> np.ndarray:
        return self.gain_image(raw.shape) * raw


def relative_transform(T_jw: Pose, T_iw: Pose) -> Pose:
    """Camera-i to camera-j transform from two world-to-camera poses."""
    return T_jw @ T_iw.inverse()


def homography(R, t, n, d: float, d_min: float = D_MIN) -> np.ndarray:
    """Plane-induced map ``R + t n^T / d`` between normalized image coordinates.

    ``n`` and ``d`` describe the plane ``n . X = d`` in the source frame.
    """
    if not d > d_min:
        raise PlaneTooClose(f"plane distance {d:.4g} m <= {d_min} m")
    return np.asarray(R, dtype=float) + np.outer(t, n) / d


def pixel_homography(cam_src: CameraModel, cam_dst: CameraModel, H_norm) -> np.ndarray:
    Ks_inv = np.linalg.inv(cam_src.K)
    return cam_dst.K @ H_norm @ Ks_inv


def apply_homography(H, uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    x = uv @ H[:, :2].T + H[:, 2]
    return x[..., :2] / x[..., 2:3]


@lru_cache(maxsize=8)
def patch_offsets(size: int = PATCH_SIZE) -> np.ndarray:
    """(S*S, 2) pixel offsets, row-major, ``-S/2 .. S/2-1`` in each axis (read-only)."""
    half = size // 2
    o = np.arange(-half, size - half, dtype=float)
    uu, vv = np.meshgrid(o, o)
    out = np.column_stack([uu.ravel(), vv.ravel()])
    out.flags.writeable = False
    return out


def warp_patch(image: np.ndarray, H, anchor, size: int = PATCH_SIZE, level: int = 0,
               margin: float = 0.0) -> np.ndarray:
    """Sample ``image`` at ``H(anchor + o * 2**level)`` for every patch offset ``o``.

    ``H`` maps patch coordinates into pixel coordinates of ``image``.
    """
    q = np.asarray(anchor, dtype=float) + patch_offsets(size) * 2.0 ** level
    uv = apply_homography(np.asarray(H, dtype=float), q)
    if not np.all(inside(image.shape, uv[:, 0], uv[:, 1], margin)):
        raise OutOfBounds("warped patch leaves the image")
    return bilinear(image, uv[:, 0], uv[:, 1]).reshape(size, size)


# --- migration bookkeeping --------------------------------------------------

@dataclass(frozen=True)
class MigrationEvent:
    point_id: int
    src: int
    dst: int
    t: float
    H: np.ndarray | None = None


def note_visibility(point: VisualPoint, visible: dict, t: float) -> None:
    for cam_id, vis in visible.items():
        if vis:
            point.last_seen[cam_id] = t


def detect_migration(point: VisualPoint, visible: dict, t: float, t_mig: float = 1.0,
                     H=None) -> MigrationEvent | None:
    """Check the migration condition and, if met, hand the point to the new camera.

    ``visible`` maps camera id to whether the point currently projects inside
    that camera with full patch support. ``H`` may be a matrix or a callable
    ``H(point, i, j)``.
    """
    i = point.cam_ref
    seen = [c for c, vis in visible.items() if vis]
    if len(seen) != 1 or seen[0] == i:
        return None
    j = seen[0]
    last = point.last_seen.get(i)
    if last is None or t - last > t_mig:
        return None
    Hm = H(point, i, j) if callable(H) else H
    if Hm is not None and abs(np.linalg.det(Hm)) <= 1e-9:
        Hm = None
    point.migration_count += 1
    point.cam_ref = j
    return MigrationEvent(point.id, i, j, float(t), Hm)


def migration_count(point_id: int, log) -> int:
    return sum(1 for ev in log if ev.point_id == point_id)


def stack_dimension(n_cams: int, n_points: int, patch_pixels: int, migration_counts=()) -> int:
    if min(n_cams, n_points, patch_pixels) < 0 or any(c < 0 for c in migration_counts):
        raise ValueError("counts must be nonnegative")
    return n_cams * n_points * patch_pixels + sum(migration_counts) * patch_pixels


# --- residuals ----------------------------------------------------------------

@dataclass
class PatchResidual:
    residual: np.ndarray       # (S*S,)
    jacobian: np.ndarray       # (S*S, D)
    weight: float
    tag: tuple                 # ("intra", k) or ("migration", i, j)
    point_id: int = -1


def camera_pose(x: NavState, cam: CameraModel) -> Pose:
    """Camera-to-world pose for state ``x``."""
    return x.pose @ cam.T_cb.inverse()


def plane_in_camera(n_w, d_w: float, T_wc: Pose):
    """Plane ``n_w . X + d_w = 0`` expressed as ``n . X = d`` (``d > 0``) in the camera."""
    n = T_wc.R.T @ n_w
    d = -(d_w + n_w @ T_wc.t)
    if d < 0:
        n, d = -n, -d
    return n, float(d)


@dataclass
class PatchSet:
    """Fixed reference side for a batch of patches observed in one camera."""

    cam_id: int
    point_ids: np.ndarray            # (P,)
    p_w: np.ndarray                  # (P, 3)
    ref: np.ndarray                  # (P, S*S)
    src: np.ndarray                  # (P,) camera of the reference record
    level: int = 0
    size: int = PATCH_SIZE
    weights: np.ndarray | None = None

    def __len__(self):
        return len(self.point_ids)

    def select(self, mask) -> "PatchSet":
        w = None if self.weights is None else self.weights[mask]
        return PatchSet(self.cam_id, self.point_ids[mask], self.p_w[mask], self.ref[mask],
                        self.src[mask], self.level, self.size, w)

    @property
    def is_migration(self) -> np.ndarray:
        return self.src != self.cam_id


def reference_values(record: ObservationRecord, cam_rec: CameraModel, cam_cur: CameraModel,
                     cur_id: int, T_wc_cur: Pose, p_w, plane=None, level: int = 0,
                     size: int = PATCH_SIZE) -> np.ndarray:
    """Reference intensities aligned to the patch grid of the current view.

    With a plane ``(n_w, d_w)`` the record's support window is warped through
    the plane-induced homography; without one, only a same-camera record can
    be used and its stored pyramid level is taken as is.
    """
    if plane is None:
        if record.cam_id != cur_id:
            raise OutOfBounds("cross-camera reference needs a plane")
        return record.pyramid[level].ravel().copy()
    n_w, d_w = plane
    n_k, d_k = plane_in_camera(np.asarray(n_w), float(d_w), T_wc_cur)
    T_rk = record.T_wc.inverse() @ T_wc_cur
    H = pixel_homography(cam_cur, cam_rec, homography(T_rk.R, T_rk.t, n_k, d_k))
    uv, ok = project_many(cam_cur, T_wc_cur.inverse().apply(np.atleast_2d(p_w)))
    if not ok[0]:
        raise BehindCamera("point behind the current camera")
    q = uv[0] + patch_offsets(size) * 2.0 ** level
    src = apply_homography(H, q) - np.asarray(record.support_origin, dtype=float)
    if not np.all(inside(record.support.shape, src[:, 0], src[:, 1])):
        raise OutOfBounds("warped patch leaves the reference support")
    return bilinear(record.support, src[:, 0], src[:, 1])


def evaluate_patches(ps: PatchSet, x: NavState, cam: CameraModel, image: np.ndarray,
                     with_jacobian: bool = True, margin: float = 1.0):
    """Residuals ``(P, S*S)`` and Jacobians ``(P, S*S, D)`` for one camera.

    Intra-camera rows read ``I'_cur - I'_ref``; cross-camera rows read
    ``tau_cur * I'_cur - tau_src * I'_ref``. Patches whose samples leave the
    image are flagged in the returned ``valid`` mask with zero rows.
    """
    P, S2, D = len(ps), ps.size * ps.size, x.dim
    R, p = x.R, x.p
    p_b = (ps.p_w - p) @ R
    p_c = p_b @ cam.T_cb.R.T + cam.T_cb.t
    uv, valid = project_many(cam, p_c)
    offs = patch_offsets(ps.size) * 2.0 ** ps.level
    samp = np.nan_to_num(uv)[:, None, :] + offs[None]
    valid &= np.all(inside(image.shape, samp[..., 0], samp[..., 1], margin), axis=1)
    samp[~valid] = 1.0
    val, du, dv = bilinear(image, samp[..., 0], samp[..., 1], with_grad=True)
    tau = x.tau
    mig = ps.is_migration
    t_cur = np.where(mig, tau[ps.cam_id] if ps.cam_id < len(tau) else 1.0, 1.0)
    t_src = np.ones(P)
    if mig.any():
        t_src[mig] = [tau[s] if s < len(tau) else 1.0 for s in ps.src[mig]]
    r = t_cur[:, None] * val - t_src[:, None] * ps.ref
    r[~valid] = 0.0
    if not with_jacobian:
        return r, None, valid, (du, dv)
    z = np.where(valid, p_c[:, 2], 1.0)
    x_, y_ = p_c[:, 0], p_c[:, 1]
    Jpi = np.zeros((P, 2, 3))
    Jpi[:, 0, 0] = cam.fx / z
    Jpi[:, 0, 2] = -cam.fx * x_ / z ** 2
    Jpi[:, 1, 1] = cam.fy / z
    Jpi[:, 1, 2] = -cam.fy * y_ / z ** 2
    Rcb = cam.T_cb.R
    Jc = np.zeros((P, 3, 6))
    Jc[:, :, 0:3] = Rcb @ _hat_many(p_b)
    Jc[:, :, 3:6] = -(Rcb @ R.T)
    Jpix = Jpi @ Jc                                     # (P, 2, 6)
    J = np.zeros((P, S2, D))
    J6 = du[..., None] * Jpix[:, None, 0, :] + dv[..., None] * Jpix[:, None, 1, :]
    J[:, :, THETA] = t_cur[:, None, None] * J6[..., 0:3]
    J[:, :, POS] = t_cur[:, None, None] * J6[..., 3:6]
    for k in np.flatnonzero(mig):
        if ps.cam_id < x.n_cams:
            J[k, :, tau_slice(ps.cam_id)] += t_cur[k] * val[k]
        if ps.src[k] < x.n_cams:
            J[k, :, tau_slice(int(ps.src[k]))] -= t_src[k] * ps.ref[k]
    J[~valid] = 0.0
    return r, J, valid, (du, dv)


def _hat_many(v) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def intra_residual(point: VisualPoint, record: ObservationRecord, x: NavState,
                   cam: CameraModel, cam_id: int, image: np.ndarray, plane=None,
                   level: int = 0) -> PatchResidual:
    """Single-patch residual against a record from the same camera."""
    T_wc = camera_pose(x, cam)
    pc = T_wc.inverse().apply(point.position)
    if pc[2] <= cam.depth_min:
        raise BehindCamera(f"depth {pc[2]:.3g} m")
    ref = reference_values(record, cam, cam, cam_id, T_wc, point.position, plane, level)
    ps = PatchSet(cam_id, np.array([point.id]), point.position[None], ref[None],
                  np.array([cam_id]), level)
    r, J, valid, _ = evaluate_patches(ps, x, cam, image)
    if not valid[0]:
        raise OutOfBounds("patch leaves the current image")
    return PatchResidual(r[0], J[0], 1.0, ("intra", cam_id), point.id)


def migration_residual(event: MigrationEvent, point: VisualPoint, record: ObservationRecord,
                       x: NavState, cams, image_j: np.ndarray, plane,
                       level: int = 0) -> PatchResidual:
    """Cross-camera residual of camera ``event.dst`` against a camera ``event.src`` record."""
    i, j = event.src, event.dst
    T_wc = camera_pose(x, cams[j])
    pc = T_wc.inverse().apply(point.position)
    if pc[2] <= cams[j].depth_min:
        raise BehindCamera(f"depth {pc[2]:.3g} m")
    ref = reference_values(record, cams[i], cams[j], j, T_wc, point.position, plane, level)
    ps = PatchSet(j, np.array([point.id]), point.position[None], ref[None], np.array([i]), level)
    r, J, valid, _ = evaluate_patches(ps, x, cams[j], image_j)
    if not valid[0]:
        raise OutOfBounds("patch leaves the current image")
    return PatchResidual(r[0], J[0], 1.0, ("migration", i, j), point.id)


# --- robust weights -----------------------------------------------------------

TUKEY_C = 4.685


def tukey_weights(residuals, noise_floor: float = 2.0 / 255.0, c: float = TUKEY_C):
    """Per-patch Tukey weights from patch RMS scaled by a MAD-style spread."""
    res = np.asarray(residuals, dtype=float)
    if res.size == 0:
        return np.zeros(0)
    rms = np.sqrt(np.mean(res.reshape(len(res), -1) ** 2, axis=1))
    scale = max(1.4826 * float(np.median(rms)), noise_floor)
    u = rms / (c * scale)
    return np.where(u < 1.0, (1.0 - u * u) ** 2, 0.0)


# --- diagnostics ---------------------------------------------------------------

@dataclass
class DiagnosticLog:
    rows: list = field(default_factory=list)

    def add(self, epoch: int, point_id: int, tag: str, norm: float, weight: float,
            migrations: int) -> None:
        self.rows.append((epoch, point_id, tag, norm, weight, migrations))

    def write(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "point_id", "source", "residual_norm", "weight",
                        "migration_count"])
            for e, pid, tag, n, wt, m in self.rows:
                w.writerow([e, pid, tag, f"{n:.6g}", f"{wt:.6g}", m])

