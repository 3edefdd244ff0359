"""Unified voxel map: LiDAR plane statistics plus multi-view visual points.

Each voxel keeps running first and second moments of the points it has
absorbed, a fitted plane when the points are planar, the visual points that
live inside it and, once it proves non-planar and dense, eight children that
shadow it for every later query.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TooFewPoints
from .geom import CameraModel, Pose, project_many
from .imgproc import bilinear, inside, shi_tomasi


@dataclass(frozen=True)
class MapConfig:
    voxel_size: float = 0.5
    eps_plane: float = 1e-3       # m^2, smallest eigenvalue bound
    eps_degenerate: float = 1e-6  # m^2, middle eigenvalue bound (lines)
    n_min: int = 5
    n_split: int = 50
    refit_ratio: float = 1.25
    max_points: int = 400


def voxel_key(p, v_size: float) -> tuple:
    if not v_size > 0:
        raise ValueError("voxel size must be positive")
    k = np.floor(np.asarray(p, dtype=float) / v_size).astype(np.int64)
    return tuple(int(c) for c in k)


def voxel_keys(points, v_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / v_size).astype(np.int64)


@dataclass(frozen=True)
class PlaneParams:
    normal: np.ndarray
    centroid: np.ndarray
    d: float
    n_points: int
    lam_min: float
    eigenvalues: np.ndarray


def _plane_from_cov(mean, cov, n, viewpoint, eps_plane, eps_degenerate):
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] >= eps_plane or evals[1] < eps_degenerate:
        return None
    normal = evecs[:, 0]
    if viewpoint is not None:
        if normal @ (np.asarray(viewpoint, dtype=float) - mean) < 0:
            normal = -normal
    elif normal[np.argmax(np.abs(normal))] < 0:
        normal = -normal
    normal = normal / np.linalg.norm(normal)
    return PlaneParams(normal, mean.copy(), float(-normal @ mean), int(n),
                       float(max(evals[0], 0.0)), evals)


def fit_plane(points, viewpoint=None, eps_plane: float = 1e-3,
              eps_degenerate: float = 1e-6, n_min: int = 5) -> PlaneParams | None:
    """Eigen-decomposition of the sample covariance; None unless planar."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < n_min:
        raise TooFewPoints(f"{len(pts)} points < {n_min}")
    mean = pts.mean(axis=0)
    c = pts - mean
    cov = c.T @ c / len(pts)
    return _plane_from_cov(mean, cov, len(pts), viewpoint, eps_plane, eps_degenerate)


def point_to_plane(plane: PlaneParams, p_w) -> float:
    return float(plane.normal @ np.asarray(p_w, dtype=float) + plane.d)


@dataclass
class ObservationRecord:
    pyramid: np.ndarray        # (L, S, S) normalized intensities
    pixel: np.ndarray
    T_wc: Pose                 # camera-to-world
    exposure: float            # inverse exposure factor at capture
    cam_id: int
    t: float
    support: np.ndarray        # normalized-intensity window around the pixel
    support_origin: tuple      # (u0, v0) of support[0, 0] in image pixels
    alpha: float = 1.0         # exposure scale of the capturing camera

    @property
    def center(self) -> np.ndarray:
        return self.T_wc.t


@dataclass
class VisualPoint:
    id: int
    position: np.ndarray
    cam_ref: int
    observations: list = field(default_factory=list)
    migration_count: int = 0
    last_seen: dict = field(default_factory=dict)  # cam id -> time
    normal: np.ndarray | None = None
    voxel: tuple | None = None

    def newest(self) -> ObservationRecord:
        return self.observations[-1]


def make_record(norm_image: np.ndarray, pixel, cam_id: int, T_wc: Pose, exposure: float,
                t: float, patch_size: int = 8, levels: int = 3, support_half: int = 16,
                alpha: float = 1.0) -> ObservationRecord:
    """Sample the patch pyramid (stride ``2**l``) and keep a support window."""
    pixel = np.asarray(pixel, dtype=float)
    half = patch_size // 2
    offs = np.arange(-half, patch_size - half, dtype=float)
    pyr = np.empty((levels, patch_size, patch_size))
    for lvl in range(levels):
        s = 2.0 ** lvl
        uu, vv = np.meshgrid(pixel[0] + offs * s, pixel[1] + offs * s)
        pyr[lvl] = bilinear(norm_image, uu, vv)
    u0 = int(np.floor(pixel[0])) - support_half
    v0 = int(np.floor(pixel[1])) - support_half
    h, w = norm_image.shape
    u0c, v0c = max(u0, 0), max(v0, 0)
    u1c = min(u0 + 2 * support_half + 2, w)
    v1c = min(v0 + 2 * support_half + 2, h)
    support = norm_image[v0c:v1c, u0c:u1c].copy()
    return ObservationRecord(pyr, pixel.copy(), T_wc, float(exposure), int(cam_id), float(t),
                             support, (u0c, v0c), float(alpha))


def view_angle(p_w, center_a, center_b) -> float:
    da = np.asarray(p_w) - center_a
    db = np.asarray(p_w) - center_b
    c = da @ db / (np.linalg.norm(da) * np.linalg.norm(db))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def wants_observation(point: VisualPoint, cam_id: int, center, pixel,
                      theta_obs: float = np.deg2rad(10.0), u_obs: float = 40.0) -> bool:
    """Whether a view from ``center`` (pixel ``pixel`` in ``cam_id``) is new enough to keep.

    The rotation test uses the change of viewing direction onto the point,
    the displacement test applies to same-camera records only.
    """
    if not point.observations:
        return True
    last = point.newest()
    angle = view_angle(point.position, last.center, center)
    moved = cam_id == last.cam_id and np.linalg.norm(np.asarray(pixel) - last.pixel) > u_obs
    return angle > theta_obs or moved


def update_observation(point: VisualPoint, record: ObservationRecord,
                       theta_obs: float = np.deg2rad(10.0), u_obs: float = 40.0,
                       n_max: int = 8) -> bool:
    """Append ``record`` if the viewpoint moved enough since the newest one."""
    if not wants_observation(point, record.cam_id, record.center, record.pixel, theta_obs, u_obs):
        return False
    point.observations.append(record)
    if len(point.observations) > n_max:
        del point.observations[0]
    return True


_CELL_OFF = 1 << 20


def _encode_cells(cells) -> np.ndarray:
    """Pack integer cell coordinates (N, 3) into sortable int64 codes."""
    c = np.asarray(cells, dtype=np.int64) + _CELL_OFF
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


class Voxel:
    __slots__ = ("key", "origin", "size", "count", "sum", "outer", "points",
                 "plane", "visual_points", "children", "last_fit", "level")

    def __init__(self, key, origin, size, level=0):
        self.key = key
        self.origin = np.asarray(origin, dtype=float)
        self.size = float(size)
        self.level = level
        self.count = 0
        self.sum = np.zeros(3)
        self.outer = np.zeros((3, 3))
        self.points: list = []
        self.plane: PlaneParams | None = None
        self.visual_points: list = []
        self.children: list | None = None
        self.last_fit = 0

    def raw_points(self) -> np.ndarray:
        return np.vstack(self.points) if self.points else np.zeros((0, 3))

    def mean_cov(self):
        mean = self.sum / self.count
        cov = self.outer / self.count - np.outer(mean, mean)
        return mean, 0.5 * (cov + cov.T)

    def child_index(self, pts) -> np.ndarray:
        half = self.size / 2.0
        rel = np.floor((np.asarray(pts) - self.origin) / half).astype(np.int64)
        rel = np.clip(rel, 0, 1)
        return rel[:, 0] + 2 * rel[:, 1] + 4 * rel[:, 2]


@dataclass
class InsertSummary:
    points_added: int = 0
    voxels_created: int = 0
    planes_refit: int = 0
    subdivided: int = 0


class VoxelMap:
    def __init__(self, config: MapConfig | None = None):
        self.cfg = config or MapConfig()
        self.voxels: dict[tuple, Voxel] = {}
        self.visual_points: dict[int, VisualPoint] = {}
        self._next_vp = 0
        # half-voxel cell code -> plane row, for vectorized lookups
        self._cell_plane: dict[int, int] = {}
        self._rows: list = []
        self._table = None
        self._dirty: set = set()

    # --- geometry ---------------------------------------------------------

    def _absorb(self, vox: Voxel, pts: np.ndarray) -> int:
        room = self.cfg.max_points - vox.count
        if room <= 0 or len(pts) == 0:
            return 0
        pts = pts[:room]
        vox.count += len(pts)
        vox.sum += pts.sum(axis=0)
        vox.outer += pts.T @ pts
        vox.points.append(pts.copy())
        return len(pts)

    def _refit(self, vox: Voxel, viewpoint, summary: InsertSummary, force=False):
        c = self.cfg
        if vox.count < c.n_min:
            return
        if not force and vox.last_fit and vox.count < vox.last_fit * c.refit_ratio:
            return
        mean, cov = vox.mean_cov()
        vox.plane = _plane_from_cov(mean, cov, vox.count, viewpoint,
                                    c.eps_plane, c.eps_degenerate)
        vox.last_fit = vox.count
        self._dirty.add(vox.key[:3])
        summary.planes_refit += 1
        if vox.level == 0 and vox.count > c.n_split:
            evals = np.linalg.eigvalsh(cov)
            if evals[0] >= c.eps_plane:
                self._subdivide(vox, viewpoint, summary)

    def _subdivide(self, vox: Voxel, viewpoint, summary: InsertSummary):
        half = vox.size / 2.0
        vox.children = []
        for idx in range(8):
            off = np.array([idx & 1, (idx >> 1) & 1, (idx >> 2) & 1]) * half
            vox.children.append(Voxel(vox.key + (idx,), vox.origin + off, half, level=1))
        pts = vox.raw_points()
        ci = vox.child_index(pts)
        for idx, child in enumerate(vox.children):
            sub = pts[ci == idx]
            if len(sub):
                self._absorb(child, sub)
                self._refit(child, viewpoint, summary, force=True)
        vox.plane = None
        self._dirty.add(vox.key[:3])
        summary.subdivided += 1

    def insert_scan(self, points_w, viewpoint) -> InsertSummary:
        summary = InsertSummary()
        pts = np.asarray(points_w, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            return summary
        keys = voxel_keys(pts, self.cfg.voxel_size)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        order = np.argsort(inv, kind="stable")
        bounds = np.searchsorted(inv[order], np.arange(len(uniq) + 1))
        for g, key_arr in enumerate(uniq):
            sel = pts[order[bounds[g]:bounds[g + 1]]]
            key = tuple(int(k) for k in key_arr)
            vox = self.voxels.get(key)
            if vox is None:
                vox = Voxel(key, key_arr * self.cfg.voxel_size, self.cfg.voxel_size)
                self.voxels[key] = vox
                summary.voxels_created += 1
            if vox.children is not None:
                ci = vox.child_index(sel)
                for idx in np.unique(ci):
                    child = vox.children[idx]
                    summary.points_added += self._absorb(child, sel[ci == idx])
                    self._refit(child, viewpoint, summary)
            else:
                summary.points_added += self._absorb(vox, sel)
                self._refit(vox, viewpoint, summary)
        for key in self._dirty:
            self._index_voxel(self.voxels[key])
        self._dirty.clear()
        return summary

    def _index_voxel(self, vox: Voxel) -> None:
        bx, by, bz = (2 * int(k) + _CELL_OFF for k in vox.key[:3])
        leaf_row = None
        for idx in range(8):
            code = ((bx + (idx & 1)) << 42) | ((by + ((idx >> 1) & 1)) << 21) | (bz + ((idx >> 2) & 1))
            plane = vox.plane if vox.children is None else vox.children[idx].plane
            old = self._cell_plane.get(code)
            if plane is None:
                if old is not None:
                    del self._cell_plane[code]
                    self._table = None
                continue
            if old is not None and self._rows[old] is plane:
                continue
            if vox.children is None and leaf_row is not None:
                row = leaf_row
            else:
                self._rows.append(plane)
                row = len(self._rows) - 1
            if vox.children is None:
                leaf_row = row
            self._cell_plane[code] = row
            self._table = None

    def _plane_table(self):
        if self._table is None:
            codes = np.fromiter(self._cell_plane.keys(), dtype=np.int64, count=len(self._cell_plane))
            rows = np.fromiter(self._cell_plane.values(), dtype=np.int64, count=len(self._cell_plane))
            order = np.argsort(codes)
            used = np.unique(rows)
            remap = np.full(len(self._rows), -1, dtype=np.int64)
            remap[used] = np.arange(len(used))
            planes = [self._rows[i] for i in used]
            self._table = {
                "codes": codes[order], "rows": remap[rows[order]],
                "normal": np.array([p.normal for p in planes]).reshape(-1, 3),
                "d": np.array([p.d for p in planes]),
                "centroid": np.array([p.centroid for p in planes]).reshape(-1, 3),
                "eigenvalues": np.array([p.eigenvalues for p in planes]).reshape(-1, 3),
                "n_points": np.array([p.n_points for p in planes], dtype=float),
            }
        return self._table

    def plane_at(self, p) -> PlaneParams | None:
        vox = self.voxels.get(voxel_key(p, self.cfg.voxel_size))
        if vox is None:
            return None
        if vox.children is not None:
            return vox.children[int(vox.child_index(np.atleast_2d(p))[0])].plane
        return vox.plane

    def lookup_plane_arrays(self, points_w):
        """Per-point plane data of the (sub)voxel each point falls in.

        Returns a dict of arrays ``normal, d, centroid, eigenvalues, n_points``
        plus the boolean ``valid`` mask; rows without a plane are zero.
        """
        pts = np.asarray(points_w, dtype=float).reshape(-1, 3)
        m = len(pts)
        fields = {"normal": (m, 3), "d": (m,), "centroid": (m, 3), "eigenvalues": (m, 3),
                  "n_points": (m,)}
        out = {k: np.zeros(shape) for k, shape in fields.items()}
        out["valid"] = np.zeros(m, dtype=bool)
        tab = self._plane_table()
        if m == 0 or len(tab["codes"]) == 0:
            return out
        codes = _encode_cells(np.floor(pts / (self.cfg.voxel_size / 2.0)).astype(np.int64))
        pos = np.clip(np.searchsorted(tab["codes"], codes), 0, len(tab["codes"]) - 1)
        hit = tab["codes"][pos] == codes
        rows = tab["rows"][pos[hit]]
        for k in fields:
            out[k][hit] = tab[k][rows]
        out["valid"] = hit
        return out

    def lookup_planes(self, points_w):
        """Planes for a batch of points; returns ``(normals, d, valid)``."""
        a = self.lookup_plane_arrays(points_w)
        return a["normal"], a["d"], a["valid"]

    def planes(self):
        """Every live (not shadowed) plane with its voxel key."""
        for key, vox in self.voxels.items():
            if vox.children is None:
                if vox.plane is not None:
                    yield key, vox.plane
            else:
                for child in vox.children:
                    if child.plane is not None:
                        yield child.key, child.plane

    # --- visual points ----------------------------------------------------

    def add_visual_point(self, position, cam_ref: int, record: ObservationRecord,
                         normal=None) -> VisualPoint:
        key = voxel_key(position, self.cfg.voxel_size)
        vp = VisualPoint(self._next_vp, np.asarray(position, dtype=float), cam_ref,
                         [record], normal=normal, voxel=key)
        vp.last_seen[cam_ref] = record.t
        self._next_vp += 1
        self.visual_points[vp.id] = vp
        vox = self.voxels.get(key)
        if vox is None:
            vox = Voxel(key, np.array(key) * self.cfg.voxel_size, self.cfg.voxel_size)
            self.voxels[key] = vox
        vox.visual_points.append(vp.id)
        return vp

    def remove_visual_point(self, vp_id: int) -> None:
        vp = self.visual_points.pop(vp_id)
        vox = self.voxels.get(vp.voxel)
        if vox is not None and vp_id in vox.visual_points:
            vox.visual_points.remove(vp_id)


@dataclass(frozen=True)
class SpawnConfig:
    grid_size: int = 40
    shi_tomasi_min: float = 1e-5
    margin: int = 17
    max_depth: float = 8.0
    patch_size: int = 8
    levels: int = 3
    support_half: int = 16


def spawn_visual_points(vmap: VoxelMap, frames, cams, T_wc, lidar_w, t: float,
                        cfg: SpawnConfig | None = None, alphas=None, taus=None,
                        response_maps=None) -> list:
    """Promote LiDAR points to visual points in grid cells that have none.

    ``frames`` maps camera id to the normalized image; ``T_wc`` maps camera
    id to its camera-to-world pose. Cameras are processed in ascending id and
    cell candidates are ranked by response, then by pixel ``(u, v)``.
    """
    cfg = cfg or SpawnConfig()
    lidar_w = np.asarray(lidar_w, dtype=float).reshape(-1, 3)
    used = np.zeros(len(lidar_w), dtype=bool)
    created = []
    for cam_id in sorted(frames):
        img = frames[cam_id]
        cam: CameraModel = cams[cam_id]
        Tcw = T_wc[cam_id].inverse()
        gw = int(np.ceil(cam.width / cfg.grid_size))
        occupied = np.zeros((int(np.ceil(cam.height / cfg.grid_size)), gw), dtype=bool)
        existing = np.array([vp.position for vp in vmap.visual_points.values()]).reshape(-1, 3)
        if len(existing):
            uv, ok = project_many(cam, Tcw.apply(existing))
            ok &= cam.in_image(np.nan_to_num(uv, nan=-1.0))
            cells = (uv[ok] // cfg.grid_size).astype(int)
            occupied[cells[:, 1], cells[:, 0]] = True
        if len(lidar_w) == 0:
            continue
        pc = Tcw.apply(lidar_w)
        uv, ok = project_many(cam, pc)
        ok &= (pc[:, 2] <= cfg.max_depth) & ~used
        ok &= inside(img.shape, np.nan_to_num(uv[:, 0], nan=-1.0),
                     np.nan_to_num(uv[:, 1], nan=-1.0), cfg.margin)
        idx = np.flatnonzero(ok)
        if len(idx) == 0:
            continue
        resp_map = response_maps[cam_id] if response_maps is not None else shi_tomasi(img)
        pix = np.rint(uv[idx]).astype(int)
        resp = resp_map[pix[:, 1], pix[:, 0]]
        cells = (uv[idx] // cfg.grid_size).astype(int)
        keep = (resp >= cfg.shi_tomasi_min) & ~occupied[cells[:, 1], cells[:, 0]]
        idx, resp, cells = idx[keep], resp[keep], cells[keep]
        if len(idx) == 0:
            continue
        cell_id = cells[:, 1] * gw + cells[:, 0]
        # best per cell: max response, then smallest (u, v)
        order = np.lexsort((uv[idx, 1], uv[idx, 0], -resp, cell_id))
        first = np.ones(len(order), dtype=bool)
        first[1:] = cell_id[order][1:] != cell_id[order][:-1]
        for j in order[first]:
            li = idx[j]
            used[li] = True
            p_w = lidar_w[li]
            plane = vmap.plane_at(p_w)
            pixel = uv[li]
            if plane is not None:
                c = T_wc[cam_id].t
                ray = p_w - c
                denom = plane.normal @ ray
                if abs(denom) > 1e-6 * np.linalg.norm(ray):
                    s = -(plane.normal @ c + plane.d) / denom
                    if 0.5 < s < 2.0:
                        p_w = c + s * ray
            alpha = 1.0 if alphas is None else alphas[cam_id]
            tau = 1.0 if taus is None else taus[cam_id]
            rec = make_record(img, pixel, cam_id, T_wc[cam_id], tau, t, cfg.patch_size,
                              cfg.levels, cfg.support_half, alpha)
            vp = vmap.add_visual_point(p_w, cam_id, rec,
                                       normal=None if plane is None else plane.normal.copy())
            created.append(vp)
    return created


def points_in_voxel_stats(points) -> tuple:
    """Reference mean/covariance computed from scratch (test oracle helper)."""
    pts = np.asarray(points, dtype=float)
    mean = pts.mean(axis=0)
    c = pts - mean
    return mean, c.T @ c / len(pts)

