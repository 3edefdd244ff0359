"""Iterated error-state Kalman update with per-camera adaptive noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NoStats, SingularInnovation
from .imu import NavState, boxplus

LIDAR_VAR = 0.02 ** 2
PHOTO_VAR = (4.0 / 255.0) ** 2
COND_MAX = 1e12

_KIND_RANK = {"lio": 0, "intra": 1, "migration": 2}


@dataclass
class ResidualBlock:
    """Error rows ``e = h(x) - z`` with Jacobian ``de/d(dx)`` and per-row variance."""

    r: np.ndarray
    H: np.ndarray
    var: np.ndarray
    tag: tuple
    point_ids: np.ndarray | None = None

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float).reshape(-1)
        self.H = np.asarray(self.H, dtype=float).reshape(len(self.r), -1)
        self.var = np.broadcast_to(np.asarray(self.var, dtype=float), self.r.shape).copy()
        if np.any(self.var <= 0):
            raise ValueError("row variances must be positive")

    @property
    def kind(self) -> str:
        return self.tag[0]

    def sort_key(self):
        first = -1 if self.point_ids is None or len(self.point_ids) == 0 else int(self.point_ids[0])
        return (_KIND_RANK[self.kind],) + tuple(self.tag[1:]) + (first,)


@dataclass
class TrackingStats:
    n_tracked: int
    r2_mean: float
    grad_mean: float
    fraction: float = 0.0


@dataclass
class AdaptiveWeights:
    alpha: dict = field(default_factory=dict)
    alpha_cross: float = 1.0

    @classmethod
    def uniform(cls, cams=()):
        return cls({c: 1.0 for c in cams}, 1.0)

    def scale(self, tag: tuple) -> float:
        if tag[0] == "intra":
            return self.alpha.get(tag[1], 1.0)
        if tag[0] == "migration":
            return self.alpha_cross
        return 1.0


@dataclass(frozen=True)
class AdaptiveConfig:
    floor: float = 0.25
    ceil: float = 16.0
    f_min: float = 0.01
    g_min: float = 1e-3
    r2_floor: float = (1.0 / 255.0) ** 2


def adaptive_covariance(stats: dict, base_var: dict | None = None,
                        cfg: AdaptiveConfig | None = None):
    """Per-camera noise scales from tracking statistics.

    Each factor compares a camera against the median camera: larger squared
    residuals, a smaller share of tracked points or weaker gradients all push
    its scale up. Returns the weights and, when ``base_var`` maps camera ids
    (and ``"cross"``) to row variances, the diagonal of ``R_multi``.
    """
    cfg = cfg or AdaptiveConfig()
    if not stats:
        raise NoStats("no camera statistics")
    cams = sorted(stats)
    total = sum(stats[c].n_tracked for c in cams)
    for c in cams:
        stats[c].fraction = stats[c].n_tracked / total if total else 0.0
    live = [c for c in cams if stats[c].n_tracked > 0]
    alpha = {}
    if live:
        r2 = {c: max(stats[c].r2_mean, cfg.r2_floor) for c in live}
        f = {c: max(stats[c].fraction, cfg.f_min) for c in live}
        g = {c: max(stats[c].grad_mean, cfg.g_min) for c in live}
        r2_med = float(np.median([r2[c] for c in live]))
        f_med = float(np.median([f[c] for c in live]))
        g_med = float(np.median([g[c] for c in live]))
        for c in live:
            a = (r2[c] / r2_med) * (f_med / f[c]) * (g_med / g[c])
            alpha[c] = float(np.clip(a, cfg.floor, cfg.ceil))
    for c in cams:
        alpha.setdefault(c, cfg.ceil)
    cross = float(np.clip(2.0 * np.median([alpha[c] for c in cams]), cfg.floor, cfg.ceil))
    w = AdaptiveWeights(alpha, cross)
    if base_var is None:
        return w, None
    parts = [alpha[c] * np.asarray(base_var[c], dtype=float) for c in cams if c in base_var]
    if "cross" in base_var:
        parts.append(cross * np.asarray(base_var["cross"], dtype=float))
    return w, np.concatenate(parts) if parts else np.zeros(0)


def stack(blocks, weights: AdaptiveWeights | None = None, dim: int | None = None):
    """Concatenate blocks in canonical order; returns ``(r, H, R_diag, tags)``."""
    blocks = sorted(blocks, key=lambda b: b.sort_key())
    if dim is None:
        dim = blocks[0].H.shape[1] if blocks else 0
    for b in blocks:
        if b.H.shape[1] != dim:
            raise DimensionMismatch(f"block {b.tag} has {b.H.shape[1]} columns, expected {dim}")
    if not blocks:
        return np.zeros(0), np.zeros((0, dim)), np.zeros(0), []
    weights = weights or AdaptiveWeights()
    r = np.concatenate([b.r for b in blocks])
    H = np.vstack([b.H for b in blocks])
    R = np.concatenate([b.var * weights.scale(b.tag) for b in blocks])
    tags = [b.tag for b in blocks]
    return r, H, R, tags


def _retract(x, dx):
    if isinstance(x, NavState):
        return boxplus(x, dx)
    return np.asarray(x, dtype=float) + dx


def _dim(x) -> int:
    return x.dim if isinstance(x, NavState) else len(x)


def kalman_gain(P, H, R_diag):
    """Gain for diagonal measurement noise, choosing the cheaper factorization."""
    m, n = H.shape
    if m > n:
        HtRi = H.T / R_diag
        A = np.eye(n) + P @ HtRi @ H
        if np.linalg.cond(A) > COND_MAX:
            raise SingularInnovation("information matrix is ill-conditioned")
        return np.linalg.solve(A, P @ HtRi)
    S = H @ P @ H.T + np.diag(R_diag)
    S = 0.5 * (S + S.T)
    if np.linalg.cond(S) > COND_MAX:
        raise SingularInnovation("innovation matrix is ill-conditioned")
    jitter = 0.0
    for attempt in range(4):
        try:
            L = np.linalg.cholesky(S + jitter * np.eye(m))
            break
        except np.linalg.LinAlgError:
            jitter = 1e-9 if attempt == 0 else jitter * 10.0
    else:
        raise SingularInnovation("innovation matrix is not positive definite")
    PHt = P @ H.T
    return np.linalg.solve(L.T, np.linalg.solve(L, PHt.T)).T


def _gain_operators(P, H, R_diag):
    """``(apply, KH)`` where ``apply(v) = K v``; avoids forming K when rows dominate."""
    m, n = H.shape
    if m <= n:
        K = kalman_gain(P, H, R_diag)
        return (lambda v: K @ v), K @ H
    HtRi = H.T / R_diag
    A = np.eye(n) + P @ HtRi @ H
    if np.linalg.cond(A) > COND_MAX:
        raise SingularInnovation("information matrix is ill-conditioned")
    lu = np.linalg.inv(A)
    return (lambda v: lu @ (P @ (HtRi @ v))), lu @ (P @ (HtRi @ H))


@dataclass
class UpdateResult:
    x: object
    P: np.ndarray
    iterations: int
    converged: bool
    dx_trace: list
    rows: dict


def iterate_update(x0, P, providers, weights: AdaptiveWeights | None = None,
                   max_iter: int = 5, tol: float = 1e-6) -> UpdateResult:
    """Iterated update around ``x0``.

    Each provider is called as ``provider(x, iteration)`` and returns a list of
    :class:`ResidualBlock` linearized at ``x``. The error estimate is refined
    by ``dx = K (H dx_prev - e)`` until it stops moving.
    """
    n = _dim(x0)
    P = np.asarray(P, dtype=float)
    dx = np.zeros(n)
    x = x0
    trace = []
    KH = None
    rows = {}
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        blocks = [b for prov in providers for b in prov(x, it - 1)]
        r, H, R, tags = stack(blocks, weights, n)
        if len(r) == 0:
            KH = None
            converged = True
            break
        rows = {}
        for b in blocks:
            rows[b.kind] = rows.get(b.kind, 0) + len(b.r)
        apply_k, KH = _gain_operators(P, H, R)
        new = apply_k(H @ dx - r)
        step = float(np.linalg.norm(new - dx))
        trace.append(step)
        dx = new
        x = _retract(x0, dx)
        if step < tol:
            converged = True
            break
    if KH is None:
        return UpdateResult(x0 if not trace else x, P.copy(), it, converged, trace, rows)
    P_post = (np.eye(n) - KH) @ P
    P_post = 0.5 * (P_post + P_post.T)
    return UpdateResult(x, P_post, it, converged, trace, rows)


@dataclass(frozen=True)
class ScheduleConfig:
    mode: str = "sequential"      # or "joint"
    vision: bool = True
    n_cams: int = 1


def sequential_or_joint(cfg: ScheduleConfig) -> list:
    """Stages of provider names, each stage one iterated update."""
    if cfg.mode not in ("sequential", "joint"):
        raise ValueError(f"unknown schedule mode {cfg.mode!r}")
    if not cfg.vision or cfg.n_cams == 0:
        return [("lio",)]
    if cfg.mode == "joint":
        return [("lio", "vision")]
    return [("lio",), ("vision",)]


def run_schedule(x, P, schedule, providers: dict, weights=None, max_iter=5, tol=1e-6):
    results = []
    for stage in schedule:
        provs = [providers[name] for name in stage if name in providers]
        res = iterate_update(x, P, provs, weights, max_iter, tol)
        x, P = res.x, res.P
        results.append(res)
    return x, P, results
