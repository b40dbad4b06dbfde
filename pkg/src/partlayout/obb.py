"""Oriented bounding boxes: exact minimum-volume boxes, PCA boxes and helpers.

The minimum box search follows the classic characterization that an optimal box
has two adjacent faces each flush with an edge of the convex hull. For every hull
edge direction ``d`` the first face normal ``u`` therefore lies on the great
circle perpendicular to ``d``. For a fixed ``u`` the best box is the minimum-area
rectangle of the projected hull, which is found exactly by testing every projected
hull edge direction (rotating-calipers candidates). The one-dimensional search
along each circle is a dense sweep, bounded Brent refinement of the best local
minima, and finally a small Nelder-Mead polish of the winning axis on the sphere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from .errors import DegenerateShapeError, EmptyInputError

EPS_THIN = 1e-6
SWEEP_SAMPLES = 36
REFINE_STARTS = 6
REFINE_WINDOW = 1.25
GOLDEN_ITERATIONS = 48
PRUNE_SLOPE_MIN = 2.0
PRUNE_SAFETY = 4.0
EXACT_HULL_LIMIT = 64
REDUCED_DIRECTIONS = 48
REDUCED_SWEEP = 16
REDUCED_SWEEP_SAMPLES = 24


@dataclass(frozen=True, eq=False)
class Obb:
    """Oriented box. ``rotation`` is a unit quaternion (x, y, z, w) mapping box frame to world."""

    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        h = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        nq = np.linalg.norm(q)
        if not nq > 0:
            raise ValueError("rotation quaternion has zero norm")
        if abs(nq - 1.0) > 1e-9:
            q = q / nq
        if np.any(h <= 0):
            raise ValueError("half_extents must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "_matrix", Rotation.from_quat(q).as_matrix())

    @classmethod
    def from_matrix(cls, center, half_extents, matrix, degenerate=False) -> "Obb":
        return cls(center, half_extents, Rotation.from_matrix(matrix).as_quat(), degenerate)

    @classmethod
    def axis_aligned(cls, center, half_extents) -> "Obb":
        return cls(center, half_extents, np.array([0.0, 0.0, 0.0, 1.0]))

    @property
    def matrix(self) -> np.ndarray:
        """3x3 rotation; columns are the box axes in world coordinates."""
        return self._matrix

    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self._matrix

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        local = self.to_local(np.asarray(points).reshape(-1, 3))
        return np.all(np.abs(local) <= self.half_extents + tol, axis=1)

    def to_dict(self) -> dict:
        return {
            "center": [float(x) for x in self.center],
            "half_extents": [float(x) for x in self.half_extents],
            "rotation": [float(x) for x in self.rotation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Obb":
        return cls(d["center"], d["half_extents"], d["rotation"])

    def __repr__(self):
        c = np.array2string(self.center, precision=4)
        h = np.array2string(self.half_extents, precision=4)
        return f"Obb(center={c}, half_extents={h})"


def obb_corners(box: Obb) -> np.ndarray:
    """The 8 corners. Corner ``i`` uses +h on local axis k when bit k of i is set, else -h."""
    bits = (np.arange(8)[:, None] >> np.arange(3)) & 1
    local = np.where(bits == 1, 1.0, -1.0) * box.half_extents
    return box.center + local @ box.matrix.T


def _canonical_frame(axes: np.ndarray, half: np.ndarray):
    """Sort axes by descending half-extent, fix signs and force a right-handed frame."""
    order = np.argsort(-half, kind="stable")
    axes = axes[:, order].copy()
    half = half[order]
    for k in range(2):
        col = axes[:, k]
        if col[np.argmax(np.abs(col))] < 0:
            axes[:, k] = -col
    axes[:, 2] = np.cross(axes[:, 0], axes[:, 1])
    return axes, half


def box_from_axes(points: np.ndarray, axes: np.ndarray, degenerate: bool = False) -> Obb:
    """Tightest box around ``points`` with the given orthonormal axes (columns)."""
    axes, _ = np.linalg.qr(axes)  # re-orthonormalize
    proj = points @ axes
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    axes, _ = _canonical_frame(axes, hi - lo)
    quat = Rotation.from_matrix(axes).as_quat()
    # rebuild from the stored quaternion so center/extents agree with what gets serialized
    rot = Rotation.from_quat(quat).as_matrix()
    proj = points @ rot
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    half = 0.5 * (hi - lo)
    center = rot @ (0.5 * (lo + hi))
    if np.any(half < EPS_THIN):
        degenerate = True
        half = np.maximum(half, EPS_THIN)
    return Obb(center, half, quat, degenerate)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInputError("bounding box of an empty point set")
    return pts


def _min_area_rect_axes(pts2: np.ndarray) -> np.ndarray:
    """Direction (unit 2-vector) of the minimum-area enclosing rectangle, rotating calipers."""
    try:
        hull = pts2[ConvexHull(pts2).vertices]
    except Exception:
        hull = pts2
    edges = np.roll(hull, -1, axis=0) - hull
    lens = np.linalg.norm(edges, axis=1)
    edges = edges[lens > 0] / lens[lens > 0, None]
    if len(edges) == 0:
        return np.array([1.0, 0.0])
    normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
    pe = hull @ edges.T
    pn = hull @ normals.T
    area = np.ptp(pe, axis=0) * np.ptp(pn, axis=0)
    return edges[int(np.argmin(area))]


def _degenerate_box(pts: np.ndarray, rank: int, basis: np.ndarray) -> Obb:
    if rank == 0:
        return Obb(pts[0], np.full(3, EPS_THIN), np.array([0.0, 0.0, 0.0, 1.0]), degenerate=True)
    if rank == 1:
        u = basis[0]
        helper = np.eye(3)[np.argmin(np.abs(u))]
        v = np.cross(u, helper)
        v /= np.linalg.norm(v)
        return box_from_axes(pts, np.column_stack([u, v, np.cross(u, v)]), degenerate=True)
    a, b = basis[0], basis[1]
    d2 = _min_area_rect_axes(np.column_stack([pts @ a, pts @ b]))
    x = d2[0] * a + d2[1] * b
    y = -d2[1] * a + d2[0] * b
    return box_from_axes(pts, np.column_stack([x, y, np.cross(x, y)]), degenerate=True)


def _rank(pts: np.ndarray):
    centered = pts - pts.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    scale = max(s[0], np.abs(pts).max(), 1e-300)
    tol = 1e-12 * scale * np.sqrt(len(pts))
    rank = int(np.sum(s > tol))
    return rank, vt


class _HullSearch:
    """Volume of the best box whose first axis is ``u``, for batches of ``u``.

    For a first axis ``u`` and an edge direction ``d`` the other two axes are
    ``v = (u x d) / |u x d|`` and ``w = v x u``, so the projections of the hull onto
    them come from the tables ``h . d`` and ``d x h`` without forming the axes.
    """

    def __init__(self, hull_pts: np.ndarray, edge_dirs: np.ndarray):
        self.h = hull_pts
        self.d = edge_dirs
        self.hd = hull_pts @ edge_dirs.T  # (H, E)
        self.dh = np.cross(edge_dirs[None, :, :], hull_pts[:, None, :]).reshape(-1, 3)  # (H*E, 3)

    def volumes(self, U: np.ndarray, chunk: int = 256):
        vols = np.empty(len(U))
        best_w = np.empty((len(U), 3))
        n_h, n_e = self.hd.shape
        for s in range(0, len(U), chunk):
            u = U[s:s + chunk]
            hu = self.h @ u.T  # (H, m)
            du = self.d @ u.T  # (E, m)
            d, ut = self.d, u.T
            # |u x d|^2 from the components; 1 - du^2 cancels badly near parallel
            n2 = ((d[:, 1:2] * ut[2] - d[:, 2:3] * ut[1]) ** 2 + (d[:, 2:3] * ut[0] - d[:, 0:1] * ut[2]) ** 2
                  + (d[:, 0:1] * ut[1] - d[:, 1:2] * ut[0]) ** 2)
            pw = self.hd[:, :, None] - du[None, :, :] * hu[:, None, :]
            pv = (self.dh @ u.T).reshape(n_h, n_e, -1)
            area = (pw.max(axis=0) - pw.min(axis=0)) * (pv.max(axis=0) - pv.min(axis=0))
            # edges nearly parallel to u give an ill-conditioned second axis
            valid = n2 > 1e-10
            area = np.where(valid, area / np.where(valid, n2, 1.0), np.inf)
            k = np.argmin(area, axis=0)
            cols = np.arange(len(u))
            vols[s:s + chunk] = (hu.max(axis=0) - hu.min(axis=0)) * area[k, cols]
            w = self.d[k] - du[k, cols][:, None] * u
            best_w[s:s + chunk] = w / np.linalg.norm(w, axis=1)[:, None]
        return vols, best_w


def _circle_basis(d: np.ndarray):
    helper = np.eye(3)[np.argmin(np.abs(d))]
    p = np.cross(d, helper)
    p /= np.linalg.norm(p)
    return p, np.cross(d, p)


def _unique_directions(vecs: np.ndarray, decimals: int = 12) -> np.ndarray:
    n = np.linalg.norm(vecs, axis=1)
    vecs = vecs[n > 0] / n[n > 0, None]
    # fold antipodal directions together
    flip = np.where(
        np.abs(vecs[:, 0]) > 1e-12, vecs[:, 0] < 0,
        np.where(np.abs(vecs[:, 1]) > 1e-12, vecs[:, 1] < 0, vecs[:, 2] < 0),
    )
    vecs = np.where(flip[:, None], -vecs, vecs)
    _, idx = np.unique(np.round(vecs, decimals), axis=0, return_index=True)
    return vecs[np.sort(idx)]


def _plane_volume(hull_pts: np.ndarray, u: np.ndarray):
    """Exact best box with first axis ``u``: 2D minimum-area rectangle of the projection."""
    p, q = _circle_basis(u)
    pts2 = np.column_stack([hull_pts @ p, hull_pts @ q])
    d2 = _min_area_rect_axes(pts2)
    w = d2[0] * p + d2[1] * q
    v = np.cross(u, w)
    widths = np.ptp(hull_pts @ np.column_stack([u, w, v]), axis=0)
    return float(np.prod(widths)), w


def _reduce_directions(dirs: np.ndarray, lengths: np.ndarray, limit: int) -> np.ndarray:
    """At most ``limit`` directions: the longest edge per coarse direction bin."""
    order = np.argsort(-lengths, kind="stable")
    dirs = dirs[order]
    for decimals in (2, 1, 0):
        _, idx = np.unique(np.round(dirs, decimals), axis=0, return_index=True)
        if len(idx) <= limit:
            break
    return dirs[np.sort(idx)[:limit]]


def _hull_edges(pts: np.ndarray, hull: ConvexHull):
    simp = hull.simplices
    edges = np.concatenate([simp[:, [0, 1]], simp[:, [1, 2]], simp[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    return pts[edges[:, 1]] - pts[edges[:, 0]]


def min_obb(points) -> Obb:
    """Minimum-volume oriented box enclosing ``points``.

    Hulls with at most ``EXACT_HULL_LIMIT`` vertices get the full edge-pair search.
    Larger hulls search a reduced set of edge directions and then polish with an
    exact per-axis rectangle fit; the box always contains every point but may be
    slightly larger than the optimum.

    Coplanar, collinear or coincident input yields a box whose thin axes are
    clamped to ``EPS_THIN`` with ``degenerate=True``.
    """
    pts = _as_points(points)
    rank, basis = _rank(pts)
    if rank < 3:
        return _degenerate_box(pts, rank, basis)
    try:
        hull = ConvexHull(pts)
    except Exception:
        return _degenerate_box(pts, 2, basis)
    hull_pts = pts[hull.vertices]
    edge_vecs = _hull_edges(pts, hull)
    dirs = _unique_directions(edge_vecs)
    exact = len(hull_pts) <= EXACT_HULL_LIMIT
    if exact:
        sweep_dirs = dirs
    else:
        lengths = np.linalg.norm(edge_vecs, axis=1)
        reduced = _reduce_directions(edge_vecs / lengths[:, None], lengths, REDUCED_DIRECTIONS)
        dirs = _unique_directions(reduced)
        sweep_dirs = dirs[:REDUCED_SWEEP]
    search = _HullSearch(hull_pts, dirs)

    # seeds: hull face normals, edge directions, principal axes
    normals = _unique_directions(hull.equations[:, :3])
    if not exact:
        areas = _face_areas(pts, hull.simplices)
        normals = _reduce_directions(hull.equations[:, :3], areas, REDUCED_DIRECTIONS)
    seed_u = np.concatenate([normals, dirs, basis])
    seed_vol, seed_w = search.volumes(seed_u)
    best = int(np.argmin(seed_vol))
    best_vol, best_u, best_wdir = seed_vol[best], seed_u[best], seed_w[best]

    # sweep the circle of normals perpendicular to each edge direction; besides a
    # uniform grid, each circle is sampled where the width along u has a kink
    # (u also perpendicular to another edge) or the silhouette changes (u inside a
    # face plane), so narrow basins of thin hulls are never stepped over
    n_theta = SWEEP_SAMPLES if exact else REDUCED_SWEEP_SAMPLES
    bases = [_circle_basis(d) for d in sweep_dirs]
    P = np.array([b[0] for b in bases])
    Q = np.array([b[1] for b in bases])
    grid = np.linspace(0.0, np.pi, n_theta, endpoint=False)
    thetas = np.broadcast_to(grid, (len(sweep_dirs), n_theta))
    if exact:
        others = np.concatenate([dirs, normals])
        cr = np.cross(sweep_dirs[:, None, :], others[None, :, :])
        extra = np.mod(np.arctan2(np.einsum("eok,ek->eo", cr, Q), np.einsum("eok,ek->eo", cr, P)), np.pi)
        parallel = np.linalg.norm(cr, axis=2) < 1e-9
        extra = np.where(parallel, 0.0, extra)
        thetas = np.concatenate([thetas, extra], axis=1)
    thetas = np.sort(thetas, axis=1)
    n_cols = thetas.shape[1]
    U = (np.cos(thetas)[:, :, None] * P[:, None, :] + np.sin(thetas)[:, :, None] * Q[:, None, :]).reshape(-1, 3)
    vol, wbest = search.volumes(U)
    vol = vol.reshape(len(sweep_dirs), n_cols)
    k = int(np.argmin(vol))
    if vol.flat[k] < best_vol:
        best_vol, best_u, best_wdir = vol.flat[k], U[k], wbest[k]

    # refine every promising local minimum of each circle
    left = np.roll(vol, 1, axis=1)
    right = np.roll(vol, -1, axis=1)
    t_left = np.roll(thetas, 1, axis=1)
    t_left[:, 0] -= np.pi
    t_right = np.roll(thetas, -1, axis=1)
    t_right[:, -1] += np.pi
    local = (vol <= left) & (vol <= right)
    if exact:
        local &= vol <= vol.min() * REFINE_WINDOW
        cand = np.argwhere(local)
    else:
        cand = np.argwhere(local)
        cand = cand[np.argsort(vol[local], kind="stable")][:REFINE_STARTS]
    # relative slope seen between samples, with a wide safety margin, bounds how
    # far an arc's minimum can sit below its current value during pruning
    gap = t_right - thetas
    spaced = gap >= 0.25 * np.pi / n_theta
    rel = np.abs(vol - right)[spaced] / (gap[spaced] * np.minimum(vol, right)[spaced])
    slope = max(PRUNE_SLOPE_MIN, PRUNE_SAFETY * float(rel.max()))
    ci, cj = cand[:, 0], cand[:, 1]
    t_best, v_best = _golden_arcs(search, P[ci], Q[ci], t_left[ci, cj], t_right[ci, cj], slope)
    k = int(np.argmin(v_best))
    if v_best[k] < best_vol:
        ei = cand[k, 0]
        u = np.cos(t_best[k]) * P[ei] + np.sin(t_best[k]) * Q[ei]
        v, w = search.volumes(u[None, :])
        best_vol, best_u, best_wdir = v[0], u, w[0]

    if not exact:
        def plane(U):
            vol, w = _plane_volume(hull_pts, U[0])
            return np.array([vol]), w[None, :]

        vol_exact, w_exact = _plane_volume(hull_pts, best_u)
        if vol_exact < best_vol:
            best_vol, best_wdir = vol_exact, w_exact
        best_u, best_wdir = _polish(plane, best_u, best_vol, best_wdir, maxiter=120)
    axes = np.column_stack([best_u, best_wdir, np.cross(best_u, best_wdir)])
    return box_from_axes(pts, axes)


def _golden_arcs(search: _HullSearch, P, Q, lo, hi, slope: float, iters: int = GOLDEN_ITERATIONS):
    """Golden-section minimum of the box volume on many circle arcs at once.

    Arc ``i`` is ``cos(t) P[i] + sin(t) Q[i]`` for ``t`` in ``[lo[i], hi[i]]``.
    Every other iteration, arcs that cannot beat the best value seen so far are
    dropped; the bound assumes the relative slope of the volume stays below
    ``slope`` per radian. Returns the best angle and volume of each arc.
    """
    def f(t, P, Q):
        U = np.cos(t)[:, None] * P + np.sin(t)[:, None] * Q
        return search.volumes(U)[0]

    g = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = np.array(lo, dtype=float), np.array(hi, dtype=float)
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c, P, Q), f(d, P, Q)
    t_out = np.where(fc <= fd, c, d)
    v_out = np.minimum(fc, fd)
    alive = np.arange(len(a))
    for it in range(1, iters + 1):
        keep_left = fc <= fd
        a = np.where(keep_left, a, c)
        b = np.where(keep_left, d, b)
        x = np.where(keep_left, b - g * (b - a), a + g * (b - a))
        fx = f(x, P, Q)
        c, d, fc, fd = (np.where(keep_left, x, d), np.where(keep_left, c, x),
                        np.where(keep_left, fx, fd), np.where(keep_left, fc, fx))
        cur = np.minimum(fc, fd)
        t_out[alive] = np.where(fc <= fd, c, d)
        v_out[alive] = cur
        if it % 2 == 0 and len(alive) > 1:
            keep = cur <= cur.min() * (1.0 + slope * (b - a))
            alive, a, b, c, d, fc, fd, P, Q = (arr[keep] for arr in (alive, a, b, c, d, fc, fd, P, Q))
    return t_out, v_out


def _face_areas(pts: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    tri = pts[simplices]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def _polish(volumes, u0: np.ndarray, vol0: float, w0: np.ndarray, maxiter: int = 400):
    """Local Nelder-Mead over the sphere of first-axis directions around ``u0``."""
    p, q = _circle_basis(u0)

    def direction(x):
        u = u0 + x[0] * p + x[1] * q
        return u / np.linalg.norm(u)

    def f(x):
        return volumes(direction(x)[None, :])[0][0]

    res = minimize(f, np.zeros(2), method="Nelder-Mead",
                   options={"xatol": 1e-13, "fatol": 1e-16, "initial_simplex": [[0, 0], [1e-3, 0], [0, 1e-3]],
                            "maxiter": maxiter})
    if res.fun < vol0:
        u = direction(res.x)
        _, w = volumes(u[None, :])
        return u, w[0]
    return u0, w0


def pca_obb(points) -> Obb:
    """Box aligned with the eigenvectors of the point covariance."""
    pts = _as_points(points)
    if len(pts) < 2 or np.all(pts == pts[0]):
        raise DegenerateShapeError("pca_obb needs at least two distinct points")
    cov = np.cov(pts.T)
    _, vecs = np.linalg.eigh(cov)
    axes = vecs[:, ::-1]
    if np.linalg.det(axes) < 0:
        axes[:, 2] = -axes[:, 2]
    return box_from_axes(pts, axes)


def enclosing_obb(boxes) -> Obb:
    """Minimum box around every corner of the given boxes."""
    boxes = list(boxes)
    if not boxes:
        raise EmptyInputError("enclosing_obb needs at least one box")
    return min_obb(np.concatenate([obb_corners(b) for b in boxes]))
