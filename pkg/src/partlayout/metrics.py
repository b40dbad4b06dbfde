"""Layout adherence metrics: exact box IoU, Part-IoU, Object-IoU, Voxel-IoU, corpus stats."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AlignmentError, IncompatibleGridsError
from .mesh import TriMesh, is_watertight, weld_vertices
from .obb import Obb, box_from_axes, min_obb, obb_corners

logger = logging.getLogger(__name__)

MAX_BOXES = 8
DEFAULT_MC_SAMPLES = 1 << 20
DEFAULT_MC_SEED = 0xC0DE
GRID_LO = -0.55
GRID_EXTENT = 1.1


@dataclass
class Layout:
    boxes: list
    prompt: str = ""

    def __post_init__(self):
        if not 1 <= len(self.boxes) <= MAX_BOXES:
            raise ValueError(f"a layout holds 1..{MAX_BOXES} boxes, got {len(self.boxes)}")

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "boxes": [b.to_dict() for b in self.boxes]}

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        return cls([Obb.from_dict(b) for b in d["boxes"]], d.get("prompt", ""))


# ----------------------------------------------------------------- box-box IoU

# outward-facing quads over the corner bit order of obb_corners
_BOX_FACES = ((0, 4, 6, 2), (1, 3, 7, 5), (0, 1, 5, 4), (2, 6, 7, 3), (0, 2, 3, 1), (4, 5, 7, 6))


def _clip(verts, faces, axis, sign, limit, eps=0.0):
    """Clip a closed convex polytope by the half-space ``sign * x[axis] <= limit``.

    The polytope is a vertex list plus outward CCW faces of vertex indices. Distances
    within ``eps`` of the plane are snapped onto it, so faces coplanar with the plane
    up to rounding are replaced by the cap instead of being counted twice. Returns
    ``(verts, faces)``, or ``None`` when nothing is left.
    """
    d = [sign * v[axis] - limit for v in verts]
    d = [x if x > eps or x < -eps else 0.0 for x in d]
    if max(d) <= 0.0:
        return verts, faces
    if min(d) >= 0.0:
        return None
    verts = list(verts)
    crossing = {}
    out, cap = [], set()

    def cut(i, j):
        key = (i, j) if i < j else (j, i)
        k = crossing.get(key)
        if k is None:
            a, b = verts[i], verts[j]
            t = d[i] / (d[i] - d[j])
            verts.append((a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])))
            k = crossing[key] = len(verts) - 1
        return k

    for face in faces:
        fd = [d[i] for i in face]
        if max(fd) <= 0.0:
            if min(fd) < 0.0:
                out.append(face)
                cap.update(i for i, x in zip(face, fd) if x == 0.0)
            continue
        if min(fd) >= 0.0:
            cap.update(i for i, x in zip(face, fd) if x == 0.0)
            continue
        res = []
        prev, dprev = face[-1], fd[-1]
        for cur, dcur in zip(face, fd):
            if dcur <= 0.0:
                if dprev > 0.0 and dcur < 0.0:
                    k = cut(prev, cur)
                    res.append(k)
                    cap.add(k)
                res.append(cur)
                if dcur == 0.0:
                    cap.add(cur)
            elif dprev < 0.0:
                k = cut(prev, cur)
                res.append(k)
                cap.add(k)
            prev, dprev = cur, dcur
        if len(res) >= 3:
            out.append(res)
    if len(cap) >= 3:
        a1, a2 = (axis + 1) % 3, (axis + 2) % 3
        pts = [verts[i] for i in cap]
        cu = sum(p[a1] for p in pts) / len(pts)
        cv = sum(p[a2] for p in pts) / len(pts)
        ring = sorted(cap, key=lambda i: math.atan2(verts[i][a2] - cv, verts[i][a1] - cu))
        if sign < 0:
            ring.reverse()
        out.append(ring)
    if not out:
        return None
    # drop vertices that were cut away so later planes only see the current polytope
    used = sorted({i for f in out for i in f})
    remap = {i: k for k, i in enumerate(used)}
    return [verts[i] for i in used], [[remap[i] for i in f] for f in out]


def _polytope_volume(verts, faces) -> float:
    total = 0.0
    for face in faces:
        x0, y0, z0 = verts[face[0]]
        for i in range(1, len(face) - 1):
            x1, y1, z1 = verts[face[i]]
            x2, y2, z2 = verts[face[i + 1]]
            total += x0 * (y1 * z2 - z1 * y2) - y0 * (x1 * z2 - z1 * x2) + z0 * (x1 * y2 - y1 * x2)
    return total / 6.0


_CORNER_SIGNS = np.where(((np.arange(8)[:, None] >> np.arange(3)) & 1) == 1, 1.0, -1.0)
_FACE_LISTS = [list(f) for f in _BOX_FACES]


def box_intersection_volume(ca, ma, ha, cb, mb, hb) -> float:
    """Intersection volume of boxes given as (center, axes matrix, half-extents) arrays."""
    gap = math.dist(ca, cb)
    if gap > math.hypot(*ha) + math.hypot(*hb):
        return 0.0
    local = (cb + (_CORNER_SIGNS * hb) @ mb.T - ca) @ ma
    eps = 1e-12 * max(float(np.abs(local).max()), float(max(ha)))
    poly = ([tuple(p) for p in local.tolist()], _FACE_LISTS)
    for axis in range(3):
        limit = float(ha[axis])
        for sign in (1.0, -1.0):
            poly = _clip(poly[0], poly[1], axis, sign, limit, eps)
            if poly is None:
                return 0.0
    return max(_polytope_volume(*poly), 0.0)


# plane p and p + 3 of the same box are parallel, so triples holding both never meet
_TRIPLES = np.array([(i, j, k) for i in range(12) for j in range(i + 1, 12) for k in range(j + 1, 12)
                     if len({i % 3 + 3 * (i // 6), j % 3 + 3 * (j // 6), k % 3 + 3 * (k // 6)}) == 3])


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def batch_intersection_volume(ha, cb, mb, hb) -> np.ndarray:
    """Vectorized intersection volumes of K box pairs, each given in the frame of box a.

    ``ha`` (K,3) are the half-extents of the axis-aligned box a; box b has center
    ``cb`` (K,3), axes as the columns of ``mb`` (K,3,3) and half-extents ``hb``. The
    intersection is the polytope bounded by the 12 face planes: its vertices are the
    feasible pairwise-independent plane triples, and its volume is a third of the
    sum of plane offset times face area. A face of b lying on a face plane of a is
    counted once.
    """
    ha, cb, mb, hb = (np.asarray(x, dtype=float) for x in (ha, cb, mb, hb))
    k = len(ha)
    eye = np.broadcast_to(np.eye(3), (k, 3, 3))
    bt = np.swapaxes(mb, 1, 2)  # rows are b's axes
    normals = np.concatenate([eye, -eye, bt, -bt], axis=1)  # (K,12,3)
    proj = np.einsum("kij,kj->ki", bt, cb)
    offsets = np.concatenate([ha, ha, proj + hb, hb - proj], axis=1)  # (K,12)
    scale = np.maximum(np.abs(cb).max(axis=1) + hb.max(axis=1), ha.max(axis=1))
    eps = 1e-9 * scale

    # a face plane of b that coincides with one of a's is dropped from the area sum
    cos = np.einsum("kpi,kqi->kpq", normals[:, :6], normals[:, 6:])
    same = (cos > 1 - 1e-12) & (np.abs(offsets[:, :6, None] - offsets[:, None, 6:]) <= eps[:, None, None])
    active = np.concatenate([np.ones((k, 6), bool), ~same.any(axis=1)], axis=1)

    # Cramer's rule for every plane triple, component-wise for speed
    nt = np.moveaxis(normals, 2, 0)  # (3,K,12)
    r0, r1, r2 = (nt[:, :, _TRIPLES[:, c]] for c in range(3))  # each (3,K,T)
    c12, c20, c01 = _cross(r1, r2), _cross(r2, r0), _cross(r0, r1)
    det = r0[0] * c12[0] + r0[1] * c12[1] + r0[2] * c12[2]
    ok = np.abs(det) > 1e-10
    inv = np.where(ok, 1.0, 0.0) / np.where(ok, det, 1.0)
    d0, d1, d2 = (offsets[:, _TRIPLES[:, c]] for c in range(3))
    pts = np.stack([(d0 * c12[i] + d1 * c20[i] + d2 * c01[i]) * inv for i in range(3)], axis=2)  # (K,T,3)
    resid = (pts[:, :, 0, None] * normals[:, None, :, 0] + pts[:, :, 1, None] * normals[:, None, :, 1]
             + pts[:, :, 2, None] * normals[:, None, :, 2] - offsets[:, None, :])  # (K,T,12)
    feasible = ok & (resid <= eps[:, None, None]).all(axis=2)

    # keep the feasible vertices only, padded to the largest count in the batch
    width = max(int(feasible.sum(axis=1).max()), 1)
    order = np.argsort(~feasible, axis=1, kind="stable")[:, :width]
    valid = np.take_along_axis(feasible, order, axis=1)
    pts = np.take_along_axis(pts, order[..., None], axis=1)
    resid = np.take_along_axis(resid, order[..., None], axis=1)

    on = valid[:, :, None] & (np.abs(resid) <= eps[:, None, None]) & active[:, None, :]  # (K,V,12)
    on = np.swapaxes(on, 1, 2)  # (K,12,V)
    # in-plane basis: the two other axes of the plane's own box
    basis_u = np.concatenate([np.roll(eye, -1, axis=1)] * 2 + [np.roll(bt, -1, axis=1)] * 2, axis=1)
    basis_v = np.concatenate([np.roll(eye, -2, axis=1)] * 2 + [np.roll(bt, -2, axis=1)] * 2, axis=1)
    pts_t = np.swapaxes(pts, 1, 2)
    u = basis_u @ pts_t
    v = basis_v @ pts_t
    count = on.sum(axis=2)
    denom = np.maximum(count, 1)
    cu = np.where(on, u, 0.0).sum(axis=2) / denom
    cv = np.where(on, v, 0.0).sum(axis=2) / denom
    du, dv = u - cu[..., None], v - cv[..., None]
    # pseudo-angle: monotone in the polar angle and much cheaper than arctan2
    ang = np.where(on, np.copysign(1.0 - du / np.maximum(np.abs(du) + np.abs(dv), 1e-300), dv), np.inf)
    idx = np.argsort(ang, axis=2)
    us = np.take_along_axis(u, idx, axis=2)
    vs = np.take_along_axis(v, idx, axis=2)
    pos = np.arange(us.shape[2])
    cross = us[..., :-1] * vs[..., 1:] - us[..., 1:] * vs[..., :-1]
    area2 = np.where(pos[:-1] + 1 < count[..., None], cross, 0.0).sum(axis=2)
    last = np.maximum(count - 1, 0)[..., None]
    ul, vl = np.take_along_axis(us, last, axis=2)[..., 0], np.take_along_axis(vs, last, axis=2)[..., 0]
    area2 += ul * vs[..., 0] - us[..., 0] * vl
    area = np.where(count >= 3, 0.5 * np.abs(area2), 0.0)
    return np.maximum((offsets * area).sum(axis=1) / 3.0, 0.0)


def intersection_volume(a: Obb, b: Obb) -> float:
    """Exact volume of the intersection of two oriented boxes.

    Box ``b`` is expressed in the frame of ``a`` and clipped by a's six slab planes;
    the volume of the resulting convex polytope comes from the divergence theorem.
    """
    return box_intersection_volume(a.center, a.matrix, a.half_extents, b.center, b.matrix, b.half_extents)


def obb_iou(a: Obb, b: Obb) -> float:
    """Intersection over union of two oriented boxes, computed exactly."""
    inter = intersection_volume(a, b)
    union = a.volume() + b.volume() - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


# ---------------------------------------------------------------- Part / Object


def _box_of(points: np.ndarray, mode: str) -> Obb:
    if mode == "aabb":
        return box_from_axes(points, np.eye(3))
    return min_obb(points)


def part_iou(parts: Sequence[TriMesh], layout: Layout, box_mode: str = "obb"):
    """Per-part IoU between each part's bounding box and its control box, plus the mean."""
    if len(parts) != len(layout.boxes):
        raise AlignmentError(f"{len(parts)} parts but {len(layout.boxes)} layout boxes")
    values = []
    for part, box in zip(parts, layout.boxes):
        if len(part.vertices) == 0 or part.is_empty:
            values.append(0.0)
            continue
        values.append(obb_iou(_box_of(part.vertices, box_mode), box))
    return values, float(np.mean(values))


def _in_any_box(points: np.ndarray, boxes) -> np.ndarray:
    inside = np.zeros(len(points), dtype=bool)
    for b in boxes:
        inside |= b.contains(points, tol=0.0)
    return inside


def _stratified_points(lo, hi, n: int, rng) -> np.ndarray:
    s = max(1, int(round(n ** (1.0 / 3.0))))
    g = (np.indices((s, s, s)).reshape(3, -1).T + rng.random((s ** 3, 3))) / s
    return lo + g * (hi - lo)


def object_iou(parts: Sequence[TriMesh], layout: Layout, mc_samples: int = DEFAULT_MC_SAMPLES,
               seed: int = DEFAULT_MC_SEED, box_mode: str = "obb"):
    """IoU between the object's bounding box and the union of the control boxes.

    The union has no closed form, so both volumes are estimated by stratified Monte
    Carlo over the joint bounding region. Returns ``(iou, standard_error)``.
    """
    verts = [p.vertices for p in parts if len(p.vertices)]
    if not verts:
        raise ValueError("object_iou needs at least one non-empty part")
    obj_box = _box_of(np.concatenate(verts), box_mode)
    corners = np.concatenate([obb_corners(obj_box)] + [obb_corners(b) for b in layout.boxes])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = _stratified_points(lo, hi, mc_samples, rng)
    n_inter = n_union = 0
    for s in range(0, len(pts), 1 << 18):
        chunk = pts[s:s + (1 << 18)]
        in_a = obj_box.contains(chunk, tol=0.0)
        in_u = _in_any_box(chunk, layout.boxes)
        n_inter += int(np.count_nonzero(in_a & in_u))
        n_union += int(np.count_nonzero(in_a | in_u))
    if n_union == 0:
        return 0.0, 0.0
    p = n_inter / n_union
    return p, math.sqrt(p * (1.0 - p) / n_union)


# ------------------------------------------------------------------- voxels


@dataclass
class VoxelGrid:
    """Occupancy over ``resolution**3`` cells indexed ``[ix, iy, iz]``."""

    resolution: int
    origin: np.ndarray
    cell_size: float
    occupancy: np.ndarray
    surface_fallback: bool = False

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.size != self.resolution ** 3:
            raise ValueError("occupancy size does not match resolution")
        self.occupancy = occ.reshape((self.resolution,) * 3)
        self.origin = np.asarray(self.origin, dtype=np.float64)

    @classmethod
    def empty(cls, resolution: int = 64) -> "VoxelGrid":
        return cls(resolution, np.full(3, GRID_LO), GRID_EXTENT / resolution,
                   np.zeros((resolution,) * 3, dtype=bool))

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    @property
    def cell_volume(self) -> float:
        return self.cell_size ** 3

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.resolution) + 0.5) * self.cell_size

    def bits(self) -> bytes:
        return np.packbits(self.occupancy.ravel()).tobytes()


def _edge_fn(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _column_hits(tri: np.ndarray, px, py):
    """z of ray/triangle hits for vertical rays at (px, py); None marks a degenerate hit."""
    (ax, ay, az), (bx, by, bz), (cx, cy, cz) = tri
    w0 = _edge_fn(bx, by, cx, cy, px, py)
    w1 = _edge_fn(cx, cy, ax, ay, px, py)
    w2 = _edge_fn(ax, ay, bx, by, px, py)
    area = _edge_fn(ax, ay, bx, by, cx, cy)
    if area == 0.0:
        return None, None, None
    s = np.sign(area)
    w0, w1, w2 = w0 * s, w1 * s, w2 * s
    tol = 1e-12 * abs(area)
    inside = (w0 > tol) & (w1 > tol) & (w2 > tol)
    touching = (w0 >= -tol) & (w1 >= -tol) & (w2 >= -tol) & ~inside
    z = (w0 * az + w1 * bz + w2 * cz) / abs(area)
    return inside, touching, z


def _solid_occupancy(mesh: TriMesh, grid: VoxelGrid) -> np.ndarray:
    res = grid.resolution
    xs, ys, zs = grid.centers(0), grid.centers(1), grid.centers(2)
    diff = np.zeros((res, res, res + 1), dtype=np.int32)
    degenerate = np.zeros((res, res), dtype=bool)
    cell, o = grid.cell_size, grid.origin
    tris = mesh.triangles()

    def add_hits(ix, iy, z):
        m = np.searchsorted(zs, z, side="left")  # voxel centers strictly below the hit
        np.add.at(diff, (ix, iy, 0), 1)
        np.add.at(diff, (ix, iy, m), -1)

    for tri in tris:
        x0 = int(math.ceil((tri[:, 0].min() - o[0]) / cell - 0.5))
        x1 = int(math.floor((tri[:, 0].max() - o[0]) / cell - 0.5))
        y0 = int(math.ceil((tri[:, 1].min() - o[1]) / cell - 0.5))
        y1 = int(math.floor((tri[:, 1].max() - o[1]) / cell - 0.5))
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, res - 1), min(y1, res - 1)
        if x1 < x0 or y1 < y0:
            continue
        ix, iy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1), indexing="ij")
        ix, iy = ix.ravel(), iy.ravel()
        inside, touching, z = _column_hits(tri, xs[ix], ys[iy])
        if inside is None:
            continue
        degenerate[ix[touching], iy[touching]] = True
        if inside.any():
            add_hits(ix[inside], iy[inside], z[inside])
    counts = np.cumsum(diff, axis=2)[:, :, :res]
    occ = (counts % 2) == 1

    # rays grazing an edge or vertex get re-cast from a slightly jittered position
    for ix, iy in zip(*np.nonzero(degenerate)):
        for attempt in range(1, 8):
            px = xs[ix] + cell * 1e-4 * attempt * 0.6180339887
            py = ys[iy] + cell * 1e-4 * attempt * 0.4142135623
            hits, bad = [], False
            for tri in tris:
                inside, touching, z = _column_hits(tri, np.array([px]), np.array([py]))
                if inside is None:
                    continue
                if touching[0]:
                    bad = True
                    break
                if inside[0]:
                    hits.append(z[0])
            if not bad:
                break
        hits = np.asarray(hits)
        occ[ix, iy] = (np.count_nonzero(hits[None, :] > zs[:, None], axis=1) % 2) == 1 if len(hits) else False
    return occ


def _surface_occupancy(mesh: TriMesh, grid: VoxelGrid) -> np.ndarray:
    """Voxels whose cell overlaps a triangle (separating-axis test)."""
    res, cell, o = grid.resolution, grid.cell_size, grid.origin
    occ = np.zeros((res,) * 3, dtype=bool)
    hs = 0.5 * cell
    for tri in mesh.triangles():
        lo = np.maximum(np.floor((tri.min(axis=0) - o) / cell).astype(int), 0)
        hi = np.minimum(np.floor((tri.max(axis=0) - o) / cell).astype(int), res - 1)
        if np.any(hi < lo):
            continue
        idx = np.stack(np.meshgrid(*[np.arange(lo[k], hi[k] + 1) for k in range(3)], indexing="ij"), -1).reshape(-1, 3)
        centers = o + (idx + 0.5) * cell
        v = tri[None, :, :] - centers[:, None, :]
        e = [tri[1] - tri[0], tri[2] - tri[1], tri[0] - tri[2]]
        axes = [np.cross(np.eye(3)[i], ej) for i in range(3) for ej in e]
        axes.append(np.cross(e[0], e[1]))
        keep = np.ones(len(idx), dtype=bool)
        for a in axes:
            if not np.any(a):
                continue
            p = v @ a
            r = hs * np.abs(a).sum()
            keep &= ~((p.min(axis=1) > r) | (p.max(axis=1) < -r))
        occ[idx[keep, 0], idx[keep, 1], idx[keep, 2]] = True
    return occ


def voxelize(meshes: Sequence[TriMesh], resolution: int = 64) -> VoxelGrid:
    """Solid occupancy over the cube [-0.55, 0.55]^3 (unit frame plus 5% per side).

    Each closed mesh is filled by ray parity along +z and the results are OR-ed, so
    overlapping parts give their union. Open meshes only mark the cells their
    triangles touch, and the grid's ``surface_fallback`` flag is set.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    grid = VoxelGrid.empty(resolution)
    occ = grid.occupancy
    for mesh in meshes:
        if mesh.is_empty:
            continue
        scale = float(np.ptp(mesh.vertices, axis=0).max()) or 1.0
        welded = weld_vertices(mesh, 1e-9 * scale)
        if is_watertight(welded):
            occ |= _solid_occupancy(mesh, grid)
        else:
            logger.info("mesh %s is not closed; using surface occupancy", mesh.name)
            grid.surface_fallback = True
            occ |= _surface_occupancy(mesh, grid)
    return grid


def voxelize_boxes(boxes: Sequence[Obb], resolution: int = 64) -> VoxelGrid:
    """Occupancy of the union of boxes (cell centers inside any box)."""
    grid = VoxelGrid.empty(resolution)
    c = np.stack(np.meshgrid(grid.centers(0), grid.centers(1), grid.centers(2), indexing="ij"), -1).reshape(-1, 3)
    grid.occupancy = _in_any_box(c, boxes).reshape((resolution,) * 3)
    return grid


def voxel_iou(a: VoxelGrid, b: VoxelGrid) -> float:
    """|a and b| / |a or b|; two empty grids count as identical (1.0)."""
    if a.resolution != b.resolution or a.cell_size != b.cell_size or not np.array_equal(a.origin, b.origin):
        raise IncompatibleGridsError("voxel grids differ in resolution, origin or cell size")
    union = np.count_nonzero(a.occupancy | b.occupancy)
    if union == 0:
        logger.warning("voxel_iou of two empty grids; defined as 1.0")
        return 1.0
    return float(np.count_nonzero(a.occupancy & b.occupancy) / union)


# ------------------------------------------------------------- corpus stats

IOU_THRESHOLD = 0.10
RATIO_THRESHOLD = 3.0
RATIO_RANGE = (0.0, 10.0)


@dataclass
class Histogram:
    edges: list
    counts: list
    undefined: int = 0

    @property
    def mass(self) -> int:
        return int(sum(self.counts)) + self.undefined

    def to_dict(self) -> dict:
        return {"edges": self.edges, "counts": self.counts, "undefined": self.undefined}


@dataclass
class StatsReport:
    """Histograms of mean part-IoU, largest-to-rest ratio and part count.

    Bin edges: IoU uses ``bins`` equal bins on [0, 1]; the ratio uses ``bins`` equal
    bins on [0, 10] with larger values counted in the last bin; part counts use one
    bin per integer from 1 to max(8, largest count). Shapes with a single part have
    no ratio and are tallied as ``undefined``.
    """

    mean_part_iou: Histogram
    largest_rest_ratio: Histogram
    part_count: Histogram
    sample_count: int
    iou_threshold: float = IOU_THRESHOLD
    ratio_threshold: float = RATIO_THRESHOLD
    above_iou_fraction: float = 0.0
    above_ratio_fraction: float = 0.0
    raw: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "thresholds": {"mean_part_iou": self.iou_threshold, "largest_rest_ratio": self.ratio_threshold},
            "above_threshold_fraction": {
                "mean_part_iou": self.above_iou_fraction,
                "largest_rest_ratio": self.above_ratio_fraction,
            },
            "mean_part_iou": self.mean_part_iou.to_dict(),
            "largest_rest_ratio": self.largest_rest_ratio.to_dict(),
            "part_count": self.part_count.to_dict(),
        }


def _stats_of(record) -> dict:
    return record.stats if hasattr(record, "stats") else record


def dataset_stats(records, bins: int = 20, iou_threshold: float = IOU_THRESHOLD,
                  ratio_threshold: float = RATIO_THRESHOLD) -> StatsReport:
    """Histogram the quality statistics of processed shapes (accepted or rejected)."""
    stats = [_stats_of(r) for r in records]
    if not stats:
        raise ValueError("dataset_stats needs at least one record")
    ious = np.array([s["mean_part_iou"] for s in stats], dtype=float)
    ratios = [s.get("largest_rest_ratio") for s in stats]
    counts = np.array([s["part_count"] for s in stats], dtype=int)

    iou_edges = np.round(np.linspace(0.0, 1.0, bins + 1), 12)  # rounding keeps the JSON edges tidy
    iou_hist, _ = np.histogram(np.clip(ious, 0.0, 1.0), bins=iou_edges)

    defined = np.array([r for r in ratios if r is not None], dtype=float)
    ratio_edges = np.round(np.linspace(*RATIO_RANGE, bins + 1), 12)
    ratio_hist, _ = np.histogram(np.clip(defined, RATIO_RANGE[0], RATIO_RANGE[1]), bins=ratio_edges)

    top = max(8, int(counts.max()))
    count_edges = np.arange(0.5, top + 1.0, 1.0)
    count_hist, _ = np.histogram(np.clip(counts, 1, top), bins=count_edges)

    n = len(stats)
    return StatsReport(
        mean_part_iou=Histogram(iou_edges.tolist(), iou_hist.tolist()),
        largest_rest_ratio=Histogram(ratio_edges.tolist(), ratio_hist.tolist(), undefined=n - len(defined)),
        part_count=Histogram(count_edges.tolist(), count_hist.tolist()),
        sample_count=n,
        iou_threshold=iou_threshold,
        ratio_threshold=ratio_threshold,
        above_iou_fraction=float(np.count_nonzero(ious > iou_threshold) / n),
        above_ratio_fraction=float(np.count_nonzero(defined > ratio_threshold) / n),
        raw={"mean_part_iou": ious.tolist(), "largest_rest_ratio": defined.tolist(), "part_count": counts.tolist()},
    )
