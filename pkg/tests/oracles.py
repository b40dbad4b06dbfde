"""Independent reference computations used to check the library.

Nothing here calls into the code under test except for plain data types.
"""

import numpy as np
from scipy.spatial.transform import Rotation


_ROTATION_CACHE = {}


def random_rotation_rows(n_rotations=100_000, seed=0) -> np.ndarray:
    """Rows of ``n_rotations`` uniform random rotation matrices, stacked as (3n, 3)."""
    key = (n_rotations, seed)
    if key not in _ROTATION_CACHE:
        mats = Rotation.random(n_rotations, random_state=seed).as_matrix()
        _ROTATION_CACHE[key] = np.ascontiguousarray(mats.reshape(-1, 3))
    return _ROTATION_CACHE[key]


def brute_force_box_volume(points, n_rotations=100_000, seed=0, chunk=3_000) -> float:
    """Smallest AABB volume of the points over uniformly random rotations."""
    pts = np.asarray(points, dtype=float).T
    rows = random_rotation_rows(n_rotations, seed)
    best = np.inf
    for s in range(0, len(rows), 3 * chunk):
        proj = rows[s:s + 3 * chunk] @ pts  # each row is one rotated axis
        ext = (proj.max(axis=1) - proj.min(axis=1)).reshape(-1, 3)
        best = min(best, float(np.prod(ext, axis=1).min()))
    return best


def mc_box_iou(a, b, n=10_000_000, seed=1234, chunk=1_000_000) -> float:
    """Monte Carlo IoU of two boxes given as (center, axes-as-columns, half_extents).

    Samples are drawn uniformly from box a and from box b; with
    p = P(x in b | x ~ a) and q = P(x in a | x ~ b), the intersection is p*vol(a) =
    q*vol(b) and IoU follows from either estimate. Both are pooled.
    """
    rng = np.random.default_rng(seed)
    (ca, ma, ha), (cb, mb, hb) = a, b
    va, vb = 8 * np.prod(ha), 8 * np.prod(hb)

    def frac_inside(c_src, m_src, h_src, c_dst, m_dst, h_dst, count):
        # unit-cube samples map affinely into the destination frame, one axis at a time
        lin = (h_src[:, None] * m_src.T) @ m_dst
        off = (c_src - c_dst) @ m_dst - lin.sum(axis=0)
        lin = (2 * lin).astype(np.float32)
        hits = 0
        left = count
        while left:
            k = min(chunk, left)
            u = rng.random((3, k), dtype=np.float32)
            ok = np.ones(k, dtype=bool)
            for j in range(3):
                x = u[0] * lin[0, j] + u[1] * lin[1, j] + u[2] * lin[2, j] + np.float32(off[j])
                ok &= np.abs(x) <= np.float32(h_dst[j])
            hits += int(np.count_nonzero(ok))
            left -= k
        return hits / count

    p = frac_inside(ca, ma, ha, cb, mb, hb, n // 2)
    q = frac_inside(cb, mb, hb, ca, ma, ha, n - n // 2)
    inter = 0.5 * (p * va + q * vb)
    return inter / (va + vb - inter)


def aabb_iou(lo_a, hi_a, lo_b, hi_b) -> float:
    """Closed-form IoU of two axis-aligned boxes."""
    lo_a, hi_a, lo_b, hi_b = map(np.asarray, (lo_a, hi_a, lo_b, hi_b))
    overlap = np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0, None)
    inter = float(np.prod(overlap))
    return inter / (np.prod(hi_a - lo_a) + np.prod(hi_b - lo_b) - inter)


def union_find_sizes(faces, n_vertices):
    parent = list(range(n_vertices))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b, c in faces:
        for u, v in ((a, b), (b, c)):
            ru, rv = find(int(u)), find(int(v))
            if ru != rv:
                parent[ru] = rv
    counts = {}
    for f in faces:
        r = find(int(f[0]))
        counts[r] = counts.get(r, 0) + 1
    return sorted(counts.values(), reverse=True)


def triangle_multiset(meshes, decimals=9):
    """Faces as sorted coordinate triples, so the check survives re-indexing."""
    from collections import Counter
    out = Counter()
    for m in meshes:
        tri = np.round(np.asarray(m.vertices)[np.asarray(m.faces)], decimals) + 0.0
        for t in tri:
            out[tuple(sorted(map(tuple, t)))] += 1
    return out


def spatial_pieces(vertices, faces, tau=5e-3, decimals=9):
    """Number of pieces after welding by rounded position, grouping faces by shared
    vertices, and joining islands whose axis-aligned extents come within ``tau``."""
    verts = np.round(np.asarray(vertices, dtype=float), decimals) + 0.0
    _, key = np.unique(verts, axis=0, return_inverse=True)
    key = key.ravel()
    welded = [[int(key[i]) for i in f] for f in np.asarray(faces)]
    parent = list(range(len(verts)))

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    for a, b, c in welded:
        for u, v in ((a, b), (b, c)):
            parent[find(u)] = find(v)
    islands = {}
    for f, (a, _, _) in zip(np.asarray(faces), welded):
        islands.setdefault(find(a), []).append(f)
    boxes = []
    for tris in islands.values():
        pts = verts[np.concatenate(tris)]
        boxes.append((pts.min(axis=0) - tau, pts.max(axis=0) + tau))
    group = list(range(len(boxes)))

    def root(x):
        while group[x] != x:
            x = group[x]
        return x

    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if np.all(boxes[i][0] <= boxes[j][1]) and np.all(boxes[j][0] <= boxes[i][1]):
                group[root(i)] = root(j)
    return len({root(i) for i in range(len(boxes))})
