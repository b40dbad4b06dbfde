"""Closed, outward-oriented primitive meshes used for fixtures and tests."""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh
from .obb import Obb, obb_corners

# triangles over the obb_corners bit order, outward winding
_BOX_TRIS = np.array([
    [0, 4, 6], [0, 6, 2],
    [1, 3, 7], [1, 7, 5],
    [0, 1, 5], [0, 5, 4],
    [2, 6, 7], [2, 7, 3],
    [0, 2, 3], [0, 3, 1],
    [4, 5, 7], [4, 7, 6],
])


def box_mesh(center=(0.0, 0.0, 0.0), half_extents=(0.5, 0.5, 0.5), rotation=None, name=None) -> TriMesh:
    q = [0.0, 0.0, 0.0, 1.0] if rotation is None else rotation
    return obb_mesh(Obb(center, half_extents, q), name)


def obb_mesh(box: Obb, name=None) -> TriMesh:
    return TriMesh(obb_corners(box), _BOX_TRIS.copy(), name)


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0), name=None) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=float)
    return TriMesh(v, np.array(faces), name)


def cylinder(radius: float = 0.5, height: float = 1.0, segments: int = 24, center=(0.0, 0.0, 0.0),
             axis: int = 2, name=None) -> TriMesh:
    """Closed cylinder along ``axis`` with capped ends."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    bottom = np.column_stack([ring, np.full(segments, -height / 2)])
    top = np.column_stack([ring, np.full(segments, height / 2)])
    v = np.vstack([bottom, top, [[0, 0, -height / 2], [0, 0, height / 2]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, j, segments + j), (i, segments + j, segments + i)]
        faces += [(cb, j, i), (ct, segments + i, segments + j)]
    perm = {2: [0, 1, 2], 0: [2, 0, 1], 1: [1, 2, 0]}[axis]
    v = v[:, perm]
    f = np.array(faces)
    if np.linalg.det(np.eye(3)[:, perm]) < 0:
        f = f[:, ::-1]
    return TriMesh(v + np.asarray(center, dtype=float), f, name)
