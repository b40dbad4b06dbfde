"""Triangle meshes and the basic geometry the rest of the package builds on.

Meshes are plain numpy arrays wrapped in a small dataclass. Every function here
is pure: inputs are never modified in place.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _csgraph_components
from scipy.spatial import cKDTree

from .errors import DegenerateShapeError, EmptyInputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh.

    vertices: (n, 3) float64 positions
    faces: (m, 3) int64 vertex indices
    """

    vertices: np.ndarray
    faces: np.ndarray
    name: Optional[str] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices contain NaN or infinite values")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @classmethod
    def empty(cls, name=None) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), name)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        """(m, 3, 3) array of triangle corner positions."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(norm > 0, n / norm, 0.0)

    def transformed(self, matrix: np.ndarray) -> "TriMesh":
        """Apply a 4x4 affine matrix. Winding flips when the matrix mirrors."""
        m = np.asarray(matrix, dtype=np.float64)
        v = self.vertices @ m[:3, :3].T + m[:3, 3]
        f = self.faces
        if np.linalg.det(m[:3, :3]) < 0:
            f = f[:, ::-1]
        return TriMesh(v, f, self.name)

    def submesh(self, face_index: np.ndarray, name=None) -> "TriMesh":
        """Mesh made of the given faces, keeping only referenced vertices (in index order)."""
        faces = self.faces[np.asarray(face_index, dtype=np.int64)]
        used, inverse = np.unique(faces.ravel(), return_inverse=True)
        return TriMesh(self.vertices[used], inverse.reshape(-1, 3), name if name is not None else self.name)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        if np.any(lo > hi):
            raise ValueError("Aabb min must be <= max componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def of_points(cls, points: np.ndarray) -> "Aabb":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise EmptyInputError("cannot bound an empty point set")
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def extents(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def inflated(self, amount: float) -> "Aabb":
        return Aabb(self.min - amount, self.max + amount)

    def intersects(self, other: "Aabb") -> bool:
        return bool(np.all(self.min <= other.max) and np.all(other.min <= self.max))

    def contains(self, points: np.ndarray, tol: float = 0.0) -> bool:
        pts = np.asarray(points).reshape(-1, 3)
        return bool(np.all(pts >= self.min - tol) and np.all(pts <= self.max + tol))


@dataclass(frozen=True)
class SurfaceSamples:
    points: np.ndarray
    normals: np.ndarray


@dataclass(frozen=True)
class NormalizationTransform:
    """x' = scale * (x + translation)."""

    translation: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("normalization scale must be positive")
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=np.float64) + self.translation)

    def to_dict(self) -> dict:
        return {"translation": [float(x) for x in self.translation], "scale": float(self.scale)}


def concatenate(meshes: Sequence[TriMesh], name=None) -> TriMesh:
    """Stack meshes into one, offsetting face indices. Face order follows input order."""
    if not meshes:
        return TriMesh.empty(name)
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return TriMesh(np.concatenate(verts), np.concatenate(faces), name)


def weld_labels(vertices: np.ndarray, epsilon: float) -> np.ndarray:
    """Cluster label per vertex; a label is the smallest original index in its cluster.

    Clusters are the transitive closure of "within epsilon". epsilon == 0 merges exact
    duplicates only.
    """
    v = np.asarray(vertices, dtype=np.float64)
    n = len(v)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if epsilon <= 0:
        _, first, inverse = np.unique(v, axis=0, return_index=True, return_inverse=True)
        return first[inverse.ravel()].astype(np.int64)
    pairs = cKDTree(v).query_pairs(epsilon, output_type="ndarray")
    if len(pairs) == 0:
        return np.arange(n, dtype=np.int64)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = _csgraph_components(graph, directed=False)
    # smallest original index per component
    rep = np.full(comp.max() + 1, n, dtype=np.int64)
    np.minimum.at(rep, comp, np.arange(n))
    return rep[comp]


def weld_vertices(mesh: TriMesh, epsilon: float) -> TriMesh:
    """Merge vertices closer than ``epsilon`` and drop faces that collapse.

    Each merged vertex takes the position of the lowest-index member, and surviving
    vertices keep their relative order, so a mesh without duplicates comes back unchanged.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    labels = weld_labels(mesh.vertices, epsilon)
    keep_vertex, new_index = np.unique(labels, return_inverse=True)
    faces = new_index[labels[mesh.faces]].reshape(-1, 3) if len(mesh.faces) else mesh.faces
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return TriMesh(mesh.vertices[keep_vertex], faces[ok], mesh.name)


def face_components(faces: np.ndarray, n_vertices: int) -> list[np.ndarray]:
    """Face index groups connected through shared vertices.

    Ordered by descending face count, ties broken by the smallest face index.
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    m = len(faces)
    if m == 0:
        return []
    # bipartite face/vertex graph: nodes [0, m) are faces, [m, m + n) vertices
    rows = np.repeat(np.arange(m), 3)
    cols = faces.ravel() + m
    size = m + n_vertices
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(size, size))
    _, labels = _csgraph_components(graph, directed=False)
    face_labels = labels[:m]
    order = np.argsort(face_labels, kind="stable")
    split = np.flatnonzero(np.diff(face_labels[order])) + 1
    groups = np.split(order, split)
    groups.sort(key=lambda g: (-len(g), int(g[0])))
    return groups


def connected_components(mesh: TriMesh) -> list[TriMesh]:
    """Split a welded mesh into vertex-connected pieces (largest first)."""
    groups = face_components(mesh.faces, len(mesh.vertices))
    base = mesh.name or "mesh"
    return [mesh.submesh(g, name=f"{base}#{i}") for i, g in enumerate(groups)]


def signed_volume(mesh: TriMesh) -> float:
    if mesh.is_empty:
        return 0.0
    tri = mesh.triangles()
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def mesh_volume(mesh: TriMesh) -> float:
    """Enclosed volume via the signed tetrahedron sum.

    Exact for closed, consistently oriented meshes. For open meshes the result is only
    a magnitude heuristic (it depends on where the origin sits).
    """
    return abs(signed_volume(mesh))


def is_watertight(mesh: TriMesh) -> bool:
    """True when every undirected edge is shared by exactly two faces."""
    if mesh.is_empty:
        return False
    f = mesh.faces
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def joint_aabb(meshes: Sequence[TriMesh]) -> Aabb:
    pts = [m.vertices for m in meshes if len(m.vertices)]
    if not pts:
        raise EmptyInputError("no vertices to bound")
    return Aabb.of_points(np.concatenate(pts))


def normalize_shape(segments: Sequence[TriMesh]) -> tuple[list[TriMesh], NormalizationTransform]:
    """Center the joint AABB at the origin and scale its longest side to 1."""
    if not segments:
        raise EmptyInputError("normalize_shape needs at least one segment")
    box = joint_aabb(segments)
    longest = float(box.extents.max())
    if longest <= 0:
        raise DegenerateShapeError("shape has zero extent")
    transform = NormalizationTransform(-box.center, 1.0 / longest)
    out = [TriMesh(transform.apply(s.vertices), s.faces, s.name) for s in segments]
    return out, transform


def sample_surface(mesh: TriMesh, n: int, seed: int) -> SurfaceSamples:
    """Area-weighted uniform surface samples with the source face normals."""
    if n <= 0:
        raise ValueError("n must be positive")
    areas = mesh.face_areas() if not mesh.is_empty else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise DegenerateShapeError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face_idx = np.searchsorted(np.cumsum(areas), rng.random(n) * total, side="right")
    face_idx = np.minimum(face_idx, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles()[face_idx]
    points = (
        (1.0 - r1)[:, None] * tri[:, 0]
        + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
        + (r1 * r2)[:, None] * tri[:, 2]
    )
    normals = mesh.face_normals()[face_idx]
    return SurfaceSamples(points, normals)
