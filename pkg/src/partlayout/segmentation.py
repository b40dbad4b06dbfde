"""Dataset pipeline: raw mesh -> part-segmented shape with one oriented box per part.

Stages: load (glTF scenes are flattened) -> weld -> connected components ->
normalize -> auto-merge of planar/negligible segments -> re-normalize ->
progressive volume-guided merging -> min OBB per part -> stats -> heuristic filter.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from .config import PipelineConfig, config_hash
from .errors import StageError
from .io import load_mesh, parse_obj, write_parts
from .mesh import (
    Aabb, TriMesh, concatenate, connected_components, is_watertight, joint_aabb, mesh_volume,
    normalize_shape, weld_vertices,
)
from .metrics import obb_iou
from .obb import Obb, min_obb

logger = logging.getLogger(__name__)


class DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.groups = n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        self.groups -= 1
        return True


@dataclass(frozen=True, eq=False)
class Segment:
    mesh: TriMesh
    volume: float
    aabb: Aabb
    id: int
    flags: tuple = ()

    @classmethod
    def of(cls, mesh: TriMesh, id: int, flags=()) -> "Segment":
        return cls(mesh, mesh_volume(mesh), Aabb.of_points(mesh.vertices), id, tuple(flags))

    def with_flag(self, flag: str) -> "Segment":
        if flag in self.flags:
            return self
        return Segment(self.mesh, self.volume, self.aabb, self.id, self.flags + (flag,))


@dataclass
class FilterThresholds:
    max_mean_part_iou: float = 0.10
    max_largest_rest_ratio: float = 3.0
    max_components_per_part: int = 1
    part_count_range: tuple = (2, 8)

    def __post_init__(self):
        lo, hi = self.part_count_range
        if not (self.max_mean_part_iou > 0 and self.max_largest_rest_ratio > 0 and self.max_components_per_part > 0):
            raise ValueError("filter thresholds must be positive")
        if not 0 < lo <= hi:
            raise ValueError("part_count_range must satisfy 0 < min <= max")

    @classmethod
    def from_config(cls, cfg) -> "FilterThresholds":
        return cls(cfg.max_mean_part_iou, cfg.max_largest_rest_ratio, cfg.max_components_per_part,
                   tuple(cfg.part_count_range))


@dataclass
class ShapeRecord:
    parts: list
    obbs: list
    prompt: Optional[str] = None
    stats: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.parts) != len(self.obbs):
            raise ValueError("parts and obbs must be index-aligned")

    def to_dict(self, part_paths: Sequence[str]) -> dict:
        return {
            "parts": list(part_paths),
            "obbs": [b.to_dict() for b in self.obbs],
            "prompt": self.prompt,
            "stats": self.stats,
            "provenance": self.provenance,
        }


@dataclass
class Rejection:
    source: str
    reasons: list
    stats: dict
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"source": self.source, "reasons": self.reasons, "stats": self.stats, "provenance": self.provenance}


@dataclass
class FilterResult:
    accepted: bool
    reasons: list

    def __bool__(self):
        return self.accepted


# ------------------------------------------------------------------ contact


def build_contact_graph(segments: Sequence[Segment], tau: float) -> list[list[int]]:
    """Neighbors of each segment: AABBs inflated by ``tau`` intersect (closed test)."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    n = len(segments)
    if n == 0:
        return []
    lo = np.array([s.aabb.min for s in segments]) - tau
    hi = np.array([s.aabb.max for s in segments]) + tau
    touch = np.all((lo[:, None, :] <= hi[None, :, :]) & (lo[None, :, :] <= hi[:, None, :]), axis=2)
    np.fill_diagonal(touch, False)
    return [np.flatnonzero(row).tolist() for row in touch]


def _merge_tagged(segments: Sequence[Segment], ds: DisjointSet) -> list[Segment]:
    groups: dict[int, list[int]] = {}
    for i in range(len(segments)):
        groups.setdefault(ds.find(i), []).append(i)
    out = []
    for root in sorted(groups, key=lambda r: min(groups[r])):
        members = groups[root]
        if len(members) == 1:
            out.append(segments[members[0]])
            continue
        keep = max(members, key=lambda i: (segments[i].volume, -segments[i].id))
        members.sort(key=lambda i: segments[i].id)
        mesh = concatenate([segments[i].mesh for i in members], name=segments[keep].mesh.name)
        flags = tuple(sorted({f for i in members for f in segments[i].flags}))
        out.append(Segment.of(mesh, segments[keep].id, flags))
    # keep the position of the surviving segment
    order = {s.id: k for k, s in enumerate(segments)}
    out.sort(key=lambda s: order[s.id])
    return out


def _largest_neighbor(i: int, graph, segments) -> int:
    return max(graph[i], key=lambda j: (segments[j].volume, -segments[j].id))


def _is_thin(mesh: TriMesh, planar_eps: float) -> bool:
    """Smallest half-extent of the minimum box below ``planar_eps``.

    A box holding the hull has volume at least the hull volume V and two half-extents
    of at most half the diameter D, so its smallest half-extent is at least V / (2 D^2).
    When that bound clears ``planar_eps`` the box search is skipped.
    """
    pts = np.unique(mesh.vertices, axis=0)
    if len(pts) >= 4:
        try:
            hull = ConvexHull(pts)
        except QhullError:
            return True
        diam = float(pdist(pts[hull.vertices]).max())
        if hull.volume / (2.0 * diam ** 2) >= planar_eps:
            return False
    return min_obb(mesh.vertices).half_extents.min() < planar_eps


def auto_merge(segments: Sequence[Segment], planar_eps: float = 1e-3, volume_eps: float = 1e-6,
               tau: float = 5e-3) -> list[Segment]:
    """Fold planar or negligible-volume segments into their largest touching neighbor.

    A segment is planar when the smallest half-extent of its minimum box is below
    ``planar_eps``. Segments with nothing to merge into are kept and flagged
    ``unmerged_small``.
    """
    segments = list(segments)
    graph = build_contact_graph(segments, tau)
    ds = DisjointSet(len(segments))
    flagged = {}
    for i, s in enumerate(segments):
        thin = _is_thin(s.mesh, planar_eps)
        if not (thin or s.volume < volume_eps):
            continue
        if not graph[i]:
            flagged[i] = "unmerged_small"
            continue
        ds.union(i, _largest_neighbor(i, graph, segments))
    if ds.groups == len(segments) and not flagged:
        return segments
    segments = [s.with_flag(flagged[i]) if i in flagged else s for i, s in enumerate(segments)]
    return _merge_tagged(segments, ds)


def progressive_merge(segments: Sequence[Segment], target_range=(2, 8), tau: float = 5e-3,
                      k_fraction: float = 0.2) -> list[Segment]:
    """Repeatedly merge the smallest segments into their largest neighbors.

    Each round takes the ``max(1, ceil(k_fraction * n))`` smallest segments that have
    a neighbor, tags each with its largest-volume neighbor, and executes all tags at
    once (chains collapse through union-find). Stops when the count is at most
    ``target_range[1]`` or nothing can merge, and never goes below ``target_range[0]``.
    """
    lo, hi = target_range
    segs = list(segments)
    while len(segs) > hi:
        graph = build_contact_graph(segs, tau)
        movable = [i for i in range(len(segs)) if graph[i]]
        if not movable:
            break
        movable.sort(key=lambda i: (segs[i].volume, segs[i].id))
        k = max(1, math.ceil(k_fraction * len(segs)))
        ds = DisjointSet(len(segs))
        for i in movable[:k]:
            if ds.groups <= lo:
                break
            ds.union(i, _largest_neighbor(i, graph, segs))
        segs = _merge_tagged(segs, ds)
    if len(segs) > hi:
        graph = build_contact_graph(segs, tau)
        segs = [s.with_flag("isolated") if not graph[i] else s for i, s in enumerate(segs)]
    return segs


# -------------------------------------------------------------------- stats


def spatial_component_count(mesh: TriMesh, tau: float = 5e-3, weld_eps: float = 1e-9) -> int:
    """Pieces of a part after grouping vertex-connected islands that touch within ``tau``."""
    if mesh.is_empty:
        return 0
    islands = connected_components(weld_vertices(mesh, weld_eps))
    if len(islands) <= 1:
        return len(islands)
    segs = [Segment(m, 0.0, Aabb.of_points(m.vertices), i) for i, m in enumerate(islands)]
    graph = build_contact_graph(segs, tau)
    ds = DisjointSet(len(segs))
    for i, nbrs in enumerate(graph):
        for j in nbrs:
            ds.union(i, j)
    return ds.groups


def compute_stats(parts: Sequence[TriMesh], obbs: Sequence[Obb], tau: float = 5e-3) -> dict:
    volumes = [mesh_volume(p) for p in parts]
    n = len(parts)
    ratio = None
    flags = []
    if n >= 2:
        largest = max(volumes)
        rest = sum(volumes) - largest
        if rest > 0:
            ratio = largest / rest
        else:
            flags.append("zero_rest_volume")
    pair_ious = [obb_iou(obbs[i], obbs[j]) for i in range(n) for j in range(i + 1, n)]
    components = [spatial_component_count(p, tau) for p in parts]
    return {
        "part_count": n,
        "per_part_volumes": volumes,
        "largest_rest_ratio": ratio,
        "mean_part_iou": float(np.mean(pair_ious)) if pair_ious else 0.0,
        "components_per_part": components,
        "degenerate_obbs": [i for i, b in enumerate(obbs) if b.degenerate],
        "open_parts": [i for i, p in enumerate(parts) if not is_watertight(weld_vertices(p, 1e-9))],
        "flags": flags,
    }


def heuristic_filter(record, thresholds: FilterThresholds = FilterThresholds()) -> FilterResult:
    """Accept or reject a shape from its statistics; every violated rule is reported."""
    stats = record.stats if hasattr(record, "stats") else record
    reasons = []
    n = stats["part_count"]
    ratio = stats.get("largest_rest_ratio")
    if n >= 2 and (ratio is None or ratio > thresholds.max_largest_rest_ratio):
        reasons.append("ratio")
    if stats["mean_part_iou"] > thresholds.max_mean_part_iou:
        reasons.append("iou")
    if any(c > thresholds.max_components_per_part for c in stats["components_per_part"]):
        reasons.append("components")
    lo, hi = thresholds.part_count_range
    if not lo <= n <= hi:
        reasons.append("part_count")
    return FilterResult(not reasons, reasons)


# ------------------------------------------------------------------ pipeline


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def segments_from_meshes(meshes: Sequence[TriMesh], weld_eps_rel: float = 1e-6) -> list[Segment]:
    """Weld the flattened meshes together and split into vertex-connected segments."""
    merged = concatenate([m for m in meshes if not m.is_empty])
    if merged.is_empty:
        return []
    diag = float(np.linalg.norm(joint_aabb([merged]).extents))
    welded = weld_vertices(merged, weld_eps_rel * diag)
    return [Segment.of(c, i) for i, c in enumerate(connected_components(welded))]


def _renormalize(segs: Sequence[Segment]) -> list[Segment]:
    meshes, _ = normalize_shape([s.mesh for s in segs])
    return [Segment.of(m, s.id, s.flags) for m, s in zip(meshes, segs)]


def run_pipeline(source, config: PipelineConfig = None, source_label: Optional[str] = None):
    """Process one mesh file into a ShapeRecord, or a Rejection with its reasons."""
    config = config or PipelineConfig()
    seg_cfg = config.segmentation
    label = source_label if source_label is not None else str(source)
    provenance = {"source": label, "config_hash": config_hash(config)}

    with _stage("load"):
        meshes = load_mesh(source)
    with _stage("components"):
        segs = segments_from_meshes(meshes, config.geometry.weld_eps_rel)
        if not segs:
            raise ValueError("no triangles in input")
    with _stage("normalize"):
        segs = _renormalize(segs)
    with _stage("auto_merge"):
        segs = auto_merge(segs, seg_cfg.planar_eps, seg_cfg.volume_eps, seg_cfg.tau)
    with _stage("renormalize"):
        segs = _renormalize(segs)
    with _stage("progressive_merge"):
        segs = progressive_merge(segs, tuple(seg_cfg.target_range), seg_cfg.tau, seg_cfg.k_fraction)
    with _stage("obb"):
        segs = sorted(segs, key=lambda s: (-s.volume, s.id))
        parts = [TriMesh(s.mesh.vertices, s.mesh.faces, f"part_{i:03}") for i, s in enumerate(segs)]
        obbs = [min_obb(p.vertices) for p in parts]
    with _stage("stats"):
        stats = compute_stats(parts, obbs, seg_cfg.tau)
        stats["segment_flags"] = sorted({f for s in segs for f in s.flags})
    with _stage("filter"):
        verdict = heuristic_filter(stats, FilterThresholds.from_config(config.filter))
    if not verdict.accepted:
        return Rejection(label, verdict.reasons, stats, provenance)
    return ShapeRecord(parts, obbs, None, stats, provenance)


# ---------------------------------------------------------------- record I/O


def dumps(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def save_record(record: ShapeRecord, directory) -> Path:
    directory = Path(directory)
    names = write_parts(record.parts, directory)
    path = directory / "record.json"
    path.write_text(dumps(record.to_dict(names)))
    return path


def load_record(path) -> ShapeRecord:
    path = Path(path)
    data = json.loads(path.read_text())
    parts = []
    for rel in data["parts"]:
        meshes = parse_obj((path.parent / rel).read_bytes(), name=Path(rel).stem, path=str(path.parent / rel))
        parts.append(concatenate(meshes, name=Path(rel).stem) if meshes else TriMesh.empty(Path(rel).stem))
    obbs = [Obb.from_dict(b) for b in data["obbs"]]
    return ShapeRecord(parts, obbs, data.get("prompt"), data.get("stats", {}), data.get("provenance", {}))
