"""Layout refinement: global similarity alignment of a shape to its control boxes,
and removal of stray components that sit outside their box."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .config import BeamConfig
from .errors import AlignmentError, NoGeometryError
from .mesh import TriMesh, face_components, mesh_volume, weld_labels
from .metrics import Layout, batch_intersection_volume, box_intersection_volume
from .obb import Obb, min_obb

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * R(rotation) @ x + translation, rotation as an xyzw quaternion."""

    scale: float = 1.0
    rotation: tuple = (0.0, 0.0, 0.0, 1.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be positive")
        if q.shape != (4,) or t.shape != (3,) or not (np.isfinite(q).all() and np.isfinite(t).all()):
            raise ValueError("rotation must be a quaternion and translation a 3-vector")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must have unit norm")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", tuple(float(x) for x in q))
        object.__setattr__(self, "translation", tuple(float(x) for x in t))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def from_parts(cls, scale, matrix, translation) -> "SimilarityTransform":
        q = Rotation.from_matrix(np.asarray(matrix, dtype=float)).as_quat()
        return cls(scale, tuple(q / np.linalg.norm(q)), tuple(translation))

    @property
    def matrix(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.translation == (0.0, 0.0, 0.0) and self.rotation[:3] == (0.0, 0.0, 0.0)

    @property
    def angle_deg(self) -> float:
        return float(np.degrees(Rotation.from_quat(self.rotation).magnitude()))

    def homogeneous(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.matrix
        m[:3, 3] = self.translation
        return m

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=float) @ self.matrix.T) + np.asarray(self.translation)

    def compose(self, first: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ first``: apply ``first``, then ``self``."""
        r = self.matrix
        t = self.scale * (r @ np.asarray(first.translation)) + np.asarray(self.translation)
        return SimilarityTransform.from_parts(self.scale * first.scale, r @ first.matrix, t)

    def inverse(self) -> "SimilarityTransform":
        r_inv = self.matrix.T
        return SimilarityTransform.from_parts(1.0 / self.scale, r_inv,
                                              -(r_inv @ np.asarray(self.translation)) / self.scale)

    def to_dict(self) -> dict:
        # adding 0.0 turns negative zeros into plain zeros in the JSON output
        return {"scale": self.scale, "rotation": [q + 0.0 for q in self.rotation],
                "translation": [x + 0.0 for x in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(d["scale"], tuple(d["rotation"]), tuple(d["translation"]))


def apply_similarity(obj: Union[TriMesh, Obb], t: SimilarityTransform):
    """Map a mesh or a box through ``t``; the identity returns the input object itself."""
    if t.is_identity:
        return obj
    if isinstance(obj, TriMesh):
        if obj.is_empty:
            return obj
        return TriMesh(t.apply_points(obj.vertices), obj.faces, obj.name)
    if isinstance(obj, Obb):
        center = t.apply_points(obj.center[None])[0]
        return Obb.from_matrix(center, t.scale * obj.half_extents, t.matrix @ obj.matrix, obj.degenerate)
    raise TypeError(f"cannot transform {type(obj).__name__}")


# ------------------------------------------------------------------ beam search


def _axis_rotation(axis: int, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    m = np.eye(3)
    m[i, i] = m[j, j] = c
    m[i, j], m[j, i] = -s, s
    return m


@dataclass(frozen=True, eq=False)
class _State:
    scale: float
    rot: np.ndarray
    trans: np.ndarray
    key: tuple = field(default=())

    @classmethod
    def make(cls, scale, rot, trans) -> "_State":
        key = tuple(round(float(x), 12) for x in (scale, *rot.ravel(), *trans))
        return cls(scale, rot, trans, key)

    def neighbors(self, dt: float, ds: float, dr: float):
        for axis in range(3):
            for sign in (1.0, -1.0):
                t = self.trans.copy()
                t[axis] += sign * dt
                yield _State.make(self.scale, self.rot, t)
        for sign in (1.0, -1.0):
            s = self.scale + sign * ds
            if s > 0:
                yield _State.make(s, self.rot, self.trans)
        for axis in range(3):
            for sign in (1.0, -1.0):
                yield _State.make(self.scale, _axis_rotation(axis, sign * dr) @ self.rot, self.trans)


class _Scorer:
    """Mean part-IoU of similarity-mapped part boxes against the control boxes.

    The min OBB of a similarity-mapped point set is the mapped min OBB, so each part's
    box is computed once and then only transformed.
    """

    def __init__(self, parts: Sequence[TriMesh], layout: Layout):
        if len(parts) != len(layout.boxes):
            raise AlignmentError(f"{len(parts)} parts but {len(layout.boxes)} boxes")
        self.n = len(parts)
        self.part_boxes = []
        for p, ref in zip(parts, layout.boxes):
            if p.is_empty:
                continue
            box = min_obb(p.vertices)
            self.part_boxes.append((box.center, box.matrix, box.half_extents, box.volume(),
                                    ref.center, ref.matrix, ref.half_extents, ref.volume()))
        if not self.part_boxes:
            raise NoGeometryError("all parts are empty")
        self.evaluations = 0
        # stacked arrays for batch scoring
        cols = list(zip(*self.part_boxes))
        self._c, self._m, self._h, self._vol = (np.array(x) for x in cols[:4])
        self._rc, self._rm, self._rh, self._rvol = (np.array(x) for x in cols[4:])

    def __call__(self, st: _State) -> float:
        self.evaluations += 1
        total = 0.0
        s3 = st.scale ** 3
        for c, m, h, vol, rc, rm, rh, rvol in self.part_boxes:
            cb = st.scale * (st.rot @ c) + st.trans
            mb = st.rot @ m
            hb = st.scale * h
            inter = box_intersection_volume(rc, rm, rh, cb, mb, hb)
            union = rvol + s3 * vol - inter
            total += min(1.0, inter / union) if union > 0 else 0.0
        return total / self.n

    def many(self, states: Sequence[_State]) -> np.ndarray:
        """Scores of several states in one vectorized pass (same values as calling each)."""
        self.evaluations += len(states)
        scale = np.array([st.scale for st in states])
        rot = np.array([st.rot for st in states])
        trans = np.array([st.trans for st in states])
        # (S,P,...) part boxes mapped by each state, then expressed in the control box frames
        cw = scale[:, None, None] * np.einsum("sij,pj->spi", rot, self._c) + trans[:, None, :]
        mw = np.einsum("sij,pjk->spik", rot, self._m)
        cb = np.einsum("spi,pij->spj", cw - self._rc, self._rm)
        mb = np.einsum("pji,spjk->spik", self._rm, mw)
        hb = scale[:, None, None] * self._h
        ns, npart = cw.shape[:2]
        inter = batch_intersection_volume(np.broadcast_to(self._rh, (ns, npart, 3)).reshape(-1, 3),
                                          cb.reshape(-1, 3), mb.reshape(-1, 3, 3),
                                          hb.reshape(-1, 3)).reshape(ns, npart)
        union = self._rvol + scale[:, None] ** 3 * self._vol - inter
        iou = np.where(union > 0, np.minimum(1.0, inter / np.where(union > 0, union, 1.0)), 0.0)
        return iou.sum(axis=1) / self.n


@dataclass
class OptimizeResult:
    transform: SimilarityTransform
    score: float
    initial_score: float
    trace: list

    def to_dict(self, inverse: bool = False) -> dict:
        d = {"transform": self.transform.to_dict(), "score": self.score, "initial_score": self.initial_score}
        if inverse:
            d["layout_transform"] = self.transform.inverse().to_dict()
        return d


def optimize_layout(parts: Sequence[TriMesh], layout: Layout, cfg: BeamConfig = None) -> OptimizeResult:
    """Beam search for one similarity transform of all parts that maximizes mean part-IoU.

    Each iteration expands every beam state by 14 axis moves; parents stay in the
    candidate pool so the best score never decreases. When an iteration fails to
    improve by more than ``epsilon`` every step size is multiplied by ``refinement``;
    the search ends once all steps fall below ``min_step`` (rotation step in radians).
    """
    cfg = cfg or BeamConfig()
    score = _Scorer(parts, layout)
    start = _State.make(1.0, np.eye(3), np.zeros(3))
    cache = {start.key: score(start)}
    beam = [start]
    best = initial = cache[start.key]
    dt, ds, dr = cfg.step_translation, cfg.step_scale, math.radians(cfg.step_rotation_deg)
    trace = []
    for it in range(cfg.max_iterations):
        pool = {st.key: st for st in beam}
        for st in beam:
            for nb in st.neighbors(dt, ds, dr):
                pool.setdefault(nb.key, nb)
        fresh = [st for k, st in pool.items() if k not in cache]
        if fresh:
            for st, v in zip(fresh, score.many(fresh)):
                cache[st.key] = float(v)
        ranked = sorted(pool.values(), key=lambda st: (-cache[st.key], st.key))
        beam = ranked[: cfg.beam_width]
        top = cache[beam[0].key]
        improved = top - best > cfg.epsilon
        best = max(best, top)
        trace.append({
            "iteration": it, "best_score": best, "step_translation": dt, "step_scale": ds,
            "step_rotation_deg": math.degrees(dr), "evaluations": score.evaluations,
        })
        if not improved:
            dt, ds, dr = dt * cfg.refinement, ds * cfg.refinement, dr * cfg.refinement
            if max(dt, ds, dr) < cfg.min_step:
                break
    winner = beam[0]
    transform = SimilarityTransform.from_parts(winner.scale, winner.rot, winner.trans)
    if cache[winner.key] <= initial:
        transform, best = SimilarityTransform.identity(), initial
    logger.info("layout optimization: %.4f -> %.4f in %d iterations", initial, best, len(trace))
    return OptimizeResult(transform, best, initial, trace)


# ------------------------------------------------------------------ artifacts


@dataclass
class ArtifactReport:
    part: int
    components: int
    largest_iou: float
    removed_faces: int
    action: str  # "kept_largest" or "flagged"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _components(mesh: TriMesh) -> list[np.ndarray]:
    """Face-index groups of vertex-connected pieces, matching coincident vertices exactly."""
    labels = weld_labels(mesh.vertices, 0.0)
    return face_components(labels[mesh.faces], len(mesh.vertices))


def filter_artifacts(parts: Sequence[TriMesh], layout: Layout, theta: float = 0.5):
    """Drop all but the largest component of a part when that component fills its box.

    The largest component is the one with the largest enclosed volume (face count breaks
    ties). If its min-OBB IoU with the control box is at least ``theta`` the other
    components are removed; otherwise the part is left as is and reported as flagged.
    Single-component parts are returned as the same objects.
    """
    if len(parts) != len(layout.boxes):
        raise AlignmentError(f"{len(parts)} parts but {len(layout.boxes)} boxes")
    if not 0 < theta <= 1:
        raise ValueError("theta must be in (0, 1]")
    out, report = [], []
    for i, (part, box) in enumerate(zip(parts, layout.boxes)):
        groups = _components(part) if not part.is_empty else []
        if len(groups) <= 1:
            out.append(part)
            continue
        pieces = [part.submesh(g) for g in groups]
        largest = max(range(len(groups)), key=lambda k: (abs(mesh_volume(pieces[k])), len(groups[k]), -k))
        main = min_obb(pieces[largest].vertices)
        inter = box_intersection_volume(box.center, box.matrix, box.half_extents,
                                        main.center, main.matrix, main.half_extents)
        union = box.volume() + main.volume() - inter
        iou = inter / union if union > 0 else 0.0
        if iou >= theta:
            keep = np.sort(groups[largest])
            out.append(part.submesh(keep, name=part.name))
            report.append(ArtifactReport(i, len(groups), iou, len(part.faces) - len(keep), "kept_largest"))
        else:
            out.append(part)
            report.append(ArtifactReport(i, len(groups), iou, 0, "flagged"))
    return out, report
