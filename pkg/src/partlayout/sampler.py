"""Rectified-flow sampling loop with guidance, control annealing, part freezing and
key/value reinjection. The denoiser is any callable, so every schedule can be run
against analytic vector fields."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import MissingReferenceError, SamplerStepError, ShapeMismatchError

logger = logging.getLogger(__name__)

LAMBDA_START = 0.8
LATENT_MAGIC = b"PLAT"
LATENT_VERSION = 1
_HEADER = struct.Struct("<4sHHI")
_BLOCK = struct.Struct("<IIIB")


@dataclass
class LatentBlock:
    part_id: int
    tokens: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] == 0:
            raise ValueError("tokens must be a non-empty (token_count, dim) matrix")
        if not np.isfinite(self.tokens).all():
            raise ValueError(f"part {self.part_id} has non-finite tokens")

    def with_tokens(self, tokens: np.ndarray) -> "LatentBlock":
        return LatentBlock(self.part_id, tokens, self.frozen)


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 6.5
    anneal_beta: float = 0.99
    tsr_k: float = 0.98
    layers_per_pass: int = 1
    negative_prompt: str = "Low-poly, minimal, blocky"
    kv_blend_schedule: Union[str, float, Callable] = "linear"

    def __post_init__(self):
        if self.steps < 1 or self.layers_per_pass < 1:
            raise ValueError("steps and layers_per_pass must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if not (0 < self.anneal_beta <= 1 and 0 < self.tsr_k <= 1):
            raise ValueError("anneal_beta and tsr_k must be in (0, 1]")

    @classmethod
    def from_section(cls, section) -> "SamplerConfig":
        return cls(section.steps, section.cfg_scale, section.anneal_beta, section.tsr_k,
                   section.layers_per_pass, section.negative_prompt, section.kv_blend_schedule)


@dataclass(frozen=True)
class AnnealState:
    alpha_c: float = 1.0
    applications: int = 0


def anneal_step(state: AnnealState, beta: float) -> AnnealState:
    """One multiplicative decay of the control strength.

    The new value is computed as ``beta ** applications`` rather than by repeated
    multiplication so the trace never drifts from the closed form.
    """
    if not 0 < beta <= 1:
        raise ValueError("beta must be in (0, 1]")
    n = state.applications + 1
    return AnnealState(beta ** n, n)


class KvCache:
    """Attention keys/values stored per (step, layer, part)."""

    def __init__(self):
        self._store: dict = {}

    def put(self, step: int, layer: int, part: int, keys: np.ndarray, values: np.ndarray) -> None:
        self._store[(step, layer, part)] = (np.array(keys, dtype=float), np.array(values, dtype=float))

    def get(self, step: int, layer: int, part: int):
        return self._store.get((step, layer, part))

    def __contains__(self, key) -> bool:
        return key in self._store

    def __len__(self) -> int:
        return len(self._store)


# ------------------------------------------------------------------ primitives


def _check_shapes(a, b, what: str) -> None:
    if len(a) != len(b):
        raise ShapeMismatchError(f"{what}: {len(a)} blocks vs {len(b)}")
    for x, y in zip(a, b):
        if np.shape(x) != np.shape(y):
            raise ShapeMismatchError(f"{what}: shape {np.shape(x)} vs {np.shape(y)}")


def rf_step(x: Sequence[LatentBlock], v: Sequence[np.ndarray], t: float, dt: float) -> list[LatentBlock]:
    """Euler step ``x + dt * v`` on every block, frozen or not."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t + dt > 1 + 1e-9:
        raise ValueError("step runs past t = 1")
    _check_shapes([b.tokens for b in x], v, "rf_step")
    return [b.with_tokens(b.tokens + dt * np.asarray(vi)) for b, vi in zip(x, v)]


def cfg_combine(v_pos, v_neg, omega: float):
    """Guided velocity ``v_neg + omega * (v_pos - v_neg)``.

    Evaluated as ``omega * v_pos + (1 - omega) * v_neg`` so that omega of 1 and 0
    return the branches exactly. Accepts arrays or lists of per-part arrays.
    """
    if isinstance(v_pos, (list, tuple)):
        _check_shapes(v_pos, v_neg, "cfg_combine")
        return [cfg_combine(p, n, omega) for p, n in zip(v_pos, v_neg)]
    p, n = np.asarray(v_pos, dtype=float), np.asarray(v_neg, dtype=float)
    if p.shape != n.shape:
        raise ShapeMismatchError(f"cfg_combine: shape {p.shape} vs {n.shape}")
    return omega * p + (1.0 - omega) * n


def apply_freeze(latents: Sequence[LatentBlock], reference, mask: Mapping[int, bool]) -> list[LatentBlock]:
    """Replace the tokens of masked parts with the reference tokens.

    ``reference`` maps part ids to token matrices or LatentBlocks (a list of blocks
    is accepted as well); ``mask`` maps part ids to booleans.
    """
    ref = _by_part(reference)
    out = []
    for b in latents:
        if not mask.get(b.part_id, False):
            out.append(b)
            continue
        if b.part_id not in ref:
            raise MissingReferenceError(f"no reference latents for frozen part {b.part_id}")
        tokens = ref[b.part_id]
        if tokens.shape != b.tokens.shape:
            raise ShapeMismatchError(f"reference for part {b.part_id} has shape {tokens.shape}")
        out.append(LatentBlock(b.part_id, tokens.copy(), True))
    return out


def _by_part(reference) -> dict:
    if reference is None:
        return {}
    if isinstance(reference, Mapping):
        items = reference.items()
    else:
        items = ((b.part_id, b) for b in reference)
    return {k: np.asarray(v.tokens if isinstance(v, LatentBlock) else v, dtype=float) for k, v in items}


def blend_kv(cached, fresh, lambda_t: float):
    """``lambda_t * cached + (1 - lambda_t) * fresh`` for a (keys, values) pair."""
    if not 0 <= lambda_t <= 1:
        raise ValueError("lambda_t must be in [0, 1]")
    out = []
    for c, f in zip(cached, fresh):
        c, f = np.asarray(c, dtype=float), np.asarray(f, dtype=float)
        if c.shape != f.shape:
            raise ShapeMismatchError(f"blend_kv: cached {c.shape} vs fresh {f.shape}")
        out.append(lambda_t * c + (1.0 - lambda_t) * f)
    return tuple(out)


def kv_schedule(step: int, total_steps: int, schedule="linear") -> float:
    """Blend weight of the cached keys/values at ``step``.

    ``"linear"`` ramps from 0.8 at the first step to 0 at the last. A number or a
    ``"constant:<value>"`` string gives a constant weight; a callable is called as
    ``schedule(step, total_steps)``.
    """
    if not 0 <= step < total_steps:
        raise ValueError("step out of range")
    if callable(schedule):
        return float(schedule(step, total_steps))
    if isinstance(schedule, (int, float)):
        return float(schedule)
    if schedule == "linear":
        if total_steps == 1:
            return LAMBDA_START
        return LAMBDA_START * (1.0 - step / (total_steps - 1))
    if schedule == "none":
        return 0.0
    if isinstance(schedule, str) and schedule.startswith("constant"):
        _, _, value = schedule.partition(":")
        return float(value) if value else 0.5
    raise ValueError(f"unknown kv schedule {schedule!r}")


def scale_velocity(v, k: float, t: float):
    return [k * np.asarray(x) for x in v] if isinstance(v, (list, tuple)) else k * np.asarray(v)


def apply_tsr(v, k: float, t: float, callback: Optional[Callable] = None):
    """Temporal score rescaling hook. ``k == 1`` passes ``v`` through untouched."""
    if not 0 < k <= 1:
        raise ValueError("k must be in (0, 1]")
    if k == 1:
        return v
    return (callback or scale_velocity)(v, k, t)


# ------------------------------------------------------------------ loop


@dataclass
class Branch:
    """What the denoiser is told about the current evaluation."""

    name: str  # "positive" or "negative"
    prompt: Optional[str]
    step: int
    lambda_t: float
    layout: object = None
    kv_cache: Optional[KvCache] = None


@dataclass
class SampleResult:
    latents: list
    trace: list = field(default_factory=list)
    trajectory: Optional[list] = None  # latent sets at t = 0 and after each step

    def endpoint(self, part_id: int) -> np.ndarray:
        return next(b.tokens for b in self.latents if b.part_id == part_id)


def _reference_at(reference, index: int):
    # a single latent set is static; a sequence of sets is a trajectory indexed by step
    if reference is None:
        return None
    if isinstance(reference, Mapping) or (len(reference) and isinstance(reference[0], LatentBlock)):
        return reference
    return reference[index]


def _norms(latents) -> dict:
    return {b.part_id: float(np.linalg.norm(b.tokens)) for b in latents}


def sample(denoiser: Callable, config: SamplerConfig, x0: Sequence[LatentBlock], layout=None,
           freeze_mask: Optional[Mapping[int, bool]] = None, reference=None, kv_cache: Optional[KvCache] = None,
           tsr_callback: Optional[Callable] = None, keep_trajectory: bool = False) -> SampleResult:
    """Integrate from t = 0 to 1 in ``config.steps`` Euler steps.

    ``denoiser(latents, t, alpha_c, branch)`` returns one velocity array per block.
    ``alpha_c`` holds one control strength per layout-attention layer: all ones for
    the positive branch, and the annealed values for the negative branch, which
    advance by one decay per layer pass. ``reference`` is either one latent set or a
    trajectory of ``steps + 1`` sets; frozen parts are restored from it at t = 0 and
    after every step.
    """
    freeze_mask = dict(freeze_mask or {})
    if any(freeze_mask.values()) and reference is None:
        raise MissingReferenceError("freeze mask given without reference latents")
    n_layers = config.layers_per_pass
    prompt = getattr(layout, "prompt", None)
    dt = 1.0 / config.steps
    anneal = AnnealState()
    x = apply_freeze(list(x0), _reference_at(reference, 0), freeze_mask) if freeze_mask else list(x0)
    trace = []
    trajectory = [x] if keep_trajectory else None
    for i in range(config.steps):
        t = i * dt
        try:
            lam = kv_schedule(i, config.steps, config.kv_blend_schedule)
            alphas = []
            for _ in range(n_layers):
                alphas.append(anneal.alpha_c)
                anneal = anneal_step(anneal, config.anneal_beta)
            v_pos = denoiser(x, t, np.ones(n_layers),
                             Branch("positive", prompt, i, lam, layout, kv_cache))
            v_neg = denoiser(x, t, np.array(alphas),
                             Branch("negative", config.negative_prompt, i, lam, layout, kv_cache))
            v = cfg_combine(list(v_pos), list(v_neg), config.cfg_scale)
            v = apply_tsr(v, config.tsr_k, t, tsr_callback)
            x = rf_step(x, v, t, min(dt, 1.0 - t))
            if freeze_mask:
                x = apply_freeze(x, _reference_at(reference, i + 1), freeze_mask)
        except (MissingReferenceError, ShapeMismatchError, ValueError, ArithmeticError) as exc:
            raise SamplerStepError(i, exc) from exc
        trace.append({"step": i, "t": t, "alpha_c": alphas, "alpha_pos": 1.0, "lambda_t": lam, "norms": _norms(x)})
        if keep_trajectory:
            trajectory.append(x)
    return SampleResult(x, trace, trajectory)


# ------------------------------------------------------------------ file format


def write_latents(latents: Sequence[LatentBlock], path) -> None:
    """Little-endian binary: header ``<4sHHI`` (magic "PLAT", version, reserved 0,
    block count), then per block ``<IIIB`` (part id, rows, cols, frozen) followed by
    rows * cols float64 values in row-major order."""
    chunks = [_HEADER.pack(LATENT_MAGIC, LATENT_VERSION, 0, len(latents))]
    for b in latents:
        rows, cols = b.tokens.shape
        chunks.append(_BLOCK.pack(b.part_id, rows, cols, int(b.frozen)))
        chunks.append(np.ascontiguousarray(b.tokens, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_latents(path) -> list[LatentBlock]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("latent file too short")
    magic, version, _, count = _HEADER.unpack_from(data, 0)
    if magic != LATENT_MAGIC or version != LATENT_VERSION:
        raise ValueError("not a latent file")
    offset = _HEADER.size
    out = []
    for _ in range(count):
        part_id, rows, cols, frozen = _BLOCK.unpack_from(data, offset)
        offset += _BLOCK.size
        size = rows * cols * 8
        if offset + size > len(data):
            raise ValueError("latent file truncated")
        tokens = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols)
        out.append(LatentBlock(part_id, tokens.astype(np.float64), bool(frozen)))
        offset += size
    return out
