"""Pipeline configuration: every tunable constant in one validated, hashable tree."""

from __future__ import annotations

import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import jsonschema

from .errors import ConfigError


@dataclass
class GeometryConfig:
    weld_eps_rel: float = 1e-6  # fraction of the raw AABB diagonal


@dataclass
class SegmentationConfig:
    planar_eps: float = 1e-3
    volume_eps: float = 1e-6
    tau: float = 5e-3
    k_fraction: float = 0.2
    target_range: list = field(default_factory=lambda: [2, 8])


@dataclass
class FilterConfig:
    max_mean_part_iou: float = 0.10
    max_largest_rest_ratio: float = 3.0
    max_components_per_part: int = 1
    part_count_range: list = field(default_factory=lambda: [2, 8])


@dataclass
class BeamConfig:
    beam_width: int = 8
    max_iterations: int = 50
    step_translation: float = 0.02
    step_scale: float = 0.02
    step_rotation_deg: float = 2.0
    refinement: float = 0.5
    epsilon: float = 1e-4
    min_step: float = 1e-4


@dataclass
class SamplerSection:
    steps: int = 50
    cfg_scale: float = 6.5
    anneal_beta: float = 0.99
    tsr_k: float = 0.98
    layers_per_pass: int = 1
    negative_prompt: str = "Low-poly, minimal, blocky"
    kv_blend_schedule: str = "linear"


@dataclass
class MetricsConfig:
    mc_samples: int = 1 << 20
    mc_seed: int = 0xC0DE
    voxel_resolution: int = 64
    object_box: str = "obb"
    voxel_reference: str = "boxes"


@dataclass
class ArtifactConfig:
    theta: float = 0.5


@dataclass
class CaptionConfig:
    template: str = (
        "These are four views of one 3D object arranged in a 2x2 grid. Describe its overall "
        "shape and each of its parts in one or two sentences. Focus on geometry and part "
        "structure. Do not mention color, material or texture."
    )
    retries: int = 3
    backoff: float = 0.5
    timeout: float = 30.0


@dataclass
class PipelineConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    beam: BeamConfig = field(default_factory=BeamConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    artifacts: ArtifactConfig = field(default_factory=ArtifactConfig)
    caption: CaptionConfig = field(default_factory=CaptionConfig)
    seed: int = 0
    jobs: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self)


_POSITIVE = {
    "weld_eps_rel", "planar_eps", "volume_eps", "k_fraction", "max_mean_part_iou", "max_largest_rest_ratio",
    "max_components_per_part", "beam_width", "max_iterations", "step_translation", "step_scale",
    "step_rotation_deg", "refinement", "epsilon", "min_step", "steps", "anneal_beta", "tsr_k",
    "layers_per_pass", "mc_samples", "voxel_resolution", "theta", "retries", "timeout", "jobs",
}
_UNIT_INTERVAL = {"anneal_beta", "tsr_k", "theta", "k_fraction"}
_ENUMS = {"object_box": ["obb", "aabb"], "voxel_reference": ["boxes", "ground_truth"]}


def _schema_for(cls) -> dict:
    props = {}
    for f in fields(cls):
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default):
            props[f.name] = _schema_for(type(default))
            continue
        if isinstance(default, bool):
            s = {"type": "boolean"}
        elif isinstance(default, int):
            s = {"type": "integer"}
        elif isinstance(default, float):
            s = {"type": "number"}
        elif isinstance(default, str):
            s = {"type": "string"}
        else:
            s = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2}
        if f.name in _POSITIVE:
            s["exclusiveMinimum"] = 0
        if f.name in _UNIT_INTERVAL:
            s["maximum"] = 1
        if f.name == "tau":
            s["minimum"] = 0
        if f.name in _ENUMS:
            s["enum"] = _ENUMS[f.name]
        props[f.name] = s
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = _schema_for(PipelineConfig)


def _build(cls, data: dict):
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        sub = f.default_factory() if f.default_factory is not MISSING else f.default
        kwargs[f.name] = _build(type(sub), value) if is_dataclass(sub) else value
    return cls(**kwargs)


def _check_ranges(cfg: PipelineConfig) -> None:
    for path, rng in (("$.segmentation.target_range", cfg.segmentation.target_range),
                      ("$.filter.part_count_range", cfg.filter.part_count_range)):
        if rng[0] > rng[1]:
            raise ConfigError("range minimum exceeds maximum", path)


def config_from_dict(data: dict) -> PipelineConfig:
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, err.json_path)
    cfg = _build(PipelineConfig, data)
    _check_ranges(cfg)
    return cfg


def load_config(path=None) -> PipelineConfig:
    """Read a JSON or TOML config file; ``None`` gives the defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    text = path.read_bytes()
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ImportError:  # python < 3.11
                import tomli as tomllib

            data = tomllib.loads(text.decode("utf-8"))
        else:
            data = json.loads(text)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return config_from_dict(data)


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()[:16]


def derive_seed(base_seed: int, key: str) -> int:
    """Stable per-item seed so parallel runs draw the same numbers as serial ones."""
    digest = hashlib.sha256(f"{base_seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
