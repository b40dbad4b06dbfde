"""Command-line interface.

Exit codes: 0 success (rejected shapes are not failures), 1 internal or input error,
2 schema or config error (the message names the offending JSON path).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import report
from .caption import caption_request
from .config import PipelineConfig, config_from_dict, derive_seed, load_config
from .errors import CaptionUnavailableError, ConfigError, PartLayoutError
from .io import load_mesh, mesh_files
from .metrics import Layout, dataset_stats, object_iou, part_iou, voxel_iou, voxelize, voxelize_boxes
from .obb import min_obb
from .refine import apply_similarity, filter_artifacts, optimize_layout
from .sampler import LatentBlock, SamplerConfig, sample, write_latents
from .schemas import LAYOUT_SCHEMA, RECORD_SCHEMA, SCENARIO_SCHEMA, validate
from .segmentation import ShapeRecord, dumps, load_record, run_pipeline, save_record

logger = logging.getLogger("partlayout")


# ------------------------------------------------------------------ helpers


def _read_json(path, schema, name):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{name} is not valid JSON: {exc.msg}") from exc
    validate(data, schema, name)
    return data


def _record(path) -> ShapeRecord:
    _read_json(path, RECORD_SCHEMA, "record")
    return load_record(path)


def _layout(path) -> Layout:
    data = _read_json(path, LAYOUT_SCHEMA, "layout")
    if data.get("prompt") is None:
        data["prompt"] = ""
    return Layout.from_dict(data)


def _write_json(path, data) -> None:
    Path(path).write_text(dumps(data))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _provenance(cfg: PipelineConfig, **extra) -> dict:
    return {"config_hash": cfg.hash(), **extra}


def _slug(label: str) -> str:
    return label.replace("/", "__").replace(".", "_")


# ------------------------------------------------------------------ segment


def _segment_one(job):
    path, label, cfg = job
    try:
        return label, "ok", run_pipeline(path, cfg, label)
    except (PartLayoutError, OSError, ValueError) as exc:
        return label, "error", str(exc)


def _inputs(paths):
    jobs = []
    for p in map(Path, paths):
        if p.is_dir():
            jobs += [(f, f.relative_to(p).as_posix()) for f in mesh_files(p)]
        else:
            jobs.append((p, p.name))
    return jobs


def cmd_segment(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    jobs = [(path, label, cfg) for path, label in _inputs(args.inputs)]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(_segment_one, jobs))
    else:
        results = [_segment_one(j) for j in jobs]
    rejections, errors, rows = [], [], []
    for label, status, res in sorted(results, key=lambda r: r[0]):
        if status == "error":
            logger.error("%s: %s", label, res)
            errors.append({"source": label, "error": res})
            rows.append([label, "error", "", "", "", res])
        elif isinstance(res, ShapeRecord):
            save_record(res, out / _slug(label))
            s = res.stats
            rows.append([label, "accepted", s["part_count"], s["mean_part_iou"], s["largest_rest_ratio"], ""])
        else:
            rejections.append(res.to_dict())
            s = res.stats
            rows.append([label, "rejected", s["part_count"], s["mean_part_iou"], s["largest_rest_ratio"],
                         ";".join(res.reasons)])
    _write_json(out / "rejections.json", rejections)
    _write_json(out / "errors.json", errors)
    report.write_csv(out / "summary.csv",
                     ["source", "status", "part_count", "mean_part_iou", "largest_rest_ratio", "detail"], rows)
    accepted = sum(r[1] == "accepted" for r in rows)
    logger.info("segment: %d accepted, %d rejected, %d errors", accepted, len(rejections), len(errors))
    return 1 if errors else 0


# ------------------------------------------------------------------ obb


def cmd_obb(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    entries = []
    for path, label in _inputs(args.inputs):
        meshes = [m for m in load_mesh(path) if not m.is_empty]
        groups = [(m.name, m.vertices) for m in meshes] if args.per_mesh else \
            [(None, np.concatenate([m.vertices for m in meshes]))] if meshes else []
        for name, verts in groups:
            entries.append({"source": label, "mesh": name, "obb": min_obb(verts).to_dict()})
    _write_json(out / "obbs.json", {"obbs": entries, "provenance": _provenance(cfg)})
    return 0


# ------------------------------------------------------------------ metrics


def cmd_metrics(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    rec, layout = _record(args.record), _layout(args.layout)
    mc = cfg.metrics
    values, mean = part_iou(rec.parts, layout)
    box_mode = args.object_box or mc.object_box
    obj, err = object_iou(rec.parts, layout, mc.mc_samples, mc.mc_seed, box_mode)
    grid = voxelize(rec.parts, mc.voxel_resolution)
    if mc.voxel_reference == "ground_truth":
        if not args.ground_truth:
            raise ConfigError("voxel_reference is ground_truth but no --ground-truth record given",
                              "$.metrics.voxel_reference")
        ref = voxelize(_record(args.ground_truth).parts, mc.voxel_resolution)
    else:
        ref = voxelize_boxes(layout.boxes, mc.voxel_resolution)
    result = {
        "part_iou": values, "mean_part_iou": mean, "object_iou": obj, "object_iou_stderr": err,
        "voxel_iou": voxel_iou(grid, ref),
        "provenance": _provenance(cfg, record=Path(args.record).name, layout=Path(args.layout).name,
                                  object_box=box_mode),
    }
    _write_json(out / "metrics.json", result)
    report.write_csv(out / "part_iou.csv", ["part", "iou"], list(enumerate(values)))
    return 0


# ------------------------------------------------------------------ stats


def _collect_stats(roots):
    found = []
    for root in map(Path, roots):
        for rec in sorted(root.rglob("record.json")):
            found.append((rec.relative_to(root).as_posix(), json.loads(rec.read_text())["stats"]))
        for rej_file in sorted(root.rglob("rejections.json")):
            for r in json.loads(rej_file.read_text()):
                found.append((r["source"], r["stats"]))
    return [s for _, s in sorted(found, key=lambda x: x[0])]


def cmd_stats(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    stats = _collect_stats(args.inputs)
    if not stats:
        logger.warning("no records found")
        _write_json(out / "stats.json", {"sample_count": 0, "provenance": _provenance(cfg)})
        return 0
    rep = dataset_stats(stats, args.bins, cfg.filter.max_mean_part_iou, cfg.filter.max_largest_rest_ratio)
    _write_json(out / "stats.json", {**rep.to_dict(), "provenance": _provenance(cfg)})
    rows = []
    for name in ("mean_part_iou", "largest_rest_ratio", "part_count"):
        rows += report.histogram_rows(name, getattr(rep, name))
    report.write_csv(out / "stats_histograms.csv", ["statistic", "bin_lo", "bin_hi", "count"], rows)
    report.stats_figure(rep, out / "stats.png", rep.iou_threshold, rep.ratio_threshold)
    return 0


# ------------------------------------------------------------------ optimize / clean


def cmd_optimize(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    rec, layout = _record(args.record), _layout(args.layout)
    res = optimize_layout(rec.parts, layout, cfg.beam)
    parts = [apply_similarity(p, res.transform) for p in rec.parts]
    obbs = [apply_similarity(b, res.transform) for b in rec.obbs]
    moved = ShapeRecord(parts, obbs, rec.prompt, rec.stats, {**rec.provenance, **_provenance(cfg)})
    save_record(moved, out)
    _write_json(out / "transform.json", {**res.to_dict(inverse=args.inverse), "provenance": _provenance(cfg)})
    keys = ["iteration", "best_score", "step_translation", "step_scale", "step_rotation_deg", "evaluations"]
    report.write_csv(out / "trace.csv", keys, [[r[k] for k in keys] for r in res.trace])
    report.trace_figure(res.trace, out / "trace.png")
    print(f"score {res.initial_score:.6f} -> {res.score:.6f}")
    return 0


def cmd_clean(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    rec, layout = _record(args.record), _layout(args.layout)
    parts, rep = filter_artifacts(rec.parts, layout, cfg.artifacts.theta)
    obbs = [b if new is old else min_obb(new.vertices) for b, new, old in zip(rec.obbs, parts, rec.parts)]
    save_record(ShapeRecord(parts, obbs, rec.prompt, rec.stats, {**rec.provenance, **_provenance(cfg)}), out)
    rows = [[r.part, r.components, r.largest_iou, r.removed_faces, r.action] for r in rep]
    report.write_csv(out / "artifacts.csv", ["part", "components", "largest_iou", "removed_faces", "action"], rows)
    return 0


# ------------------------------------------------------------------ simulate


def _field(kind: str, targets, rng_a, rng_b):
    if kind == "linear":
        def f(x, t, alpha, branch):
            return [(tg - b.tokens) / (1.0 - t) for b, tg in zip(x, targets)]
    elif kind == "contracting":
        def f(x, t, alpha, branch):
            return [-b.tokens for b in x]
    elif kind == "zero":
        def f(x, t, alpha, branch):
            return [np.zeros_like(b.tokens) for b in x]
    else:
        def f(x, t, alpha, branch):
            coef = rng_a if branch.name == "positive" else rng_b
            return [t * t * c for c in coef]
    return f


def cmd_simulate(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    sc = _read_json(args.scenario, SCENARIO_SCHEMA, "scenario")
    section = config_from_dict({**cfg.to_dict(), "sampler": {**cfg.to_dict()["sampler"], **sc.get("sampler", {})}})
    scfg = SamplerConfig.from_section(section.sampler)
    seed = sc.get("seed", cfg.seed)
    rng = np.random.default_rng(derive_seed(seed, "simulate"))
    shapes = [(p["tokens"], p["dim"]) for p in sc["parts"]]
    x0 = [LatentBlock(i, rng.normal(size=s)) for i, s in enumerate(shapes)]
    targets = [rng.normal(size=s) for s in shapes]
    coef_pos = [rng.normal(size=s) for s in shapes]
    coef_neg = [rng.normal(size=s) for s in shapes]
    field = _field(sc["field"], targets, coef_pos, coef_neg)
    layout = None
    mask = {i: True for i in sc.get("freeze", [])}
    reference = None
    if mask:
        ref_x0 = [LatentBlock(i, rng.normal(size=s)) for i, s in enumerate(shapes)]
        reference = sample(field, scfg, ref_x0, keep_trajectory=True).trajectory
    res = sample(field, scfg, x0, layout, mask, reference)
    exact = {"linear": targets, "zero": [b.tokens for b in x0]}.get(sc["field"])
    ids = [b.part_id for b in x0]
    header = ["step", "t", "alpha_c", "lambda_t"] + [f"norm_{i}" for i in ids]
    rows = [[r["step"], r["t"], r["alpha_c"][0], r["lambda_t"]] + [r["norms"][i] for i in ids] for r in res.trace]
    if exact is not None:
        header += [f"error_{i}" for i in ids]
        for row, lat in zip(rows[-1:], [res.latents]):
            row += [float(np.linalg.norm(b.tokens - e)) for b, e in zip(lat, exact)]
        for row in rows[:-1]:
            row += [""] * len(ids)
    report.write_csv(out / "trace.csv", header, rows)
    write_latents(res.latents, out / "latents.bin")
    summary = {"field": sc["field"], "steps": scfg.steps, "parts": len(ids),
               "final_norms": rows[-1][4:4 + len(ids)], "provenance": _provenance(cfg)}
    if exact is not None:
        summary["max_error"] = max(rows[-1][4 + len(ids):])
    _write_json(out / "summary.json", summary)
    return 0


# ------------------------------------------------------------------ caption


def cmd_caption(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    rec = _record(args.record)
    text = Path(args.record).read_text()
    try:
        caption = caption_request(text, args.images, args.endpoint, cfg.caption, mock=True if args.mock else None)
    except CaptionUnavailableError as exc:
        logger.warning("caption unavailable: %s", exc)
        caption = None
    save_record(ShapeRecord(rec.parts, rec.obbs, caption, rec.stats, rec.provenance), out)
    return 0


# ------------------------------------------------------------------ entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partlayout", description="Part-layout dataset and evaluation tools.")
    parser.add_argument("--config", help="JSON or TOML pipeline config")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=fn)
        return p

    p = add("segment", cmd_segment, "segment mesh files into part records")
    p.add_argument("inputs", nargs="+")
    p = add("obb", cmd_obb, "minimum oriented bounding boxes of mesh files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--per-mesh", action="store_true")
    p = add("metrics", cmd_metrics, "layout adherence metrics of a record")
    p.add_argument("--record", required=True)
    p.add_argument("--layout", required=True)
    p.add_argument("--ground-truth")
    p.add_argument("--object-box", choices=["obb", "aabb"], help="overrides metrics.object_box")
    p = add("stats", cmd_stats, "histograms over segment outputs")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--bins", type=int, default=20)
    p = add("optimize", cmd_optimize, "align a record to its layout")
    p.add_argument("--record", required=True)
    p.add_argument("--layout", required=True)
    p.add_argument("--inverse", action="store_true", help="also emit the transform for the layout side")
    p = add("clean", cmd_clean, "remove floating components outside control boxes")
    p.add_argument("--record", required=True)
    p.add_argument("--layout", required=True)
    p = add("simulate", cmd_simulate, "run the sampler on an analytic field")
    p.add_argument("scenario")
    p = add("caption", cmd_caption, "caption a record")
    p.add_argument("--record", required=True)
    p.add_argument("--images", nargs="*", default=[])
    p.add_argument("--endpoint")
    p.add_argument("--mock", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return 2
    except (PartLayoutError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
