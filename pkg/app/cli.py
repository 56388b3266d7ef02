"""
Command-line entry point: python -m app <command> ...

Reports are JSON on stdout (or --out); logs go to stderr.
Exit status is 0 on success, 1 when any image failed and 2 on a configuration
or usage error.
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

from app.core.config import DATA_DIR, LOG_FORMAT, LOG_LEVEL, PipelineConfig, default_workers, load_config
from app.core.errors import InvalidParamError, InvalidSpecError, KiwicalError, SchemaError
from app.core.evaluation import aggregate, density, evaluate_dataset, match
from app.core.image import load_image, save_image
from app.core.lighting import classify_lighting, format_lighting_line, saturation_stats
from app.core.overlay import write_overlay
from app.core.pipeline import (
    STAGES,
    BatchItem,
    ImageRecord,
    RunReport,
    backend_from_config,
    detect_batch,
)
from app.core.preprocess import preprocess_for
from app.core.synth import write_dataset
from app.core.types import DatasetManifest, LightingClass
from app.db.annotations import (
    detections_path,
    load_annotations,
    load_detections,
    load_manifest,
    save_detections,
    write_json,
)

logger = logging.getLogger("app.cli")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2

LIGHTING_CHOICES = [c.value for c in LightingClass]


def configure_logging(level: str) -> None:
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, stream=sys.stderr, force=True)


def emit(document: Dict[str, Any], args: argparse.Namespace) -> None:
    if args.report_out:
        write_json(args.report_out, document)
        logger.info("Report written to %s", args.report_out)
    else:
        json.dump(document, sys.stdout, indent=2)
        sys.stdout.write("\n")


def _dump(model) -> Dict[str, Any]:
    return model.model_dump(mode="json", by_alias=True)


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested config keys for every pipeline flag given on the command line."""
    flags = {
        "backend": ("backend",),
        "min_area": ("blobs", "min_area"),
        "min_circularity": ("blobs", "min_circularity"),
        "connectivity": ("blobs", "connectivity"),
        "sat_threshold": ("sat_threshold",),
        "saturation_mode": ("saturation_mode",),
        "force_class": ("preprocess", "force_class"),
        "glare_he_tiles": ("preprocess", "glare_he_tiles"),
        "threshold": ("eval", "match_threshold"),
        "average": ("eval", "average"),
        "distance_mode": ("eval", "distance_mode"),
    }
    overrides: Dict[str, Any] = {}
    for flag, keys in flags.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = overrides
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value
    if getattr(args, "no_preprocess", False):
        overrides.setdefault("preprocess", {})["enabled"] = False
    return overrides


def _workers(args: argparse.Namespace) -> int:
    return args.workers if args.workers else default_workers()


def _manifest_lighting(manifest: Optional[DatasetManifest]) -> Dict[str, LightingClass]:
    if manifest is None:
        return {}
    return {e.image_path: e.lighting_label for e in manifest.entries if e.lighting_label is not None}


def _lighting_of(path: str) -> LightingClass:
    return classify_lighting(saturation_stats(load_image(path)))


def cmd_classify(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    failed = 0
    for path in args.image:
        try:
            stats = saturation_stats(load_image(path), cfg.sat_threshold)
        except KiwicalError as e:
            logger.error("%s: %s", path, e)
            failed += 1
            continue
        line = format_lighting_line(classify_lighting(stats, cfg.saturation_mode), stats)
        print(line if len(args.image) == 1 else f"{path} {line}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_preprocess(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    img = load_image(args.image)
    stats = saturation_stats(img, cfg.sat_threshold)
    detected = classify_lighting(stats, cfg.saturation_mode)
    applied = cfg.preprocess.force_class or detected
    # A standalone image has no inference tiles, so glare equalization runs over disjoint blocks
    plan = preprocess_for(img, applied, "disjoint", block=(cfg.tile.width, cfg.tile.height))
    save_image(plan.apply_image(img), args.image_out)
    emit({
        "image": args.image,
        "out": args.image_out,
        "lighting": detected.value,
        "applied": applied.value,
        "steps": [s.value for s in plan.steps],
    }, args)
    return EXIT_OK


def _images_and_manifest(args: argparse.Namespace):
    manifest = load_manifest(args.manifest) if getattr(args, "manifest", None) else None
    paths: List[str] = list(getattr(args, "images", None) or [])
    if manifest is not None:
        paths.extend(e.image_path for e in manifest.entries)
    if not paths:
        raise InvalidParamError("no images given; pass image paths or --manifest")
    return paths, manifest


def cmd_detect(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    paths, manifest = _images_and_manifest(args)
    items = detect_batch(paths, backend_from_config(cfg), cfg, _workers(args))

    out_dir = args.out_dir or os.path.join(DATA_DIR, "detections")
    records = []
    for item in items:
        det_file = None
        if item.ok:
            det_file = detections_path(out_dir, item.path)
            save_detections(item.detections, det_file)
        records.append(ImageRecord.from_item(item, det_file, args.dump_tiles))

    metrics = None
    if manifest is not None:
        truth = {e.image_path: e.annotation_path for e in manifest.entries if e.annotation_path}
        reports = []
        for item in items:
            if not item.ok or item.path not in truth:
                continue
            try:
                reports.append(match(item.detections, load_annotations(truth[item.path]), cfg.eval))
            except (KiwicalError, OSError) as e:
                logger.warning("No metrics for %s: %s", item.path, e)
        if reports:
            metrics = aggregate(reports, cfg.eval.average)

    failed = sum(1 for item in items if not item.ok)
    report = RunReport(command="detect", config=_dump(cfg), images=records, metrics=metrics, failed=failed)
    emit(_dump(report), args)
    logger.info("Detected calyces in %d/%d images", len(items) - failed, len(items))
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_evaluate(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    manifest = load_manifest(args.manifest)
    report = evaluate_dataset(manifest, args.detections_dir, cfg.eval, lighting_of=_lighting_of)
    emit(_dump(report), args)
    return EXIT_PARTIAL if report.errors else EXIT_OK


def cmd_synth(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    path = write_dataset(
        args.out_dir,
        args.count,
        lighting=args.lighting,
        density=args.density,
        occluded_frac=args.occluded_frac,
        seed=args.seed,
        width=args.width,
        height=args.height,
        workers=_workers(args),
    )
    emit({"manifest": path, "count": args.count, "lighting": args.lighting, "seed": args.seed}, args)
    return EXIT_OK


def _group_by_lighting(items: Sequence[BatchItem], labels: Dict[str, LightingClass]) -> Dict[LightingClass, List[BatchItem]]:
    groups: Dict[LightingClass, List[BatchItem]] = {}
    for item in items:
        if not item.ok:
            continue
        cls = labels.get(item.path, item.lighting)
        groups.setdefault(cls, []).append(item)
    return {cls: groups[cls] for cls in LightingClass if cls in groups}


def format_table(rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> str:
    widths = [max(len(c), *(len(_cell(r[c])) for r in rows)) for c in columns]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    for row in rows:
        lines.append("  ".join(_cell(row[c]).ljust(w) for c, w in zip(columns, widths)))
    return "\n".join(lines)


def _cell(value: Any) -> str:
    return f"{value:.2f}" if isinstance(value, float) else str(value)


def cmd_bench(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    manifest = load_manifest(args.manifest)
    paths = [e.image_path for e in manifest.entries]
    # One image at a time so stage timings are not skewed by contention
    items = detect_batch(paths, backend_from_config(cfg), cfg, workers=1)

    rows = []
    for cls, group in _group_by_lighting(items, _manifest_lighting(manifest)).items():
        row: Dict[str, Any] = {"lighting": cls.value, "images": len(group)}
        for stage in STAGES + ("total",):
            row[f"{stage}_ms"] = sum(getattr(i.timings, f"{stage}_ms") for i in group) / len(group)
        rows.append(row)

    failed = sum(1 for item in items if not item.ok)
    if rows:
        print(format_table(rows, ["lighting", "images"] + [f"{s}_ms" for s in STAGES + ("total",)]), file=sys.stderr)
    emit({"schema_version": 1, "command": "bench", "manifest": manifest.name, "rows": rows, "failed": failed}, args)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_overlay(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    img = load_image(args.image)
    dets = load_detections(args.detections)
    truth = load_annotations(args.truth) if args.truth else None
    write_overlay(img, dets, args.image_out, truth, cfg.eval)
    emit({"image": args.image, "out": args.image_out, "detections": len(dets)}, args)
    return EXIT_OK


def cmd_summarize(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    rows = []
    for path in args.manifest:
        manifest = load_manifest(path)
        rows.append({"name": manifest.name, "images": len(manifest.entries), "density": density(manifest)})
    print(format_table(rows, ["name", "images", "density"]), file=sys.stderr)
    emit({"schema_version": 1, "command": "summarize", "rows": rows}, args)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    """Detection with preprocessing off and on, evaluated per lighting class."""
    manifest = load_manifest(args.manifest)
    truth = {e.image_path: load_annotations(e.annotation_path) for e in manifest.entries if e.annotation_path}
    paths = [e.image_path for e in manifest.entries if e.image_path in truth]
    if not paths:
        raise InvalidParamError(f"{args.manifest} has no annotated images")
    labels = _manifest_lighting(manifest)
    backend = backend_from_config(cfg)

    rows = []
    failed = 0
    for name, enabled in (("raw", False), ("preprocessed", True)):
        variant = cfg.model_copy(update={"preprocess": cfg.preprocess.model_copy(update={"enabled": enabled})})
        items = detect_batch(paths, backend, variant, _workers(args))
        failed += sum(1 for item in items if not item.ok)
        for cls, group in _group_by_lighting(items, labels).items():
            m = aggregate([match(i.detections, truth[i.path], cfg.eval) for i in group], cfg.eval.average)
            rows.append({
                "method": f"{name}/{cls.value}",
                "images": len(group),
                "recall": m.recall,
                "precision": m.precision,
                "f1": m.f1,
            })

    print(format_table(rows, ["method", "images", "recall", "precision", "f1"]), file=sys.stderr)
    emit({"schema_version": 1, "command": "compare", "manifest": manifest.name, "rows": rows, "failed": failed}, args)
    return EXIT_PARTIAL if failed else EXIT_OK


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", help="reference or pmap:<dir>")
    p.add_argument("--no-preprocess", action="store_true", help="Skip lighting-specific preprocessing")
    p.add_argument("--force-class", choices=LIGHTING_CHOICES, help="Preprocess as this lighting class")
    p.add_argument("--glare-he-tiles", choices=["disjoint", "overlap"])
    p.add_argument("--min-area", type=int)
    p.add_argument("--min-circularity", type=float)
    p.add_argument("--connectivity", type=int, choices=[4, 8])
    p.add_argument("--sat-threshold", type=int)
    p.add_argument("--saturation-mode", "--eq1-mode", dest="saturation_mode", choices=["intersection", "per-channel"])


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threshold", type=float, help="Match gating distance in pixels")
    p.add_argument("--average", choices=["micro", "macro"])
    p.add_argument("--distance-mode", choices=["center", "box"])


def _add_global_flags(p: argparse.ArgumentParser, **defaults: Any) -> None:
    p.add_argument("--config", default=defaults.get("config", argparse.SUPPRESS), help="JSON file overriding the default pipeline settings")
    p.add_argument("--seed", type=int, default=defaults.get("seed", argparse.SUPPRESS))
    p.add_argument("--workers", type=int, default=defaults.get("workers", argparse.SUPPRESS), help="Worker threads (default: logical cores)")
    p.add_argument("--log-level", default=defaults.get("log_level", argparse.SUPPRESS))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kiwical", description="Calyx detection pipeline toolkit")
    _add_global_flags(parser, config=None, seed=0, workers=None, log_level=LOG_LEVEL)
    parser.add_argument("--out", dest="report_out", help="Write the JSON report here instead of stdout")
    # Global flags repeated after the command name override the ones before it
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("classify-lighting", help="Classify image lighting from saturation counts", parents=[common])
    p.add_argument("--image", action="append", required=True)
    p.add_argument("--sat-threshold", type=int)
    p.add_argument("--saturation-mode", "--eq1-mode", dest="saturation_mode", choices=["intersection", "per-channel"])
    p.set_defaults(handler=cmd_classify)

    p = sub.add_parser("preprocess", help="Apply lighting-specific preprocessing to one image", parents=[common])
    p.add_argument("--image", required=True)
    p.add_argument("--out", dest="image_out", required=True)
    p.add_argument("--force-class", choices=LIGHTING_CHOICES)
    p.add_argument("--sat-threshold", type=int)
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("detect", help="Detect calyces", parents=[common])
    p.add_argument("images", nargs="*")
    p.add_argument("--manifest")
    p.add_argument("--out-dir", help="Directory for <stem>.det.json detection files")
    p.add_argument("--dump-tiles", action="store_true", help="Include the tile plan of each image")
    _add_pipeline_flags(p)
    _add_eval_flags(p)
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("evaluate", help="Evaluate stored detections against ground truth", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections-dir", required=True)
    _add_eval_flags(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("synth", help="Generate a synthetic dataset", parents=[common])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--lighting", choices=LIGHTING_CHOICES + ["mixed"], default="typical")
    p.add_argument("--density", type=float, default=60)
    p.add_argument("--occluded-frac", type=float, default=0.22)
    p.add_argument("--width", type=int, default=1936)
    p.add_argument("--height", type=int, default=1216)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("bench", help="Mean stage timings per lighting class", parents=[common])
    p.add_argument("--manifest", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("overlay", help="Draw detections and ground truth on an image", parents=[common])
    p.add_argument("--image", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--truth")
    p.add_argument("--out", dest="image_out", required=True)
    _add_eval_flags(p)
    p.set_defaults(handler=cmd_overlay)

    p = sub.add_parser("summarize", help="Image count and calyx density per manifest", parents=[common])
    p.add_argument("--manifest", action="append", required=True)
    p.set_defaults(handler=cmd_summarize)

    p = sub.add_parser("compare", help="Metrics with and without preprocessing", parents=[common])
    p.add_argument("--manifest", required=True)
    _add_pipeline_flags(p)
    _add_eval_flags(p)
    p.set_defaults(handler=cmd_compare)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    try:
        cfg = load_config(args.config, config_overrides(args))
    except KiwicalError as e:
        logger.error("%s", e)
        return EXIT_USAGE

    handler: Callable[[argparse.Namespace, PipelineConfig], int] = args.handler
    try:
        return handler(args, cfg)
    except (SchemaError, InvalidParamError, InvalidSpecError) as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except KiwicalError as e:
        logger.error("%s", e)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
