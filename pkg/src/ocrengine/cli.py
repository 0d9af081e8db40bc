"""Command-line interface.

Subcommands: detect, recognize, e2e, eval, bench, convert, overlay.
Exit codes: 0 success, 1 when any per-image failure was recorded (the batch
still completes and failures land in the results file), 2 on build or
configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .errors import OcrEngineError
from .evaluation import (
    DetMetrics,
    det_metrics,
    gt_from_record,
    match_detections,
    normalize_text,
    read_jsonl,
    render_report,
)
from .geometry import Polygon
from .pipeline import (
    DocumentResult,
    Pipeline,
    bench,
    build_pipeline,
    convert_dataset,
    expand_inputs,
    load_config,
    load_image,
    render_overlay,
)


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", required=config_required, help="pipeline config (JSON)")
    parser.add_argument("--input", help="input glob (overrides config io.input)")
    parser.add_argument("--output", help="results path (overrides config io.output)")
    parser.add_argument("--workers", type=int, help="worker count (overrides config runtime.workers)")
    parser.add_argument("--seed", type=int, help="run seed (overrides config runtime.seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocrengine", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("detect", "run the detector stage over images"),
        ("recognize", "transcribe pre-cropped line images"),
        ("e2e", "run the full configured chain"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="predictions JSONL")
    p.add_argument("--gt", required=True, help="ground-truth JSONL (unified annotation layout)")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--mode", choices=("det", "e2e"), default="det")
    p.add_argument("--policy", choices=("keep", "lowercase", "alnum_lower"), default="alnum_lower")
    p.add_argument("--label", default="eval", help="row label in the report")

    p = sub.add_parser("bench", help="measure per-stage throughput")
    _add_common(p)
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("convert", help="convert a dataset to unified JSONL annotations")
    p.add_argument("--format", required=True, choices=("icdar_txt",))
    p.add_argument("--input", required=True, help="source directory")
    p.add_argument("--output", required=True, help="destination JSONL path")

    p = sub.add_parser("overlay", help="render results over their images")
    p.add_argument("--results", required=True, help="results JSONL from detect/e2e")
    p.add_argument("--input", required=True, help="glob matching the original images")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--format", choices=("png", "svg"), default="png")
    return parser


def _pipeline_for(args, keep: set[str]) -> tuple[Pipeline, "object"]:
    config = load_config(args.config)
    updates = {}
    if "detector" not in keep:
        updates["detector"] = None
    if "recognizer" not in keep:
        updates["recognizer"] = None
    if "kie" not in keep or config.recognizer is None:
        updates["kie"] = None
    if args.workers is not None or args.seed is not None:
        rt = config.runtime
        updates["runtime"] = dataclasses.replace(
            rt,
            workers=args.workers if args.workers is not None else rt.workers,
            seed=args.seed if args.seed is not None else rt.seed,
        )
    if updates:
        config = dataclasses.replace(config, **updates)
    return build_pipeline(config), config


def _resolve_inputs(args, config) -> list[str]:
    pattern = args.input or config.io.input
    if not pattern:
        raise OcrEngineError("no input glob given (use --input or config io.input)")
    inputs = expand_inputs(pattern)
    if not inputs:
        raise OcrEngineError(f"input glob {pattern!r} matched no files")
    return inputs


def _emit_results(results: list[DocumentResult], args, config) -> int:
    records = [r.to_record() for r in results]
    output = args.output or config.io.output
    if output:
        with open(output, "w", encoding="utf-8", newline="\n") as fh:
            for record in records:
                fh.write(json.dumps(record, ensure_ascii=False))
                fh.write("\n")
    else:
        for record in records:
            print(json.dumps(record, ensure_ascii=False))
    failures = [r for r in results if r.error is not None]
    for failure in failures:
        print(f"warning: {failure.image_id}: {failure.error}", file=sys.stderr)
    return 1 if failures else 0


def _run_batch(args, keep: set[str]) -> int:
    pipeline, config = _pipeline_for(args, keep)
    if "detector" in keep and pipeline.detector is None:
        raise OcrEngineError("this command needs a detector stage in the config")
    if keep == {"recognizer"} and pipeline.recognizer is None:
        raise OcrEngineError("this command needs a recognizer stage in the config")
    inputs = _resolve_inputs(args, config)
    results = pipeline.run(inputs, workers=args.workers)
    code = _emit_results(results, args, config)
    if config.io.overlay and config.io.overlay_dir:
        outdir = Path(config.io.overlay_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        for path, result in zip(inputs, results):
            if result.error is None:
                render_overlay(load_image(path), result, outdir / f"{result.image_id}.png")
    return code


def _cmd_eval(args) -> int:
    preds = {r["image_id"]: r for r in read_jsonl(args.pred)}
    gts = {r["image_id"]: r for r in read_jsonl(args.gt)}
    tp = fp = fn = 0
    for image_id in sorted(set(preds) | set(gts)):
        pred_entries = preds.get(image_id, {}).get("detections", [])
        gt_instances = gt_from_record(gts.get(image_id, {}))
        polys = [Polygon(e["polygon"]) for e in pred_entries]
        if args.mode == "e2e":
            pred_texts = [normalize_text(e.get("text", ""), args.policy) for e in pred_entries]
            gt_texts = [normalize_text(g.transcription, args.policy) for g in gt_instances]
            _, tpi, fpi, fni = match_detections(
                polys, gt_instances, args.iou, pred_texts=pred_texts, gt_texts=gt_texts
            )
        else:
            _, tpi, fpi, fni = match_detections(polys, gt_instances, args.iou)
        tp, fp, fn = tp + tpi, fp + fpi, fn + fni
    metrics: DetMetrics = det_metrics(tp, fp, fn)
    print(render_report([(args.label, metrics)]))
    print(f"counts: tp={metrics.tp} fp={metrics.fp} fn={metrics.fn}")
    return 0


def _cmd_bench(args) -> int:
    pipeline, config = _pipeline_for(args, keep={"detector", "recognizer", "kie"})
    inputs = _resolve_inputs(args, config)
    report = bench(pipeline, inputs, repeats=args.repeats, workers=args.workers)
    print(report.to_text())
    return 0


def _cmd_convert(args) -> int:
    count = convert_dataset(args.format, args.input, args.output)
    print(f"converted {count} image annotations -> {args.output}")
    return 0


def _cmd_overlay(args) -> int:
    records = read_jsonl(args.results)
    images = {Path(p).stem: p for p in expand_inputs(args.input)}
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for record in records:
        image_id = record["image_id"]
        if record.get("error") is not None:
            failures += 1
            continue
        if image_id not in images:
            print(f"warning: no image found for {image_id}", file=sys.stderr)
            failures += 1
            continue
        result = DocumentResult(image_id=image_id)
        from .detection import Detection
        from .decoding import Transcription

        kie_classes = []
        for entry in record.get("detections", []):
            result.detections.append(
                Detection(polygon=Polygon(entry["polygon"]), score=float(entry.get("score", 0.0)))
            )
            text = entry.get("text", "")
            result.transcriptions.append(
                Transcription(text=text, score=1.0, per_char_scores=(1.0,) * len(text))
            )
            kie_classes.append(entry.get("kie_class"))
        if any(c is not None for c in kie_classes):
            result.kie_classes = [c or "" for c in kie_classes]
        render_overlay(load_image(images[image_id]), result, outdir / f"{image_id}.{args.format}")
    return 1 if failures else 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "detect":
            return _run_batch(args, keep={"detector"})
        if args.command == "recognize":
            return _run_batch(args, keep={"recognizer"})
        if args.command == "e2e":
            return _run_batch(args, keep={"detector", "recognizer", "kie"})
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "convert":
            return _cmd_convert(args)
        if args.command == "overlay":
            return _cmd_overlay(args)
        parser.error(f"unknown command {args.command!r}")
    except OcrEngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
