"""Detection and recognition evaluation.

Detection follows the ICDAR2015-style protocol: candidate (prediction,
ground-truth) pairs at IoU >= threshold are matched greedily one-to-one in
descending IoU order, "###" regions are don't-care (they absorb predictions
without counting as hits or misses), and precision/recall/H-mean are computed
from global counts.  Recognition metrics are exact-match word accuracy and
normalized edit distance after a configurable text normalization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoding import normalize_text
from .errors import OcrEngineError
from .geometry import Polygon, polygon_iou

IGNORE_TOKEN = "###"


@dataclass(frozen=True)
class GtInstance:
    """One ground-truth region; ``ignore`` marks don't-care regions."""

    polygon: Polygon
    transcription: str = ""
    ignore: bool = False


@dataclass(frozen=True)
class DetMetrics:
    recall: float
    precision: float
    hmean: float
    tp: int
    fp: int
    fn: int


def _polygon_of(obj) -> Polygon:
    return obj.polygon if hasattr(obj, "polygon") else obj


def _iou_matrix(pred_polys: list[Polygon], gt_polys: list[Polygon]) -> np.ndarray:
    """Pairwise IoU with an exact bounding-box prefilter (disjoint boxes
    cannot overlap, so their IoU is 0 without clipping)."""
    ious = np.zeros((len(pred_polys), len(gt_polys)))
    if not pred_polys or not gt_polys:
        return ious
    pb = np.array([p.bounds() for p in pred_polys])
    gb = np.array([g.bounds() for g in gt_polys])
    overlap = ~(
        (pb[:, None, 2] < gb[None, :, 0])
        | (gb[None, :, 2] < pb[:, None, 0])
        | (pb[:, None, 3] < gb[None, :, 1])
        | (gb[None, :, 3] < pb[:, None, 1])
    )
    for i, j in np.argwhere(overlap):
        ious[i, j] = polygon_iou(pred_polys[i], gt_polys[j])
    return ious


def match_detections(
    preds,
    gts: list[GtInstance],
    iou_thresh: float = 0.5,
    pred_texts: list[str] | None = None,
    gt_texts: list[str] | None = None,
) -> tuple[list[tuple[int, int]], int, int, int]:
    """Greedy one-to-one matching.

    Returns (matches, tp, fp, fn) where matches is a list of
    (pred_index, gt_index) pairs.  Candidate pairs need IoU >= iou_thresh
    (and equal texts when pred_texts/gt_texts are supplied, the end-to-end
    variant); they are processed in descending IoU with ties broken by lower
    gt index then lower pred index.  A prediction whose best overlap across
    all ground truths is an ignored region at IoU >= threshold is excluded
    from the false positives; ignored regions never count as misses.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    pred_polys = [_polygon_of(p) for p in preds]
    gt_polys = [g.polygon for g in gts]
    ious = _iou_matrix(pred_polys, gt_polys)

    candidates = []
    for i in range(len(pred_polys)):
        for j, gt in enumerate(gts):
            if gt.ignore or ious[i, j] < iou_thresh:
                continue
            if pred_texts is not None and gt_texts is not None and pred_texts[i] != gt_texts[j]:
                continue
            candidates.append((-ious[i, j], j, i))
    candidates.sort()

    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    matches: list[tuple[int, int]] = []
    for _, j, i in candidates:
        if i in matched_pred or j in matched_gt:
            continue
        matched_pred.add(i)
        matched_gt.add(j)
        matches.append((i, j))

    tp = len(matches)
    fp = 0
    for i in range(len(pred_polys)):
        if i in matched_pred:
            continue
        if len(gts) > 0:
            best_j = int(np.argmax(ious[i]))
            if gts[best_j].ignore and ious[i, best_j] >= iou_thresh:
                continue  # swallowed by a don't-care region
        fp += 1
    fn = sum(1 for j, gt in enumerate(gts) if not gt.ignore and j not in matched_gt)
    return matches, tp, fp, fn


def harmonic_mean(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def det_metrics(tp: int, fp: int, fn: int) -> DetMetrics:
    """Precision/recall/H-mean from global counts.  An empty task (nothing to
    detect, nothing detected) scores 1 across the board so it cannot poison
    dataset-level aggregates."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    if tp == 0 and fp == 0 and fn == 0:
        return DetMetrics(recall=1.0, precision=1.0, hmean=1.0, tp=0, fp=0, fn=0)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return DetMetrics(
        recall=recall,
        precision=precision,
        hmean=harmonic_mean(precision, recall),
        tp=tp,
        fp=fp,
        fn=fn,
    )


def levenshtein(a: str, b: str) -> int:
    """Edit distance (insert/delete/substitute, unit costs)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def recog_metrics(preds: list[str], gts: list[str], policy: str = "alnum_lower") -> tuple[float, float]:
    """(word accuracy, mean normalized edit distance) over aligned lists."""
    if len(preds) != len(gts):
        raise OcrEngineError(f"prediction/ground-truth length mismatch: {len(preds)} vs {len(gts)}")
    if not preds:
        return 1.0, 0.0
    correct = 0
    neds = []
    for p, g in zip(preds, gts):
        p_n, g_n = normalize_text(p, policy), normalize_text(g, policy)
        correct += p_n == g_n
        longest = max(len(p_n), len(g_n))
        neds.append(levenshtein(p_n, g_n) / longest if longest else 0.0)
    return correct / len(preds), float(np.mean(neds))


def e2e_metrics(
    preds,
    gts: list[GtInstance],
    iou_thresh: float = 0.5,
    policy: str = "alnum_lower",
) -> DetMetrics:
    """End-to-end scoring: a match requires both the polygon overlap of
    match_detections and equal normalized transcriptions.  ``preds`` holds
    (polygon, text) pairs or objects with .polygon/.text."""
    pred_polys = []
    pred_texts = []
    for p in preds:
        if hasattr(p, "polygon"):
            pred_polys.append(p.polygon)
            pred_texts.append(normalize_text(p.text, policy))
        else:
            poly, text = p
            pred_polys.append(poly)
            pred_texts.append(normalize_text(text, policy))
    gt_texts = [normalize_text(g.transcription, policy) for g in gts]
    _, tp, fp, fn = match_detections(
        pred_polys, gts, iou_thresh, pred_texts=pred_texts, gt_texts=gt_texts
    )
    return det_metrics(tp, fp, fn)


def render_report(rows: list[tuple[str, DetMetrics]]) -> str:
    """Aligned text table, one method per row, percentages to one decimal:

        Method | Recall | Precision | H-mean
        db     | 73.1 | 87.1 | 79.5
    """
    if not rows:
        raise ValueError("report needs at least one row")
    width = max(len("Method"), *(len(name) for name, _ in rows))
    lines = [f"{'Method':<{width}} | Recall | Precision | H-mean"]
    for name, m in rows:
        lines.append(
            f"{name:<{width}} | {m.recall * 100:.1f} | {m.precision * 100:.1f} | {m.hmean * 100:.1f}"
        )
    return "\n".join(lines)


def parse_icdar_line(line: str, path: str = "<line>", lineno: int = 0) -> GtInstance:
    """One annotation line: "x1,y1,x2,y2,x3,y3,x4,y4,transcription"; the
    transcription may itself contain commas; "###" means don't-care."""
    parts = line.split(",", 8)
    if len(parts) < 9:
        raise OcrEngineError(f"{path}:{lineno}: expected 8 coordinates and a transcription")
    try:
        coords = [float(v) for v in parts[:8]]
    except ValueError as exc:
        raise OcrEngineError(f"{path}:{lineno}: bad coordinate: {exc}") from exc
    text = parts[8]
    try:
        polygon = Polygon(np.array(coords).reshape(4, 2))
    except Exception as exc:
        raise OcrEngineError(f"{path}:{lineno}: degenerate polygon: {exc}") from exc
    return GtInstance(polygon=polygon, transcription=text, ignore=text == IGNORE_TOKEN)


def read_icdar_file(path) -> list[GtInstance]:
    text = Path(path).read_text(encoding="utf-8-sig")
    instances = []
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip("\r")
        if not line.strip():
            continue
        instances.append(parse_icdar_line(line, str(path), lineno))
    return instances


def gt_from_record(record: dict) -> list[GtInstance]:
    """Instances from one unified-annotation JSONL record."""
    out = []
    for inst in record.get("instances", []):
        out.append(
            GtInstance(
                polygon=Polygon(inst["polygon"]),
                transcription=inst.get("text", ""),
                ignore=bool(inst.get("ignore", False)),
            )
        )
    return out


def read_jsonl(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise OcrEngineError(f"{path}:{lineno}: bad JSON: {exc}") from exc
    return records


def write_jsonl(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False))
            fh.write("\n")
