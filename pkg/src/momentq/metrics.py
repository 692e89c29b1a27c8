"""Moment-retrieval and highlight-detection metrics (QVHighlights protocol)."""

from __future__ import annotations

import csv
import json
import logging
from fractions import Fraction
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

R1_THRESHOLDS = (0.3, 0.5, 0.7)
MAP_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def temporal_iou(a, b) -> float:
    (s1, e1), (s2, e2) = a, b
    if s1 > e1 or s2 > e2:
        raise ValueError(f"reversed span in iou({a}, {b})")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union if union > 0 else 0.0


def _best_iou(span, gts) -> float:
    return max((temporal_iou(span, g) for g in gts), default=0.0)


def _rank(preds):
    # stable: equal scores keep input order
    return sorted(preds, key=lambda p: -p[2])


def top1_ious(predictions: Sequence[Sequence], gts: Sequence[Sequence]) -> np.ndarray:
    out = np.zeros(len(gts))
    for i, (preds, g) in enumerate(zip(predictions, gts)):
        if preds:
            out[i] = _best_iou(_rank(preds)[0][:2], g)
    return out


def recall_at_1(predictions, gts, threshold: float) -> float:
    """Fraction of queries whose top-1 span reaches IoU >= threshold with some gt.

    ``predictions[q]`` is a list of (start, end, score); ``gts[q]`` a list of windows.
    """
    if not gts:
        return 0.0
    return float(np.mean(top1_ious(predictions, gts) >= threshold))


def mean_iou(predictions, gts) -> float:
    return float(np.mean(top1_ious(predictions, gts))) if gts else 0.0


def average_precision(preds, gts, threshold: float) -> float:
    """AP of one query's ranked spans at one IoU threshold.

    Predictions are visited by descending score; each is matched to the
    unmatched gt with the highest IoU (lowest index on ties) if that IoU reaches the threshold.
    AP integrates the interpolated (monotone envelope) precision over recall
    and is returned correctly rounded.
    """
    if not gts:
        return 0.0
    ranked = _rank(preds)
    matched = [False] * len(gts)
    tp = np.zeros(len(ranked))
    for i, p in enumerate(ranked):
        ious = [temporal_iou(p[:2], g) for g in gts]
        # highest IoU first, equal IoUs by lowest gt index
        for j in np.argsort(-np.asarray(ious), kind="stable"):
            if ious[j] < threshold:
                break
            if not matched[j]:
                matched[j] = True
                tp[i] = 1
                break
    if not ranked:
        return 0.0
    # precision at rank k is a ratio of integers, so the sum is done exactly
    ctp = np.cumsum(tp).astype(int)
    prec = [Fraction(int(c), k + 1) for k, c in enumerate(ctp)]
    best, total = Fraction(0), Fraction(0)
    for k in range(len(prec) - 1, -1, -1):
        best = max(best, prec[k])
        if tp[k]:
            total += best
    return float(total / len(gts))


def map_moments(predictions, gts, thresholds=MAP_THRESHOLDS) -> Dict[str, float]:
    """mAP per threshold (mean over queries) plus ``"avg"`` over the thresholds."""
    out = {}
    for thr in thresholds:
        aps = [average_precision(p, g, thr) for p, g in zip(predictions, gts)]
        out[f"{thr:.2f}"] = float(np.mean(aps)) if aps else 0.0
    out["avg"] = float(np.mean([out[f"{t:.2f}"] for t in thresholds])) if thresholds else 0.0
    return out


def _ranking_ap(scores, labels) -> float:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    rel = (np.asarray(labels)[order] > 0).astype(float)
    hits = np.cumsum(rel)
    prec = hits / np.arange(1, len(rel) + 1)
    return float((prec * rel).sum() / rel.sum())


def highlight_metrics(saliency_scores, labels) -> Dict[str, float]:
    """Mean clip-ranking AP and HIT@1 over videos with at least one positive clip."""
    aps, hits, skipped = [], [], 0
    for s, l in zip(saliency_scores, labels):
        s, l = np.asarray(s, dtype=np.float64).reshape(-1), np.asarray(l).reshape(-1)
        if not np.any(l > 0):
            skipped += 1
            continue
        aps.append(_ranking_ap(s, l))
        hits.append(float(l[int(np.argmax(s))] > 0))
    if skipped:
        log.info("highlight metrics: %d video(s) without positive clips excluded", skipped)
    if not aps:
        return {"hd_map": 0.0, "hit_at_1": 0.0}
    return {"hd_map": float(np.mean(aps)), "hit_at_1": float(np.mean(hits))}


@dataclass
class MetricsReport:
    r1_0_3: float = 0.0
    r1_0_5: float = 0.0
    r1_0_7: float = 0.0
    map_0_5: float = 0.0
    map_0_75: float = 0.0
    map_avg: float = 0.0
    miou: float = 0.0
    hd_map: float = 0.0
    hit_at_1: float = 0.0
    codebook_utilization: float = 0.0

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]


def compute_report(predictions, gts, saliency_scores, saliency_labels,
                   codebook_utilization: float = 0.0) -> MetricsReport:
    m = map_moments(predictions, gts)
    hd = highlight_metrics(saliency_scores, saliency_labels)
    return MetricsReport(
        r1_0_3=recall_at_1(predictions, gts, 0.3),
        r1_0_5=recall_at_1(predictions, gts, 0.5),
        r1_0_7=recall_at_1(predictions, gts, 0.7),
        map_0_5=m["0.50"], map_0_75=m["0.75"], map_avg=m["avg"],
        miou=mean_iou(predictions, gts),
        hd_map=hd["hd_map"], hit_at_1=hd["hit_at_1"],
        codebook_utilization=codebook_utilization,
    )


def write_report_csv(path, rows: Sequence[Mapping], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})
