"""Segment-level F1 (per-second protocol), threshold sweeps, mAP and map dumps."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .align import SegmentMatch


@dataclass
class EvalReport:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    macro_f1: float = 0.0
    threshold: float | None = None
    per_pair: dict = field(default_factory=dict)
    mAP: float | None = None
    ap_per_query: dict = field(default_factory=dict)
    skipped_queries: int = 0
    pr_points: list = field(default_factory=list)
    compression_ratio: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _seconds(a: float, b: float, unit: float) -> range:
    """Unit bins that the interval [a, b) covers by at least half a unit."""
    lo = math.floor(a / unit)
    hi = math.ceil(b / unit)
    return range(lo, hi) if hi > lo else range(0)


def segment_units(s: SegmentMatch, unit: float = 1.0) -> list[tuple[int, int]]:
    """(query bin, ref bin) units along the segment's diagonal."""
    out = []
    for t in _seconds(s.q_start, s.q_end, unit):
        overlap = min(s.q_end, (t + 1) * unit) - max(s.q_start, t * unit)
        if overlap < unit / 2:
            continue
        tc = min(max((t + 0.5) * unit, s.q_start), s.q_end)
        r = s.r_start + (tc - s.q_start) * (s.r_end - s.r_start) / (s.q_end - s.q_start)
        rb = math.floor(r / unit)
        if rb * unit >= s.r_end:
            rb -= 1
        out.append((t, rb))
    return out


def _inside(unit_cell, s: SegmentMatch, unit: float) -> bool:
    t, rb = unit_cell
    qc, rc = (t + 0.5) * unit, (rb + 0.5) * unit
    return s.q_start <= qc <= s.q_end and s.r_start <= rc <= s.r_end


@dataclass
class _PairUnits:
    pred: dict  # unit -> (best score, correct)
    gt: dict  # unit -> best score of a covering prediction (-inf if none)


def _pair_units(preds: list[SegmentMatch], gts: list[SegmentMatch], unit: float) -> _PairUnits:
    pred = {}
    for s in preds:
        for u in segment_units(s, unit):
            if u not in pred or s.score > pred[u][0]:
                pred[u] = (s.score, any(_inside(u, g, unit) for g in gts))
    gt = {}
    for g in gts:
        for u in segment_units(g, unit):
            best = max((s.score for s in preds if _inside(u, s, unit)), default=-math.inf)
            gt[u] = max(best, gt.get(u, -math.inf))
    return _PairUnits(pred, gt)


def _counts(pu: _PairUnits, thr: float):
    n_pred = sum(1 for s, _ in pu.pred.values() if s >= thr)
    n_ok = sum(1 for s, ok in pu.pred.values() if s >= thr and ok)
    n_gt = len(pu.gt)
    n_hit = sum(1 for s in pu.gt.values() if s >= thr and s > -math.inf)
    return n_pred, n_ok, n_gt, n_hit


def segment_f1(preds: dict, gts: dict, score_threshold: float | None = None, unit: float = 1.0) -> EvalReport:
    """Pooled (micro) and per-pair-averaged (macro) segment F1.

    ``preds`` and ``gts`` map a pair key to a list of SegmentMatch.
    """
    thr = -math.inf if score_threshold is None else score_threshold
    tot = np.zeros(4)
    per_pair, macro = {}, []
    for key in sorted(set(preds) | set(gts), key=str):
        pu = _pair_units(preds.get(key, []), gts.get(key, []), unit)
        c = _counts(pu, thr)
        tot += c
        p = c[1] / c[0] if c[0] else 0.0
        r = c[3] / c[2] if c[2] else 0.0
        per_pair[str(key)] = {"precision": p, "recall": r, "f1": f1_score(p, r)}
        if c[2]:
            macro.append(f1_score(p, r))
    P = tot[1] / tot[0] if tot[0] else 0.0
    R = tot[3] / tot[2] if tot[2] else 0.0
    return EvalReport(precision=P, recall=R, f1=f1_score(P, R), macro_f1=float(np.mean(macro)) if macro else 0.0,
                      threshold=score_threshold, per_pair=per_pair)


def sweep_f1(preds: dict, gts: dict, unit: float = 1.0) -> EvalReport:
    """Best micro F1 over every distinct prediction score, with the PR curve.

    Curve points are (threshold, precision, recall, f1) in descending
    threshold order, starting above the top score (no predictions).
    """
    units = [_pair_units(preds.get(k, []), gts.get(k, []), unit) for k in sorted(set(preds) | set(gts), key=str)]
    pred_scores, pred_ok, gt_scores = [], [], []
    for pu in units:
        for s, ok in pu.pred.values():
            pred_scores.append(s)
            pred_ok.append(ok)
        gt_scores.extend(pu.gt.values())
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    pred_ok = np.asarray(pred_ok, dtype=bool)
    gt_scores = np.sort(np.asarray(gt_scores, dtype=np.float64))
    n_gt = len(gt_scores)
    thresholds = np.unique(pred_scores)[::-1]
    order = np.argsort(-pred_scores, kind="stable")
    ps, oks = pred_scores[order], pred_ok[order]
    cum_ok = np.cumsum(oks)
    top = float(thresholds[0]) if len(thresholds) else 1.0
    points = [(math.nextafter(top, math.inf), 0.0, 0.0, 0.0)]
    best = (0.0, None, 0.0, 0.0)
    for t in thresholds:
        n_pred = int(np.searchsorted(-ps, -t, side="right"))
        n_ok = int(cum_ok[n_pred - 1]) if n_pred else 0
        n_hit = n_gt - int(np.searchsorted(gt_scores, t, side="left"))
        P = n_ok / n_pred if n_pred else 0.0
        R = n_hit / n_gt if n_gt else 0.0
        F = f1_score(P, R)
        points.append((float(t), P, R, F))
        if F > best[0]:
            best = (F, float(t), P, R)
    return EvalReport(precision=best[2], recall=best[3], f1=best[0], threshold=best[1], pr_points=points)


def average_precision(ranked_ids, relevant) -> float:
    hits, total = 0, 0.0
    for k, vid in enumerate(ranked_ids, start=1):
        if vid in relevant:
            hits += 1
            total += hits / k
    return total / len(relevant)


def map_eval(rankings: dict, relevance: dict) -> EvalReport:
    """Uninterpolated mAP. ``rankings`` maps query -> ranked [(video_id, score)]
    or [video_id]; queries with no relevant items are skipped and counted."""
    aps, skipped = {}, 0
    for q in sorted(rankings):
        rel = set(relevance.get(q, ()))
        if not rel:
            skipped += 1
            continue
        ids = [r[0] if isinstance(r, (tuple, list)) else r for r in rankings[q]]
        aps[q] = average_precision(ids, rel)
    return EvalReport(mAP=float(np.mean(list(aps.values()))) if aps else 0.0, ap_per_query=aps,
                      skipped_queries=skipped)


def _outline(img, box, color):
    h, w = img.shape[:2]
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    x1, y1 = max(x1, 0), max(y1, 0)
    x2, y2 = min(x2, w) - 1, min(y2, h) - 1
    if x1 > x2 or y1 > y2:
        return
    img[y1, x1 : x2 + 1] = color
    img[y2, x1 : x2 + 1] = color
    img[y1 : y2 + 1, x1] = color
    img[y1 : y2 + 1, x2] = color


def dump_map_image(M, path, gt_boxes=(), pred_boxes=()) -> None:
    """P6 image of a map in [0, 1] grayscale with gt (green) and predicted
    (red) 1-px box outlines; boxes are (x1, y1, x2, y2) in map cells."""
    values = M.dense() if hasattr(M, "dense") else np.asarray(M)
    g = np.rint(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)
    img = np.repeat(g[..., None], 3, axis=2)
    for b in gt_boxes:
        _outline(img, b, (0, 255, 0))
    for b in pred_boxes:
        _outline(img, b, (255, 0, 0))
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())
