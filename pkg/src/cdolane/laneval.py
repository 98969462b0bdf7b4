"""Lane detection metrics.

* CULane style: lanes are drawn as wide lines, matched by mask IoU, and
  summarized as precision / recall / F1.
* TuSimple style: per-row point accuracy, plus the false-positive and
  false-negative lane ratios ``F_pred / N_pred`` and ``M_pred / N_gt``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .maskops import Polyline, rasterize_polyline
from .numerics import ParameterError


_F1_ENTRY = {
    "type": "object",
    "required": ["tp", "fp", "fn", "precision", "recall", "f1"],
    "properties": {
        **{k: {"type": "integer", "minimum": 0} for k in ("tp", "fp", "fn")},
        **{k: {"type": "number", "minimum": 0, "maximum": 1} for k in ("precision", "recall", "f1")},
    },
}

# Schema of the report returned by ``evaluate_scenes`` (the CLI adds
# ``kind``, ``version``, ``source`` and ``checkpoint`` on top).
REPORT_SCHEMA = {
    "type": "object",
    "required": ["scenes", "f1", "tusimple", "settings"],
    "properties": {
        "scenes": {"type": "integer", "minimum": 0},
        "f1": {"type": "object", "additionalProperties": _F1_ENTRY},
        "tusimple": {
            "type": "object",
            "required": ["accuracy", "fp_ratio", "fn_ratio", "counts"],
            "properties": {
                **{k: {"type": "number", "minimum": 0, "maximum": 1} for k in ("accuracy", "fp_ratio", "fn_ratio")},
                "counts": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
            },
        },
        "settings": {
            "type": "object",
            "required": ["iou_width", "point_threshold", "rows", "iou_thresholds", "height", "width"],
        },
    },
}


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    ious: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    pairs: list = field(default_factory=list)  # matched (pred_index, gt_index)


@dataclass
class TusimpleCounts:
    correct_points: int = 0  # C_clip
    requested_points: int = 0  # S_clip
    false_preds: int = 0  # F_pred
    n_pred: int = 0  # N_pred
    missed_gts: int = 0  # M_pred
    n_gt: int = 0  # N_gt

    def __iadd__(self, other: "TusimpleCounts"):
        for k in vars(self):
            setattr(self, k, getattr(self, k) + getattr(other, k))
        return self


def default_iou_width(image_width: int) -> int:
    """30-pixel CULane line width rescaled from an 800-pixel-wide frame."""
    return max(1, round(30 * image_width / 800))


def default_point_threshold(image_width: int) -> float:
    """TuSimple's 20-pixel tolerance rescaled from 1280 pixels, floored at 2."""
    return max(2.0, 20.0 * image_width / 1280)


def lane_iou(pred: Polyline, gt: Polyline, width: int | None, h: int, w: int) -> float:
    """IoU of two lanes rasterized ``width`` pixels wide; 0 if both are empty."""
    width = default_iou_width(w) if width is None else width
    if width < 1:
        raise ParameterError(f"width must be >= 1, got {width}")
    a = rasterize_polyline(pred.with_thickness(width), h, w).astype(bool)
    b = rasterize_polyline(gt.with_thickness(width), h, w).astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def iou_table(preds, gts, width, h, w) -> np.ndarray:
    table = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            table[i, j] = lane_iou(p, g, width, h, w)
    return table


def match_and_count(preds, gts, iou_threshold: float = 0.5, width=None, h: int = 64, w: int = 64,
                    ious: np.ndarray | None = None) -> MatchResult:
    """Greedy one-to-one matching by descending IoU.

    Only pairs with IoU >= ``iou_threshold`` may match. Ties go to the lower
    prediction index, then the lower ground-truth index.
    """
    if not 0 < iou_threshold <= 1:
        raise ParameterError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    table = iou_table(preds, gts, width, h, w) if ious is None else np.asarray(ious, dtype=np.float64)
    candidates = sorted(
        ((table[i, j], i, j) for i in range(table.shape[0]) for j in range(table.shape[1]) if table[i, j] >= iou_threshold),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in candidates:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=table.shape[0] - tp, fn=table.shape[1] - tp, ious=table, pairs=pairs)


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def f1_from_counts(m: MatchResult) -> dict:
    precision = _ratio(m.tp, m.tp + m.fp)
    recall = _ratio(m.tp, m.tp + m.fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1}


def fp_fn_ratios(counts: TusimpleCounts) -> dict:
    return {
        "fp_ratio": _ratio(counts.false_preds, counts.n_pred),
        "fn_ratio": _ratio(counts.missed_gts, counts.n_gt),
    }


def tusimple_counts(preds, gts, point_threshold: float, rows, iou_threshold: float = 0.5, width=None,
                    h: int = 64, w: int = 64) -> TusimpleCounts:
    """Point and lane counts for one frame.

    Lanes are first paired by IoU matching; a requested row of a
    ground-truth lane is correct when its matched prediction exists at that
    row and lies strictly less than ``point_threshold`` columns away.
    """
    if not point_threshold > 0:
        raise ParameterError(f"point_threshold must be > 0, got {point_threshold}")
    rows = list(rows)
    if any(r < 0 or r >= h for r in rows):
        raise ParameterError(f"requested rows must lie in [0, {h})")
    match = match_and_count(preds, gts, iou_threshold, width, h, w)
    partner = {j: i for i, j in match.pairs}
    counts = TusimpleCounts(false_preds=match.fp, n_pred=len(preds), missed_gts=match.fn, n_gt=len(gts))
    for j, gt in enumerate(gts):
        for r in rows:
            gc = gt.col_at(r)
            if gc is None:
                continue
            counts.requested_points += 1
            if j in partner:
                pc = preds[partner[j]].col_at(r)
                if pc is not None and abs(pc - gc) < point_threshold:
                    counts.correct_points += 1
    return counts


def tusimple_metrics(preds, gts, point_threshold: float, rows, iou_threshold: float = 0.5, width=None,
                     h: int = 64, w: int = 64) -> dict:
    counts = tusimple_counts(preds, gts, point_threshold, rows, iou_threshold, width, h, w)
    return {"accuracy": _ratio(counts.correct_points, counts.requested_points), **fp_fn_ratios(counts)}


def evaluate_scenes(preds_per_scene, gts_per_scene, h: int, w: int, iou_thresholds=(0.5,), width=None,
                    point_threshold=None, rows=None) -> dict:
    """Aggregate metrics over many frames (counts are summed, then ratios taken)."""
    width = default_iou_width(w) if width is None else width
    point_threshold = default_point_threshold(w) if point_threshold is None else point_threshold
    rows = list(range(0, h, 4)) if rows is None else list(rows)
    f1 = {}
    for thr in iou_thresholds:
        total = MatchResult(0, 0, 0)
        for preds, gts in zip(preds_per_scene, gts_per_scene, strict=True):
            m = match_and_count(preds, gts, thr, width, h, w)
            total.tp += m.tp
            total.fp += m.fp
            total.fn += m.fn
        f1[f"{thr:g}"] = {"tp": total.tp, "fp": total.fp, "fn": total.fn, **f1_from_counts(total)}
    counts = TusimpleCounts()
    for preds, gts in zip(preds_per_scene, gts_per_scene):
        counts += tusimple_counts(preds, gts, point_threshold, rows, 0.5, width, h, w)
    return {
        "scenes": len(gts_per_scene),
        "f1": f1,
        "tusimple": {
            "accuracy": _ratio(counts.correct_points, counts.requested_points),
            **fp_fn_ratios(counts),
            "counts": dict(vars(counts)),
        },
        "settings": {"iou_width": width, "point_threshold": point_threshold, "rows": rows,
                     "iou_thresholds": list(iou_thresholds), "height": h, "width": w},
    }
