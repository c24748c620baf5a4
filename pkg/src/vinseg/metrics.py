"""Pixel- and instance-level evaluation.

Instance matching: every predicted object takes as its candidate the ground
truth object it overlaps most (ties -> smaller gt id). It is a true positive
when the overlap covers at least half of that ground truth object and the
object is not already claimed; claims are granted greedily in descending
overlap order (ties -> smaller gt id, then smaller pred id).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np


class AlignmentError(ValueError):
    pass


def _aligned(a: np.ndarray, b: np.ndarray, what: str = "maps") -> None:
    if a.shape != b.shape:
        raise AlignmentError(f"{what} are not aligned: {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# pixel level


@dataclass
class PixelCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "PixelCounts") -> "PixelCounts":
        return PixelCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def oa(self) -> float:
        total = self.tp + self.fp + self.fn + self.tn
        return (self.tp + self.tn) / total if total else 1.0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 1.0


def pixel_counts(pred: np.ndarray, gt: np.ndarray, ignore: Optional[np.ndarray] = None) -> PixelCounts:
    pred, gt = np.asarray(pred) > 0, np.asarray(gt) > 0
    _aligned(pred, gt)
    keep = np.ones(pred.shape, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    _aligned(keep, gt, "ignore mask and ground truth")
    p, g = pred[keep], gt[keep]
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return PixelCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def pixel_metrics(pred: np.ndarray, gt: np.ndarray, ignore: Optional[np.ndarray] = None) -> tuple[float, float]:
    """(overall accuracy, F1 of the foreground class) over non-ignored pixels.

    With nothing positive in either map F1 is reported as 1.
    """
    c = pixel_counts(pred, gt, ignore)
    return c.oa, c.f1


# --------------------------------------------------------------------------
# instance level


def dice(v: np.ndarray, g: np.ndarray) -> float:
    v, g = np.asarray(v, dtype=bool), np.asarray(g, dtype=bool)
    total = int(v.sum()) + int(g.sum())
    if total == 0:
        return 0.0
    return 2.0 * int(np.count_nonzero(v & g)) / total


@dataclass
class Overlaps:
    pred_ids: np.ndarray
    gt_ids: np.ndarray
    pred_sizes: np.ndarray
    gt_sizes: np.ndarray
    table: np.ndarray  # (n_pred, n_gt) intersection pixel counts


def overlap_table(pred: np.ndarray, gt: np.ndarray) -> Overlaps:
    pred, gt = np.asarray(pred), np.asarray(gt)
    _aligned(pred, gt)
    pred_ids, p_inv = np.unique(pred.ravel(), return_inverse=True)
    gt_ids, g_inv = np.unique(gt.ravel(), return_inverse=True)
    joint = np.bincount(p_inv * gt_ids.size + g_inv, minlength=pred_ids.size * gt_ids.size)
    joint = joint.reshape(pred_ids.size, gt_ids.size)
    p_fg, g_fg = pred_ids != 0, gt_ids != 0
    return Overlaps(
        pred_ids=pred_ids[p_fg],
        gt_ids=gt_ids[g_fg],
        pred_sizes=joint.sum(axis=1)[p_fg],
        gt_sizes=joint.sum(axis=0)[g_fg],
        table=joint[np.ix_(p_fg, g_fg)],
    )


@dataclass
class InstanceMatching:
    pred_ids: list
    gt_ids: list
    pred_match: dict  # pred id -> matched gt id or None
    pred_overlap: dict  # pred id -> overlap with its candidate gt
    gt_match: dict  # gt id -> matched pred id or None
    n_tp: int
    n_fp: int
    n_fn: int

    @property
    def counts(self) -> tuple[int, int, int]:
        return self.n_tp, self.n_fp, self.n_fn


def match_instances(pred: np.ndarray, gt: np.ndarray) -> InstanceMatching:
    ov = overlap_table(pred, gt)
    pred_ids = [int(i) for i in ov.pred_ids]
    gt_ids = [int(i) for i in ov.gt_ids]
    pred_overlap = {p: 0 for p in pred_ids}
    pairs = []
    if gt_ids:
        for i, p in enumerate(pred_ids):
            j = int(np.argmax(ov.table[i]))  # first maximum = smaller gt id
            o = int(ov.table[i, j])
            pred_overlap[p] = o
            if o > 0 and 2 * o >= ov.gt_sizes[j]:
                pairs.append((-o, gt_ids[j], p))
    pairs.sort()
    pred_match = {p: None for p in pred_ids}
    gt_match = {g: None for g in gt_ids}
    for _, g, p in pairs:
        if gt_match[g] is None:
            gt_match[g] = p
            pred_match[p] = g
    n_tp = sum(v is not None for v in gt_match.values())
    return InstanceMatching(
        pred_ids, gt_ids, pred_match, pred_overlap, gt_match,
        n_tp=n_tp, n_fp=len(pred_ids) - n_tp, n_fn=len(gt_ids) - n_tp,
    )


def prf_from_counts(n_tp: int, n_fp: int, n_fn: int) -> tuple[float, float, float]:
    if n_tp == n_fp == n_fn == 0:
        return 1.0, 1.0, 1.0
    p = n_tp / (n_tp + n_fp) if n_tp + n_fp else 0.0
    r = n_tp / (n_tp + n_fn) if n_tp + n_fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def instance_prf(matching: InstanceMatching) -> tuple[float, float, float]:
    return prf_from_counts(*matching.counts)


def _weighted_best_dice(table: np.ndarray, own_sizes: np.ndarray, other_sizes: np.ndarray) -> float:
    """sum_i w_i * Dice(object_i, its max-overlap partner); w_i = size share."""
    total = own_sizes.sum()
    if total == 0:
        return 0.0
    acc = 0.0
    for i in range(table.shape[0]):
        if table.shape[1] == 0:
            break
        j = int(np.argmax(table[i]))
        o = table[i, j]
        if o == 0:
            continue
        acc += (own_sizes[i] / total) * (2.0 * o / (own_sizes[i] + other_sizes[j]))
    return float(acc)


def instance_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Size-weighted, two-sided instance-level Dice.

    Objects without any overlapping partner contribute 0; two empty maps
    score 1 (nothing to find, nothing found).
    """
    ov = overlap_table(pred, gt)
    if ov.pred_ids.size == 0 and ov.gt_ids.size == 0:
        return 1.0
    d_pred = _weighted_best_dice(ov.table, ov.pred_sizes, ov.gt_sizes)
    d_gt = _weighted_best_dice(ov.table.T, ov.gt_sizes, ov.pred_sizes)
    return 0.5 * (d_pred + d_gt)


# --------------------------------------------------------------------------
# reports


@dataclass
class ImageScores:
    name: str
    pixel: PixelCounts
    pixel_eroded: Optional[PixelCounts]
    n_tp: int
    n_fp: int
    n_fn: int
    dice_ins: float

    def to_dict(self) -> dict:
        p, r, f1 = prf_from_counts(self.n_tp, self.n_fp, self.n_fn)
        d = {
            "name": self.name,
            "pixel_oa": self.pixel.oa,
            "pixel_f1": self.pixel.f1,
            "instance_precision": p,
            "instance_recall": r,
            "instance_f1": f1,
            "instance_dice": self.dice_ins,
            "n_tp": self.n_tp,
            "n_fp": self.n_fp,
            "n_fn": self.n_fn,
            "pixel_counts": asdict(self.pixel),
        }
        if self.pixel_eroded is not None:
            d["pixel_oa_eroded"] = self.pixel_eroded.oa
            d["pixel_f1_eroded"] = self.pixel_eroded.f1
            d["pixel_counts_eroded"] = asdict(self.pixel_eroded)
        return d


def score_image(
    name: str,
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    erode_radius: Optional[int] = 3,
) -> ImageScores:
    """Pixel scores (plain and eroded) plus instance scores for one image."""
    from .masks import erode_instances

    _aligned(np.asarray(pred_labels), np.asarray(gt_labels))
    pix = pixel_counts(pred_labels, gt_labels)
    pix_eroded = None
    if erode_radius is not None:
        _, ignore = erode_instances(gt_labels, erode_radius)
        pix_eroded = pixel_counts(pred_labels, gt_labels, ignore)
    m = match_instances(pred_labels, gt_labels)
    return ImageScores(name, pix, pix_eroded, m.n_tp, m.n_fp, m.n_fn, instance_dice(pred_labels, gt_labels))


@dataclass
class MetricsReport:
    images: list = field(default_factory=list)

    def add(self, scores: ImageScores) -> None:
        self.images.append(scores)

    def aggregate(self) -> dict:
        """Counts are summed over images; instance Dice is the per-image mean."""
        pix = sum((s.pixel for s in self.images), PixelCounts())
        n_tp = sum(s.n_tp for s in self.images)
        n_fp = sum(s.n_fp for s in self.images)
        n_fn = sum(s.n_fn for s in self.images)
        p, r, f1 = prf_from_counts(n_tp, n_fp, n_fn)
        agg = {
            "images": len(self.images),
            "pixel_oa": pix.oa,
            "pixel_f1": pix.f1,
            "instance_precision": p,
            "instance_recall": r,
            "instance_f1": f1,
            "instance_dice": float(np.mean([s.dice_ins for s in self.images])) if self.images else 0.0,
            "n_tp": n_tp,
            "n_fp": n_fp,
            "n_fn": n_fn,
        }
        eroded = [s.pixel_eroded for s in self.images if s.pixel_eroded is not None]
        if eroded and len(eroded) == len(self.images):
            pe = sum(eroded, PixelCounts())
            agg["pixel_oa_eroded"] = pe.oa
            agg["pixel_f1_eroded"] = pe.f1
        return agg

    def to_dict(self) -> dict:
        return {"per_image": [s.to_dict() for s in self.images], "aggregate": self.aggregate()}
