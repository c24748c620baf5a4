import itertools
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vinseg.masks import relabel_sequential
from vinseg.metrics import (
    AlignmentError,
    MetricsReport,
    dice,
    instance_dice,
    instance_prf,
    match_instances,
    pixel_counts,
    pixel_metrics,
    prf_from_counts,
    score_image,
)


# --------------------------------------------------------------------------
# brute-force oracles: plain dicts and loops, exact rationals


def pixel_sets(labels):
    out = {}
    h, w = labels.shape
    for y in range(h):
        for x in range(w):
            if labels[y, x]:
                out.setdefault(int(labels[y, x]), set()).add((y, x))
    return out


def best_partner(obj, others):
    """Max-overlap partner id (smallest id on ties), or None if no overlap."""
    best, best_o = None, 0
    for oid in sorted(others):
        o = len(obj & others[oid])
        if o > best_o:
            best, best_o = oid, o
    return best, best_o


def brute_counts(pred, gt):
    P, G = pixel_sets(pred), pixel_sets(gt)
    candidates = []
    for pid in sorted(P):
        gid, o = best_partner(P[pid], G)
        if gid is not None and 2 * o >= len(G[gid]):
            candidates.append((o, gid, pid))
    # grant claims by overlap, largest first; scan every candidate per round
    claimed, used = set(), set()
    remaining = list(candidates)
    while remaining:
        top = max(remaining, key=lambda c: (c[0], -c[1], -c[2]))
        remaining.remove(top)
        o, gid, pid = top
        if gid not in claimed and pid not in used:
            claimed.add(gid)
            used.add(pid)
    n_tp = len(claimed)
    return n_tp, len(P) - n_tp, len(G) - n_tp


def brute_prf(n_tp, n_fp, n_fn):
    if n_tp == n_fp == n_fn == 0:
        return Fraction(1), Fraction(1), Fraction(1)
    p = Fraction(n_tp, n_tp + n_fp) if n_tp + n_fp else Fraction(0)
    r = Fraction(n_tp, n_tp + n_fn) if n_tp + n_fn else Fraction(0)
    f = 2 * p * r / (p + r) if p + r else Fraction(0)
    return p, r, f


def brute_dice(pred, gt):
    P, G = pixel_sets(pred), pixel_sets(gt)
    if not P and not G:
        return Fraction(1)

    def side(own, other):
        total = sum(len(v) for v in own.values())
        acc = Fraction(0)
        for oid in sorted(own):
            pid, o = best_partner(own[oid], other)
            if pid is None:
                continue
            acc += Fraction(len(own[oid]), total) * Fraction(2 * o, len(own[oid]) + len(other[pid]))
        return acc

    return (side(P, G) + side(G, P)) / 2


def random_scene(rng, h=None, w=None, max_inst=6):
    h = h or int(rng.integers(1, 33))
    w = w or int(rng.integers(1, 33))
    labels = np.zeros((h, w), dtype=np.int32)
    for i in range(1, int(rng.integers(0, max_inst + 1)) + 1):
        y, x = rng.integers(0, h), rng.integers(0, w)
        labels[y:y + rng.integers(1, 10), x:x + rng.integers(1, 10)] = i
    return relabel_sequential(labels)


def jitter(rng, gt):
    """A prediction that mostly follows gt: shifted, partly dropped, extra blobs."""
    pred = np.roll(gt, (int(rng.integers(-2, 3)), int(rng.integers(-2, 3))), axis=(0, 1)).copy()
    ids = np.unique(pred[pred > 0])
    for i in ids:
        if rng.random() < 0.2:
            pred[pred == i] = 0
    if rng.random() < 0.5:
        extra = random_scene(rng, *gt.shape, max_inst=2)
        pred = np.where(extra > 0, extra + pred.max(), pred)
    return relabel_sequential(pred)


# --------------------------------------------------------------------------
# pixel metrics


def test_pixel_cases():
    gt = np.array([[1, 0], [1, 1]])
    assert pixel_metrics(gt, gt) == (1.0, 1.0)
    oa, f1 = pixel_metrics(np.zeros_like(gt), gt)
    assert f1 == 0.0 and oa == 0.25
    with pytest.raises(AlignmentError):
        pixel_metrics(np.zeros((2, 3)), gt)


def test_pixel_matches_confusion_loop():
    rng = np.random.default_rng(0)
    for _ in range(200):
        pred = rng.random((9, 7)) < 0.4
        gt = rng.random((9, 7)) < 0.4
        ignore = rng.random((9, 7)) < 0.2
        tp = fp = fn = tn = 0
        for p, g, ig in zip(pred.ravel(), gt.ravel(), ignore.ravel()):
            if ig:
                continue
            tp += p and g
            fp += p and not g
            fn += g and not p
            tn += not p and not g
        c = pixel_counts(pred, gt, ignore)
        assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
        oa, f1 = pixel_metrics(pred, gt, ignore)
        assert oa == (tp + tn) / (tp + fp + fn + tn)
        assert f1 == (2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0)


# --------------------------------------------------------------------------
# matching and P/R/F1


def test_half_coverage_is_true_positive():
    gt = np.zeros((4, 5), dtype=np.int32)
    gt[1:3, :] = 1  # 10 px
    pred = np.zeros_like(gt)
    pred[1:3, :2] = 1
    pred[1, 2] = 1  # 5 px inside the object
    m = match_instances(pred, gt)
    assert m.counts == (1, 0, 0)
    pred[1, 2] = 0  # 4 px
    assert match_instances(pred, gt).counts == (0, 1, 1)


def test_prediction_without_overlap_is_false_positive():
    gt = np.zeros((6, 6), dtype=np.int32)
    gt[0:2, 0:2] = 1
    pred = np.zeros_like(gt)
    pred[4:6, 4:6] = 1
    assert match_instances(pred, gt).counts == (0, 1, 1)


def test_one_to_one_claims():
    gt = np.zeros((1, 10), dtype=np.int32)
    gt[0, :4] = 1
    pred = np.zeros_like(gt)
    pred[0, 0:2] = 1
    pred[0, 2:4] = 2  # both halves qualify; only one may claim
    m = match_instances(pred, gt)
    assert m.counts == (1, 1, 0)
    assert m.gt_match[1] == 1  # equal overlaps: smaller pred id wins


def test_max_overlap_tie_goes_to_smaller_gt():
    gt = np.array([[1, 1, 2, 2]])
    pred = np.array([[1, 1, 1, 1]])
    m = match_instances(pred, gt)
    assert m.pred_match[1] == 1 and m.counts == (1, 0, 1)


def test_prf_cases():
    assert prf_from_counts(1, 0, 1) == (1.0, 0.5, pytest.approx(2 / 3))
    assert prf_from_counts(5, 0, 0) == (1.0, 1.0, 1.0)
    assert prf_from_counts(0, 0, 0) == (1.0, 1.0, 1.0)
    assert prf_from_counts(0, 3, 0) == (0.0, 0.0, 0.0)
    assert prf_from_counts(0, 0, 2) == (0.0, 0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(tp=st.integers(0, 50), fp=st.integers(0, 50), fn=st.integers(0, 50))
def test_prf_formula_oracle(tp, fp, fn):
    p, r, f = prf_from_counts(tp, fp, fn)
    bp, br, bf = brute_prf(tp, fp, fn)
    assert (p, r) == (float(bp), float(br))
    assert f == pytest.approx(float(bf), abs=1e-15)
    if f:
        assert f == pytest.approx(2 * p * r / (p + r))
    # F1 = 1 iff no errors and something was found (counts not all zero)
    if tp + fp + fn:
        assert (f == 1.0) == (fp == 0 and fn == 0 and tp > 0)


def test_instance_metrics_match_brute_force_500():
    rng = np.random.default_rng(7)
    for _ in range(500):
        gt = random_scene(rng)
        pred = jitter(rng, gt) if rng.random() < 0.7 else random_scene(rng, *gt.shape)
        m = match_instances(pred, gt)
        assert m.counts == brute_counts(pred, gt)
        p, r, f = instance_prf(m)
        bp, br, bf = brute_prf(*m.counts)
        assert (p, r) == (float(bp), float(br)) and abs(f - float(bf)) <= 1e-15
        assert abs(instance_dice(pred, gt) - float(brute_dice(pred, gt))) <= 1e-12
        n_pred, n_gt = len(np.unique(pred[pred > 0])), len(np.unique(gt[gt > 0]))
        assert m.n_tp + m.n_fp == n_pred and m.n_tp + m.n_fn == n_gt
        for pid, o in m.pred_overlap.items():
            assert o <= min((pred == pid).sum(), max(((gt == g).sum() for g in m.gt_ids), default=0))


# --------------------------------------------------------------------------
# Dice


def test_dice_cases():
    a = np.zeros((4, 4), dtype=bool)
    a[:2, :2] = True
    assert dice(a, a) == 1.0
    b = np.zeros_like(a)
    b[2:, 2:] = True
    assert dice(a, b) == 0.0
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 0.0
    g = np.zeros((1, 8), dtype=bool)
    g[0, :] = True
    v = np.zeros_like(g)
    v[0, :4] = True
    assert dice(v, g) == pytest.approx(2 / 3)


def test_instance_dice_cases():
    gt = random_scene(np.random.default_rng(3), 20, 20)
    assert instance_dice(gt, gt) == 1.0
    assert instance_dice(np.zeros_like(gt), gt) == 0.0
    g = np.zeros((1, 8), dtype=np.int32)
    g[0, :] = 1
    v = np.array([[1, 1, 1, 1, 2, 2, 2, 2]], dtype=np.int32)
    assert abs(instance_dice(v, g) - 2 / 3) < 1e-9
    assert brute_dice(v, g) == Fraction(2, 3)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_dice_symmetry_and_permutation(seed):
    rng = np.random.default_rng(seed)
    gt = random_scene(rng, 16, 16)
    pred = jitter(rng, gt)
    d = instance_dice(pred, gt)
    assert abs(d - instance_dice(gt, pred)) < 1e-12
    # permute ids on the prediction side; with unique max-overlap partners the
    # score and counts must not move
    ids = np.unique(pred[pred > 0])
    perm = np.zeros(pred.max() + 1, dtype=np.int32)
    perm[ids] = rng.permutation(ids)
    shuffled = perm[pred]
    if _unique_argmax(pred, gt) and _unique_argmax(gt, pred):
        assert abs(instance_dice(shuffled, gt) - d) < 1e-12
        assert match_instances(shuffled, gt).counts == match_instances(pred, gt).counts
    assert 0.0 <= d <= 1.0


def _unique_argmax(a, b):
    A, B = pixel_sets(a), pixel_sets(b)
    for obj in A.values():
        overlaps = sorted((len(obj & o) for o in B.values()), reverse=True)
        if len(overlaps) > 1 and overlaps[0] > 0 and overlaps[0] == overlaps[1]:
            return False
    return True


def test_removing_true_positive_never_raises_recall():
    rng = np.random.default_rng(11)
    for _ in range(100):
        gt = random_scene(rng, 20, 20)
        pred = jitter(rng, gt)
        m = match_instances(pred, gt)
        matched = [p for p, g in m.pred_match.items() if g is not None]
        if not matched:
            continue
        reduced = np.where(pred == matched[0], 0, pred)
        assert instance_prf(match_instances(reduced, gt))[1] <= instance_prf(m)[1]


# --------------------------------------------------------------------------
# reports


def test_report_json_and_ranges():
    rng = np.random.default_rng(5)
    report = MetricsReport()
    for i in range(4):
        gt = random_scene(rng, 24, 24)
        report.add(score_image(f"img{i}", jitter(rng, gt), gt))
    doc = json.loads(json.dumps(report.to_dict()))
    assert len(doc["per_image"]) == 4
    agg = doc["aggregate"]
    for key in ("pixel_oa", "pixel_f1", "pixel_oa_eroded", "pixel_f1_eroded",
                "instance_precision", "instance_recall", "instance_f1", "instance_dice"):
        assert 0.0 <= agg[key] <= 1.0
    assert agg["n_tp"] == sum(im["n_tp"] for im in doc["per_image"])
    p, r, f = agg["instance_precision"], agg["instance_recall"], agg["instance_f1"]
    assert f == pytest.approx(2 * p * r / (p + r) if p + r else 0.0)


def test_perfect_report():
    gt = random_scene(np.random.default_rng(2), 20, 20)
    s = score_image("x", gt, gt).to_dict()
    assert s["instance_f1"] == 1.0 and s["pixel_f1"] == 1.0 and s["instance_dice"] == 1.0


def test_eroded_counts_ignore_band():
    gt = np.zeros((20, 20), dtype=np.int32)
    gt[5:15, 5:15] = 1
    pred = np.zeros_like(gt)
    pred[6:14, 6:14] = 1  # misses only a 1-px rim, which lies inside the ignore band
    s = score_image("rim", pred, gt, erode_radius=3)
    assert s.pixel.f1 < 1.0 and s.pixel_eroded.f1 == 1.0


def test_brute_force_matcher_is_exhaustive_on_tiny_cases():
    # cross-check the greedy oracle against full enumeration of one-to-one
    # assignments restricted to qualifying candidate pairs
    rng = np.random.default_rng(9)
    for _ in range(100):
        gt = random_scene(rng, 8, 8, max_inst=4)
        pred = jitter(rng, gt)
        P, G = pixel_sets(pred), pixel_sets(gt)
        cands = {}
        for pid in P:
            gid, o = best_partner(P[pid], G)
            if gid is not None and 2 * o >= len(G[gid]):
                cands[pid] = gid
        # each pred has at most one candidate, so the best assignment covers
        # every distinct candidate gt exactly once
        best = max((len(set(cands[p] for p in sub)) for r in range(len(cands) + 1)
                    for sub in itertools.combinations(cands, r)), default=0)
        assert brute_counts(pred, gt)[0] == best == match_instances(pred, gt).n_tp
