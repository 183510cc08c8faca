import numpy as np
import pytest

from crackfuse.errors import ConfigError, DomainError, ShapeError, UsageError
from crackfuse.metrics import (MetricsReport, aggregate, cl_dice_score,
                               compute_metrics, confusion, evaluate_pair)

SIX = ("dice", "iou", "accuracy", "precision", "specificity", "recall")


def random_pair(seed, h=8, w=8):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0.0, 1.0, (h, w)).astype(np.float32)
    gt = (rng.uniform(0.0, 1.0, (h, w)) < 0.3).astype(np.float32)
    return pred, gt


def loop_confusion(pred, gt, threshold):
    tp = fp = tn = fn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p = pred[i, j] >= threshold
            g = gt[i, j] == 1.0
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif not p and g:
                fn += 1
            else:
                tn += 1
    return tp, fp, tn, fn


def loop_metrics(tp, fp, tn, fn):
    def div(num, den, both_empty):
        if den == 0:
            return 1.0 if both_empty else 0.0
        return num / den
    return {
        "dice": div(2 * tp, 2 * tp + fp + fn, fp + fn == 0),
        "iou": div(tp, tp + fp + fn, fp + fn == 0),
        "accuracy": div(tp + tn, tp + fp + tn + fn, True),
        "precision": div(tp, tp + fp, fn == 0),
        "specificity": div(tn, tn + fp, fn == 0),
        "recall": div(tp, tp + fn, fp == 0),
    }


def set_metrics(pred, gt, threshold):
    """Same metrics from pixel index sets instead of counts."""
    idx = [(i, j) for i in range(pred.shape[0]) for j in range(pred.shape[1])]
    P = {ij for ij in idx if pred[ij] >= threshold}
    G = {ij for ij in idx if gt[ij] == 1.0}
    U = set(idx)
    tp, fp = len(P & G), len(P - G)
    fn, tn = len(G - P), len(U - P - G)
    return loop_metrics(tp, fp, tn, fn)


# independent skeleton route: numpy min/max filters with inf padding
def _minf(x):
    p = np.pad(x, 1, constant_values=np.inf)
    h, w = x.shape
    return np.min([p[i:i + h, j:j + w] for i in range(3) for j in range(3)],
                  axis=0)


def _maxf(x):
    p = np.pad(x, 1, constant_values=-np.inf)
    h, w = x.shape
    return np.max([p[i:i + h, j:j + w] for i in range(3) for j in range(3)],
                  axis=0)


def skeleton_oracle(x, iterations):
    img = x.astype(np.float64)
    skel = np.clip(img - _maxf(_minf(img)), 0.0, None)
    for _ in range(iterations):
        img = _minf(img)
        delta = np.clip(img - _maxf(_minf(img)), 0.0, None)
        skel = skel + delta * (1.0 - skel)
    return np.clip(skel, 0.0, 1.0)


def cl_dice_oracle(pred_bin, gt, iterations=10, eps=1e-6):
    sp = skeleton_oracle(pred_bin, iterations)
    sl = skeleton_oracle(gt, iterations)
    t_prec = ((sp * gt).sum() + eps) / (sp.sum() + eps)
    t_sens = ((sl * pred_bin).sum() + eps) / (sl.sum() + eps)
    return 2.0 * t_prec * t_sens / (t_prec + t_sens + eps)


# ---------------------------------------------------------------- confusion

def test_confusion_matches_pixel_loop_on_100_pairs():
    for seed in range(100):
        pred, gt = random_pair(seed)
        assert confusion(pred, gt, 0.5) == loop_confusion(pred, gt, 0.5)


def test_confusion_trivial_cases():
    _, gt = random_pair(0)
    tp, fp, tn, fn = confusion(gt, gt, 0.5)
    assert fp == 0 and fn == 0
    k = int(gt.sum())
    tp, fp, tn, fn = confusion(np.zeros_like(gt), gt, 0.5)
    assert (tp, fn) == (0, k)


def test_confusion_validation():
    pred, gt = random_pair(1)
    with pytest.raises(DomainError, match="binary"):
        confusion(pred, pred, 0.5)
    with pytest.raises(ShapeError):
        confusion(pred[:4], gt, 0.5)
    with pytest.raises(DomainError, match=r"\[0, 1\]"):
        confusion(pred + 2.0, gt, 0.5)
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ConfigError):
            confusion(pred, gt, bad)


# ------------------------------------------------------------------ metrics

def test_metrics_match_pixel_loop_on_100_pairs():
    for seed in range(100):
        pred, gt = random_pair(seed)
        conf = loop_confusion(pred, gt, 0.5)
        report = compute_metrics(conf, pred, gt)
        expected = loop_metrics(*conf)
        for name in SIX:
            assert getattr(report, name) == expected[name], (seed, name)


def test_metrics_match_set_based_implementation():
    for seed in range(100):
        pred, gt = random_pair(seed)
        report = evaluate_pair(pred, gt)
        expected = set_metrics(pred, gt, 0.5)
        for name in SIX:
            assert getattr(report, name) == expected[name], (seed, name)


def test_dice_iou_identity_within_1e12():
    for seed in range(100):
        pred, gt = random_pair(seed)
        r = evaluate_pair(pred, gt)
        assert abs(r.dice - 2.0 * r.iou / (1.0 + r.iou)) < 1e-12


def test_hand_evaluated_counts():
    # 2 hits, 1 false alarm, 1 miss on an 8x8 image
    gt = np.zeros((8, 8), dtype=np.float32)
    gt[2, 2] = gt[2, 3] = gt[2, 4] = 1.0
    pred = np.zeros((8, 8), dtype=np.float32)
    pred[2, 2] = pred[2, 3] = pred[5, 5] = 1.0
    conf = confusion(pred, gt)
    assert conf == (2, 1, 60, 1)
    r = compute_metrics(conf, pred, gt)
    assert r.dice == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert r.iou == pytest.approx(0.5, abs=1e-12)
    assert r.precision == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert r.recall == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_perfect_prediction_scores_one():
    _, gt = random_pair(3)
    r = evaluate_pair(gt, gt)
    for name in SIX:
        assert getattr(r, name) == 1.0
    assert r.cl_dice > 1.0 - 1e-5


def test_degenerate_denominators():
    empty = np.zeros((4, 4), dtype=np.float32)
    r = evaluate_pair(empty, empty)
    for name in SIX:
        assert getattr(r, name) == 1.0

    ones = np.ones((4, 4), dtype=np.float32)
    r = evaluate_pair(empty, ones)      # gt full, pred empty
    assert r.recall == 0.0 and r.precision == 0.0 and r.dice == 0.0
    r = evaluate_pair(ones, ones)       # no negatives anywhere
    assert r.specificity == 1.0 and r.recall == 1.0
    r = evaluate_pair(ones, empty)      # pred full, gt empty
    assert r.precision == 0.0 and r.specificity == 0.0
    assert r.recall == 0.0              # fp > 0, so not vacuously perfect


def test_precision_recall_swap_symmetry():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        a = (rng.uniform(0, 1, (8, 8)) < 0.4).astype(np.float32)
        b = (rng.uniform(0, 1, (8, 8)) < 0.4).astype(np.float32)
        assert evaluate_pair(a, b).precision == evaluate_pair(b, a).recall


def test_recall_monotone_in_threshold():
    for seed in range(20):
        pred, gt = random_pair(seed, 12, 12)
        recalls = [evaluate_pair(pred, gt, threshold=t).recall
                   for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert all(a >= b for a, b in zip(recalls, recalls[1:]))


def test_negative_counts_rejected():
    pred, gt = random_pair(5)
    with pytest.raises(UsageError):
        compute_metrics((-1, 0, 0, 0), pred, gt)


# ------------------------------------------------------------------ cl_dice

def test_cl_dice_matches_independent_oracle():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        gt = np.zeros((16, 16), dtype=np.float32)
        r0 = rng.integers(2, 12)
        gt[r0:r0 + 3, 2:14] = 1.0
        pred = np.zeros((16, 16), dtype=np.float32)
        r1 = rng.integers(2, 12)
        pred[r1:r1 + 3, 2:14] = 1.0
        got = cl_dice_score(pred, gt)
        want = cl_dice_oracle(pred, gt)
        assert got == pytest.approx(want, abs=1e-6), seed


def test_cl_dice_orderings():
    gt = np.zeros((16, 16), dtype=np.float32)
    gt[7:10, 2:14] = 1.0
    same = cl_dice_score(gt, gt)
    half = np.zeros_like(gt)
    half[7:10, 2:8] = 1.0          # correct ribbon, half the length
    near = cl_dice_score(half, gt)
    disjoint = np.zeros_like(gt)
    disjoint[0, :] = 1.0
    far = cl_dice_score(disjoint, gt)
    assert same > 1.0 - 1e-5
    assert far < 0.2 < near < same


def test_cl_dice_binarizes_pred_at_threshold():
    gt = np.zeros((8, 8), dtype=np.float32)
    gt[4, 1:7] = 1.0
    soft = gt * 0.6
    assert cl_dice_score(soft, gt, threshold=0.5) > 1.0 - 1e-5
    assert cl_dice_score(soft, gt, threshold=0.7) < 0.1


# ---------------------------------------------------------------- aggregate

def test_aggregate_single_image_modes_agree():
    pred, gt = random_pair(11)
    r = evaluate_pair(pred, gt)
    micro = aggregate([r], "micro")
    macro = aggregate([r], "macro")
    for name in SIX + ("cl_dice",):
        assert getattr(micro, name) == pytest.approx(getattr(r, name), abs=1e-12)
        assert getattr(macro, name) == pytest.approx(getattr(r, name), abs=1e-12)
    assert micro.mode == "micro" and macro.mode == "macro"
    assert (micro.tp, micro.fp, micro.tn, micro.fn) == (r.tp, r.fp, r.tn, r.fn)


def test_aggregate_identical_images_macro_equals_each():
    pred, gt = random_pair(13)
    r = evaluate_pair(pred, gt)
    macro = aggregate([r, r], "macro")
    for name in SIX:
        assert getattr(macro, name) == pytest.approx(getattr(r, name), abs=1e-12)
    assert macro.tp == 2 * r.tp


def test_aggregate_micro_differs_from_macro_hand_case():
    # image A: tiny and perfect; image B: large and poor. macro averages
    # the per-image scores; micro pools counts so B dominates.
    a_gt = np.ones((2, 2), dtype=np.float32)
    a = evaluate_pair(a_gt, a_gt)
    b_gt = np.zeros((8, 8), dtype=np.float32)
    b_gt[0, :4] = 1.0
    b_pred = np.zeros((8, 8), dtype=np.float32)
    b_pred[7, :4] = 1.0
    b = evaluate_pair(b_pred, b_gt)
    assert b.dice == 0.0

    micro = aggregate([a, b], "micro")
    macro = aggregate([a, b], "macro")
    # hand evaluation: pooled counts tp=4, fp=4, fn=4 -> dice 8/16
    assert micro.dice == pytest.approx(0.5, abs=1e-12)
    assert macro.dice == pytest.approx(0.5 * (1.0 + 0.0), abs=1e-12)
    assert micro.precision == pytest.approx(0.5, abs=1e-12)
    assert macro.accuracy == pytest.approx((1.0 + 56 / 64) / 2, abs=1e-12)
    assert micro.accuracy == pytest.approx((4 + 56) / 68, abs=1e-12)
    assert micro.accuracy != macro.accuracy


def test_aggregate_validation():
    pred, gt = random_pair(17)
    r = evaluate_pair(pred, gt)
    with pytest.raises(UsageError):
        aggregate([], "micro")
    with pytest.raises(ConfigError):
        aggregate([r], "median")
    other = evaluate_pair(pred, gt, threshold=0.4)
    with pytest.raises(UsageError, match="threshold"):
        aggregate([r, other])


def test_report_json_is_flat_and_complete():
    pred, gt = random_pair(19)
    r = evaluate_pair(pred, gt)
    blob = r.to_json()
    assert set(blob) == {"tp", "fp", "tn", "fn", "dice", "iou", "accuracy",
                         "precision", "specificity", "recall", "cl_dice",
                         "mode", "threshold"}
    assert blob["mode"] == "single" and blob["threshold"] == 0.5
    assert all(not isinstance(v, np.generic) for v in blob.values())
