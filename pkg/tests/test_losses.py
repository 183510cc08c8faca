import numpy as np
import pytest

from crackfuse.errors import ConfigError, DomainError, ShapeError
from crackfuse.losses import (LossWeights, ce_loss, composite_loss, dice_loss,
                              soft_skeleton, topo_precision, topo_sensitivity,
                              topology_loss)
from crackfuse.tensor import Tensor

from conftest import check_grads
from thinning_oracle import band_mask, cheb_dilate, interior_window, zhang_suen_thin


def grid_mask(rng, h=8, w=8, lo=0.05, hi=0.95):
    """Soft mask with all-distinct values on a coarse grid, so pooling
    selections stay stable under finite-difference perturbations."""
    vals = rng.permutation(np.linspace(lo, hi, h * w)).reshape(1, h, w)
    return Tensor(vals, requires_grad=True)


# ------------------------------------------------------------ soft skeleton

def test_empty_mask_gives_empty_skeleton():
    out = soft_skeleton(Tensor(np.zeros((1, 10, 10))), iterations=3)
    assert np.array_equal(out.data, np.zeros((1, 10, 10)))


@pytest.mark.parametrize("iterations", [1, 3, 10])
def test_one_px_line_is_its_own_skeleton(iterations):
    line = np.zeros((1, 9, 12), dtype=np.float32)
    line[0, 4, 2:10] = 1.0
    out = soft_skeleton(Tensor(line), iterations=iterations)
    assert np.array_equal(out.data, line)
    vline = np.zeros((1, 12, 9), dtype=np.float32)
    vline[0, 2:10, 4] = 1.0
    out = soft_skeleton(Tensor(vline), iterations=iterations)
    assert np.array_equal(out.data, vline)


def test_axis_aligned_ribbon_reduces_to_medial_row():
    m = np.zeros((1, 16, 24), dtype=np.float32)
    m[0, 5:10, 3:21] = 1.0   # 5 rows wide
    sk = soft_skeleton(Tensor(m), iterations=4).data[0]
    ys, xs = np.where(sk > 0.5)
    assert set(ys) == {7}                      # exactly the medial row
    assert xs.min() >= 5 and xs.max() <= 18    # shortened at blunt ends


def test_rotated_bands_within_one_px_of_thinning_oracle():
    rng = np.random.default_rng(0)
    for _ in range(6):
        theta = rng.uniform(0, np.pi)
        band = band_mask((48, 48), theta)
        sk = soft_skeleton(Tensor(band[None]), iterations=3).data[0] > 0.5
        axis = zhang_suen_thin(band > 0.5)
        near_axis = cheb_dilate(axis)
        interior = interior_window(band.shape)
        assert not (sk & ~near_axis & interior).any()
        # and the oracle axis itself is covered by the soft skeleton
        assert (axis & interior & ~cheb_dilate(sk)).sum() == 0


def test_skeleton_support_monotone_in_iterations():
    rng = np.random.default_rng(1)
    blob = (rng.random((1, 24, 24)) < 0.4).astype(np.float32)
    prev = None
    for it in (1, 2, 4, 8):
        sk = soft_skeleton(Tensor(blob), iterations=it).data
        if prev is not None:
            assert np.all(sk >= prev - 1e-9)   # accumulation never removes mass
        prev = sk


def test_skeleton_stays_in_unit_range_on_soft_input():
    rng = np.random.default_rng(2)
    soft = Tensor(rng.random((1, 16, 16)).astype(np.float32))
    sk = soft_skeleton(soft, iterations=5).data
    assert sk.min() >= 0.0 and sk.max() <= 1.0


def test_skeleton_validates_input():
    with pytest.raises(DomainError):
        soft_skeleton(Tensor(np.full((1, 4, 4), 1.5)), iterations=1)
    with pytest.raises(DomainError):
        soft_skeleton(Tensor(np.full((1, 4, 4), -0.5)), iterations=1)
    with pytest.raises(ConfigError):
        soft_skeleton(Tensor(np.zeros((1, 4, 4))), iterations=0)


# ------------------------------------------------- precision / sensitivity

def test_topo_terms_subset_and_disjoint():
    skel = np.zeros((1, 8, 8))
    skel[0, 4, 2:6] = 1.0
    vol = np.zeros((1, 8, 8))
    vol[0, 3:6, 1:7] = 1.0
    p = topo_precision(Tensor(skel), Tensor(vol)).item()
    assert abs(p - 1.0) < 1e-6

    far = np.zeros((1, 8, 8))
    far[0, 0, 0:4] = 1.0
    q = topo_precision(Tensor(skel), Tensor(far)).item()
    assert q == pytest.approx(1e-6 / (4 + 1e-6), rel=1e-6)


def test_topo_terms_match_double_loop_oracle():
    rng = np.random.default_rng(3)
    a = rng.random((1, 6, 7))
    b = rng.random((1, 6, 7))
    inter = 0.0
    mass = 0.0
    for i in range(6):
        for j in range(7):
            inter += a[0, i, j] * b[0, i, j]
            mass += a[0, i, j]
    eps = 1e-6
    want = (inter + eps) / (mass + eps)
    got = topo_precision(Tensor(a), Tensor(b), eps).item()
    assert abs(got - want) < 1e-12
    got_s = topo_sensitivity(Tensor(a), Tensor(b), eps).item()
    assert abs(got_s - want) < 1e-12


def test_topo_terms_shape_mismatch():
    with pytest.raises(ShapeError):
        topo_precision(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 4, 5))))


# ------------------------------------------------------------ topology loss

def plus_sign():
    m = np.zeros((1, 9, 9), dtype=np.float32)
    m[0, 4, 1:8] = 1.0
    m[0, 1:8, 4] = 1.0
    return m


def test_topology_loss_perfect_disjoint_partial_ordering():
    label = plus_sign()
    bar = np.zeros_like(label)
    bar[0, 4, 1:8] = 1.0
    blob = np.zeros_like(label)
    blob[0, 6:9, 6:9] = 1.0
    blob[0, 6:8, 4] = 0.0   # keep disjoint from the plus sign
    assert (blob * label).sum() == 0

    perfect = topology_loss(Tensor(label), Tensor(label), iterations=3).item()
    partial = topology_loss(Tensor(label), Tensor(bar), iterations=3).item()
    disjoint = topology_loss(Tensor(label), Tensor(blob), iterations=3).item()
    assert perfect <= 2e-6
    assert disjoint > 0.99
    assert perfect < partial < disjoint


def test_topology_loss_symmetric_under_argument_swap():
    # swapping label and prediction swaps precision and sensitivity, and
    # their harmonic mean is symmetric
    rng = np.random.default_rng(4)
    a = Tensor(rng.random((1, 12, 12)).astype(np.float32))
    b = Tensor(rng.random((1, 12, 12)).astype(np.float32))
    ab = topology_loss(a, b, iterations=3).item()
    ba = topology_loss(b, a, iterations=3).item()
    assert abs(ab - ba) < 1e-6


def test_topology_loss_in_unit_interval():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a = Tensor(rng.random((1, 10, 10)).astype(np.float32))
        b = Tensor(rng.random((1, 10, 10)).astype(np.float32))
        v = topology_loss(a, b, iterations=2).item()
        assert 0.0 <= v <= 1.0


def test_fewer_gaps_strictly_decrease_topology_loss_at_equal_dice():
    label = np.zeros((1, 11, 20), dtype=np.float32)
    label[0, 3:8, 2:18] = 1.0   # 5-px ribbon

    def pred(gap_cols):
        p = np.zeros_like(label)
        p[0, 5, 2:18] = 1.0
        for c in gap_cols:
            p[0, 5, c] = 0.0
            p[0, 3, c] = 1.0   # compensate inside the label, off the axis
        return p

    preds = [pred([]), pred([10]), pred([5, 10, 15])]
    dices = [dice_loss(Tensor(label), Tensor(p)).item() for p in preds]
    assert max(dices) - min(dices) < 1e-12
    losses = [topology_loss(Tensor(label), Tensor(p), iterations=4).item()
              for p in preds]
    assert losses[0] < losses[1] < losses[2]


# -------------------------------------------------------------- dice and ce

def test_dice_loss_perfect_and_oracle():
    m = plus_sign()
    assert dice_loss(Tensor(m), Tensor(m)).item() < 1e-6

    rng = np.random.default_rng(6)
    a = rng.random((1, 8, 8))
    b = rng.random((1, 8, 8))
    inter = sum(a[0, i, j] * b[0, i, j] for i in range(8) for j in range(8))
    eps = 1e-6
    want = 1 - (2 * inter + eps) / (a.sum() + b.sum() + eps)
    assert abs(dice_loss(Tensor(a), Tensor(b), eps).item() - want) < 1e-12


def test_ce_loss_uniform_half_is_ln2():
    label = Tensor((np.arange(16).reshape(1, 4, 4) % 2).astype(np.float64))
    pred = Tensor(np.full((1, 4, 4), 0.5))
    assert abs(ce_loss(label, pred).item() - np.log(2)) < 1e-12


def test_ce_loss_matches_loop_oracle_and_clamps():
    rng = np.random.default_rng(7)
    label = (rng.random((1, 5, 5)) > 0.5).astype(np.float64)
    pred = rng.random((1, 5, 5))
    clamped = np.clip(pred, 1e-7, 1 - 1e-7)
    want = 0.0
    for i in range(5):
        for j in range(5):
            q, p = label[0, i, j], clamped[0, i, j]
            want -= q * np.log(p) + (1 - q) * np.log(1 - p)
    want /= 25
    assert abs(ce_loss(Tensor(label), Tensor(pred)).item() - want) < 1e-12
    # saturated predictions stay finite thanks to the clamp
    hard = Tensor(np.concatenate([np.zeros((1, 1, 2)), np.ones((1, 1, 2))], axis=2))
    v = ce_loss(Tensor(np.zeros((1, 1, 4))), hard).item()
    assert np.isfinite(v)


# ------------------------------------------------------------ loss weights

def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert w.alpha == 0.3 and w.delta == 0.1
    assert w.beta == 1.0 and w.gamma == 1.0
    assert w.skeleton_iterations == 10 and w.epsilon == 1e-6
    with pytest.raises(ConfigError):
        LossWeights(alpha=-0.1)
    with pytest.raises(ConfigError):
        LossWeights(alpha=0.0, beta=0.0, gamma=0.0)
    with pytest.raises(ConfigError):
        LossWeights(skeleton_iterations=0)
    with pytest.raises(ConfigError):
        LossWeights(epsilon=0.0)


# ---------------------------------------------------------- composite loss

def test_composite_delta_zero_total_is_main():
    rng = np.random.default_rng(8)
    label = Tensor((rng.random((1, 8, 8)) > 0.7).astype(np.float32))
    pred = Tensor(rng.random((1, 8, 8)).astype(np.float32), requires_grad=True)
    aux = Tensor(rng.random((1, 8, 8)).astype(np.float32), requires_grad=True)
    w = LossWeights(delta=0.0, skeleton_iterations=3)
    out = composite_loss(label, pred, aux, w)
    assert out.total is out.main
    out.total.backward()
    assert pred.grad is not None
    assert aux.grad is None   # nothing reaches the auxiliary prediction


def test_composite_combines_terms_and_reports_components():
    rng = np.random.default_rng(9)
    label = Tensor((rng.random((1, 8, 8)) > 0.7).astype(np.float64))
    pred = Tensor(rng.random((1, 8, 8)))
    aux = Tensor(rng.random((1, 8, 8)))
    w = LossWeights(alpha=0.3, beta=0.7, gamma=1.2, delta=0.25,
                    skeleton_iterations=3)
    out = composite_loss(label, pred, aux, w)
    c = out.components
    for key in ("topology", "ce", "dice", "aux", "main", "total"):
        assert key in c
    main_want = 0.3 * c["topology"] + 0.7 * c["ce"] + 1.2 * c["dice"]
    assert abs(out.main.item() - main_want) < 1e-9
    assert abs(out.total.item() - (out.main.item() + 0.25 * out.aux.item())) < 1e-12


def test_composite_perfect_predictions_near_zero():
    label = Tensor(plus_sign())
    w = LossWeights(skeleton_iterations=3)
    out = composite_loss(label, label, label, w)
    # ce on exact {0,1} predictions is bounded by the clamp, not zero
    assert out.total.item() < 1e-5


def test_composite_shape_mismatch():
    with pytest.raises(ShapeError):
        composite_loss(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 4, 5))),
                       None, LossWeights())


def test_composite_without_aux_prediction():
    rng = np.random.default_rng(10)
    label = Tensor((rng.random((1, 6, 6)) > 0.6).astype(np.float32))
    pred = Tensor(rng.random((1, 6, 6)).astype(np.float32))
    out = composite_loss(label, pred, None, LossWeights(skeleton_iterations=2))
    assert out.aux is None and out.total is out.main


# -------------------------------------------------------- differentiability

def test_dice_and_ce_gradcheck():
    rng = np.random.default_rng(11)
    label = Tensor((rng.random((1, 8, 8)) > 0.6).astype(np.float64))
    pred = grid_mask(rng)
    check_grads(lambda: dice_loss(label, pred), [pred], rel_tol=1e-3)
    check_grads(lambda: ce_loss(label, pred), [pred], rel_tol=1e-3)


def test_topology_loss_gradcheck():
    rng = np.random.default_rng(12)
    label = Tensor((rng.random((1, 8, 8)) > 0.6).astype(np.float64))
    pred = grid_mask(rng)
    check_grads(lambda: topology_loss(label, pred, iterations=3),
                [pred], rel_tol=1e-3)


def test_composite_loss_gradcheck():
    rng = np.random.default_rng(13)
    label = Tensor((rng.random((1, 8, 8)) > 0.6).astype(np.float64))
    pred = grid_mask(rng)
    aux = grid_mask(rng)
    w = LossWeights(skeleton_iterations=3)
    check_grads(lambda: composite_loss(label, pred, aux, w).total,
                [pred, aux], rel_tol=1e-3)
