"""Topology-aware composite segmentation loss.

The topology term compares soft skeletons: a differentiable stand-in for
morphological thinning built from iterated 3x3 min/max pooling. Topological
precision measures how much of the predicted skeleton lies inside the label
volume, sensitivity how much of the label skeleton is covered by the
prediction, and the loss is one minus their harmonic mean. Cross entropy
and Dice terms handle per-pixel agreement; an optional auxiliary prediction
(from the thermal branch) is supervised with the same weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError, DomainError, ShapeError
from .tensor import Tensor

RANGE_TOL = 1e-6
CE_CLAMP = 1e-7


@dataclass
class LossWeights:
    alpha: float = 0.3    # topology
    beta: float = 1.0     # cross entropy
    gamma: float = 1.0    # dice
    delta: float = 0.1    # auxiliary prediction
    skeleton_iterations: int = 10
    epsilon: float = 1e-6

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be non-negative")
        if self.alpha + self.beta + self.gamma <= 0:
            raise ConfigError("alpha + beta + gamma must be positive")
        if self.skeleton_iterations < 1:
            raise ConfigError("skeleton_iterations must be at least 1")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


def _check_range(x: Tensor, what: str):
    lo = float(x.data.min()) if x.size else 0.0
    hi = float(x.data.max()) if x.size else 0.0
    if lo < -RANGE_TOL or hi > 1.0 + RANGE_TOL:
        raise DomainError(f"{what} must lie in [0,1], got range [{lo}, {hi}]")


def _check_same_shape(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes disagree: {a.shape} vs {b.shape}")


def soft_erode(x: Tensor) -> Tensor:
    # valid-only 3x3 min: the pool's pad value never wins the max
    return x.neg().maxpool2d(3, stride=1, pad=1).neg()


def soft_dilate(x: Tensor) -> Tensor:
    return x.maxpool2d(3, stride=1, pad=1)


def soft_open(x: Tensor) -> Tensor:
    return soft_dilate(soft_erode(x))


def soft_skeleton(mask: Tensor, iterations: int = 10) -> Tensor:
    """Differentiable thinning of a [0,1] map.

    The opening residual relu(x - open(x)) picks out structures too thin
    to survive erosion; repeating on progressively eroded maps collects
    medial pixels of thicker structures. Convex accumulation keeps the
    skeleton inside [0,1] and never removes mass.
    """
    if iterations < 1:
        raise ConfigError("iterations must be at least 1")
    _check_range(mask, "skeleton input")
    img = mask
    skel = (img - soft_open(img)).relu()
    for _ in range(iterations):
        img = soft_erode(img)
        delta = (img - soft_open(img)).relu()
        skel = skel + delta * (1.0 - skel)
    return skel.clamp(0.0, 1.0)


def topo_precision(skel_pred: Tensor, volume_label: Tensor,
                   eps: float = 1e-6) -> Tensor:
    _check_same_shape(skel_pred, volume_label)
    inter = (skel_pred * volume_label).sum()
    return (inter + eps) / (skel_pred.sum() + eps)


def topo_sensitivity(skel_label: Tensor, volume_pred: Tensor,
                     eps: float = 1e-6) -> Tensor:
    _check_same_shape(skel_label, volume_pred)
    inter = (skel_label * volume_pred).sum()
    return (inter + eps) / (skel_label.sum() + eps)


def _harmonic_topology(label: Tensor, pred: Tensor, skel_label: Tensor,
                       iterations: int, eps: float) -> Tensor:
    skel_pred = soft_skeleton(pred, iterations)
    t_prec = topo_precision(skel_pred, label, eps)
    t_sens = topo_sensitivity(skel_label, pred, eps)
    cl = (t_prec * t_sens).scale(2.0) / (t_prec + t_sens + eps)
    return 1.0 - cl


def topology_loss(label: Tensor, pred: Tensor, iterations: int = 10,
                  eps: float = 1e-6) -> Tensor:
    """1 - harmonic mean of topological precision and sensitivity."""
    _check_same_shape(label, pred)
    skel_label = soft_skeleton(label, iterations)
    return _harmonic_topology(label, pred, skel_label, iterations, eps)


def dice_loss(label: Tensor, pred: Tensor, eps: float = 1e-6) -> Tensor:
    _check_same_shape(label, pred)
    inter = (label * pred).sum()
    return 1.0 - (inter.scale(2.0) + eps) / (label.sum() + pred.sum() + eps)


def ce_loss(label: Tensor, pred: Tensor) -> Tensor:
    _check_same_shape(label, pred)
    p = pred.clamp(CE_CLAMP, 1.0 - CE_CLAMP)
    ll = label * p.log() + (1.0 - label) * (1.0 - p).log()
    return ll.mean().neg()


@dataclass
class LossOutput:
    total: Tensor
    main: Tensor
    aux: Tensor | None
    components: dict[str, float] = field(default_factory=dict)


def composite_loss(label: Tensor, pred: Tensor, aux_pred: Tensor | None,
                   weights: LossWeights) -> LossOutput:
    """Weighted main objective plus delta-scaled auxiliary supervision.

    With delta = 0 the returned total IS the main tensor, so the two stay
    bitwise identical no matter what the auxiliary prediction contains.
    """
    _check_same_shape(label, pred)
    w = weights
    skel_label = soft_skeleton(label, w.skeleton_iterations)

    def weighted(p: Tensor):
        topo = _harmonic_topology(label, p, skel_label,
                                  w.skeleton_iterations, w.epsilon)
        ce = ce_loss(label, p)
        dc = dice_loss(label, p, w.epsilon)
        total = topo.scale(w.alpha) + ce.scale(w.beta) + dc.scale(w.gamma)
        return total, topo, ce, dc

    main, topo, ce, dc = weighted(pred)
    components = {"topology": topo.item(), "ce": ce.item(), "dice": dc.item()}

    aux = None
    total = main
    if aux_pred is not None:
        _check_same_shape(label, aux_pred)
        aux, aux_topo, aux_ce, aux_dc = weighted(aux_pred)
        components.update({"aux_topology": aux_topo.item(),
                           "aux_ce": aux_ce.item(),
                           "aux_dice": aux_dc.item(),
                           "aux": aux.item()})
        if w.delta > 0:
            total = main + aux.scale(w.delta)
    components["main"] = main.item()
    components["total"] = total.item()
    return LossOutput(total=total, main=main, aux=aux, components=components)
