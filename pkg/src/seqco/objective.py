"""Training losses and the momentum (EMA) update.

The total loss for one image is

    lambda_f * focal + lambda_b * box + lambda_e * similarity

where focal and box supervise the online branch with proposals (the "RPS"
part) and similarity pulls matched online projections toward the momentum
branch's projections (the "SSL" part).
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import numcore as nc
from .geometry import box_distance_t
from .matching import (LAMBDA_BOX_MATCH, LAMBDA_CLS_MATCH, Assignment, NoTargets, build_branch_cost,
                       build_rps_cost, hungarian, one_by_one)
from .model import ParamStore, SequencePrediction, check_same_layout

MATCHERS = ("hungarian", "one_by_one")
SIMILARITIES = ("l2", "l1")


@dataclass(frozen=True)
class LossWeights:
    lambda_f: float = 2.0
    lambda_b: float = 5.0
    lambda_e: float = 10.0
    lambda_cm: float = LAMBDA_CLS_MATCH
    lambda_bm: float = LAMBDA_BOX_MATCH
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    giou_sub_weight: float = 0.4

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ValueError(f"{f.name} must be >= 0, got {getattr(self, f.name)}")
        if self.lambda_cm != LAMBDA_CLS_MATCH or self.lambda_bm != LAMBDA_BOX_MATCH:
            raise ValueError("matching weights are fixed at "
                             f"lambda_cm={LAMBDA_CLS_MATCH}, lambda_bm={LAMBDA_BOX_MATCH}")
        if self.giou_sub_weight != 0.4:
            raise ValueError("giou_sub_weight is fixed at 0.4")


@dataclass(frozen=True)
class EmaConfig:
    beta: float = 0.996

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


def _zero(like: nc.Tensor) -> nc.Tensor:
    return nc.Tensor(0.0, dtype=like.dtype)


def focal_loss(logits: nc.Tensor, matched: Assignment | None, alpha: float | None = 0.25,
               gamma: float = 2.0) -> nc.Tensor:
    """Sigmoid focal loss over N queries; matched queries are positives.

    ``alpha=None`` weights both classes by 1. The sum is divided by
    ``max(1, #positives)``.
    """
    n = logits.shape[0]
    target = np.zeros(n)
    if matched is not None and len(matched):
        q = np.asarray(matched.queries)
        if q.min() < 0 or q.max() >= n:
            raise ValueError(f"assignment refers to queries outside [0, {n})")
        target[q] = 1.0
    # -log p = softplus(-x), -log(1 - p) = softplus(x)
    pos_nll = nc.softplus(-logits)
    neg_nll = nc.softplus(logits)
    if gamma != 0:
        p = nc.sigmoid(logits)
        pos_nll = pos_nll * nc.power(1.0 - p, gamma)
        neg_nll = neg_nll * nc.power(p, gamma)
    a_pos, a_neg = (1.0, 1.0) if alpha is None else (alpha, 1.0 - alpha)
    t = nc.Tensor(target, dtype=logits.dtype)
    per_query = t * a_pos * pos_nll + (1.0 - t) * a_neg * neg_nll
    return per_query.sum() * (1.0 / max(1.0, float(target.sum())))


def box_loss(pred_boxes: nc.Tensor, targets, matched: Assignment | None) -> nc.Tensor:
    """Mean box distance over matched (query, target) pairs; 0 without matches."""
    if matched is None or len(matched) == 0:
        return _zero(pred_boxes)
    tgt = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    if len(tgt) != len(matched):
        raise ValueError(f"{len(tgt)} targets but {len(matched)} matched queries")
    picked = pred_boxes[np.asarray(matched.queries)]
    return box_distance_t(picked, tgt).mean()


def similarity_loss(z_momentum, z_online: nc.Tensor, assignment: Assignment, kind: str = "l2") -> nc.Tensor:
    """Mean over momentum sequences i of sum_d |z_m[i, d] - z_o[sigma(i), d]|^p.

    The momentum side is treated as a constant, so no gradient reaches it.
    """
    if kind not in SIMILARITIES:
        raise ValueError(f"unknown similarity {kind!r}; expected one of {SIMILARITIES}")
    zm = np.asarray(getattr(z_momentum, "data", z_momentum))
    n = z_online.shape[0]
    if zm.shape != z_online.shape:
        raise ValueError(f"projection shapes differ: {zm.shape} vs {z_online.shape}")
    if sorted(assignment.queries) != list(range(n)):
        raise ValueError("similarity loss needs a full permutation over all sequences")
    diff = z_online[np.asarray(assignment.queries)] - nc.Tensor(zm, dtype=z_online.dtype)
    per_pair = (diff * diff if kind == "l2" else nc.abs_(diff)).sum(axis=-1)
    return per_pair.mean()


@dataclass
class Diagnostics:
    focal: float
    box: float
    similarity: float
    loss_rps: float
    loss_ssl: float
    rps_assignment: Assignment | None
    branch_assignment: Assignment
    branch_cost: float           # matched total of the branch cost matrix
    n_matched: int


def rps_assignment(pred: SequencePrediction, proposals) -> Assignment | None:
    try:
        return hungarian(build_rps_cost(pred, proposals))
    except NoTargets:
        return None


def branch_assignment(online: SequencePrediction, momentum: SequencePrediction,
                      matcher: str = "hungarian") -> tuple[Assignment, np.ndarray]:
    cost = build_branch_cost(online, momentum)
    if matcher == "hungarian":
        return hungarian(cost), cost
    if matcher == "one_by_one":
        return one_by_one(cost.shape[1]), cost
    raise ValueError(f"unknown matcher {matcher!r}; expected one of {MATCHERS}")


def total_loss(online: SequencePrediction, momentum: SequencePrediction, proposals,
               weights: LossWeights | None = None, matcher: str = "hungarian",
               similarity: str = "l2", assignments: tuple | None = None) -> tuple[nc.Tensor, Diagnostics]:
    """Loss for one image. ``assignments=(rps, branch)`` skips matching (used
    when the matching must stay fixed, e.g. under finite differences)."""
    w = weights or LossWeights()
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if assignments is None:
        rps = rps_assignment(online, props) if len(props) else None
        branch, cost = branch_assignment(online, momentum, matcher)
    else:
        rps, branch = assignments
        cost = build_branch_cost(online, momentum)
    focal = focal_loss(online.class_logits, rps, w.focal_alpha, w.focal_gamma)
    box = box_loss(online.boxes, props, rps)
    sim = similarity_loss(momentum.projections, online.projections, branch, similarity)
    loss_rps = focal * w.lambda_f + box * w.lambda_b
    loss_ssl = sim * w.lambda_e
    total = loss_rps + loss_ssl
    diag = Diagnostics(focal.item(), box.item(), sim.item(), loss_rps.item(), loss_ssl.item(),
                       rps, branch, branch.cost(cost), 0 if rps is None else len(rps))
    return total, diag


def ema_update(momentum: ParamStore, online: ParamStore, beta: float) -> ParamStore:
    """In place: theta_m <- beta * theta_m + (1 - beta) * theta_o.

    Evaluated in float64 and rounded once to the store's precision.
    """
    EmaConfig(beta)
    check_same_layout(momentum, online)
    for name, m in momentum.items():
        o = online[name].data.astype(np.float64)
        m.data = (beta * m.data.astype(np.float64) + (1.0 - beta) * o).astype(m.dtype)
    return momentum
