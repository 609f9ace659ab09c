"""Loss terms of the cross-task objective.

All functions take torch tensors and are differentiable w.r.t. every real
input. Fields with five dims are read as (B, C, D, H, W) batches; anything
else is a single case.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import torch

from .errors import ContractError, ShapeError
from .transforms import DEFAULT_K, inverse_sdm


@dataclass(frozen=True)
class LossWeights:
    lambda_dist: float = 0.3
    lambda_ct: float = 0.3
    lambda_g: float = 0.3
    gamma: float = 0.1
    beta: float = 0.5
    epsilon: float = 1e-5
    # the printed adversarial term pushes D(labeled) -> 0; True flips to the usual real -> 1
    swap_adv_pairing: bool = False

    def __post_init__(self):
        for name in ("lambda_dist", "lambda_ct", "lambda_g", "gamma"):
            v = getattr(self, name)
            if not (v >= 0 and v < float("inf")):
                raise ContractError(f"{name} must be finite and >= 0, got {v}")
        if not 0 <= self.beta <= 1:
            raise ContractError(f"beta must be in [0, 1], got {self.beta}")
        if not self.epsilon > 0:
            raise ContractError("epsilon must be > 0")

    def to_dict(self):
        return asdict(self)


def _same_shape(*tensors):
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def dice_loss(pred, gt, epsilon: float = 1e-5):
    """Soft Dice loss, averaged over cases for a batch."""
    _same_shape(pred, gt)
    gt = gt.to(pred.dtype)
    dims = tuple(range(1, pred.ndim)) if pred.ndim == 5 else tuple(range(pred.ndim))
    inter = (pred * gt).sum(dim=dims)
    denom = pred.sum(dim=dims) + gt.sum(dim=dims)
    return (1 - (2 * inter + epsilon) / (denom + epsilon)).mean()


def distance_mse(pred_dist, gt_sdm):
    _same_shape(pred_dist, gt_sdm)
    return ((pred_dist - gt_sdm.to(pred_dist.dtype)) ** 2).mean()


def cross_task_loss(seg, pred_dist, k: float = DEFAULT_K):
    """Mean squared gap between the segmentation and the sigmoid-mapped distance field."""
    _same_shape(seg, pred_dist)
    return ((seg - inverse_sdm(pred_dist, k)) ** 2).mean()


def guidance_loss(seg, pred_dist, uncertainty, t: float, k: float = DEFAULT_K):
    """Cross-task gap restricted to voxels with uncertainty below ``t``.

    Returns ``(loss, coverage)`` where coverage is the fraction of voxels that
    pass the filter. With zero coverage the loss is an exact 0 (not NaN).
    """
    _same_shape(seg, pred_dist, uncertainty)
    if not t > 0:
        raise ContractError(f"threshold must be > 0, got {t}")
    keep = (uncertainty < t).to(seg.dtype).detach()
    n = keep.sum()
    sq = (seg - inverse_sdm(pred_dist, k)) ** 2
    loss = (keep * sq).sum() / n.clamp_min(1.0)
    return loss, float(n) / keep.numel()


def _scores(score_l, score_ul):
    # plain Python numbers are promoted to float64, tensors keep their dtype
    if not isinstance(score_l, torch.Tensor):
        score_l = torch.as_tensor(score_l, dtype=torch.float64)
    return score_l, torch.as_tensor(score_ul, dtype=score_l.dtype)


def _residual(score_l, score_ul, swap):
    if swap:
        return ((score_l - 1) ** 2).mean() + (score_ul ** 2).mean()
    return (score_l ** 2).mean() + ((score_ul - 1) ** 2).mean()


def adv_gm_loss(score_l, score_ul, beta: float = 0.5, swap: bool = False):
    """Geman-McClure adversarial loss r / (2 beta + r), bounded in [0, 1).

    ``r = D_l**2 + (D_ul - 1)**2``, with each term averaged over its batch.
    """
    score_l, score_ul = _scores(score_l, score_ul)
    r = _residual(score_l, score_ul, swap)
    denom = 2 * beta + r
    # beta = 0 and r = 0 leaves 0/0; the limit along r -> 0 is 0
    return torch.where(denom > 0, r / torch.where(denom > 0, denom, torch.ones_like(denom)), r)


def discriminator_loss(score_l, score_ul, swap: bool = False):
    """Least-squares discriminator loss; labeled pairs are the real class."""
    score_l, score_ul = _scores(score_l, score_ul)
    return _residual(score_l, score_ul, not swap)


@dataclass
class LossBreakdown:
    total: float
    dice: float
    dist: float
    cross_task: float
    guidance: float
    adv_gm: float
    gamma: float
    coverage: float
    disc: float = math.nan
    t: float = math.nan

    def weighted_sum(self, w: LossWeights) -> float:
        return (self.dice + w.lambda_dist * self.dist + w.lambda_ct * self.cross_task
                + w.lambda_g * self.guidance + self.gamma * self.adv_gm)

    def to_dict(self):
        return asdict(self)


def total_loss(
    out_l,
    gt_mask,
    gt_sdm,
    weights: LossWeights,
    *,
    out_ul=None,
    uncertainty=None,
    t: Optional[float] = None,
    k: float = DEFAULT_K,
    score_l=None,
    score_ul=None,
    gamma: Optional[float] = None,
):
    """Composite objective and its per-term breakdown.

    ``out_l`` / ``out_ul`` are ``(seg, dist)`` pairs for the labeled and
    unlabeled batch. Cross-task and guidance terms run over both batches;
    ``uncertainty`` must then cover the labeled cases followed by the
    unlabeled ones. ``gamma`` overrides ``weights.gamma`` (ramp schedules).
    """
    if gt_mask is None or gt_sdm is None:
        raise ContractError("supervised terms need ground-truth masks and distance maps")
    seg_l, dist_l = out_l
    gamma = weights.gamma if gamma is None else gamma
    zero = seg_l.new_zeros(())

    l_dice = dice_loss(seg_l, gt_mask, weights.epsilon)
    l_dist = distance_mse(dist_l, gt_sdm)

    if out_ul is not None:
        seg_all = torch.cat([seg_l, out_ul[0]])
        dist_all = torch.cat([dist_l, out_ul[1]])
    else:
        seg_all, dist_all = seg_l, dist_l
    l_ct = cross_task_loss(seg_all, dist_all, k)

    coverage = float("nan")
    l_g = zero
    if weights.lambda_g > 0 and uncertainty is not None:
        if t is None:
            raise ContractError("guidance term needs a threshold t")
        l_g, coverage = guidance_loss(seg_all, dist_all, uncertainty, t, k)

    l_adv = zero
    if score_l is not None and score_ul is not None and gamma > 0:
        l_adv = adv_gm_loss(score_l, score_ul, weights.beta, weights.swap_adv_pairing)

    total = (l_dice + weights.lambda_dist * l_dist + weights.lambda_ct * l_ct
             + weights.lambda_g * l_g + gamma * l_adv)
    breakdown = LossBreakdown(
        total=total.item(), dice=l_dice.item(), dist=l_dist.item(), cross_task=l_ct.item(),
        guidance=l_g.item(), adv_gm=l_adv.item(), gamma=float(gamma), coverage=coverage,
    )
    return total, breakdown
