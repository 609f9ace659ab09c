"""Monte-Carlo dropout sampling and predictive-entropy maps."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .errors import ContractError, ShapeError, UselessSamplingError

LN2 = math.log(2.0)


@dataclass(frozen=True)
class McConfig:
    n_samples: int = 8
    t_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ContractError("n_samples must be >= 2")
        if not 0 < self.t_fraction <= 1:
            raise ContractError("t_fraction must be in (0, 1]")

    @property
    def threshold(self) -> float:
        return self.t_fraction * LN2

    def to_dict(self):
        return asdict(self)


@torch.no_grad()
def mc_sample(model, x: torch.Tensor, n_samples: int = 8, seed: int = 0) -> list:
    """``n_samples`` stochastic segmentation passes with dropout active.

    Runs batched through ``model.mc_seg``. The global torch RNG is left
    untouched; the sample set is a pure function of ``seed``.
    """
    if n_samples < 2:
        raise ContractError("need at least 2 MC samples")
    if model.cfg.dropout_rate <= 0:
        raise UselessSamplingError("dropout_rate is 0; MC samples would be identical")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        seg = model.mc_seg(x, n_samples)
    return list(seg.unbind(0))


def entropy_map(samples):
    """Binary predictive entropy of the mean sample probability.

    Returns a tensor (numpy input gives a numpy array) bounded in [0, ln 2],
    with 0 * log 0 taken as 0.
    """
    if len(samples) < 2:
        raise ContractError("need at least 2 samples")
    as_numpy = not isinstance(samples[0], torch.Tensor)
    samples = [torch.as_tensor(np.asarray(s)) if as_numpy else s for s in samples]
    shape = samples[0].shape
    for s in samples[1:]:
        if s.shape != shape:
            raise ShapeError(f"sample shapes differ: {tuple(shape)} vs {tuple(s.shape)}")
    p = torch.stack(samples).mean(dim=0)
    u = -(torch.xlogy(p, p) + torch.xlogy(1 - p, 1 - p))
    # float32(ln 2) rounds up; clamp to the largest representable value below it
    hi = torch.tensor(LN2, dtype=u.dtype)
    if float(hi) > LN2:
        hi = torch.nextafter(hi, torch.zeros_like(hi))
    u = u.clamp(0.0, float(hi)) + 0.0  # drops the sign of -0
    return u.numpy() if as_numpy else u


def certainty_mask(u, t: float):
    """1 where uncertainty < t, else 0."""
    if not t > 0:
        raise ContractError(f"threshold must be > 0, got {t}")
    if isinstance(u, torch.Tensor):
        return (u < t).to(torch.uint8)
    return (np.asarray(u) < t).astype(np.uint8)
