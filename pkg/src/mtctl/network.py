"""V-Net style multi-task network and the distance-map discriminator.

One residual encoder feeds two decoders: a segmentation decoder (sigmoid
foreground probability) and a distance decoder (tanh signed distance field).
Uncertainty comes from MC-dropout passes of the segmentation decoder, so there
is no separate parametric uncertainty head.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, NumericsError, ShapeError

MODES = ("train", "eval", "mc")


@dataclass(frozen=True)
class NetConfig:
    in_shape: tuple = (112, 112, 80)
    base_channels: int = 16
    depth: int = 4
    dropout_rate: float = 0.5
    seed: int = 0
    in_channels: int = 1

    def __post_init__(self):
        shape = tuple(int(s) for s in self.in_shape)
        object.__setattr__(self, "in_shape", shape)
        if len(shape) != 3:
            raise ContractError(f"in_shape must have 3 dims, got {shape}")
        if self.depth < 1:
            raise ContractError("depth must be >= 1")
        if any(s % 2 ** self.depth for s in shape):
            raise ContractError(f"in_shape {shape} not divisible by 2**depth={2 ** self.depth}")
        if self.base_channels < 1:
            raise ContractError("base_channels must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ContractError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["in_shape"] = list(self.in_shape)
        return d


class ModelOutputs(NamedTuple):
    seg: torch.Tensor
    dist: torch.Tensor


def stage_convs(level: int) -> int:
    """V-Net conv count per resolution level: 1, 2, then 3 for every deeper level."""
    return min(level + 1, 3)


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, kernel_size=3, stride=1):
        padding = (kernel_size - 1) // 2 if stride == 1 else 0
        super().__init__(
            nn.Conv3d(cin, cout, kernel_size, stride=stride, padding=padding),
            nn.InstanceNorm3d(cout, affine=True),
            nn.PReLU(cout),
        )


class ResStage(nn.Module):
    """Stack of 3x3x3 conv blocks with a residual connection around it."""

    def __init__(self, cin, cout, n_convs=2):
        super().__init__()
        layers = [ConvBlock(cin, cout)] + [ConvBlock(cout, cout) for _ in range(n_convs - 1)]
        self.body = nn.Sequential(*layers)

    def forward(self, x, skip):
        return self.body(x) + skip


class Decoder(nn.Module):
    def __init__(self, base, depth):
        super().__init__()
        self.ups = nn.ModuleList()
        self.stages = nn.ModuleList()
        for i in range(depth, 0, -1):
            c_hi, c_lo = base * 2 ** i, base * 2 ** (i - 1)
            self.ups.append(nn.Sequential(
                nn.ConvTranspose3d(c_hi, c_lo, 2, stride=2),
                nn.InstanceNorm3d(c_lo, affine=True),
                nn.PReLU(c_lo),
            ))
            self.stages.append(ResStage(2 * c_lo, c_lo, stage_convs(i - 1)))
        self.head = nn.Conv3d(base, 1, 1)

    def forward(self, h, skips, p_drop, dropout_on):
        for up, stage, skip in zip(self.ups, self.stages, reversed(skips)):
            u = up(h)
            h = stage(torch.cat([u, skip], dim=1), u)
        h = F.dropout(h, p_drop, training=dropout_on)
        return self.head(h)


class MTCTLNet(nn.Module):
    """Shared encoder with segmentation and distance decoders."""

    def __init__(self, cfg: NetConfig, zero_heads: bool = True):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.in_block = ConvBlock(cfg.in_channels, c)
        self.downs = nn.ModuleList()
        self.stages = nn.ModuleList()
        for i in range(1, cfg.depth + 1):
            self.downs.append(ConvBlock(c * 2 ** (i - 1), c * 2 ** i, kernel_size=2, stride=2))
            self.stages.append(ResStage(c * 2 ** i, c * 2 ** i, stage_convs(i)))
        self.seg_decoder = Decoder(c, cfg.depth)
        self.dist_decoder = Decoder(c, cfg.depth)
        if zero_heads:
            for head in (self.seg_decoder.head, self.dist_decoder.head):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)
        # channels-last lets CPU 3D convolutions take the oneDNN path (~1.4x faster at batch >= 2)
        self.to(memory_format=torch.channels_last_3d)

    def encode(self, x):
        """Bottleneck features (before dropout) and the skip connections."""
        x = x.contiguous(memory_format=torch.channels_last_3d)
        h = self.in_block(x) + x.mean(dim=1, keepdim=True)
        skips = [h]
        for down, stage in zip(self.downs, self.stages):
            d = down(h)
            h = stage(d, d)
            skips.append(h)
        skips.pop()
        return h, skips

    def _check_input(self, x):
        if x.ndim != 5 or tuple(x.shape[2:]) != self.cfg.in_shape or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected input (B, {self.cfg.in_channels}, {', '.join(map(str, self.cfg.in_shape))}), "
                f"got {tuple(x.shape)}"
            )
        if x.shape[0] < 1:
            raise ShapeError("empty batch")

    def forward(self, x: torch.Tensor, mode: str = "eval") -> ModelOutputs:
        if mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
        self._check_input(x)
        dropout_on = mode != "eval"
        p = self.cfg.dropout_rate
        h, skips = self.encode(x)
        h = F.dropout(h, p, training=dropout_on)
        seg = torch.sigmoid(self.seg_decoder(h, skips, p, dropout_on))
        dist = torch.tanh(self.dist_decoder(h, skips, p, dropout_on))
        if not (torch.isfinite(seg).all() and torch.isfinite(dist).all()):
            raise NumericsError("non-finite network output")
        return ModelOutputs(seg, dist)

    def mc_seg(self, x: torch.Tensor, n_samples: int) -> torch.Tensor:
        """``n_samples`` dropout-active segmentation passes, stacked on dim 0.

        Dropout sits only at the bottleneck and the decoder heads, so the
        encoder runs once and only the segmentation decoder is repeated. The
        samples have the same distribution as ``n_samples`` calls of
        ``forward(x, mode="mc")``.
        """
        self._check_input(x)
        p = self.cfg.dropout_rate
        h, skips = self.encode(x)
        rep = lambda t: t.repeat(n_samples, *([1] * (t.ndim - 1)))
        h = F.dropout(rep(h), p, training=True)
        seg = torch.sigmoid(self.seg_decoder(h, [rep(s) for s in skips], p, True))
        if not torch.isfinite(seg).all():
            raise NumericsError("non-finite network output")
        return seg.reshape(n_samples, *x.shape)


class Discriminator(nn.Module):
    """Scores a (volume, distance field) pair; one real-valued score per case."""

    def __init__(self, base_channels: int = 16, in_channels: int = 2, zero_head: bool = True):
        super().__init__()
        chans = [in_channels] + [base_channels * 2 ** i for i in range(4)]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv3d(cin, cout, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.score = nn.Linear(chans[-1], 1)
        if zero_head:
            nn.init.zeros_(self.score.weight)
            nn.init.zeros_(self.score.bias)

    def forward(self, x: torch.Tensor, dist: torch.Tensor) -> torch.Tensor:
        if x.shape != dist.shape:
            raise ShapeError(f"volume {tuple(x.shape)} and distance {tuple(dist.shape)} differ")
        h = self.features(torch.cat([x, dist], dim=1))
        return self.score(h.mean(dim=(2, 3, 4))).squeeze(1)


def discriminate(disc: Discriminator, x: torch.Tensor, dist: torch.Tensor) -> torch.Tensor:
    return disc(x, dist)


def init_params(cfg: NetConfig, disc_channels: int | None = None, dtype=torch.float32):
    """Seeded construction of the segmentation network and its discriminator."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = MTCTLNet(cfg).to(dtype)
        disc = Discriminator(disc_channels or cfg.base_channels, cfg.in_channels + 1).to(dtype)
    return net, disc


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
