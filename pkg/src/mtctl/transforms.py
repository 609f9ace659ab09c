"""Signed distance maps and their sigmoid inverse.

Sign convention: positive inside the foreground, negative outside. With this
convention ``1 / (1 + exp(-k * z))`` maps a distance map straight back to a
near-binary foreground probability.
"""
from __future__ import annotations

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt

from .errors import DegenerateMaskError, ShapeError
from .volumes import BinaryMask

DEFAULT_K = 1500.0
EXP_CLAMP = 500.0


def signed_distance(mask) -> np.ndarray:
    """Unnormalized signed Euclidean distance (voxel units) to the opposite class."""
    m = np.asarray(mask.data if isinstance(mask, BinaryMask) else mask).astype(bool)
    if m.ndim != 3:
        raise ShapeError(f"mask must be 3D, got shape {m.shape}")
    if not m.any() or m.all():
        raise DegenerateMaskError("mask has no opposite class")
    inside = distance_transform_edt(m)
    outside = distance_transform_edt(~m)
    return np.where(m, inside, -outside)


def sdm(mask) -> np.ndarray:
    """Signed distance map normalized by its max absolute value to [-1, 1]."""
    d = signed_distance(mask)
    return d / np.abs(d).max()


def batch_sdm(masks) -> np.ndarray:
    """SDM for each mask of a (B, 1, D, H, W) or (B, D, H, W) stack."""
    masks = np.asarray(masks)
    flat = masks.reshape(-1, *masks.shape[-3:])
    return np.stack([sdm(m) for m in flat]).reshape(masks.shape)


def inverse_sdm(z, k: float = DEFAULT_K):
    """Logistic map 1 / (1 + exp(-k z)); accepts numpy arrays or torch tensors."""
    if not k > 0 or not np.isfinite(k):
        raise ValueError(f"steepness k must be positive and finite, got {k}")
    if isinstance(z, torch.Tensor):
        return torch.sigmoid(k * z)
    arg = np.clip(-k * np.asarray(z, dtype=np.float64), -EXP_CLAMP, EXP_CLAMP)
    return 1.0 / (1.0 + np.exp(arg))


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """Foreground where prob >= threshold (ties go to foreground)."""
    if isinstance(prob, torch.Tensor):
        prob = prob.detach().cpu().numpy()
    return (np.asarray(prob) >= threshold).astype(np.uint8)
