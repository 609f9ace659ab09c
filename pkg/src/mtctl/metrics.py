"""Segmentation metrics (overlap, surface distance, volume) and a paired permutation test."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, EmptyMaskError, FormatError, ShapeError

CSV_HEADER = ["case_id", "dice", "jaccard", "hd95", "asd", "ravd", "precision", "recall"]
METRIC_NAMES = CSV_HEADER[1:]
SUMMARY_ID = "MEAN±STD"
EXACT_MAX_N = 20


def _binary_pair(pred, gt):
    pred = np.asarray(getattr(pred, "data", pred)).astype(bool)
    gt = np.asarray(getattr(gt, "data", gt)).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def overlap_metrics(pred, gt) -> tuple[float, float, float, float]:
    """(dice, jaccard, precision, recall) in percent. Empty vs empty scores 100."""
    p, g = _binary_pair(pred, gt)
    n_p, n_g = int(p.sum()), int(g.sum())
    inter = int(np.logical_and(p, g).sum())
    union = n_p + n_g - inter
    if union == 0:
        return 100.0, 100.0, 100.0, 100.0
    dice = 200.0 * inter / (n_p + n_g)
    jaccard = 100.0 * inter / union
    precision = 100.0 * inter / n_p if n_p else 0.0
    recall = 100.0 * inter / n_g if n_g else 0.0
    return dice, jaccard, precision, recall


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour (outside the grid counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    return mask & ~eroded


def _directed(src_border, dst_border, spacing):
    dt = ndimage.distance_transform_edt(~dst_border, sampling=spacing)
    return dt[src_border]


def surface_distance_samples(pred, gt, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Pooled nearest boundary distances in mm, both directions."""
    p, g = _binary_pair(pred, gt)
    if not p.any() or not g.any():
        raise EmptyMaskError("surface distance needs two nonempty masks")
    bp, bg = boundary(p), boundary(g)
    return np.concatenate([_directed(bp, bg, spacing), _directed(bg, bp, spacing)])


def surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)) -> tuple[float, float]:
    """(HD95, ASD) in mm; HD95 uses linear interpolation between order statistics."""
    d = surface_distance_samples(pred, gt, spacing)
    return float(np.percentile(d, 95, method="linear")), float(d.mean())


def ravd(pred, gt) -> float:
    """Signed relative volume difference in percent, 100 (|P| - |G|) / |G|."""
    p, g = _binary_pair(pred, gt)
    n_g = int(g.sum())
    if n_g == 0:
        raise EmptyMaskError("RAVD undefined for empty ground truth")
    return 100.0 * (int(p.sum()) - n_g) / n_g


def paired_test(a: Sequence[float], b: Sequence[float], n_resamples: int = 100_000, seed: int = 0) -> float:
    """Two-sided paired permutation test on the mean difference.

    Exact sign-flip enumeration for n <= 20, otherwise seeded Monte Carlo
    sign flips with the (count + 1) / (R + 1) estimator so p stays in (0, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"paired samples must be 1D and equal length, got {a.shape} and {b.shape}")
    n = a.size
    if n < 5:
        raise ContractError(f"need at least 5 pairs, got {n}")
    d = a - b
    observed = abs(d.sum())
    tol = 1e-12 * max(1.0, np.abs(d).sum())

    if n <= EXACT_MAX_N:
        hits = 0
        total = 1 << n
        bits = np.arange(n, dtype=np.int64)
        chunk = 1 << 16
        for start in range(0, total, chunk):
            codes = np.arange(start, min(start + chunk, total), dtype=np.int64)
            signs = 1.0 - 2.0 * ((codes[:, None] >> bits) & 1)
            hits += int((np.abs(signs @ d) >= observed - tol).sum())
        return hits / total

    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 10_000
    for start in range(0, n_resamples, chunk):
        m = min(chunk, n_resamples - start)
        signs = rng.choice((-1.0, 1.0), size=(m, n))
        hits += int((np.abs(signs @ d) >= observed - tol).sum())
    return (hits + 1) / (n_resamples + 1)


@dataclass
class MetricRow:
    case_id: str
    dice: float
    jaccard: float
    hd95: float
    asd: float
    ravd: float
    precision: float
    recall: float


def case_metrics(case_id: str, pred, gt, spacing=(1.0, 1.0, 1.0)) -> MetricRow:
    """All seven metrics for one case; undefined distances become NaN."""
    dice, jac, prec, rec = overlap_metrics(pred, gt)
    try:
        hd95, asd = surface_distances(pred, gt, spacing)
    except EmptyMaskError:
        hd95 = asd = math.nan
    try:
        rv = ravd(pred, gt)
    except EmptyMaskError:
        rv = math.nan
    return MetricRow(case_id, dice, jac, hd95, asd, rv, prec, rec)


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def aggregate(self) -> dict:
        """Mean and population std per metric, ignoring missing values."""
        out = {}
        for name in METRIC_NAMES:
            col = self.column(name)
            ok = col[~np.isnan(col)]
            out[name] = (float(ok.mean()), float(ok.std())) if ok.size else (math.nan, math.nan)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r.case_id] + ["" if math.isnan(v) else repr(float(v))
                                          for v in (getattr(r, m) for m in METRIC_NAMES)])
            agg = self.aggregate()
            w.writerow([SUMMARY_ID] + [f"{agg[m][0]:.2f}±{agg[m][1]:.2f}" for m in METRIC_NAMES])

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != CSV_HEADER:
            raise FormatError(f"{path}: header must be {','.join(CSV_HEADER)}")
        out = []
        for line in rows[1:]:
            if not line or line[0] == SUMMARY_ID:
                continue
            if len(line) != len(CSV_HEADER):
                raise FormatError(f"{path}: row {line!r} has {len(line)} columns")
            vals = [math.nan if v == "" else float(v) for v in line[1:]]
            out.append(MetricRow(line[0], *vals))
        return cls(out)

    def summary_lines(self) -> list[str]:
        agg = self.aggregate()
        return [f"{m:>9s}: {agg[m][0]:8.2f} ± {agg[m][1]:.2f}" for m in METRIC_NAMES]
