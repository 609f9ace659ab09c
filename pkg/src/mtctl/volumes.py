"""Volumes and masks: data model, preprocessing, synthetic phantoms and file I/O.

Two on-disk formats are understood:

* NIfTI (``.nii`` / ``.nii.gz``) via nibabel, spacing taken from the header zooms.
* ``.mtv``: a 16 byte header (magic ``MTV1`` followed by three little-endian
  uint32 dims) and float32 voxels in C (D-major) order. The format carries no
  spacing, so loaded volumes get 1 mm isotropic spacing.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from functools import singledispatch
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConstantVolumeError,
    ContractError,
    EmptyDatasetError,
    FormatError,
    MetadataError,
    ShapeError,
)

MTV_MAGIC = b"MTV1"
MTV_HEADER = struct.Struct("<4s3I")
MIN_DIM = 4
DEFAULT_TARGET_SHAPE = (112, 112, 80)


def _check_3d(data: np.ndarray, what: str) -> None:
    if data.ndim != 3:
        raise ShapeError(f"{what} must be 3D, got shape {data.shape}")


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_3d(data, "volume")
        if not np.all(np.isfinite(data)):
            raise ContractError(f"volume {self.id!r} has non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise MetadataError(f"spacing must be 3 positive reals, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_3d(data, "mask")
        if not np.isin(data, (0, 1)).all():
            raise ContractError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", data.astype(np.uint8))

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Case:
    """One scan: a volume and, for labeled cases, its mask."""

    volume: Volume
    mask: Optional[BinaryMask] = None

    @property
    def id(self) -> str:
        return self.volume.id

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.volume.shape:
            raise ShapeError(
                f"case {self.id!r}: mask shape {self.mask.shape} != volume shape {self.volume.shape}"
            )


@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list
    seed: int

    def __post_init__(self):
        if not self.labeled:
            raise ContractError("labeled split must be nonempty")
        lab = {c.id for c in self.labeled}
        unl = {c.id for c in self.unlabeled}
        if lab & unl:
            raise ContractError(f"case ids in both splits: {sorted(lab & unl)}")


@dataclass(frozen=True)
class PhantomSpec:
    grid_shape: tuple = (32, 32, 32)
    n_lobes: int = 2
    radius_range: tuple = (4.0, 8.0)
    noise_sigma: float = 0.0
    fg_intensity: float = 1.0
    bg_intensity: float = 0.0
    seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.grid_shape)
        if len(shape) != 3 or min(shape) < MIN_DIM:
            raise ShapeError(f"grid_shape must be 3 dims >= {MIN_DIM}, got {self.grid_shape}")
        r_min, r_max = (float(r) for r in self.radius_range)
        if self.n_lobes < 1:
            raise ContractError("n_lobes must be >= 1")
        if not 0 < r_min <= r_max:
            raise ContractError(f"bad radius_range {self.radius_range}")
        if r_max >= min(shape) / 2:
            raise ContractError(f"r_max={r_max} must be < min(grid_shape)/2={min(shape) / 2}")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")
        if self.fg_intensity == self.bg_intensity:
            raise ContractError("fg_intensity must differ from bg_intensity")
        object.__setattr__(self, "grid_shape", shape)
        object.__setattr__(self, "radius_range", (r_min, r_max))


def normalize(v: Volume) -> Volume:
    """Per-volume z-score standardization."""
    data = v.data.astype(np.float64)
    mu = data.mean()
    sigma = data.std()
    if not sigma > 1e-12 * max(1.0, abs(mu)):
        raise ConstantVolumeError(f"volume {v.id!r} is constant-valued")
    return Volume((data - mu) / sigma, v.spacing, v.id)


def _check_target(target) -> tuple:
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < MIN_DIM:
        raise ShapeError(f"target shape must be 3 dims >= {MIN_DIM}, got {target}")
    return target


def _grid_coords(src_shape, target):
    # align-corners convention: first and last voxel centers coincide
    return [np.linspace(0.0, n - 1, m) for n, m in zip(src_shape, target)]


def _lerp_axis(a: np.ndarray, coord: np.ndarray, axis: int) -> np.ndarray:
    # lo + f * (hi - lo) keeps constants exact, unlike (1 - f) * lo + f * hi
    i0 = np.minimum(np.floor(coord).astype(np.intp), a.shape[axis] - 1)
    i1 = np.minimum(i0 + 1, a.shape[axis] - 1)
    shape = [1] * a.ndim
    shape[axis] = -1
    f = (coord - i0).reshape(shape)
    lo = np.take(a, i0, axis=axis)
    return lo + f * (np.take(a, i1, axis=axis) - lo)


@singledispatch
def resize(v, target):
    raise TypeError(f"cannot resize {type(v).__name__}")


@resize.register
def _(v: Volume, target) -> Volume:
    """Trilinear resampling with corner-aligned grids."""
    target = _check_target(target)
    if target == v.shape:
        return Volume(v.data.copy(), v.spacing, v.id)
    out = v.data.astype(np.float64)
    for axis, coord in enumerate(_grid_coords(v.shape, target)):
        out = _lerp_axis(out, coord, axis)
    spacing = tuple(s * (n - 1) / (m - 1) for s, n, m in zip(v.spacing, v.shape, target))
    return Volume(out, spacing, v.id)


@resize.register
def _(m: BinaryMask, target) -> BinaryMask:
    target = _check_target(target)
    idx = [np.rint(c).astype(np.intp) for c in _grid_coords(m.shape, target)]
    return BinaryMask(m.data[np.ix_(*idx)])


def make_phantom(spec: PhantomSpec) -> tuple[Volume, BinaryMask]:
    """Union of overlapping ellipsoids on a noisy two-intensity background.

    Each new lobe is centred inside the previous one, so the union stays
    connected. All lobes lie fully within the grid.
    """
    rng = np.random.default_rng(spec.seed)
    shape = np.array(spec.grid_shape, dtype=np.float64)
    r_min, r_max = spec.radius_range
    lo = np.full(3, r_max)
    hi = shape - 1 - r_max
    grid = np.indices(spec.grid_shape, dtype=np.float64)

    mask = np.zeros(spec.grid_shape, dtype=bool)
    center = (shape - 1) / 2 + rng.uniform(-1, 1, 3) * (hi - lo) / 4
    radii = None
    for _ in range(spec.n_lobes):
        if radii is not None:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            center = center + direction * rng.uniform(0.3, 0.8) * radii.min()
        center = np.clip(center, lo, hi)
        radii = rng.uniform(r_min, r_max, 3)
        q = sum(((grid[a] - center[a]) / radii[a]) ** 2 for a in range(3))
        mask |= q <= 1.0

    data = spec.bg_intensity + (spec.fg_intensity - spec.bg_intensity) * mask.astype(np.float64)
    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, spec.grid_shape)
    case_id = f"phantom_{spec.seed}"
    return Volume(data, spec.spacing, case_id), BinaryMask(mask.astype(np.uint8))


def split_dataset(cases: Sequence[Case], labeled_fraction: float, seed: int) -> DatasetSplit:
    """Seeded shuffle; the first ceil(fraction * n) cases keep their labels."""
    if not 0 < labeled_fraction <= 1:
        raise ContractError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    cases = list(cases)
    if not cases:
        raise EmptyDatasetError("no cases to split")
    n_labeled = math.ceil(labeled_fraction * len(cases) - 1e-9)
    order = np.random.default_rng(seed).permutation(len(cases))
    shuffled = [cases[i] for i in order]
    labeled = shuffled[:n_labeled]
    missing = [c.id for c in labeled if c.mask is None]
    if missing:
        raise ContractError(f"cases drawn as labeled have no mask: {missing}")
    unlabeled = [Case(c.volume) for c in shuffled[n_labeled:]]
    return DatasetSplit(labeled, unlabeled, seed)


# -- file I/O ---------------------------------------------------------------

def _suffix(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(".nii.gz"):
        return ".nii.gz"
    return path.suffix.lower()


def write_mtv(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    _check_3d(data, "mtv payload")
    with open(path, "wb") as fh:
        fh.write(MTV_HEADER.pack(MTV_MAGIC, *data.shape))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_mtv(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < MTV_HEADER.size:
        raise MetadataError(f"{path}: truncated header")
    magic, *shape = MTV_HEADER.unpack_from(raw)
    if magic != MTV_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    payload = raw[MTV_HEADER.size:]
    n = int(np.prod(shape))
    if len(payload) != 4 * n:
        raise MetadataError(f"{path}: payload has {len(payload)} bytes, shape {tuple(shape)} needs {4 * n}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def _read_array(path: Path) -> tuple[np.ndarray, tuple]:
    suffix = _suffix(path)
    if suffix == ".mtv":
        return read_mtv(path), (1.0, 1.0, 1.0)
    if suffix in (".nii", ".nii.gz"):
        import nibabel as nib

        try:
            img = nib.load(str(path))
        except Exception as exc:  # nibabel raises a zoo of types
            raise FormatError(f"{path}: {exc}") from exc
        data = np.asarray(img.dataobj)
        if data.ndim != 3:
            raise FormatError(f"{path}: expected 3D payload, got shape {data.shape}")
        zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
        if len(zooms) != 3 or min(zooms) <= 0:
            raise MetadataError(f"{path}: missing voxel spacing")
        return data, zooms
    raise FormatError(f"{path}: unknown extension {suffix!r}")


def load_volume(path, case_id: Optional[str] = None) -> Volume:
    path = Path(path)
    data, spacing = _read_array(path)
    if data.ndim != 3:
        raise FormatError(f"{path}: expected 3D payload, got shape {data.shape}")
    if case_id is None:
        case_id = path.name.split(".")[0]
    return Volume(data.astype(np.float64), spacing, case_id)


def load_mask(path) -> BinaryMask:
    data, _ = _read_array(Path(path))
    try:
        return BinaryMask(data)
    except ContractError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _write(path: Path, data: np.ndarray, spacing, dtype) -> None:
    suffix = _suffix(path)
    if suffix == ".mtv":
        write_mtv(path, data)
    elif suffix in (".nii", ".nii.gz"):
        import nibabel as nib

        img = nib.Nifti1Image(np.asarray(data, dtype=dtype), np.diag([*spacing, 1.0]))
        img.header.set_zooms(tuple(spacing))
        nib.save(img, str(path))
    else:
        raise FormatError(f"{path}: unknown extension {suffix!r}")


def save_volume(v: Volume, path) -> None:
    _write(Path(path), v.data, v.spacing, np.float32)


def save_mask(mask: BinaryMask, path, spacing=(1.0, 1.0, 1.0)) -> None:
    _write(Path(path), mask.data, spacing, np.uint8)


def save_map(data: np.ndarray, path, spacing=(1.0, 1.0, 1.0)) -> None:
    """Save a real-valued 3D field (distance map, uncertainty) as float32."""
    data = np.asarray(data)
    _check_3d(data, "map")
    _write(Path(path), data, spacing, np.float32)


# -- manifests --------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    image: Path
    mask: Optional[Path] = None


def read_manifest(path) -> list[ManifestEntry]:
    """Read a JSON manifest: ``{"cases": [{"id", "image", "mask"?}, ...]}``.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        rows = doc["cases"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a case manifest ({exc})") from exc
    entries = []
    for row in rows:
        mask = row.get("mask")
        entries.append(ManifestEntry(
            id=str(row["id"]),
            image=(path.parent / row["image"]).resolve(),
            mask=None if mask is None else (path.parent / mask).resolve(),
        ))
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    rows = []
    for e in entries:
        row = {"id": e.id, "image": rel(e.image)}
        if e.mask is not None:
            row["mask"] = rel(e.mask)
        rows.append(row)
    path.write_text(json.dumps({"cases": rows}, indent=2) + "\n")


def load_cases(manifest_path, target_shape=None, require_masks: bool = False) -> list[Case]:
    """Load every case in a manifest, optionally resize, then z-score."""
    cases = []
    for e in read_manifest(manifest_path):
        vol = load_volume(e.image, e.id)
        mask = load_mask(e.mask) if e.mask is not None else None
        if mask is None and require_masks:
            raise ContractError(f"case {e.id!r} has no mask")
        if target_shape is not None:
            vol = resize(vol, target_shape)
            mask = resize(mask, target_shape) if mask is not None else None
        vol = normalize(vol)
        cases.append(Case(vol, mask))
    return cases
