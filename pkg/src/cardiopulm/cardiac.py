"""Handcrafted cardiac biomarkers forming the 32-channel z_card vector.

Every channel is a named, closed-form statistic of the cardiac ROI, and each
keeps the set of voxels it was computed from so attributions can be pushed
back onto the image.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, stats

from .errors import SchemaError, ValidationError
from .locator import CONN6
from .volume import HU_MAX, HU_MIN, MIN_DIM, CtVolume, IntensityState, clip_hu

CALC_HU = 130.0
FAT_WINDOW = (-190.0, -30.0)
SOFT_WINDOW = (-30.0, CALC_HU)  # open at both ends: disjoint from the fat window and the calcium threshold
N_BINS = 16
MAX_BLOBS = 64
D_CARD = 32

MOMENT_NAMES = ("moment_xx", "moment_yy", "moment_zz", "moment_xy", "moment_xz", "moment_yz")
CHANNELS = (
    ("calc_volume_fraction", "calc_mass_surrogate", "fat_fraction", "hu_mean", "hu_variance", "hu_skewness")
    + tuple(f"hist_{k:02d}" for k in range(N_BINS))
    + MOMENT_NAMES
    + ("heart_volume_fraction", "largest_calc_blob_fraction", "calc_blob_count", "fat_shell_thickness")
)
assert len(CHANNELS) == D_CARD


@dataclass(frozen=True)
class CardiacFeatureVector:
    values: np.ndarray
    voxel_support: tuple[np.ndarray, ...] | None = None
    roi_dims: tuple[int, int, int] | None = None
    channel_names: tuple[str, ...] = CHANNELS

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (len(self.channel_names),):
            raise ValidationError(f"feature vector needs {len(self.channel_names)} values, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValidationError("non-finite cardiac feature")
        object.__setattr__(self, "values", vals)

    def channel(self, name: str) -> float:
        return float(self.values[self.channel_names.index(name)])


def _support_masks(v: np.ndarray):
    calc = v >= CALC_HU
    fat = (v >= FAT_WINDOW[0]) & (v <= FAT_WINDOW[1])
    soft = (v > SOFT_WINDOW[0]) & (v < SOFT_WINDOW[1])
    return calc, fat, soft


def _histogram_bins(v: np.ndarray) -> np.ndarray:
    edges = np.linspace(HU_MIN, HU_MAX, N_BINS + 1)
    return np.clip(np.searchsorted(edges, v, side="right") - 1, 0, N_BINS - 1)


def extract_cardiac_features(roi: CtVolume, with_support: bool = True) -> CardiacFeatureVector:
    """Compute the 32 channels of a cardiac ROI (HU intensities required)."""
    if min(roi.dims) < MIN_DIM:
        raise ValidationError(f"cardiac ROI {roi.dims} smaller than {MIN_DIM}^3")
    if roi.intensity_state is IntensityState.NORMALIZED:
        raise ValidationError("cardiac features need HU intensities, got normalized ROI")
    if roi.intensity_state is IntensityState.RAW_HU:
        roi = clip_hu(roi)
    v = roi.voxels.astype(np.float64)
    n = v.size
    calc, fat, soft = _support_masks(v)

    flat = v.ravel()
    mean = flat.mean()
    var = flat.var()
    skew = float(stats.skew(flat)) if var > 0 else 0.0

    bins = _histogram_bins(flat)
    hist = np.bincount(bins, minlength=N_BINS) / n

    n_soft = int(soft.sum())
    if n_soft:
        coords = np.argwhere(soft).astype(np.float64)
        c = coords - coords.mean(axis=0)
        cov = c.T @ c / n_soft
        moments = [cov[0, 0], cov[1, 1], cov[2, 2], cov[0, 1], cov[0, 2], cov[1, 2]]
    else:
        moments = [0.0] * 6

    labels, n_blobs = ndimage.label(calc, structure=CONN6)
    if n_blobs:
        sizes = np.bincount(labels.ravel())[1:]
        largest_id = int(np.argmax(sizes)) + 1
        largest = sizes.max() / n
    else:
        largest_id = 0
        largest = 0.0

    boundary = soft & ~ndimage.binary_erosion(soft, structure=CONN6, border_value=0)
    n_boundary = int(boundary.sum())
    thickness = float(fat.sum()) / n_boundary if n_boundary else 0.0

    values = np.array(
        [calc.sum() / n, np.clip(v - CALC_HU, 0.0, None).sum() / n, fat.sum() / n, mean, var, skew]
        + list(hist)
        + moments
        + [n_soft / n, largest, min(1.0, n_blobs / MAX_BLOBS), thickness],
        dtype=np.float64,
    )

    support = None
    if with_support:
        every = np.arange(n, dtype=np.int64)
        calc_idx = np.flatnonzero(calc)
        fat_idx = np.flatnonzero(fat)
        soft_idx = np.flatnonzero(soft)
        largest_idx = np.flatnonzero(labels == largest_id) if n_blobs else np.empty(0, np.int64)
        order = np.argsort(bins, kind="stable")
        splits = np.cumsum(np.bincount(bins, minlength=N_BINS))[:-1]
        hist_idx = [np.sort(s) for s in np.split(order, splits)]
        support = (
            (calc_idx, calc_idx, fat_idx, every, every, every)
            + tuple(hist_idx)
            + (soft_idx,) * 6
            + (soft_idx, largest_idx, calc_idx, fat_idx)
        )
    return CardiacFeatureVector(values, support, roi.dims)


def write_feature_csv(path, rows: dict[str, np.ndarray]) -> None:
    """Cache feature vectors as CSV keyed by scan_id, one column per channel."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("scan_id",) + CHANNELS)
        for scan_id in sorted(rows):
            w.writerow([scan_id] + [repr(float(x)) for x in rows[scan_id]])


def read_feature_csv(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or tuple(header) != ("scan_id",) + CHANNELS:
            raise SchemaError(f"{path}: header does not match the {D_CARD} cardiac channels")
        return {row[0]: np.array([float(x) for x in row[1:]]) for row in r}
