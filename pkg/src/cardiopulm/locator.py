"""Heart ROI localization from body and lung masks.

Stands in for a learned detector: the ROI is centred on the mediastinal
centroid, i.e. the centre of mass of body voxels lying laterally between the
two lungs, within their anterior-posterior span and the middle 60% of their
craniocaudal span. Any detector returning a :class:`RoiBox` can replace it.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volume import CtVolume, IntensityState, RoiBox

log = logging.getLogger(__name__)

BODY_HU = -500.0
LUNG_HU = -500.0
MIN_LUNG_FRACTION = 0.01
ROI_EXTENT = (128, 128, 128)
METHOD = "mediastinal-centroid-v1"

# 6-connectivity everywhere; the in-plane variant confines hole filling to axial slices.
CONN6 = ndimage.generate_binary_structure(3, 1)
_AXIAL6 = np.zeros((3, 3, 3), dtype=bool)
_AXIAL6[:, :, 1] = ndimage.generate_binary_structure(2, 1)


def _hu_voxels(v: CtVolume, op: str) -> np.ndarray:
    if v.intensity_state not in (IntensityState.RAW_HU, IntensityState.CLIPPED_HU):
        raise ValidationError(f"{op} needs HU intensities, got {v.intensity_state.value}")
    return v.voxels


def body_mask(v: CtVolume) -> np.ndarray:
    """Largest 6-connected component above -500 HU, holes filled per axial slice."""
    vox = _hu_voxels(v, "body_mask")
    labels, n = ndimage.label(vox > BODY_HU, structure=CONN6)
    if n == 0:
        raise ValidationError("no body found in volume")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    body = labels == int(np.argmax(sizes))
    return ndimage.binary_fill_holes(body, structure=_AXIAL6)


def lung_mask(v: CtVolume, body: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left and right lung masks (ordered by increasing axis-0 centroid)."""
    vox = _hu_voxels(v, "lung_mask")
    if body is None or body.shape != vox.shape or not body.any():
        raise ValidationError("lung_mask needs a non-empty body mask matching the volume")
    labels, n = ndimage.label((vox < LUNG_HU) & body, structure=CONN6)
    if n < 2:
        raise ValidationError(f"expected two lung components, found {n}")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    top = np.argsort(sizes, kind="stable")[::-1][:2]
    min_size = MIN_LUNG_FRACTION * body.sum()
    if sizes[top[1]] < min_size:
        raise ValidationError("fewer than two lung components above 1% of body volume")
    lungs = sorted((labels == int(t) for t in top), key=lambda m: np.nonzero(m)[0].mean())
    return lungs[0], lungs[1]


def _extent(mask: np.ndarray, axis: int) -> tuple[int, int]:
    other = tuple(a for a in range(3) if a != axis)
    idx = np.nonzero(mask.any(axis=other))[0]
    return int(idx[0]), int(idx[-1])


def mediastinal_centroid(body: np.ndarray, lungs: tuple[np.ndarray, np.ndarray]) -> tuple[float, float, float]:
    left, right = lungs
    lx = _extent(left, 0)
    rx = _extent(right, 0)
    x0, x1 = lx[1] + 1, rx[0] - 1
    if x1 < x0:
        raise ValidationError("lung bounding boxes overlap laterally; no mediastinum between them")
    ys = [_extent(m, 1) for m in lungs]
    zs = [_extent(m, 2) for m in lungs]
    y0, y1 = min(y[0] for y in ys), max(y[1] for y in ys)
    z0, z1 = min(z[0] for z in zs), max(z[1] for z in zs)
    span = z1 - z0 + 1
    zc0 = z0 + int(round(0.2 * span))
    zc1 = z0 + int(round(0.8 * span)) - 1
    region = body[x0 : x1 + 1, y0 : y1 + 1, zc0 : zc1 + 1]
    if not region.any():
        raise ValidationError("mediastinal region holds no body voxels")
    com = ndimage.center_of_mass(region)
    return (com[0] + x0, com[1] + y0, com[2] + zc0)


def roi_around(center, dims, extent=ROI_EXTENT, method: str = METHOD) -> RoiBox:
    """Fixed-extent box centred on ``center``, shifted to stay inside ``dims``."""
    extent = tuple(int(e) for e in extent)
    truncated = any(e > n for e, n in zip(extent, dims))
    if truncated:
        log.warning("ROI extent %s exceeds volume dims %s; truncating", extent, tuple(dims))
    ext = tuple(min(e, n) for e, n in zip(extent, dims))
    origin = []
    for c, e, n in zip(center, ext, dims):
        o = int(round(c - (e - 1) / 2.0))
        origin.append(min(max(o, 0), n - e))
    return RoiBox(origin=tuple(origin), extent=ext, method=method, truncated=truncated,
                  center=tuple(float(c) for c in center))


def locate_heart_roi(v: CtVolume, extent=ROI_EXTENT) -> RoiBox:
    body = body_mask(v)
    lungs = lung_mask(v, body)
    return roi_around(mediastinal_centroid(body, lungs), v.dims, extent)
