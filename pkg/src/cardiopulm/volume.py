"""CT volume container and the standardization steps applied before analysis.

Arrays are indexed ``voxels[i, j, k]`` with axis 0 the patient left-right
direction, axis 1 anterior-posterior (posterior = larger index) and axis 2
craniocaudal. On disk axis 0 varies fastest.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import ValidationError

HU_MIN = -1000.0
HU_MAX = 1000.0
MIN_DIM = 8
DEFAULT_TARGET_MM = 1.5


class IntensityState(str, Enum):
    RAW_HU = "raw_hu"
    CLIPPED_HU = "clipped_hu"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class CtVolume:
    """Immutable 3D scalar grid with spacing and provenance.

    ``voxels`` is stored read-only; operations always return new volumes.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    intensity_state: IntensityState = IntensityState.RAW_HU
    subject_id: str = ""
    scan_id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.voxels)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"voxels must be a non-empty 3D array, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if arr.flags.writeable:
            arr = arr.copy()
            arr.flags.writeable = False
        object.__setattr__(self, "voxels", arr)

        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValidationError(f"spacing components must be positive, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "intensity_state", IntensityState(self.intensity_state))

        if self.intensity_state is IntensityState.CLIPPED_HU:
            if arr.size and (arr.min() < HU_MIN or arr.max() > HU_MAX):
                raise ValidationError("clipped_hu volume has voxels outside [-1000, 1000]")
        elif self.intensity_state is IntensityState.NORMALIZED:
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValidationError("normalized volume has voxels outside [0, 1]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    def with_voxels(self, voxels, **changes) -> "CtVolume":
        return replace(self, voxels=voxels, **changes)


@dataclass(frozen=True)
class RoiBox:
    origin: tuple[int, int, int]
    extent: tuple[int, int, int]
    method: str = "manual"
    truncated: bool = False
    center: tuple[float, float, float] | None = field(default=None, compare=False)

    def __post_init__(self):
        origin = tuple(int(o) for o in self.origin)
        extent = tuple(int(e) for e in self.extent)
        if len(origin) != 3 or len(extent) != 3:
            raise ValidationError("RoiBox origin and extent must be integer triples")
        if any(o < 0 for o in origin):
            raise ValidationError(f"RoiBox origin must be >= 0, got {origin}")
        if any(e <= 0 for e in extent):
            raise ValidationError(f"RoiBox extent must be > 0, got {extent}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "extent", extent)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extent))

    @property
    def box_center(self) -> tuple[float, ...]:
        return tuple(o + (e - 1) / 2.0 for o, e in zip(self.origin, self.extent))

    def fits(self, dims) -> bool:
        return all(o + e <= d for o, e, d in zip(self.origin, self.extent, dims))

    def to_json(self) -> dict:
        out = {"origin": list(self.origin), "extent": list(self.extent), "method": self.method}
        if self.truncated:
            out["truncated"] = True
        if self.center is not None:
            out["center"] = [float(c) for c in self.center]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "RoiBox":
        try:
            return cls(
                origin=tuple(obj["origin"]),
                extent=tuple(obj["extent"]),
                method=obj.get("method", "manual"),
                truncated=bool(obj.get("truncated", False)),
                center=tuple(obj["center"]) if obj.get("center") is not None else None,
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed ROI record: {exc}") from exc


def validate_volume(v: CtVolume) -> CtVolume:
    """Pipeline-level checks that in-memory intermediates may skip (minimum size)."""
    if min(v.dims) < MIN_DIM:
        raise ValidationError(f"volume dims {v.dims} below minimum {MIN_DIM} per axis")
    return v


def _require_state(v: CtVolume, *states: IntensityState, op: str) -> None:
    if v.intensity_state not in states:
        wanted = ", ".join(s.value for s in states)
        raise ValidationError(f"{op} needs intensity_state in {{{wanted}}}, got {v.intensity_state.value}")


def clip_hu(v: CtVolume) -> CtVolume:
    _require_state(v, IntensityState.RAW_HU, op="clip_hu")
    out = np.clip(v.voxels, HU_MIN, HU_MAX).astype(v.voxels.dtype, copy=False)
    return v.with_voxels(out, intensity_state=IntensityState.CLIPPED_HU)


def normalize_intensity(v: CtVolume) -> CtVolume:
    """Fixed min-max map of the clip window onto [0, 1]."""
    _require_state(v, IntensityState.CLIPPED_HU, op="normalize_intensity")
    out = (v.voxels.astype(np.float64) - HU_MIN) / (HU_MAX - HU_MIN)
    return v.with_voxels(out.astype(np.float32), intensity_state=IntensityState.NORMALIZED)


def resampled_dims(dims, spacing, target_mm: float) -> tuple[int, int, int]:
    return tuple(max(1, int(round(n * s / target_mm))) for n, s in zip(dims, spacing))


def resample_isotropic(v: CtVolume, target_mm: float = DEFAULT_TARGET_MM) -> CtVolume:
    """Trilinear resampling onto a ``target_mm`` isotropic grid.

    Voxel 0 keeps its world position; samples falling past the last input
    voxel are clamped to the edge value.
    """
    if not target_mm > 0:
        raise ValidationError(f"target_mm must be > 0, got {target_mm}")
    out_dims = resampled_dims(v.dims, v.spacing, target_mm)
    if out_dims == v.dims and all(s == target_mm for s in v.spacing):
        return v.with_voxels(v.voxels)

    scale = [target_mm / s for s in v.spacing]
    out = ndimage.affine_transform(
        v.voxels.astype(np.float64),
        matrix=np.diag(scale),
        offset=0.0,
        output_shape=out_dims,
        order=1,
        mode="nearest",
        prefilter=False,
    )
    if v.intensity_state is IntensityState.CLIPPED_HU:
        out = np.clip(out, HU_MIN, HU_MAX)
    elif v.intensity_state is IntensityState.NORMALIZED:
        out = np.clip(out, 0.0, 1.0)
    return v.with_voxels(out.astype(v.voxels.dtype), spacing=(target_mm,) * 3)


def crop_roi(v: CtVolume, box: RoiBox) -> CtVolume:
    if not box.fits(v.dims):
        raise ValidationError(f"ROI origin {box.origin} + extent {box.extent} exceeds dims {v.dims}")
    return v.with_voxels(v.voxels[box.slices])


def standardize(v: CtVolume, target_mm: float = DEFAULT_TARGET_MM) -> CtVolume:
    """Clip to the HU window and resample; the state every analysis stage expects."""
    if v.intensity_state is IntensityState.RAW_HU:
        v = clip_hu(v)
    return resample_isotropic(v, target_mm)
