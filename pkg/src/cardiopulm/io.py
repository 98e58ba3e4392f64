"""Volume file formats: an uncompressed single-file NIfTI-1 subset and raw+JSON.

NIfTI support covers what the pipeline writes and what converters commonly
emit for CT: int16 or float32 payloads, no extensions, identity orientation.
Scaling slope/intercept are applied on load.

The raw format is a little-endian float32 payload (axis 0 fastest) with a
sidecar ``<stem>.json``::

    {"dims": [H, W, D], "spacing_mm": [x, y, z], "subject_id": ...,
     "scan_id": ..., "intensity_state": "raw_hu"}
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import SchemaError, ValidationError
from .volume import CtVolume, IntensityState, validate_volume

HEADER_SIZE = 348
VOX_OFFSET = 352
DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_INT16: ("i2", 16), DT_FLOAT32: ("f4", 32)}

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(endian: str) -> np.dtype:
    return np.dtype([(f[0], endian + f[1], *f[2:]) if f[1][0] not in "SU" else f for f in _HEADER_FIELDS])


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _ids_from_name(path: Path) -> tuple[str, str]:
    stem = path.name.split(".")[0]
    if "__" in stem:
        subject, scan = stem.split("__", 1)
        return subject, scan
    return stem, stem


def _read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    raw = path.read_bytes()
    if len(raw) < VOX_OFFSET:
        raise ValidationError(f"{path}: unreadable file, too short for a NIfTI-1 header")
    endian = "<"
    if int(np.frombuffer(raw[:4], "<i4")[0]) != HEADER_SIZE:
        endian = ">"
        if int(np.frombuffer(raw[:4], ">i4")[0]) != HEADER_SIZE:
            raise ValidationError(f"{path}: unreadable file, not a NIfTI-1 header")
    hdr = np.frombuffer(raw[:HEADER_SIZE], _header_dtype(endian))[0]
    if hdr["magic"] != b"n+1":
        raise ValidationError(f"{path}: only single-file NIfTI-1 ('n+1') is supported")

    ndim = int(hdr["dim"][0])
    dims = [int(d) for d in hdr["dim"][1 : ndim + 1]]
    if ndim < 3 or any(d != 1 for d in dims[3:]):
        raise ValidationError(f"{path}: expected a 3D volume, header dim={list(hdr['dim'])}")
    dims = dims[:3]
    datatype = int(hdr["datatype"])
    if datatype not in _DTYPES:
        raise ValidationError(f"{path}: unsupported datatype code {datatype}")

    spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
    if not all(s > 0 for s in spacing):
        raise ValidationError(f"{path}: non-positive spacing {spacing}")
    _check_orientation(hdr, path)

    offset = int(hdr["vox_offset"])
    if offset < VOX_OFFSET:
        raise ValidationError(f"{path}: vox_offset {offset} inside header")
    code, _ = _DTYPES[datatype]
    dt = np.dtype(endian + code)
    payload = raw[offset:]
    expected = dims[0] * dims[1] * dims[2]
    if len(payload) != expected * dt.itemsize:
        raise ValidationError(
            f"{path}: dim mismatch, header {tuple(dims)} needs {expected} voxels, "
            f"payload holds {len(payload) / dt.itemsize:g}"
        )
    data = np.frombuffer(payload, dt).reshape(dims, order="F")

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if datatype == DT_FLOAT32 and slope in (0.0, 1.0) and inter == 0.0:
        return data.astype(np.float32), spacing
    if slope == 0.0 or not np.isfinite(slope):
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    return (data.astype(np.float64) * slope + inter).astype(np.float32), spacing


def _check_orientation(hdr, path: Path) -> None:
    # Oblique or rotated acquisitions are out of scope.
    if int(hdr["sform_code"]) > 0:
        rot = np.stack([hdr["srow_x"][:3], hdr["srow_y"][:3], hdr["srow_z"][:3]])
        if np.any(rot - np.diag(np.diag(rot)) != 0) or np.any(np.diag(rot) <= 0):
            raise ValidationError(f"{path}: non-identity orientation (sform) not supported")
    if int(hdr["qform_code"]) > 0:
        if any(float(hdr[q]) != 0.0 for q in ("quatern_b", "quatern_c", "quatern_d")):
            raise ValidationError(f"{path}: non-identity orientation (qform) not supported")


def _write_nifti(v: CtVolume, path: Path, datatype: int) -> None:
    hdr = np.zeros((), _header_dtype("<"))
    code, bitpix = _DTYPES[datatype]
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *v.dims, 1, 1, 1, 1]
    hdr["datatype"] = datatype
    hdr["bitpix"] = bitpix
    hdr["pixdim"] = [1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["descrip"] = v.intensity_state.value.encode()
    hdr["sform_code"] = 1
    hdr["srow_x"] = [v.spacing[0], 0, 0, 0]
    hdr["srow_y"] = [0, v.spacing[1], 0, 0]
    hdr["srow_z"] = [0, 0, v.spacing[2], 0]
    hdr["magic"] = b"n+1"

    data = v.voxels
    if datatype == DT_INT16:
        rounded = np.rint(data)
        if np.any(rounded != data) or data.min() < -32768 or data.max() > 32767:
            raise ValidationError("int16 NIfTI needs integral voxel values within int16 range")
        data = rounded
    payload = np.asarray(data, dtype="<" + code).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(payload)


def _read_sidecar(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: unreadable sidecar: {exc}") from exc


def _read_raw(path: Path) -> tuple[np.ndarray, tuple[float, float, float], dict]:
    side_path = _sidecar_path(path)
    if not side_path.exists():
        raise ValidationError(f"{path}: raw payload without sidecar {side_path.name}")
    meta = _read_sidecar(side_path)
    try:
        dims = [int(d) for d in meta["dims"]]
        spacing = tuple(float(s) for s in meta["spacing_mm"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{side_path}: sidecar needs dims and spacing_mm ({exc})") from exc
    if len(dims) != 3 or len(spacing) != 3:
        raise SchemaError(f"{side_path}: dims and spacing_mm must have three entries")
    if not all(s > 0 for s in spacing):
        raise ValidationError(f"{side_path}: non-positive spacing {spacing}")
    raw = path.read_bytes()
    expected = dims[0] * dims[1] * dims[2]
    if len(raw) != 4 * expected:
        raise ValidationError(
            f"{path}: dim mismatch, sidecar {tuple(dims)} needs {expected} voxels, payload holds {len(raw) / 4:g}"
        )
    data = np.frombuffer(raw, "<f4").reshape(dims, order="F").astype(np.float32)
    return data, spacing, meta


def load_volume(path) -> CtVolume:
    """Read a ``.nii`` or ``.raw`` volume.

    Subject/scan ids come from a ``<stem>.json`` sidecar when present,
    otherwise from a ``<subject>__<scan>`` file name.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{path}: unreadable file (does not exist)")
    suffix = path.suffix.lower()
    if suffix == ".nii":
        data, spacing = _read_nifti(path)
        side = _sidecar_path(path)
        meta = _read_sidecar(side) if side.exists() else {}
        # pixdim is float32; recover the exact float64 spacing from the sidecar when they agree.
        exact = meta.get("spacing_mm")
        if exact is not None and len(exact) == 3:
            if all(np.float32(e) == np.float32(s) for e, s in zip(exact, spacing)):
                spacing = tuple(float(e) for e in exact)
    elif suffix == ".raw":
        data, spacing, meta = _read_raw(path)
    else:
        raise ValidationError(f"{path}: unsupported volume format '{suffix}' (use .nii or .raw)")

    subject, scan = _ids_from_name(path)
    try:
        state = IntensityState(meta.get("intensity_state", IntensityState.RAW_HU.value))
    except ValueError as exc:
        raise SchemaError(f"{path}: unknown intensity_state {meta.get('intensity_state')!r}") from exc
    vol = CtVolume(
        voxels=data,
        spacing=spacing,
        intensity_state=state,
        subject_id=str(meta.get("subject_id", subject)),
        scan_id=str(meta.get("scan_id", scan)),
    )
    return validate_volume(vol)


def save_volume(v: CtVolume, path, dtype: str = "float32") -> None:
    """Write ``v`` so that :func:`load_volume` reproduces dims, spacing and voxels exactly."""
    path = Path(path)
    sidecar = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing),
        "subject_id": v.subject_id,
        "scan_id": v.scan_id,
        "intensity_state": v.intensity_state.value,
    }
    suffix = path.suffix.lower()
    try:
        if suffix == ".nii":
            datatype = {"float32": DT_FLOAT32, "int16": DT_INT16}.get(dtype)
            if datatype is None:
                raise ValidationError(f"unsupported NIfTI dtype {dtype!r}")
            _write_nifti(v, path, datatype)
        elif suffix == ".raw":
            path.write_bytes(np.asarray(v.voxels, dtype="<f4").tobytes(order="F"))
        else:
            raise ValidationError(f"{path}: unsupported volume format '{suffix}'")
        _sidecar_path(path).write_text(json.dumps(sidecar, indent=1))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write volume: {exc.strerror}", os.fspath(path)) from exc
