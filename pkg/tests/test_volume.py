import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cardiopulm.errors import ValidationError
from cardiopulm.io import load_volume, save_volume
from cardiopulm.phantom import generate_phantom
from cardiopulm.volume import (CtVolume, IntensityState, RoiBox, clip_hu, crop_roi, normalize_intensity,
                               resample_isotropic, standardize)

from conftest import make_spec


def vol(arr, spacing=(1.0, 1.0, 1.0), state=IntensityState.RAW_HU):
    return CtVolume(np.asarray(arr, dtype=np.float32), spacing, state)


# --- types ------------------------------------------------------------------


def test_volume_is_immutable():
    v = vol(np.zeros((8, 8, 8)))
    with pytest.raises(ValueError):
        v.voxels[0, 0, 0] = 1.0


@pytest.mark.parametrize("spacing", [(0, 1, 1), (1, -1, 1), (1, 1, float("nan"))])
def test_bad_spacing_rejected(spacing):
    with pytest.raises(ValidationError):
        vol(np.zeros((8, 8, 8)), spacing)


def test_state_ranges_enforced():
    with pytest.raises(ValidationError):
        vol(np.full((8, 8, 8), 1500.0), state=IntensityState.CLIPPED_HU)
    with pytest.raises(ValidationError):
        vol(np.full((8, 8, 8), 1.5), state=IntensityState.NORMALIZED)


def test_roibox_invariants():
    with pytest.raises(ValidationError):
        RoiBox((-1, 0, 0), (4, 4, 4))
    with pytest.raises(ValidationError):
        RoiBox((0, 0, 0), (4, 0, 4))


# --- io -----------------------------------------------------------------------


def test_load_zero_volume(tmp_path):
    save_volume(vol(np.zeros((16, 16, 16))), tmp_path / "a.nii")
    v = load_volume(tmp_path / "a.nii")
    assert v.dims == (16, 16, 16)
    assert not v.voxels.any()
    assert v.intensity_state is IntensityState.RAW_HU


def test_dim_mismatch(tmp_path):
    save_volume(vol(np.zeros((16, 16, 16))), tmp_path / "a.nii")
    raw = (tmp_path / "a.nii").read_bytes()
    (tmp_path / "b.nii").write_bytes(raw[:-4])  # 4095 float32 voxels
    with pytest.raises(ValidationError, match="dim mismatch"):
        load_volume(tmp_path / "b.nii")


def test_phantom_round_trip_bit_identical(tmp_path):
    v = generate_phantom(make_spec(seed=3, dims=(48, 48, 48), emphysema=0.5), "S9", "S9_T0")
    for name, dtype in (("p.nii", "float32"), ("p.raw", "float32")):
        save_volume(v, tmp_path / name, dtype=dtype)
        back = load_volume(tmp_path / name)
        assert back.voxels.dtype == v.voxels.dtype
        assert np.array_equal(back.voxels, v.voxels)
        assert (back.subject_id, back.scan_id) == ("S9", "S9_T0")


def test_int16_round_trip(tmp_path):
    v = vol(np.arange(16 ** 3, dtype=np.float32).reshape(16, 16, 16) - 2000)
    save_volume(v, tmp_path / "i.nii", dtype="int16")
    assert np.array_equal(load_volume(tmp_path / "i.nii").voxels, v.voxels)


def test_anisotropic_spacing_round_trip(tmp_path):
    v = vol(np.ones((8, 8, 8)), spacing=(0.7, 0.7, 1.25))
    save_volume(v, tmp_path / "s.nii")
    assert load_volume(tmp_path / "s.nii").spacing == (0.7, 0.7, 1.25)
    os.remove(tmp_path / "s.json")  # header-only: float32 pixdim
    assert load_volume(tmp_path / "s.nii").spacing == tuple(float(np.float32(s)) for s in (0.7, 0.7, 1.25))


def test_scaling_applied_on_load(tmp_path):
    save_volume(vol(np.full((8, 8, 8), 10.0)), tmp_path / "x.nii", dtype="int16")
    raw = bytearray((tmp_path / "x.nii").read_bytes())
    struct.pack_into("<ff", raw, 112, 2.0, -5.0)  # scl_slope, scl_inter
    (tmp_path / "x.nii").write_bytes(bytes(raw))
    assert np.all(load_volume(tmp_path / "x.nii").voxels == 15.0)


def test_load_errors(tmp_path):
    with pytest.raises(ValidationError, match="unreadable"):
        load_volume(tmp_path / "missing.nii")
    (tmp_path / "junk.nii").write_bytes(b"\0" * 400)
    with pytest.raises(ValidationError):
        load_volume(tmp_path / "junk.nii")
    save_volume(vol(np.zeros((8, 8, 8))), tmp_path / "t.nii")
    raw = bytearray((tmp_path / "t.nii").read_bytes())
    struct.pack_into("<h", raw, 70, 8)  # datatype uint8: unsupported here
    (tmp_path / "u.nii").write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="datatype"):
        load_volume(tmp_path / "u.nii")
    raw = bytearray((tmp_path / "t.nii").read_bytes())
    struct.pack_into("<f", raw, 80, -1.0)  # pixdim[1]
    (tmp_path / "n.nii").write_bytes(bytes(raw))
    os.remove(tmp_path / "t.json")
    with pytest.raises(ValidationError, match="spacing"):
        load_volume(tmp_path / "n.nii")


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_save_read_only(tmp_path):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    with pytest.raises(OSError):
        save_volume(vol(np.zeros((8, 8, 8))), d / "a.nii")


def test_save_missing_dir_is_io_error(tmp_path):
    with pytest.raises(OSError):
        save_volume(vol(np.zeros((8, 8, 8))), tmp_path / "nope" / "a.nii")


# --- intensity ------------------------------------------------------------------


def test_clip_examples():
    out = clip_hu(vol(np.array([1500.0, -2000.0, 350.0]).reshape(1, 1, 3)))
    assert out.voxels.ravel().tolist() == [1000.0, -1000.0, 350.0]
    assert out.intensity_state is IntensityState.CLIPPED_HU
    with pytest.raises(ValidationError):
        clip_hu(out)


def test_normalize_endpoints():
    out = normalize_intensity(clip_hu(vol(np.array([-1000.0, 0.0, 1000.0]).reshape(1, 1, 3))))
    assert out.voxels.ravel().tolist() == [0.0, 0.5, 1.0]
    with pytest.raises(ValidationError):
        normalize_intensity(vol(np.zeros((2, 2, 2))))


hu_arrays = hnp.arrays(np.float32, (4, 3, 2), elements=st.floats(-3000, 3000, width=32))


@given(hu_arrays)
def test_clip_idempotent(a):
    once = clip_hu(vol(a))
    twice = np.clip(once.voxels, -1000, 1000)
    assert np.array_equal(once.voxels, twice)
    assert once.voxels.min() >= -1000 and once.voxels.max() <= 1000


@given(st.floats(-1000, 1000), st.floats(-1000, 1000))
def test_normalize_strictly_monotone(a, b):
    if a == b:
        return
    out = normalize_intensity(clip_hu(vol(np.array([a, b], dtype=np.float64).reshape(1, 1, 2).astype(np.float32))))
    lo, hi = out.voxels.ravel()
    if np.float32(a) < np.float32(b):
        assert lo <= hi
    # strictness holds whenever the float32 inputs are separated by more than output rounding
    if abs(float(np.float32(a)) - float(np.float32(b))) > 1e-3:
        assert (lo < hi) == (np.float32(a) < np.float32(b))


# --- resampling -------------------------------------------------------------------


@given(st.floats(-1000, 1000, width=32), st.sampled_from([0.5, 0.8, 1.0, 1.5, 2.0]),
       st.tuples(*[st.sampled_from([0.6, 1.0, 1.7, 2.5])] * 3))
@settings(max_examples=40)
def test_resample_constant_exact(c, target, spacing):
    v = vol(np.full((9, 7, 5), c), spacing)
    out = resample_isotropic(v, target)
    assert np.all(out.voxels == np.float32(c))
    assert out.spacing == (target,) * 3


def test_resample_linear_ramp_identity():
    ramp = np.broadcast_to(np.arange(12.0)[:, None, None], (12, 10, 8))
    out = resample_isotropic(vol(ramp), 1.0)
    assert np.max(np.abs(out.voxels - ramp)) <= 1e-5


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_resample_linear_field_analytic(axis):
    shape = [10, 10, 10]
    idx = np.arange(10.0)
    field = np.moveaxis(np.broadcast_to(idx, shape), -1, axis) * 3.0 - 7.0
    v = vol(field, spacing=(2.0, 2.0, 2.0))
    out = resample_isotropic(v, 1.0)
    pos = np.arange(out.dims[axis]) * 0.5  # input index at each output voxel
    interior = pos <= 9
    want = pos * 3.0 - 7.0
    got = np.moveaxis(out.voxels, axis, 0)[:, 5, 5]
    assert np.max(np.abs(got[interior] - want[interior])) <= 1e-5


def test_resample_dims_formula():
    out = resample_isotropic(vol(np.zeros((4, 4, 4)), (2.0, 2.0, 2.0)), 1.0)
    assert out.dims == (8, 8, 8)
    with pytest.raises(ValidationError):
        resample_isotropic(out, 0.0)


def test_resample_same_spacing_is_noop(rng):
    a = rng.normal(size=(9, 9, 9)).astype(np.float32)
    out = resample_isotropic(vol(a, (1.5,) * 3), 1.5)
    assert np.max(np.abs(out.voxels - a)) <= 1e-6


def test_resample_preserves_state():
    v = clip_hu(vol(np.full((6, 6, 6), 200.0), (2.0, 1.0, 1.0)))
    assert resample_isotropic(v, 1.0).intensity_state is IntensityState.CLIPPED_HU


# --- cropping -----------------------------------------------------------------------


def ramp8():
    return vol(np.arange(512, dtype=np.float32).reshape(8, 8, 8))


def test_crop_identity_and_corner():
    v = ramp8()
    assert np.array_equal(crop_roi(v, RoiBox((0, 0, 0), (8, 8, 8))).voxels, v.voxels)
    c = crop_roi(v, RoiBox((2, 2, 2), (4, 4, 4)))
    assert c.dims == (4, 4, 4)
    assert c.voxels[0, 0, 0] == v.voxels[2, 2, 2]
    assert c.spacing == v.spacing
    with pytest.raises(ValidationError):
        crop_roi(v, RoiBox((5, 0, 0), (4, 4, 4)))


@given(st.tuples(*[st.integers(0, 3)] * 3), st.tuples(*[st.integers(0, 2)] * 3), st.tuples(*[st.integers(1, 3)] * 3))
def test_crop_composes(o1, o2, e2):
    v = ramp8()
    b1 = RoiBox(o1, (5, 5, 5))
    b2 = RoiBox(o2, e2)
    inner = crop_roi(crop_roi(v, b1), b2)
    direct = crop_roi(v, RoiBox(tuple(a + b for a, b in zip(o1, o2)), e2))
    assert np.array_equal(inner.voxels, direct.voxels)


def test_standardize_clips_then_resamples():
    v = vol(np.full((8, 8, 8), 3000.0), (3.0, 3.0, 3.0))
    out = standardize(v, 1.5)
    assert out.dims == (16, 16, 16)
    assert out.intensity_state is IntensityState.CLIPPED_HU
    assert np.all(out.voxels == 1000.0)
