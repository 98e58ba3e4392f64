import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cardiopulm.errors import ValidationError
from cardiopulm.locator import body_mask, locate_heart_roi, lung_mask, roi_around
from cardiopulm.phantom import PhantomSpec, generate_phantom, heart_masks
from cardiopulm.volume import CtVolume, standardize

from conftest import make_spec


def test_body_mask_coverage_and_heart(clean_phantom):
    body = body_mask(clean_phantom)
    assert body.mean() >= 0.30
    heart, _ = heart_masks(make_spec(seed=7))
    assert np.all(body[heart])


def test_body_mask_all_air():
    with pytest.raises(ValidationError, match="no body"):
        body_mask(CtVolume(np.full((16, 16, 16), -1000.0), (1, 1, 1)))


def test_two_disjoint_lungs(clean_masks):
    _, (left, right) = clean_masks
    assert left.any() and right.any()
    assert not np.any(left & right)
    assert np.nonzero(left)[0].mean() < np.nonzero(right)[0].mean()


def test_no_lungs_is_error():
    v = standardize(generate_phantom(PhantomSpec(seed=1, include_lungs=False)))
    with pytest.raises(ValidationError):
        lung_mask(v, body_mask(v))


def test_severe_effusion_keeps_two_lungs():
    v = standardize(generate_phantom(make_spec(seed=2, pleural_effusion=1.0)))
    left, right = lung_mask(v, body_mask(v))
    assert left.sum() > 0 and right.sum() > 0


def test_locate_matches_planted_center():
    spec = make_spec(seed=3, heart_center=(50.0, 45.0, 49.0))
    roi = locate_heart_roi(standardize(generate_phantom(spec)), (48, 48, 48))
    assert np.linalg.norm(np.subtract(roi.box_center, spec.heart_center)) <= 5.0


def test_roi_clamped_near_edge():
    roi = roi_around((3.0, 190.0, 100.0), (200, 200, 200), (128, 128, 128))
    assert roi.extent == (128, 128, 128)
    assert roi.origin[0] == 0 and roi.origin[1] == 200 - 128
    assert roi.fits((200, 200, 200)) and not roi.truncated


def test_roi_truncated_when_volume_small():
    roi = roi_around((40.0, 40.0, 40.0), (96, 96, 96))
    assert roi.extent == (96, 96, 96) and roi.truncated
    assert roi.origin == (0, 0, 0)


@given(st.tuples(*[st.floats(-50, 300)] * 3), st.tuples(*[st.integers(16, 160)] * 3),
       st.tuples(*[st.integers(1, 200)] * 3))
@settings(max_examples=300)
def test_roi_always_inside(center, dims, extent):
    roi = roi_around(center, dims, extent)
    assert roi.fits(dims)
    assert all(o >= 0 for o in roi.origin)


def _embedded(base, offset, size=112):
    out = np.full((size,) * 3, -1000.0, dtype=np.float32)
    sl = tuple(slice(o, o + n) for o, n in zip(offset, base.dims))
    out[sl] = base.voxels
    return CtVolume(out, base.spacing, base.intensity_state)


@pytest.mark.parametrize("shift", [(3, 0, 0), (0, 5, 2), (7, 9, 11), (16, 16, 16)])
def test_translation_equivariance(shift):
    base = standardize(generate_phantom(make_spec(seed=5)))
    a = locate_heart_roi(_embedded(base, (0, 0, 0)), (48, 48, 48))
    b = locate_heart_roi(_embedded(base, shift), (48, 48, 48))
    assert np.subtract(b.origin, a.origin).tolist() == list(shift)


def test_locator_deterministic(clean_phantom):
    assert locate_heart_roi(clean_phantom, (48, 48, 48)) == locate_heart_roi(clean_phantom, (48, 48, 48))
