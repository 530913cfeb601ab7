import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epibatch.refine import (
    HuRange,
    MUSCLE_RANGE,
    RefineConfig,
    SAT_IMAT_RANGE,
    VAT_RANGE,
    VERTEBRA_IDS,
    compose_imat,
    compose_residual_muscle,
    compose_vat,
    crop_longitudinal,
    hu_threshold,
    hu_window_normalize,
    longitudinal_bounds,
    refine_masks,
    remove_small_components,
)


def _vol(shape=(4, 6, 6), fill=0.0):
    return np.full(shape, fill, dtype=np.float32)


# ------------------------------------------------------------ thresholds

def test_default_ranges_match_protocol():
    assert (MUSCLE_RANGE.lo, MUSCLE_RANGE.hi) == (-29, 150)
    assert (SAT_IMAT_RANGE.lo, SAT_IMAT_RANGE.hi) == (-190, -30)
    assert (VAT_RANGE.lo, VAT_RANGE.hi) == (-150, -50)


def test_hu_range_validates():
    with pytest.raises(ValueError):
        HuRange(10, 10)
    with pytest.raises(ValueError):
        HuRange(5, -5)


def test_threshold_inclusive_boundaries():
    img = _vol()
    mask = np.ones(img.shape, dtype=bool)
    for hu, keep in ((-29, True), (-30, False), (150, True), (151, False)):
        img[:] = hu
        out = hu_threshold(img, mask, MUSCLE_RANGE)
        assert out.all() == keep


def test_threshold_respects_mask():
    img = _vol(fill=100.0)
    mask = np.zeros(img.shape, dtype=bool)
    mask[0, 0, 0] = True
    out = hu_threshold(img, mask, MUSCLE_RANGE)
    assert out.sum() == 1 and out[0, 0, 0]


def test_threshold_empty_mask():
    img = _vol(fill=100.0)
    out = hu_threshold(img, np.zeros(img.shape, dtype=bool), MUSCLE_RANGE)
    assert not out.any()


def test_threshold_idempotent():
    rng = np.random.default_rng(0)
    img = rng.uniform(-300, 300, size=(3, 8, 8)).astype(np.float32)
    mask = rng.random((3, 8, 8)) < 0.6
    once = hu_threshold(img, mask, VAT_RANGE)
    twice = hu_threshold(img, once, VAT_RANGE)
    np.testing.assert_array_equal(once, twice)


def test_threshold_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        hu_threshold(_vol((2, 3, 3)), np.ones((2, 4, 4), dtype=bool), MUSCLE_RANGE)


# ------------------------------------------------------------ components

def test_four_voxel_component_removed():
    m = np.zeros((3, 6, 6), dtype=bool)
    m[1, 2:4, 2:4] = True  # 4 voxels, face-connected
    assert not remove_small_components(m).any()


def test_five_voxel_component_kept():
    m = np.zeros((3, 6, 6), dtype=bool)
    m[1, 2:4, 2:4] = True
    m[1, 4, 2] = True  # face-adjacent fifth voxel
    out = remove_small_components(m)
    np.testing.assert_array_equal(out, m)


def test_connectivity_6_vs_26():
    # two 4-voxel squares touching only diagonally: one component under 26,
    # two components under 6
    m = np.zeros((1, 6, 6), dtype=bool)
    m[0, 1:3, 1:3] = True
    m[0, 3:5, 3:5] = True
    gone = remove_small_components(m, RefineConfig(connectivity=6))
    assert not gone.any()
    kept = remove_small_components(m, RefineConfig(connectivity=26))
    np.testing.assert_array_equal(kept, m)


def test_remove_small_components_idempotent_and_monotone():
    rng = np.random.default_rng(4)
    for _ in range(10):
        m = rng.random((4, 7, 7)) < 0.3
        once = remove_small_components(m)
        np.testing.assert_array_equal(remove_small_components(once), once)
        assert once.sum() <= m.sum()
        assert not (once & ~m).any()


def test_min_component_validation():
    with pytest.raises(ValueError):
        RefineConfig(min_component_voxels=0)
    with pytest.raises(ValueError):
        RefineConfig(connectivity=18)


# ------------------------------------------------------------------- vat

def test_vat_organ_covers_everything():
    fat = np.ones((2, 5, 5), dtype=bool)
    organ = np.ones_like(fat)
    assert not compose_vat(fat, organ).any()


def test_vat_empty_organ_is_filtered_input():
    m = np.zeros((3, 6, 6), dtype=bool)
    m[0, 1:3, 1:3] = True  # 4 voxels, below the component floor
    m[2, 0:3, 0:2] = True  # 6 voxels, kept; slice gap keeps the blobs apart
    out = compose_vat(m, np.zeros_like(m))
    assert not out[0].any()
    np.testing.assert_array_equal(out[2], m[2])


def test_vat_half_covered_blob_dies():
    # 8-voxel blob; organ mask covers half; remaining 4 < 5 removed
    fat = np.zeros((1, 6, 6), dtype=bool)
    fat[0, 2, 1:5] = True
    fat[0, 3, 1:5] = True
    organ = np.zeros_like(fat)
    organ[0, 3, :] = True
    assert not compose_vat(fat, organ).any()


# ------------------------------------------------------------------ imat

def test_imat_subtracts_sat_and_vat():
    shape = (2, 4, 4)
    muscle = np.ones(shape, dtype=bool)
    fat = np.ones(shape, dtype=bool)
    sat = np.zeros(shape, dtype=bool)
    vat = np.zeros(shape, dtype=bool)
    sat[0] = True
    vat[1, 0] = True
    out = compose_imat([muscle], fat, sat, vat)
    assert not out[0].any()
    assert not out[1, 0].any()
    assert out[1, 1:].all()


def test_imat_requires_muscle_and_fat():
    shape = (1, 3, 3)
    muscle = np.zeros(shape, dtype=bool)
    fat = np.ones(shape, dtype=bool)
    out = compose_imat([muscle], fat, np.zeros(shape, bool), np.zeros(shape, bool))
    assert not out.any()


def test_imat_union_over_muscle_masks():
    shape = (1, 4, 4)
    m1 = np.zeros(shape, dtype=bool)
    m2 = np.zeros(shape, dtype=bool)
    m1[0, 0] = True
    m2[0, 2] = True
    fat = np.ones(shape, dtype=bool)
    out = compose_imat([m1, m2], fat, np.zeros(shape, bool), np.zeros(shape, bool))
    assert out[0, 0].all() and out[0, 2].all() and not out[0, 1].any()


def test_residual_muscle_subtraction():
    total = np.ones((1, 4, 4), dtype=bool)
    sub = np.zeros_like(total)
    sub[0, :2] = True
    out = compose_residual_muscle(total, [sub])
    assert not out[0, :2].any() and out[0, 2:].all()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_imat_disjoint_from_sat_and_vat_property(seed):
    rng = np.random.default_rng(seed)
    shape = (4, 6, 6)
    muscles = [rng.random(shape) < 0.5 for _ in range(3)]
    fat = rng.random(shape) < 0.5
    sat = rng.random(shape) < 0.4
    vat = rng.random(shape) < 0.4
    imat = compose_imat(muscles, fat, sat, vat)
    assert not (imat & sat).any()
    assert not (imat & vat).any()
    assert not (imat & ~fat).any()


# ------------------------------------------------------------------ crop

def _vertebra_volume(spans):
    """spans: {vertebra_name: (lo_slice, hi_slice)} on a 12-slice volume."""
    v = np.zeros((12, 4, 4), dtype=np.uint8)
    for name, (lo, hi) in spans.items():
        v[lo : hi + 1, 1, 1] = VERTEBRA_IDS[name]
    return v


def test_crop_full_span_unchanged():
    # axis 0 increases toward the head: L4 at low indices, T1 at high ones
    vol = np.arange(12 * 16, dtype=np.float32).reshape(12, 4, 4)
    verts = _vertebra_volume({"T1": (9, 11), "L4": (0, 2)})
    out = crop_longitudinal(vol, verts)
    np.testing.assert_array_equal(out, vol)


def test_crop_highest_detected_fallback():
    # T1 absent; highest vertebra present is T3 -> span ends at its top slice
    vol = np.arange(12 * 16, dtype=np.float32).reshape(12, 4, 4)
    verts = _vertebra_volume({"T3": (8, 10), "L2": (5, 6), "L4": (1, 2)})
    lo, hi = longitudinal_bounds(verts)
    assert (lo, hi) == (1, 10)
    np.testing.assert_array_equal(crop_longitudinal(vol, verts), vol[1:11])


def test_crop_bottom_clamps_at_requested_vertebra():
    # L5 sits below L4 and must not extend the crop
    verts = _vertebra_volume({"T2": (9, 10), "L4": (3, 4), "L5": (1, 2)})
    lo, hi = longitudinal_bounds(verts)
    assert (lo, hi) == (3, 10)


def test_crop_empty_vertebra_map_errors():
    verts = np.zeros((5, 3, 3), dtype=np.uint8)
    with pytest.raises(ValueError, match="vertebra"):
        longitudinal_bounds(verts)


def test_crop_unknown_vertebra_name():
    verts = _vertebra_volume({"T1": (0, 1)})
    with pytest.raises(ValueError, match="unknown vertebra"):
        longitudinal_bounds(verts, top="T99")


# ----------------------------------------------------------- windowing

def test_window_reference_points():
    img = np.array([[-500.0, -160.0, 40.0, 240.0, 900.0]], dtype=np.float32)
    out = hu_window_normalize(img)
    np.testing.assert_allclose(out, [[-1.0, -1.0, 0.0, 1.0, 1.0]], atol=1e-7)


def test_window_monotone():
    xs = np.linspace(-700, 700, 301, dtype=np.float32)
    out = hu_window_normalize(xs)
    assert (np.diff(out) >= 0).all()
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_window_custom_parameters():
    out = hu_window_normalize(np.array([100.0], dtype=np.float32), width=200, level=100)
    assert out[0] == pytest.approx(0.0)


# ------------------------------------------------------------- pipeline

def _pipeline_inputs():
    rng = np.random.default_rng(9)
    shape = (4, 8, 8)
    image = rng.uniform(-250, 250, size=shape).astype(np.float32)
    masks = {
        "organ_bone": rng.random(shape) < 0.2,
        "sat": rng.random(shape) < 0.3,
        "vat_region": rng.random(shape) < 0.3,
        "muscle_psoas": rng.random(shape) < 0.4,
        "muscle_rectus": rng.random(shape) < 0.4,
        "total_muscle": rng.random(shape) < 0.6,
    }
    return image, masks


def test_refine_masks_output_keys_and_disjointness():
    image, masks = _pipeline_inputs()
    out = refine_masks(image, masks)
    assert set(out) == {
        "muscle_psoas",
        "muscle_rectus",
        "residual_muscle",
        "sat",
        "vat",
        "imat",
    }
    assert not (out["imat"] & out["sat"]).any()
    assert not (out["imat"] & out["vat"]).any()
    # muscle family and fat family live in disjoint HU bands by construction
    muscle_union = out["muscle_psoas"] | out["muscle_rectus"] | out["residual_muscle"]
    for fat_key in ("sat", "vat", "imat"):
        assert not (muscle_union & out[fat_key]).any()


def test_refine_masks_requires_core_keys():
    image, masks = _pipeline_inputs()
    del masks["organ_bone"]
    with pytest.raises(ValueError, match="organ_bone"):
        refine_masks(image, masks)


def test_refine_masks_requires_some_muscle():
    image, masks = _pipeline_inputs()
    masks = {k: v for k, v in masks.items() if not k.startswith("muscle_") and k != "total_muscle"}
    with pytest.raises(ValueError, match="muscle"):
        refine_masks(image, masks)


def test_refine_masks_hu_bands_enforced():
    image, masks = _pipeline_inputs()
    out = refine_masks(image, masks)
    assert not out["muscle_psoas"][(image < -29) | (image > 150)].any()
    assert not out["sat"][(image < -190) | (image > -30)].any()
    assert not out["vat"][(image < -150) | (image > -50)].any()
