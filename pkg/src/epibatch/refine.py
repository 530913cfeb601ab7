"""CT label refinement: HU thresholding, component filtering, tissue composition.

Raw anatomical masks (muscle subgroups, subcutaneous fat, a visceral
candidate region, an organ-and-bone mask, vertebra labels) are refined into
tissue classes by constraining each to its characteristic HU range,
subtracting organs and bone from visceral fat, removing small connected
components, composing intermuscular fat from the muscle regions, and
cropping the volume to a vertebra-delimited longitudinal span.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import check_same_shape


@dataclass(frozen=True)
class HuRange:
    """Closed HU interval [lo, hi]; both bounds inclusive."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")

    def contains(self, values):
        values = np.asarray(values)
        return (values >= self.lo) & (values <= self.hi)


MUSCLE_RANGE = HuRange(-29, 150)
SAT_IMAT_RANGE = HuRange(-190, -30)
VAT_RANGE = HuRange(-150, -50)


@dataclass(frozen=True)
class RefineConfig:
    muscle_range: HuRange = MUSCLE_RANGE
    sat_imat_range: HuRange = SAT_IMAT_RANGE
    vat_range: HuRange = VAT_RANGE
    min_component_voxels: int = 5
    connectivity: int = 6

    def __post_init__(self):
        if self.min_component_voxels < 1:
            raise ValueError(f"min_component_voxels must be >= 1, got {self.min_component_voxels}")
        if self.connectivity not in (6, 26):
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")

    def to_json(self):
        return {
            "muscle_range": [self.muscle_range.lo, self.muscle_range.hi],
            "sat_imat_range": [self.sat_imat_range.lo, self.sat_imat_range.hi],
            "vat_range": [self.vat_range.lo, self.vat_range.hi],
            "min_component_voxels": self.min_component_voxels,
            "connectivity": self.connectivity,
        }

    @classmethod
    def from_json(cls, data):
        kwargs = {}
        for name in ("muscle_range", "sat_imat_range", "vat_range"):
            if name in data:
                kwargs[name] = HuRange(*data[name])
        for name in ("min_component_voxels", "connectivity"):
            if name in data:
                kwargs[name] = int(data[name])
        return cls(**kwargs)


def hu_threshold(image, mask, hu_range):
    """Restrict a binary mask to voxels whose HU lies in the closed range."""
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    check_same_shape(image, mask, "image and mask")
    return mask & hu_range.contains(image)


def remove_small_components(mask, config=RefineConfig()):
    """Clear connected components smaller than the configured voxel count.

    Face adjacency (6-connectivity) by default; 26 joins diagonal neighbours.
    3D masks only.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"expected a 3D mask, got rank {mask.ndim}")
    structure = ndimage.generate_binary_structure(3, 1 if config.connectivity == 6 else 3)
    labeled, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return mask
    counts = np.bincount(labeled.ravel())
    keep = counts >= config.min_component_voxels
    keep[0] = False
    return keep[labeled]


def compose_vat(fat_thresholded, organ_bone_mask, config=RefineConfig()):
    """Visceral fat: thresholded candidate minus organs and bone, small bits removed."""
    fat_thresholded = np.asarray(fat_thresholded, dtype=bool)
    organ_bone_mask = np.asarray(organ_bone_mask, dtype=bool)
    check_same_shape(fat_thresholded, organ_bone_mask, "fat and organ masks")
    return remove_small_components(fat_thresholded & ~organ_bone_mask, config)


def compose_imat(muscle_masks, fat_by_range, sat, vat):
    """Intermuscular fat: fat-range voxels inside any muscle mask, minus SAT and VAT.

    Muscle masks are the raw anatomical regions, not HU-thresholded ones; the
    muscle HU range excludes fat, so thresholded masks would contain no fat
    voxels at all.
    """
    fat_by_range = np.asarray(fat_by_range, dtype=bool)
    sat = np.asarray(sat, dtype=bool)
    vat = np.asarray(vat, dtype=bool)
    if not muscle_masks:
        raise ValueError("need at least one muscle mask")
    union = np.zeros_like(fat_by_range)
    for m in muscle_masks:
        m = np.asarray(m, dtype=bool)
        check_same_shape(m, fat_by_range, "muscle mask and fat volume")
        union |= m
    check_same_shape(sat, fat_by_range, "sat and fat volume")
    check_same_shape(vat, fat_by_range, "vat and fat volume")
    return union & fat_by_range & ~sat & ~vat


def compose_residual_muscle(total_muscle, subgroup_masks):
    """Muscle voxels not claimed by any subgroup mask."""
    total = np.asarray(total_muscle, dtype=bool)
    residual = total.copy()
    for m in subgroup_masks:
        m = np.asarray(m, dtype=bool)
        check_same_shape(m, total, "subgroup and total muscle")
        residual &= ~m
    return residual


# Vertebra ids ascend toward the feet: thoracic T1..T12 then lumbar L1..L5.
VERTEBRA_IDS = {f"T{i}": i for i in range(1, 13)}
VERTEBRA_IDS.update({f"L{i}": 12 + i for i in range(1, 6)})


def _vertebra_id(v):
    if isinstance(v, str):
        try:
            return VERTEBRA_IDS[v.upper()]
        except KeyError:
            raise ValueError(f"unknown vertebra {v!r}") from None
    return int(v)


def longitudinal_bounds(vertebra_labels, top="T1", bottom="L4", axis=0):
    """Inclusive slice bounds spanning the highest and lowest detected vertebrae.

    ``top`` and ``bottom`` clamp the search: vertebrae above ``top`` or below
    ``bottom`` are ignored.  Along ``axis`` the index is assumed to increase
    toward the head, so the span runs from the inferior-most slice of the
    lowest detected vertebra to the superior-most slice of the highest one.
    """
    labels = np.asarray(vertebra_labels)
    top_id = _vertebra_id(top)
    bottom_id = _vertebra_id(bottom)
    if top_id > bottom_id:
        raise ValueError(f"top vertebra {top!r} lies below bottom {bottom!r}")
    present = [v for v in np.unique(labels) if top_id <= v <= bottom_id]
    if not present:
        raise ValueError(f"no vertebrae detected in the {top}..{bottom} span")
    highest = int(min(present))
    lowest = int(max(present))
    other_axes = tuple(i for i in range(labels.ndim) if i != axis)
    hi_slices = np.any(labels == highest, axis=other_axes)
    lo_slices = np.any(labels == lowest, axis=other_axes)
    hi = int(np.max(np.nonzero(hi_slices)[0]))
    lo = int(np.min(np.nonzero(lo_slices)[0]))
    if lo > hi:
        raise ValueError(
            f"vertebra geometry inverted: lowest vertebra starts at slice {lo}, "
            f"highest ends at {hi}"
        )
    return lo, hi


def crop_longitudinal(volume, vertebra_labels, top="T1", bottom="L4", axis=0):
    """Crop a volume to the vertebra-delimited longitudinal span (inclusive)."""
    volume = np.asarray(volume)
    labels = np.asarray(vertebra_labels)
    check_same_shape(volume, labels, "volume and vertebra labels")
    lo, hi = longitudinal_bounds(labels, top, bottom, axis)
    index = [slice(None)] * volume.ndim
    index[axis] = slice(lo, hi + 1)
    return volume[tuple(index)]


def hu_window_normalize(image, width=400, level=40):
    """Window HU to [level-width/2, level+width/2] and map linearly onto [-1, 1]."""
    if width <= 0:
        raise ValueError(f"width must be positive, got {width}")
    image = np.asarray(image, dtype=np.float64)
    half = width / 2.0
    clipped = np.clip(image, level - half, level + half)
    return (clipped - level) / half


def refine_masks(image, masks, config=RefineConfig()):
    """Run the full composition over a dict of raw masks.

    Expects keys ``organ_bone``, ``sat``, ``vat_region`` plus one or more
    ``muscle_<name>`` entries and optionally ``total_muscle``; returns refined
    binary masks keyed by tissue (muscle subgroups keep their names, plus
    ``residual_muscle`` when a total was given, ``sat``, ``vat``, ``imat``).
    """
    image = np.asarray(image)
    required = ("organ_bone", "sat", "vat_region")
    for key in required:
        if key not in masks:
            raise ValueError(f"missing mask {key!r}")
    muscle_keys = sorted(k for k in masks if k.startswith("muscle_"))
    if not muscle_keys and "total_muscle" not in masks:
        raise ValueError("no muscle masks given")

    fat_by_range = hu_threshold(image, np.ones_like(image, dtype=bool), config.sat_imat_range)
    sat = hu_threshold(image, masks["sat"], config.sat_imat_range)
    vat = compose_vat(
        hu_threshold(image, masks["vat_region"], config.vat_range),
        masks["organ_bone"],
        config,
    )

    raw_muscles = [np.asarray(masks[k], dtype=bool) for k in muscle_keys]
    refined = {}
    for key, raw in zip(muscle_keys, raw_muscles):
        refined[key] = hu_threshold(image, raw, config.muscle_range)
    all_raw_muscles = list(raw_muscles)
    if "total_muscle" in masks:
        total = np.asarray(masks["total_muscle"], dtype=bool)
        all_raw_muscles.append(total)
        residual = compose_residual_muscle(total, raw_muscles)
        refined["residual_muscle"] = hu_threshold(image, residual, config.muscle_range)

    refined["sat"] = sat
    refined["vat"] = vat
    refined["imat"] = compose_imat(all_raw_muscles, fat_by_range, sat, vat)
    return refined
