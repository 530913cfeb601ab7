"""Overlap and surface-distance metrics for label volumes.

Dice is voxel overlap.  HD95 is the 95th percentile of surface distances
between mask boundaries: a boundary voxel is a mask voxel with at least one
face-adjacent neighbour outside the mask (4-neighbourhood in 2D,
6-neighbourhood in 3D), with positions beyond the array border counting as
outside.  Distances are Euclidean in physical units, each axis scaled by its
spacing.  By default the percentile is taken over the union of both directed
distance multisets; ``mode="max"`` instead takes the worse of the two
per-direction percentiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_same_shape, check_spacing


def dice_score(pred, ref):
    """Dice overlap ``2|P & R| / (|P| + |R|)`` of two boolean masks; 1.0 if both empty."""
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    check_same_shape(pred, ref, "masks")
    denom = int(pred.sum()) + int(ref.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, ref).sum()) / denom


def boundary_mask(mask):
    """Mask voxels with a face-adjacent non-member; the array border is non-member."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim not in (2, 3):
        raise ValueError(f"expected a 2D or 3D mask, got rank {mask.ndim}")
    # interior = every face neighbour in-mask; shifted-in border positions stay False
    interior = mask.copy()
    full = (slice(None),) * mask.ndim
    for axis in range(mask.ndim):
        lead, trail = full[:axis], full[axis + 1 :]
        for dst, src in ((slice(0, -1), slice(1, None)), (slice(1, None), slice(0, -1))):
            shifted = np.zeros_like(mask)
            shifted[lead + (dst,) + trail] = mask[lead + (src,) + trail]
            interior &= shifted
    return mask & ~interior


def _nearest_distances(src, dst):
    """For each point in ``src``, Euclidean distance to its nearest ``dst`` point."""
    if src.shape[0] * dst.shape[0] <= 4096:
        # kd-tree construction dominates at this size
        diff = src[:, None, :] - dst[None, :, :]
        return np.sqrt((diff * diff).sum(axis=-1)).min(axis=1)
    tree = cKDTree(dst)
    distances, _ = tree.query(src, k=1)
    return np.asarray(distances, dtype=np.float64)


def surface_distances(from_mask, to_mask, spacing=None):
    """Directed distances from each boundary voxel of ``from_mask`` to the nearest
    boundary voxel of ``to_mask``, in physical units.  Empty if ``from_mask`` has
    no boundary; raises if only ``to_mask`` is empty (no target to measure to).
    """
    from_mask = np.asarray(from_mask, dtype=bool)
    to_mask = np.asarray(to_mask, dtype=bool)
    check_same_shape(from_mask, to_mask, "masks")
    spacing = check_spacing(spacing, from_mask.ndim)

    src = np.argwhere(boundary_mask(from_mask)) * spacing
    if src.size == 0:
        return np.empty(0, dtype=np.float64)
    dst = np.argwhere(boundary_mask(to_mask)) * spacing
    if dst.size == 0:
        raise ValueError("target mask is empty; directed distance undefined")
    return _nearest_distances(src, dst)


def hd95(pred, ref, spacing=None, mode="union"):
    """95th percentile surface distance between two masks.

    Returns 0.0 when both masks are empty and None when exactly one is (the
    distance is undefined; callers decide how to aggregate).  ``mode="union"``
    pools both directed distance multisets before taking the percentile;
    ``mode="max"`` takes the maximum of the two per-direction percentiles.
    """
    if mode not in ("union", "max"):
        raise ValueError(f"unknown hd95 mode {mode!r}")
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    check_same_shape(pred, ref, "masks")
    pred_empty = not pred.any()
    ref_empty = not ref.any()
    if pred_empty and ref_empty:
        return 0.0
    if pred_empty or ref_empty:
        return None
    spacing = check_spacing(spacing, pred.ndim)
    # a non-empty mask always has boundary voxels, so neither point set is empty
    pred_pts = np.argwhere(boundary_mask(pred)) * spacing
    ref_pts = np.argwhere(boundary_mask(ref)) * spacing
    forward = _nearest_distances(pred_pts, ref_pts)
    backward = _nearest_distances(ref_pts, pred_pts)
    if mode == "union":
        return float(np.percentile(np.concatenate([forward, backward]), 95))
    return float(max(np.percentile(forward, 95), np.percentile(backward, 95)))


@dataclass(frozen=True)
class EvalReport:
    """Per-class and foreground-mean metrics for one (prediction, reference) pair."""

    per_class: dict
    mean_dice_fg: float
    mean_hd95_fg: float | None
    hd95_excluded: tuple

    def to_json(self):
        return {
            "per_class": {
                str(cid): {"dice": v["dice"], "hd95": v["hd95"]}
                for cid, v in self.per_class.items()
            },
            "mean_dice_fg": self.mean_dice_fg,
            "mean_hd95_fg": self.mean_hd95_fg,
            "hd95_excluded": list(self.hd95_excluded),
        }


def evaluate_pair(pred, ref, class_ids, spacing=None, hd95_mode="union"):
    """Per-class Dice and HD95 for two label maps over the given foreground ids.

    ``class_ids`` may be a ClassCatalog or an iterable of foreground ids; a
    label outside {0} plus those ids in either map is an error.  A class
    absent from both maps scores dice 1.0 and hd95 0.0 and is excluded from
    the foreground means, which run over classes present in at least one map.
    A class present in exactly one map scores dice 0.0 and hd95 None; those
    are excluded from the mean HD95 and listed in ``hd95_excluded``.
    """
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    check_same_shape(pred, ref, "label maps")
    if hasattr(class_ids, "class_ids"):
        class_ids = class_ids.class_ids
    class_ids = [int(c) for c in class_ids]
    if len(set(class_ids)) != len(class_ids):
        raise ValueError(f"duplicate class ids: {class_ids}")
    allowed = set(class_ids) | {0}
    observed = set(np.unique(pred).tolist()) | set(np.unique(ref).tolist())
    unknown = observed - allowed
    if unknown:
        raise ValueError(f"label map contains ids outside the catalog: {sorted(unknown)}")

    per_class = {}
    dice_values = []
    hd95_values = []
    excluded = []
    for cid in class_ids:
        ref_mask = ref == cid
        pred_mask = pred == cid
        d = dice_score(pred_mask, ref_mask)
        h = hd95(pred_mask, ref_mask, spacing, hd95_mode)
        per_class[cid] = {"dice": d, "hd95": h}
        if ref_mask.any() or pred_mask.any():
            dice_values.append(d)
            if h is None:
                excluded.append(cid)
            else:
                hd95_values.append(h)

    mean_dice = float(np.mean(dice_values)) if dice_values else 1.0
    mean_hd95 = float(np.mean(hd95_values)) if hd95_values else None
    return EvalReport(
        per_class=per_class,
        mean_dice_fg=mean_dice,
        mean_hd95_fg=mean_hd95,
        hd95_excluded=tuple(excluded),
    )
