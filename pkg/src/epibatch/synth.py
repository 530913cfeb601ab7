"""Synthetic 2D datasets with controllable per-class slice prevalence.

Each slice independently includes each class with its configured prevalence;
included classes render as filled disks with class-specific Gaussian
intensities over a noisy background, higher class ids overwriting lower ones
where disks collide.  Output goes to a corpus-format dataset directory.
Per-slice RNG streams are derived from (seed, slice_id), so generation order
does not affect the result.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_positive_int, generator_from_seed
from .formats import write_payload


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    prevalence: float
    mean_intensity: float
    intensity_sd: float
    blob_radius_range: tuple = (3, 6)

    def __post_init__(self):
        if not 0 < self.prevalence <= 1:
            raise ValueError(f"{self.name}: prevalence must be in (0,1], got {self.prevalence}")
        lo, hi = self.blob_radius_range
        if not (1 <= lo <= hi):
            raise ValueError(f"{self.name}: bad blob radius range {self.blob_radius_range}")
        if self.intensity_sd < 0:
            raise ValueError(f"{self.name}: negative intensity sd")


@dataclass(frozen=True)
class SynthSpec:
    n_patients: int
    slices_per_patient: int
    image_size: tuple = (32, 32)
    classes: tuple = ()
    background_mean: float = -280.0
    background_sd: float = 30.0
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.n_patients, "n_patients")
        check_positive_int(self.slices_per_patient, "slices_per_patient")
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.classes:
            raise ValueError("need at least one class")
        ids = [c.class_id for c in self.classes]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"class ids must be contiguous from 1, got {ids}")
        h, w = self.image_size
        max_r = max(c.blob_radius_range[1] for c in self.classes)
        if 2 * max_r + 1 > min(h, w):
            raise ValueError(
                f"image {h}x{w} too small for blobs of radius {max_r}"
            )

    def to_json(self):
        return {
            "n_patients": self.n_patients,
            "slices_per_patient": self.slices_per_patient,
            "image_size": list(self.image_size),
            "classes": [
                {
                    "class_id": c.class_id,
                    "name": c.name,
                    "prevalence": c.prevalence,
                    "mean_intensity": c.mean_intensity,
                    "intensity_sd": c.intensity_sd,
                    "blob_radius_range": list(c.blob_radius_range),
                }
                for c in self.classes
            ],
            "background_mean": self.background_mean,
            "background_sd": self.background_sd,
            "seed": self.seed,
        }


def paperlike_spec(n_patients=40, slices_per_patient=20, seed=0, image_size=(32, 32)):
    """Nine-class preset echoing the prevalence profile of abdominal CT tissue
    classes: two near-ubiquitous, a mid-prevalence band, and two rare classes.
    Intensity means are spaced across the usual soft-tissue display window so
    classes stay separable after windowing.
    """
    rows = [
        ("esm", 0.95),
        ("psoas", 0.70),
        ("quadratus", 0.22),
        ("rectus", 0.50),
        ("lateral_abd", 0.45),
        ("residual_muscle", 0.85),
        ("vat", 0.65),
        ("imat", 0.12),
        ("sat", 1.00),
    ]
    classes = tuple(
        ClassSpec(
            class_id=i + 1,
            name=name,
            prevalence=prev,
            mean_intensity=-140.0 + 40.0 * i,
            intensity_sd=8.0,
            blob_radius_range=(3, 6),
        )
        for i, (name, prev) in enumerate(rows)
    )
    return SynthSpec(
        n_patients=n_patients,
        slices_per_patient=slices_per_patient,
        image_size=image_size,
        classes=classes,
        seed=seed,
    )


PRESETS = {"paperlike": paperlike_spec}


def _render_slice(spec, slice_id):
    """Labels and image for one slice from its own RNG stream."""
    rng = generator_from_seed(spec.seed, "synth", slice_id)
    h, w = spec.image_size
    labels = np.zeros((h, w), dtype=np.uint8)
    image = rng.normal(spec.background_mean, spec.background_sd, size=(h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for cls in spec.classes:
        if rng.random() >= cls.prevalence:
            continue
        lo, hi = cls.blob_radius_range
        r = int(rng.integers(lo, hi + 1))
        cy = int(rng.integers(r, h - r))
        cx = int(rng.integers(r, w - r))
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        labels[disk] = cls.class_id
        image[disk] = rng.normal(cls.mean_intensity, cls.intensity_sd, size=int(disk.sum()))
    return labels, image.astype(np.float32)


def generate(spec, out_dir):
    """Write the dataset to ``out_dir`` and return a generation summary.

    Presence lists, pixel counts, and the frequency table are computed from
    the final label maps, after any overwriting between colliding disks.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_slices = spec.n_patients * spec.slices_per_patient

    entries = []
    frequency = {c.class_id: 0 for c in spec.classes}
    for slice_id in range(n_slices):
        labels, image = _render_slice(spec, slice_id)
        label_file = f"{slice_id:06d}.seg"
        image_file = f"{slice_id:06d}.img"
        write_payload(out / label_file, labels)
        write_payload(out / image_file, image)

        ids, counts = np.unique(labels, return_counts=True)
        present = {int(c): int(n) for c, n in zip(ids, counts) if c != 0}
        for cid in present:
            frequency[cid] += 1
        entries.append(
            {
                "id": slice_id,
                "patient": f"P{slice_id // spec.slices_per_patient:03d}",
                "file": label_file,
                "image": image_file,
                "classes": sorted(present),
                "pixel_counts": {str(c): present[c] for c in sorted(present)},
                "spacing": [1.0, 1.0],
            }
        )

    meta = {
        "classes": [{"id": c.class_id, "name": c.name} for c in spec.classes],
        "slices": entries,
        "frequency": {str(c): n for c, n in frequency.items()},
    }
    (out / "dataset.json").write_text(json.dumps(meta, separators=(",", ":")) + "\n", "utf-8")

    realized = {c.class_id: frequency[c.class_id] / n_slices for c in spec.classes}
    summary = {
        "n_slices": n_slices,
        "frequency": {str(c): n for c, n in frequency.items()},
        "realized_prevalence": {str(c): realized[c] for c in sorted(realized)},
        "nominal_prevalence": {str(c.class_id): c.prevalence for c in spec.classes},
        "spec": spec.to_json(),
    }
    (out / "synth_summary.json").write_text(
        json.dumps(summary, separators=(",", ":")) + "\n", "utf-8"
    )
    return summary
