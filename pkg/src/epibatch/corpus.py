"""Dataset model: class catalog, per-slice class presence, patient-level splits.

A dataset directory holds ``dataset.json`` plus one label payload (and
optionally one image payload) per slice in the ``EPB1`` format.  The JSON
carries the class catalog, per-slice metadata (patient id, file names,
present classes, optional pixel counts and spacing), and optionally a
class-frequency table, which is recomputed and cross-checked on load.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_fraction, check_positive_int, generator_from_seed
from .formats import DTYPE_IMAGE, DTYPE_LABELS, read_payload

BACKGROUND_ID = 0


class DatasetError(ValueError):
    """Raised for malformed or internally inconsistent datasets."""


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered foreground classes; background is always id 0 and never listed."""

    classes: tuple[tuple[int, str], ...]
    background_id: int = BACKGROUND_ID

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple((int(c), str(n)) for c, n in self.classes))
        ids = [cid for cid, _ in self.classes]
        names = [name for _, name in self.classes]
        if ids != list(range(1, len(ids) + 1)):
            raise DatasetError(f"class ids must be contiguous from 1, got {ids}")
        if len(set(names)) != len(names) or any(not n for n in names):
            raise DatasetError(f"class names must be unique and non-empty, got {names}")

    @property
    def class_ids(self):
        return tuple(cid for cid, _ in self.classes)

    def name_of(self, class_id):
        for cid, name in self.classes:
            if cid == class_id:
                return name
        raise KeyError(class_id)

    def __len__(self):
        return len(self.classes)

    def to_json(self):
        return [{"id": cid, "name": name} for cid, name in self.classes]

    @classmethod
    def from_json(cls, entries):
        return cls(tuple((e["id"], e["name"]) for e in entries))


@dataclass(frozen=True)
class SliceRecord:
    """One axial slice: its patient, present foreground classes, and payload files."""

    slice_id: int
    patient_id: str
    present_classes: frozenset
    pixel_counts: dict | None = None
    label_file: str | None = None
    image_file: str | None = None
    spacing: tuple | None = None
    orientation: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "present_classes", frozenset(int(c) for c in self.present_classes))
        if BACKGROUND_ID in self.present_classes:
            raise DatasetError(f"slice {self.slice_id}: background listed as a present class")
        if self.pixel_counts is not None:
            counts = {int(c): int(n) for c, n in self.pixel_counts.items()}
            object.__setattr__(self, "pixel_counts", counts)
            if set(counts) != set(self.present_classes):
                raise DatasetError(
                    f"slice {self.slice_id}: pixel_counts keys {sorted(counts)} do not match "
                    f"present classes {sorted(self.present_classes)}"
                )
            if any(n <= 0 for n in counts.values()):
                raise DatasetError(f"slice {self.slice_id}: non-positive pixel count")


class SliceTable:
    """Immutable list of slice records plus a recomputed class-frequency index.

    ``frequency[c]`` counts the slices in which class ``c`` is present.  The
    table also indexes, per class, the slice ids containing it (the pools the
    samplers draw from) and the slice ids of each patient.
    """

    def __init__(self, records, catalog, stored_frequency=None):
        self.catalog = catalog
        self.records = tuple(records)
        if len({r.slice_id for r in self.records}) != len(self.records):
            raise DatasetError("duplicate slice ids")
        valid = set(catalog.class_ids)
        for rec in self.records:
            unknown = rec.present_classes - valid
            if unknown:
                raise DatasetError(f"slice {rec.slice_id}: unknown class ids {sorted(unknown)}")

        freq = {cid: 0 for cid in catalog.class_ids}
        pools = {cid: [] for cid in catalog.class_ids}
        patients = {}
        for rec in self.records:
            for cid in rec.present_classes:
                freq[cid] += 1
                pools[cid].append(rec.slice_id)
            patients.setdefault(rec.patient_id, []).append(rec.slice_id)
        self.frequency = freq
        self.class_pools = {cid: np.asarray(ids, dtype=np.int64) for cid, ids in pools.items()}
        self.patients = patients
        self.slice_ids = np.asarray([r.slice_id for r in self.records], dtype=np.int64)
        self._by_id = {r.slice_id: r for r in self.records}

        if stored_frequency is not None:
            stored = {int(c): int(n) for c, n in stored_frequency.items()}
            if stored != {c: n for c, n in freq.items()}:
                raise DatasetError(
                    f"stored frequency table {stored} does not match recomputed {freq}"
                )

    def __len__(self):
        return len(self.records)

    def __getitem__(self, slice_id):
        return self._by_id[slice_id]

    @property
    def empty_classes(self):
        """Classes present in no slice; samplers must not target these."""
        return tuple(sorted(c for c, n in self.frequency.items() if n == 0))

    def class_frequency(self, mode="slices"):
        """Class frequencies as slice counts (default) or total voxel counts."""
        if mode == "slices":
            return dict(self.frequency)
        if mode == "voxels":
            totals = {cid: 0 for cid in self.catalog.class_ids}
            for rec in self.records:
                if rec.pixel_counts is None:
                    raise DatasetError(
                        f"slice {rec.slice_id} has no pixel counts; voxel frequency unavailable"
                    )
                for cid, n in rec.pixel_counts.items():
                    totals[cid] += n
            return totals
        raise ValueError(f"unknown frequency mode {mode!r}")

    def subset(self, slice_ids):
        """New table over the given slice ids, with frequencies recomputed."""
        wanted = set(int(s) for s in slice_ids)
        missing = wanted - set(self._by_id)
        if missing:
            raise DatasetError(f"unknown slice ids in subset: {sorted(missing)[:5]}")
        return SliceTable([r for r in self.records if r.slice_id in wanted], self.catalog)


@dataclass(frozen=True)
class ImageVolume:
    """Dense intensity array with per-axis spacing and an orientation tag."""

    data: np.ndarray
    spacing: tuple = None
    orientation: str = "RAS"

    def __post_init__(self):
        data = np.asarray(self.data)
        object.__setattr__(self, "data", data)
        spacing = self.spacing if self.spacing is not None else (1.0,) * data.ndim
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != data.ndim:
            raise DatasetError(f"spacing {spacing} does not match rank {data.ndim}")
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume:
    """Dense class-id array with per-axis spacing and an orientation tag."""

    data: np.ndarray
    spacing: tuple = None
    orientation: str = "RAS"

    def __post_init__(self):
        data = np.asarray(self.data)
        object.__setattr__(self, "data", data)
        spacing = self.spacing if self.spacing is not None else (1.0,) * data.ndim
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != data.ndim:
            raise DatasetError(f"spacing {spacing} does not match rank {data.ndim}")
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self):
        return self.data.shape


class VolumeStore:
    """Read-only, lazily loading accessor for per-slice payloads.

    Stateless between calls, so one store may be shared across threads.
    """

    def __init__(self, root, table):
        self.root = Path(root)
        self._table = table
        self._max_class = max(table.catalog.class_ids) if len(table.catalog) else 0

    def _record(self, slice_id):
        try:
            return self._table[slice_id]
        except KeyError:
            raise DatasetError(f"unknown slice id {slice_id}") from None

    def labels(self, slice_id):
        rec = self._record(slice_id)
        if rec.label_file is None:
            raise DatasetError(f"slice {slice_id} has no label payload")
        arr = read_payload(self.root / rec.label_file)
        if arr.dtype != np.uint8:
            raise DatasetError(f"slice {slice_id}: label payload is not uint8")
        observed_max = int(arr.max(initial=0))
        if observed_max > self._max_class:
            raise DatasetError(
                f"slice {slice_id}: unknown class id {observed_max} in label payload "
                f"(catalog has {self._max_class} classes)"
            )
        return LabelVolume(arr, rec.spacing, rec.orientation or "RAS")

    def image(self, slice_id):
        rec = self._record(slice_id)
        if rec.image_file is None:
            raise DatasetError(f"slice {slice_id} has no image payload")
        arr = read_payload(self.root / rec.image_file)
        if arr.dtype != np.float32:
            raise DatasetError(f"slice {slice_id}: image payload is not float32")
        return ImageVolume(arr, rec.spacing, rec.orientation or "RAS")


@dataclass(frozen=True)
class Dataset:
    """Loaded dataset: catalog, slice table, and payload accessor."""

    catalog: ClassCatalog
    table: SliceTable
    volumes: VolumeStore
    root: Path = None

    def __iter__(self):
        return iter((self.catalog, self.table, self.volumes))


def load_dataset(root, verify_payloads=True):
    """Load a dataset directory into ``(catalog, table, volume accessor)``.

    The class-frequency table is recomputed from the per-slice presence lists;
    if ``dataset.json`` also stores one, the two must agree.  With
    ``verify_payloads`` every label payload is read and its observed class set
    and pixel counts are checked against the metadata.
    """
    root = Path(root)
    meta_path = root / "dataset.json"
    if not meta_path.is_file():
        raise DatasetError(f"{root}: no dataset.json")
    try:
        meta = json.loads(meta_path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{meta_path}: invalid JSON: {exc}") from exc

    catalog = ClassCatalog.from_json(meta.get("classes", []))
    slices = meta.get("slices", [])
    if not slices:
        raise DatasetError(f"{root}: no slices")

    records = []
    for entry in slices:
        records.append(
            SliceRecord(
                slice_id=int(entry["id"]),
                patient_id=str(entry["patient"]),
                present_classes=frozenset(int(c) for c in entry.get("classes", [])),
                pixel_counts=entry.get("pixel_counts"),
                label_file=entry.get("file"),
                image_file=entry.get("image"),
                spacing=tuple(entry["spacing"]) if "spacing" in entry else None,
                orientation=entry.get("orient"),
            )
        )
    table = SliceTable(records, catalog, stored_frequency=meta.get("frequency"))
    volumes = VolumeStore(root, table)

    if verify_payloads:
        for rec in table.records:
            labels = volumes.labels(rec.slice_id).data
            ids, counts = np.unique(labels, return_counts=True)
            observed = {int(c): int(n) for c, n in zip(ids, counts) if c != BACKGROUND_ID}
            if set(observed) != set(rec.present_classes):
                raise DatasetError(
                    f"slice {rec.slice_id}: payload classes {sorted(observed)} do not match "
                    f"metadata {sorted(rec.present_classes)}"
                )
            if rec.pixel_counts is not None and observed != rec.pixel_counts:
                raise DatasetError(
                    f"slice {rec.slice_id}: payload pixel counts {observed} do not match "
                    f"metadata {rec.pixel_counts}"
                )

    return Dataset(catalog, table, volumes, root)


@dataclass(frozen=True)
class SplitSpec:
    """Patient-level split: development/test fractions, k folds, optional subsampling."""

    dev_fraction: float = 0.85
    folds: int = 5
    fold: int = 0
    subsample_fraction: float | None = None
    seed: int = 0

    def __post_init__(self):
        check_fraction(self.dev_fraction, "dev_fraction")
        check_positive_int(self.folds, "folds")
        if not (0 <= self.fold < self.folds):
            raise ValueError(f"fold must be in [0, {self.folds}), got {self.fold}")
        if self.subsample_fraction is not None:
            check_fraction(self.subsample_fraction, "subsample_fraction", closed_right=True)


@dataclass(frozen=True)
class Splits:
    """Patient-disjoint slice-id lists for train / validation / test."""

    train: tuple
    validation: tuple
    test: tuple
    train_patients: tuple
    validation_patients: tuple
    test_patients: tuple

    def to_json(self):
        return {
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
            "train_patients": list(self.train_patients),
            "validation_patients": list(self.validation_patients),
            "test_patients": list(self.test_patients),
        }


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def make_splits(table, spec):
    """Patient-disjoint train/validation/test slice ids.

    Patients are shuffled once from the seed; the test set takes the first
    ``round(test_fraction * n_patients)`` patients (round half up), the rest
    form the development set, which is dealt into ``folds`` folds round-robin
    in shuffled order.  Fold ``spec.fold`` is validation, the others train.
    ``subsample_fraction`` keeps the first ``ceil(fraction * n)`` patients of
    the shuffled train and validation groups, so the retained set at a smaller
    fraction is always a prefix of the retained set at a larger one.
    """
    patients = sorted(table.patients)
    if not patients:
        raise DatasetError("empty table")
    rng = generator_from_seed(spec.seed, "splits")
    order = [patients[i] for i in rng.permutation(len(patients))]

    n_test = _round_half_up((1.0 - spec.dev_fraction) * len(order))
    test_patients = order[:n_test]
    dev_patients = order[n_test:]
    if len(dev_patients) < spec.folds:
        raise DatasetError(
            f"{len(dev_patients)} development patients is fewer than {spec.folds} folds"
        )

    val_patients = [p for i, p in enumerate(dev_patients) if i % spec.folds == spec.fold]
    train_patients = [p for i, p in enumerate(dev_patients) if i % spec.folds != spec.fold]

    if spec.subsample_fraction is not None:
        keep_train = math.ceil(spec.subsample_fraction * len(train_patients))
        keep_val = math.ceil(spec.subsample_fraction * len(val_patients))
        train_patients = train_patients[:keep_train]
        val_patients = val_patients[:keep_val]

    def slice_ids(group):
        ids = []
        for patient in group:
            ids.extend(table.patients[patient])
        return tuple(sorted(ids))

    return Splits(
        train=slice_ids(train_patients),
        validation=slice_ids(val_patients),
        test=slice_ids(test_patients),
        train_patients=tuple(train_patients),
        validation_patients=tuple(val_patients),
        test_patients=tuple(test_patients),
    )


def prevalence_report(table):
    """Percent of slices containing each class, ``100 * frequency / n_slices``."""
    if len(table) == 0:
        raise DatasetError("empty table")
    n = len(table)
    return {cid: 100.0 * table.frequency[cid] / n for cid in table.catalog.class_ids}
