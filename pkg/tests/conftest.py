"""Shared builders for the test suite.

Most tests want a SliceTable with a known presence structure and nothing
else; `make_table` builds one from (slice_id, patient, present_ids) rows.
Disk-backed datasets come from the synthetic generator so the loader and
payload formats get exercised on the way in.
"""

import numpy as np
import pytest

from epibatch.corpus import ClassCatalog, SliceRecord, SliceTable, load_dataset
from epibatch.synth import paperlike_spec, generate


def make_catalog(n_classes):
    return ClassCatalog(tuple((i, f"c{i}") for i in range(1, n_classes + 1)))


def make_record(slice_id, patient, present, counts=None):
    present = frozenset(present)
    if counts is None:
        counts = {c: 10 for c in present}
    return SliceRecord(
        slice_id=slice_id,
        patient_id=patient,
        present_classes=present,
        pixel_counts=counts,
    )


def make_table(rows, n_classes=None):
    """rows: iterable of (slice_id, patient_id, present_class_ids)."""
    rows = list(rows)
    if n_classes is None:
        n_classes = max((c for _, _, present in rows for c in present), default=0)
    records = [make_record(sid, pat, present) for sid, pat, present in rows]
    return SliceTable(records, make_catalog(n_classes))


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Small on-disk paperlike dataset shared across tests (read-only)."""
    root = tmp_path_factory.mktemp("tinydata") / "ds"
    spec = paperlike_spec(n_patients=6, slices_per_patient=4, seed=11, image_size=(16, 16))
    generate(spec, root)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


def random_mask(rng, shape, p=0.5):
    return rng.random(shape) < p


def assert_sorted_unique(seq):
    assert list(seq) == sorted(set(seq))
