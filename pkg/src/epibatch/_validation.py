"""Shared input-validation and seeding helpers."""

from __future__ import annotations

import numpy as np

# Fixed tags for deriving independent named RNG streams from one run seed.
# Values are arbitrary but frozen: changing them changes every sampled stream.
STREAM_TAGS = {
    "sampler": 101,
    "init": 202,
    "synth": 303,
    "splits": 404,
}


def generator_from_seed(seed, stream=None, *extra):
    """Deterministic ``numpy.random.Generator`` for a seed and optional named stream.

    Sub-streams are derived from ``(seed, tag, *extra)`` entropy so that, e.g.,
    the sampler stream and the parameter-init stream of one run are independent
    but both reproducible from the single run seed.
    """
    seed = int(seed)
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    if stream is None:
        entropy = [seed]
    else:
        if stream not in STREAM_TAGS:
            raise ValueError(f"unknown stream {stream!r}; expected one of {sorted(STREAM_TAGS)}")
        entropy = [seed, STREAM_TAGS[stream], *map(int, extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def check_same_shape(a, b, what="arrays"):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch for {what}: {a.shape} vs {b.shape}")
    return a, b


def check_spacing(spacing, ndim):
    """Validate per-axis spacing; a scalar or None broadcasts to every axis."""
    if spacing is None:
        spacing = 1.0
    if np.isscalar(spacing):
        spacing = (float(spacing),) * ndim
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != ndim:
        raise ValueError(f"spacing has {len(spacing)} entries for a {ndim}-d array")
    if any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")
    return spacing


def check_positive_int(value, name):
    value = int(value)
    if value < 1:
        raise ValueError(f"{name} must be >= 1, got {value}")
    return value


def check_fraction(value, name, *, closed_right=False):
    value = float(value)
    hi_ok = value <= 1.0 if closed_right else value < 1.0
    if not (0.0 < value and hi_ok):
        rng = "(0, 1]" if closed_right else "(0, 1)"
        raise ValueError(f"{name} must be in {rng}, got {value}")
    return value
