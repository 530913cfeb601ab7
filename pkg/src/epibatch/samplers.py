"""Deterministic, seedable batch-index generators over a SliceTable.

Three strategies: uniform draws with replacement, draws weighted by the
inverse frequency of each slice's rarest present class, and episodic batches
that first pick target classes uniformly and then draw support and query
slices from each class's pool.  All randomness flows from a single seed
through a named stream, so identical (seed, config, table) produce identical
batch streams.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import budget
from ._validation import check_positive_int, generator_from_seed

log = logging.getLogger(__name__)

STRATEGIES = ("random", "weighted", "episodic")


@dataclass(frozen=True)
class SamplerConfig:
    """Strategy choice plus every knob any strategy needs; unused knobs are inert."""

    strategy: str = "random"
    batch_size: int = 16
    classes_per_episode: int = 2
    supports_per_class: int = 3
    queries_per_class: int = 3
    episodes_per_epoch: int = 500
    supervision_source: str = "queries"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.classes_per_episode, "classes_per_episode")
        check_positive_int(self.supports_per_class, "supports_per_class")
        check_positive_int(self.queries_per_class, "queries_per_class")
        check_positive_int(self.episodes_per_epoch, "episodes_per_epoch")
        if self.supervision_source not in ("queries", "supports"):
            raise ValueError(f"supervision_source must be queries|supports, got {self.supervision_source!r}")

    def to_json(self):
        return {
            "strategy": self.strategy,
            "batch_size": self.batch_size,
            "classes_per_episode": self.classes_per_episode,
            "supports_per_class": self.supports_per_class,
            "queries_per_class": self.queries_per_class,
            "episodes_per_epoch": self.episodes_per_epoch,
            "supervision_source": self.supervision_source,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class Episode:
    """One episodic mini-batch: target classes with their support/query slices.

    ``replacement_classes`` lists targets whose pool was too small for fully
    disjoint without-replacement draws, and which therefore fell back to
    drawing with replacement.
    """

    target_classes: tuple
    supports: dict
    queries: dict
    replacement_classes: tuple = ()

    def to_json(self):
        return {
            "classes": list(self.target_classes),
            "supports": {str(c): [int(s) for s in self.supports[c]] for c in self.target_classes},
            "queries": {str(c): [int(s) for s in self.queries[c]] for c in self.target_classes},
            "replacement": list(self.replacement_classes),
        }


@dataclass(frozen=True)
class Batch:
    """Ordered slice ids for one optimizer step, tagged with how they were drawn."""

    slice_ids: tuple
    provenance: str
    episode: Episode | None = None

    def __post_init__(self):
        if not self.slice_ids:
            raise ValueError("empty batch")
        object.__setattr__(self, "slice_ids", tuple(int(s) for s in self.slice_ids))

    def __len__(self):
        return len(self.slice_ids)


def batch_record(iteration, batch):
    """JSON-ready record for one batch; key order is part of the stream format."""
    record = {"iter": int(iteration), "ids": list(batch.slice_ids)}
    if batch.episode is not None:
        record["episode"] = batch.episode.to_json()
    return record


def dumps_record(record):
    """Canonical one-line serialization for batch streams (compact, order-preserving)."""
    return json.dumps(record, separators=(",", ":"))


def weighted_probabilities(table):
    """Per-slice draw probabilities, proportional to 1/f of the rarest present class.

    For slice i with present classes C_i, the weight is 1/f_{c*} where c* is
    the class in C_i with the smallest slice-count frequency (ties broken by
    lowest class id), normalized over the pool.  Slices with no foreground
    class are excluded from the pool; excluding every slice is an error.
    """
    weights = {}
    excluded = []
    for rec in table.records:
        if not rec.present_classes:
            excluded.append(rec.slice_id)
            continue
        rarest = min(rec.present_classes, key=lambda c: (table.frequency[c], c))
        weights[rec.slice_id] = 1.0 / table.frequency[rarest]
    if not weights:
        raise ValueError("every slice is background-only; weighted sampling undefined")
    if excluded:
        log.info("weighted pool excludes %d background-only slices: %s%s",
                 len(excluded), excluded[:8], "..." if len(excluded) > 8 else "")
    total = sum(weights.values())
    return {sid: w / total for sid, w in weights.items()}


def iterations_per_epoch(strategy, train_size, config):
    """Steps per epoch: ceil(train_size / batch_size), or the fixed episode count."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "episodic":
        return budget.iterations_per_epoch(train_size, episodes_per_epoch=config.episodes_per_epoch)
    return budget.iterations_per_epoch(train_size, batch_size=config.batch_size)


class _SamplerBase(BaseEstimator):
    """Shared fit plumbing; subclasses implement _draw()."""

    def fit(self, table, y=None):
        if len(table) == 0:
            raise ValueError("empty table")
        self.table_ = table
        self.iteration_ = 0
        self.rng_ = generator_from_seed(self.seed, "sampler")
        self._bind(table)
        return self

    def _bind(self, table):
        pass

    def next_batch(self):
        if not hasattr(self, "table_"):
            raise RuntimeError("sampler not fitted; call fit(table) first")
        batch = self._draw()
        self.iteration_ += 1
        return batch

    def batches(self, n):
        """The next n batches as a list."""
        return [self.next_batch() for _ in range(n)]

    def iterations_per_epoch(self):
        raise NotImplementedError


class RandomSampler(_SamplerBase):
    """Uniform draws with replacement; optional shuffled-permutation mode.

    The default draws ``batch_size`` slices i.i.d. uniformly each call, the
    epoch being defined purely by iteration count.  ``mode="permutation"``
    instead walks a per-epoch shuffled permutation (last batch short).
    """

    def __init__(self, batch_size=16, seed=0, mode="replacement"):
        self.batch_size = batch_size
        self.seed = seed
        self.mode = mode

    def _bind(self, table):
        if self.mode not in ("replacement", "permutation"):
            raise ValueError(f"unknown mode {self.mode!r}")
        check_positive_int(self.batch_size, "batch_size")
        self._order = None
        self._cursor = 0

    def _draw(self):
        ids = self.table_.slice_ids
        if self.mode == "replacement":
            picks = ids[self.rng_.integers(0, len(ids), size=self.batch_size)]
            return Batch(tuple(picks), "uniform")
        if self._order is None or self._cursor >= len(ids):
            self._order = ids[self.rng_.permutation(len(ids))]
            self._cursor = 0
        picks = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += len(picks)
        return Batch(tuple(picks), "uniform")

    def iterations_per_epoch(self):
        return budget.iterations_per_epoch(len(self.table_), batch_size=self.batch_size)


class WeightedSampler(_SamplerBase):
    """Draws with replacement, biased toward slices whose rarest class is rarest."""

    def __init__(self, batch_size=16, seed=0):
        self.batch_size = batch_size
        self.seed = seed

    def _bind(self, table):
        check_positive_int(self.batch_size, "batch_size")
        probs = weighted_probabilities(table)
        self.pool_ids_ = np.asarray(sorted(probs), dtype=np.int64)
        p = np.asarray([probs[s] for s in self.pool_ids_], dtype=np.float64)
        self.probabilities_ = {int(s): float(v) for s, v in zip(self.pool_ids_, p)}
        self.excluded_slice_ids_ = tuple(
            int(s) for s in table.slice_ids if int(s) not in self.probabilities_
        )
        # inverse-CDF draws; cumulative sum pinned to 1 so the last bin is closed
        self._cdf = np.cumsum(p)
        self._cdf[-1] = 1.0

    def _draw(self):
        u = self.rng_.random(self.batch_size)
        picks = self.pool_ids_[np.searchsorted(self._cdf, u, side="right")]
        return Batch(tuple(picks), "weighted")

    def iterations_per_epoch(self):
        return budget.iterations_per_epoch(len(self.table_), batch_size=self.batch_size)


class EpisodicSampler(_SamplerBase):
    """Class-first batches: uniform target classes, then per-class support/query draws.

    Targets are drawn uniformly without replacement from classes that occur in
    at least one slice.  When a class pool holds at least
    ``supports_per_class + queries_per_class`` slices, supports and queries
    are disjoint without-replacement draws; smaller pools fall back to
    drawing with replacement and the class is flagged on the episode.
    """

    def __init__(
        self,
        classes_per_episode=2,
        supports_per_class=3,
        queries_per_class=3,
        episodes_per_epoch=500,
        supervision_source="queries",
        seed=0,
    ):
        self.classes_per_episode = classes_per_episode
        self.supports_per_class = supports_per_class
        self.queries_per_class = queries_per_class
        self.episodes_per_epoch = episodes_per_epoch
        self.supervision_source = supervision_source
        self.seed = seed

    def _bind(self, table):
        check_positive_int(self.classes_per_episode, "classes_per_episode")
        check_positive_int(self.supports_per_class, "supports_per_class")
        check_positive_int(self.queries_per_class, "queries_per_class")
        check_positive_int(self.episodes_per_epoch, "episodes_per_epoch")
        if self.supervision_source not in ("queries", "supports"):
            raise ValueError(f"supervision_source must be queries|supports, got {self.supervision_source!r}")
        eligible = [c for c in table.catalog.class_ids if table.frequency[c] > 0]
        skipped = table.empty_classes
        if skipped:
            log.info("episodic targets exclude empty classes %s", list(skipped))
        if len(eligible) < self.classes_per_episode:
            raise ValueError(
                f"need at least {self.classes_per_episode} non-empty classes, have {len(eligible)}"
            )
        self.eligible_classes_ = np.asarray(eligible, dtype=np.int64)

    def build_episode(self):
        """Draw one episode; does not advance the batch iteration counter."""
        n_s, n_q = self.supports_per_class, self.queries_per_class
        targets = self.rng_.choice(
            self.eligible_classes_, size=self.classes_per_episode, replace=False
        )
        supports, queries, flagged = {}, {}, []
        for cid in targets:
            cid = int(cid)
            pool = self.table_.class_pools[cid]
            if len(pool) >= n_s + n_q:
                perm = pool[self.rng_.permutation(len(pool))]
                supports[cid] = tuple(int(s) for s in perm[:n_s])
                queries[cid] = tuple(int(s) for s in perm[n_s : n_s + n_q])
            else:
                flagged.append(cid)
                if len(pool) >= n_s:
                    sup = self.rng_.choice(pool, size=n_s, replace=False)
                else:
                    sup = self.rng_.choice(pool, size=n_s, replace=True)
                supports[cid] = tuple(int(s) for s in sup)
                queries[cid] = tuple(int(s) for s in self.rng_.choice(pool, size=n_q, replace=True))
        episode = Episode(
            target_classes=tuple(int(c) for c in targets),
            supports=supports,
            queries=queries,
            replacement_classes=tuple(flagged),
        )
        self._check_membership(episode)
        return episode

    def _check_membership(self, episode):
        for cid in episode.target_classes:
            for sid in (*episode.supports[cid], *episode.queries[cid]):
                if cid not in self.table_[sid].present_classes:
                    raise AssertionError(f"slice {sid} drawn for class {cid} it does not contain")

    def _draw(self):
        episode = self.build_episode()
        groups = episode.queries if self.supervision_source == "queries" else episode.supports
        ids = [sid for cid in episode.target_classes for sid in groups[cid]]
        return Batch(tuple(ids), "episode", episode=episode)

    def iterations_per_epoch(self):
        return self.episodes_per_epoch


def make_sampler(table, config):
    """Build and fit the sampler an explicit SamplerConfig describes."""
    if config.strategy == "random":
        sampler = RandomSampler(batch_size=config.batch_size, seed=config.seed)
    elif config.strategy == "weighted":
        sampler = WeightedSampler(batch_size=config.batch_size, seed=config.seed)
    else:
        sampler = EpisodicSampler(
            classes_per_episode=config.classes_per_episode,
            supports_per_class=config.supports_per_class,
            queries_per_class=config.queries_per_class,
            episodes_per_epoch=config.episodes_per_epoch,
            supervision_source=config.supervision_source,
            seed=config.seed,
        )
    return sampler.fit(table)


def exposure_audit(sampler, epochs):
    """Per-epoch, per-class batch exposure counts.

    ``presence_count`` is the number of batches in the epoch containing at
    least one slice where the class is present; ``target_count`` counts
    batches that explicitly targeted the class (always 0 for non-episodic
    samplers).  Returns a list of dicts keyed epoch, class_id, target_count,
    presence_count.
    """
    check_positive_int(epochs, "epochs")
    table = sampler.table_
    class_ids = table.catalog.class_ids
    ipe = sampler.iterations_per_epoch()
    rows = []
    for epoch in range(epochs):
        presence = {c: 0 for c in class_ids}
        targets = {c: 0 for c in class_ids}
        for _ in range(ipe):
            batch = sampler.next_batch()
            seen = set()
            for sid in batch.slice_ids:
                seen.update(table[sid].present_classes)
            for c in seen:
                presence[c] += 1
            if batch.episode is not None:
                for c in batch.episode.target_classes:
                    targets[c] += 1
        for c in class_ids:
            rows.append(
                {
                    "epoch": epoch,
                    "class_id": c,
                    "target_count": targets[c],
                    "presence_count": presence[c],
                }
            )
    return rows
