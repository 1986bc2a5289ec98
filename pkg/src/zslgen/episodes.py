"""Episodic task sampling: batches of disjoint support/query class sets.

Randomness comes from the counter-based Philox generator with one
substream per (purpose, epoch, task) triple, derived through SeedSequence
spawn keys. Sampling a task is therefore a pure function of its substream:
batches replay exactly for a fixed seed and tasks could be drawn in any
order (or in parallel) without changing the result.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .datasets import Dataset

# Substream ids; epoch/task indices are appended to form the spawn key.
STREAM_INIT = 0
STREAM_EPISODE = 1
STREAM_TASK_NOISE = 2
STREAM_QUERY_NOISE = 3
STREAM_SYNTHESIS = 4
STREAM_CLASSIFIER = 5


class SamplingError(Exception):
    pass


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox stream for the given (seed, key) combination."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class TaskSet:
    """N classes with K instances each, ordered class-major."""

    class_ids: np.ndarray       # (N,)
    features: np.ndarray        # (N*K, feat_dim)
    labels: np.ndarray          # (N*K,) global class ids
    attribute_rows: np.ndarray  # (N, attr_dim), aligned with class_ids

    @property
    def n_way(self) -> int:
        return len(self.class_ids)

    @property
    def k_shot(self) -> int:
        return len(self.labels) // len(self.class_ids)

    @property
    def instance_attributes(self) -> np.ndarray:
        """Attribute row of each instance's class, (N*K, attr_dim)."""
        return np.repeat(self.attribute_rows, self.k_shot, axis=0)


@dataclass(frozen=True)
class Task:
    support: TaskSet
    query: TaskSet


def _eligible_classes(ds: Dataset, min_count: int) -> np.ndarray:
    seen = np.array(sorted(ds.split.seen), dtype=np.int64)
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    ok = seen[counts[seen] >= min_count]
    dropped = seen[counts[seen] < min_count]
    if dropped.size:
        warnings.warn(
            f"excluding {dropped.size} seen classes with fewer than {min_count} images: "
            f"{dropped.tolist()}"
        )
    return ok


def _draw_task_set(ds: Dataset, class_ids: np.ndarray, k: int, rng: np.random.Generator) -> TaskSet:
    rows = []
    for c in class_ids:
        idx = np.flatnonzero(ds.labels == c)
        rows.append(rng.choice(idx, size=k, replace=False))
    picked = np.concatenate(rows)
    return TaskSet(
        class_ids=class_ids.copy(),
        features=ds.features.values[picked],
        labels=ds.labels[picked],
        attribute_rows=ds.attributes.values[class_ids],
    )


def sample_task(
    ds: Dataset,
    n_way: int,
    k_sup: int,
    k_qry: int,
    rng: np.random.Generator,
) -> Task:
    """One task: 2*n_way distinct seen classes split into disjoint support
    and query halves, with k images per class drawn without replacement."""
    pool = _eligible_classes(ds, max(k_sup, k_qry))
    if pool.size < 2 * n_way:
        raise SamplingError(
            f"need {2 * n_way} eligible seen classes for {n_way}-way tasks, have {pool.size}"
        )
    chosen = rng.choice(pool, size=2 * n_way, replace=False)
    support = _draw_task_set(ds, chosen[:n_way], k_sup, rng)
    query = _draw_task_set(ds, chosen[n_way:], k_qry, rng)
    return Task(support=support, query=query)


def sample_batch(
    ds: Dataset,
    n_way: int,
    k_sup: int,
    k_qry: int,
    tasks_per_batch: int,
    seed: int,
    epoch: int,
) -> list[Task]:
    """One batch of independent tasks, each from its own rng substream."""
    return [
        sample_task(ds, n_way, k_sup, k_qry, substream(seed, STREAM_EPISODE, epoch, i))
        for i in range(tasks_per_batch)
    ]
