"""Deterministic pipelined parameter-server training simulator.

Embedding rows live in a host store (values plus per-row update versions).
Training on a stream of batches is staged like a hardware pipeline; tick t
runs, in order:

    server(t-2)      apply the gradients the worker produced for batch t-2
    cache_sync(t-1)  merge the worker's post-update values for batch t-2
                     into cache lines batch t-1 prefetched, newest version
                     wins, so the worker never sees a stale snapshot
    worker(t-1)      consume cached row values for batch t-1, compute
                     gradients, push them to the server queue, and write
                     post-update values back into surviving cache lines
    prefetch(t)      read host rows batch t needs and insert cache lines
                     for rows not already cached (a cache hit skips the
                     host read entirely)

Because the worker writes post-update values (the exact floats the server
will later produce), a run with cache_sync enabled consumes precisely the
values a sequential loop would, for every cache lifetime LC, and the final
host state is bit-identical to the sequential one. With cache_sync disabled
a row whose cache line expired and was re-prefetched before the server
caught up is consumed stale; such consumptions are counted and logged, and
training diverges from the sequential run.

Cache lines carry a lifetime counter starting at LC, decremented only when
the worker actually consumes the line; at zero the line is evicted. Queues
between stages are FIFO with capacity LC and reject overflow.

Event log lines are `tick stage batch_id rows_touched versions` with
comma-joined row ids and versions ("-" when empty).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class PipelineConfig:
    lc: int = 4
    lr: float = 0.1
    cache_sync: bool = True

    def validate(self) -> None:
        if self.lc < 1:
            raise ValueError("cache lifetime lc must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class HostStore:
    """Authoritative rows plus a per-row count of applied updates."""

    rows: np.ndarray  # (R, D) float64
    versions: np.ndarray  # (R,) int64

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "HostStore":
        rows = np.array(rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError("host rows must be a 2-d array")
        return cls(rows=rows, versions=np.zeros(rows.shape[0], dtype=np.int64))

    def read(self, ids: np.ndarray):
        """Snapshot copies of the requested rows and versions."""
        return self.rows[ids].copy(), self.versions[ids].copy()

    def apply(self, ids: np.ndarray, grads: np.ndarray, lr: float) -> None:
        self.rows[ids] -= lr * grads
        self.versions[ids] += 1


class FifoQueue:
    """Bounded FIFO; stage handoff between pipeline neighbours."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.items: list = []
        self.peak = 0

    def push(self, item) -> None:
        if len(self.items) >= self.capacity:
            raise RuntimeError(f"queue overflow (capacity {self.capacity})")
        self.items.append(item)
        self.peak = max(self.peak, len(self.items))

    def pop(self):
        if not self.items:
            raise RuntimeError("pop from empty queue")
        return self.items.pop(0)

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class CacheLine:
    value: np.ndarray  # (D,)
    version: int
    lc: int


@dataclass
class PipelineStats:
    cache_hits: int = 0  # prefetches answered without a host read
    cache_misses: int = 0
    evictions: int = 0
    stale_consumptions: int = 0
    max_grad_queue: int = 0
    max_prefetch_queue: int = 0
    losses: list = field(default_factory=list)  # one entry per worker batch

    def as_dict(self) -> dict:
        return {
            "cache_hits": self.cache_hits,
            "cache_misses": self.cache_misses,
            "evictions": self.evictions,
            "stale_consumptions": self.stale_consumptions,
            "max_grad_queue": self.max_grad_queue,
            "max_prefetch_queue": self.max_prefetch_queue,
        }


def format_event(tick: int, stage: str, batch_id: int, rows, versions) -> str:
    r = ",".join(str(int(x)) for x in rows) or "-"
    v = ",".join(str(int(x)) for x in versions) or "-"
    return f"{tick} {stage} {batch_id} {r} {v}"


def make_batches(
    n_batches: int, n_rows: int, batch_size: int, seed: int
) -> list[np.ndarray]:
    """Sorted, distinct row ids per batch (one gradient per touched row)."""
    if n_batches < 1 or not 1 <= batch_size <= n_rows:
        raise ValueError("need n_batches >= 1 and 1 <= batch_size <= n_rows")
    rng = np.random.default_rng(seed)
    return [
        np.sort(rng.choice(n_rows, size=batch_size, replace=False))
        for _ in range(n_batches)
    ]


def _check_batches(batches, n_rows: int) -> list[np.ndarray]:
    if len(batches) == 0:
        raise ValueError("need at least one batch")
    out = []
    for b, ids in enumerate(batches):
        arr = np.asarray(ids, dtype=np.int64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError(f"batch {b}: must be a non-empty id list")
        if np.unique(arr).size != arr.size:
            raise ValueError(f"batch {b}: row ids must be distinct")
        if (arr < 0).any() or (arr >= n_rows).any():
            raise ValueError(f"batch {b}: row id outside [0, {n_rows})")
        out.append(np.sort(arr))
    return out


def quadratic_grads(values: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of 0.5 * sum((value - target)^2) per row."""
    return values - targets


def run_sequential(
    rows0: np.ndarray, targets: np.ndarray, batches, lr: float
) -> tuple[HostStore, list[float]]:
    """Lookup, gradient, update, one batch fully before the next."""
    host = HostStore.from_rows(rows0)
    batches = _check_batches(batches, host.rows.shape[0])
    losses = []
    for ids in batches:
        values = host.rows[ids]
        g = quadratic_grads(values, targets[ids])
        losses.append(float(0.5 * (g * g).sum()))
        host.apply(ids, g, lr)
    return host, losses


def run_pipeline(
    rows0: np.ndarray,
    targets: np.ndarray,
    batches,
    config: PipelineConfig,
    log: Optional[list] = None,
) -> tuple[HostStore, PipelineStats]:
    config.validate()
    host = HostStore.from_rows(rows0)
    batches = _check_batches(batches, host.rows.shape[0])
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != host.rows.shape:
        raise ValueError("targets must match the host row array")

    stats = PipelineStats()
    cache: dict[int, CacheLine] = {}
    prefetch_q = FifoQueue(config.lc)
    grad_q = FifoQueue(config.lc)
    sync_buffer: list[tuple[int, np.ndarray, int]] = []
    n = len(batches)

    def emit(tick, stage, batch_id, rows, versions):
        if log is not None:
            log.append(format_event(tick, stage, batch_id, rows, versions))

    for tick in range(n + 2):
        # server: apply the oldest queued gradients
        if 0 <= tick - 2 < n:
            b, ids, grads = grad_q.pop()
            host.apply(ids, grads, config.lr)
            emit(tick, "server", b, ids, host.versions[ids])

        # cache_sync: repair prefetched lines with the worker's newer values
        if config.cache_sync and 0 <= tick - 1 < n:
            merged_rows, merged_versions = [], []
            for row, value, version in sync_buffer:
                line = cache.get(row)
                if line is not None and version > line.version:
                    line.value = value
                    line.version = version
                    merged_rows.append(row)
                    merged_versions.append(version)
            emit(tick, "cache_sync", tick - 1, merged_rows, merged_versions)
        if 0 <= tick - 1 < n:
            sync_buffer = []

        # worker: consume cached rows, emit gradients and post-update values
        if 0 <= tick - 1 < n:
            b = tick - 1
            ids = batches[b]
            qb, qids = prefetch_q.pop()
            assert qb == b and np.array_equal(qids, ids)
            consumed = np.empty((ids.size, host.rows.shape[1]))
            consumed_versions = np.empty(ids.size, dtype=np.int64)
            stale_rows, stale_versions = [], []
            for j, row in enumerate(ids.tolist()):
                line = cache[row]
                if line.version < host.versions[row]:
                    stats.stale_consumptions += 1
                    stale_rows.append(row)
                    stale_versions.append(line.version)
                consumed[j] = line.value
                consumed_versions[j] = line.version
                line.lc -= 1
                if line.lc <= 0:
                    del cache[row]
                    stats.evictions += 1
                    line = None
                g = consumed[j] - targets[row]
                post = consumed[j] - config.lr * g
                if line is not None:
                    line.value = post
                    line.version = consumed_versions[j] + 1
                sync_buffer.append((row, post, int(consumed_versions[j]) + 1))
            grads = quadratic_grads(consumed, targets[ids])
            stats.losses.append(float(0.5 * (grads * grads).sum()))
            grad_q.push((b, ids, grads))
            if stale_rows:
                emit(tick, "stale", b, stale_rows, stale_versions)
            emit(tick, "worker", b, ids, consumed_versions)

        # prefetch: cache lines for the next batch; a hit skips the host read
        if tick < n:
            ids = batches[tick]
            fetched_rows, fetched_versions = [], []
            for row in ids.tolist():
                if row in cache:
                    stats.cache_hits += 1
                    continue
                stats.cache_misses += 1
                value, version = host.read(np.array([row]))
                cache[row] = CacheLine(
                    value=value[0], version=int(version[0]), lc=config.lc
                )
                fetched_rows.append(row)
                fetched_versions.append(int(version[0]))
            prefetch_q.push((tick, ids))
            emit(tick, "prefetch", tick, fetched_rows, fetched_versions)

    stats.max_grad_queue = grad_q.peak
    stats.max_prefetch_queue = prefetch_q.peak
    return host, stats
