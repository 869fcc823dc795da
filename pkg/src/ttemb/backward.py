"""Backward pass for TT tables.

A pooled-bag lookup routes the same upstream gradient to every row in the
bag, so batches arrive as (row index, N-vector gradient) occurrence lists.
Gradients of the same row are merged first (early aggregation, first
occurrence order) because every distinct row costs a fixed number of chain
products: per row, left and right partial chains are built once and each
core's slice gradient is (left chain)^T x grad-slice x (right chain)^T. The
tensor-multiplication count therefore scales with the number of distinct
rows, not occurrences.

Updates are fused: the optimizer walks the cores once, applying momentum and
the SGD step in place with no intermediate updated-core copy. For float32
tables the per-core gradients are accumulated in 64-bit and rounded exactly
once by the in-place subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .lookup import OpCounters, ReuseBuffer
from .tt_core import TtTable


@dataclass
class EmbGradBatch:
    """Occurrence-wise embedding gradients: one N-vector per looked-up row."""

    indices: np.ndarray
    grads: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.grads = np.asarray(self.grads)
        if self.indices.ndim != 1 or self.grads.ndim != 2:
            raise ValueError("indices must be (T,), grads (T, N)")
        if self.indices.shape[0] != self.grads.shape[0]:
            raise ValueError(
                f"{self.indices.shape[0]} indices vs {self.grads.shape[0]} grads"
            )
        if self.indices.shape[0] == 0:
            raise ValueError("empty gradient batch")


@dataclass
class CoreGrads:
    """Per-core gradient arrays, same extents as the table's cores."""

    arrays: list[np.ndarray]


@dataclass
class OptimizerState:
    """SGD with optional momentum. Velocity buffers appear on first use and
    only when momentum > 0."""

    lr: float
    momentum: float = 0.0
    velocity: Optional[list[np.ndarray]] = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def unique_aggregate(
    indices: Sequence[int], grads: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Merge gradients of repeated rows; rows keep first-occurrence order and
    each row's gradients accumulate left to right."""
    idx = np.asarray(indices, dtype=np.int64)
    g = np.asarray(grads)
    if idx.shape[0] != g.shape[0]:
        raise ValueError("indices and grads disagree in length")
    uniq_sorted, first_pos, inverse = np.unique(
        idx, return_index=True, return_inverse=True
    )
    summed_sorted = np.zeros((uniq_sorted.size, g.shape[1]), dtype=g.dtype)
    np.add.at(summed_sorted, inverse, g)  # occurrence order, left to right
    order = np.argsort(first_pos, kind="stable")
    return uniq_sorted[order], summed_sorted[order]


def _gather_blocks(table: TtTable, digits: list[np.ndarray]) -> list[np.ndarray]:
    """Per-row fixed-digit blocks of every core, as float64 (U, R, n, R)."""
    blocks = []
    for k in range(table.shape.d):
        nk = table.shape.n[k]
        sel = digits[k][:, None] * nk + np.arange(nk)[None, :]
        blk = table.cores[k][:, sel, :].transpose(1, 0, 2, 3)
        blocks.append(blk.astype(np.float64, copy=False))
    return blocks


def tt_core_grads(
    table: TtTable,
    indices: Sequence[int],
    grads: np.ndarray,
    buffer: Optional[ReuseBuffer] = None,
    counters: Optional[OpCounters] = None,
) -> CoreGrads:
    """Loss gradients w.r.t. every core entry for the given rows.

    `indices` is expected to be aggregation output (one gradient per distinct
    row); duplicates still accumulate correctly but cost duplicate work. When
    the forward reuse buffer is passed, rows take their left two-core chain
    from it instead of recomputing the product.
    """
    shape = table.shape
    d = shape.d
    idx = np.asarray(indices, dtype=np.int64)
    g = np.asarray(grads, dtype=np.float64)
    if idx.ndim != 1 or g.shape != (idx.size, shape.cols):
        raise ValueError(f"need (U,) indices and (U, {shape.cols}) grads")
    if idx.size == 0:
        raise ValueError("empty row set")
    if (idx < 0).any() or (idx >= shape.rows).any():
        raise ValueError(f"row index outside [0, {shape.rows})")
    if not np.isfinite(g).all():
        raise ValueError("non-finite gradient")
    if buffer is not None and d != 3:
        raise ValueError("reuse buffers exist only for d=3 tables")

    digits = []
    rem = idx
    for radix in reversed(shape.m):
        digits.append(rem % radix)
        rem = rem // radix
    digits = digits[::-1]
    blocks = _gather_blocks(table, digits)
    u = idx.size
    mults = 0

    # lefts[k] = chained product of blocks 0..k-1, extent (U, prod n, R_{k-1})
    eye = np.ones((u, 1, 1))
    lefts = [eye, blocks[0].reshape(u, shape.n[0], shape.ranks[1])]
    for k in range(1, d - 1):
        if k == d - 2 and buffer is not None:
            prefixes = (idx // shape.m[2]).tolist()
            try:
                slots = np.array([buffer.plan.slot_of[p] for p in prefixes])
            except KeyError as exc:
                raise ValueError(f"row prefix {exc} missing from reuse buffer")
            lefts.append(buffer.slots[slots].astype(np.float64, copy=False))
        else:
            nxt = np.einsum("uar,urns->uans", lefts[-1], blocks[k], optimize=True)
            lefts.append(nxt.reshape(u, -1, shape.ranks[k + 1]))
            mults += u
    # rights[k] = chained product of blocks k+1..d-1, extent (U, R_k, prod n)
    rights = [None] * d
    rights[d - 1] = np.ones((u, 1, 1))
    if d >= 2:
        rights[d - 2] = blocks[d - 1].reshape(u, shape.ranks[d - 1], shape.n[d - 1])
    for k in range(d - 3, -1, -1):
        nxt = np.einsum("urns,usb->urnb", blocks[k + 1], rights[k + 1], optimize=True)
        rights[k] = nxt.reshape(u, shape.ranks[k + 1], -1)
        mults += u

    out = [np.zeros(shape.core_extent(k), dtype=np.float64) for k in range(d)]
    a_sz = 1
    for k in range(d):
        nk = shape.n[k]
        b_sz = shape.cols // (a_sz * nk)
        g3 = g.reshape(u, a_sz, nk, b_sz)
        grad_blk = np.einsum(
            "uar,uajb,usb->urjs", lefts[k], g3, rights[k], optimize=True
        )
        mults += 2 * u  # one contraction against each chain
        mid = np.zeros((shape.m[k] * nk, shape.ranks[k], shape.ranks[k + 1]))
        sel = (digits[k][:, None] * nk + np.arange(nk)[None, :]).reshape(-1)
        np.add.at(mid, sel, grad_blk.transpose(0, 2, 1, 3).reshape(u * nk, *mid.shape[1:]))
        out[k] = np.ascontiguousarray(mid.transpose(1, 0, 2))
        a_sz *= nk

    if counters is not None:
        counters.slice_mults += mults
    return CoreGrads(out)


def fused_update(table: TtTable, grads: CoreGrads, opt: OptimizerState) -> None:
    """One in-place traversal: velocity update (if momentum) and SGD step."""
    if len(grads.arrays) != table.shape.d:
        raise ValueError("core gradient count mismatch")
    for k, g in enumerate(grads.arrays):
        if g.shape != table.cores[k].shape:
            raise ValueError(f"core {k} gradient extent {g.shape}")
        if not np.isfinite(g).all():
            raise ValueError("non-finite gradient")
    if opt.momentum > 0.0:
        if opt.velocity is None:
            opt.velocity = [np.zeros_like(g) for g in grads.arrays]
        for core, vel, g in zip(table.cores, opt.velocity, grads.arrays):
            vel *= opt.momentum
            vel += g
            np.subtract(core, opt.lr * vel, out=core, casting="same_kind")
    else:
        for core, g in zip(table.cores, grads.arrays):
            np.subtract(core, opt.lr * g, out=core, casting="same_kind")


def backward_batch(
    table: TtTable,
    batch: EmbGradBatch,
    opt: OptimizerState,
    buffer: Optional[ReuseBuffer] = None,
    aggregate: bool = True,
) -> OpCounters:
    """Aggregate, differentiate, update; returns the work counters.

    `aggregate=False` skips the merge and processes every occurrence, which
    is only useful for measuring what aggregation saves.
    """
    counters = OpCounters()
    if aggregate:
        idx, g = unique_aggregate(batch.indices, batch.grads)
        counters.row_adds += int(batch.indices.size - idx.size)
    else:
        idx, g = batch.indices, batch.grads
    core_grads = tt_core_grads(table, idx, g, buffer=buffer, counters=counters)
    fused_update(table, core_grads, opt)
    return counters
