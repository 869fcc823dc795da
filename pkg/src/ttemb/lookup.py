"""Forward lookups over TT tables with two-core prefix reuse.

For d=3 tables, every row whose index shares floor(i / m_3) also shares its
first two digits (i_1, i_2), hence the product of its first two core slices.
A batch is planned once: each distinct prefix claims one buffer slot holding
that two-core product, and rows are finished by multiplying the slot against
their final-core slices. Final-core slices of rows in the same bag that share
a prefix are summed *before* the multiply, which is where the operation count
drops: a distinct prefix costs exactly two slice multiplications regardless
of how many bag members it serves, versus two per index without reuse.

Operation counters deliberately count logical slice multiplications and row
additions, not numpy calls, so batched execution reports the same numbers a
one-index-at-a-time loop would.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tt_core import TtShape, TtTable, reconstruct_row


@dataclass
class OpCounters:
    """Work accounting shared by forward and backward paths."""

    slice_mults: int = 0
    row_adds: int = 0
    buffer_hits: int = 0
    buffer_misses: int = 0

    def add(self, other: "OpCounters") -> "OpCounters":
        self.slice_mults += other.slice_mults
        self.row_adds += other.row_adds
        self.buffer_hits += other.buffer_hits
        self.buffer_misses += other.buffer_misses
        return self

    def as_dict(self) -> dict:
        return {
            "slice_mults": self.slice_mults,
            "row_adds": self.row_adds,
            "buffer_hits": self.buffer_hits,
            "buffer_misses": self.buffer_misses,
        }


@dataclass
class ReusePlan:
    """One work entry per distinct 2-core prefix, in first-occurrence order.

    Work entries are (prefix_key, i_1, i_2, slot). slot_of maps a prefix key
    to its buffer slot. hits/misses record how many planned indices re-used
    versus claimed a slot; hits + misses equals the planned index count.
    """

    m: tuple[int, ...]
    work: list[tuple[int, int, int, int]]
    slot_of: dict[int, int]
    n_indices: int

    @property
    def buf_len(self) -> int:
        return len(self.work)

    @property
    def misses(self) -> int:
        return len(self.work)

    @property
    def hits(self) -> int:
        return self.n_indices - len(self.work)


@dataclass
class ReuseBuffer:
    """Materialized prefix products: slot s holds the chained product of the
    first two core slices for plan.work[s], stored as (n_1*n_2, R_2)."""

    plan: ReusePlan
    slots: np.ndarray  # (buf_len, n_1*n_2, R_2)


def _check_bag(bag: Sequence[int], rows: int) -> np.ndarray:
    arr = np.asarray(bag, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("index bag must be a non-empty flat sequence")
    if (arr < 0).any() or (arr >= rows).any():
        raise ValueError(f"bag index outside [0, {rows})")
    return arr


def prepare_reuse_plan(
    indices: Sequence[int],
    table: "TtTable | TtShape",
    counters: Optional[OpCounters] = None,
) -> ReusePlan:
    """Scan indices in order; first occurrence of a prefix claims a slot.

    Only defined for d=3 (a 2-core prefix with a single closing core);
    callers with d=2 tables fall back to direct reconstruction. Accepts the
    table or just its shape, since planning touches no core values.
    """
    shape = table.shape if isinstance(table, TtTable) else table
    if shape.d != 3:
        raise ValueError(f"reuse planning needs d=3, table has d={shape.d}")
    arr = _check_bag(indices, shape.rows)
    m2, m3 = shape.m[1], shape.m[2]
    work: list[tuple[int, int, int, int]] = []
    slot_of: dict[int, int] = {}
    for idx in arr.tolist():
        key = idx // m3
        if key not in slot_of:
            slot_of[key] = len(work)
            work.append((key, key // m2, key % m2, len(work)))
    plan = ReusePlan(m=shape.m, work=work, slot_of=slot_of, n_indices=int(arr.size))
    if counters is not None:
        counters.buffer_misses += plan.misses
        counters.buffer_hits += plan.hits
    return plan


def execute_prefix_products(
    table: TtTable,
    plan: ReusePlan,
    counters: Optional[OpCounters] = None,
) -> ReuseBuffer:
    """Fill the reuse buffer: one two-core slice product per work entry."""
    shape = table.shape
    if shape.d != 3 or plan.m != shape.m:
        raise ValueError("plan was built for a different table geometry")
    if plan.buf_len == 0:
        raise ValueError("empty plan (batches are rejected upstream)")
    n1, n2 = shape.n[0], shape.n[1]
    i1 = np.array([w[1] for w in plan.work], dtype=np.int64)
    i2 = np.array([w[2] for w in plan.work], dtype=np.int64)
    # gather fixed-digit blocks for all slots at once
    g1 = table.cores[0][0, i1[:, None] * n1 + np.arange(n1)[None, :], :]
    g2 = table.cores[1][:, i2[:, None] * n2 + np.arange(n2)[None, :], :]
    g2 = g2.transpose(1, 0, 2, 3)  # (buf, R1, n2, R2)
    prod = np.einsum("bxr,brys->bxys", g1, g2, optimize=True)
    slots = np.ascontiguousarray(prod.reshape(plan.buf_len, n1 * n2, shape.ranks[2]))
    if counters is not None:
        counters.slice_mults += plan.buf_len  # one chained product per slot
    return ReuseBuffer(plan=plan, slots=slots)


def _final_slices(table: TtTable, i3: np.ndarray) -> np.ndarray:
    """Final-core blocks for row digits i3: (len, R_2, n_3)."""
    n3 = table.shape.n[2]
    g3 = table.cores[2][:, i3[:, None] * n3 + np.arange(n3)[None, :], 0]
    return g3.transpose(1, 0, 2)


def lookup_bag(
    table: TtTable,
    bag: Sequence[int],
    buffer: Optional[ReuseBuffer] = None,
    counters: Optional[OpCounters] = None,
) -> np.ndarray:
    """Sum-pooled embedding of one bag, with or without prefix reuse."""
    shape = table.shape
    arr = _check_bag(bag, shape.rows)
    if counters is None:
        counters = OpCounters()

    if buffer is None:
        out = reconstruct_row(table, int(arr[0]))
        counters.slice_mults += shape.d - 1
        for idx in arr[1:].tolist():
            out = out + reconstruct_row(table, idx)
            counters.slice_mults += shape.d - 1
            counters.row_adds += 1
        return out

    if shape.d != 3:
        raise ValueError("buffered lookup needs a d=3 table")
    plan = buffer.plan
    m3, n3 = shape.m[2], shape.n[2]
    groups: dict[int, np.ndarray] = {}
    for idx in arr.tolist():
        key = idx // m3
        if key not in plan.slot_of:
            raise ValueError(f"bag prefix {key} missing from reuse plan")
        block = table.cores[2][:, (idx % m3) * n3 : (idx % m3 + 1) * n3, 0]
        if key in groups:
            groups[key] = groups[key] + block  # summed before the multiply
            counters.row_adds += 1
        else:
            groups[key] = block
    out = np.zeros(shape.cols, dtype=table.dtype)
    first = True
    for key, summed in groups.items():
        part = buffer.slots[plan.slot_of[key]] @ summed
        counters.slice_mults += 1
        if first:
            out = part.reshape(shape.cols)
            first = False
        else:
            out = out + part.reshape(shape.cols)
            counters.row_adds += 1
    return out


def _forward_direct(
    table: TtTable, bag_ids: np.ndarray, occ: np.ndarray, n_bags: int
) -> tuple[np.ndarray, int, int]:
    """Vectorized no-reuse path: chain per-occurrence slices left to right."""
    shape = table.shape
    digits = []
    rem = occ
    for radix in reversed(shape.m):
        digits.append(rem % radix)
        rem = rem // radix
    digits = digits[::-1]
    n0 = shape.n[0]
    acc = table.cores[0][0, digits[0][:, None] * n0 + np.arange(n0)[None, :], :]
    for k in range(1, shape.d):
        nk = shape.n[k]
        blk = table.cores[k][:, digits[k][:, None] * nk + np.arange(nk)[None, :], :]
        blk = blk.transpose(1, 0, 2, 3)  # (T, R_{k-1}, n_k, R_k)
        acc = np.einsum("tar,trns->tans", acc, blk, optimize=True)
        acc = acc.reshape(occ.size, -1, shape.ranks[k + 1])
    rows = acc.reshape(occ.size, shape.cols)
    out = np.zeros((n_bags, shape.cols), dtype=table.dtype)
    np.add.at(out, bag_ids, rows)
    mults = (shape.d - 1) * occ.size
    adds = occ.size - n_bags
    return out, mults, adds


def forward_batch(
    table: TtTable,
    batch: Sequence[Sequence[int]],
    use_reuse: bool = True,
    buffer: Optional[ReuseBuffer] = None,
) -> tuple[np.ndarray, OpCounters]:
    """Pooled embeddings for a batch of bags plus operation counters.

    One reuse plan and buffer serve the whole batch. Final-core sums are per
    (bag, prefix) group, so a flat single-bag batch costs exactly
    2 * #distinct-prefixes slice multiplications; the no-reuse path costs
    2 * #indices on d=3 tables.

    A prebuilt buffer (from this exact batch, flattened bag by bag) can be
    passed in so one buffer serves both forward and backward; its planning
    and fill were already counted when the caller built it, so the returned
    counters then cover only the closing stage.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    shape = table.shape
    bags = [_check_bag(bag, shape.rows) for bag in batch]
    bag_ids = np.concatenate(
        [np.full(b.size, i, dtype=np.int64) for i, b in enumerate(bags)]
    )
    occ = np.concatenate(bags)
    counters = OpCounters()

    if not use_reuse or shape.d != 3:
        if buffer is not None:
            raise ValueError("prebuilt buffers require d=3 and use_reuse=True")
        out, mults, adds = _forward_direct(table, bag_ids, occ, len(bags))
        counters.slice_mults += mults
        counters.row_adds += adds
        return out, counters

    if buffer is None:
        plan = prepare_reuse_plan(occ, table, counters)
        buffer = execute_prefix_products(table, plan, counters)
    else:
        plan = buffer.plan
        if plan.m != shape.m or plan.n_indices != occ.size:
            raise ValueError("prebuilt buffer does not match this batch")

    m3 = shape.m[2]
    slot_per_occ = np.array([plan.slot_of[k] for k in (occ // m3).tolist()])
    seg_key = bag_ids * plan.buf_len + slot_per_occ
    seg_ids, seg_inverse = np.unique(seg_key, return_inverse=True)
    n_seg = seg_ids.size
    # sum final-core slices within each (bag, prefix) group before multiplying
    g3 = _final_slices(table, occ % m3)
    summed = np.zeros((n_seg,) + g3.shape[1:], dtype=table.dtype)
    np.add.at(summed, seg_inverse, g3)
    closed = np.einsum(
        "gxr,grn->gxn", buffer.slots[seg_ids % plan.buf_len], summed, optimize=True
    )
    out = np.zeros((len(bags), shape.cols), dtype=table.dtype)
    np.add.at(out, seg_ids // plan.buf_len, closed.reshape(n_seg, shape.cols))
    counters.slice_mults += n_seg
    counters.row_adds += (occ.size - n_seg) + (n_seg - len(bags))
    return out, counters
