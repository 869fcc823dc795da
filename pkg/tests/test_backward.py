"""Gradient correctness against central finite differences, aggregation
equivalence, and the fused-update arithmetic.

The finite-difference oracle perturbs raw core entries and re-runs the
forward reconstruction, so it shares no code path with the chain-product
gradients it checks.
"""

import numpy as np
import pytest

from ttemb.backward import (
    CoreGrads,
    EmbGradBatch,
    OptimizerState,
    backward_batch,
    fused_update,
    tt_core_grads,
    unique_aggregate,
)
from ttemb.lookup import OpCounters, execute_prefix_products, prepare_reuse_plan
from ttemb.tt_core import TtShape, TtTable, reconstruct_row

from test_tt_core import random_table


def scalar_loss(table, indices, weights):
    """L = sum_t w_t . row(idx_t); gradient w.r.t. row t is w_t."""
    return sum(
        float(w @ reconstruct_row(table, int(i))) for i, w in zip(indices, weights)
    )


def fd_core_grads(table, indices, weights, h=1e-5):
    """Central finite differences over every core entry."""
    out = []
    for k, core in enumerate(table.cores):
        g = np.zeros_like(core)
        flat = core.reshape(-1)
        for pos in range(flat.size):
            orig = flat[pos]
            flat[pos] = orig + h
            up = scalar_loss(table, indices, weights)
            flat[pos] = orig - h
            down = scalar_loss(table, indices, weights)
            flat[pos] = orig
            g.reshape(-1)[pos] = (up - down) / (2 * h)
        out.append(g)
    return out


def tiny_table(rng, d):
    return random_table(rng, d, max_rank=4, max_factor=3)


# ------------------------------------------------------------- aggregation


def test_unique_aggregate_first_occurrence_order():
    grads = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [5.0, 5.0]])
    idx, summed = unique_aggregate([3, 1, 3, 0], grads)
    assert idx.tolist() == [3, 1, 0]
    np.testing.assert_array_equal(summed[0], [3.0, 2.0])
    np.testing.assert_array_equal(summed[1], [0.0, 1.0])
    np.testing.assert_array_equal(summed[2], [5.0, 5.0])


def test_unique_aggregate_left_to_right():
    # accumulation order is occurrence order; with floats the result is the
    # exact left-to-right sum
    vals = np.array([[1e16], [1.0], [-1e16], [1.0]])
    idx, summed = unique_aggregate([7, 7, 7, 7], vals)
    assert idx.tolist() == [7]
    assert summed[0, 0] == ((1e16 + 1.0) + -1e16) + 1.0


# ----------------------------------------------------- finite differences


def test_core_grads_match_finite_differences():
    rng = np.random.default_rng(61)
    for trial in range(14):
        d = 2 if trial % 2 == 0 else 3
        table = tiny_table(rng, d)
        rows = table.shape.rows
        t = int(rng.integers(1, 5))
        indices = rng.integers(0, rows, size=t)
        weights = rng.standard_normal((t, table.shape.cols))
        uniq, summed = unique_aggregate(indices, weights)
        got = tt_core_grads(table, uniq, summed)
        want = fd_core_grads(table, indices, weights)
        for g, w in zip(got.arrays, want):
            err = np.abs(g - w)
            scale = np.maximum(np.maximum(np.abs(g), np.abs(w)), 1e-3)
            assert (err / scale).max() < 1e-6


def test_core_grads_with_buffer_match_plain():
    rng = np.random.default_rng(67)
    for _ in range(8):
        table = tiny_table(rng, 3)
        rows = table.shape.rows
        indices = rng.integers(0, rows, size=6)
        grads = rng.standard_normal((6, table.shape.cols))
        uniq, summed = unique_aggregate(indices, grads)
        plan = prepare_reuse_plan(indices, table)
        buf = execute_prefix_products(table, plan)
        c_plain, c_buf = OpCounters(), OpCounters()
        plain = tt_core_grads(table, uniq, summed, counters=c_plain)
        buffered = tt_core_grads(table, uniq, summed, buffer=buf, counters=c_buf)
        for a, b in zip(plain.arrays, buffered.arrays):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
        # the buffered path borrows the left two-core chain: 7 vs 8 per row
        assert c_plain.slice_mults == 8 * uniq.size
        assert c_buf.slice_mults == 7 * uniq.size


# ------------------------------------------------- aggregation equivalence


def test_aggregated_equals_unaggregated_grads():
    rng = np.random.default_rng(71)
    for _ in range(10):
        table = tiny_table(rng, 3)
        rows = table.shape.rows
        indices = rng.integers(0, rows // 2 + 1, size=12)  # force repeats
        grads = rng.standard_normal((12, table.shape.cols))
        uniq, summed = unique_aggregate(indices, grads)
        agg = tt_core_grads(table, uniq, summed)
        raw = tt_core_grads(table, indices, grads)
        for a, b in zip(agg.arrays, raw.arrays):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_multiplication_count_ratio_exact():
    rng = np.random.default_rng(73)
    table = tiny_table(rng, 3)
    rows = table.shape.rows
    base = rng.integers(0, rows, size=5)
    for repeat in (2, 3, 4):
        indices = np.repeat(base, repeat)
        grads = rng.standard_normal((indices.size, table.shape.cols))
        uniq, summed = unique_aggregate(indices, grads)
        c_agg, c_raw = OpCounters(), OpCounters()
        tt_core_grads(table, uniq, summed, counters=c_agg)
        tt_core_grads(table, indices, grads, counters=c_raw)
        distinct = np.unique(base).size
        assert c_agg.slice_mults * indices.size == c_raw.slice_mults * distinct
        assert c_agg.slice_mults == c_raw.slice_mults * distinct // indices.size


# ----------------------------------------------------------- fused update


def test_fused_update_plain_sgd():
    rng = np.random.default_rng(79)
    table = tiny_table(rng, 2)
    before = [c.copy() for c in table.cores]
    grads = CoreGrads([rng.standard_normal(c.shape) for c in table.cores])
    fused_update(table, grads, OptimizerState(lr=0.25))
    for core, orig, g in zip(table.cores, before, grads.arrays):
        assert (core == orig - 0.25 * g).all()


def test_fused_update_momentum_two_steps():
    # velocity after two identical gradients G: v1 = G, v2 = 1.9 G, so the
    # second step moves 1.9 * lr * G
    rng = np.random.default_rng(83)
    table = tiny_table(rng, 2)
    grads = CoreGrads([rng.standard_normal(c.shape) for c in table.cores])
    opt = OptimizerState(lr=0.1, momentum=0.9)
    assert opt.velocity is None
    snap0 = [c.copy() for c in table.cores]
    fused_update(table, grads, opt)
    assert opt.velocity is not None
    snap1 = [c.copy() for c in table.cores]
    fused_update(table, grads, opt)
    for c0, c1, c2, g in zip(snap0, snap1, table.cores, grads.arrays):
        np.testing.assert_allclose(c1, c0 - 0.1 * g, rtol=0, atol=1e-15)
        np.testing.assert_allclose(c2, c1 - 0.1 * 1.9 * g, rtol=0, atol=1e-15)


def test_fused_update_float32_rounds_once():
    rng = np.random.default_rng(89)
    table64 = tiny_table(rng, 3)
    table32 = table64.astype(np.float32)
    grads = CoreGrads([rng.standard_normal(c.shape) for c in table64.cores])
    fused_update(table32, grads, OptimizerState(lr=0.01))
    for c32, c64, g in zip(table32.cores, table64.cores, grads.arrays):
        want = (c64.astype(np.float32).astype(np.float64) - 0.01 * g).astype(
            np.float32
        )
        assert (c32 == want).all()


def test_update_determinism_and_errors():
    rng = np.random.default_rng(97)
    t1, t2 = tiny_table(rng, 3), None
    t2 = TtTable(t1.shape, [c.copy() for c in t1.cores])
    grads = CoreGrads([rng.standard_normal(c.shape) for c in t1.cores])
    opt1, opt2 = OptimizerState(lr=0.05, momentum=0.5), OptimizerState(
        lr=0.05, momentum=0.5
    )
    for _ in range(3):
        fused_update(t1, grads, opt1)
        fused_update(t2, grads, opt2)
    for a, b in zip(t1.cores, t2.cores):
        assert (a == b).all()
    bad = CoreGrads([np.full_like(c, np.nan) for c in t1.cores])
    with pytest.raises(ValueError):
        fused_update(t1, bad, opt1)
    with pytest.raises(ValueError):
        OptimizerState(lr=-1.0)
    with pytest.raises(ValueError):
        OptimizerState(lr=0.1, momentum=1.0)


# ---------------------------------------------------------- batch wrapper


def test_backward_batch_updates_and_counts():
    rng = np.random.default_rng(101)
    table = tiny_table(rng, 3)
    rows = table.shape.rows
    indices = np.repeat(rng.integers(0, rows, size=4), 3)
    grads = rng.standard_normal((indices.size, table.shape.cols))
    ref = TtTable(table.shape, [c.copy() for c in table.cores])

    counters = backward_batch(
        table, EmbGradBatch(indices, grads), OptimizerState(lr=0.1)
    )
    # manual composition must land on identical cores
    uniq, summed = unique_aggregate(indices, grads)
    manual = tt_core_grads(ref, uniq, summed)
    fused_update(ref, manual, OptimizerState(lr=0.1))
    for a, b in zip(table.cores, ref.cores):
        assert (a == b).all()
    assert counters.slice_mults == 8 * uniq.size
    assert counters.row_adds == indices.size - uniq.size


def test_backward_batch_nan_grad_rejected():
    rng = np.random.default_rng(103)
    table = tiny_table(rng, 3)
    grads = np.full((2, table.shape.cols), np.nan)
    with pytest.raises(ValueError):
        backward_batch(table, EmbGradBatch([0, 1], grads), OptimizerState(lr=0.1))
