"""Tensor-train storage for embedding tables.

A dense table of M rows and N columns is replaced by d small cores. Row
factors m_1..m_d tile the row index (prod(m) >= M, rows above M are padding)
and column factors n_1..n_d tile the embedding width (prod(n) == N, exact).
Core k is stored as an array of extent R_{k-1} x (m_k * n_k) x R_k with the
middle axis flattened as i_k * n_k + j_k, so fixing the row digit i_k exposes
one contiguous R_{k-1} x n_k x R_k block. Row reconstruction chains those
blocks strictly left to right; every kernel in this package multiplies the
same blocks in the same order, which is what makes the reuse and gradient
paths comparable against the dense oracle.

Functions
---------
factorize_dims          near-balanced (m, n) factor search
linear_index_to_tt_index / tt_index_to_linear
                        big-endian mixed-radix row digits
core_slice              fixed-digit block view into one core
reconstruct_row / reconstruct_full
                        exact decompression
param_stats             parameter counts and compression ratio
init_random             scaled Gaussian core initialization
table_to_bytes / bytes_to_table / save_table / load_table
                        binary table format
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAGIC = b"TTEMB1\n"

# reconstruct_full materializes the dense table; cap it at desk scale
FULL_RECONSTRUCT_LIMIT = 2**24


@dataclass(frozen=True)
class TtShape:
    """Factorized table geometry: row factors, column factors, TT ranks."""

    m: tuple[int, ...]
    n: tuple[int, ...]
    ranks: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "m", tuple(int(v) for v in self.m))
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        object.__setattr__(self, "ranks", tuple(int(v) for v in self.ranks))
        d = len(self.m)
        if d not in (2, 3):
            raise ValueError(f"supported factor counts are 2 and 3, got d={d}")
        if len(self.n) != d or len(self.ranks) != d + 1:
            raise ValueError(
                f"factor lists disagree: |m|={len(self.m)} |n|={len(self.n)} "
                f"|ranks|={len(self.ranks)} (need |n|=|m|, |ranks|=|m|+1)"
            )
        if any(v < 1 for v in self.m) or any(v < 1 for v in self.n):
            raise ValueError("row/column factors must be positive")
        if any(r < 1 for r in self.ranks):
            raise ValueError("ranks must be positive")
        if self.ranks[0] != 1 or self.ranks[-1] != 1:
            raise ValueError("boundary ranks must be 1")

    @property
    def d(self) -> int:
        return len(self.m)

    @property
    def rows(self) -> int:
        """Padded row count prod(m)."""
        return math.prod(self.m)

    @property
    def cols(self) -> int:
        return math.prod(self.n)

    def core_extent(self, k: int) -> tuple[int, int, int]:
        return (self.ranks[k], self.m[k] * self.n[k], self.ranks[k + 1])


@dataclass
class TtTable:
    """A TT-factorized embedding table: shape plus one array per core."""

    shape: TtShape
    cores: list[np.ndarray]

    def __post_init__(self):
        if len(self.cores) != self.shape.d:
            raise ValueError(
                f"expected {self.shape.d} cores, got {len(self.cores)}"
            )
        dtypes = {c.dtype for c in self.cores}
        if len(dtypes) != 1 or self.cores[0].dtype not in (
            np.dtype(np.float32),
            np.dtype(np.float64),
        ):
            raise ValueError(f"cores must share dtype float32 or float64, got {dtypes}")
        for k, core in enumerate(self.cores):
            want = self.shape.core_extent(k)
            if core.shape != want:
                raise ValueError(f"core {k} extent {core.shape} != {want}")
            if not np.isfinite(core).all():
                raise ValueError(f"core {k} contains non-finite entries")

    @property
    def dtype(self) -> np.dtype:
        return self.cores[0].dtype

    def astype(self, dtype) -> "TtTable":
        return TtTable(self.shape, [c.astype(dtype) for c in self.cores])

    def copy(self) -> "TtTable":
        return TtTable(self.shape, [c.copy() for c in self.cores])


@dataclass
class DenseTable:
    """Uncompressed table; the oracle target and the tiny-field fallback."""

    rows: np.ndarray

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ValueError(f"dense table must be 2-D, got shape {self.rows.shape}")

    @property
    def num_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def copy(self) -> "DenseTable":
        return DenseTable(self.rows.copy())


def _factor_tuples(total: int, count: int, lo: int, hi: int, start: int):
    """Non-decreasing factor tuples of `total` with entries in [lo, hi]."""
    if count == 1:
        if total >= max(lo, start) and total <= hi:
            yield (total,)
        return
    f = max(lo, start)
    while f * f ** (count - 1) <= total and f <= hi:
        if total % f == 0:
            for rest in _factor_tuples(total // f, count - 1, lo, hi, f):
                yield (f, *rest)
        f += 1


def _most_balanced(tuples) -> tuple[int, ...] | None:
    best = None
    for t in tuples:
        key = (max(t) - min(t), t)
        if best is None or key < best[0]:
            best = (key, t)
    return None if best is None else best[1]


def factorize_dims(m_rows: int, n_cols: int, d: int) -> tuple[list[int], list[int]]:
    """Pick near-balanced factor lists for a table of m_rows x n_cols.

    Row factors may pad: the search walks padded totals upward from m_rows
    and keeps the first total admitting a factorization whose every factor
    lies within 2x of m_rows**(1/d); ties resolve to the most balanced
    (smallest max-min spread, then lexicographic) tuple. Column factors must
    multiply to n_cols exactly with every factor >= 2; if that is impossible
    and n_cols < 2**d the list is padded with 1s, otherwise this raises.
    Factors are returned in non-decreasing order, which puts the largest row
    factor last and maximizes prefix sharing in the reuse path.
    """
    if d not in (2, 3):
        raise ValueError(f"supported factor counts are 2 and 3, got d={d}")
    if m_rows < 1 or n_cols < 1:
        raise ValueError(f"table extents must be positive, got {m_rows}x{n_cols}")

    target = m_rows ** (1.0 / d)
    lo = max(1, math.ceil(target / 2.0))
    hi = max(1, math.floor(target * 2.0))
    ceiling = math.ceil(target) ** d  # always >= m_rows and always factorizable
    m_best = None
    padded = m_rows
    while padded <= ceiling:
        m_best = _most_balanced(_factor_tuples(padded, d, lo, hi, 1))
        if m_best is not None:
            break
        padded += 1
    if m_best is None:
        # unreachable for d in {2,3}: ceil(target)**d always factorizes
        raise ValueError(f"no near-balanced row factorization for {m_rows} (d={d})")

    n_best = _most_balanced(_factor_tuples(n_cols, d, 2, n_cols, 1))
    if n_best is None:
        if n_cols >= 2**d:
            raise ValueError(
                f"{n_cols} has no {d}-way factorization with all factors >= 2"
            )
        n_best = _most_balanced(_factor_tuples(n_cols, d, 1, n_cols, 1))
        if n_best is None:
            raise ValueError(f"cannot factor embedding width {n_cols} into {d} parts")
    return list(m_best), list(n_best)


def linear_index_to_tt_index(i_emb: int, m: Sequence[int]) -> list[int]:
    """Big-endian mixed-radix digits of a row index.

    Digit k is floor(i_emb / prod(m[k+1:])) mod m[k]; index 1 over
    m=[2,2,2] becomes [0,0,1].
    """
    total = math.prod(m)
    if not 0 <= i_emb < total:
        raise ValueError(f"index {i_emb} outside [0, {total})")
    digits = []
    rem = int(i_emb)
    for radix in reversed(m):
        digits.append(rem % radix)
        rem //= radix
    return digits[::-1]


def tt_index_to_linear(digits: Sequence[int], m: Sequence[int]) -> int:
    """Inverse of linear_index_to_tt_index."""
    if len(digits) != len(m):
        raise ValueError(f"digit count {len(digits)} != factor count {len(m)}")
    acc = 0
    for dig, radix in zip(digits, m):
        if not 0 <= dig < radix:
            raise ValueError(f"digit {dig} outside [0, {radix})")
        acc = acc * radix + dig
    return acc


def core_slice(table: TtTable, k: int, i_k: int) -> np.ndarray:
    """View of core k at row digit i_k: extent R_{k-1} x n_k x R_k."""
    shape = table.shape
    if not 0 <= k < shape.d:
        raise ValueError(f"core index {k} outside [0, {shape.d})")
    if not 0 <= i_k < shape.m[k]:
        raise ValueError(f"row digit {i_k} outside [0, {shape.m[k]})")
    n_k = shape.n[k]
    block = table.cores[k][:, i_k * n_k : (i_k + 1) * n_k, :]
    return block


def reconstruct_row(table: TtTable, i_emb: int) -> np.ndarray:
    """Decompress one row by chaining core slices left to right.

    The running product is kept as a (prefix-columns, rank) matrix; after the
    last core it is the full N-vector in natural column order.
    """
    shape = table.shape
    digits = linear_index_to_tt_index(i_emb, shape.m)
    acc = core_slice(table, 0, digits[0]).reshape(shape.n[0], shape.ranks[1])
    for k in range(1, shape.d):
        block = core_slice(table, k, digits[k])
        r_prev, n_k, r_next = block.shape
        acc = acc @ block.reshape(r_prev, n_k * r_next)
        acc = acc.reshape(-1, r_next)
    return acc.reshape(shape.cols)


def reconstruct_full(table: TtTable) -> DenseTable:
    """Decompress every (padded) row; the oracle for all lookup kernels."""
    shape = table.shape
    if shape.rows * shape.cols > FULL_RECONSTRUCT_LIMIT:
        raise ValueError(
            f"full reconstruction of {shape.rows}x{shape.cols} exceeds the "
            f"{FULL_RECONSTRUCT_LIMIT}-entry guard"
        )
    out = np.empty((shape.rows, shape.cols), dtype=table.dtype)
    for i in range(shape.rows):
        out[i] = reconstruct_row(table, i)
    return DenseTable(out)


def param_stats(shape: TtShape, m_rows: int, n_cols: int) -> dict:
    """Parameter accounting against the uncompressed m_rows x n_cols table."""
    if m_rows < 1 or n_cols < 1:
        raise ValueError(f"table extents must be positive, got {m_rows}x{n_cols}")
    if shape.rows < m_rows:
        raise ValueError(f"factorized rows {shape.rows} cannot cover {m_rows}")
    if shape.cols != n_cols:
        raise ValueError(f"column factors give {shape.cols}, table needs {n_cols}")
    tt = sum(
        shape.ranks[k] * shape.m[k] * shape.n[k] * shape.ranks[k + 1]
        for k in range(shape.d)
    )
    dense = m_rows * n_cols
    return {"tt_params": tt, "dense_params": dense, "ratio": dense / tt}


def init_random(
    shape: TtShape,
    seed: int,
    target_row_std: float = 0.1,
    dtype=np.float64,
) -> TtTable:
    """Gaussian cores scaled so reconstructed row entries have ~target std.

    A reconstructed entry sums prod(interior ranks) products of d core
    entries, so per-core std sigma must satisfy
    sigma**d * sqrt(prod R) = target; with the interior ranks summarized by
    their mean R that is sigma = target**(1/d) / R**((d-1)/(2d)).
    """
    if target_row_std <= 0:
        raise ValueError("target_row_std must be positive")
    d = shape.d
    interior = shape.ranks[1:-1]
    mean_rank = float(np.mean(interior)) if interior else 1.0
    sigma = target_row_std ** (1.0 / d) / mean_rank ** ((d - 1) / (2.0 * d))
    rng = np.random.default_rng(seed)
    cores = [
        (rng.standard_normal(shape.core_extent(k)) * sigma).astype(dtype)
        for k in range(d)
    ]
    return TtTable(shape, cores)


def table_to_bytes(table: TtTable) -> bytes:
    """Serialize: magic, little-endian int64 header (d, m, n, ranks), then
    cores as little-endian float32 in storage order."""
    shape = table.shape
    header = np.array(
        [shape.d, *shape.m, *shape.n, *shape.ranks], dtype="<i8"
    ).tobytes()
    body = b"".join(
        np.ascontiguousarray(core, dtype="<f4").tobytes() for core in table.cores
    )
    return MAGIC + header + body


def bytes_to_table(buf: bytes, dtype=np.float32) -> TtTable:
    if buf[: len(MAGIC)] != MAGIC:
        raise ValueError(f"magic mismatch: expected {MAGIC!r}")
    off = len(MAGIC)

    def read_i64(count: int) -> np.ndarray:
        nonlocal off
        end = off + 8 * count
        if end > len(buf):
            raise ValueError("truncated header")
        vals = np.frombuffer(buf[off:end], dtype="<i8")
        off = end
        return vals

    d = int(read_i64(1)[0])
    if d not in (2, 3):
        raise ValueError(f"unsupported factor count {d} in header")
    m = read_i64(d)
    n = read_i64(d)
    ranks = read_i64(d + 1)
    if (m < 1).any() or (n < 1).any() or (ranks < 1).any():
        raise ValueError("negative or zero extent in header")
    shape = TtShape(tuple(m), tuple(n), tuple(ranks))
    cores = []
    for k in range(d):
        extent = shape.core_extent(k)
        count = int(np.prod(extent))
        end = off + 4 * count
        if end > len(buf):
            raise ValueError(f"truncated payload at core {k}")
        core = np.frombuffer(buf[off:end], dtype="<f4").reshape(extent)
        cores.append(core.astype(dtype))
        off = end
    if off != len(buf):
        raise ValueError(f"{len(buf) - off} trailing bytes after last core")
    return TtTable(shape, cores)


def save_table(table: TtTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(table_to_bytes(table))


def load_table(path, dtype=np.float32) -> TtTable:
    with open(path, "rb") as fh:
        return bytes_to_table(fh.read(), dtype=dtype)
