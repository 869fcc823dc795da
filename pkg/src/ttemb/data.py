"""Synthetic grid-measurement-style datasets and their CSV format.

A sample is (label, dense features, one index bag per sparse field). Sparse
indices follow a Zipf law; labels come from a hidden linear scorer over the
dense features plus membership counts of a planted "attacked" index range in
each field, thresholded so that exactly the requested fraction of samples is
positive. The attacked ranges sit at the head of the Zipf distribution, so
the planted signal is carried by rows the models actually see often.

CSV format: a mandatory header `label,dense_0..,sparse_0..`, one sample per
row, dense values printed with 9 significant digits (generation rounds values
to that precision so the round trip is lossless), and each sparse field a
"|"-joined index bag. Example row: `1,0.5,3|7`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

DEFAULT_ROWS_PER_FIELD = (4000, 2000, 2000, 1000, 500, 200, 118)

# multiplicative integer hash (Knuth); splits must not depend on RNG state
_HASH_MULT = 2654435761
_HASH_MOD = 2**32


@dataclass(frozen=True)
class DatasetSpec:
    """Generator knobs. Defaults mirror a 118-bus-style detection corpus:
    24,800 samples of which 4,800 are labeled as attacks."""

    n_samples: int = 24800
    n_dense: int = 6
    rows_per_field: tuple[int, ...] = DEFAULT_ROWS_PER_FIELD
    zipf_s: float = 1.05
    attack_fraction: float = 4800 / 24800
    seed: int = 0
    min_bag: int = 1
    max_bag: int = 3
    attack_row_fraction: float = 0.04  # head share of each field marked attacked
    cooccur_clusters: int = 0  # >0 plants per-sample co-occurrence groups
    cooccur_noise: float = 0.1

    @property
    def n_sparse(self) -> int:
        return len(self.rows_per_field)

    def validate(self) -> None:
        if self.n_samples < 1 or self.n_dense < 0 or self.n_sparse < 1:
            raise ValueError("need at least one sample and one sparse field")
        if not 0.0 < self.attack_fraction < 1.0:
            raise ValueError("attack_fraction must lie strictly inside (0, 1)")
        if self.zipf_s < 0.0:
            raise ValueError("zipf_s must be non-negative")
        if not 1 <= self.min_bag <= self.max_bag:
            raise ValueError("bag size range must satisfy 1 <= min <= max")
        if any(r < 1 for r in self.rows_per_field):
            raise ValueError("every sparse field needs at least one row")
        if self.cooccur_clusters < 0 or not 0.0 <= self.cooccur_noise <= 1.0:
            raise ValueError("bad co-occurrence options")


@dataclass
class Dataset:
    labels: np.ndarray  # (n,), values 0.0 / 1.0
    dense: np.ndarray  # (n, n_dense)
    bags: list[list[list[int]]]  # field -> sample -> index bag
    rows_per_field: tuple[int, ...]

    def __post_init__(self):
        n = self.labels.shape[0]
        if self.dense.shape[0] != n or any(len(f) != n for f in self.bags):
            raise ValueError("sample count disagrees across columns")
        if len(self.bags) != len(self.rows_per_field):
            raise ValueError("bag column count != rows_per_field length")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def n_dense(self) -> int:
        return self.dense.shape[1]

    @property
    def n_sparse(self) -> int:
        return len(self.bags)

    def select(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            labels=self.labels[idx],
            dense=self.dense[idx],
            bags=[[list(fld[i]) for i in idx.tolist()] for fld in self.bags],
            rows_per_field=self.rows_per_field,
        )


def zipf_probs(n: int, s: float) -> np.ndarray:
    """P(rank r) proportional to (r+1)**-s; s=0 is uniform."""
    if n < 1:
        raise ValueError("need a positive support size")
    p = np.arange(1, n + 1, dtype=np.float64) ** -float(s)
    return p / p.sum()


def _round_sig9(arr: np.ndarray) -> np.ndarray:
    """Round to the 9-significant-digit decimal the CSV format prints."""
    out = np.array([float(f"{v:.8e}") for v in arr.reshape(-1)])
    return out.reshape(arr.shape)


def _plant_labels(
    spec: DatasetSpec, rng, dense: np.ndarray, bags: list[list[list[int]]]
) -> np.ndarray:
    """Hidden scorer: w.dense + sum_f a_f * |bag_f intersect attacked_f|,
    thresholded at the top attack_fraction of scores."""
    w = rng.standard_normal(spec.n_dense)
    a = rng.uniform(0.8, 1.6, size=spec.n_sparse)
    attacked_len = [
        max(1, math.ceil(rows * spec.attack_row_fraction))
        for rows in spec.rows_per_field
    ]
    score = dense @ w if spec.n_dense else np.zeros(spec.n_samples)
    for f in range(spec.n_sparse):
        hits = np.array(
            [sum(1 for i in bag if i < attacked_len[f]) for bag in bags[f]],
            dtype=np.float64,
        )
        score = score + a[f] * hits
    k = int(round(spec.n_samples * spec.attack_fraction))
    order = np.argsort(score, kind="stable")
    labels = np.zeros(spec.n_samples)
    labels[order[spec.n_samples - k :]] = 1.0
    return labels


def _sample_field(spec: DatasetSpec, rng, rows: int, sizes: np.ndarray) -> list:
    """Index bags for one field, flat draws cut back into per-sample bags."""
    total = int(sizes.sum())
    if spec.cooccur_clusters > 0:
        k = min(spec.cooccur_clusters, rows)
        clusters = rng.integers(0, k, size=spec.n_samples)
        per_draw_cluster = np.repeat(clusters, sizes)
        draws = np.empty(total, dtype=np.int64)
        for c in range(k):
            mask = per_draw_cluster == c
            count = int(mask.sum())
            if count == 0:
                continue
            member_count = len(range(c, rows, k))
            ranks = rng.choice(member_count, size=count, p=zipf_probs(member_count, spec.zipf_s))
            draws[mask] = c + ranks * k  # members of cluster c interleave by k
        noise = rng.random(total) < spec.cooccur_noise
        if noise.any():
            draws[noise] = rng.choice(
                rows, size=int(noise.sum()), p=zipf_probs(rows, spec.zipf_s)
            )
    else:
        draws = rng.choice(rows, size=total, p=zipf_probs(rows, spec.zipf_s))
    bounds = np.cumsum(sizes)[:-1]
    return [chunk.tolist() for chunk in np.split(draws, bounds)]


def gen_synthetic(spec: DatasetSpec) -> Dataset:
    """Deterministic for a fixed spec (single RNG stream, fixed draw order)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dense = _round_sig9(rng.standard_normal((spec.n_samples, spec.n_dense)))
    bags = []
    for f, rows in enumerate(spec.rows_per_field):
        sizes = rng.integers(spec.min_bag, spec.max_bag + 1, size=spec.n_samples)
        bags.append(_sample_field(spec, rng, rows, sizes))
    labels = _plant_labels(spec, rng, dense, bags)
    return Dataset(
        labels=labels, dense=dense, bags=bags, rows_per_field=spec.rows_per_field
    )


# ------------------------------------------------------------ normalization


def dense_stats(dataset: Dataset) -> list[tuple[float, float]]:
    """Per-feature (min, max) over the given dataset."""
    return [
        (float(dataset.dense[:, j].min()), float(dataset.dense[:, j].max()))
        for j in range(dataset.n_dense)
    ]


def apply_normalization(
    dataset: Dataset, stats: Sequence[tuple[float, float]]
) -> Dataset:
    """Min-max scale each dense feature with the provided stats; constant
    features collapse to 0. Values outside the stats range (held-out data)
    are clipped into [0, 1]."""
    if len(stats) != dataset.n_dense:
        raise ValueError("stats length != dense feature count")
    cols = []
    for j, (lo, hi) in enumerate(stats):
        col = dataset.dense[:, j]
        if hi > lo:
            cols.append(np.clip((col - lo) / (hi - lo), 0.0, 1.0))
        else:
            cols.append(np.zeros_like(col))
    dense = np.stack(cols, axis=1) if cols else dataset.dense.copy()
    return Dataset(
        labels=dataset.labels.copy(),
        dense=dense,
        bags=[[list(b) for b in fld] for fld in dataset.bags],
        rows_per_field=dataset.rows_per_field,
    )


def normalize_dense(dataset: Dataset) -> tuple[Dataset, list[tuple[float, float]]]:
    stats = dense_stats(dataset)
    return apply_normalization(dataset, stats), stats


def save_stats(stats: Sequence[tuple[float, float]], path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for lo, hi in stats:
            fh.write(f"{lo!r} {hi!r}\n")


def load_stats(path) -> list[tuple[float, float]]:
    stats = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            if line.strip():
                lo, hi = line.split()
                stats.append((float(lo), float(hi)))
    return stats


# -------------------------------------------------------------------- CSV


def write_csv(dataset: Dataset, path) -> None:
    header = (
        ["label"]
        + [f"dense_{j}" for j in range(dataset.n_dense)]
        + [f"sparse_{f}" for f in range(dataset.n_sparse)]
    )
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(dataset.n):
            parts = [str(int(dataset.labels[i]))]
            parts += [f"{v:.8e}" for v in dataset.dense[i]]
            parts += [
                "|".join(str(idx) for idx in dataset.bags[f][i])
                for f in range(dataset.n_sparse)
            ]
            fh.write(",".join(parts) + "\n")


def read_csv(path, rows_per_field: Optional[Sequence[int]] = None) -> Dataset:
    """Parse and validate; errors name the offending line number.

    Field ranges are checked against rows_per_field when given, otherwise
    inferred as max index + 1 per field.
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file (missing header)")
    header = lines[0].split(",")
    n_dense = sum(1 for h in header if h.startswith("dense_"))
    n_sparse = sum(1 for h in header if h.startswith("sparse_"))
    want = ["label"] + [f"dense_{j}" for j in range(n_dense)] + [
        f"sparse_{f}" for f in range(n_sparse)
    ]
    if header != want or n_sparse < 1:
        raise ValueError(f"{path}:1: malformed header")

    labels, dense_rows = [], []
    bags: list[list[list[int]]] = [[] for _ in range(n_sparse)]
    for line_no, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 1 + n_dense + n_sparse:
            raise ValueError(
                f"{path}:{line_no}: expected {1 + n_dense + n_sparse} fields, "
                f"got {len(parts)}"
            )
        try:
            labels.append(float(parts[0]))
            dense_rows.append([float(v) for v in parts[1 : 1 + n_dense]])
        except ValueError:
            raise ValueError(f"{path}:{line_no}: non-numeric label or dense value")
        for f in range(n_sparse):
            token = parts[1 + n_dense + f]
            try:
                bag = [int(t) for t in token.split("|")]
            except ValueError:
                raise ValueError(
                    f"{path}:{line_no}: non-integer sparse index in {token!r}"
                )
            if not bag:
                raise ValueError(f"{path}:{line_no}: empty bag")
            if any(i < 0 for i in bag):
                raise ValueError(f"{path}:{line_no}: negative sparse index")
            bags[f].append(bag)

    if rows_per_field is not None:
        if len(rows_per_field) != n_sparse:
            raise ValueError(f"{path}: expected {len(rows_per_field)} sparse fields")
        ranges = tuple(int(r) for r in rows_per_field)
        for f, rows in enumerate(ranges):
            for i, bag in enumerate(bags[f]):
                if any(idx >= rows for idx in bag):
                    raise ValueError(
                        f"{path}:{i + 2}: sparse_{f} index out of range [0, {rows})"
                    )
    else:
        ranges = tuple(max(max(b) for b in fld) + 1 for fld in bags)
    return Dataset(
        labels=np.array(labels),
        dense=np.array(dense_rows).reshape(len(labels), n_dense),
        bags=bags,
        rows_per_field=ranges,
    )


# ------------------------------------------------------------------ slicing


def split_hash(sample_id: int) -> float:
    return (sample_id * _HASH_MULT % _HASH_MOD) / _HASH_MOD


def train_test_split(dataset: Dataset, train_frac: float = 0.8):
    """Deterministic id-hash split; independent of RNG state and sample order
    (the same sample id always lands on the same side)."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie inside (0, 1)")
    ids = np.arange(dataset.n)
    hashes = ids * _HASH_MULT % _HASH_MOD
    mask = hashes < train_frac * _HASH_MOD
    return dataset.select(ids[mask]), dataset.select(ids[~mask])


def batch_iter(
    dataset: Dataset, batch_size: int, shuffle_seed: Optional[int] = None
) -> Iterator[Dataset]:
    """Fixed-size batches in order (or a seeded shuffle); the final short
    batch is emitted, never dropped."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.arange(dataset.n)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(dataset.n)
    for start in range(0, dataset.n, batch_size):
        yield dataset.select(order[start : start + batch_size])
