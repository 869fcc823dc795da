"""Locality-driven index relabeling.

Embedding rows that co-occur in training batches should share TT prefixes
(floor(index / m_3)), because shared prefixes are what the reuse buffer
deduplicates. The pipeline here: count per-row access frequencies, exempt the
hottest rows (they are frequent everywhere, grouping them buys nothing and
they may already be cached), build a weighted co-occurrence graph over the
remaining cold rows, cluster it by greedy modularity maximization, and emit a
bijection that renumbers each community onto consecutive indices.

All graph work happens in frequency-rank space: rank r means "the r-th most
accessed row", ranks below the hot threshold are dropped, and graph node ids
are cold ranks shifted down by the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np


@dataclass
class FreqOrder:
    """Access counts plus the rank permutation (descending count, ties by
    ascending row id)."""

    counts: np.ndarray  # row id -> access count
    rank_of: np.ndarray  # row id -> frequency rank
    row_of_rank: np.ndarray  # frequency rank -> row id

    @property
    def table_len(self) -> int:
        return self.counts.size


@dataclass
class IndexGraph:
    """Weighted co-occurrence graph over cold ranks shifted to [0, n_nodes).

    weights maps node pairs (a, b) with a < b to integer edge weights; no
    self-loops.
    """

    n_nodes: int
    weights: dict[tuple[int, int], int]

    @property
    def m_total(self) -> int:
        return sum(self.weights.values())

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for (a, b), w in self.weights.items():
            deg[a] += w
            deg[b] += w
        return deg


@dataclass
class CommunityAssignment:
    community_of: np.ndarray  # node -> dense community id
    n_communities: int
    q: float


@dataclass
class IndexBijection:
    """A permutation of [0, table_len) and its inverse."""

    forward: np.ndarray
    inverse: np.ndarray

    def __post_init__(self):
        self.forward = np.asarray(self.forward, dtype=np.int64)
        self.inverse = np.asarray(self.inverse, dtype=np.int64)
        n = self.forward.size
        if sorted(self.forward.tolist()) != list(range(n)):
            raise ValueError("forward map is not a permutation")
        if not (self.inverse[self.forward] == np.arange(n)).all():
            raise ValueError("inverse does not invert forward")

    @property
    def table_len(self) -> int:
        return self.forward.size


def count_frequencies(batches: Iterable[Sequence[int]], table_len: int) -> FreqOrder:
    """Tally accesses per row over flattened batches and rank them."""
    counts = np.zeros(table_len, dtype=np.int64)
    for batch in batches:
        arr = np.asarray(batch, dtype=np.int64)
        if arr.size == 0:
            continue
        if (arr < 0).any() or (arr >= table_len).any():
            raise ValueError(f"batch index outside [0, {table_len})")
        counts += np.bincount(arr, minlength=table_len)
    # primary key: count descending; secondary: row id ascending
    row_of_rank = np.lexsort((np.arange(table_len), -counts))
    rank_of = np.empty(table_len, dtype=np.int64)
    rank_of[row_of_rank] = np.arange(table_len)
    return FreqOrder(counts=counts, rank_of=rank_of, row_of_rank=row_of_rank)


def hot_row_set(freq: FreqOrder, hot_ratio: float) -> set[int]:
    """Rows whose rank falls below floor(table_len * hot_ratio)."""
    if not 0.0 <= hot_ratio <= 1.0:
        raise ValueError("hot_ratio must lie in [0, 1]")
    threshold = math.floor(freq.table_len * hot_ratio)
    return set(freq.row_of_rank[:threshold].tolist())


def build_index_graph(
    batches: Iterable[Sequence[int]], freq: FreqOrder, hot_ratio: float
) -> tuple[IndexGraph, set[int]]:
    """Edges between distinct cold ranks that appear in the same batch.

    Hot rows are dropped before pairing; node id = rank - hot_threshold.
    Returns the graph and the hot row set (original ids).
    """
    hot_rows = hot_row_set(freq, hot_ratio)
    threshold = len(hot_rows)
    n_nodes = freq.table_len - threshold
    weights: dict[tuple[int, int], int] = {}
    for batch in batches:
        arr = np.asarray(batch, dtype=np.int64)
        if arr.size == 0:
            continue
        if (arr < 0).any() or (arr >= freq.table_len).any():
            raise ValueError(f"batch index outside [0, {freq.table_len})")
        ranks = freq.rank_of[arr]
        nodes = np.unique(ranks[ranks >= threshold]) - threshold
        for i in range(nodes.size):
            for j in range(i + 1, nodes.size):
                key = (int(nodes[i]), int(nodes[j]))
                weights[key] = weights.get(key, 0) + 1
    return IndexGraph(n_nodes=n_nodes, weights=weights), hot_rows


def _as_assignment_array(graph: IndexGraph, assignment) -> np.ndarray:
    if isinstance(assignment, CommunityAssignment):
        arr = assignment.community_of
    elif isinstance(assignment, Mapping):
        arr = np.array([assignment[i] for i in range(graph.n_nodes)])
    else:
        arr = np.asarray(assignment)
    if arr.shape != (graph.n_nodes,):
        raise ValueError("assignment must cover every node exactly once")
    return arr.astype(np.int64)


def modularity(graph: IndexGraph, assignment) -> float:
    """Newman modularity: sum_c [w_in(c)/m - (deg(c)/(2m))^2]."""
    if graph.n_nodes == 0:
        raise ValueError("empty graph")
    m = graph.m_total
    if m == 0:
        raise ValueError("graph has no edges; modularity is undefined")
    comm = _as_assignment_array(graph, assignment)
    w_in: dict[int, float] = {}
    deg: dict[int, float] = {}
    for (a, b), w in graph.weights.items():
        ca, cb = int(comm[a]), int(comm[b])
        deg[ca] = deg.get(ca, 0.0) + w
        deg[cb] = deg.get(cb, 0.0) + w
        if ca == cb:
            w_in[ca] = w_in.get(ca, 0.0) + w
    q = 0.0
    for c in set(comm.tolist()):
        q += w_in.get(c, 0.0) / m - (deg.get(c, 0.0) / (2.0 * m)) ** 2
    return q


def detect_communities(graph: IndexGraph) -> CommunityAssignment:
    """Greedy agglomeration: repeatedly merge the connected community pair
    with the largest positive modularity gain.

    Merging communities a and b changes Q by e_ab/m - deg_a*deg_b/(2m^2),
    so only connected pairs are candidates. A community is labeled by its
    smallest member node and gain ties resolve to the smallest label pair.
    Final ids are densified in ascending smallest-member order. An edgeless
    graph stays all singletons with q = 0 by convention.
    """
    n = graph.n_nodes
    if n == 0:
        raise ValueError("empty graph")
    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    w_in = {i: 0.0 for i in range(n)}
    deg = {i: 0.0 for i in range(n)}
    between: dict[int, dict[int, float]] = {i: {} for i in range(n)}
    for (a, b), w in graph.weights.items():
        deg[a] += w
        deg[b] += w
        between[a][b] = between[a].get(b, 0.0) + w
        between[b][a] = between[b].get(a, 0.0) + w
    m = graph.m_total

    if m > 0:
        two_m_sq = 2.0 * m * m
        while True:
            best = None
            for a in sorted(between):
                for b in sorted(between[a]):
                    if a >= b:
                        continue
                    gain = between[a][b] / m - deg[a] * deg[b] / two_m_sq
                    key = (-gain, a, b)
                    if best is None or key < best:
                        best = key
            if best is None or -best[0] <= 0.0:
                break
            _, a, b = best
            # fold b into a (a < b, so the merged label stays the minimum)
            w_in[a] += w_in[b] + between[a][b]
            deg[a] += deg[b]
            members[a].extend(members[b])
            del between[a][b], between[b][a]
            for c, w in between[b].items():
                between[c].pop(b)
                between[a][c] = between[a].get(c, 0.0) + w
                between[c][a] = between[c].get(a, 0.0) + w
            del between[b], members[b], w_in[b], deg[b]

    labels = sorted(members)
    community_of = np.empty(n, dtype=np.int64)
    for dense_id, label in enumerate(labels):
        for node in members[label]:
            community_of[node] = dense_id
    assignment = CommunityAssignment(
        community_of=community_of, n_communities=len(labels), q=0.0
    )
    if m > 0:
        assignment.q = modularity(graph, assignment)
    return assignment


def build_bijection(
    assignment: CommunityAssignment,
    hot_rows: set[int],
    freq: FreqOrder,
    table_len: int,
) -> IndexBijection:
    """Relabel cold rows so communities become contiguous index runs.

    Hot rows are exempt from reordering and map to themselves. The remaining
    positions are filled in community order: communities sorted by descending
    total access count (ties by smallest member id), members within a
    community by descending count (ties by ascending old id). When the hot
    rows happen to occupy [0, hot_threshold) the cold rows land on the
    consecutive positions from hot_threshold upward.
    """
    if freq.table_len != table_len:
        raise ValueError("frequency table length mismatch")
    threshold = len(hot_rows)
    cold_rows = [r for r in range(table_len) if r not in hot_rows]
    if assignment.community_of.size != len(cold_rows):
        raise ValueError(
            f"{assignment.community_of.size} assigned nodes for "
            f"{len(cold_rows)} cold rows"
        )

    groups: dict[int, list[int]] = {}
    for row in cold_rows:
        node = int(freq.rank_of[row]) - threshold
        groups.setdefault(int(assignment.community_of[node]), []).append(row)
    ordered_communities = sorted(
        groups.values(),
        key=lambda rows: (-sum(int(freq.counts[r]) for r in rows), min(rows)),
    )

    forward = np.full(table_len, -1, dtype=np.int64)
    for row in hot_rows:
        forward[row] = row
    free_positions = iter(sorted(set(range(table_len)) - hot_rows))
    for rows in ordered_communities:
        rows.sort(key=lambda r: (-int(freq.counts[r]), r))
        for row in rows:
            forward[row] = next(free_positions)
    inverse = np.empty(table_len, dtype=np.int64)
    inverse[forward] = np.arange(table_len)
    return IndexBijection(forward=forward, inverse=inverse)


def apply_bijection(
    bijection: IndexBijection, batches: Iterable[Sequence[int]]
) -> list[list[int]]:
    """Relabel every index, preserving batch structure and order."""
    out = []
    for batch in batches:
        arr = np.asarray(batch, dtype=np.int64)
        if arr.size and ((arr < 0).any() or (arr >= bijection.table_len).any()):
            raise ValueError(f"batch index outside [0, {bijection.table_len})")
        out.append(bijection.forward[arr].tolist())
    return out


def mean_distinct_prefixes(batches: Iterable[Sequence[int]], m_last: int) -> float:
    """Average per-batch count of distinct floor(index / m_last) prefixes;
    the quantity the reuse buffer keys on."""
    if m_last < 1:
        raise ValueError("m_last must be positive")
    sizes = [
        len(set(int(i) // m_last for i in batch)) for batch in batches if len(batch)
    ]
    if not sizes:
        raise ValueError("no non-empty batches")
    return float(np.mean(sizes))


def save_bijection(bijection: IndexBijection, path) -> None:
    """Text format: one 'old new' pair per line, sorted by old index."""
    with open(path, "w", encoding="ascii") as fh:
        for old, new in enumerate(bijection.forward.tolist()):
            fh.write(f"{old} {new}\n")


def load_bijection(path) -> IndexBijection:
    pairs = []
    with open(path, "r", encoding="ascii") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ValueError(f"{path}:{line_no}: expected 'old new'")
            pairs.append((int(parts[0]), int(parts[1])))
    if [old for old, _ in pairs] != list(range(len(pairs))):
        raise ValueError(f"{path}: old indices must be 0..n-1 in order")
    forward = np.array([new for _, new in pairs], dtype=np.int64)
    inverse = np.empty_like(forward)
    inverse[forward] = np.arange(forward.size)
    return IndexBijection(forward=forward, inverse=inverse)
