"""Undirected graphs in CSR form plus edge-list IO and generators.

Graphs are simple (no self loops, no multi-edges) and node ids are dense
integers ``0..n-1``.  Isolated nodes are representable; downstream code
that cannot handle them (the benchmark generator, the attention model)
rejects them explicitly rather than silently producing NaNs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

import numpy as np


class GraphError(ValueError):
    """Raised for structurally invalid graphs or edge lists."""


class EdgeListParseError(GraphError):
    """Parse failure in an edge-list file, with 1-based location info."""

    def __init__(self, message: str, line: int, column: int | None = None):
        loc = f"line {line}" if column is None else f"line {line}, column {column}"
        super().__init__(f"{loc}: {message}")
        self.line = line
        self.column = column


_TOKEN = re.compile(r"\S+")


class Network:
    """An undirected graph over nodes ``0..n-1`` with sorted adjacency.

    Internally stores a CSR structure (``indptr``, ``indices``) where each
    undirected edge appears in both directions and every neighbour list is
    sorted ascending.  Instances are treated as immutable.
    """

    __slots__ = ("n", "indptr", "indices")

    def __init__(self, n: int, indptr: np.ndarray, indices: np.ndarray):
        self.n = int(n)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        if self.indptr.shape != (self.n + 1,):
            raise GraphError(f"indptr has shape {self.indptr.shape}, expected ({self.n + 1},)")
        if self.indptr[0] != 0 or self.indptr[-1] != self.indices.size:
            raise GraphError("indptr endpoints do not match indices length")

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[int, int]], n: int | None = None) -> "Network":
        """Build a network from undirected edge pairs.

        Duplicate edges (in either orientation) are collapsed.  Self loops
        and negative ids raise :class:`GraphError`.  When ``n`` is omitted
        it is inferred as ``max id + 1``.
        """
        pairs = set()
        max_id = -1
        for i, j in edges:
            i, j = int(i), int(j)
            if i < 0 or j < 0:
                raise GraphError(f"negative node id in edge ({i}, {j})")
            if i == j:
                raise GraphError(f"self loop at node {i}")
            pairs.add((min(i, j), max(i, j)))
            max_id = max(max_id, i, j)
        if n is None:
            n = max_id + 1
        elif max_id >= n:
            raise GraphError(f"edge references node {max_id} but n={n}")
        n = int(n)
        if n < 0:
            raise GraphError(f"negative node count {n}")
        deg = np.zeros(n, dtype=np.int64)
        for i, j in pairs:
            deg[i] += 1
            deg[j] += 1
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(deg, out=indptr[1:])
        indices = np.empty(indptr[-1], dtype=np.int64)
        cursor = indptr[:-1].copy()
        for i, j in sorted(pairs):
            indices[cursor[i]] = j
            cursor[i] += 1
            indices[cursor[j]] = i
            cursor[j] += 1
        # Neighbour lists for the lower endpoint fill in sorted order from the
        # sorted pair iteration; the reverse direction needs an explicit sort.
        for v in range(n):
            indices[indptr[v]:indptr[v + 1]].sort()
        return cls(n, indptr, indices)

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return self.indices.size // 2

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, i: int) -> np.ndarray:
        """Sorted neighbour ids of node ``i`` (a view, do not mutate)."""
        if not 0 <= i < self.n:
            raise GraphError(f"node {i} out of range for n={self.n}")
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def directed_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All directed edges ``(rows, cols)`` in row-major sorted order.

        Each undirected edge contributes both orientations, so the arrays
        have length ``2 * num_edges``.
        """
        rows = np.repeat(np.arange(self.n, dtype=np.int64), self.degrees)
        return rows, self.indices.copy()

    def undirected_pairs(self) -> list[tuple[int, int]]:
        """Canonical edge list: each edge once, smaller id first, sorted."""
        rows, cols = self.directed_pairs()
        keep = rows < cols
        return list(zip(rows[keep].tolist(), cols[keep].tolist()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Network):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    def __hash__(self):
        return hash((self.n, self.indices.tobytes()))

    def __repr__(self):
        return f"Network(n={self.n}, edges={self.num_edges})"


def load_edge_list(path) -> Network:
    """Read a whitespace-separated edge list.

    Each non-comment line holds two integer node ids.  ``#`` starts a
    comment (full line or trailing).  The node count is inferred as
    ``max id + 1``.  Malformed lines raise :class:`EdgeListParseError`
    carrying the 1-based line and column of the offending token.
    """
    edges = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0]
            tokens = list(_TOKEN.finditer(line))
            if not tokens:
                continue
            if len(tokens) != 2:
                raise EdgeListParseError(
                    f"expected 2 node ids, found {len(tokens)}", lineno,
                    tokens[0].start() + 1,
                )
            ids = []
            for tok in tokens:
                try:
                    ids.append(int(tok.group()))
                except ValueError:
                    raise EdgeListParseError(
                        f"not an integer node id: {tok.group()!r}", lineno,
                        tok.start() + 1,
                    ) from None
            i, j = ids
            if i < 0 or j < 0:
                raise EdgeListParseError(
                    f"negative node id in edge ({i}, {j})", lineno,
                    tokens[0].start() + 1,
                )
            if i == j:
                raise EdgeListParseError(f"self loop at node {i}", lineno,
                                         tokens[0].start() + 1)
            edges.append((i, j))
    return Network.from_edges(edges)


def save_edge_list(net: Network, path) -> None:
    """Write the canonical edge list: one edge per line, min id first, sorted.

    The output contains no comments and ends with a newline, so saving the
    same network always produces identical bytes.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, j in net.undirected_pairs():
            fh.write(f"{i} {j}\n")


@dataclass(frozen=True)
class DegreeStats:
    n: int
    num_edges: int
    min_degree: int
    max_degree: int
    mean_degree: float
    isolated_count: int


def degree_stats(net: Network) -> DegreeStats:
    """Summary statistics of the degree sequence."""
    deg = net.degrees
    if net.n == 0:
        return DegreeStats(0, 0, 0, 0, 0.0, 0)
    return DegreeStats(
        n=net.n,
        num_edges=net.num_edges,
        min_degree=int(deg.min()),
        max_degree=int(deg.max()),
        mean_degree=float(deg.mean()),
        isolated_count=int((deg == 0).sum()),
    )


def ring_lattice(n: int, k: int) -> Network:
    """Ring lattice: node ``i`` connects to its ``k`` nearest ring neighbours.

    ``k`` must be even and satisfy ``0 < k < n``; for small ``n`` the wrap
    may make some of those neighbours coincide, which is fine because
    duplicates collapse.
    """
    if k <= 0 or k % 2 != 0:
        raise GraphError(f"ring lattice needs positive even k, got {k}")
    if k >= n:
        raise GraphError(f"ring lattice needs k < n, got k={k}, n={n}")
    edges = []
    for i in range(n):
        for step in range(1, k // 2 + 1):
            edges.append((i, (i + step) % n))
    return Network.from_edges(edges, n=n)


def sbm(n: int, blocks: int, p_in: float, p_out: float, seed: int) -> Network:
    """Stochastic block model with equal-sized blocks (remainder spread).

    Every unordered pair is kept independently with probability ``p_in``
    (same block) or ``p_out`` (different blocks).  Nodes that come out
    isolated are attached to the next member of their block (or to the
    next node id for singleton blocks) so the result never has isolated
    nodes; this keeps generation usable directly as a benchmark graph.
    """
    if blocks <= 0 or blocks > n:
        raise GraphError(f"need 1 <= blocks <= n, got blocks={blocks}, n={n}")
    for name, p in (("p_in", p_in), ("p_out", p_out)):
        if not 0.0 <= p <= 1.0:
            raise GraphError(f"{name}={p} outside [0, 1]")
    labels = np.repeat(np.arange(blocks), np.diff(np.linspace(0, n, blocks + 1).astype(int)))
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    edges = list(zip(iu[keep].tolist(), ju[keep].tolist()))
    net = Network.from_edges(edges, n=n)
    isolated = np.flatnonzero(net.degrees == 0)
    if isolated.size:
        for i in isolated.tolist():
            members = np.flatnonzero(labels == labels[i])
            if members.size > 1:
                pos = int(np.searchsorted(members, i))
                partner = int(members[(pos + 1) % members.size])
            else:
                partner = (i + 1) % n
            edges.append((i, partner))
        net = Network.from_edges(edges, n=n)
    return net
