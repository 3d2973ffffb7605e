"""Communication graphs: incidence, Laplacian, reduced Laplacian and coupling matrices.

Nodes are numbered from 1 in the public API. Node 1 is always the reference
node eliminated by :func:`reduced_laplacian` and :func:`coupling_matrix`.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    """Malformed graph description. ``code`` is a short machine-readable tag."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class CommGraph:
    node_count: int
    edges: tuple[tuple[int, int], ...]
    incidence: np.ndarray = field(repr=False)
    laplacian: np.ndarray = field(repr=False)

    @property
    def N(self) -> int:
        return self.node_count

    def neighbors(self, i: int) -> list[int]:
        """1-based neighbours of 1-based node ``i``."""
        row = self.laplacian[i - 1]
        return [j + 1 for j in np.flatnonzero(row) if j != i - 1]

    def apply_laplacian(self, y: np.ndarray) -> np.ndarray:
        """Return ``L @ y`` computed as ``D @ (D.T @ y)``.

        The edge differences are formed first, so the result is exactly zero
        whenever all rows of ``y`` coincide.
        """
        D = self.incidence.astype(float)
        return D @ (D.T @ y)

    def as_dict(self) -> dict:
        return {"nodes": self.node_count, "edges": [list(e) for e in self.edges]}


@dataclass(frozen=True)
class CouplingMatrix:
    c1: float
    A: np.ndarray
    mu: float


def build_graph(N: int, edges) -> CommGraph:
    if int(N) != N or N < 1:
        raise GraphError("bad-node-count", f"node count must be a positive integer, got {N!r}")
    N = int(N)
    seen: set[frozenset] = set()
    clean: list[tuple[int, int]] = []
    for k, e in enumerate(edges):
        if len(e) != 2:
            raise GraphError("bad-edge", f"edge #{k + 1} must have two endpoints, got {e!r}")
        i, j = int(e[0]), int(e[1])
        if i == j:
            raise GraphError("self-loop", f"edge #{k + 1} ({i},{j}) is a self-loop")
        for v in (i, j):
            if not 1 <= v <= N:
                raise GraphError(
                    "index-out-of-range", f"edge #{k + 1} ({i},{j}) references node {v} outside 1..{N}"
                )
        key = frozenset((i, j))
        if key in seen:
            raise GraphError("duplicate-edge", f"edge #{k + 1} ({i},{j}) duplicates an earlier edge")
        seen.add(key)
        clean.append((i, j))

    D = np.zeros((N, len(clean)), dtype=np.int64)
    for k, (i, j) in enumerate(clean):
        D[i - 1, k] = 1
        D[j - 1, k] = -1
    L = D @ D.T
    D.setflags(write=False)
    L.setflags(write=False)
    return CommGraph(N, tuple(clean), D, L)


def is_connected(g: CommGraph) -> bool:
    visited = {1}
    queue = deque([1])
    while queue:
        i = queue.popleft()
        for j in g.neighbors(i):
            if j not in visited:
                visited.add(j)
                queue.append(j)
    return len(visited) == g.node_count


def laplacian_spectrum(g: CommGraph) -> np.ndarray:
    return np.linalg.eigvalsh(g.laplacian.astype(float))


def zero_tolerance(g: CommGraph) -> float:
    return 1e-9 * g.node_count


def reduced_laplacian(g: CommGraph) -> np.ndarray:
    """``L[2:,2:] - 1 (x) L[1,2:]``: shares the nonzero spectrum of ``L``."""
    if g.node_count < 2:
        raise GraphError("too-small", "reduced Laplacian needs at least two nodes")
    L = g.laplacian.astype(float)
    return L[1:, 1:] - np.outer(np.ones(g.node_count - 1), L[0, 1:])


def coupling_matrix(g: CommGraph, c1: float) -> CouplingMatrix:
    if g.node_count < 2:
        raise GraphError("too-small", "coupling matrix needs at least two nodes")
    if not c1 > 0:
        raise ValueError(f"c1 must be positive, got {c1}")
    L = g.laplacian.astype(float)
    A = -(L[1:, 1:] - c1 * np.outer(np.ones(g.node_count - 1), L[0, 1:]))
    top = np.linalg.eigvalsh(A + A.T)[-1]
    return CouplingMatrix(float(c1), A, float(max(0.0, -top)))


def find_c1(g: CommGraph, floor: float = 2.0**-40) -> CouplingMatrix:
    """Halve ``c1`` from 1 until ``A(c1) + A(c1)^T`` is negative definite."""
    c1 = 1.0
    while c1 >= floor:
        cm = coupling_matrix(g, c1)
        if cm.mu > 0:
            return cm
        c1 /= 2
    raise GraphError(
        "c1-search-exhausted",
        f"no c1 >= {floor:g} makes A(c1)+A(c1)^T negative definite; graph disconnected or malformed",
    )


# -- helper families used by tests and configuration files ----------------------


def path_graph(N: int) -> CommGraph:
    return build_graph(N, [(i, i + 1) for i in range(1, N)])


def ring_graph(N: int) -> CommGraph:
    if N < 3:
        return path_graph(N)
    return build_graph(N, [(i, i + 1) for i in range(1, N)] + [(N, 1)])


def star_graph(N: int) -> CommGraph:
    return build_graph(N, [(1, j) for j in range(2, N + 1)])


def complete_graph(N: int) -> CommGraph:
    return build_graph(N, [(i, j) for i in range(1, N + 1) for j in range(i + 1, N + 1)])


def random_connected_graph(N: int, rng: np.random.Generator, extra_prob: float = 0.3) -> CommGraph:
    """Random spanning tree plus independent extra edges with probability ``extra_prob``."""
    order = rng.permutation(N) + 1
    edges = []
    for k in range(1, N):
        parent = order[rng.integers(0, k)]
        edges.append((int(parent), int(order[k])))
    present = {frozenset(e) for e in edges}
    for i in range(1, N + 1):
        for j in range(i + 1, N + 1):
            if frozenset((i, j)) not in present and rng.random() < extra_prob:
                edges.append((i, j))
    return build_graph(N, edges)


FAMILIES = {
    "path": path_graph,
    "ring": ring_graph,
    "star": star_graph,
    "complete": complete_graph,
}
