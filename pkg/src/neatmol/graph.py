"""Molecular graphs, node-induced subgraphs, boundaries and rigid motions."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Heavier elements follow the usual organic ordering by atomic number.
ELEMENT_ORDER = ("H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I")


class GraphError(ValueError):
    """Invalid node index, empty node set or unreachable node."""


@dataclass(frozen=True)
class AtomVocabulary:
    elements: tuple[str, ...]

    def __post_init__(self):
        if not self.elements:
            raise ValueError("vocabulary needs at least one element")
        if len(set(self.elements)) != len(self.elements):
            raise ValueError(f"duplicate element symbols in {self.elements}")

    @property
    def stop_index(self) -> int:
        return len(self.elements)

    @property
    def size(self) -> int:
        return len(self.elements) + 1

    def index(self, symbol: str) -> int:
        try:
            return self.elements.index(symbol)
        except ValueError:
            raise KeyError(f"element {symbol!r} not in vocabulary {self.elements}") from None

    def symbol(self, index: int) -> str:
        if not 0 <= index < len(self.elements):
            raise KeyError(f"index {index} is not an element of {self.elements}")
        return self.elements[index]

    def encode(self, symbols: Iterable[str]) -> np.ndarray:
        return np.array([self.index(s) for s in symbols], dtype=np.int64)

    def decode(self, types: Iterable[int]) -> list[str]:
        return [self.symbol(int(t)) for t in types]

    @classmethod
    def from_symbols(cls, symbols: Iterable[str]) -> "AtomVocabulary":
        present = set(symbols)
        known = [e for e in ELEMENT_ORDER if e in present]
        extra = sorted(present - set(ELEMENT_ORDER))
        return cls(tuple(known + extra))


def _edge(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True, eq=False)
class MolecularGraph:
    """Atoms with integer types, ``(N, 3)`` positions in Å and undirected bonds.

    ``orders`` maps each edge ``(i, j)`` with ``i < j`` to its bond order; it
    may be empty when only connectivity is known.
    """

    types: np.ndarray
    positions: np.ndarray
    edges: frozenset
    orders: dict = field(default_factory=dict)
    vocab: AtomVocabulary | None = None
    neighbors: tuple = field(init=False, repr=False)

    def __post_init__(self):
        types = np.asarray(self.types, dtype=np.int64).reshape(-1)
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(types) != len(pos):
            raise GraphError(f"{len(types)} types but {len(pos)} positions")
        n = len(types)
        if self.vocab is not None and np.any(types == self.vocab.stop_index):
            raise GraphError("stop token cannot be an atom type")
        edges = set()
        for e in self.edges:
            i, j = int(e[0]), int(e[1])
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"edge {(i, j)} out of range for {n} nodes")
            edges.add(_edge(i, j))
        orders = {}
        for e, o in self.orders.items():
            key = _edge(int(e[0]), int(e[1]))
            if key not in edges:
                raise GraphError(f"bond order given for missing edge {key}")
            if int(o) not in (1, 2, 3):
                raise GraphError(f"bond order {o} on {key} not in 1..3")
            orders[key] = int(o)
        nbrs: list[list[int]] = [[] for _ in range(n)]
        for i, j in sorted(edges):
            nbrs[i].append(j)
            nbrs[j].append(i)
        types.setflags(write=False)
        pos.setflags(write=False)
        object.__setattr__(self, "types", types)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "edges", frozenset(edges))
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "neighbors", tuple(tuple(sorted(x)) for x in nbrs))

    @property
    def n_atoms(self) -> int:
        return len(self.types)

    def __len__(self) -> int:
        return len(self.types)

    @property
    def symbols(self) -> list[str]:
        if self.vocab is None:
            raise GraphError("graph has no vocabulary attached")
        return self.vocab.decode(self.types)

    def has_edge(self, i: int, j: int) -> bool:
        return _edge(i, j) in self.edges

    def order(self, i: int, j: int) -> int:
        return self.orders.get(_edge(i, j), 1)

    def with_positions(self, positions) -> "MolecularGraph":
        return MolecularGraph(self.types, positions, self.edges, self.orders, self.vocab)


def _as_nodeset(g: MolecularGraph, v: Iterable[int]) -> list[int]:
    nodes = sorted({int(i) for i in v})
    for i in nodes:
        if not 0 <= i < g.n_atoms:
            raise GraphError(f"node {i} out of range for {g.n_atoms} nodes")
    return nodes


def induced_subgraph(g: MolecularGraph, v: Iterable[int]) -> MolecularGraph:
    """Node-induced subgraph with nodes renumbered by ascending original index."""
    nodes = _as_nodeset(g, v)
    if not nodes:
        raise GraphError("induced_subgraph needs a nonempty node set")
    remap = {old: new for new, old in enumerate(nodes)}
    edges = [(remap[i], remap[j]) for i, j in g.edges if i in remap and j in remap]
    orders = {(remap[i], remap[j]): o for (i, j), o in g.orders.items() if i in remap and j in remap}
    return MolecularGraph(g.types[nodes], g.positions[nodes], frozenset(edges), orders, g.vocab)


def boundary_nodes(g: MolecularGraph, v: Iterable[int]) -> list[int]:
    """All neighbours of ``v`` that are not in ``v`` (sorted)."""
    inside = set(_as_nodeset(g, v))
    out = set()
    for i in inside:
        out.update(g.neighbors[i])
    return sorted(out - inside)


def bfs_distances(g: MolecularGraph, source: int) -> np.ndarray:
    """Hop distances from ``source``; unreachable nodes get -1."""
    if not 0 <= source < g.n_atoms:
        raise GraphError(f"node {source} out of range for {g.n_atoms} nodes")
    dist = np.full(g.n_atoms, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        i = queue.popleft()
        for j in g.neighbors[i]:
            if dist[j] < 0:
                dist[j] = dist[i] + 1
                queue.append(j)
    return dist


def eccentricity(g: MolecularGraph, node: int) -> int:
    dist = bfs_distances(g, node)
    if np.any(dist < 0):
        raise GraphError(f"graph is disconnected: node {int(np.argmin(dist))} unreachable from {node}")
    return int(dist.max())


def eccentricities(g: MolecularGraph) -> np.ndarray:
    return np.array([eccentricity(g, i) for i in range(g.n_atoms)], dtype=np.int64)


def connected_components(g: MolecularGraph) -> list[list[int]]:
    seen = np.zeros(g.n_atoms, dtype=bool)
    comps = []
    for start in range(g.n_atoms):
        if seen[start]:
            continue
        dist = bfs_distances(g, start)
        comp = [int(i) for i in np.flatnonzero(dist >= 0)]
        seen[comp] = True
        comps.append(comp)
    return comps


def is_connected(g: MolecularGraph, v: Iterable[int] | None = None) -> bool:
    if v is None:
        return g.n_atoms > 0 and len(connected_components(g)) == 1
    nodes = _as_nodeset(g, v)
    return bool(nodes) and is_connected(induced_subgraph(g, nodes))


def largest_fragment(g: MolecularGraph) -> MolecularGraph:
    """Largest connected component (ties broken by lowest node index)."""
    comps = connected_components(g)
    if len(comps) <= 1:
        return g
    best = max(comps, key=lambda c: (len(c), -c[0]))
    return induced_subgraph(g, best)


def zero_center(positions) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    return pos - pos.mean(axis=0, keepdims=True)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation matrix in SO(3) via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_rigid_motion(
    positions,
    rng: np.random.Generator,
    translate: bool = False,
    translation_scale: float = 1.0,
    rotation: np.ndarray | None = None,
) -> np.ndarray:
    """Rotate ``positions`` about the origin, then optionally translate by N(0, scale²).

    ``rotation`` overrides the random draw (used by tests to inject identity).
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    rot = random_rotation(rng) if rotation is None else np.asarray(rotation, dtype=np.float64)
    out = pos @ rot.T
    if translate:
        out = out + translation_scale * rng.standard_normal(3)
    return out


def graph_from_edges(types: Sequence[int], positions, edges, orders=None, vocab=None) -> MolecularGraph:
    return MolecularGraph(np.asarray(types), np.asarray(positions), frozenset(map(tuple, edges)), dict(orders or {}), vocab)
