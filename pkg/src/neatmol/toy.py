"""Procedural small acyclic molecules with idealised sp3 geometry."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chem import BondTable, ValenceRules, atom_stability, canonical_hash, infer_bonds, write_bonds, write_xyz
from .graph import AtomVocabulary, MolecularGraph, is_connected, random_rotation, zero_center

HEAVY_VALENCE = {"C": 4, "N": 3, "O": 2}
TETRA_COS = -1.0 / 3.0
MIN_NONBONDED = 1.5  # Å, rejects eclipsing clashes the bond table would not catch
MAX_ATTEMPTS = 200


@dataclass(frozen=True)
class ToySpec:
    max_heavy_atoms: int = 6
    elements: tuple = ("C", "N", "O")
    count: int = 20
    seed: int = 0
    jitter: float = 0.02
    unique: bool = True

    def __post_init__(self):
        if self.max_heavy_atoms < 1:
            raise ValueError("max_heavy_atoms must be >= 1")
        unknown = set(self.elements) - set(HEAVY_VALENCE)
        if unknown or not self.elements:
            raise ValueError(f"toy elements must be a nonempty subset of {sorted(HEAVY_VALENCE)}")


def toy_vocabulary(elements=("C", "N", "O")) -> AtomVocabulary:
    return AtomVocabulary.from_symbols(("H",) + tuple(elements))


def _tetrahedron(rng) -> np.ndarray:
    base = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64) / np.sqrt(3)
    return base @ random_rotation(rng).T


def _staggered_slots(bond_dir: np.ndarray, parent_others: np.ndarray) -> np.ndarray:
    """Three tetrahedral directions at the child end of ``bond_dir``, staggered w.r.t. the parent."""
    d = bond_dir / np.linalg.norm(bond_dir)
    ref = parent_others[0] - np.dot(parent_others[0], d) * d
    e1 = ref / np.linalg.norm(ref)
    e2 = np.cross(d, e1)
    sin_t = np.sqrt(1.0 - TETRA_COS**2)
    out = []
    for k in range(3):
        phi = np.pi / 3 + 2 * np.pi * k / 3
        out.append(-TETRA_COS * d + sin_t * (np.cos(phi) * e1 + np.sin(phi) * e2))
    return np.array(out)


def _heavy_tree(n_heavy: int, elements, rng) -> tuple[list[str], list[tuple[int, int]]]:
    elements = list(elements)
    symbols = [elements[int(rng.integers(len(elements)))]]
    edges: list[tuple[int, int]] = []
    degree = [0]
    for _ in range(n_heavy - 1):
        open_sites = [i for i, s in enumerate(symbols) if degree[i] < HEAVY_VALENCE[s]]
        parent = open_sites[int(rng.integers(len(open_sites)))]
        sym = elements[int(rng.integers(len(elements)))]
        if symbols[parent] != "C" and sym != "C":
            sym = "C" if "C" in elements else sym
        if symbols[parent] != "C" and sym != "C":
            break
        symbols.append(sym)
        degree.append(1)
        degree[parent] += 1
        edges.append((parent, len(symbols) - 1))
    return symbols, edges


def _embed(symbols, heavy_edges, table: BondTable, rng, jitter: float):
    """Place heavy atoms and hydrogens on tetrahedral slots; returns symbols, positions, edges."""
    n_heavy = len(symbols)
    children = {i: [] for i in range(n_heavy)}
    for p, c in heavy_edges:
        children[p].append(c)
    pos = {0: np.zeros(3)}
    all_symbols = list(symbols)
    all_pos = [None] * n_heavy
    edges = list(heavy_edges)

    def attach(parent: int, slots: np.ndarray):
        order = rng.permutation(len(slots))
        kids = children[parent]
        n_h = HEAVY_VALENCE[symbols[parent]] - len(kids) - (0 if parent == 0 else 1)
        picks = [slots[k] for k in order]
        for k, child in enumerate(kids):
            d = picks[k]
            length = table.get(symbols[parent], symbols[child], 1)
            pos[child] = pos[parent] + length * d
            # the parent's remaining substituents fix the stagger reference
            ref = np.array(picks[:k] + picks[k + 1:])
            attach(child, _staggered_slots(d, ref))
        for k in range(len(kids), len(kids) + n_h):
            d = picks[k]
            length = table.get(symbols[parent], "H", 1)
            all_symbols.append("H")
            all_pos.append(pos[parent] + length * d)
            edges.append((parent, len(all_symbols) - 1))

    attach(0, _tetrahedron(rng))
    for i in range(n_heavy):
        all_pos[i] = pos[i]
    coords = np.array(all_pos) + jitter * rng.standard_normal((len(all_pos), 3))
    return all_symbols, coords, edges


def _consistent(g: MolecularGraph, table: BondTable, rules: ValenceRules) -> bool:
    inferred = infer_bonds(g.types, g.positions, table, g.vocab)
    if inferred.edges != g.edges or any(inferred.order(i, j) != 1 for i, j in inferred.edges):
        return False
    if not atom_stability(inferred, rules).all() or not is_connected(inferred):
        return False
    d = np.linalg.norm(g.positions[:, None] - g.positions[None], axis=-1)
    n = g.n_atoms
    for i in range(n):
        for j in range(i + 1, n):
            if not g.has_edge(i, j) and d[i, j] < MIN_NONBONDED:
                return False
    return True


def make_molecule(n_heavy: int, spec: ToySpec, vocab: AtomVocabulary, table: BondTable, rng) -> MolecularGraph:
    rules = ValenceRules()
    for _ in range(MAX_ATTEMPTS):
        symbols, heavy_edges = _heavy_tree(n_heavy, spec.elements, rng)
        symbols, coords, edges = _embed(symbols, heavy_edges, table, rng, spec.jitter)
        g = MolecularGraph(vocab.encode(symbols), zero_center(coords), frozenset(edges),
                           {e: 1 for e in edges}, vocab)
        if _consistent(g, table, rules):
            return g
    raise RuntimeError(f"could not embed a clash-free molecule with {n_heavy} heavy atoms")


def generate_toy_corpus(spec: ToySpec, table: BondTable | None = None) -> list[MolecularGraph]:
    """``spec.count`` molecules; heavy-atom counts uniform in ``1..max_heavy_atoms``.

    With ``spec.unique`` no two molecules share a canonical hash (small sizes
    have few distinct structures, so the draw is retried).
    """
    table = table or BondTable.default()
    vocab = toy_vocabulary(spec.elements)
    rng = np.random.default_rng(spec.seed)
    out: list[MolecularGraph] = []
    seen: set[int] = set()
    tries = 0
    while len(out) < spec.count:
        tries += 1
        if tries > 100 * spec.count + 1000:
            raise RuntimeError("toy corpus: too few distinct molecules for the requested count")
        n_heavy = int(rng.integers(1, spec.max_heavy_atoms + 1))
        g = make_molecule(n_heavy, spec, vocab, table, rng)
        digest = canonical_hash(g)
        if spec.unique and digest in seen:
            continue
        seen.add(digest)
        out.append(g)
    return out


def write_corpus(graphs, directory: str | Path, prefix: str = "mol") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, g in enumerate(graphs):
        stem = directory / f"{prefix}_{k:05d}"
        stem.with_suffix(".xyz").write_text(write_xyz(g.symbols, g.positions, comment=f"{prefix}_{k:05d}"))
        stem.with_suffix(".bonds").write_text(write_bonds(g))
        paths.append(stem.with_suffix(".xyz"))
    return paths
