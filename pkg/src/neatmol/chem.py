"""Bond perception from coordinates, valence checks, graph hashing and XYZ I/O."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import (
    AtomVocabulary,
    ELEMENT_ORDER,
    MolecularGraph,
    eccentricities,
    is_connected,
    largest_fragment,
    zero_center,
)

log = logging.getLogger(__name__)

PERIODIC_TABLE = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe"
).split()

DEFAULT_MARGIN = 0.10


class XYZParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# tables


@dataclass
class BondTable:
    """Reference bond lengths keyed by ``(elemA, elemB, order)``, symmetric in elements."""

    lengths: dict = field(default_factory=dict)
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        sym = {}
        for (a, b, order), length in self.lengths.items():
            if length <= 0:
                raise ValueError(f"non-positive bond length for {a}-{b} order {order}")
            if order not in (1, 2, 3):
                raise ValueError(f"bond order {order} not in 1..3")
            sym[(a, b, order)] = float(length)
            sym[(b, a, order)] = float(length)
        self.lengths = sym
        for (a, b, _), _l in list(sym.items()):
            present = [sym[(a, b, o)] for o in (1, 2, 3) if (a, b, o) in sym]
            if present != sorted(present, reverse=True):
                raise ValueError(f"bond lengths for {a}-{b} must not increase with order: {present}")

    def get(self, a: str, b: str, order: int) -> float | None:
        return self.lengths.get((a, b, order))

    def knows(self, a: str, b: str) -> bool:
        return (a, b, 1) in self.lengths or (a, b, 2) in self.lengths or (a, b, 3) in self.lengths

    @classmethod
    def from_tsv(cls, text: str, margin: float = DEFAULT_MARGIN) -> "BondTable":
        lengths = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"bond table line {lineno}: expected 4 tab-separated fields")
            a, b, order, length = parts
            lengths[(a, b, int(order))] = float(length)
        return cls(lengths, margin)

    @classmethod
    def default(cls, margin: float = DEFAULT_MARGIN) -> "BondTable":
        text = resources.files("neatmol").joinpath("data/bond_table.tsv").read_text(encoding="utf-8")
        return cls.from_tsv(text, margin)


# Allowed total bond orders; several values for hypervalent P and S.
DEFAULT_VALENCES = {
    "H": (1,), "C": (4,), "N": (3,), "O": (2,), "F": (1,),
    "P": (3, 5), "S": (2, 4, 6), "Cl": (1,), "Br": (1,), "I": (1,),
}


@dataclass
class ValenceRules:
    allowed: dict = field(default_factory=lambda: dict(DEFAULT_VALENCES))

    def __post_init__(self):
        self.allowed = {k: tuple(int(x) for x in (v if isinstance(v, (tuple, list)) else (v,)))
                        for k, v in self.allowed.items()}
        for k, v in self.allowed.items():
            if not v or min(v) <= 0:
                raise ValueError(f"valences for {k} must be positive integers")

    def is_stable(self, element: str, valence: int) -> bool:
        return element in self.allowed and valence in self.allowed[element]

    def max_valence(self, element: str) -> int | None:
        return max(self.allowed[element]) if element in self.allowed else None


# ---------------------------------------------------------------------------
# bond perception


@dataclass
class BondPerception:
    graph: MolecularGraph
    unknown_pairs: int = 0


def bond_order(a: str, b: str, distance: float, table: BondTable) -> int | None:
    """Order of the shortest bond type whose length plus margin exceeds ``distance``.

    Returns 0 for no bond and ``None`` when the table has no entry for the pair.
    """
    if not table.knows(a, b):
        return None
    for order in (3, 2, 1):
        ref = table.get(a, b, order)
        if ref is not None and distance < ref + table.margin:
            return order
    return 0


def infer_bonds_detailed(types, positions, table: BondTable, vocab: AtomVocabulary) -> BondPerception:
    types = np.asarray(types, dtype=np.int64)
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pos)):
        raise ValueError("positions must be finite")
    symbols = vocab.decode(types)
    n = len(types)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    edges, orders = [], {}
    unknown = 0
    for i in range(n):
        for j in range(i + 1, n):
            order = bond_order(symbols[i], symbols[j], float(dist[i, j]), table)
            if order is None:
                unknown += 1
            elif order:
                edges.append((i, j))
                orders[(i, j)] = order
    if unknown:
        log.warning("%d atom pairs had no bond-table entry and were left unbonded", unknown)
    return BondPerception(MolecularGraph(types, pos, frozenset(edges), orders, vocab), unknown)


def infer_bonds(types, positions, table: BondTable, vocab: AtomVocabulary) -> MolecularGraph:
    """Assign bonds by checking triple, then double, then single length thresholds."""
    return infer_bonds_detailed(types, positions, table, vocab).graph


def valences(graph: MolecularGraph, single_bond_reduction: bool = False) -> np.ndarray:
    val = np.zeros(graph.n_atoms, dtype=np.int64)
    for (i, j) in graph.edges:
        o = 1 if single_bond_reduction else graph.order(i, j)
        val[i] += o
        val[j] += o
    return val


def atom_stability(graph: MolecularGraph, rules: ValenceRules | None = None) -> np.ndarray:
    """Per-atom flag: total incident bond order is an allowed valence."""
    rules = rules or ValenceRules()
    val = valences(graph)
    out = np.zeros(graph.n_atoms, dtype=bool)
    for i, sym in enumerate(graph.symbols):
        if sym not in rules.allowed:
            log.warning("no valence rule for element %s; counted unstable", sym)
            continue
        out[i] = rules.is_stable(sym, int(val[i]))
    return out


def passes_single_bond_sanitization(graph: MolecularGraph, rules: ValenceRules | None = None) -> bool:
    """All bonds read as single; an atom passes unless its bond count exceeds its maximum valence."""
    rules = rules or ValenceRules()
    val = valences(graph, single_bond_reduction=True)
    for i, sym in enumerate(graph.symbols):
        mx = rules.max_valence(sym)
        if mx is None or val[i] > mx:
            return False
    return True


# ---------------------------------------------------------------------------
# canonical hashing


def _h(text: str) -> str:
    return hashlib.blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


def canonical_hash(graph: MolecularGraph, iterations: int = 3) -> int:
    """64-bit Weisfeiler-Lehman digest over (element, total bond order) labels.

    Invariant to atom order; bond orders enter both the initial labels and the
    neighbour aggregation.
    """
    symbols = graph.symbols
    val = valences(graph)
    labels = [_h(f"{s}:{v}") for s, v in zip(symbols, val)]
    history = list(labels)
    for _ in range(iterations):
        new = []
        for i in range(graph.n_atoms):
            nb = sorted(f"{graph.order(i, j)}{labels[j]}" for j in graph.neighbors[i])
            new.append(_h(labels[i] + "|" + ",".join(nb)))
        labels = new
        history.extend(labels)
    digest = hashlib.blake2b(",".join(sorted(history)).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MoleculeRow:
    n_atoms: int
    n_stable_atoms: int
    stable: bool
    connected: bool
    valid: bool
    valid_single_bond: bool
    digest: int | None


@dataclass
class EvalReport:
    n_samples: int
    atom_stable_pct: float
    mol_stable_pct: float
    valid_pct: float
    unique_pct: float
    novel_pct: float
    valid_single_bond_pct: float = 0.0
    memorized_pct: float = 0.0
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "atom_stable_pct": self.atom_stable_pct,
            "mol_stable_pct": self.mol_stable_pct,
            "valid_pct": self.valid_pct,
            "unique_pct": self.unique_pct,
            "novel_pct": self.novel_pct,
            "valid_single_bond_pct": self.valid_single_bond_pct,
            "memorized_pct": self.memorized_pct,
            "molecules": [
                {
                    "n_atoms": r.n_atoms,
                    "n_stable_atoms": r.n_stable_atoms,
                    "stable": r.stable,
                    "connected": r.connected,
                    "valid": r.valid,
                    "valid_single_bond": r.valid_single_bond,
                    "hash": None if r.digest is None else f"{r.digest:016x}",
                }
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        lines = [
            f"{'metric':<24}{'value':>10}",
            f"{'samples':<24}{self.n_samples:>10d}",
            f"{'atom stable %':<24}{self.atom_stable_pct:>10.2f}",
            f"{'molecule stable %':<24}{self.mol_stable_pct:>10.2f}",
            f"{'valid %':<24}{self.valid_pct:>10.2f}",
            f"{'valid (single bond) %':<24}{self.valid_single_bond_pct:>10.2f}",
            f"{'unique %':<24}{self.unique_pct:>10.2f}",
            f"{'novel %':<24}{self.novel_pct:>10.2f}",
            f"{'memorized % of valid':<24}{self.memorized_pct:>10.2f}",
        ]
        return "\n".join(lines)


def evaluate_molecule(graph: MolecularGraph, rules: ValenceRules) -> MoleculeRow:
    stable = atom_stability(graph, rules)
    connected = graph.n_atoms > 0 and is_connected(graph)
    mol_stable = bool(stable.all()) and graph.n_atoms > 0
    valid = connected and mol_stable
    valid_sb = connected and passes_single_bond_sanitization(graph, rules)
    digest = canonical_hash(graph) if (valid or valid_sb) else None
    return MoleculeRow(graph.n_atoms, int(stable.sum()), mol_stable, connected, valid, valid_sb, digest)


def molecule_metrics(
    graphs: Sequence[MolecularGraph],
    reference_hashes: Iterable[int] = (),
    rules: ValenceRules | None = None,
    single_bond_reduction: bool = False,
    rows: Sequence[MoleculeRow] | None = None,
) -> EvalReport:
    """Stability, validity, uniqueness and novelty percentages over bonded graphs.

    Validity means connected with every atom at an allowed valence; with
    ``single_bond_reduction`` uniqueness and novelty are computed from the
    single-bond sanitization variant instead.  All percentages use the number
    of samples as denominator, so novel <= unique <= valid.
    """
    rules = rules or ValenceRules()
    ref = set(reference_hashes)
    if rows is None:
        rows = [evaluate_molecule(g, rules) for g in graphs]
    rows = list(rows)
    n = len(rows)
    if n == 0:
        return EvalReport(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, [])
    total_atoms = sum(r.n_atoms for r in rows)
    stable_atoms = sum(r.n_stable_atoms for r in rows)
    valid_flags = [r.valid_single_bond if single_bond_reduction else r.valid for r in rows]
    valid_digests = [r.digest for r, v in zip(rows, valid_flags) if v]
    unique = set(valid_digests)
    novel = unique - ref
    memorized = sum(1 for d in valid_digests if d in ref)

    def pct(k):
        return 100.0 * k / n

    return EvalReport(
        n_samples=n,
        atom_stable_pct=100.0 * stable_atoms / total_atoms if total_atoms else 0.0,
        mol_stable_pct=pct(sum(r.stable for r in rows)),
        valid_pct=pct(sum(valid_flags)),
        unique_pct=pct(len(unique)),
        novel_pct=pct(len(novel)),
        valid_single_bond_pct=pct(sum(r.valid_single_bond for r in rows)),
        memorized_pct=100.0 * memorized / len(valid_digests) if valid_digests else 0.0,
        rows=rows,
    )


# ---------------------------------------------------------------------------
# XYZ files


def parse_xyz(text: str, known: Iterable[str] = PERIODIC_TABLE) -> tuple[list[str], np.ndarray]:
    known = set(known)
    lines = text.splitlines()
    if not lines:
        raise XYZParseError(1, "empty file")
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise XYZParseError(1, f"expected atom count, got {lines[0]!r}") from None
    if count < 0:
        raise XYZParseError(1, "negative atom count")
    symbols, coords = [], []
    for k in range(count):
        lineno = k + 3
        if len(lines) < lineno:
            # reported at the last line present, where the file ends early
            raise XYZParseError(max(len(lines), 2), f"file ends after {k} of {count} atom lines")
        parts = lines[lineno - 1].split()
        if len(parts) < 4:
            raise XYZParseError(lineno, "expected 'Symbol x y z'")
        sym = parts[0]
        if sym not in known:
            raise XYZParseError(lineno, f"unknown element symbol {sym!r}")
        try:
            xyz = [float(p) for p in parts[1:4]]
        except ValueError:
            raise XYZParseError(lineno, f"malformed coordinate in {lines[lineno - 1]!r}") from None
        symbols.append(sym)
        coords.append(xyz)
    for k in range(count + 2, len(lines)):
        if lines[k].strip():
            raise XYZParseError(k + 1, f"more atom lines than the declared count {count}")
    return symbols, np.array(coords, dtype=np.float64).reshape(-1, 3)


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def write_xyz(symbols: Sequence[str], positions, comment: str = "") -> str:
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    lines = [str(len(symbols)), comment]
    lines += [f"{s} {_fmt(x)} {_fmt(y)} {_fmt(z)}" for s, (x, y, z) in zip(symbols, pos)]
    return "\n".join(lines) + "\n"


def parse_bonds(text: str, n_atoms: int) -> tuple[list, dict]:
    edges, orders = [], {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"bond sidecar line {lineno}: expected 'i j order'")
        i, j, o = (int(p) for p in parts)
        if not (0 <= i < n_atoms and 0 <= j < n_atoms):
            raise ValueError(f"bond sidecar line {lineno}: atom index out of range")
        e = (min(i, j), max(i, j))
        edges.append(e)
        orders[e] = o
    return edges, orders


def write_bonds(graph: MolecularGraph) -> str:
    return "".join(f"{i} {j} {graph.order(i, j)}\n" for i, j in sorted(graph.edges))


# ---------------------------------------------------------------------------
# dataset ingestion


@dataclass
class Dataset:
    graphs: list
    eccentricities: list
    hashes: list
    vocab: AtomVocabulary
    names: list
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def reference_hashes(self) -> set:
        return set(self.hashes)


def ingest_dataset(
    directory: str | Path,
    table: BondTable | None = None,
    vocab: AtomVocabulary | None = None,
) -> Dataset:
    """Load every ``*.xyz`` in ``directory`` (sorted by name).

    Bonds come from a ``<stem>.bonds`` sidecar when present, otherwise from
    :func:`infer_bonds`.  The largest fragment is kept and re-centred.
    Unreadable files are skipped and counted.
    """
    table = table or BondTable.default()
    directory = Path(directory)
    raw = []
    skipped = 0
    for path in sorted(directory.glob("*.xyz")):
        try:
            symbols, pos = parse_xyz(path.read_text(encoding="utf-8"))
            if not symbols:
                raise ValueError("no atoms")
            sidecar = path.with_suffix(".bonds")
            bonds = parse_bonds(sidecar.read_text(encoding="utf-8"), len(symbols)) if sidecar.exists() else None
            raw.append((path.stem, symbols, pos, bonds))
        except (OSError, UnicodeDecodeError, ValueError) as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped += 1
    if vocab is None:
        vocab = AtomVocabulary.from_symbols(s for _, syms, _, _ in raw for s in syms)
    graphs, eccs, hashes, names = [], [], [], []
    for name, symbols, pos, bonds in raw:
        try:
            types = vocab.encode(symbols)
        except KeyError as exc:
            log.warning("skipping %s: %s", name, exc)
            skipped += 1
            continue
        if bonds is not None:
            g = MolecularGraph(types, pos, frozenset(bonds[0]), bonds[1], vocab)
        else:
            g = infer_bonds(types, pos, table, vocab)
        g = largest_fragment(g)
        g = g.with_positions(zero_center(g.positions))
        graphs.append(g)
        eccs.append(eccentricities(g))
        hashes.append(canonical_hash(g))
        names.append(name)
    return Dataset(graphs, eccs, hashes, vocab, names, skipped)


def load_generated(directory: str | Path, table: BondTable | None = None,
                   vocab: AtomVocabulary | None = None) -> list[MolecularGraph]:
    """Bond graphs of every ``*.xyz`` in ``directory`` as produced by a sampler.

    Unlike :func:`ingest_dataset` nothing is repaired: fragments stay, so a
    disconnected sample counts as invalid.  Unreadable files raise.
    """
    table = table or BondTable.default()
    vocab = vocab or AtomVocabulary(ELEMENT_ORDER)
    graphs = []
    for path in sorted(Path(directory).glob("*.xyz")):
        symbols, pos = parse_xyz(path.read_text(encoding="utf-8"))
        graphs.append(infer_bonds(vocab.encode(symbols), pos, table, vocab))
    return graphs
