"""Source/target splits for neighbourhood-guided training."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import MolecularGraph, boundary_nodes, eccentricities


@dataclass(frozen=True)
class SamplerConfig:
    beta: float = 1.5
    gamma: float = 0.45

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")


@dataclass(frozen=True)
class SubgraphSplit:
    source: list
    target: list
    source_types: np.ndarray
    source_positions: np.ndarray
    target_types: np.ndarray
    target_positions: np.ndarray
    seed_node: int = 0
    rounds: int = 1


def sample_split(
    g: MolecularGraph,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    ecc: Sequence[int] | None = None,
) -> SubgraphSplit:
    """Grow a connected source set from a random seed and return its boundary as target.

    ``ecc`` is the per-node eccentricity cache; it is computed when omitted.
    Each round keeps a boundary node when its uniform draw exceeds ``gamma``.
    """
    if ecc is None:
        ecc = eccentricities(g)
    n = g.n_atoms
    v0 = int(rng.integers(n))
    rounds = math.floor(cfg.beta * int(ecc[v0]) * rng.random()) + 1
    source = {v0}
    for _ in range(rounds):
        frontier = boundary_nodes(g, source)
        if not frontier:
            break
        keep = rng.random(len(frontier)) > cfg.gamma
        source.update(v for v, k in zip(frontier, keep) if k)
    src = sorted(source)
    tgt = boundary_nodes(g, src)
    return SubgraphSplit(
        source=src,
        target=tgt,
        source_types=g.types[src],
        source_positions=g.positions[src],
        target_types=g.types[tgt],
        target_positions=g.positions[tgt],
        seed_node=v0,
        rounds=rounds,
    )


@dataclass
class SplitStatistics:
    rel_source: np.ndarray
    rel_target: np.ndarray

    def __len__(self) -> int:
        return len(self.rel_source)

    def histogram(self, bins: int = 20) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Counts of relative source and target sizes over ``bins`` equal bins of [0, 1]."""
        edges = np.linspace(0.0, 1.0, bins + 1)
        src, _ = np.histogram(self.rel_source, bins=edges)
        tgt, _ = np.histogram(self.rel_target, bins=edges)
        return edges, src, tgt

    def to_csv(self) -> str:
        lines = ["rel_source,rel_target"]
        lines += [f"{s:.6f},{t:.6f}" for s, t in zip(self.rel_source, self.rel_target)]
        return "\n".join(lines) + "\n"


def split_statistics(
    graphs: Sequence[MolecularGraph],
    cfg: SamplerConfig,
    n_samples: int,
    rng: np.random.Generator,
    ecc_cache: Sequence[np.ndarray] | None = None,
) -> SplitStatistics:
    """Relative sizes ``|V_S|/N`` and ``|V_T|/N`` over ``n_samples`` draws of random graphs."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not graphs:
        return SplitStatistics(np.zeros(0), np.zeros(0))
    if ecc_cache is None:
        ecc_cache = [eccentricities(g) for g in graphs]
    rel_s = np.empty(n_samples)
    rel_t = np.empty(n_samples)
    for k in range(n_samples):
        gi = int(rng.integers(len(graphs)))
        g = graphs[gi]
        split = sample_split(g, cfg, rng, ecc_cache[gi])
        rel_s[k] = len(split.source) / g.n_atoms
        rel_t[k] = len(split.target) / g.n_atoms
    return SplitStatistics(rel_s, rel_t)
