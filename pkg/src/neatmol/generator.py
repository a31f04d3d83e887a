"""Autoregressive sampling: grow an atom set until the stop token, placing each new atom
by integrating the learned flow from noise."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .chem import write_xyz
from .graph import random_rigid_motion
from .model import NeatModel
from .tensor import Tensor

VelocityFn = Callable[[np.ndarray, float], np.ndarray]


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenConfig:
    integrator: str = "euler"  # or "euler_maruyama"
    steps: int = 60
    tau: float = 0.3
    eta: float = 1e-3
    sigma: float | None = None  # None: the sigma the model was trained with
    max_atoms: int | None = None  # None: 110% of the largest training molecule
    type_sampling: str = "multinomial"  # or "greedy"
    first_type: str = "uniform"  # or "marginal" (training type frequencies)
    seed: int = 0

    def __post_init__(self):
        if self.integrator not in ("euler", "euler_maruyama"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.type_sampling not in ("multinomial", "greedy"):
            raise ValueError(f"unknown type_sampling {self.type_sampling!r}")
        if self.first_type not in ("marginal", "uniform"):
            raise ValueError(f"unknown first_type {self.first_type!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.tau < 0 or self.eta <= 0:
            raise ValueError("tau must be >= 0 and eta > 0")
        if self.max_atoms is not None and self.max_atoms < 1:
            raise ValueError("max_atoms must be >= 1")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass
class GenerationResult:
    types: np.ndarray
    positions: np.ndarray
    stop_reason: str  # "stop_token" or "max_atoms"
    seed: tuple

    def __post_init__(self):
        if len(self.types) != len(self.positions):
            raise ValueError("types and positions differ in length")

    @property
    def n_atoms(self) -> int:
        return len(self.types)


# ---------------------------------------------------------------------------
# integrators


def integrate_euler(x0, velocity_fn: VelocityFn, steps: int) -> np.ndarray:
    """``x_{k+1} = x_k + v(x_k, k/N) / N`` for ``k = 0..N-1``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        v = np.asarray(velocity_fn(x, k * dt), dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise IntegrationError(f"non-finite velocity at Euler step {k}")
        x = x + dt * v
    return x


def diffusion_coefficient(t, eta: float = 1e-3):
    """``w(t) = 2(1 - t) / (t + eta)``."""
    return 2.0 * (1.0 - np.asarray(t, dtype=np.float64)) / (np.asarray(t, dtype=np.float64) + eta)


def velocity_to_score(v, x, t: float, eta: float = 1e-3) -> np.ndarray:
    """Score ``(t v - x) / (1 - t)`` implied by a linear-interpolant velocity under unit Gaussian noise.

    ``eta`` only enters the diffusion coefficient; it is accepted here so both
    share a signature.
    """
    if not 0.0 <= t < 1.0:
        raise ValueError(f"score is undefined at t={t}; stop the SDE before t=1")
    return (t * np.asarray(v, dtype=np.float64) - np.asarray(x, dtype=np.float64)) / (1.0 - t)


def _noise(rng, shape) -> np.ndarray:
    """Standard normal draws; a sequence of generators supplies one row each."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    rows = [r.standard_normal(shape[1:]) for r in rng]
    return np.array(rows).reshape(shape)


def integrate_euler_maruyama(x0, velocity_fn: VelocityFn, steps: int, tau: float, eta: float, rng,
                             use_score: bool = True) -> np.ndarray:
    """Euler-Maruyama on ``dx = [v + w s / 2] dt + sqrt(tau w) dW``.

    The final step is a plain Euler step (no score, no noise) so the
    ``1/(1-t)`` singularity is never evaluated.  ``rng`` is a Generator or one
    Generator per row of ``x0``.  ``use_score=False`` drops the score drift
    (with ``tau=0`` this is exactly :func:`integrate_euler`).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        t = k * dt
        v = np.asarray(velocity_fn(x, t), dtype=np.float64)
        if k == steps - 1:
            x = x + dt * v
        else:
            w = float(diffusion_coefficient(t, eta))
            drift = v + 0.5 * w * velocity_to_score(v, x, t) if use_score else v
            x = x + dt * drift
            if tau > 0:
                x = x + math.sqrt(tau * w * dt) * _noise(rng, x.shape)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state at Euler-Maruyama step {k}")
    return x


# ---------------------------------------------------------------------------
# autoregressive loop


def molecule_rngs(seed: int, count: int, offset: int = 0) -> list[np.random.Generator]:
    """One independent stream per molecule, keyed by ``(seed, index)``."""
    return [np.random.default_rng([seed, offset + i]) for i in range(count)]


def default_max_atoms(model: NeatModel) -> int:
    return max(1, math.ceil(1.1 * model.max_train_atoms)) if model.max_train_atoms else 64


def _integrate(model: NeatModel, cfg: GenConfig, z: np.ndarray, types: np.ndarray, rngs, sigma: float):
    x0 = sigma * _noise(rngs, (len(types), 3))
    z_rows = Tensor(z)

    def vfn(x, t):
        return model.velocity(x, np.full(len(x), t), types, z_rows).data

    if cfg.integrator == "euler":
        return integrate_euler(x0, vfn, cfg.steps)
    return integrate_euler_maruyama(x0, vfn, cfg.steps, cfg.tau, cfg.eta, rngs)


def _sample_type(p: np.ndarray, cfg: GenConfig, rng: np.random.Generator) -> int:
    if cfg.type_sampling == "greedy":
        return int(np.argmax(p))
    p = np.asarray(p, dtype=np.float64)
    return int(rng.choice(len(p), p=p / p.sum()))


def _grow(model: NeatModel, cfg: GenConfig, types: list[list[int]], pos: list[list[np.ndarray]], rngs,
          batch_size: int) -> list[str]:
    """Extend every partial molecule in place until stop or the atom cap; returns stop reasons."""
    sigma = cfg.sigma or model.cfg.sigma
    cap = cfg.max_atoms or default_max_atoms(model)
    stop = model.vocab.stop_index
    reasons = [""] * len(types)
    active = list(range(len(types)))
    with T.no_grad():
        while active:
            still = []
            for i in active:
                if len(types[i]) >= cap:
                    reasons[i] = "max_atoms"
                else:
                    still.append(i)
            active = still
            nxt = []
            for start in range(0, len(active), batch_size):
                chunk = active[start:start + batch_size]
                sets = [(np.array(types[i]), np.array(pos[i])) for i in chunk]
                z = model.encode(sets)
                probs = model.type_probs(z).data
                placed, placed_types, keep = [], [], []
                for row, i in enumerate(chunk):
                    a = _sample_type(probs[row], cfg, rngs[i])
                    if a == stop:
                        reasons[i] = "stop_token"
                        continue
                    placed.append(i)
                    placed_types.append(a)
                    keep.append(row)
                if not placed:
                    continue
                x = _integrate(model, cfg, z.data[keep], np.array(placed_types), [rngs[i] for i in placed], sigma)
                for row, i in enumerate(placed):
                    types[i].append(placed_types[row])
                    pos[i].append(x[row])
                nxt.extend(placed)
            active = sorted(nxt)
    return reasons


def _first_types(model: NeatModel, cfg: GenConfig, rngs) -> list[int]:
    n_el = len(model.cfg.elements)
    p = model.type_marginal if cfg.first_type == "marginal" else np.full(n_el, 1.0 / n_el)
    p = p / p.sum()  # float32 checkpoints are off by ~1e-7
    return [int(r.choice(n_el, p=p)) for r in rngs]


def generate(model: NeatModel, cfg: GenConfig, count: int, batch_size: int = 64) -> list[GenerationResult]:
    """Sample ``count`` molecules.  The first atom is a real element (never the stop token)."""
    rngs = molecule_rngs(cfg.seed, count)
    sigma = cfg.sigma or model.cfg.sigma
    first = _first_types(model, cfg, rngs)
    types = [[a] for a in first]
    pos = [[sigma * r.standard_normal(3)] for r in rngs]
    reasons = _grow(model, cfg, types, pos, rngs, batch_size)
    return [GenerationResult(np.array(types[i], dtype=np.int64), np.array(pos[i]).reshape(-1, 3), reasons[i],
                             (cfg.seed, i)) for i in range(count)]


def complete_prefix(model: NeatModel, prefix_types, prefix_positions, cfg: GenConfig, count: int,
                    translation_scale: float = 1.0, batch_size: int = 64) -> list[GenerationResult]:
    """Complete a fixed fragment; each sample starts from an independently rotated and translated copy.

    The transformed prefix occupies the first rows of every output unchanged.
    """
    prefix_types = np.asarray(prefix_types, dtype=np.int64)
    prefix_positions = np.asarray(prefix_positions, dtype=np.float64).reshape(-1, 3)
    n_el = len(model.cfg.elements)
    if len(prefix_types) == 0:
        raise ValueError("prefix is empty")
    if len(prefix_types) != len(prefix_positions):
        raise ValueError("prefix types and positions differ in length")
    if prefix_types.min() < 0 or prefix_types.max() >= n_el:
        raise ValueError("prefix types must be element indices; the stop token is not allowed")
    rngs = molecule_rngs(cfg.seed, count)
    types, pos = [], []
    for r in rngs:
        moved = random_rigid_motion(prefix_positions, r, translate=True, translation_scale=translation_scale)
        types.append([int(a) for a in prefix_types])
        pos.append(list(moved))
    reasons = _grow(model, cfg, types, pos, rngs, batch_size)
    return [GenerationResult(np.array(types[i], dtype=np.int64), np.array(pos[i]).reshape(-1, 3), reasons[i],
                             (cfg.seed, i)) for i in range(count)]


# ---------------------------------------------------------------------------
# output


def write_results(results: Sequence[GenerationResult], directory: str | Path, model: NeatModel,
                  prefix: str = "sample") -> Path:
    """One XYZ file per molecule plus ``manifest.jsonl``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vocab = model.vocab
    lines = []
    for k, r in enumerate(results):
        name = f"{prefix}_{k:05d}.xyz"
        (directory / name).write_text(write_xyz(vocab.decode(r.types), r.positions, comment=name[:-4]))
        lines.append(json.dumps({"file": name, "n_atoms": r.n_atoms, "stop_reason": r.stop_reason,
                                 "seed": list(r.seed)}, sort_keys=True))
    manifest = directory / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest


def gen_config_dict(cfg: GenConfig) -> dict:
    return asdict(cfg)
