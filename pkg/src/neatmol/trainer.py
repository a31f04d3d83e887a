"""Training loop: split sampling, rotation augmentation, teacher-forced joint loss and AdamW."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig
from .graph import MolecularGraph, eccentricities, random_rotation
from .heads import FlowConfig, TimeSamplerConfig, build_flow_batch, cfm_loss, soft_target, type_loss
from .model import ModelConfig, NeatModel
from .sampler import SamplerConfig, sample_split

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-4
    warmup_epochs: int = 50
    min_lr_fraction: float = 0.10
    weight_decay: float = 1e-6
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    seed: int = 0
    beta: float = 1.5
    gamma: float = 0.45
    sigma: float = 1.4
    time_resamples: int = 4
    augment_rotation: bool = True
    val_every: int = 10
    val_repeats: int = 4
    val_seed: int = 12345
    # model shape
    hidden: int = 128
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.1
    fourier_bands: int = 32
    fourier_min: float = 0.1
    fourier_max: float = 10.0
    fourier_raw: bool = False
    flow_hidden: int = 256
    flow_blocks: int = 2
    time_dim: int = 128

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr", "clip_norm", "time_resamples", "val_every", "val_repeats"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup_epochs < 0 or self.weight_decay < 0:
            raise ConfigError("warmup_epochs and weight_decay must be non-negative")
        if not 0 < self.min_lr_fraction <= 1:
            raise ConfigError("min_lr_fraction must lie in (0, 1]")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        SamplerConfig(self.beta, self.gamma)

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.beta, self.gamma)

    def model_config(self, elements: Sequence[str]) -> ModelConfig:
        enc = EncoderConfig(self.layers, self.heads, self.hidden, self.mlp_ratio, self.fourier_bands,
                            self.fourier_min, self.fourier_max, self.dropout, self.fourier_raw)
        flow = FlowConfig(self.flow_hidden, self.flow_blocks, self.time_dim, self.fourier_bands,
                          self.fourier_min, self.fourier_max, self.fourier_raw)
        return ModelConfig(tuple(elements), enc, flow, self.sigma)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **overrides) -> "TrainConfig":
        d = self.to_dict()
        for k, v in overrides.items():
            if k not in d:
                raise ConfigError(f"unknown config key {k!r}")
            d[k] = _coerce(k, v, type(getattr(self, k)))
        return TrainConfig(**d)


def _coerce(key: str, value, kind):
    if not isinstance(value, str):
        return kind(value)
    try:
        if kind is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines with ``#`` comments; unknown keys are rejected."""
    base = base or TrainConfig()
    overrides = {}
    known = {f.name for f in fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        overrides[key] = value
    return base.replace(**overrides)


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


# ---------------------------------------------------------------------------
# optimisation


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0, then cosine decay reaching ``min_lr_fraction * lr`` at the last epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.warmup_epochs:
        return cfg.lr * epoch / cfg.warmup_epochs
    last = cfg.epochs - 1
    lo = cfg.min_lr_fraction * cfg.lr
    if last <= cfg.warmup_epochs:
        return cfg.lr if epoch < last else lo
    frac = min(1.0, (epoch - cfg.warmup_epochs) / (last - cfg.warmup_epochs))
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay applied to tensors of rank >= 2."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= T.DTYPE(1 - lr * self.weight_decay)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: dict, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = T.parameters_norm(grads)
    if total > max_norm:
        factor = T.DTYPE(max_norm / (total + 1e-6))
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


# ---------------------------------------------------------------------------
# losses


@dataclass
class StepLosses:
    loss_type: float
    loss_cfm: float

    @property
    def total(self) -> float:
        return self.loss_type + self.loss_cfm


def prepare_examples(graphs: Sequence[MolecularGraph], eccs, cfg: TrainConfig, rng: np.random.Generator,
                     augment: bool):
    sources, targets = [], []
    for g, ecc in zip(graphs, eccs):
        split = sample_split(g, cfg.sampler, rng, ecc)
        src, tgt = split.source_positions, split.target_positions
        if augment:
            rot = random_rotation(rng)
            src, tgt = src @ rot.T, tgt @ rot.T
        sources.append((split.source_types, src))
        targets.append((split.target_types, tgt))
    return sources, targets


def joint_loss(model: NeatModel, sources, targets, cfg: TrainConfig, rng: np.random.Generator, train: bool):
    """Cross-entropy on the neighbourhood type distribution plus CFM on target positions.

    The flow head is conditioned on the true target types (teacher forcing).
    """
    vocab = model.vocab
    z = model.encode(sources, rng if train else None)
    probs = model.type_probs(z)
    q = np.stack([soft_target(ty, vocab.size, vocab.stop_index) for ty, _ in targets])
    l_type = type_loss(probs, q)
    batch = build_flow_batch(targets, cfg.sigma, rng, TimeSamplerConfig(), cfg.time_resamples)
    if batch is None:
        return l_type, None
    z_rows = T.embedding_lookup(z, batch.group)
    pred = model.velocity(batch.x_t, batch.t, batch.cond_types, z_rows)
    return l_type, cfm_loss(pred, batch)


def train_step(model: NeatModel, graphs, eccs, opt: AdamW, cfg: TrainConfig, rng: np.random.Generator,
               lr: float, graph_ids=None) -> StepLosses:
    sources, targets = prepare_examples(graphs, eccs, cfg, rng, cfg.augment_rotation)
    model.zero_grad()
    l_type, l_cfm = joint_loss(model, sources, targets, cfg, rng, train=True)
    total = l_type if l_cfm is None else T.add(l_type, l_cfm)
    if not np.isfinite(total.item()):
        raise TrainingError(f"non-finite loss {total.item()} (seed={cfg.seed}, graphs={list(graph_ids or [])})")
    T.backward(total)
    clip_grad_norm(model.params, cfg.clip_norm)
    opt.step(lr)
    return StepLosses(l_type.item(), 0.0 if l_cfm is None else l_cfm.item())


def validate(model: NeatModel, graphs, eccs, cfg: TrainConfig) -> float:
    """Mean total loss over ``val_repeats`` passes with a pinned rng stream (no dropout, no updates)."""
    if not graphs:
        raise ValueError("validation set is empty")
    rng = np.random.default_rng(cfg.val_seed)
    total, weight = 0.0, 0
    for _ in range(cfg.val_repeats):
        for start in range(0, len(graphs), cfg.batch_size):
            chunk = slice(start, start + cfg.batch_size)
            sources, targets = prepare_examples(graphs[chunk], eccs[chunk], cfg, rng, cfg.augment_rotation)
            l_type, l_cfm = joint_loss(model, sources, targets, cfg, rng, train=False)
            n = len(sources)
            total += n * (l_type.item() + (0.0 if l_cfm is None else l_cfm.item()))
            weight += n
    return total / weight


# ---------------------------------------------------------------------------
# driver


LOG_HEADER = "epoch,loss_type,loss_cfm,loss_total,val_loss,lr"


@dataclass
class TrainResult:
    model: NeatModel
    best_val: float
    best_epoch: int
    history: list


def type_marginal(graphs: Sequence[MolecularGraph], n_elements: int) -> np.ndarray:
    counts = np.zeros(n_elements)
    for g in graphs:
        np.add.at(counts, g.types, 1.0)
    return counts / counts.sum()


def train(
    cfg: TrainConfig,
    graphs: Sequence[MolecularGraph],
    val_graphs: Sequence[MolecularGraph] | None = None,
    out_dir: str | Path | None = None,
    elements: Sequence[str] | None = None,
    eccs=None,
    val_eccs=None,
    time_budget: float | None = None,
) -> TrainResult:
    """Train from scratch; writes ``model.ckpt`` (lowest validation loss), ``last.ckpt`` and ``train_log.csv``.

    Without ``val_graphs`` the training set doubles as validation set.
    ``time_budget`` (seconds) stops early after the current epoch.
    """
    if not graphs:
        raise ValueError("training set is empty")
    graphs = list(graphs)
    vocab = graphs[0].vocab
    elements = tuple(elements or vocab.elements)
    val_graphs = list(val_graphs) if val_graphs else graphs
    eccs = eccs or [eccentricities(g) for g in graphs]
    val_eccs = val_eccs or ([eccentricities(g) for g in val_graphs] if val_graphs is not graphs else eccs)
    mcfg = cfg.model_config(elements)
    model = NeatModel.init(mcfg, seed=cfg.seed, type_marginal=type_marginal(graphs, len(elements)),
                           max_train_atoms=max(g.n_atoms for g in graphs))
    log.info("model has %d parameters", model.n_parameters())
    opt = AdamW(model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows = [LOG_HEADER]
    history = []
    best_val, best_epoch = math.inf, -1
    started = time.monotonic()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg) if cfg.warmup_epochs == 0 or epoch > 0 else cfg.lr / max(cfg.warmup_epochs, 1)
        order = rng.permutation(len(graphs))
        sums = np.zeros(2)
        for start in range(0, len(order), cfg.batch_size):
            ids = order[start:start + cfg.batch_size]
            losses = train_step(model, [graphs[i] for i in ids], [eccs[i] for i in ids], opt, cfg, rng, lr, ids)
            sums += len(ids) * np.array([losses.loss_type, losses.loss_cfm])
        sums /= len(order)
        last = epoch == cfg.epochs - 1 or (time_budget is not None and time.monotonic() - started > time_budget)
        val = ""
        if (epoch + 1) % cfg.val_every == 0 or last or epoch == 0:
            v = validate(model, val_graphs, val_eccs, cfg)
            val = f"{v:.6f}"
            if v < best_val:
                best_val, best_epoch = v, epoch
                if out:
                    model.save(out / "model.ckpt", {"epoch": epoch, "val_loss": v, "train": cfg.to_dict()})
        history.append((epoch, sums[0], sums[1], val, lr))
        rows.append(f"{epoch},{sums[0]:.6f},{sums[1]:.6f},{sums.sum():.6f},{val},{lr:.8g}")
        if val:
            log.info("epoch %d  type %.4f  cfm %.4f  val %s  lr %.3g", epoch, sums[0], sums[1], val or "-", lr)
        if last:
            break
    if out:
        model.save(out / "last.ckpt", {"epoch": epoch, "val_loss": best_val, "train": cfg.to_dict()})
        (out / "train_log.csv").write_text("\n".join(rows) + "\n")
    if out and (out / "model.ckpt").exists():
        model, _ = NeatModel.load(out / "model.ckpt")
    return TrainResult(model, best_val, best_epoch, history)
