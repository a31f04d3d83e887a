"""Next-type categorical head, adaLN flow-matching velocity head and their losses."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from . import tensor as T
from .encoder import fourier_features
from .tensor import Tensor

T_EPS = 1e-5
LOG_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# type head


def init_type_head(hidden: int, vocab_size: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {
        "type_head.w": Tensor(rng.normal(0.0, 0.02, size=(hidden, vocab_size)), requires_grad=True),
        "type_head.b": Tensor(np.zeros(vocab_size), requires_grad=True),
    }


def type_head(z: Tensor, params: dict) -> Tensor:
    """Softmax over the vocabulary (elements plus stop) from ``(B, hidden)`` set representations."""
    return T.softmax_lastdim(T.add(T.matmul(z, params["type_head.w"]), params["type_head.b"]))


def soft_target(target_types: Sequence[int], vocab_size: int, stop_index: int) -> np.ndarray:
    """Mean one-hot of the target multiset; an empty target is one-hot on stop."""
    q = np.zeros(vocab_size, dtype=np.float64)
    if len(target_types) == 0:
        q[stop_index] = 1.0
    else:
        np.add.at(q, np.asarray(target_types, dtype=np.int64), 1.0)
        q /= len(target_types)
    return q


def type_loss(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of ``-sum_c q_c log p_c``."""
    targets = np.asarray(targets, dtype=T.DTYPE).reshape(probs.shape)
    nll = T.mul(T.log(probs, LOG_FLOOR), Tensor(targets))
    return T.scale(T.sum(nll), -1.0 / probs.shape[0])


# ---------------------------------------------------------------------------
# optimal-transport coupling


def hungarian(cost) -> np.ndarray:
    """Exact minimum-cost perfect assignment for a square cost matrix.

    Shortest augmenting paths with row/column potentials, O(k^3).  Returns
    ``perm`` with row ``i`` assigned to column ``perm[i]``.
    """
    c = np.asarray(cost, dtype=np.float64)
    k = c.shape[0]
    if c.ndim != 2 or c.shape[1] != k:
        raise ValueError(f"hungarian needs a square matrix, got {c.shape}")
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    u = np.zeros(k + 1)
    v = np.zeros(k + 1)
    match = np.zeros(k + 1, dtype=np.int64)  # column -> row, 1-based, 0 = free
    way = np.zeros(k + 1, dtype=np.int64)
    for i in range(1, k + 1):
        match[0] = i
        j0 = 0
        minv = np.full(k + 1, np.inf)
        used = np.zeros(k + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, k + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(k + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while True:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
            if j0 == 0:
                break
    perm = np.zeros(k, dtype=np.int64)
    for j in range(1, k + 1):
        perm[match[j] - 1] = j - 1
    return perm


def distance_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a[:, None, :] - b[None, :, :]
    return np.sqrt((d * d).sum(-1))


def couple_ot(x1, x0) -> tuple[np.ndarray, np.ndarray]:
    """Reorder noise rows ``x0`` to minimise the summed Euclidean distance to ``x1``.

    Returns ``(x0[perm], perm)``.
    """
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 3)
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1, 3)
    if len(x1) != len(x0):
        raise ValueError(f"couple_ot: {len(x1)} targets but {len(x0)} noise rows")
    if len(x1) == 0:
        return x0.copy(), np.zeros(0, dtype=np.int64)
    perm = hungarian(distance_matrix(x1, x0))
    return x0[perm], perm


# ---------------------------------------------------------------------------
# time sampling


@dataclass(frozen=True)
class TimeSamplerConfig:
    mix_uniform: float = 0.02
    m: float = 0.8
    s: float = 1.7

    def __post_init__(self):
        if not 0 <= self.mix_uniform <= 1:
            raise ValueError("mix_uniform must lie in [0, 1]")
        if self.s <= 0:
            raise ValueError("s must be positive")


def sample_time(cfg: TimeSamplerConfig, rng: np.random.Generator, count: int) -> np.ndarray:
    """Mixture of U(0, 1) and a logit-normal ``sigmoid(m + s·n)``, clamped to (1e-5, 1 - 1e-5)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    uniform = rng.random(count) < cfg.mix_uniform
    t = np.where(uniform, rng.random(count), expit(cfg.m + cfg.s * rng.standard_normal(count)))
    return np.clip(t, T_EPS, 1.0 - T_EPS)


def logit_normal_pdf(t, m: float = 0.8, s: float = 1.7) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    inner = (t > 0) & (t < 1)
    tc = np.where(inner, t, 0.5)
    # the density vanishes at both endpoints
    return np.where(inner, np.exp(-((logit(tc) - m) ** 2) / (2 * s * s)) / (tc * (1 - tc) * s * math.sqrt(2 * math.pi)),
                    0.0)


def time_cdf(t, cfg: TimeSamplerConfig = TimeSamplerConfig()) -> np.ndarray:
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore"):
        ln = norm.cdf((logit(t) - cfg.m) / cfg.s)
    return cfg.mix_uniform * t + (1 - cfg.mix_uniform) * ln


# ---------------------------------------------------------------------------
# interpolation and flow head


def interpolate(x0, x1, t) -> tuple[np.ndarray, np.ndarray]:
    """Linear path ``x_t = (1 - t) x0 + t x1`` with velocity ``x1 - x0``; ``t`` per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"interpolate: shapes {x0.shape} and {x1.shape} differ")
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    return (1 - t) * x0 + t * x1, x1 - x0


@dataclass(frozen=True)
class FlowConfig:
    hidden: int = 256
    blocks: int = 2
    time_dim: int = 128
    fourier_bands: int = 32
    fourier_min: float = 0.1
    fourier_max: float = 10.0
    fourier_raw: bool = False

    def __post_init__(self):
        if self.blocks < 1 or self.hidden < 1 or self.time_dim % 2:
            raise ValueError("invalid flow head configuration")


def time_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of ``1000 t`` (DiT convention)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(arg), np.sin(arg)], axis=-1).astype(T.DTYPE)


def init_flow_head(cfg: FlowConfig, cond_dim: int, n_elements: int, rng: np.random.Generator,
                   zero_init: bool = True) -> dict[str, Tensor]:
    """Parameters of the adaLN MLP.  Gates and the output layer start at zero unless
    ``zero_init`` is False (used for gradient checks)."""
    f = cfg.hidden
    fd = 6 * cfg.fourier_bands + (3 if cfg.fourier_raw else 0)

    def w(shape, std=0.02):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def zeros(shape):
        return w(shape, 0.02) if not zero_init else Tensor(np.zeros(shape), requires_grad=True)

    def bias(n):
        return Tensor(np.zeros(n) if zero_init else rng.normal(0.0, 0.02, size=n), requires_grad=True)

    xavier = math.sqrt(1.0 / f)
    p = {
        "flow_head.pos_w": w((fd, f)),
        "flow_head.pos_b": bias(f),
        "flow_head.type_embed": w((n_elements, f)),
        "flow_head.time_w": w((cfg.time_dim, f)),
        "flow_head.time_b": bias(f),
        "flow_head.cond_w": w((cond_dim, f)),
        "flow_head.cond_b": bias(f),
    }
    for i in range(cfg.blocks):
        b = f"flow_head.block{i}"
        for name in ("shift", "scale"):
            p[f"{b}.{name}_w"] = zeros((f, f))
            p[f"{b}.{name}_b"] = bias(f)
        p[f"{b}.gate_w"] = zeros((f, f))
        p[f"{b}.gate_b"] = bias(f)
        p[f"{b}.fc1_w"] = w((f, f), xavier)
        p[f"{b}.fc1_b"] = bias(f)
        p[f"{b}.fc2_w"] = w((f, f), xavier)
        p[f"{b}.fc2_b"] = bias(f)
    p["flow_head.final.shift_w"] = zeros((f, f))
    p["flow_head.final.shift_b"] = bias(f)
    p["flow_head.final.scale_w"] = zeros((f, f))
    p["flow_head.final.scale_b"] = bias(f)
    p["flow_head.out_w"] = zeros((f, 3))
    p["flow_head.out_b"] = bias(3)
    return p


def _linear(x: Tensor, params: dict, name: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{name}_w"]), params[f"{name}_b"])


def _modulate(x: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
    return T.add(T.mul(T.layernorm(x), T.add_scalar(scale_, 1.0)), shift)


def flow_velocity(x_t, t, cond_types, z_rows: Tensor, params: dict, cfg: FlowConfig) -> Tensor:
    """Velocity ``(R, 3)`` for rows of noisy positions.

    ``z_rows`` holds the set representation of the source set each row belongs
    to.  The conditioning sum of position, type, time and set encodings is
    both the MLP input and the source of every adaLN shift/scale/gate.
    """
    cond_types = np.asarray(cond_types, dtype=np.int64)
    n_el = params["flow_head.type_embed"].shape[0]
    if cond_types.size and (cond_types.min() < 0 or cond_types.max() >= n_el):
        raise ValueError("flow head condition must be an element type, not the stop token")
    x_t = np.asarray(x_t, dtype=np.float64).reshape(-1, 3)
    pos = Tensor(fourier_features(x_t, cfg.fourier_bands, cfg.fourier_min, cfg.fourier_max, cfg.fourier_raw))
    temb = Tensor(time_embedding(t, cfg.time_dim))
    c = T.add(_linear(pos, params, "flow_head.pos"), T.embedding_lookup(params["flow_head.type_embed"], cond_types))
    c = T.add(c, _linear(temb, params, "flow_head.time"))
    c = T.add(c, _linear(z_rows, params, "flow_head.cond"))
    act = T.gelu(c)
    h = c
    for i in range(cfg.blocks):
        b = f"flow_head.block{i}"
        hn = _modulate(h, _linear(act, params, f"{b}.shift"), _linear(act, params, f"{b}.scale"))
        m = _linear(T.gelu(_linear(hn, params, f"{b}.fc1")), params, f"{b}.fc2")
        h = T.add(h, T.mul(_linear(act, params, f"{b}.gate"), m))
    hn = _modulate(h, _linear(act, params, "flow_head.final.shift"), _linear(act, params, "flow_head.final.scale"))
    return _linear(hn, params, "flow_head.out")


@dataclass
class FlowBatch:
    """Rows of a flow-matching batch; ``group`` maps each row to its source set."""

    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    v_target: np.ndarray
    cond_types: np.ndarray
    group: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


def build_flow_batch(
    targets: Sequence[tuple[np.ndarray, np.ndarray]],
    sigma: float,
    rng: np.random.Generator,
    time_cfg: TimeSamplerConfig = TimeSamplerConfig(),
    resamples: int = 4,
) -> FlowBatch | None:
    """Noise, OT coupling and time resampling for each nonempty target set.

    ``targets`` is a list of ``(types, positions)`` per source set (possibly
    empty).  Each target row gets ``resamples`` time draws on the same path;
    row weights average uniformly over (row, resample) pairs within a set and
    then over sets.  Returns None when all target sets are empty.
    """
    live = [i for i, (ty, _) in enumerate(targets) if len(ty)]
    if not live:
        return None
    cols = {k: [] for k in ("x0", "x1", "t", "types", "group", "weight")}
    for gi in live:
        types, x1 = targets[gi]
        x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 3)
        k = len(x1)
        x0, _ = couple_ot(x1, sigma * rng.standard_normal((k, 3)))
        t = sample_time(time_cfg, rng, k * resamples)
        cols["x0"].append(np.repeat(x0, resamples, axis=0))
        cols["x1"].append(np.repeat(x1, resamples, axis=0))
        cols["t"].append(t)
        cols["types"].append(np.repeat(np.asarray(types, dtype=np.int64), resamples))
        cols["group"].append(np.full(k * resamples, gi, dtype=np.int64))
        cols["weight"].append(np.full(k * resamples, 1.0 / (k * resamples * len(live))))
    x0 = np.concatenate(cols["x0"])
    x1 = np.concatenate(cols["x1"])
    t = np.concatenate(cols["t"])
    x_t, v = interpolate(x0, x1, t)
    return FlowBatch(x0, x1, t, x_t, v, np.concatenate(cols["types"]), np.concatenate(cols["group"]),
                     np.concatenate(cols["weight"]))


def cfm_loss(pred: Tensor, batch: FlowBatch) -> Tensor:
    """Weighted sum of squared velocity errors; with the default weights this is the
    per-set mean over (row, resample) pairs, averaged over sets."""
    diff = T.sub(pred, Tensor(batch.v_target))
    sq = T.sum(T.mul(diff, diff), axis=1)
    return T.sum(T.mul(sq, Tensor(batch.weight)))
