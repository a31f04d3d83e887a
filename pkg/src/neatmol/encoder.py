"""Permutation-invariant set encoder: type + Fourier position embeddings, bidirectional
transformer blocks and additive pooling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 128
    mlp_ratio: int = 4
    fourier_bands: int = 32
    fourier_min: float = 0.1
    fourier_max: float = 10.0
    dropout: float = 0.1
    fourier_raw: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("encoder needs at least one layer")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.fourier_bands < 1 or not 0 < self.fourier_min <= self.fourier_max:
            raise ValueError("invalid Fourier band settings")

    @property
    def fourier_dim(self) -> int:
        return 6 * self.fourier_bands + (3 if self.fourier_raw else 0)


def fourier_frequencies(bands: int, fmin: float, fmax: float) -> np.ndarray:
    """Geometric frequency ladder in cycles per Å."""
    if bands == 1:
        return np.array([fmin])
    return np.geomspace(fmin, fmax, bands)


def fourier_features(positions, bands: int, fmin: float, fmax: float, raw: bool = False) -> np.ndarray:
    """``[sin(2π f_k x_d), cos(2π f_k x_d)]`` for every coordinate ``d`` and band ``k``.

    ``raw`` appends the coordinates themselves after the periodic features.
    """
    pos = np.asarray(positions, dtype=np.float64)
    freqs = fourier_frequencies(bands, fmin, fmax)
    arg = 2 * np.pi * pos[..., :, None] * freqs  # (..., 3, bands)
    arg = arg.reshape(pos.shape[:-1] + (3 * bands,))
    parts = [np.sin(arg), np.cos(arg)] + ([pos] if raw else [])
    return np.concatenate(parts, axis=-1).astype(T.DTYPE)


def _normal(rng, shape, std):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def init_encoder_params(cfg: EncoderConfig, n_elements: int, rng: np.random.Generator,
                        prefix: str = "encoder") -> dict[str, Tensor]:
    """GPT-2 style initialisation: N(0, 0.02), residual projections scaled by 1/sqrt(2L)."""
    h = cfg.hidden
    std = 0.02
    proj_std = std / math.sqrt(2 * cfg.layers)
    p = {
        f"{prefix}.type_embed": _normal(rng, (n_elements, h), std),
        f"{prefix}.pos_w": _normal(rng, (cfg.fourier_dim, h), std),
        f"{prefix}.pos_b": Tensor(np.zeros(h), requires_grad=True),
        f"{prefix}.ln_f": Tensor(np.ones(h), requires_grad=True),
    }
    for i in range(cfg.layers):
        b = f"{prefix}.block{i}"
        p[f"{b}.ln1"] = Tensor(np.ones(h), requires_grad=True)
        p[f"{b}.ln2"] = Tensor(np.ones(h), requires_grad=True)
        for name in ("q", "k", "v"):
            p[f"{b}.attn.{name}_w"] = _normal(rng, (h, h), std)
            p[f"{b}.attn.{name}_b"] = Tensor(np.zeros(h), requires_grad=True)
        p[f"{b}.attn.o_w"] = _normal(rng, (h, h), proj_std)
        p[f"{b}.attn.o_b"] = Tensor(np.zeros(h), requires_grad=True)
        p[f"{b}.mlp.fc_w"] = _normal(rng, (h, cfg.mlp_ratio * h), std)
        p[f"{b}.mlp.proj_w"] = _normal(rng, (cfg.mlp_ratio * h, h), proj_std)
    return p


def _check_types(types: np.ndarray, n_elements: int) -> None:
    if types.size and (types.min() < 0 or types.max() >= n_elements):
        raise ValueError(f"atom types must be element indices in [0, {n_elements}); "
                         "the stop token is not an atom")


def embed_atoms(types, positions, cfg: EncoderConfig, params: dict, prefix: str = "encoder") -> Tensor:
    """Initial node features ``TypeEmbed(a_i) + Linear(Fourier(x_i))``; positions used as given."""
    types = np.asarray(types, dtype=np.int64)
    table = params[f"{prefix}.type_embed"]
    _check_types(types, table.shape[0])
    if types.shape[-1] == 0:
        raise ValueError("cannot embed an empty atom set")
    feats = Tensor(fourier_features(positions, cfg.fourier_bands, cfg.fourier_min, cfg.fourier_max, cfg.fourier_raw))
    pos = T.add(T.matmul(feats, params[f"{prefix}.pos_w"]), params[f"{prefix}.pos_b"])
    return T.add(T.embedding_lookup(table, types), pos)


def pad_sets(sets: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack variable-size sets into ``(B, n_max)`` types, ``(B, n_max, 3)`` positions and a mask."""
    n_max = max(len(t) for t, _ in sets)
    b = len(sets)
    types = np.zeros((b, n_max), dtype=np.int64)
    pos = np.zeros((b, n_max, 3), dtype=np.float64)
    mask = np.zeros((b, n_max), dtype=bool)
    for i, (t, x) in enumerate(sets):
        n = len(t)
        types[i, :n] = t
        pos[i, :n] = x
        mask[i, :n] = True
    return types, pos, mask


def _attention(x: Tensor, params: dict, b: str, cfg: EncoderConfig, key_bias: np.ndarray, rng) -> Tensor:
    bsz, n, h = x.shape
    nh, hd = cfg.heads, cfg.hidden // cfg.heads

    def split(name):
        y = T.add(T.matmul(x, params[f"{b}.attn.{name}_w"]), params[f"{b}.attn.{name}_b"])
        return T.transpose(T.reshape(y, (bsz, n, nh, hd)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    att = T.softmax_lastdim(T.add(scores, Tensor(key_bias)))
    y = T.matmul(att, v)
    y = T.reshape(T.transpose(y, (0, 2, 1, 3)), (bsz, n, h))
    y = T.add(T.matmul(y, params[f"{b}.attn.o_w"]), params[f"{b}.attn.o_b"])
    return T.dropout(y, cfg.dropout, rng)


def encode_batch(sets: Sequence[tuple[np.ndarray, np.ndarray]], cfg: EncoderConfig, params: dict,
                 rng: np.random.Generator | None = None, prefix: str = "encoder") -> Tensor:
    """Encode a batch of atom sets to ``(B, hidden)`` set representations.

    Sets are zero-padded; padded keys are masked out of attention and padded
    rows are excluded from the pooled sum.  ``rng`` enables dropout (training).
    """
    if not sets:
        raise ValueError("encode_batch needs at least one set")
    for t, _ in sets:
        if len(t) == 0:
            raise ValueError("cannot encode an empty atom set")
    types, pos, mask = pad_sets(sets)
    bsz, n = types.shape
    x = embed_atoms(types, pos, cfg, params, prefix)
    x = T.dropout(x, cfg.dropout, rng)
    bias = np.where(mask, 0.0, NEG_INF).astype(T.DTYPE)[:, None, None, :]
    key_bias = np.broadcast_to(bias, (bsz, cfg.heads, n, n))
    for i in range(cfg.layers):
        b = f"{prefix}.block{i}"
        h = T.mul(T.layernorm(x), params[f"{b}.ln1"])
        x = T.add(x, _attention(h, params, b, cfg, key_bias, rng))
        h = T.mul(T.layernorm(x), params[f"{b}.ln2"])
        h = T.matmul(T.gelu(T.matmul(h, params[f"{b}.mlp.fc_w"])), params[f"{b}.mlp.proj_w"])
        x = T.add(x, T.dropout(h, cfg.dropout, rng))
    x = T.mul(T.layernorm(x), params[f"{prefix}.ln_f"])
    pool = Tensor(mask[:, None, :].astype(T.DTYPE))
    return T.reshape(T.matmul(pool, x), (bsz, cfg.hidden))


def encode(types, positions, cfg: EncoderConfig, params: dict, prefix: str = "encoder") -> np.ndarray:
    """Eval-mode set representation ``z`` of a single atom set."""
    types = np.asarray(types, dtype=np.int64)
    if len(types) == 0:
        raise ValueError("cannot encode an empty atom set")
    return encode_batch([(types, np.asarray(positions))], cfg, params, None, prefix).data[0].copy()
