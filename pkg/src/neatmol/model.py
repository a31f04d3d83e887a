"""Parameter container for the encoder and both heads, plus checkpoint I/O."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, encode_batch, init_encoder_params
from .graph import AtomVocabulary
from .heads import FlowConfig, flow_velocity, init_flow_head, init_type_head, type_head
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    elements: tuple = ("H", "C", "N", "O")
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    sigma: float = 1.4

    @property
    def vocab(self) -> AtomVocabulary:
        return AtomVocabulary(tuple(self.elements))

    def to_dict(self) -> dict:
        return {"elements": list(self.elements), "encoder": asdict(self.encoder),
                "flow": asdict(self.flow), "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(tuple(d["elements"]), EncoderConfig(**d["encoder"]), FlowConfig(**d["flow"]), float(d["sigma"]))


class NeatModel:
    """Named parameter tensors (``encoder.*``, ``type_head.*``, ``flow_head.*``) and forward passes."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], type_marginal=None, max_train_atoms: int = 0):
        self.cfg = cfg
        self.params = params
        n_el = len(cfg.elements)
        marg = np.full(n_el, 1.0 / n_el) if type_marginal is None else np.asarray(type_marginal, dtype=np.float64)
        # leave near-normalised input alone so checkpoints round-trip bit-exactly
        self.type_marginal = marg if abs(marg.sum() - 1.0) < 1e-6 else marg / marg.sum()
        self.max_train_atoms = int(max_train_atoms)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, zero_init: bool = True, **kwargs) -> "NeatModel":
        rng = np.random.default_rng(seed)
        n_el = len(cfg.elements)
        params = init_encoder_params(cfg.encoder, n_el, rng)
        params.update(init_type_head(cfg.encoder.hidden, n_el + 1, rng))
        params.update(init_flow_head(cfg.flow, cfg.encoder.hidden, n_el, rng, zero_init=zero_init))
        return cls(cfg, params, **kwargs)

    @property
    def vocab(self) -> AtomVocabulary:
        return self.cfg.vocab

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def shape_manifest(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # forward passes -------------------------------------------------------

    def encode(self, sets: Sequence[tuple[np.ndarray, np.ndarray]], rng=None) -> Tensor:
        return encode_batch(sets, self.cfg.encoder, self.params, rng)

    def type_probs(self, z: Tensor) -> Tensor:
        return type_head(z, self.params)

    def velocity(self, x_t, t, cond_types, z_rows: Tensor) -> Tensor:
        return flow_velocity(x_t, t, cond_types, z_rows, self.params, self.cfg.flow)

    # checkpoints ----------------------------------------------------------

    def state(self, extra_meta: dict | None = None) -> dict[str, np.ndarray]:
        meta = {"model": self.cfg.to_dict(), **(extra_meta or {})}
        blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
        out: dict[str, np.ndarray] = {k: v.data for k, v in self.params.items()}
        out["meta.config_json"] = blob.astype(np.float32)
        out["meta.type_marginal"] = self.type_marginal.astype(np.float32)
        out["meta.max_train_atoms"] = np.array(self.max_train_atoms, dtype=np.float32)
        return out

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        T.save_tensors(path, self.state(extra_meta))

    @classmethod
    def load(cls, path: str | Path) -> tuple["NeatModel", dict]:
        arrays = T.load_tensors(path)
        try:
            blob = arrays.pop("meta.config_json").astype(np.uint8).tobytes()
            meta = json.loads(blob.decode("utf-8"))
            marginal = arrays.pop("meta.type_marginal")
            max_atoms = int(arrays.pop("meta.max_train_atoms"))
        except KeyError as exc:
            raise ValueError(f"{path}: checkpoint lacks metadata entry {exc}") from None
        cfg = ModelConfig.from_dict(meta["model"])
        expected = NeatModel.init(cfg).shape_manifest()
        params = {}
        for name, shape in expected.items():
            if name not in arrays:
                raise ValueError(f"{path}: missing tensor {name}")
            if arrays[name].shape != shape:
                raise ValueError(f"{path}: tensor {name} has shape {arrays[name].shape}, expected {shape}")
            params[name] = Tensor(arrays[name], requires_grad=True)
        return cls(cfg, params, marginal.astype(np.float64), max_atoms), meta
