"""Model assembly: embedding -> encoder -> two decoders."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .embedding import Embedding
from .encoder import Encoder
from .heads import PredDecoder, ReconDecoder
from .module import Module


@dataclass(frozen=True)
class ModelConfig:
    num_nodes: int
    steps_per_day: int = 288
    C: int = 1
    T: int = 12
    F: int = 12
    d: int = 64
    p: int = 3
    m: int = 8
    L: int = 3
    heads: int = 4
    ffn_factor: int = 2
    conv_kernel: int = 3
    dropout: float = 0.1
    prenorm: bool = False
    use_encoder: bool = True
    use_recon: bool = True
    use_pred: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


class STReP(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=dc.DEFAULT_DTYPE):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.embedding = Embedding(cfg.num_nodes, cfg.steps_per_day, cfg.C, cfg.d, cfg.conv_kernel, rng, dtype)
        if cfg.use_encoder:
            self.encoder = Encoder(
                cfg.L, rng, T=cfg.T, p=cfg.p, m=cfg.m, d=cfg.d, heads=cfg.heads,
                ffn_factor=cfg.ffn_factor, prenorm=cfg.prenorm, dtype=dtype,
            )
        if cfg.use_recon:
            self.recon = ReconDecoder(cfg.d, cfg.C, rng, dtype)
        if cfg.use_pred:
            self.pred = PredDecoder(cfg.T, cfg.F, cfg.d, cfg.C, rng, cfg.dropout, dtype)

    def represent(self, x, mask, tod_idx, dow_idx) -> tuple[Tensor, Tensor]:
        """Return (E, Z); Z is E when the encoder is ablated away."""
        E = self.embedding(x, mask, tod_idx, dow_idx)
        Z = self.encoder(E) if self.cfg.use_encoder else E
        return E, Z

    def __call__(self, x, mask, tod_idx, dow_idx, training: bool = False, rng=None) -> dict:
        E, Z = self.represent(x, mask, tod_idx, dow_idx)
        out = {"E": E, "Z": Z, "x_curr_hat": None, "x_tgt_hat": None}
        if self.cfg.use_recon:
            out["x_curr_hat"] = self.recon(Z)
        if self.cfg.use_pred:
            out["x_tgt_hat"] = self.pred(Z, training, rng)
        return out


def parameter_census(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form trainable-parameter counts per component."""
    d, T, F, p, m, C = cfg.d, cfg.T, cfg.F, cfg.p, cfg.m, cfg.C
    hid = T
    emb = (2 * C * d + d) + (d * d + d) + d + cfg.steps_per_day * d + 7 * d + cfg.num_nodes * d
    emb += cfg.conv_kernel * d * d + d
    mha = 4 * (d * d + d)
    layer = (T * hid + hid) + (hid * p + p) + m * d + 2 * mha
    layer += (d * cfg.ffn_factor * d + cfg.ffn_factor * d) + (cfg.ffn_factor * d * d + d)
    layer += (p * hid + hid) + (hid * T + T)
    if cfg.prenorm:
        layer += 4 * d
    out = {"embedding": emb}
    out["encoder"] = cfg.L * layer if cfg.use_encoder else 0
    out["recon"] = (d * d + d + d * C + C) if cfg.use_recon else 0
    out["pred"] = (T * F + F + d * C + C) if cfg.use_pred else 0
    out["total"] = sum(out.values())
    return out
