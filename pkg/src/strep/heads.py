"""Reconstruction/prediction decoders and the three-part training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .module import Module

DEFAULT_KERNELS = (2, 4, 8, 16)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.3
    beta: float = 0.3

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta > 1.0 + 1e-12:
            raise ValueError(f"invalid loss weights alpha={self.alpha}, beta={self.beta}")

    @property
    def gamma(self) -> float:
        return 1.0 - self.alpha - self.beta

    def without(self, term: str) -> "LossWeights":
        """Drop one term and rescale the survivors to sum to one."""
        w = {"recon": self.alpha, "pred": self.beta, "ms": self.gamma}
        if term not in w:
            raise ValueError(f"unknown loss term {term!r}")
        w[term] = 0.0
        total = sum(w.values())
        if total <= 0:
            raise ValueError(f"dropping {term!r} leaves no loss weight")
        return LossWeights(w["recon"] / total, w["pred"] / total)


class ReconDecoder(Module):
    """h = GELU(Lin1(Z) + Z); output = Lin2(h)."""

    def __init__(self, d: int, C: int, rng: np.random.Generator, dtype=dc.DEFAULT_DTYPE):
        self.w1 = Parameter(dc.glorot(rng, d, d), dtype=dtype)
        self.b1 = Parameter(np.zeros(d), dtype=dtype)
        self.w2 = Parameter(dc.glorot(rng, d, C), dtype=dtype)
        self.b2 = Parameter(np.zeros(C), dtype=dtype)

    def __call__(self, Z: Tensor) -> Tensor:
        h = dc.gelu(dc.linear(Z, self.w1, self.b1) + Z)
        return dc.linear(h, self.w2, self.b2)


class PredDecoder(Module):
    """Dropout, then a T->F map along time, then a d->C map along features."""

    def __init__(self, T: int, F: int, d: int, C: int, rng: np.random.Generator, dropout: float = 0.1, dtype=dc.DEFAULT_DTYPE):
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.dropout = dropout
        self.wt = Parameter(dc.glorot(rng, T, F), dtype=dtype)
        self.bt = Parameter(np.zeros(F), dtype=dtype)
        self.wf = Parameter(dc.glorot(rng, d, C), dtype=dtype)
        self.bf = Parameter(np.zeros(C), dtype=dtype)

    def __call__(self, Z: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        z = dc.dropout(Z, self.dropout, training, rng)
        return dc.linear(dc.time_linear(z, self.wt, self.bt), self.wf, self.bf)


def decode_recon(Z: Tensor, dec: ReconDecoder) -> Tensor:
    return dec(Z)


def decode_pred(Z: Tensor, dec: PredDecoder, training: bool = False, rng=None) -> Tensor:
    return dec(Z, training, rng)


def check_kernels(kernels, length: int) -> tuple[int, ...]:
    ks = tuple(int(k) for k in kernels)
    for k in ks:
        if k < 1:
            raise ValueError(f"pooling kernel {k} < 1")
        if k > length:
            raise ValueError(f"pooling kernel {k} exceeds sequence length {length}")
    return ks


def multiscale_loss(pred_full: Tensor, true_full, kernels=DEFAULT_KERNELS, delta: float = 1.0) -> Tensor:
    """Sum over kernels k of Huber(avgpool_k(pred), avgpool_k(true)) along time (axis -2)."""
    true_full = dc._as_tensor(true_full, pred_full.dtype)
    if pred_full.shape != true_full.shape:
        raise ValueError(f"shape mismatch {pred_full.shape} vs {true_full.shape}")
    ks = check_kernels(kernels, pred_full.shape[-2])
    if not ks:
        raise ValueError("kernel set is empty")
    total = None
    for k in ks:
        term = dc.huber_loss(dc.avg_pool_time(pred_full, k), dc.avg_pool_time(true_full, k), delta)
        total = term if total is None else total + term
    return total


def total_loss(
    x_curr_hat: Tensor | None,
    x_curr: np.ndarray,
    x_tgt_hat: Tensor | None,
    x_tgt: np.ndarray,
    weights: LossWeights = LossWeights(),
    kernels=DEFAULT_KERNELS,
    delta: float = 1.0,
    recon_mask: np.ndarray | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """alpha * L_recon + beta * L_pred + gamma * L_ms.

    A decoder output may be None when its weight is zero (ablations); the
    multi-scale term then covers only the part that exists, using the
    kernels that fit it. `recon_mask` restricts L_recon to masked positions.
    """
    if x_curr_hat is None and weights.alpha > 0:
        raise ValueError("reconstruction output missing but alpha > 0")
    if x_tgt_hat is None and weights.beta > 0:
        raise ValueError("prediction output missing but beta > 0")
    ref = x_curr_hat if x_curr_hat is not None else x_tgt_hat
    comps = {"recon": 0.0, "pred": 0.0, "ms": 0.0}
    terms = []
    if x_curr_hat is not None:
        w = None
        if recon_mask is not None and recon_mask.any():
            w = recon_mask[..., None]
        l_rec = dc.huber_loss(x_curr_hat, x_curr, delta, weight=w)
        comps["recon"] = l_rec.item()
        if weights.alpha:
            terms.append(dc.mul(l_rec, weights.alpha))
    if x_tgt_hat is not None:
        l_pred = dc.huber_loss(x_tgt_hat, x_tgt, delta)
        comps["pred"] = l_pred.item()
        if weights.beta:
            terms.append(dc.mul(l_pred, weights.beta))
    parts_hat = [t for t in (x_curr_hat, x_tgt_hat) if t is not None]
    parts_true = [a for a, t in ((x_curr, x_curr_hat), (x_tgt, x_tgt_hat)) if t is not None]
    full_hat = parts_hat[0] if len(parts_hat) == 1 else dc.concat(parts_hat, axis=-2)
    full_true = np.concatenate(parts_true, axis=-2) if len(parts_true) > 1 else parts_true[0]
    ks = kernels
    if len(parts_hat) == 1:
        ks = [k for k in kernels if k <= full_hat.shape[-2]]
    if ks:
        l_ms = multiscale_loss(full_hat, full_true, ks, delta)
        comps["ms"] = l_ms.item()
        if weights.gamma:
            terms.append(dc.mul(l_ms, weights.gamma))
    if not terms:
        total = dc.mul(dc.huber_loss(ref, ref.data), 0.0)
    else:
        total = terms[0]
        for t in terms[1:]:
            total = total + t
    comps["total"] = total.item()
    return total, comps
