"""Compression-extraction-decompression encoder.

Each layer squeezes the time axis from T to p virtual steps with a per-node,
per-channel MLP, mixes nodes at each virtual step through attention routed
via m learned proxy tokens (cost linear in N), and expands back to T steps.
The stack output is added to its input.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import MHAParams, Parameter, Tensor
from .module import Module


def _time_mlp(x: Tensor, w1, b1, w2, b2) -> Tensor:
    """Two-layer GELU MLP applied along axis -2 of [..., L, d]."""
    return dc.time_linear(dc.gelu(dc.time_linear(x, w1, b1)), w2, b2)


class EncoderLayer(Module):
    def __init__(
        self,
        T: int = 12,
        p: int = 3,
        m: int = 8,
        d: int = 64,
        heads: int = 4,
        ffn_factor: int = 2,
        hidden: int | None = None,
        prenorm: bool = False,
        rng: np.random.Generator | None = None,
        dtype=dc.DEFAULT_DTYPE,
    ):
        if not 1 <= p < T:
            raise ValueError(f"compressed length p={p} must satisfy 1 <= p < T={T}")
        if m < 1:
            raise ValueError("proxy count m must be >= 1")
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        rng = rng or np.random.default_rng(0)
        hid = hidden or T
        self.heads = heads
        self.prenorm = prenorm

        def P(a):
            return Parameter(a, dtype=dtype)

        self.comp_w1 = P(dc.glorot(rng, T, hid))
        self.comp_b1 = P(np.zeros(hid))
        self.comp_w2 = P(dc.glorot(rng, hid, p))
        self.comp_b2 = P(np.zeros(p))
        self.proxy = P(rng.normal(0.0, 0.1, (m, d)))
        self.mha1 = MHAParams.init(d, rng, dtype)
        self.mha2 = MHAParams.init(d, rng, dtype)
        self.ffn_w1 = P(dc.glorot(rng, d, ffn_factor * d))
        self.ffn_b1 = P(np.zeros(ffn_factor * d))
        self.ffn_w2 = P(dc.glorot(rng, ffn_factor * d, d))
        self.ffn_b2 = P(np.zeros(d))
        self.decomp_w1 = P(dc.glorot(rng, p, hid))
        self.decomp_b1 = P(np.zeros(hid))
        self.decomp_w2 = P(dc.glorot(rng, hid, T))
        self.decomp_b2 = P(np.zeros(T))
        if prenorm:
            self.ln1_g = P(np.ones(d))
            self.ln1_b = P(np.zeros(d))
            self.ln2_g = P(np.ones(d))
            self.ln2_b = P(np.zeros(d))

    def compress(self, E: Tensor) -> Tensor:
        """[..., N, T, d] -> [..., N, p, d]."""
        if E.shape[-2] != self.comp_w1.shape[0]:
            raise ValueError(f"expected {self.comp_w1.shape[0]} time steps, got {E.shape[-2]}")
        return _time_mlp(E, self.comp_w1, self.comp_b1, self.comp_w2, self.comp_b2)

    def extract(self, Ec: Tensor) -> Tensor:
        """Proxy-routed spatial attention at each virtual step; [..., N, p, d] -> same."""
        tokens = dc.swapaxes(Ec, -2, -3)  # [..., p, N, d]
        src = dc.layer_norm(tokens, self.ln1_g, self.ln1_b) if self.prenorm else tokens
        hp = dc.multi_head_attention(self.proxy, src, src, self.mha1, self.heads)  # [..., p, m, d]
        h1 = dc.multi_head_attention(src, hp, hp, self.mha2, self.heads) + tokens
        f_in = dc.layer_norm(h1, self.ln2_g, self.ln2_b) if self.prenorm else h1
        ffn = dc.linear(dc.gelu(dc.linear(f_in, self.ffn_w1, self.ffn_b1)), self.ffn_w2, self.ffn_b2)
        return dc.swapaxes(ffn + h1, -2, -3)

    def decompress(self, H: Tensor) -> Tensor:
        """[..., N, p, d] -> [..., N, T, d]."""
        if H.shape[-2] != self.decomp_w1.shape[0]:
            raise ValueError(f"expected {self.decomp_w1.shape[0]} virtual steps, got {H.shape[-2]}")
        return _time_mlp(H, self.decomp_w1, self.decomp_b1, self.decomp_w2, self.decomp_b2)

    def __call__(self, E: Tensor) -> Tensor:
        return self.decompress(self.extract(self.compress(E)))


class Encoder(Module):
    def __init__(self, L: int = 3, rng: np.random.Generator | None = None, **layer_kw):
        if L < 1:
            raise ValueError("encoder needs at least one layer")
        rng = rng or np.random.default_rng(0)
        self.layers = [EncoderLayer(rng=rng, **layer_kw) for _ in range(L)]

    def __call__(self, E: Tensor) -> Tensor:
        h = E
        for layer in self.layers:
            h = layer(h)
        return h + E


def dense_spatial_attention(E: np.ndarray) -> np.ndarray:
    """Plain all-pairs attention across nodes at each time step.

    Reference point for scaling measurements: scores are N x N per
    (batch, step) slice, so cost grows quadratically in N. Slices are processed
    one at a time to bound memory. E is [B, N, T, d].
    """
    B, N, T, d = E.shape
    out = np.empty_like(E)
    scale = 1.0 / math.sqrt(d)
    for b in range(B):
        for t in range(T):
            x = E[b, :, t, :]
            s = (x @ x.T) * scale
            s -= s.max(axis=1, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=1, keepdims=True)
            out[b, :, t, :] = s @ x
    return out


def compress_time(E: Tensor, layer: EncoderLayer) -> Tensor:
    return layer.compress(E)


def spatial_extract(Ec: Tensor, layer: EncoderLayer) -> Tensor:
    return layer.extract(Ec)


def decompress_time(H: Tensor, layer: EncoderLayer) -> Tensor:
    return layer.decompress(H)


def encode(E: Tensor, encoder: Encoder) -> Tensor:
    return encoder(E)
