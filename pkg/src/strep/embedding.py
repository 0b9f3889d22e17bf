"""Input embedding: temporal masking, cross-time anchoring, projection and
calendar/node lookup tables, followed by a length-preserving convolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import floor_product
from .diffcore import Parameter, Tensor
from .module import Module


@dataclass
class MaskSpec:
    grid: np.ndarray  # bool [..., N, T], True = masked
    ratio: float
    seed: int | None = None

    def counts(self) -> np.ndarray:
        return self.grid.sum(axis=-1)


def apply_mask(shape, r: float, training: bool, seed=None) -> MaskSpec:
    """Mask floor(r*T) distinct time steps per node, drawn uniformly.

    `shape` is the [..., N, T] grid shape or an input array [..., N, T, C].
    No positions are masked outside training.
    """
    if not 0.0 <= r < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {r}")
    if isinstance(shape, np.ndarray):
        shape = shape.shape[:-1]
    shape = tuple(shape)
    T = shape[-1]
    k = floor_product(r, T)
    grid = np.zeros(shape, dtype=bool)
    if not training or k == 0:
        return MaskSpec(grid, r, seed if isinstance(seed, int) else None)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = np.argsort(rng.random(shape), axis=-1, kind="stable")
    np.put_along_axis(grid, order[..., :k], True, axis=-1)
    return MaskSpec(grid, r, seed if isinstance(seed, int) else None)


def latest_visible(mask: np.ndarray) -> np.ndarray:
    """Index of the last unmasked step along the final axis."""
    visible = ~mask
    if not visible.any(axis=-1).all():
        raise ValueError("a node is fully masked; no visible step to anchor on")
    T = mask.shape[-1]
    return T - 1 - np.argmax(visible[..., ::-1], axis=-1)


def cross_time_concat(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """[..., N, T, C] -> [..., N, T, 2C]: each step paired with the node's latest visible step."""
    if mask is None:
        mask = np.zeros(x.shape[:-1], dtype=bool)
    anchor = latest_visible(mask)
    ref = np.take_along_axis(x, anchor[..., None, None], axis=-2)
    return np.concatenate([x, np.broadcast_to(ref, x.shape)], axis=-1)


class Embedding(Module):
    def __init__(
        self,
        num_nodes: int,
        steps_per_day: int,
        C: int = 1,
        d: int = 64,
        conv_kernel: int = 3,
        rng: np.random.Generator | None = None,
        dtype=dc.DEFAULT_DTYPE,
    ):
        if conv_kernel % 2 == 0:
            raise ValueError("projector convolution kernel must be odd")
        rng = rng or np.random.default_rng(0)
        self.proj_w1 = Parameter(dc.glorot(rng, 2 * C, d), dtype=dtype)
        self.proj_b1 = Parameter(np.zeros(d), dtype=dtype)
        self.proj_w2 = Parameter(dc.glorot(rng, d, d), dtype=dtype)
        self.proj_b2 = Parameter(np.zeros(d), dtype=dtype)
        self.mask_token = Parameter(rng.normal(0.0, 0.1, d), dtype=dtype)
        self.tod = Parameter(rng.normal(0.0, 0.1, (steps_per_day, d)), dtype=dtype)
        self.dow = Parameter(rng.normal(0.0, 0.1, (7, d)), dtype=dtype)
        self.spt = Parameter(rng.normal(0.0, 0.1, (num_nodes, d)), dtype=dtype)
        self.conv_w = Parameter(dc.glorot(rng, conv_kernel * d, d).reshape(conv_kernel, d, d), dtype=dtype)
        self.conv_b = Parameter(np.zeros(d), dtype=dtype)

    def hidden(self, x: np.ndarray, mask: np.ndarray, tod_idx: np.ndarray, dow_idx: np.ndarray) -> Tensor:
        """Everything before the convolution: [..., N, T, d].

        x is [B, N, T, C]; tod_idx and dow_idx are [B, T].
        """
        N = x.shape[-3]
        if N != self.spt.shape[0]:
            raise ValueError(f"input has {N} nodes, embedding table has {self.spt.shape[0]}")
        feats = dc.Tensor(cross_time_concat(x, mask), dtype=self.proj_w1.dtype)
        h = dc.linear(dc.relu(dc.linear(feats, self.proj_w1, self.proj_b1)), self.proj_w2, self.proj_b2)
        h = dc.where(mask[..., None], self.mask_token, h)
        d = h.shape[-1]
        tod = dc.take_rows(self.tod, tod_idx)  # [B, T, d]
        dow = dc.take_rows(self.dow, dow_idx)
        cal = dc.reshape(tod + dow, (tod.shape[0], 1, tod.shape[1], d))
        spt = dc.reshape(self.spt, (N, 1, d))
        return h + cal + spt

    def __call__(self, x, mask, tod_idx, dow_idx) -> Tensor:
        return dc.conv1d_same(self.hidden(x, mask, tod_idx, dow_idx), self.conv_w, self.conv_b)
