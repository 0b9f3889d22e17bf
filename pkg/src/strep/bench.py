"""Scaling measurements for the encoder and the ablation runner."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .data import SeriesTensor, zscore_apply
from .downstream import DEFAULT_FRACTION, DEFAULT_REPEATS, LAMBDA_GRID, EvalEntry, representation_eval
from .encoder import Encoder, dense_spatial_attention
from .model import ModelConfig, parameter_census
from .trainer import TrainConfig, encode_dataset, pretrain

DEFAULT_N_LIST = (128, 256, 512, 1024, 2048)
MIN_DURATION = 1e-4
VARIANTS = ("full", "no_encoder", "no_pred", "no_recon", "no_ms")


class TimerResolutionError(RuntimeError):
    pass


@dataclass
class ScalingRow:
    N: int
    t_fwd: float
    t_fwd_bwd: float
    t_ref: float
    activation_bytes: int


@dataclass
class ScalingReport:
    rows: list[ScalingRow]
    slope_fwd: float
    slope_fwd_bwd: float
    slope_ref: float
    param_count: int
    batch: int
    repeats: int
    config: dict = field(default_factory=dict)

    def csv(self) -> str:
        lines = ["N,t_fwd,t_fwd_bwd,t_ref,activation_bytes_estimate"]
        for r in self.rows:
            lines.append(f"{r.N},{r.t_fwd:.6g},{r.t_fwd_bwd:.6g},{r.t_ref:.6g},{r.activation_bytes}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rows"] = [asdict(r) for r in self.rows]
        return d


def loglog_slope(ns, ts) -> float:
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(ts, float)), 1)[0])


def _median_time(fn, repeats: int, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    med = float(np.median(times))
    if med < MIN_DURATION:
        raise TimerResolutionError(f"median duration {med:.2e}s is below the {MIN_DURATION:.0e}s floor; enlarge the batch")
    return med


def activation_bytes(cfg: ModelConfig, N: int, batch: int = 1, itemsize: int = 4) -> int:
    """Analytic estimate of intermediate values kept for backward by the encoder."""
    d, T, p, m, h, f = cfg.d, cfg.T, cfg.p, cfg.m, cfg.heads, cfg.ffn_factor
    hid = T
    per_layer = 0
    per_layer += N * (2 * hid * d + p * d)  # compression MLP
    tok = p * N
    per_layer += 2 * tok * d + 2 * p * h * m * N + 2 * p * m * d  # proxy gathers from nodes
    per_layer += tok * d + 2 * p * m * d + 2 * p * h * N * m + 2 * tok * d  # nodes read from proxies
    per_layer += tok * d + 2 * tok * f * d + 2 * tok * d  # residual + FFN
    per_layer += N * (2 * hid * d + T * d)  # decompression MLP
    total = cfg.L * per_layer + N * T * d
    return int(total * batch * itemsize)


def complexity_bench(cfg: ModelConfig, N_list=DEFAULT_N_LIST, repeats: int = 5, batch: int = 1,
                     seed: int = 0, include_reference: bool = True) -> ScalingReport:
    """Median wall time per N of the encoder (forward, forward+backward) and a dense reference."""
    ns = [int(n) for n in N_list]
    if len(ns) < 3:
        raise ValueError("need at least 3 node counts")
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("node counts must be strictly increasing")
    if repeats < 5:
        raise ValueError("use at least 5 repeats")
    enc = Encoder(cfg.L, np.random.default_rng(seed), T=cfg.T, p=cfg.p, m=cfg.m, d=cfg.d, heads=cfg.heads,
                  ffn_factor=cfg.ffn_factor, prenorm=cfg.prenorm)
    params = enc.parameters()
    # one pool of node features so every N sees the same per-node inputs
    pool = np.random.default_rng(seed + 1).standard_normal((batch, ns[-1], cfg.T, cfg.d)).astype(np.float32)
    rows = []
    for n in ns:
        E_np = pool[:, :n]

        def fwd():
            with dc.no_grad():
                enc(dc.Tensor(E_np))

        def fwd_bwd():
            E = dc.Tensor(E_np, requires_grad=True)
            dc.backward(dc.mean_all(enc(E)))
            for p in params:
                p.zero_grad()

        t_ref = _median_time(lambda: dense_spatial_attention(E_np), repeats) if include_reference else float("nan")
        rows.append(ScalingRow(n, _median_time(fwd, repeats), _median_time(fwd_bwd, repeats), t_ref,
                               activation_bytes(cfg, n, batch)))
    full_cfg = replace(cfg, num_nodes=ns[-1])
    return ScalingReport(
        rows,
        loglog_slope(ns, [r.t_fwd for r in rows]),
        loglog_slope(ns, [r.t_fwd_bwd for r in rows]),
        loglog_slope(ns, [r.t_ref for r in rows]) if include_reference else float("nan"),
        parameter_census(full_cfg)["encoder"],
        batch,
        repeats,
        config=cfg.to_dict(),
    )


# ------------------------------------------------------------------ ablations


def variant_config(base: TrainConfig, tag: str) -> TrainConfig:
    w = base.weights
    if tag == "full":
        return base
    if tag == "no_encoder":
        return replace(base, use_encoder=False)
    if tag == "no_pred":
        w = w.without("pred")
        return replace(base, use_pred=False, alpha=w.alpha, beta=w.beta)
    if tag == "no_recon":
        w = w.without("recon")
        return replace(base, use_recon=False, alpha=w.alpha, beta=w.beta)
    if tag == "no_ms":
        w = w.without("ms")
        return replace(base, alpha=w.alpha, beta=w.beta)
    raise ValueError(f"unknown ablation variant {tag!r}; choose from {VARIANTS}")


@dataclass
class AblationRow:
    variant: str
    horizon: int
    mse: float
    mae: float
    best_epoch: int
    epochs: int


def ablation_run(data: SeriesTensor, base: TrainConfig, horizons=(12,), variants=VARIANTS,
                 fraction: float = DEFAULT_FRACTION, repeats: int = DEFAULT_REPEATS, seed: int = 0,
                 grid=LAMBDA_GRID, progress=None) -> list[AblationRow]:
    """Train every variant in turn and score it with the same downstream protocol."""
    rows = []
    for tag in variants:
        cfg = variant_config(base, tag)
        res = pretrain(data, cfg, progress=(lambda h, tag=tag: progress(tag, h)) if progress else None)
        ck = res.checkpoint
        stores = {n: encode_dataset(ck, data, n) for n in ("train", "val", "test")}
        norm_data = zscore_apply(data, ck.norm)
        for h in horizons:
            e: EvalEntry = representation_eval(stores, norm_data, h, fraction, repeats, seed, grid)
            rows.append(AblationRow(tag, h, e.mse, e.mae, ck.best_epoch, len(res.history)))
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    lines = ["variant,horizon,mse,mae,best_epoch,epochs"]
    lines += [f"{r.variant},{r.horizon},{r.mse:.10g},{r.mae:.10g},{r.best_epoch},{r.epochs}" for r in rows]
    return "\n".join(lines) + "\n"

