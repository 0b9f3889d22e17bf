"""Pretraining loop, checkpoints and batch encoding into representation stores."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .data import (
    DataError,
    NormStats,
    SeriesTensor,
    SplitSpec,
    gather_windows,
    split_622,
    train_slice,
    window_starts,
    zscore_apply,
    zscore_fit,
)
from .embedding import apply_mask
from .heads import DEFAULT_KERNELS, LossWeights, total_loss
from .model import ModelConfig, STReP
from .tensorfile import TensorFileError, read_tensors, write_tensors

CHECKPOINT_MAGIC = b"STRC"
STORE_MAGIC = b"STRR"
LOG_COLUMNS = ("epoch", "L_recon", "L_pred", "L_MS", "total", "val_total", "wall_seconds")
ALPHA_BETA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)


class DivergenceError(dc.NumericError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class CheckpointError(TensorFileError):
    pass


class ConfigMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    max_epochs: int = 100
    batch_size: int = 32
    patience: int = 10
    mask_ratio: float = 0.25
    alpha: float = 0.3
    beta: float = 0.3
    kernels: tuple[int, ...] = DEFAULT_KERNELS
    delta: float = 1.0
    seed: int = 0
    T: int = 12
    F: int = 12
    p: int = 3
    m: int = 8
    d: int = 64
    L: int = 3
    heads: int = 4
    ffn_factor: int = 2
    dropout: float = 0.1
    conv_kernel: int = 3
    prenorm: bool = False
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    recon_masked_only: bool = False
    train_stride: int = 1
    use_encoder: bool = True
    use_recon: bool = True
    use_pred: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        for name in ("max_epochs", "batch_size", "patience", "T", "F", "p", "m", "d", "L", "heads",
                     "ffn_factor", "conv_kernel", "train_stride"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.delta <= 0 or self.clip_norm <= 0 or self.weight_decay < 0:
            raise ValueError("lr, delta, clip_norm and weight_decay must be non-negative (delta, clip_norm positive)")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")
        self.weights  # validates alpha/beta

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def model_config(self, num_nodes: int, steps_per_day: int, C: int) -> ModelConfig:
        return ModelConfig(
            num_nodes=num_nodes, steps_per_day=steps_per_day, C=C, T=self.T, F=self.F, d=self.d,
            p=self.p, m=self.m, L=self.L, heads=self.heads, ffn_factor=self.ffn_factor,
            conv_kernel=self.conv_kernel, dropout=self.dropout, prenorm=self.prenorm,
            use_encoder=self.use_encoder, use_recon=self.use_recon, use_pred=self.use_pred,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernels"] = list(self.kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    train_config: TrainConfig
    norm: NormStats
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    version: int = 1

    @property
    def config_hash(self) -> str:
        return self.model_config.hash()

    def build_model(self) -> STReP:
        model = STReP(self.model_config, seed=self.train_config.seed)
        model.load_state_dict(self.params)
        return model


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    history: list[dict]


# ------------------------------------------------------------------ training


def _batch_inputs(series: SeriesTensor, starts: np.ndarray, cfg: TrainConfig):
    b = gather_windows(series, starts, cfg.T, cfg.F)
    return b.x_curr.astype(np.float32), b.x_tgt.astype(np.float32), b.tod_idx, b.dow_idx


def _step_loss(model: STReP, cfg: TrainConfig, weights: LossWeights, batch, mask: np.ndarray,
               training: bool, rng: np.random.Generator | None):
    x, y, tod, dow = batch
    out = model(x, mask, tod, dow, training=training, rng=rng)
    return total_loss(
        out["x_curr_hat"], x, out["x_tgt_hat"], y, weights, cfg.kernels, cfg.delta,
        recon_mask=mask if cfg.recon_masked_only else None,
    )


def _run_validation(model, series, starts, cfg, weights) -> dict[str, float]:
    # identical masks every epoch so validation numbers are comparable
    rng = np.random.default_rng([cfg.seed, 0x5EED, 1])
    sums = {"recon": 0.0, "pred": 0.0, "ms": 0.0, "total": 0.0}
    with dc.no_grad():
        for i in range(0, len(starts), cfg.batch_size):
            chunk = starts[i : i + cfg.batch_size]
            batch = _batch_inputs(series, chunk, cfg)
            mask = apply_mask(batch[0], cfg.mask_ratio, True, rng).grid
            _, comps = _step_loss(model, cfg, weights, batch, mask, False, None)
            for k in sums:
                sums[k] += comps[k] * len(chunk)
    return {k: v / len(starts) for k, v in sums.items()}


def _append_log(path: Path, row: dict) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_COLUMNS)
        w.writerow([row["epoch"], f"{row['recon']:.8g}", f"{row['pred']:.8g}", f"{row['ms']:.8g}",
                    f"{row['total']:.8g}", f"{row['val_total']:.8g}", f"{row['wall_seconds']:.3f}"])


def pretrain(
    data: SeriesTensor,
    cfg: TrainConfig = TrainConfig(),
    log_path=None,
    progress: Callable[[dict], None] | None = None,
    split: SplitSpec | None = None,
) -> PretrainResult:
    """Self-supervised pretraining on the training split of raw (unnormalized) data.

    Keeps the parameters with the lowest validation total loss and stops after
    `patience` epochs without improvement.
    """
    split = split or split_622(data, cfg.T, cfg.F)
    norm = zscore_fit(train_slice(data, split))
    series = zscore_apply(data, norm)
    mcfg = cfg.model_config(data.num_nodes, data.steps_per_day, data.num_features)
    model = STReP(mcfg, seed=cfg.seed)
    weights = cfg.weights

    train_starts = window_starts(split.train, cfg.T, cfg.F, cfg.train_stride)
    val_starts = window_starts(split.val, cfg.T, cfg.F)
    if len(train_starts) == 0:
        raise DataError("training split yields no complete window")
    if len(val_starts) == 0:
        raise DataError("validation split yields no complete window")

    params = model.parameters()
    opt = dc.AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    log_path = Path(log_path) if log_path is not None else None
    history: list[dict] = []
    best_val, best_state, best_epoch, stale = np.inf, model.state_dict(), 0, 0
    t_start = time.monotonic()

    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(train_starts)
        sums = {"recon": 0.0, "pred": 0.0, "ms": 0.0, "total": 0.0}
        for bi, i in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = order[i : i + cfg.batch_size]
            batch = _batch_inputs(series, chunk, cfg)
            mask = apply_mask(batch[0], cfg.mask_ratio, True, rng).grid
            loss, comps = _step_loss(model, cfg, weights, batch, mask, True, rng)
            if not np.isfinite(comps["total"]):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {bi}",
                    {"epoch": epoch, "batch": bi, "components": comps, "optimizer_step": opt.step},
                )
            try:
                dc.backward(loss)
            except dc.NumericError as exc:
                raise DivergenceError(
                    f"non-finite gradient at epoch {epoch}, batch {bi}",
                    {"epoch": epoch, "batch": bi, "components": comps, "optimizer_step": opt.step},
                ) from exc
            dc.clip_grad_norm(params, cfg.clip_norm)
            dc.adamw_step(params, opt)
            for k in sums:
                sums[k] += comps[k] * len(chunk)
        row = {"epoch": epoch, **{k: v / len(order) for k, v in sums.items()}}
        val = _run_validation(model, series, val_starts, cfg, weights)
        row["val_total"] = val["total"]
        row["val"] = val
        row["wall_seconds"] = time.monotonic() - t_start
        history.append(row)
        if log_path is not None:
            _append_log(log_path, row)
        if progress is not None:
            progress(row)
        if val["total"] < best_val:
            best_val, best_state, best_epoch, stale = val["total"], model.state_dict(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    ckpt = Checkpoint(best_state, mcfg, cfg, norm, history=_history_for_storage(history), best_epoch=best_epoch)
    return PretrainResult(ckpt, history)


def _history_for_storage(history: list[dict]) -> list[dict]:
    # wall-clock is excluded so checkpoints stay byte-identical across reruns
    keep = ("epoch", "recon", "pred", "ms", "total", "val_total")
    return [{k: h[k] for k in keep} for h in history]


def grid_search_weights(
    data: SeriesTensor, cfg: TrainConfig = TrainConfig(), grid=ALPHA_BETA_GRID, progress=None
) -> tuple[PretrainResult, list[dict]]:
    """Train one model per admissible (alpha, beta) pair; pick by best validation loss."""
    results = []
    best = None
    for a in grid:
        for b in grid:
            if a + b > 1.0 + 1e-12:
                continue
            res = pretrain(data, replace(cfg, alpha=a, beta=b), progress=progress)
            val = min(h["val_total"] for h in res.history)
            results.append({"alpha": a, "beta": b, "val_total": val})
            if best is None or val < best[0]:
                best = (val, res)
    return best[1], results


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(c: Checkpoint, path) -> None:
    meta = {
        "kind": "checkpoint",
        "version": c.version,
        "model_config": c.model_config.to_dict(),
        "train_config": c.train_config.to_dict(),
        "norm": {"mean": c.norm.mean, "std": c.norm.std},
        "config_hash": c.config_hash,
        "best_epoch": c.best_epoch,
        "history": c.history,
    }
    write_tensors(path, CHECKPOINT_MAGIC, meta, c.params)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta, arrays = read_tensors(path, CHECKPOINT_MAGIC)
    try:
        mcfg = ModelConfig.from_dict(meta["model_config"])
        tcfg = TrainConfig.from_dict(meta["train_config"])
        norm = NormStats(meta["norm"]["mean"], meta["norm"]["std"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid configuration block ({exc})") from None
    if mcfg.hash() != meta.get("config_hash"):
        raise ConfigMismatch(f"{path}: stored config hash does not match stored config")
    if expected is not None and expected.hash() != mcfg.hash():
        diff = {k: (v, expected.to_dict()[k]) for k, v in mcfg.to_dict().items() if expected.to_dict()[k] != v}
        raise ConfigMismatch(f"{path}: checkpoint config differs from session config: {diff}")
    ckpt = Checkpoint(arrays, mcfg, tcfg, norm, meta.get("history", []), meta.get("best_epoch", 0), meta["version"])
    probe = STReP(mcfg, seed=tcfg.seed)
    try:
        probe.load_state_dict(arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: parameter table does not fit the stored config ({exc})") from None
    return ckpt


# ------------------------------------------------------------------ encoding


@dataclass
class RepresentationStore:
    reps: np.ndarray  # [W, N, d] float32, last-step representation per window
    window_end: np.ndarray  # [W] absolute step index of each window's last input
    bounds: tuple[int, int]
    config_hash: str = ""

    def __len__(self) -> int:
        return len(self.window_end)

    def save(self, path) -> None:
        arrays = {"window_end": self.window_end.astype(np.int64)}
        for i in range(len(self)):
            arrays[f"r/{i:06d}"] = self.reps[i]
        meta = {"kind": "representations", "bounds": list(self.bounds), "config_hash": self.config_hash,
                "rows": len(self), "shape": list(self.reps.shape[1:])}
        write_tensors(path, STORE_MAGIC, meta, arrays)

    @classmethod
    def load(cls, path) -> "RepresentationStore":
        meta, arrays = read_tensors(path, STORE_MAGIC)
        ends = arrays.pop("window_end")
        keys = sorted(arrays)
        if len(keys) != len(ends):
            raise CheckpointError(f"{path}: index table has {len(ends)} rows but {len(keys)} matrices")
        if keys:
            reps = np.stack([arrays[k] for k in keys])
        else:
            reps = np.zeros((0, *meta["shape"]), dtype=np.float32)
        return cls(reps, ends, tuple(meta["bounds"]), meta.get("config_hash", ""))


def encode_dataset(
    checkpoint: Checkpoint | STReP,
    data: SeriesTensor,
    split: str | tuple[int, int] = "test",
    batch_size: int = 64,
    norm: NormStats | None = None,
) -> RepresentationStore:
    """Encode every input window inside the split (no masking) and keep Z[:, T-1, :].

    `data` is raw; it is normalized with the checkpoint's statistics. Windows
    need only their T input steps inside the split, so a split of length S
    yields S - T + 1 rows.
    """
    if isinstance(checkpoint, Checkpoint):
        model, norm, chash = checkpoint.build_model(), checkpoint.norm, checkpoint.config_hash
    else:
        model, chash = checkpoint, checkpoint.cfg.hash()
        if norm is None:
            raise ValueError("norm stats are required when encoding with a bare model")
    mcfg = model.cfg
    if data.num_nodes != mcfg.num_nodes or data.num_features != mcfg.C or data.steps_per_day != mcfg.steps_per_day:
        raise ConfigMismatch(
            f"data (N={data.num_nodes}, C={data.num_features}, steps/day={data.steps_per_day}) does not match "
            f"model (N={mcfg.num_nodes}, C={mcfg.C}, steps/day={mcfg.steps_per_day})"
        )
    bounds = split_622(data, mcfg.T, mcfg.F).range(split) if isinstance(split, str) else tuple(split)
    starts = window_starts(bounds, mcfg.T, 0)
    if len(starts) == 0:
        raise DataError(f"split {bounds} is shorter than one window of {mcfg.T} steps")
    series = zscore_apply(data, norm)
    reps = np.empty((len(starts), mcfg.num_nodes, mcfg.d), dtype=np.float32)
    with dc.no_grad():
        for i in range(0, len(starts), batch_size):
            chunk = starts[i : i + batch_size]
            b = gather_windows(series, chunk, mcfg.T, 0)
            x = b.x_curr.astype(np.float32)
            mask = np.zeros(x.shape[:-1], dtype=bool)
            _, Z = model.represent(x, mask, b.tod_idx, b.dow_idx)
            reps[i : i + len(chunk)] = Z.data[:, :, -1, :]
    return RepresentationStore(reps, starts + mcfg.T - 1, bounds, chash)
