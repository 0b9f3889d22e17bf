"""Spatiotemporal series: storage, normalization, splitting, windowing, synthesis."""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"STRP"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sHHII")  # magic, version, C, N, T_total -> 16 bytes
SECONDS_PER_DAY = 86400


class DataError(ValueError):
    """Invalid, corrupt or insufficient data."""


class CorruptContainer(DataError):
    pass


def floor_product(r: float, n: int) -> int:
    """floor(r * n), snapping products within round-off of an integer (0.29 * 100 -> 29)."""
    prod = r * n
    near = round(prod)
    return int(near) if abs(prod - near) <= 1e-9 * max(1.0, abs(prod)) else int(np.floor(prod))


@dataclass(frozen=True)
class SeriesTensor:
    values: np.ndarray  # [N, T_total, C]
    steps_per_day: int = 288
    start_tod: int = 0
    start_dow: int = 0
    interval_seconds: int = 300

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise DataError(f"values must be N x T x C, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("series contains NaN or Inf")
        if self.steps_per_day * self.interval_seconds != SECONDS_PER_DAY:
            raise DataError(
                f"steps_per_day ({self.steps_per_day}) x interval_seconds "
                f"({self.interval_seconds}) must equal {SECONDS_PER_DAY}"
            )
        if not 0 <= self.start_tod < self.steps_per_day:
            raise DataError(f"start_tod {self.start_tod} outside [0, {self.steps_per_day})")
        if not 0 <= self.start_dow < 7:
            raise DataError(f"start_dow {self.start_dow} outside [0, 7)")
        v.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def num_features(self) -> int:
        return self.values.shape[2]

    def calendar(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Time-of-day and day-of-week indices for absolute step indices `t`."""
        t = np.asarray(t, dtype=np.int64)
        steps = self.start_tod + t
        tod = steps % self.steps_per_day
        dow = (self.start_dow + steps // self.steps_per_day) % 7
        return tod, dow

    def with_values(self, values: np.ndarray) -> "SeriesTensor":
        return SeriesTensor(
            np.ascontiguousarray(values),
            self.steps_per_day,
            self.start_tod,
            self.start_dow,
            self.interval_seconds,
        )

    def metadata(self) -> dict:
        return {
            "steps_per_day": self.steps_per_day,
            "start_tod": self.start_tod,
            "start_dow": self.start_dow,
            "interval_seconds": self.interval_seconds,
        }


# ------------------------------------------------------------------ container


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_container(s: SeriesTensor, path, extra: dict | None = None) -> None:
    """Write the binary tensor plus a JSON sidecar holding calendar metadata."""
    path = Path(path)
    N, T, C = s.values.shape
    body = np.ascontiguousarray(s.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, CONTAINER_VERSION, C, N, T))
        fh.write(body)
    meta = s.metadata()
    meta.update({"num_nodes": N, "length": T, "num_features": C})
    if extra:
        meta["extra"] = extra
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_container(path) -> SeriesTensor:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptContainer(f"{path}: corrupt container (file shorter than header)")
    magic, version, C, N, T = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptContainer(f"{path}: corrupt container (bad magic {magic!r})")
    if version != CONTAINER_VERSION:
        raise CorruptContainer(f"{path}: unsupported container version {version}")
    expected = _HEADER.size + 4 * N * T * C
    if len(raw) != expected:
        raise CorruptContainer(f"{path}: corrupt container (expected {expected} bytes, found {len(raw)})")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(N, T, C).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise CorruptContainer(f"{path}: container holds non-finite values")
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    return SeriesTensor(
        values,
        steps_per_day=int(meta.get("steps_per_day", 288)),
        start_tod=int(meta.get("start_tod", 0)),
        start_dow=int(meta.get("start_dow", 0)),
        interval_seconds=int(meta.get("interval_seconds", 300)),
    )


def import_csv(path, steps_per_day: int = 288, start_tod: int = 0, start_dow: int = 0) -> SeriesTensor:
    """Read a CSV with one row per time step and one column per node.

    A non-numeric first row is treated as a header.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows:
        try:
            [float(c) for c in rows[0]]
        except ValueError:
            rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise DataError(f"{path}: ragged rows")
    try:
        arr = np.array([[float(c) for c in r] for r in rows], dtype=np.float32)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric cell ({exc})") from None
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: NaN or Inf in CSV")
    return SeriesTensor(
        arr.T[:, :, None].copy(),
        steps_per_day=steps_per_day,
        start_tod=start_tod,
        start_dow=start_dow,
        interval_seconds=SECONDS_PER_DAY // steps_per_day,
    )


# -------------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DataError("normalization std must be positive")


def zscore_fit(train) -> NormStats:
    """Pooled mean/std over every variable and step of the training data."""
    v = train.values if isinstance(train, SeriesTensor) else np.asarray(train)
    v = v.astype(np.float64)
    std = float(v.std())
    if std == 0.0:
        raise DataError("training data has zero variance")
    return NormStats(float(v.mean()), std)


def zscore_apply(x, stats: NormStats):
    if isinstance(x, SeriesTensor):
        return x.with_values(zscore_apply(x.values, stats))
    x = np.asarray(x)
    dt = x.dtype if x.dtype.kind == "f" else np.float64
    return ((x - stats.mean) / stats.std).astype(dt)


def zscore_invert(z, stats: NormStats):
    if isinstance(z, SeriesTensor):
        return z.with_values(zscore_invert(z.values, stats))
    z = np.asarray(z)
    dt = z.dtype if z.dtype.kind == "f" else np.float64
    return (z * stats.std + stats.mean).astype(dt)


# ------------------------------------------------------------------ splitting


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def range(self, name: str) -> tuple[int, int]:
        return getattr(self, name)


def split_622(s, T: int = 12, F: int = 12) -> SplitSpec:
    """Chronological 60/20/20 split; every part must fit one T+F window."""
    total = s.length if isinstance(s, SeriesTensor) else int(s)
    n_train = int(total * 6 // 10)
    n_val = int(total * 2 // 10)
    spec = SplitSpec((0, n_train), (n_train, n_train + n_val), (n_train + n_val, total))
    for name in ("train", "val", "test"):
        lo, hi = spec.range(name)
        if hi - lo < T + F:
            raise DataError(f"{name} split has {hi - lo} steps, fewer than T+F={T + F}")
    return spec


def train_slice(s: SeriesTensor, split: SplitSpec) -> np.ndarray:
    lo, hi = split.train
    return s.values[:, lo:hi]


# ------------------------------------------------------------------ windowing


@dataclass(frozen=True)
class WindowSample:
    x_curr: np.ndarray  # [N, T, C]
    x_tgt: np.ndarray  # [N, F, C]
    tod_idx: np.ndarray  # [T]
    dow_idx: np.ndarray  # [T]
    window_end: int


def window_starts(bounds: tuple[int, int], T: int, F: int, stride: int = 1) -> np.ndarray:
    lo, hi = bounds
    last = hi - (T + F)
    if last < lo:
        return np.zeros(0, dtype=np.int64)
    return np.arange(lo, last + 1, stride, dtype=np.int64)


def window_iter(s: SeriesTensor, bounds: tuple[int, int], T: int, F: int, stride: int = 1) -> Iterator[WindowSample]:
    """Yield every window whose inputs and targets both lie inside `bounds`."""
    for start in window_starts(bounds, T, F, stride):
        tod, dow = s.calendar(np.arange(start, start + T))
        yield WindowSample(
            x_curr=s.values[:, start : start + T],
            x_tgt=s.values[:, start + T : start + T + F],
            tod_idx=tod,
            dow_idx=dow,
            window_end=int(start + T - 1),
        )


@dataclass
class WindowBatch:
    x_curr: np.ndarray  # [B, N, T, C]
    x_tgt: np.ndarray | None  # [B, N, F, C]
    tod_idx: np.ndarray  # [B, T]
    dow_idx: np.ndarray  # [B, T]
    window_end: np.ndarray  # [B]


def gather_windows(s: SeriesTensor, starts: np.ndarray, T: int, F: int) -> WindowBatch:
    """Materialize several windows at once as a batch (F=0 skips targets)."""
    starts = np.asarray(starts, dtype=np.int64)
    v = np.swapaxes(s.values, 0, 1)  # [T_total, N, C]
    t_in = starts[:, None] + np.arange(T)
    x_curr = np.swapaxes(v[t_in], 1, 2)  # [B, N, T, C]
    x_tgt = None
    if F > 0:
        t_out = starts[:, None] + T + np.arange(F)
        x_tgt = np.swapaxes(v[t_out], 1, 2)
    tod, dow = s.calendar(t_in)
    return WindowBatch(x_curr, x_tgt, tod, dow, starts + T - 1)


# ------------------------------------------------------------------ synthesis


@dataclass
class SynthConfig:
    N: int = 64
    days: int = 14
    steps_per_day: int = 288
    graph_degree: int = 4
    diffusion_weight: float = 0.5
    noise_sigma: float = 0.15
    ar_coef: float = 0.9
    weekend_damping: float = 0.6
    start_dow: int = 0
    seed: int = 0


@dataclass
class SynthData:
    series: SeriesTensor
    adjacency: np.ndarray  # [N, N] row-normalized, zero diagonal
    noise: np.ndarray  # [N, T_total] the diffused AR(1) component
    positions: np.ndarray = field(repr=False, default=None)


def _knn_graph(pos: np.ndarray, k: int) -> np.ndarray:
    n = len(pos)
    dist = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    np.fill_diagonal(dist, np.inf)
    adj = np.zeros((n, n))
    nearest = np.argsort(dist, axis=1, kind="stable")[:, : min(k, n - 1)]
    rows = np.repeat(np.arange(n), nearest.shape[1])
    adj[rows, nearest.ravel()] = 1.0
    adj = np.maximum(adj, adj.T)
    return adj / adj.sum(axis=1, keepdims=True)


def synth_generate(cfg: SynthConfig = SynthConfig()) -> SynthData:
    """Daily sinusoid with weekend damping plus graph-diffused AR(1) noise.

    Node n at step t:
        x = level_n + amp_n * week(t) * sin(2 pi tod(t) / steps_per_day - phase_n) + u_n(t)
        u(t) = ar_coef * ((1 - w) u(t-1) + w A u(t-1)) + noise_sigma * eps(t)
    where A is the row-normalized k-nearest-neighbour graph over random points
    in the unit square and w is `diffusion_weight`. Phases vary smoothly with
    position so neighbours peak at similar times.
    """
    if cfg.N < 2:
        raise DataError("synthetic data needs N >= 2")
    if cfg.days < 2:
        raise DataError("synthetic data needs days >= 2")
    if cfg.steps_per_day < 1 or SECONDS_PER_DAY % cfg.steps_per_day:
        raise DataError("steps_per_day must divide 86400")
    if not 0.0 <= cfg.diffusion_weight <= 1.0:
        raise DataError("diffusion_weight must lie in [0, 1]")
    if not 0.0 <= cfg.ar_coef < 1.0:
        raise DataError("ar_coef must lie in [0, 1)")
    rng = np.random.default_rng(cfg.seed)
    N, P = cfg.N, cfg.steps_per_day
    total = cfg.days * P
    pos = rng.random((N, 2))
    adj = _knn_graph(pos, cfg.graph_degree)
    level = rng.uniform(2.0, 4.0, size=N)
    amp = rng.uniform(0.8, 1.2, size=N)
    phase = 2 * np.pi * 0.15 * pos[:, 0]

    t = np.arange(total)
    tod = t % P
    dow = (cfg.start_dow + t // P) % 7
    week = np.where(dow >= 5, cfg.weekend_damping, 1.0)
    daily = np.sin(2 * np.pi * tod[None, :] / P - phase[:, None])
    seasonal = level[:, None] + amp[:, None] * week[None, :] * daily

    w = cfg.diffusion_weight
    mix = (1.0 - w) * np.eye(N) + w * adj
    eps = rng.standard_normal((total, N)) * cfg.noise_sigma
    u = np.zeros((total, N))
    # start from the stationary scale so early steps are not special
    u[0] = eps[0] / np.sqrt(1.0 - cfg.ar_coef**2)
    for i in range(1, total):
        u[i] = cfg.ar_coef * (mix @ u[i - 1]) + eps[i]
    noise = u.T
    values = (seasonal + noise)[:, :, None].astype(np.float32)
    series = SeriesTensor(
        values,
        steps_per_day=P,
        start_tod=0,
        start_dow=cfg.start_dow,
        interval_seconds=SECONDS_PER_DAY // P,
    )
    return SynthData(series, adj, noise, pos)


# ----------------------------------------------------------------- statistics

# Reference values for context only; not reproduced here.
REFERENCE_CV = {
    "PEMS04": 58.82,
    "PEMS08": 46.75,
    "CA": 60.10,
    "SDWPF": 121.97,
    "Humidity": 17.19,
    "Temperature": 2.19,
}


def _variables(s) -> np.ndarray:
    """Flatten to [variables, time]."""
    v = s.values if isinstance(s, SeriesTensor) else np.asarray(s, dtype=np.float64)
    if v.ndim == 1:
        return v[None, :].astype(np.float64)
    if v.ndim == 2:
        return v.astype(np.float64)
    return np.swapaxes(v, 1, 2).reshape(-1, v.shape[1]).astype(np.float64)


def compute_cv(s) -> float:
    """Mean over variables of 100 * std / mean (percent)."""
    v = _variables(s)
    mean = v.mean(axis=1)
    std = v.std(axis=1)
    ok = np.abs(mean) > 1e-12
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} zero-mean variable(s) excluded from CV", RuntimeWarning)
    if not ok.any():
        raise DataError("every variable has zero mean; CV undefined")
    return float(np.mean(100.0 * std[ok] / mean[ok]))


def _centered_ma(v: np.ndarray, period: int) -> tuple[np.ndarray, int]:
    """Centered moving average along axis 1 (2 x period MA for even periods).

    Returns the valid part and its offset from the series start.
    """
    if period % 2:
        w = np.ones(period) / period
    else:
        w = np.r_[0.5, np.ones(period - 1), 0.5] / period
    half = len(w) // 2
    c = np.cumsum(np.pad(v, ((0, 0), (1, 0))), axis=1)
    if period % 2:
        ma = (c[:, period:] - c[:, :-period]) / period
    else:
        inner = (c[:, period:] - c[:, :-period])  # sums of `period` consecutive values
        ma = (inner[:, :-1] + inner[:, 1:]) / (2 * period)
    return ma, half


def decompose(s, period: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Classical additive moving-average decomposition, trimmed to the MA support.

    Returns (trend, seasonal, remainder), each [variables, T_valid].
    """
    v = _variables(s)
    if period < 2:
        raise DataError("seasonal period must be >= 2")
    if v.shape[1] < 2 * period:
        raise DataError(f"series of length {v.shape[1]} is shorter than two periods ({period})")
    trend, off = _centered_ma(v, period)
    body = v[:, off : off + trend.shape[1]]
    detr = body - trend
    phase = (np.arange(body.shape[1]) + off) % period
    means = np.zeros((v.shape[0], period))
    for k in range(period):
        means[:, k] = detr[:, phase == k].mean(axis=1)
    means -= means.mean(axis=1, keepdims=True)
    seasonal = means[:, phase]
    remainder = detr - seasonal
    return trend, seasonal, remainder


def _strength(rem: np.ndarray, comp: np.ndarray) -> np.ndarray:
    vr = rem.var(axis=1)
    vc = (comp + rem).var(axis=1)
    out = np.zeros_like(vr)
    ok = vc > 1e-12 * (1.0 + vr)
    out[ok] = np.maximum(0.0, 1.0 - vr[ok] / vc[ok])
    return np.clip(out, 0.0, 1.0)


def trend_seasonality_strength(s, period: int | None = None) -> tuple[float, float]:
    """Average trend and seasonality strengths in [0, 1].

    strength = max(0, 1 - Var(R) / Var(component + R)) on a moving-average
    decomposition. A component whose own variance plus the remainder's is
    zero scores 0.
    """
    if period is None:
        if not isinstance(s, SeriesTensor):
            raise DataError("period is required for raw arrays")
        period = s.steps_per_day
    trend, seasonal, rem = decompose(s, period)
    return float(_strength(rem, trend).mean()), float(_strength(rem, seasonal).mean())


def dataset_summary(s: SeriesTensor) -> dict:
    trend, season = trend_seasonality_strength(s)
    return {
        "num_nodes": s.num_nodes,
        "length": s.length,
        "interval_seconds": s.interval_seconds,
        "cv": compute_cv(s),
        "trend_strength": trend,
        "seasonality_strength": season,
    }


def config_dict(cfg) -> dict:
    return asdict(cfg)
