"""Linear-probe evaluation: ridge regression from representations to future values,
with last-value and raw-window ridge baselines."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .data import SeriesTensor, SplitSpec, floor_product, window_starts

LAMBDA_GRID = (0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000)
DEFAULT_FRACTION = 0.05
DEFAULT_REPEATS = 10


class RowError(ValueError):
    pass


class RidgeError(np.linalg.LinAlgError):
    pass


@dataclass
class RowSet:
    X: np.ndarray  # [n, d]
    Y: np.ndarray  # [n, q]
    node: np.ndarray  # [n]
    t: np.ndarray  # [n] window end

    def __len__(self) -> int:
        return len(self.X)

    def subset(self, idx: np.ndarray) -> "RowSet":
        return RowSet(self.X[idx], self.Y[idx], self.node[idx], self.t[idx])


@dataclass
class RidgeModel:
    W: np.ndarray  # [(d + 1), q]; last row is the bias
    lam: float
    horizon: int = 0

    @property
    def weights(self) -> np.ndarray:
        return self.W[:-1]

    @property
    def bias(self) -> np.ndarray:
        return self.W[-1]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.W[:-1] + self.W[-1]


@dataclass
class EvalEntry:
    method: str
    horizon: int
    mse: float
    mae: float
    lam: float | None = None
    fraction: float | None = None
    repeats: int = 1
    n_train: int = 0
    n_test: int = 0
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)


# ------------------------------------------------------------------ rows


def _targets(values: np.ndarray, ends: np.ndarray, horizon: int) -> np.ndarray:
    """values [N, L, C]; returns [W, N, horizon * C] of steps end+1 .. end+horizon."""
    idx = ends[:, None] + 1 + np.arange(horizon)
    tgt = values[:, idx]  # [N, W, h, C]
    N, W = tgt.shape[:2]
    return np.ascontiguousarray(np.swapaxes(tgt, 0, 1)).reshape(W, N, -1)


def _pool(feats: np.ndarray, targets: np.ndarray, ends: np.ndarray) -> RowSet:
    W, N = feats.shape[:2]
    if W == 0:
        raise RowError("no eligible window ends (split too short for the horizon)")
    return RowSet(
        feats.reshape(W * N, -1).astype(np.float64),
        targets.reshape(W * N, -1).astype(np.float64),
        np.tile(np.arange(N), W),
        np.repeat(ends, N),
    )


def build_rows(store, data: SeriesTensor, horizon: int) -> RowSet:
    """Pair each (window end, node) representation with the next `horizon` values.

    `data` is normalized. Window ends whose targets would leave the store's
    split are dropped.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    hi = store.bounds[1]
    keep = store.window_end + horizon <= hi - 1
    ends = store.window_end[keep]
    return _pool(store.reps[keep], _targets(data.values, ends, horizon), ends)


def subsample(rows: RowSet, fraction: float, seed) -> RowSet:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"sample fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return rows
    k = floor_product(fraction, len(rows))
    if k < 1:
        raise RowError(f"fraction {fraction} of {len(rows)} rows leaves nothing to train on")
    idx = np.sort(np.random.default_rng(seed).choice(len(rows), size=k, replace=False))
    return rows.subset(idx)


def build_row_sets(stores: dict, data: SeriesTensor, horizon: int, fraction: float = DEFAULT_FRACTION,
                   seed=0) -> dict[str, RowSet]:
    """Train rows are subsampled to `fraction`; validation and test rows stay complete."""
    out = {name: build_rows(stores[name], data, horizon) for name in ("train", "val", "test")}
    out["train"] = subsample(out["train"], fraction, seed)
    return out


# ------------------------------------------------------------------ ridge


def _gram(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Xa = np.hstack([X, np.ones((len(X), 1))])
    return Xa.T @ Xa, Xa.T @ Y


def _solve(G: np.ndarray, R: np.ndarray, lam: float) -> np.ndarray:
    A = G.copy()
    idx = np.arange(A.shape[0] - 1)
    A[idx, idx] += lam  # bias (last row) unregularized
    try:
        c = scipy.linalg.cho_factor(A, lower=False, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise RidgeError(f"ridge system is singular at lambda={lam} ({exc})") from None
    return scipy.linalg.cho_solve(c, R)


def ridge_fit(X: np.ndarray, Y: np.ndarray, lam: float) -> RidgeModel:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or len(X) < 1:
        raise ValueError("X must be a non-empty 2-D array")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    squeeze = Y.ndim == 1
    Y2 = Y[:, None] if squeeze else Y
    W = _solve(*_gram(X, Y2), lam)
    return RidgeModel(W[:, 0] if squeeze else W, float(lam))


def mse_mae(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    if target.size == 0:
        raise RowError("empty evaluation set")
    err = pred - target
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


def ridge_grid_search(train: RowSet, val: RowSet, grid=LAMBDA_GRID) -> tuple[RidgeModel, list[tuple[float, float]]]:
    """Fit each lambda on train rows; choose the lowest validation MSE, ties to the larger lambda."""
    if len(val) == 0:
        raise RowError("validation rows are empty")
    G, R = _gram(train.X, train.Y)
    scores = []
    best = None
    for lam in sorted(float(v) for v in grid):
        model = RidgeModel(_solve(G, R, lam), lam)
        mse = mse_mae(model.predict(val.X), val.Y)[0]
        scores.append((lam, mse))
        # ascending lambda order: a tie keeps the later (larger) value
        if best is None or mse <= best[1] * (1 + 1e-12):
            best = (model, mse)
    return best[0], scores


def evaluate(model: RidgeModel, rows: RowSet) -> tuple[float, float]:
    return mse_mae(model.predict(rows.X), rows.Y)


# ------------------------------------------------------------------ baselines


def _raw_windows(data: SeriesTensor, bounds: tuple[int, int], T: int, horizon: int):
    starts = window_starts(bounds, T, horizon)
    ends = starts + T - 1
    idx = starts[:, None] + np.arange(T)
    hist = data.values[:, idx]  # [N, W, T, C]
    feats = np.swapaxes(hist, 0, 1).reshape(len(starts), data.num_nodes, -1)
    return feats, ends


def hl_baseline(data: SeriesTensor, T: int, horizon: int, bounds: tuple[int, int]) -> EvalEntry:
    """Repeat the last observed value of each node over the horizon."""
    t0 = time.perf_counter()
    starts = window_starts(bounds, T, horizon)
    if len(starts) == 0:
        raise RowError("split too short for one window")
    ends = starts + T - 1
    tgt = _targets(data.values, ends, horizon)  # [W, N, h*C]
    last = np.swapaxes(data.values[:, ends], 0, 1)  # [W, N, C]
    pred = np.tile(last, (1, 1, horizon))
    mse, mae = mse_mae(pred.astype(np.float64), tgt.astype(np.float64))
    return EvalEntry("HL", horizon, mse, mae, n_test=tgt.shape[0] * tgt.shape[1], seconds=time.perf_counter() - t0)


def raw_ridge_baseline(data: SeriesTensor, T: int, horizon: int, split: SplitSpec, grid=LAMBDA_GRID,
                       fraction: float = 1.0, seed=0) -> EvalEntry:
    """Ridge on each node's raw T-step history instead of a learned representation."""
    t0 = time.perf_counter()
    sets = {}
    for name in ("train", "val", "test"):
        feats, ends = _raw_windows(data, split.range(name), T, horizon)
        sets[name] = _pool(feats, _targets(data.values, ends, horizon), ends)
    sets["train"] = subsample(sets["train"], fraction, seed)
    model, _ = ridge_grid_search(sets["train"], sets["val"], grid)
    mse, mae = evaluate(model, sets["test"])
    return EvalEntry("RidgeRaw", horizon, mse, mae, lam=model.lam, fraction=fraction, n_train=len(sets["train"]),
                     n_test=len(sets["test"]), seconds=time.perf_counter() - t0)


# ------------------------------------------------------------------ protocol


def representation_eval(stores: dict, data: SeriesTensor, horizon: int, fraction: float = DEFAULT_FRACTION,
                        repeats: int = DEFAULT_REPEATS, seed: int = 0, grid=LAMBDA_GRID,
                        method: str = "STReP") -> EvalEntry:
    """Average test MSE/MAE over `repeats` independent training subsamples."""
    t0 = time.perf_counter()
    full = {name: build_rows(stores[name], data, horizon) for name in ("train", "val", "test")}
    mses, maes, lams = [], [], []
    n_train = 0
    for r in range(repeats):
        train = subsample(full["train"], fraction, [seed, r])
        model, _ = ridge_grid_search(train, full["val"], grid)
        mse, mae = evaluate(model, full["test"])
        mses.append(mse)
        maes.append(mae)
        lams.append(model.lam)
        n_train = len(train)
    return EvalEntry(method, horizon, float(np.mean(mses)), float(np.mean(maes)),
                     lam=_most_chosen(lams), fraction=fraction, repeats=repeats, n_train=n_train,
                     n_test=len(full["test"]), seconds=time.perf_counter() - t0,
                     extra={"mse_std": float(np.std(mses)), "lambdas": lams})


def _most_chosen(lams: list[float]) -> float:
    vals, counts = np.unique(lams, return_counts=True)
    return float(vals[counts == counts.max()].max())


def run_protocol(stores: dict, data: SeriesTensor, split: SplitSpec, T: int, horizons, fraction=DEFAULT_FRACTION,
                 repeats=DEFAULT_REPEATS, seed=0, grid=LAMBDA_GRID, baselines=True) -> list[EvalEntry]:
    out = []
    for h in horizons:
        out.append(representation_eval(stores, data, h, fraction, repeats, seed, grid))
        if baselines:
            out.append(hl_baseline(data, T, h, split.test))
            out.append(raw_ridge_baseline(data, T, h, split, grid))
    return out


# ------------------------------------------------------------------ serialization

REPORT_COLUMNS = ("method", "horizon", "mse", "mae", "lam", "fraction", "repeats", "n_train", "n_test")


def report_csv(entries: list[EvalEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for e in entries:
        row = asdict(e)
        w.writerow(["" if row[c] is None else (f"{row[c]:.10g}" if isinstance(row[c], float) else row[c])
                    for c in REPORT_COLUMNS])
    return buf.getvalue()


def report_json(entries: list[EvalEntry]) -> str:
    rows = []
    for e in entries:
        row = {c: getattr(e, c) for c in REPORT_COLUMNS}
        row["extra"] = e.extra
        rows.append(row)
    return json.dumps(rows, indent=2, sort_keys=True) + "\n"


def timings_json(entries: list[EvalEntry]) -> str:
    return json.dumps([{"method": e.method, "horizon": e.horizon, "seconds": e.seconds} for e in entries], indent=2) + "\n"
