"""Acceptance criteria, one test each. Every test records a PASS/FAIL line that
is repeated in the terminal summary at the end of the run.

The desk experiment and the ablation train on the default synthetic dataset
(64 nodes, 14 days) until early stopping; together they take about an hour
and a half on one CPU core.
"""

import hashlib
import json
import time
from dataclasses import replace
from fractions import Fraction
from math import floor

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from acceptance_log import record
from oracles import grad_check, huber_scalar, ridge_gd_oracle
from strep import diffcore as dc
from strep.bench import DEFAULT_N_LIST, VARIANTS, complexity_bench, variant_config
from strep.cli import main
from strep.data import SynthConfig, split_622, synth_generate, zscore_apply
from strep.diffcore import Tensor
from strep.downstream import LAMBDA_GRID, representation_eval, run_protocol
from strep.embedding import apply_mask
from strep.encoder import Encoder
from strep.heads import LossWeights, multiscale_loss, total_loss
from strep.model import ModelConfig
from strep.trainer import TrainConfig, encode_dataset, load_checkpoint, pretrain, save_checkpoint
from test_diffcore import OPS, probe
from test_model import micro_model

F64 = np.float64

# Desk budget: every second training window, early stopping with patience 4,
# at most 40 epochs (about 35 s each on one core).
DESK = TrainConfig(max_epochs=40, patience=4, train_stride=2)


@pytest.fixture(scope="session")
def desk_data():
    return synth_generate(SynthConfig()).series


@pytest.fixture(scope="session")
def desk_runs(desk_data):
    """Lazily trained ablation variants on the default dataset, shared by two criteria."""
    cache = {}

    def get(tag):
        if tag not in cache:
            t0 = time.monotonic()
            res = pretrain(desk_data, variant_config(DESK, tag))
            cache[tag] = (res, time.monotonic() - t0)
        return cache[tag]

    return get


def _stores(ckpt, data):
    return {n: encode_dataset(ckpt, data, n) for n in ("train", "val", "test")}


# ------------------------------------------------------------------ 1


def test_gradient_suite():
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    worst = {}
    for name, make in OPS.items():
        tensors, fn = make(rng)
        worst[name] = grad_check(fn, list(tensors))

    from strep.diffcore import MHAParams

    mha = MHAParams.init(8, rng, dtype=F64)
    for p in mha.named().values():
        p.data += rng.standard_normal(p.shape) * 0.1
    q = Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True, dtype=F64)
    kv = Tensor(rng.standard_normal((2, 5, 8)), requires_grad=True, dtype=F64)
    worst["attention"] = grad_check(lambda: probe(dc.multi_head_attention(q, kv, kv, mha, 2)),
                                    [q, kv, *mha.named().values()])

    _, model = micro_model(seed=3)
    x, y = rng.standard_normal((2, 4, 8, 1)), rng.standard_normal((2, 4, 8, 1))
    tod, dow = np.tile(np.arange(8) + 5, (2, 1)), np.full((2, 8), 2)
    mask = apply_mask(x, 0.25, True, seed=5).grid

    def loss():
        out = model(x, mask, tod, dow, training=True, rng=np.random.default_rng(6))
        return total_loss(out["x_curr_hat"], x, out["x_tgt_hat"], y, kernels=(2, 4, 8, 16))[0]

    worst["micro_model"] = grad_check(loss, model.parameters(), max_entries=24)
    secs = time.monotonic() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and secs < 120
    assert record("gradient suite", ok,
                  f"{len(worst)} checks, worst rel err {worst[top]:.2e} ({top}) < 1e-4; {secs:.1f}s < 120s")


# ------------------------------------------------------------------ 2


def test_ridge_oracle():
    from strep.downstream import ridge_fit

    rng = np.random.default_rng(77)
    max_diff, monotone = 0.0, True
    for _ in range(20):
        n, d, q = int(rng.integers(30, 200)), int(rng.integers(2, 20)), int(rng.integers(1, 5))
        X = rng.standard_normal((n, d)) * rng.uniform(0.5, 3.0)
        Y = X @ rng.standard_normal((d, q)) + rng.standard_normal(q) + 0.3 * rng.standard_normal((n, q))
        lam = float(rng.choice(LAMBDA_GRID))
        max_diff = max(max_diff, float(np.abs(ridge_fit(X, Y, lam).W - ridge_gd_oracle(X, Y, lam)).max()))
        norms = [np.linalg.norm(ridge_fit(X, Y, g).weights) for g in LAMBDA_GRID]
        monotone &= all(a >= b for a, b in zip(norms, norms[1:]))
    ok = max_diff <= 1e-8 and monotone
    assert record("ridge oracle", ok,
                  f"20 systems, max |W - W_oracle| {max_diff:.1e} <= 1e-8; lambda-monotone norms: {monotone}")


# ------------------------------------------------------------------ 3


def test_loss_formula_audit():
    rng = np.random.default_rng(5)
    recomb = 0.0
    for a, b in ((0.3, 0.3), (0.1, 0.5), (0.5, 0.0), (0.2, 0.8)):
        w = LossWeights(a, b)
        xc, xt = rng.standard_normal((4, 6, 12, 1)), rng.standard_normal((4, 6, 12, 1))
        hc = Tensor(rng.standard_normal(xc.shape) * 2)
        ht = Tensor(rng.standard_normal(xt.shape) * 2)
        _, c = total_loss(hc, xc, ht, xt, w, (2, 4, 8))
        recomb = max(recomb, abs(c["total"] - (w.alpha * c["recon"] + w.beta * c["pred"] + w.gamma * c["ms"])))

    p, t = rng.standard_normal((3, 24, 1)) * 2, rng.standard_normal((3, 24, 1))
    huber_ref = float(np.mean([huber_scalar(e) for e in (p - t).ravel()]))
    ident = abs(multiscale_loss(Tensor(p, dtype=F64), t, (1,)).item() - huber_ref)

    hand = multiscale_loss(Tensor(np.array([1.0, 1.0, 3.0, 3.0]).reshape(1, 4, 1), dtype=F64),
                           np.ones((1, 4, 1)), (2,), 1.0).item()
    ok = recomb < 1e-6 and ident < 1e-12 and hand == 0.75
    assert record("loss formula audit", ok,
                  f"recombination err {recomb:.1e} < 1e-6; Omega={{1}} vs Huber {ident:.1e}; hand example {hand}")


# ------------------------------------------------------------------ 4


def test_linearity():
    t0 = time.monotonic()
    with threadpool_limits(limits=1):
        rep = complexity_bench(ModelConfig(num_nodes=DEFAULT_N_LIST[-1]), DEFAULT_N_LIST, repeats=5, batch=1)
    secs = time.monotonic() - t0
    ok = 0.85 <= rep.slope_fwd <= 1.15 and rep.slope_ref >= 1.8 and secs < 600
    assert record("linearity", ok,
                  f"encoder forward slope {rep.slope_fwd:.3f} in [0.85, 1.15] (fwd+bwd {rep.slope_fwd_bwd:.3f}); "
                  f"dense reference slope {rep.slope_ref:.3f} >= 1.8; {secs:.0f}s < 600s")


# ------------------------------------------------------------------ 5


def test_residual_identity_and_equivariance():
    rng = np.random.default_rng(11)
    enc = Encoder(3, rng, T=12, p=3, m=8, d=64, heads=4)
    zero = Encoder(3, np.random.default_rng(12), T=12, p=3, m=8, d=64, heads=4)
    for p in zero.parameters():
        p.data[...] = 0.0
    E = rng.standard_normal((2, 40, 12, 64)).astype(np.float32)
    with dc.no_grad():
        identity = zero(Tensor(E)).data.tobytes() == E.tobytes()
        Z = enc(Tensor(E)).data
        err = 0.0
        for _ in range(5):
            perm = rng.permutation(E.shape[1])
            err = max(err, float(np.abs(enc(Tensor(E[:, perm])).data - Z[:, perm]).max()))
    ok = identity and err <= 1e-5
    assert record("residual identity", ok,
                  f"zero weights give Z == E bitwise: {identity}; 5 permutations, max deviation {err:.1e} <= 1e-5")


# ------------------------------------------------------------------ 6


@pytest.mark.slow
def test_end_to_end_desk_experiment(desk_data, desk_runs):
    res, secs = desk_runs("full")
    ck = res.checkpoint
    split = split_622(desk_data)
    norm_data = zscore_apply(desk_data, ck.norm)
    by_method = {e.method: e for e in run_protocol(_stores(ck, desk_data), norm_data, split, 12, [12])}
    strep, hl, raw = by_method["STReP"].mse, by_method["HL"].mse, by_method["RidgeRaw"].mse
    first, best = res.history[0]["total"], res.history[ck.best_epoch - 1]["total"]
    epochs = len(res.history)
    ok = strep < hl and strep <= 1.05 * raw and best < 0.5 * first and epochs <= 50 and secs <= 1800
    assert record("end-to-end desk experiment", ok,
                  f"h=12 MSE STReP {strep:.4f} < HL {hl:.4f}, <= 1.05 x RidgeRaw {raw:.4f}; "
                  f"best-epoch train loss {best:.4f} < 0.5 x epoch-1 {first:.4f}; "
                  f"{epochs} epochs, {secs / 60:.1f} min")


# ------------------------------------------------------------------ 7


@pytest.mark.slow
def test_ablation_direction(desk_data, desk_runs):
    mse = {}
    for tag in VARIANTS:
        ck = desk_runs(tag)[0].checkpoint
        norm_data = zscore_apply(desk_data, ck.norm)
        mse[tag] = representation_eval(_stores(ck, desk_data), norm_data, 12).mse
    worse = [t for t in VARIANTS[1:] if mse["full"] > 1.10 * mse[t]]
    table = ", ".join(f"{t} {mse[t]:.4f}" for t in VARIANTS)
    assert record("ablation direction", not worse,
                  f"h=12 MSE {table}; full <= 1.10 x every variant" + (f" (violated by {worse})" if worse else ""))


# ------------------------------------------------------------------ 8


def _sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_determinism_and_persistence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "data": {"N": 8, "days": 3, "seed": 3},
        "model": {"d": 16, "L": 1, "heads": 2, "p": 2, "m": 4},
        "train": {"max_epochs": 2, "train_stride": 4, "seed": 5},
        "eval": {"repeats": 3, "fraction": 0.2, "horizons": [12]},
    }))
    c = ["--config", str(cfg)]
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        data = str(d / "data.bin")
        assert main(["generate", *c, "--out", data]) == 0
        assert main(["pretrain", *c, "--data", data, "--out", str(d / "pre")]) == 0
        assert main(["encode", *c, "--data", data, "--checkpoint", str(d / "pre"), "--out", str(d / "enc")]) == 0
        assert main(["eval", *c, "--data", data, "--checkpoint", str(d / "pre"), "--out", str(d / "ev")]) == 0
        files = [d / "data.bin", d / "pre" / "checkpoint.bin", *(d / "enc" / f"repr_{n}.bin" for n in
                 ("train", "val", "test")), d / "ev" / "report.csv", d / "ev" / "report.json"]
        digests.append([_sha(f) for f in files])
    identical = digests[0] == digests[1]

    from strep.data import load_container

    series = load_container(tmp_path / "a" / "data.bin")
    ck = load_checkpoint(tmp_path / "a" / "pre" / "checkpoint.bin")
    save_checkpoint(ck, tmp_path / "again.bin")
    back = load_checkpoint(tmp_path / "again.bin")
    same_encode = all(encode_dataset(ck, series, n).reps.tobytes() == encode_dataset(back, series, n).reps.tobytes()
                      for n in ("train", "val", "test"))
    resaved = _sha(tmp_path / "again.bin") == _sha(tmp_path / "a" / "pre" / "checkpoint.bin")
    ok = identical and same_encode and resaved
    assert record("determinism and persistence", ok,
                  f"two seeded runs byte-identical over {len(digests[0])} artifacts: {identical}; "
                  f"round-trip encode identical: {same_encode}; re-saved checkpoint identical: {resaved}")


# ------------------------------------------------------------------ 9


def test_masking_protocol():
    exact, cases = True, 0
    for T in (8, 12, 24, 100):
        for r in (0.0, 0.1, 0.25, 0.29, 0.5, 0.57, 0.75, 0.9):
            want = floor(Fraction(str(r)) * T)
            for seed in range(3):
                counts = apply_mask((4, 30, T), r, True, seed=seed).counts()
                exact &= bool(np.all(counts == want))
                cases += 1

    data = synth_generate(SynthConfig(N=6, days=3, seed=8)).series
    base = TrainConfig(d=16, L=1, heads=2, p=2, m=4, max_epochs=1, train_stride=8)
    ck = pretrain(data, base).checkpoint
    ref = encode_dataset(ck, data, "test").reps
    invariant = all(
        encode_dataset(replace(ck, train_config=replace(base, mask_ratio=r)), data, "test").reps.tobytes()
        == ref.tobytes() for r in (0.0, 0.5, 0.9)
    )
    ok = exact and invariant
    assert record("masking protocol", ok,
                  f"per-node counts equal floor(r*T) in {cases} cases: {exact}; "
                  f"encode invariant to mask_ratio: {invariant}")
