"""Command-line entry point: generate | pretrain | encode | eval | bench | ablate."""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import jsonschema

from . import bench as bench_mod
from . import diffcore as dc
from .data import (
    REFERENCE_CV,
    DataError,
    SynthConfig,
    config_dict,
    dataset_summary,
    load_container,
    save_container,
    split_622,
    synth_generate,
    zscore_apply,
)
from .downstream import report_csv, report_json, run_protocol, timings_json
from .tensorfile import TensorFileError
from .trainer import (
    TrainConfig,
    encode_dataset,
    grid_search_weights,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
ENV_OUT_ROOT = "STREP_OUT_ROOT"
ENV_WORKERS = "STREP_WORKERS"

MODEL_KEYS = ("T", "F", "d", "p", "m", "L", "heads", "ffn_factor", "dropout", "conv_kernel", "prenorm")
_TRAIN_EXCLUDE = set(MODEL_KEYS) | {"use_encoder", "use_recon", "use_pred"}
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name not in _TRAIN_EXCLUDE)
DEFAULT_EVAL = {"horizons": [12, 24, 48, 96], "fraction": 0.05, "repeats": 10, "seed": 0}
DEFAULT_BENCH = {"n_list": list(bench_mod.DEFAULT_N_LIST), "repeats": 5, "batch": 1,
                 "variants": list(bench_mod.VARIANTS), "horizons": [12]}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config


def _json_type(default):
    if isinstance(default, bool):
        return {"type": "boolean"}
    if isinstance(default, int):
        return {"type": "integer"}
    if isinstance(default, float):
        return {"type": "number"}
    if isinstance(default, (tuple, list)):
        return {"type": "array", "items": {"type": "integer"} if all(isinstance(v, int) for v in default)
                else {"type": "string"}}
    return {"type": "string"}


def _section(defaults: dict) -> dict:
    return {"type": "object", "additionalProperties": False,
            "properties": {k: _json_type(v) for k, v in defaults.items()}}


def default_config() -> dict:
    tc = TrainConfig().to_dict()
    return {
        "data": config_dict(SynthConfig()),
        "model": {k: tc[k] for k in MODEL_KEYS},
        "train": {k: tc[k] for k in TRAIN_KEYS},
        "eval": dict(DEFAULT_EVAL),
        "bench": dict(DEFAULT_BENCH),
    }


def config_schema() -> dict:
    d = default_config()
    schema = {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "type": "object",
        "additionalProperties": False,
        "properties": {name: _section(sec) for name, sec in d.items()},
    }
    schema["properties"]["eval"]["properties"]["fraction"] = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
    return schema


def load_config(path: str | None, overrides: dict[str, dict]) -> dict:
    """Defaults < config file < command-line overrides; validated before use."""
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {p} is not valid JSON: {exc}") from None
        try:
            jsonschema.validate(user, config_schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(x) for x in exc.absolute_path) or "<root>"
            raise UsageError(f"invalid config at {where}: {exc.message}") from None
        for sec, vals in user.items():
            cfg[sec].update(vals)
    for sec, vals in overrides.items():
        cfg[sec].update({k: v for k, v in vals.items() if v is not None})
    jsonschema.validate(cfg, config_schema())
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**cfg["model"], **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None


# ------------------------------------------------------------------ output handling


def resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(ENV_OUT_ROOT)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


@contextlib.contextmanager
def locked_output(target: Path, outputs: list[Path], force: bool):
    """Create the output location, refuse to clobber, and hold an exclusive lock."""
    target.mkdir(parents=True, exist_ok=True)
    existing = [o for o in outputs if o.exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(map(str, existing))} (pass --force)")
    lock = target / ".strep.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"output {target} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        for o in existing:
            o.unlink()
        yield target
    finally:
        lock.unlink(missing_ok=True)


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def _echo_config(out: Path, cfg: dict, extra: dict | None = None) -> None:
    doc = {"config": cfg, **(extra or {})}
    _write(out / "config.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _parse_int_list(s: str | None) -> list[int] | None:
    if s is None:
        return None
    try:
        vals = [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {s!r}") from None
    if not vals:
        raise UsageError("empty integer list")
    return vals


def _load_data(path: str | None):
    if path is None:
        raise UsageError("--data is required")
    p = Path(path)
    if not p.exists():
        raise DataError(f"data file not found: {p}")
    return load_container(p)


# ------------------------------------------------------------------ commands


def cmd_generate(args, cfg) -> int:
    synth = SynthConfig(**cfg["data"])
    out = resolve_out(args.out)
    with locked_output(out.parent, [out, out.with_name(out.name + ".json")], args.force):
        data = synth_generate(synth)
        save_container(data.series, out, extra={"generator": config_dict(synth)})
    summary = dataset_summary(data.series)
    print(f"wrote {out}  N={summary['num_nodes']}  steps={summary['length']}  steps/day={data.series.steps_per_day}")
    print(f"CV={summary['cv']:.2f}%  trend strength={summary['trend_strength']:.3f}  "
          f"seasonality strength={summary['seasonality_strength']:.3f}")
    print("reference CV: " + ", ".join(f"{k} {v:.2f}%" for k, v in REFERENCE_CV.items()))
    return EXIT_OK


def cmd_pretrain(args, cfg) -> int:
    data = _load_data(args.data)
    tcfg = train_config(cfg)
    out = resolve_out(args.out)
    targets = [out / n for n in ("checkpoint.bin", "train_log.csv", "config.json", "history.json")]
    with locked_output(out, targets, args.force):
        def report(h):
            print(f"epoch {h['epoch']:3d}  total {h['total']:.5f}  val {h['val_total']:.5f}  "
                  f"({h['wall_seconds']:.0f}s)", flush=True)

        extra = {}
        if args.grid_search:
            res, grid = grid_search_weights(data, tcfg, progress=report)
            extra["weight_grid"] = grid
            with (out / "train_log.csv").open("w") as fh:
                fh.write("epoch,L_recon,L_pred,L_MS,total,val_total,wall_seconds\n")
                for h in res.history:
                    fh.write(f"{h['epoch']},{h['recon']:.8g},{h['pred']:.8g},{h['ms']:.8g},{h['total']:.8g},"
                             f"{h['val_total']:.8g},{h['wall_seconds']:.3f}\n")
        else:
            res = pretrain(data, tcfg, log_path=out / "train_log.csv", progress=report)
        save_checkpoint(res.checkpoint, out / "checkpoint.bin")
        _write(out / "history.json", json.dumps(res.checkpoint.history, indent=2) + "\n")
        _echo_config(out, cfg, {"data": str(args.data), "config_hash": res.checkpoint.config_hash, **extra})
    print(f"best epoch {res.checkpoint.best_epoch}; checkpoint written to {out / 'checkpoint.bin'}")
    return EXIT_OK


def _checkpoint_for(args, data):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    p = Path(args.checkpoint)
    if p.is_dir():
        p = p / "checkpoint.bin"
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    return load_checkpoint(p)


def cmd_encode(args, cfg) -> int:
    data = _load_data(args.data)
    ck = _checkpoint_for(args, data)
    out = resolve_out(args.out)
    names = ("train", "val", "test")
    with locked_output(out, [out / f"repr_{n}.bin" for n in names] + [out / "config.json"], args.force):
        for n in names:
            store = encode_dataset(ck, data, n)
            store.save(out / f"repr_{n}.bin")
            print(f"{n}: {len(store)} windows x {store.reps.shape[1]} nodes x {store.reps.shape[2]} dims")
        _echo_config(out, cfg, {"data": str(args.data), "checkpoint": str(args.checkpoint)})
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    data = _load_data(args.data)
    ck = _checkpoint_for(args, data)
    ev = cfg["eval"]
    out = resolve_out(args.out)
    targets = [out / n for n in ("report.csv", "report.json", "timings.json", "config.json")]
    with locked_output(out, targets, args.force):
        split = split_622(data, ck.model_config.T, ck.model_config.F)
        stores = {n: encode_dataset(ck, data, n) for n in ("train", "val", "test")}
        entries = run_protocol(stores, zscore_apply(data, ck.norm), split, ck.model_config.T, ev["horizons"],
                               ev["fraction"], ev["repeats"], ev["seed"])
        _write(out / "report.csv", report_csv(entries))
        _write(out / "report.json", report_json(entries))
        _write(out / "timings.json", timings_json(entries))
        _echo_config(out, cfg, {"data": str(args.data), "checkpoint": str(args.checkpoint)})
    for e in entries:
        print(f"{e.method:9s} h={e.horizon:3d}  MSE {e.mse:.5f}  MAE {e.mae:.5f}")
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    b = cfg["bench"]
    tcfg = train_config(cfg)
    mcfg = tcfg.model_config(num_nodes=b["n_list"][-1], steps_per_day=cfg["data"]["steps_per_day"], C=1)
    out = resolve_out(args.out)
    with locked_output(out, [out / "scaling.csv", out / "scaling.json", out / "config.json"], args.force):
        with _workers(1):
            rep = bench_mod.complexity_bench(mcfg, b["n_list"], b["repeats"], b["batch"], seed=tcfg.seed)
        _write(out / "scaling.csv", rep.csv())
        _write(out / "scaling.json", json.dumps(rep.to_dict(), indent=2) + "\n")
        _echo_config(out, cfg)
    print(rep.csv(), end="")
    print(f"log-log slope: encoder fwd {rep.slope_fwd:.3f}, fwd+bwd {rep.slope_fwd_bwd:.3f}, "
          f"dense reference {rep.slope_ref:.3f}")
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    data = _load_data(args.data)
    tcfg = train_config(cfg)
    ev, b = cfg["eval"], cfg["bench"]
    unknown = set(b["variants"]) - set(bench_mod.VARIANTS)
    if unknown:
        raise UsageError(f"unknown variants {sorted(unknown)}; choose from {bench_mod.VARIANTS}")
    out = resolve_out(args.out)
    with locked_output(out, [out / "ablation.csv", out / "config.json"], args.force):
        rows = bench_mod.ablation_run(
            data, tcfg, b["horizons"], b["variants"], ev["fraction"], ev["repeats"], ev["seed"],
            progress=lambda tag, h: print(f"[{tag}] epoch {h['epoch']} val {h['val_total']:.5f}", flush=True),
        )
        _write(out / "ablation.csv", bench_mod.ablation_csv(rows))
        _echo_config(out, cfg, {"data": str(args.data)})
    print(bench_mod.ablation_csv(rows), end="")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "encode": cmd_encode, "eval": cmd_eval,
            "bench": cmd_bench, "ablate": cmd_ablate}


@contextlib.contextmanager
def _workers(n: int | None):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: data, model, train, eval, bench)")
    common.add_argument("--out", required=True, help="output file (generate) or directory")
    common.add_argument("--seed", type=int, help="overrides data.seed (generate) or train.seed / eval.seed")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--data", help="input series container")
    common.add_argument("--checkpoint", help="checkpoint file or pretrain output directory")
    common.add_argument("--horizons", help="comma-separated forecast horizons, e.g. 12,24")
    common.add_argument("--fraction", type=float, help="training-row sample fraction for the linear probe")
    common.add_argument("--variants", help="comma-separated ablation variants")
    common.add_argument("--n-list", help="comma-separated node counts for the scaling bench")
    common.add_argument("--grid-search", action="store_true", help="pretrain: search alpha/beta over the grid")

    parser = argparse.ArgumentParser(prog="strep", description="Spatiotemporal representation pretraining toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "write a seeded synthetic dataset and print its statistics",
        "pretrain": "self-supervised pretraining; writes checkpoint and training log",
        "encode": "encode train/val/test windows into representation stores",
        "eval": "linear-probe evaluation with HL and raw-ridge baselines",
        "bench": "encoder scaling benchmark against dense attention",
        "ablate": "train and evaluate the ablation variants",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _overrides(args) -> dict[str, dict]:
    ov: dict[str, dict] = {"data": {}, "train": {}, "eval": {}, "bench": {}}
    if args.seed is not None:
        if args.command == "generate":
            ov["data"]["seed"] = args.seed
        else:
            ov["train"]["seed"] = args.seed
            ov["eval"]["seed"] = args.seed
    ov["eval"]["horizons"] = _parse_int_list(args.horizons)
    ov["bench"]["horizons"] = _parse_int_list(args.horizons)
    ov["eval"]["fraction"] = args.fraction
    ov["bench"]["n_list"] = _parse_int_list(args.n_list)
    if args.variants is not None:
        ov["bench"]["variants"] = [v.strip() for v in args.variants.split(",") if v.strip()]
    return ov


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    workers = os.environ.get(ENV_WORKERS)
    try:
        cfg = load_config(args.config, _overrides(args))
        n_workers = int(workers) if workers else None
        with _workers(n_workers):
            return COMMANDS[args.command](args, cfg)
    except (UsageError, jsonschema.ValidationError) as exc:
        print(f"error: {getattr(exc, 'message', exc)}", file=sys.stderr)
        return EXIT_USAGE
    except dc.NumericError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(json.dumps(diag, indent=2, default=str), file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, TensorFileError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
