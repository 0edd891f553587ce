"""``actsvd`` command line.

Every subcommand resolves its settings as flag > ``--config`` JSON file >
``DOBI_SEED`` (seed only) > built-in default, calls the library, prints one
JSON object on stdout and logs to stderr.

Exit codes: 0 success, 1 usage/configuration error, 2 data or model error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import BackwardConfig, NumericalError, certify_gradients
from .container import ContainerError, load_container, load_dataset, save_dataset, save_model
from .linalg import SvdError
from .models import KINDS, Dataset, ToyModel, evaluate, make_dataset, make_toy_model
from .modes import MODES, ModeError, compare_truncation_modes, mode_loss
from .packing import PackError, packed_ratio, quant_error_report, storage_report
from .pipeline import compress, pack_model, packed_layers, remap_comparison
from .ranks import (
    COUNTINGS,
    CompressionTarget,
    RankAllocation,
    TrainHyper,
    TrainingDiverged,
    model_ratio,
    round_ranks,
    train_ranks,
)
from .update import UpdatedWeight, WeightUpdateError, update_all_weights, write_update_csv

log = logging.getLogger("actsvd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "DOBI_SEED"

DEFAULTS = {
    "kind": "char_lm",
    "seed": 0,
    "count": 64,
    "split": "train",
    "eval_split": "test",
    "target_ratio": 0.6,
    "beta": 10.0,
    "penalty_weight": 10.0,
    "eps_val": 1e-12,
    "eps_grad": 1e-10,
    "eps_diff": 1e-6,
    "n_taylor": 10,
    "epochs": 200,
    "batch_size": 32,
    "lr": 0.1,
    "counting": "remapped",
    "init": "full",
    "ratios": [0.4, 0.6, 0.8],
    "mode": "dense",
    "matrices": None,  # 100 regular, 20 degenerate
    "tolerance": 1e-4,
    "degenerate": False,
    "no_round": False,
    "log_level": "INFO",
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class PipelineConfig:
    """Resolved settings for one invocation."""

    command: str
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError as exc:
            raise AttributeError(name) from exc

    @property
    def backward(self) -> BackwardConfig:
        return BackwardConfig(self.eps_val, self.eps_grad, self.eps_diff, self.n_taylor)

    @property
    def target(self) -> CompressionTarget:
        return CompressionTarget(self.target_ratio, self.penalty_weight)

    @property
    def hyper(self) -> TrainHyper:
        return TrainHyper(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            beta=self.beta,
            seed=self.seed,
            counting=self.counting,
            init=self.init,
            backward=self.backward,
        )


# ------------------------------------------------------------------ parser


def _source_args(p, data=True, model=True, split=True):
    p.add_argument("--kind", choices=KINDS, default=None, help="toy model/dataset family")
    p.add_argument("--seed", type=int, default=None)
    if model:
        p.add_argument("--model", default=None, help="model container (default: seeded toy model)")
    if data:
        p.add_argument("--data", default=None, help="dataset file (default: generated from kind/seed/count)")
        p.add_argument("--count", type=int, default=None, help="samples when generating data")
    if split:
        p.add_argument("--split", choices=("train", "test"), default=None)


def _backward_args(p):
    p.add_argument("--eps-val", type=float, default=None)
    p.add_argument("--eps-grad", type=float, default=None)
    p.add_argument("--eps-diff", type=float, default=None)
    p.add_argument("--n-taylor", type=int, default=None)


def _train_args(p):
    p.add_argument("--target-ratio", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--penalty-weight", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--counting", choices=COUNTINGS, default=None)
    p.add_argument("--init", choices=("full", "target"), default=None)
    _backward_args(p)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="JSON file of defaults (flags take precedence)")
    common.add_argument("--log-level", default=None, choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    parser = _Parser(prog="actsvd", description="Activation-SVD compression of toy models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a seeded dataset file")
    _source_args(p, model=False)
    p.add_argument("--out", required=True)

    p = sub.add_parser("init-model", parents=[common], help="write the seeded toy model")
    _source_args(p, data=False, split=False, model=False)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-ranks", parents=[common], help="learn per-layer truncation positions")
    _source_args(p)
    _train_args(p)
    p.add_argument("--no-round", action="store_true", default=None, help="keep continuous ranks")
    p.add_argument("--out", required=True, help="allocation JSON")
    p.add_argument("--trajectory", default=None, help="per-epoch CSV")
    p.add_argument("--figure", default=None, help="trajectory PNG")

    p = sub.add_parser("update-weights", parents=[common], help="IPCA rank-k weight update")
    _source_args(p)
    p.add_argument("--alloc", required=True, help="integer allocation JSON")
    p.add_argument("--out", required=True, help="output model container")
    p.add_argument("--records", default=None, help="per-layer CSV")

    p = sub.add_parser("pack", parents=[common], help="mixed-precision packing of a rank-k model")
    _source_args(p, data=False, split=False)
    p.add_argument("--alloc", default=None, help="allocation JSON (default: the one stored in the model)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="task loss of a model")
    _source_args(p)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--alloc", default=None)
    p.add_argument("--beta", type=float, default=None)

    p = sub.add_parser("gradcheck", parents=[common], help="certify the SVD backward pass")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--matrices", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--degenerate", action="store_true", default=None)
    _backward_args(p)

    p = sub.add_parser("compare-trunc", parents=[common], help="activation vs weight truncation")
    _source_args(p)
    p.add_argument("--ratios", type=float, nargs="+", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--sweep-csv", default=None)
    p.add_argument("--figure", default=None)

    p = sub.add_parser("pipeline", parents=[common], help="train, round, update, pack and evaluate")
    _source_args(p, model=False, split=False)
    _train_args(p)
    p.add_argument("--eval-split", choices=("train", "test"), default=None)
    p.add_argument("--ratios", type=float, nargs="+", default=None, help="remap comparison ratios")
    p.add_argument("--out-dir", required=True)
    return parser


# ------------------------------------------------------------- resolution


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object")
    return {key.replace("-", "_"): value for key, value in raw.items()}


def _check_ranges(v: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise UsageError(msg)

    if "count" in v:
        need(v["count"] >= 1, "--count must be >= 1")
    if "target_ratio" in v:
        need(0 < v["target_ratio"] <= 1, "--target-ratio must lie in (0, 1]")
    if "ratios" in v:
        need(len(v["ratios"]) > 0 and all(0 < r <= 1 for r in v["ratios"]), "--ratios must lie in (0, 1]")
    for key in ("beta", "penalty_weight", "lr", "eps_val", "eps_grad", "eps_diff", "tolerance"):
        if key in v:
            need(isinstance(v[key], (int, float)) and math.isfinite(v[key]) and v[key] > 0, f"--{key.replace('_', '-')} must be positive")
    for key in ("epochs", "batch_size", "n_taylor", "matrices"):
        if v.get(key) is not None:
            need(isinstance(v[key], int) and v[key] >= 1, f"--{key.replace('_', '-')} must be a positive integer")
    if "kind" in v:
        need(v["kind"] in KINDS, f"kind must be one of {KINDS}")
    if "counting" in v:
        need(v["counting"] in COUNTINGS, f"counting must be one of {COUNTINGS}")
    if "mode" in v:
        need(v["mode"] in MODES, f"mode must be one of {MODES}")
    for key in ("model", "data", "alloc"):
        if v.get(key) is not None and not Path(v[key]).exists():
            raise DataError(f"--{key} path {v[key]} does not exist")


def resolve(args: argparse.Namespace) -> PipelineConfig:
    config = _load_config(args.config)
    known = {k for k in vars(args) if k not in ("command", "config")}
    unknown = set(config) - known - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    values = {}
    for key in known:
        cli_value = getattr(args, key)
        if cli_value is not None:
            values[key] = cli_value
        elif key in config:
            values[key] = config[key]
        elif key == "seed" and os.environ.get(SEED_ENV):
            try:
                values[key] = int(os.environ[SEED_ENV])
            except ValueError as exc:
                raise UsageError(f"{SEED_ENV} must be an integer") from exc
        else:
            values[key] = DEFAULTS.get(key)
    _check_ranges(values)
    return PipelineConfig(args.command, values)


# ---------------------------------------------------------------- helpers


def _model(cfg: PipelineConfig) -> tuple[ToyModel, RankAllocation | None]:
    if cfg.values.get("model"):
        loaded = load_container(cfg.model)
        return loaded.model, loaded.alloc
    return make_toy_model(cfg.kind, cfg.seed), None


def _data(cfg: PipelineConfig, model: ToyModel, split: str | None = None) -> Dataset:
    split = split or cfg.values.get("split") or "train"
    if cfg.values.get("data"):
        data = load_dataset(cfg.data)
    else:
        data = make_dataset(model.kind, cfg.seed, cfg.count, split)
    if data.kind != model.kind:
        raise DataError(f"dataset kind {data.kind!r} does not match model kind {model.kind!r}")
    return data


def _alloc(cfg: PipelineConfig, fallback: RankAllocation | None = None) -> RankAllocation | None:
    if cfg.values.get("alloc"):
        try:
            return RankAllocation.load(cfg.alloc)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed allocation file {cfg.alloc}: {exc}") from exc
    return fallback


def _check_alloc(model: ToyModel, alloc: RankAllocation) -> None:
    for name, dims in alloc.dims.items():
        try:
            layer = model.layer(name)
        except KeyError as exc:
            raise DataError(f"allocation names unknown layer {name!r}") from exc
        if tuple(layer.shape) != tuple(dims):
            raise DataError(f"allocation dims {dims} for {name} disagree with weight {layer.shape}")


def _ensure_dir(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# --------------------------------------------------------------- commands


def cmd_gen_data(cfg: PipelineConfig) -> dict:
    data = make_dataset(cfg.kind, cfg.seed, cfg.count, cfg.split)
    save_dataset(data, _ensure_dir(cfg.out))
    return {"path": str(cfg.out), "kind": data.kind, "seed": data.seed, "split": data.split,
            "count": len(data), "inputs_shape": list(data.inputs.shape), "targets_shape": list(data.targets.shape)}


def cmd_init_model(cfg: PipelineConfig) -> dict:
    model = make_toy_model(cfg.kind, cfg.seed)
    save_model(model, _ensure_dir(cfg.out))
    return {"path": str(cfg.out), "kind": model.kind, "layers": {n: list(d) for n, d in model.dims().items()}}


def cmd_train_ranks(cfg: PipelineConfig) -> dict:
    model, _ = _model(cfg)
    data = _data(cfg, model)
    target, hyper = cfg.target, cfg.hyper
    try:
        result = train_ranks(model, data, target, hyper)
    except TrainingDiverged as exc:
        exc.last_good.save(_ensure_dir(cfg.out))
        raise
    alloc = result.alloc if cfg.no_round else round_ranks(result.alloc, target, hyper.counting)
    alloc.save(_ensure_dir(cfg.out))
    if cfg.trajectory:
        result.write_trajectory(_ensure_dir(cfg.trajectory))
    if cfg.figure:
        from .report import plot_rank_trajectory

        plot_rank_trajectory(result, cfg.figure)
    return {
        "alloc_path": str(cfg.out),
        "target_ratio": target.r_target,
        "continuous_ratio": result.final_ratio,
        "ratio": model_ratio(alloc, hyper.counting),
        "rounded": not cfg.no_round,
        "ranks": {k: float(v) for k, v in alloc.ks.items()},
        "final_loss": result.epoch_loss[-1],
        "final_task_loss": result.epoch_task_loss[-1],
    }


def cmd_update_weights(cfg: PipelineConfig) -> dict:
    model, _ = _model(cfg)
    alloc = _alloc(cfg)
    _check_alloc(model, alloc)
    if not alloc.is_integer():
        raise DataError("update-weights needs an integer allocation (run train-ranks without --no-round)")
    data = _data(cfg, model)
    updated, records = update_all_weights(model, data, alloc)
    save_model(updated, _ensure_dir(cfg.out), alloc)
    if cfg.records:
        write_update_csv(_ensure_dir(cfg.records), records)
    return {
        "path": str(cfg.out),
        "ratio": model_ratio(alloc),
        "layers": {r.layer: {"k": r.k, "samples": r.samples, "oracle_fraction": r.oracle_fraction} for r in records},
        "task_loss": evaluate(updated, data)["task_loss"],
    }


def cmd_pack(cfg: PipelineConfig) -> dict:
    model, stored = _model(cfg)
    alloc = _alloc(cfg, stored)
    if alloc is None:
        raise DataError("no allocation given and none stored in the model")
    _check_alloc(model, alloc)
    packed = pack_model(model, alloc)
    save_model(packed, _ensure_dir(cfg.out), alloc)
    layers = {}
    for name, p in packed_layers(packed).items():
        mse, mae = quant_error_report(UpdatedWeight(model.layer(name).weight, p.k))
        layers[name] = storage_report(p) | {"k": p.k, "mse": mse, "mae": mae, "packed_ratio": packed_ratio(p)}
    return {"path": str(cfg.out), "ratio": model_ratio(alloc), "layers": layers}


def cmd_eval(cfg: PipelineConfig) -> dict:
    model, stored = _model(cfg)
    data = _data(cfg, model)
    alloc = _alloc(cfg, stored)
    mode = cfg.mode
    if alloc is not None:
        _check_alloc(model, alloc)
    kwargs = {"alloc": alloc, "beta": cfg.beta} if mode in ("smooth", "hard", "weight") else {}
    if mode in ("smooth", "hard", "weight") and alloc is None:
        raise DataError(f"mode {mode!r} needs --alloc")
    loss = mode_loss(model, data, mode, **kwargs)
    out = {"mode": mode, "kind": data.kind, "split": data.split, "samples": len(data), "task_loss": loss}
    if data.kind == "char_lm":
        out["perplexity"] = float(np.exp(loss))
    return out


def cmd_gradcheck(cfg: PipelineConfig) -> dict:
    count = cfg.matrices or (20 if cfg.degenerate else 100)
    cert = certify_gradients(count, cfg.seed, bool(cfg.degenerate), cfg.backward, cfg.tolerance)
    if not cert.passed:
        raise NumericalError(f"gradient certification failed: {json.dumps(cert.to_dict())}")
    return cert.to_dict()


def cmd_compare_trunc(cfg: PipelineConfig) -> dict:
    model, _ = _model(cfg)
    data = _data(cfg, model)
    reports = {}
    for r in cfg.ratios:
        alloc = round_ranks(RankAllocation.uniform(model.dims(), r), r)
        reports[r] = compare_truncation_modes(model, data, alloc, (0.25, 0.5, 0.75) if r == cfg.ratios[0] else ())
    first = reports[cfg.ratios[0]]
    if cfg.csv or cfg.sweep_csv or cfg.figure:
        from .report import plot_truncation_modes, write_sweep_csv, write_truncation_csv

        if cfg.csv:
            write_truncation_csv(_ensure_dir(cfg.csv), reports)
        if cfg.sweep_csv:
            write_sweep_csv(_ensure_dir(cfg.sweep_csv), first)
        if cfg.figure:
            plot_truncation_modes(reports, cfg.figure)
    return {
        "ratios": {repr(float(r)): reports[r].to_dict() | {"sweep": None} for r in cfg.ratios},
        "sweep": [vars(p) | {"ok": p.ok} for p in first.sweep],
        "activation_wins": all(rep.activation_loss < rep.weight_loss for rep in reports.values()),
        "sweep_ok": all(p.ok for p in first.sweep),
    }


def cmd_pipeline(cfg: PipelineConfig) -> dict:
    from .report import plot_rank_trajectory, plot_remap, write_remap_csv

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = make_toy_model(cfg.kind, cfg.seed)
    train = _data(cfg, model, "train")
    held = make_dataset(cfg.kind, cfg.seed, cfg.count, cfg.eval_split)
    target, hyper = cfg.target, cfg.hyper
    result = train_ranks(model, train, target, hyper)
    alloc = round_ranks(result.alloc, target, hyper.counting)
    res = compress(model, train, alloc, held, target.r_target, result)

    alloc.save(out / "alloc.json")
    result.write_trajectory(out / "trajectory.csv")
    plot_rank_trajectory(result, out / "trajectory.png")
    write_update_csv(out / "updates.csv", res.records)
    save_model(res.model, out / "model.actsvd", alloc)
    rows = remap_comparison(model, train, cfg.ratios, held)
    write_remap_csv(out / "remap.csv", rows)
    plot_remap(rows, out / "remap.png")

    summary = res.summary() | {
        "continuous_ratio": result.final_ratio,
        "eval_split": held.split,
        "remap": [{"ratio": r.ratio, "remapped_loss": r.remapped_loss, "traditional_loss": r.traditional_loss, "ok": r.ok} for r in rows],
        "artifacts": sorted(p.name for p in out.iterdir() if p.name != "summary.json") + ["summary.json"],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


COMMANDS = {
    "gen-data": cmd_gen_data,
    "init-model": cmd_init_model,
    "train-ranks": cmd_train_ranks,
    "update-weights": cmd_update_weights,
    "pack": cmd_pack,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "compare-trunc": cmd_compare_trunc,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=getattr(args, "log_level", None) or "INFO", format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = resolve(args)
        logging.getLogger().setLevel(cfg.log_level or "INFO")
        summary = COMMANDS[args.command](cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (NumericalError, SvdError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, ContainerError, PackError, ModeError, WeightUpdateError, FileNotFoundError, KeyError, ValueError) as exc:
        log.error("data/model error: %s", exc)
        return EXIT_DATA
    sys.stdout.write(json.dumps({"command": args.command} | summary, sort_keys=True) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
