"""Command-line pipeline driver.

Subcommands cover the full workflow on synthetic data: simulate,
filter (exact-model predictions), train, predict, smooth, validate,
estimate (drift/diffusion parameter extraction) and tomography.

Options can come from a JSON config file ({"sim": {...}, "train":
{...}}) with command-line flags taking precedence; the environment
variable QTRAJ_SEED supplies a default seed. Every command writes a
<output>.manifest.json echoing the resolved configuration and seed.
Exit codes: 0 success, 1 configuration error, 2 I/O or format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, data, infer, nn, sim
from .errors import ConfigError, DataError, NumericError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _env_seed() -> int:
    raw = os.environ.get("QTRAJ_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"QTRAJ_SEED must be an integer, got {raw!r}") from None


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in config file {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(cfg) - {"sim", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


_SIM_FLAGS = ("rabi_freq", "meas_dephasing", "quantum_efficiency",
              "record_dt", "integration_substeps", "seed")
_TRAIN_FLAGS = ("epochs", "batch_size", "lr_start", "lr_end", "dropout_start",
                "dropout_end", "clip_norm", "hidden_size", "activation", "seed")


def _sim_config(args, file_cfg: dict) -> sim.SimConfig:
    d = dict(file_cfg.get("sim", {}))
    d.setdefault("seed", _env_seed())
    for name in _SIM_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            d[name] = value
    grid = getattr(args, "duration_grid", None)
    if grid is not None:
        try:
            d["duration_grid"] = [float(t) for t in grid.split(",")]
        except ValueError:
            raise ConfigError(f"bad duration grid {grid!r}") from None
    return sim.SimConfig.from_dict(d)


def _train_config(args, file_cfg: dict) -> nn.TrainConfig:
    d = dict(file_cfg.get("train", {}))
    d.setdefault("seed", _env_seed())
    for name in _TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            d[name] = value
    return nn.TrainConfig.from_dict(d)


def _write_manifest(out_path, command: str, payload: dict) -> None:
    manifest = {"command": command, **payload}
    with open(f"{out_path}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path, obj: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _auto_workers(value) -> int:
    if value in (None, "auto"):
        return max(1, min(os.cpu_count() or 1, 8))
    n = int(value)
    if n < 1:
        raise ConfigError("workers must be >= 1")
    return n


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _sim_config(args, _load_config_file(args.config))
    workers = _auto_workers(args.workers)
    dataset = sim.simulate_dataset(cfg, args.n_traces, workers=workers)
    data.write_dataset(args.out, dataset)
    _write_manifest(args.out, "simulate", {
        "config": cfg.to_dict(), "seed": cfg.seed, "n_traces": args.n_traces,
    })
    print(f"wrote {len(dataset)} records to {args.out}")
    return 0


def cmd_filter(args) -> int:
    dataset = data.read_dataset(args.data)
    if args.config is not None:
        cfg = sim.SimConfig.from_dict(_load_config_file(args.config).get("sim", {}))
    else:
        cfg = sim.SimConfig.from_dict(dataset.manifest.get("config") or {})
    series = sim.filter_dataset(dataset, cfg)
    infer.write_predictions_csv(args.out, series, kind="p_forward")
    _write_manifest(args.out, "filter", {
        "config": cfg.to_dict(), "seed": cfg.seed, "data": str(args.data),
    })
    print(f"filtered {len(series)} records into {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args, _load_config_file(args.config))
    dataset = data.read_dataset(args.data)
    train_raw, eval_raw = data.split(dataset, args.eval_fraction,
                                     args.split_seed if args.split_seed is not None
                                     else cfg.seed)
    stats = data.compute_norm_stats(train_raw)
    train_set = data.normalize(train_raw, stats)
    eval_set = data.normalize(eval_raw, stats)
    model, history = nn.train(train_set, eval_set, cfg, args.direction)
    nn.save_model(args.model_out, model)
    if args.history_out:
        import pandas as pd

        pd.DataFrame(history).to_csv(args.history_out, index=False,
                                     float_format="%.17g")
    _write_manifest(args.model_out, "train", {
        "config": cfg.to_dict(), "seed": cfg.seed, "direction": args.direction,
        "data": str(args.data), "eval_fraction": args.eval_fraction,
        "normalization": {"mean": stats[0], "std": stats[1]},
    })
    final = history[-1]
    print(f"trained {args.direction} model: eval loss {final['eval_loss']:.4f} "
          f"after {len(history)} epochs -> {args.model_out}")
    return 0


def cmd_predict(args) -> int:
    model = nn.load_model(args.model)
    dataset = data.read_dataset(args.data)
    series = infer.predict_dataset(model, dataset,
                                   unknown_conditioning=args.unknown_conditioning)
    kind = "p_forward" if model.direction == "forward" else "p_backward"
    infer.write_predictions_csv(args.out, series, kind=kind)
    _write_manifest(args.out, "predict", {
        "model": str(args.model), "data": str(args.data),
        "direction": model.direction,
        "unknown_conditioning": bool(args.unknown_conditioning),
    })
    print(f"wrote {kind} predictions for {len(series)} records to {args.out}")
    return 0


def cmd_smooth(args) -> int:
    fwd = infer.read_predictions_csv(args.forward)
    bwd = infer.read_predictions_csv(args.backward)
    ids_f, series_f = infer.series_from_frame(fwd, "p_forward")
    ids_b, series_b = infer.series_from_frame(bwd, "p_backward")
    if len(ids_f) != len(ids_b) or not np.array_equal(ids_f, ids_b):
        raise DataError("forward and backward CSVs cover different records")
    frame = infer.predictions_frame(series_f, ids_f, "p_forward")
    frame["p_backward"] = infer.predictions_frame(series_b, ids_b,
                                                  "p_backward")["p_backward"]
    smoothed = [infer.smooth(f, b) for f, b in zip(series_f, series_b)]
    frame["p_smoothed"] = infer.predictions_frame(smoothed, ids_f,
                                                  "p_smoothed")["p_smoothed"]
    frame.to_csv(args.out, index=False, float_format="%.17g")
    _write_manifest(args.out, "smooth", {
        "forward": str(args.forward), "backward": str(args.backward),
    })
    print(f"smoothed {len(smoothed)} records into {args.out}")
    return 0


def cmd_validate(args) -> int:
    frame = infer.read_predictions_csv(args.predictions)
    dataset = data.read_dataset(args.data)
    column = args.column
    if column == "auto":
        for cand in ("p_forward", "p_backward"):
            if not frame[cand].isna().all():
                column = cand
                break
        else:
            raise DataError("predictions CSV has neither forward nor backward values")
    ids, series = infer.series_from_frame(frame, column)
    if len(series) != len(dataset):
        raise DataError(f"{len(series)} prediction series vs "
                        f"{len(dataset)} dataset records")
    direction = "forward" if column == "p_forward" else "backward"
    p, y, axes = analysis.final_step_table(series, dataset.subset(ids), direction)
    report = analysis.calibrate(p, y, axes, delta=args.delta)
    _write_json(args.out_json, report.to_dict())
    report.bins_frame().to_csv(args.out_csv, index=False, float_format="%.17g")
    _write_manifest(args.out_json, "validate", {
        "predictions": str(args.predictions), "data": str(args.data),
        "delta": args.delta, "column": column,
    })
    eps = ", ".join(f"{k}={v:.2e}" for k, v in report.epsilon.items())
    print(f"calibration error per axis: {eps}")
    return 0


def cmd_estimate(args) -> int:
    frame = infer.read_predictions_csv(args.predictions)
    column = args.column
    if column == "auto":
        for cand in ("p_forward", "p_smoothed", "p_backward"):
            if not frame[cand].isna().all():
                column = cand
                break
        else:
            raise DataError("predictions CSV holds no values")
    _, series = infer.series_from_frame(frame, column)
    drift = analysis.drift_map(series, args.grid_size, args.min_count)
    diffusion = analysis.diffusion_map(series, args.grid_size, args.min_count)
    params = analysis.fit_params(drift, diffusion)
    _write_json(args.out_json, params.to_dict())
    drift.to_frame().to_csv(args.out_csv_drift, index=False, float_format="%.17g")
    diffusion.to_frame().to_csv(args.out_csv_diffusion, index=False,
                                float_format="%.17g")
    _write_manifest(args.out_json, "estimate", {
        "predictions": str(args.predictions), "column": column,
        "grid_size": args.grid_size, "min_count": args.min_count,
    })
    print(f"rabi={params.rabi_freq:.4f} rad/us, gamma_phi={params.gamma_phi:.4f}, "
          f"gamma_m={params.gamma_m:.4f}, eta={params.eta:.4f}")
    return 0


def cmd_tomography(args) -> int:
    model = nn.load_model(args.model)
    dataset = data.read_dataset(args.data)
    result = analysis.tomography(model, dataset)
    ci = analysis.bootstrap_ci(result.predictions, n_resamples=args.resamples,
                               seed=args.seed if args.seed is not None
                               else _env_seed())
    cardinal = analysis.nearest_cardinal(result.bloch)
    out = result.to_dict()
    out["ci95"] = {
        "xyz"[a]: [float(ci[a, 0]), float(ci[a, 1])] for a in range(3)
    }
    out["nearest_cardinal"] = {"y": cardinal.y, "axis": cardinal.axis_name}
    out["resamples"] = args.resamples
    _write_json(args.out, out)
    _write_manifest(args.out, "tomography", {
        "model": str(args.model), "data": str(args.data),
        "resamples": args.resamples,
        "seed": args.seed if args.seed is not None else _env_seed(),
    })
    bloch = ", ".join(f"{c}={v:+.3f}" for c, v in zip("xyz", result.bloch))
    print(f"initial state: {bloch} (nearest cardinal: "
          f"{'+' if cardinal.y else '-'}{cardinal.axis_name})")
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qtraj", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_sim_flags(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--rabi-freq", dest="rabi_freq", type=float)
        p.add_argument("--meas-dephasing", dest="meas_dephasing", type=float)
        p.add_argument("--quantum-efficiency", dest="quantum_efficiency", type=float)
        p.add_argument("--record-dt", dest="record_dt", type=float)
        p.add_argument("--integration-substeps", dest="integration_substeps", type=int)
        p.add_argument("--duration-grid", dest="duration_grid",
                       help="comma-separated durations in us")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="generate a synthetic trajectory dataset")
    add_sim_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-traces", dest="n_traces", type=int, required=True)
    p.add_argument("--workers", default=None, help="process count or 'auto'")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("filter", help="exact-model predictions for a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="override the dataset's embedded config")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train", help="train a forward or backward model")
    p.add_argument("--data", required=True)
    p.add_argument("--direction", choices=("forward", "backward"), required=True)
    p.add_argument("--model-out", dest="model_out", required=True)
    p.add_argument("--history-out", dest="history_out")
    p.add_argument("--eval-fraction", dest="eval_fraction", type=float, default=0.2)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-start", dest="lr_start", type=float)
    p.add_argument("--lr-end", dest="lr_end", type=float)
    p.add_argument("--dropout-start", dest="dropout_start", type=float)
    p.add_argument("--dropout-end", dest="dropout_end", type=float)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--hidden-size", dest="hidden_size", type=int)
    p.add_argument("--activation", choices=("tanh", "relu"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run a trained model over a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--unknown-conditioning", dest="unknown_conditioning",
                   action="store_true",
                   help="feed the uniform label mixture instead of record labels")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("smooth", help="combine forward and backward predictions")
    p.add_argument("--forward", required=True)
    p.add_argument("--backward", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("validate", help="calibration report for predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--column", default="auto",
                   choices=("auto", "p_forward", "p_backward"))
    p.add_argument("--out-json", dest="out_json", required=True)
    p.add_argument("--out-csv", dest="out_csv", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("estimate", help="drift/diffusion physical parameters")
    p.add_argument("--predictions", required=True)
    p.add_argument("--column", default="auto",
                   choices=("auto", "p_forward", "p_backward", "p_smoothed"))
    p.add_argument("--grid-size", dest="grid_size", type=int, default=20)
    p.add_argument("--min-count", dest="min_count", type=int, default=50)
    p.add_argument("--out-json", dest="out_json", required=True)
    p.add_argument("--out-csv-drift", dest="out_csv_drift", required=True)
    p.add_argument("--out-csv-diffusion", dest="out_csv_diffusion", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("tomography", help="initial-state estimate with bootstrap CI")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tomography)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
