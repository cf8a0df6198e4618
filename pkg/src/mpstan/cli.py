"""Command-line entry point: ``mpstan <subcommand> [options]``.

Every subcommand reads the shared run config (``--config``), applies flag
overrides, and writes its artifacts under ``--out``.  Log verbosity comes from
the ``MPSTAN_LOG_LEVEL`` environment variable (default WARNING).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .checkpoint import Checkpoint
from .config import RunConfig, load_config
from .data_pipeline import EpidemicDataset, export_cases, ingest, load_snapshot, save_snapshot
from .epi_dynamics import CompartmentState, EpiParams, rollout
from .errors import ConfigurationError, InputError, MPSTANError
from .evaluation import emit_series, evaluate, evaluate_sir_baseline, forecast_future
from .geo_graph import PatchGraph, build_graph, read_distance_matrix, write_patch_meta
from .training import ABLATION_ORDER, TrainConfig, train

log = logging.getLogger("mpstan")

LOG_ENV = "MPSTAN_LOG_LEVEL"
METRIC_COLUMNS = ("mae", "rmse", "mape", "pcc", "ccc")


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(value: Optional[str], what: str, flag: str) -> str:
    if value is None:
        raise ConfigurationError(f"{what} is required (pass {flag} or set it in the config file)")
    return value


def _load_dataset(cfg: RunConfig) -> EpidemicDataset:
    return load_snapshot(_require(cfg.paths.data, "a dataset snapshot", "--data"))


def _load_checkpoint(cfg: RunConfig) -> Checkpoint:
    return Checkpoint.load(_require(cfg.paths.checkpoint, "a checkpoint", "--checkpoint"))


def _graph_for(dataset: EpidemicDataset, cfg: RunConfig) -> PatchGraph:
    override = None
    if cfg.paths.distances is not None:
        override = read_distance_matrix(cfg.paths.distances, dataset.patch_ids)
    return build_graph(list(dataset.patches), cfg.gravity, override)


def _train_config(cfg: RunConfig, ablation: Optional[str] = None) -> TrainConfig:
    if not cfg.seed_given:
        raise ConfigurationError("a seed is required for training (pass --seed or set train.seed)")
    d = cfg.train.to_dict()
    if ablation is not None:
        d["ablation"] = ablation
    return TrainConfig(**d)


def _history_files(out: Path, result) -> None:
    # wall times vary run to run; keep them out of the reproducible history
    _write_json(out / "history.json", result.history.to_dict())
    _write_json(out / "timing.json", {"wall_time": result.history.wall_time})


# subcommands


def cmd_ingest(cfg: RunConfig, out: Path) -> dict:
    cases = _require(cfg.paths.cases, "a cases CSV", "--cases")
    meta = _require(cfg.paths.meta, "a patch metadata CSV", "--meta")
    ds = ingest(cases, meta)
    out.mkdir(parents=True, exist_ok=True)
    save_snapshot(ds, out / "snapshot.json")
    summary = ds.summary()
    _write_json(out / "summary.json", summary)
    print(f"{summary['name']}: {summary['n_patches']} patches x {summary['n_days']} days "
          f"({summary['start']} .. {summary['end']}), hash {summary['hash'][:12]}")
    return summary


def cmd_train(cfg: RunConfig, out: Path) -> Checkpoint:
    ds = _load_dataset(cfg)
    tc = _train_config(cfg)
    graph = _graph_for(ds, cfg)
    _write_json(out / "config.json", cfg.to_dict())
    print(json.dumps({"t_in": tc.t_in, "t_out": tc.t_out, **cfg.to_dict()["model"],
                      "epochs": tc.epochs, "learning_rate": tc.learning_rate,
                      "seed": tc.seed, "ablation": tc.ablation}, sort_keys=True))
    result = train(ds, graph, tc, cfg.dims)
    result.checkpoint.save(out / "checkpoint.json")
    _history_files(out, result)
    print(f"best epoch {result.history.best_epoch}, val MAE {min(result.history.val_mae):.3f}")
    return result.checkpoint


def cmd_forecast(cfg: RunConfig, out: Path):
    ds = _load_dataset(cfg)
    ckpt = _load_checkpoint(cfg)
    fc = forecast_future(ckpt, ds)
    out.mkdir(parents=True, exist_ok=True)
    fc.write_csv(out / "forecast.csv")
    print(f"wrote {len(fc.patch_ids) * len(fc.dates)} forecast rows to {out / 'forecast.csv'}")
    return fc


def cmd_evaluate(cfg: RunConfig, out: Path):
    ds = _load_dataset(cfg)
    ev = cfg.evaluate
    if ev.baseline == "sir":
        report = evaluate_sir_baseline(ds, ev.split, cfg.train.t_in, cfg.train.t_out, cfg.train.split)
    else:
        ckpt = _load_checkpoint(cfg)
        report = evaluate(ckpt, ds, ev.split)
        if ev.series:
            emit_series(ckpt, ds, ev.series, ckpt.t_out, out / "series", ev.split, report=report)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    m = report.metrics
    print(f"{report.ablation} {ev.split}: " + "  ".join(f"{k.upper()}={_fmt(getattr(m, k))}" for k in METRIC_COLUMNS))
    return report


def cmd_simulate(cfg: RunConfig, out: Path):
    path = _require(cfg.paths.scenario, "a scenario JSON", "--scenario")
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read scenario {path}: {exc}") from exc
    traj, ids = simulate_scenario(doc)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "trajectory.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "patch_id", "S", "I", "R"])
        for step, st in enumerate(traj.states):
            for i, pid in enumerate(ids):
                writer.writerow([step, pid, repr(float(st.S[i])), repr(float(st.I[i])), repr(float(st.R[i]))])
    print(f"simulated {len(traj.states) - 1} steps for {len(ids)} patches ({traj.clamps} clamp events)")
    return traj


def simulate_scenario(doc: dict):
    """Roll out MP-SIR from a scenario document.

    Keys: ``patch_ids``, ``adjacency`` (N x N, 0/1), ``population``,
    ``state`` ({S, I, R} lists), ``params`` ({beta, gamma, d_s, d_i, d_r},
    scalars or lists), ``horizon`` and optional ``use_mobility`` (default true).
    """
    allowed = {"patch_ids", "adjacency", "population", "state", "params", "horizon", "use_mobility"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown scenario key(s): {', '.join(unknown)}")
    try:
        pop = np.asarray(doc["population"], dtype=float)
        n = pop.shape[0]
        ids = tuple(doc.get("patch_ids") or (str(i) for i in range(n)))
        graph = PatchGraph.from_adjacency(doc["adjacency"], ids)
        state = doc["state"]
        x0 = CompartmentState(
            S=np.asarray(state["S"], dtype=float), I=np.asarray(state["I"], dtype=float),
            R=np.asarray(state["R"], dtype=float), population=pop,
        )
        p = doc["params"]
        params = EpiParams(*(np.broadcast_to(np.asarray(p.get(k, 0.0), dtype=float), (n,)).copy()
                             for k in ("beta", "gamma", "d_s", "d_i", "d_r")))
        horizon = int(doc["horizon"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, MPSTANError):
            raise
        raise InputError(f"malformed scenario: {exc!r}") from exc
    if graph.n != n or any(np.shape(v) != (n,) for v in (x0.S, x0.I, x0.R)):
        raise InputError("scenario arrays disagree on the number of patches")
    return rollout(x0, graph, params, horizon, use_mobility=bool(doc.get("use_mobility", True))), ids


def cmd_synthetic(cfg: RunConfig, out: Path, n_patches: int, n_days: int, noise: float):
    from .synthetic import make_synthetic

    seed = cfg.train.seed
    truth = make_synthetic(n_patches=n_patches, n_days=n_days, noise=noise, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    save_snapshot(truth.dataset, out / "snapshot.json")
    export_cases(truth.dataset, out / "cases.csv")
    write_patch_meta(truth.dataset.patches, out / "meta.csv")
    _write_json(out / "truth.json", {k: getattr(truth.params, k).tolist() for k in ("beta", "gamma", "d_s", "d_i", "d_r")})
    print(f"synthetic dataset {truth.dataset.name}: {n_patches} patches x {n_days} days -> {out}")
    return truth


def cmd_ablate(cfg: RunConfig, out: Path) -> list[dict]:
    ds = _load_dataset(cfg)
    graph = _graph_for(ds, cfg)
    variants = cfg.ablate.variants or list(ABLATION_ORDER)
    order = [v for v in ABLATION_ORDER if v in variants]
    ds_hash = ds.content_hash()
    rows = []
    for variant in order:
        tc = _train_config(cfg, variant)
        log.info("ablation: training %s", variant)
        result = train(ds, graph, tc, cfg.dims)
        vdir = out / variant
        vdir.mkdir(parents=True, exist_ok=True)
        result.checkpoint.save(vdir / "checkpoint.json")
        _history_files(vdir, result)
        # score the checkpoint as saved, exactly as `evaluate` would
        report = evaluate(Checkpoint.load(vdir / "checkpoint.json"), ds, cfg.evaluate.split)
        report.save(vdir / "report.json")
        if report.dataset_hash != ds_hash:
            raise MPSTANError(f"variant {variant} saw a different dataset")
        rows.append({"variant": variant, "dataset_hash": ds_hash, **{k: getattr(report.metrics, k) for k in METRIC_COLUMNS}})
        print(f"{variant:14s} " + "  ".join(f"{k.upper()}={_fmt(rows[-1][k])}" for k in METRIC_COLUMNS), flush=True)
    _write_json(out / "ablation.json", rows)
    with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", *METRIC_COLUMNS, "dataset_hash"])
        for r in rows:
            writer.writerow([r["variant"], *("" if r[k] is None else repr(r[k]) for k in METRIC_COLUMNS), r["dataset_hash"]])
    return rows


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4g}"


# argument parsing


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="run config JSON")
    parser.add_argument("--seed", type=int, default=default, help="random seed (required for train/ablate)")
    parser.add_argument("--out", default=default, help="output directory")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset snapshot JSON")
    p.add_argument("--distances", help="optional patch distance matrix CSV")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--t-in", type=int)
    p.add_argument("--t-out", type=int)
    p.add_argument("--d-gru", type=int)
    p.add_argument("--d-gat", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--top-e", type=int)
    p.add_argument("--gravity-r", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpstan", description="Metapopulation-informed spatio-temporal epidemic forecasting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate case CSVs and write a dataset snapshot")
    p.add_argument("--cases", help="cases CSV: date,patch_id,active,recovered,susceptible")
    p.add_argument("--meta", help="patch metadata CSV: patch_id,name,population,lat,lon")

    p = sub.add_parser("train", parents=[common], help="train one model and write a checkpoint")
    _train_flags(p)
    p.add_argument("--ablation", help="variant name (default full)")

    p = sub.add_parser("forecast", parents=[common], help="forecast the days after the dataset end")
    p.add_argument("--data")
    p.add_argument("--checkpoint")

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--baseline", choices=("sir",), help="score the per-window SIR fit instead of a checkpoint")
    p.add_argument("--series", help="comma-separated patch ids to export plot series for")
    p.add_argument("--t-in", type=int, help="input length for the SIR baseline")
    p.add_argument("--t-out", type=int, help="horizon for the SIR baseline")

    p = sub.add_parser("simulate", parents=[common], help="roll out MP-SIR, or generate a synthetic dataset")
    p.add_argument("--scenario", help="scenario JSON (see README)")
    p.add_argument("--synthetic", action="store_true", help="write a synthetic MP-SIR dataset instead")
    p.add_argument("--patches", type=int, default=10)
    p.add_argument("--days", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.01)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate every ablation variant")
    _train_flags(p)
    p.add_argument("--variants", help="comma-separated subset of variants")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    a = vars(args)
    mapping = {
        "seed": "train.seed", "out": "paths.out", "data": "paths.data", "checkpoint": "paths.checkpoint",
        "cases": "paths.cases", "meta": "paths.meta", "distances": "paths.distances", "scenario": "paths.scenario",
        "epochs": "train.epochs", "learning_rate": "train.learning_rate", "t_in": "train.t_in", "t_out": "train.t_out",
        "d_gru": "model.d_gru", "d_gat": "model.d_gat", "heads": "model.heads",
        "top_e": "gravity.top_e", "gravity_r": "gravity.r",
        "split": "evaluate.split", "baseline": "evaluate.baseline", "ablation": "ablation",
    }
    ov = {key: a.get(name) for name, key in mapping.items()}
    if a.get("series"):
        ov["evaluate.series"] = [s for s in a["series"].split(",") if s]
    if a.get("variants"):
        ov["ablate.variants"] = [s for s in a["variants"].split(",") if s]
    return ov


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        out = Path(cfg.paths.out)
        cmd = args.command
        if cmd == "ingest":
            cmd_ingest(cfg, out)
        elif cmd == "train":
            cmd_train(cfg, out)
        elif cmd == "forecast":
            cmd_forecast(cfg, out)
        elif cmd == "evaluate":
            cmd_evaluate(cfg, out)
        elif cmd == "simulate":
            if args.synthetic:
                cmd_synthetic(cfg, out, args.patches, args.days, args.noise)
            else:
                cmd_simulate(cfg, out)
        elif cmd == "ablate":
            cmd_ablate(cfg, out)
    except (MPSTANError, OSError) as exc:
        print(f"mpstan {args.command}: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (InputError, ConfigurationError)) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
