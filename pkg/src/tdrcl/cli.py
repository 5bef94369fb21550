"""Command line: ``synth | mc | train | eval | sweep``.

Each command reads an optional YAML config, applies flag overrides (flags
win), writes its results as CSV and JSON into ``--out`` and copies the
effective config, the seed list and the package version next to them, so a
run can be repeated from its own output directory::

    tdrcl synth --out runs/t1
    tdrcl synth --config runs/t1/run_config.yaml --out runs/t1-again

The worker count for seed-parallel commands comes from ``TDRCL_WORKERS``
(default 1).  Results are always ordered by (seed, variant, ...) regardless of
completion order.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .core import ConfigError, PairSpace
from .datasets import FileFormat, RatingFileSpec, SplitDataset, load_matrix, load_triples, make_split, synthetic_split
from .mclab import MCScenario, MCWorld, check_sweep, run_bias_variance, small_propensity_sweep
from .models import load_bundle, save_bundle
from .synthgen import (
    ALL_SCENARIOS,
    MFCompletionConfig,
    SynthConfig,
    run_semi_synthetic,
    summarize_re,
    world_from_lowrank,
    world_from_triples,
)
from .training import TrainData, TrainerConfig, Variant, evaluate_bundle, prepare, train_variant, write_history

log = logging.getLogger("tdrcl")

WORKERS_ENV = "TDRCL_WORKERS"

DEFAULTS: Dict[str, dict] = {
    "synth": {"n_users": 300, "n_items": 400, "ratings_path": None, "oracle": False,
              "synth": {}},
    "mc": {"n_users": 100, "n_items": 100, "p_min": 0.05, "replicates": 2000, "design": "random",
           "imputation_shift": 0.3, "sweep_grid": [0.4, 0.2, 0.1], "sweep_replicates": 1000,
           "sweep_users": 50, "sweep_items": 50, "z": 3.0},
    "train": {"dataset": {"kind": "synthetic"}, "variants": ["DR_JL", "DR_CL", "TDR_CL"],
              "seeds": [0], "trainer": {}, "save_checkpoints": True},
    "eval": {"dataset": {"kind": "synthetic"}, "checkpoint": None},
    "sweep": {"dataset": {"kind": "synthetic"}, "variants": ["DR_JL", "DR_CL", "TDR_CL"],
              "seeds": [0, 1, 2, 3, 4], "thresholds": [0.05, 0.10, 0.15, 0.20], "trainer": {}},
}


# --------------------------------------------------------------------------
# Config handling


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(command: str, path: Optional[str]) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))  # deep copy
    if path:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data.pop("command", None)
        unknown = set(data) - set(cfg) - {"seed", "version"}
        if unknown:
            raise ConfigError(f"{path}: unknown keys for '{command}': {sorted(unknown)}")
        cfg = _merge(cfg, data)
    return cfg


def _build(cls, data: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**data)


def synth_config(cfg: dict, seed: int) -> SynthConfig:
    s = dict(cfg.get("synth") or {})
    mf = s.pop("mf", {}) or {}
    s["seed"] = seed
    return _build(SynthConfig, {**s, "mf": _build(MFCompletionConfig, mf, "synth.mf")}, "synth")


def trainer_config(cfg: dict, seed: int, variant: str, clip: Optional[float] = None) -> TrainerConfig:
    t = dict(cfg.get("trainer") or {})
    t.update({"seed": seed, "variant": variant})
    if clip is not None:
        t["clip_threshold"] = clip
    return _build(TrainerConfig, t, "trainer")


def resolve_defaults(command: str, cfg: dict, seed: int) -> None:
    """Expand the nested dataclass sections so the copied config pins every default."""
    if command == "synth":
        d = dataclasses.asdict(synth_config(cfg, seed))
        d.pop("seed")
        cfg["synth"] = _jsonable(d)
    elif command in ("train", "sweep"):
        d = dataclasses.asdict(trainer_config(cfg, seed, "DR_CL"))
        for k in ("seed", "variant"):
            d.pop(k)
        cfg["trainer"] = _jsonable(d)


def load_dataset(spec: dict, seed: int = 0) -> SplitDataset:
    spec = dict(spec or {})
    kind = spec.pop("kind", "synthetic")
    if kind == "synthetic":
        return synthetic_split(seed=spec.pop("seed", seed), **spec)
    if kind == "archive":
        return SplitDataset.load(spec["path"])
    val_fraction = spec.get("val_fraction", 0.1)
    split_seed = spec.get("split_seed", 0)
    if kind == "matrix":  # Coat layout: train and test ASCII matrices
        fs = RatingFileSpec(FileFormat.ASCII_MATRIX, scale=spec.get("scale", 5))
        mnar, mar = load_matrix(spec["train"], fs), load_matrix(spec["test"], fs)
        return make_split(mnar, mar, val_fraction, split_seed, scale=fs.scale)
    if kind == "triples":
        fs = RatingFileSpec(FileFormat.DELIMITED_TRIPLES, spec.get("delimiter"), spec.get("scale", 5))
        mnar, ids, _ = load_triples(spec["train"], fs)
        mar, ids, _ = load_triples(spec["test"], fs, ids)
        space = PairSpace(len(ids.users), len(ids.items))
        split = make_split(mnar, mar, val_fraction, split_seed, space, fs.scale)
        split.id_map = ids
        return split
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer") from None


def _map(fn, jobs: Sequence):
    n = _workers()
    if n == 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))  # map preserves submission order


# --------------------------------------------------------------------------
# Output


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    return "" if v is None else v


def write_table(rows: List[dict], out: Path, stem: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    fields: List[str] = []
    for r in rows:
        for k in r:
            if k not in fields:
                fields.append(k)
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k)) for k in fields})
    with open(out / f"{stem}.json", "w") as fh:
        json.dump(_jsonable(rows), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def record_run(out: Path, command: str, cfg: dict, seeds: Sequence[int]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run_config.yaml", "w") as fh:
        yaml.safe_dump(_jsonable({"command": command, **cfg}), fh, sort_keys=True)
    with open(out / "seeds.json", "w") as fh:
        json.dump([int(s) for s in seeds], fh)
        fh.write("\n")
    (out / "VERSION").write_text(__version__ + "\n")


# --------------------------------------------------------------------------
# Commands


def run_synth(cfg: dict, seed: int):
    """Semi-synthetic RE experiment: ``(per-replicate rows, summary rows)``."""
    sc = synth_config(cfg, seed)
    if cfg.get("ratings_path"):
        tr, ids, _ = load_triples(cfg["ratings_path"])
        world = world_from_triples(tr.users, tr.items, tr.ratings, PairSpace(len(ids.users), len(ids.items)), sc)
    else:
        world = world_from_lowrank(cfg["n_users"], cfg["n_items"], sc)
    beta = 0.0 if cfg.get("oracle") else None
    reports = run_semi_synthetic(world, sc, beta=beta, oracle_imputation=bool(cfg.get("oracle")))
    rows = [dataclasses.asdict(r) for r in reports]
    summary = summarize_re(reports)
    table = []
    for scen in [s.value for s in ALL_SCENARIOS if s.value in summary]:
        d = summary[scen]
        row = {"scenario": scen}
        for name, st in d.items():
            row[f"{name}_mean"] = st["mean"]
            row[f"{name}_sd"] = st["sd"]
        m = {k: v["mean"] for k, v in d.items()}
        row["TDR_lt_DR"] = m["TDR"] < m["DR"]
        row["order_TDR_DR_IPS_Naive"] = m["TDR"] < m["DR"] < m["IPS"] < m["Naive"]
        row["sd_TDR_le_DR"] = d["TDR"]["sd"] <= d["DR"]["sd"]
        table.append(row)
    return rows, table


def cmd_synth(args, cfg) -> int:
    rows, table = run_synth(cfg, args.seed)
    write_table(rows, args.out, "re_rows")
    write_table(table, args.out, "re_table")
    for r in table:
        print(f"{r['scenario']:7s} " + "  ".join(
            f"{n}:{r[n + '_mean']:.4f}±{r[n + '_sd']:.4f}" for n in ("Naive", "EIB", "IPS", "DR", "TDR")))
    return 0


def run_mc(cfg: dict, seed: int):
    """All Monte-Carlo checks: ``(report rows, sweep rows, failures)``."""
    z = cfg["z"]
    world = MCWorld.random(cfg["n_users"], cfg["n_items"], rng=seed, p_min=cfg["p_min"])
    rows, failures = [], []
    scenarios = {
        "accurate": MCScenario(),
        "corrupted_imputation": MCScenario(accurate_imputation=False, imputation_shift=cfg["imputation_shift"]),
        "corrupted_propensity": MCScenario(accurate_propensity=False),
    }
    reports = {}
    for name, sc in scenarios.items():
        rep = run_bias_variance(world, sc, cfg["replicates"], seed, cfg["design"])
        reports[name] = rep
        for r in rep.rows():
            rows.append({"scenario": name, **r})

    acc = reports["accurate"].stats
    for name in ("IPS", "EIB", "DR", "TDR"):
        if abs(acc[name].bias) >= z * acc[name].se_bias:
            failures.append(f"accurate: {name} mean is {acc[name].bias / acc[name].se_bias:.1f} SE from ideal")
    for a, b in (("DR", "EIB"), ("IPS", "DR")):
        gap, se = reports["accurate"].variance_gap(a, b)
        if not gap > z * se:
            failures.append(f"accurate: Var({a}) - Var({b}) = {gap:.3e} is not > {z} SE ({se:.1e})")
    for name in ("IPS", "EIB", "DR"):
        s = acc[name]
        if abs(s.var - s.closed_var) >= z * s.se_var:
            failures.append(f"accurate: Var({name}) {s.var:.3e} vs closed form {s.closed_var:.3e}")

    ci = reports["corrupted_imputation"].stats
    if abs(ci["TDR"].bias) >= z * ci["TDR"].se_bias:
        failures.append("corrupted imputation: TDR is biased beyond 3 SE")
    if abs(ci["EIB"].bias) <= 5 * ci["EIB"].se_bias:
        failures.append("corrupted imputation: EIB bias not detectable at 5 SE")
    if abs(ci["EIB"].bias - ci["EIB"].closed_bias) >= z * ci["EIB"].se_bias:
        failures.append("corrupted imputation: EIB bias differs from its closed form")

    cp = reports["corrupted_propensity"].stats
    for name in ("DR", "TDR"):
        if abs(cp[name].bias) >= z * cp[name].se_bias:
            failures.append(f"corrupted propensity: {name} is biased beyond 3 SE")

    sweep = small_propensity_sweep(cfg["sweep_grid"], cfg["sweep_replicates"], cfg["sweep_users"],
                                   cfg["sweep_items"], seed, cfg["design"])
    failures.extend(check_sweep(sweep, z))
    sweep_rows = [{k: v for k, v in r.items() if not k.startswith("_")} for r in sweep]
    return rows, sweep_rows, failures


def cmd_mc(args, cfg) -> int:
    rows, sweep_rows, failures = run_mc(cfg, args.seed)
    write_table(rows, args.out, "mc_report")
    write_table(sweep_rows, args.out, "mc_sweep")
    with open(args.out / "mc_checks.json", "w") as fh:
        json.dump({"passed": not failures, "failures": failures}, fh, indent=2)
        fh.write("\n")
    for f in failures:
        print("FAIL:", f, file=sys.stderr)
    print("mc checks:", "all passed" if not failures else f"{len(failures)} failed")
    return 1 if failures else 0


def _train_job(job):
    """One (dataset spec, seed, variants, trainer cfg, clip) unit; returns metric rows and artifacts."""
    dataset_spec, seed, variants, cfg, clip = job
    split = load_dataset(dataset_spec, seed)
    data = TrainData.from_split(split)
    pre = None
    out = []
    for v in variants:
        tc = trainer_config(cfg, seed, v, clip)
        if pre is None:
            pre = prepare(data, tc)
        res = train_variant(data, tc, pre)
        out.append(res)
    return out


def _metric_row(res, clip=None) -> dict:
    row = {"variant": res.variant, "seed": res.seed}
    if clip is not None:
        row["clip"] = clip
    row.update({k: res.test[k] for k in ("MSE", "AUC", "NDCG@5", "NDCG@10")})
    row.update({"best_epoch": res.best_epoch, "val_auc": res.val_auc})
    return row


def run_train(cfg: dict, seeds: Sequence[int], clip: Optional[float] = None):
    jobs = [(cfg["dataset"], s, cfg["variants"], cfg, clip) for s in seeds]
    return [r for batch in _map(_train_job, jobs) for r in batch]


def cmd_train(args, cfg) -> int:
    results = run_train(cfg, cfg["seeds"], args.clip)
    write_table([_metric_row(r) for r in results], args.out, "metrics")
    for r in results:
        write_history(r.history, args.out / f"history_{r.variant}_{r.seed}.csv")
        if cfg.get("save_checkpoints", True):
            save_bundle(args.out / f"checkpoint_{r.variant}_{r.seed}.bin", r.bundle,
                        {"variant": r.variant, "seed": r.seed, "best_epoch": r.best_epoch})
        print(f"{r.variant:9s} seed {r.seed}: " + "  ".join(f"{k} {v:.4f}" for k, v in r.test.items()))
    return 0


def cmd_eval(args, cfg) -> int:
    if not cfg.get("checkpoint"):
        raise ConfigError("eval needs 'checkpoint' in the config")
    bundle = load_bundle(cfg["checkpoint"])
    split = load_dataset(cfg["dataset"], args.seed)
    metrics = evaluate_bundle(bundle, split)
    row = {"checkpoint": str(cfg["checkpoint"]), "variant": bundle.meta.get("variant"), **metrics}
    write_table([row], args.out, "eval")
    print("  ".join(f"{k} {v:.4f}" for k, v in metrics.items()))
    return 0


def run_sweep(cfg: dict):
    rows = []
    for t in cfg["thresholds"]:
        for r in run_train(cfg, cfg["seeds"], float(t)):
            rows.append(_metric_row(r, float(t)))
    return rows


def cmd_sweep(args, cfg) -> int:
    if not cfg["thresholds"]:
        raise ConfigError("sweep needs at least one threshold")
    rows = run_sweep(cfg)
    write_table(rows, args.out, "sweep")
    for r in rows:
        print(f"clip {r['clip']:.2f} {r['variant']:9s} seed {r['seed']}: AUC {r['AUC']:.4f}")
    return 0


COMMANDS = {"synth": cmd_synth, "mc": cmd_mc, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tdrcl", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="base seed (overrides the config)")
        p.add_argument("--out", type=Path, default=Path("runs") / name, help="output directory")
        p.add_argument("--variant", action="append",
                       help="trainer variant; repeat for several (train/sweep only)")
        p.add_argument("--clip", type=float, help="propensity clip threshold (train only)")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.command, args.config)
        explicit_seed = args.seed is not None
        seed = args.seed if explicit_seed else int(cfg.get("seed", 0))
        args.seed = seed
        cfg["seed"] = seed
        if args.variant:
            for v in args.variant:
                Variant(v)
            cfg["variants"] = list(args.variant)
        if "seeds" in cfg and explicit_seed:
            cfg["seeds"] = [seed]  # an explicit --seed narrows a multi-seed run to that seed
        if args.clip is not None:
            cfg.setdefault("trainer", {})["clip_threshold"] = args.clip
        resolve_defaults(args.command, cfg, seed)
        seeds = cfg.get("seeds", [seed])
        record_run(args.out, args.command, cfg, seeds)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"tdrcl {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
