"""Command-line front end.

Subcommands: generate, train, evaluate, verify-dr, report, run-manifest,
plot-data. Scientific settings come from flat key=value config files; any key
can be overridden on the command line as --key=value. Exit codes: 0 success,
2 configuration problem, 3 training divergence.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import pathlib
import re
import sys
from dataclasses import dataclass

import numpy as np

from . import data as datamod
from . import trainer as trainmod
from .config import coerce_config, load_kv_file, parse_kv_text, parse_overrides
from .errors import ConfigError, DivergenceError
from .estimator import DrSimulationConfig, monte_carlo_unbiasedness
from .metrics import confusion, metrics_dict
from .model import load_checkpoint, predict, save_checkpoint
from .trainer import RunConfig, TrainHistory, load_history, run, save_history

_SECTION_RE = re.compile(r"^\[run\s+([^\]]+)\]$")


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestRun:
    name: str
    cfg: RunConfig
    data: str
    eval_data: str | None


@dataclass
class ExperimentManifest:
    runs: list[ManifestRun]


def parse_manifest(text: str, source: str = "<manifest>") -> ExperimentManifest:
    """key=value grammar plus one [run <name>] section per run.

    Keys before the first section are defaults shared by every run; each
    section may override them. `data` (dataset path) is required per run;
    `eval_data` is optional. Everything else must be a RunConfig key.
    """
    globals_kv: dict[str, str] = {}
    sections: list[tuple[str, dict[str, str]]] = []
    current: dict[str, str] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            name = m.group(1).strip()
            if not name:
                raise ConfigError(f"{source}:{lineno}: empty run name")
            current = {}
            sections.append((name, current))
            continue
        kv = parse_kv_text(line, source=f"{source}:{lineno}")
        (globals_kv if current is None else current).update(kv)

    names = [name for name, _ in sections]
    if len(set(names)) != len(names):
        raise ConfigError(f"{source}: duplicate run names")

    runs = []
    for name, kv in sections:
        merged = dict(globals_kv)
        merged.update(kv)
        data_path = merged.pop("data", None)
        if data_path is None:
            raise ConfigError(f"{source}: run {name!r} has no data= path")
        eval_path = merged.pop("eval_data", None)
        runs.append(ManifestRun(name=name, cfg=coerce_config(merged, RunConfig),
                                data=data_path, eval_data=eval_path))
    return ExperimentManifest(runs)


def _execute_run(mrun: ManifestRun, outdir: str) -> dict:
    """Train one manifest entry; never raises (failures go into the row)."""
    row = {"run": mrun.name, "group": mrun.cfg.mode, "seed": str(mrun.cfg.seed),
           "mean_acc": "", "gm_acc": "", "mean_acc_std": "", "gm_acc_std": "",
           "status": "ok"}
    try:
        ds = datamod.load_dataset(mrun.data)
        eval_ds = datamod.load_dataset(mrun.eval_data) if mrun.eval_data else None
        history, state = run(ds, mrun.cfg, eval_data=eval_ds)
        out = pathlib.Path(outdir)
        save_history(history, out / f"{mrun.name}.history.csv")
        save_checkpoint(state.params, state.opt, out / f"{mrun.name}.ckpt")
        final = history.records[-1]
        row["mean_acc"] = repr(float(final.mean_acc))
        row["gm_acc"] = repr(float(final.gm_acc))
    except Exception as e:  # noqa: BLE001 - sibling runs must continue
        row["status"] = f"error: {e}"
    return row


def _aggregate_rows(rows: list[dict]) -> list[dict]:
    """One mean/std row per group, over the successful runs, in first-seen order."""
    groups: dict[str, list[dict]] = {}
    for row in rows:
        if row["status"] == "ok" and row["mean_acc"] != "":
            groups.setdefault(row["group"], []).append(row)
    out = []
    for group, members in groups.items():
        mean_accs = np.array([float(r["mean_acc"]) for r in members])
        gm_accs = np.array([float(r["gm_acc"]) for r in members])
        out.append({
            "run": f"{group}(mean)", "group": group, "seed": "",
            "mean_acc": repr(float(mean_accs.mean())),
            "gm_acc": repr(float(gm_accs.mean())),
            "mean_acc_std": repr(float(mean_accs.std(ddof=1) if len(members) > 1 else 0.0)),
            "gm_acc_std": repr(float(gm_accs.std(ddof=1) if len(members) > 1 else 0.0)),
            "status": f"aggregate(n={len(members)})",
        })
    return out


_TABLE_COLUMNS = ("run", "group", "seed", "mean_acc", "gm_acc",
                  "mean_acc_std", "gm_acc_std", "status")


def _write_table(path, rows: list[dict]) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TABLE_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in _TABLE_COLUMNS])


def run_manifest(manifest: ExperimentManifest, outdir: str,
                 parallel: int = 1) -> list[dict]:
    """Execute every run (sequentially unless parallel > 1) and tabulate results."""
    pathlib.Path(outdir).mkdir(parents=True, exist_ok=True)
    if parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_execute_run, manifest.runs,
                                 [outdir] * len(manifest.runs)))
    else:
        rows = [_execute_run(m, outdir) for m in manifest.runs]
    return rows + _aggregate_rows(rows)


# ---------------------------------------------------------------- plot data

def plot_rows(histories: dict[str, TrainHistory]) -> list[tuple]:
    """Long-format rows (step, run, metric, value) covering every history column."""
    rows = []
    for name in histories:
        history = histories[name]
        c = len(history.records[0].per_class_recall) if history.records else 0
        metric_names = (["mean_acc", "gm_acc"] + [f"recall_{k}" for k in range(c)]
                        + ["l_cap", "l_cai", "l_supp", "l_cadr", "loss_total"]
                        + [f"accepted_{k}" for k in range(c)])
        for rec in history.records:
            values = ([rec.mean_acc, rec.gm_acc] + list(rec.per_class_recall)
                      + [rec.l_cap, rec.l_cai, rec.l_supp, rec.l_cadr, rec.loss_total]
                      + list(rec.accepted_counts))
            for metric, value in zip(metric_names, values):
                rows.append((rec.step, name, metric, float(value)))
    return rows


def unplot_rows(rows: list[tuple]) -> dict:
    """Inverse reshape: {run: {step: {metric: value}}}. Lossless round trip."""
    out: dict = {}
    for step, name, metric, value in rows:
        cell = out.setdefault(name, {}).setdefault(int(step), {})
        if metric in cell:
            raise ConfigError(f"duplicate metric {metric!r} for run {name!r} step {step}")
        cell[metric] = float(value)
    return out


# ---------------------------------------------------------------- commands

def _load_with_overrides(config_path, overrides: dict[str, str]) -> dict[str, str]:
    values = load_kv_file(config_path) if config_path else {}
    values.update(overrides)
    return values


def _cmd_generate(args, overrides) -> int:
    values = _load_with_overrides(args.config, overrides)
    holdout_per_class = int(values.pop("holdout_per_class", "0"))
    holdout_seed = values.pop("holdout_seed", None)
    mask_seed = values.pop("mask_seed", None)

    spec = coerce_config(values, datamod.SyntheticSpec, ignore_unknown=True)
    mnar_values = dict(values)
    if mask_seed is not None:
        mnar_values["seed"] = mask_seed
    cfg = coerce_config(mnar_values, datamod.MnarConfig, ignore_unknown=True)

    known = ({f.name for f in dataclasses.fields(datamod.SyntheticSpec)}
             | {f.name for f in dataclasses.fields(datamod.MnarConfig)})
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown generate keys: {sorted(unknown)}")

    ds = datamod.generate_synthetic(spec)
    if holdout_per_class:
        if not args.holdout_out:
            raise ConfigError("holdout_per_class set but no --holdout_out path given")
        seed = int(holdout_seed) if holdout_seed is not None else spec.seed + 1
        ds, holdout = datamod.split_holdout(ds, holdout_per_class, seed)
        datamod.save_dataset(holdout, args.holdout_out)
    ds = datamod.apply_mnar_mask(ds, cfg)
    ds = datamod.apply_unlabeled_imbalance(ds, cfg)
    datamod.save_dataset(ds, args.out)
    print(f"wrote {args.out}: {ds.n_samples} samples, {ds.labeled_count} labeled")
    return 0


def _cmd_train(args, overrides) -> int:
    values = _load_with_overrides(args.config, overrides)
    cfg = coerce_config(values, RunConfig)
    ds = datamod.load_dataset(args.data)
    eval_ds = datamod.load_dataset(args.eval_data) if args.eval_data else None
    history, state = run(ds, cfg, eval_data=eval_ds,
                         prior_log_path=args.prior_log,
                         imputation_log_path=args.imputation_log)
    save_history(history, f"{args.out_prefix}.history.csv")
    save_checkpoint(state.params, state.opt, f"{args.out_prefix}.ckpt")
    final = history.records[-1] if history.records else None
    summary = {
        "mode": cfg.mode,
        "steps": cfg.max_iters,
        "mean_acc": float(final.mean_acc) if final else None,
        "gm_acc": float(final.gm_acc) if final else None,
    }
    print(json.dumps(summary))
    return 0


def _cmd_evaluate(args, overrides) -> int:
    if overrides:
        raise ConfigError("evaluate takes no --key=value overrides")
    params, _ = load_checkpoint(args.ckpt)
    ds = datamod.load_dataset(args.data)
    if ds.feature_dim != params.feature_dim or ds.class_count != params.class_count:
        raise ConfigError("checkpoint and dataset dimensions do not match")
    cm = confusion(predict(params, ds.features), ds.labels, ds.class_count)
    payload = json.dumps(metrics_dict(cm), indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    print(payload)
    return 0


def _cmd_verify_dr(args, overrides) -> int:
    values = _load_with_overrides(args.config, overrides)
    n_samples = int(values.get("n_samples", "256"))
    seed = int(values.get("seed", "0"))
    rng = np.random.default_rng(seed)
    # Vector fields default to a seeded draw so the command works standalone.
    values.setdefault("n_samples", str(n_samples))
    values.setdefault("propensities",
                      ",".join(repr(float(v)) for v in rng.uniform(0.2, 0.9, n_samples)))
    values.setdefault("loss_s",
                      ",".join(repr(float(v)) for v in rng.uniform(0.0, 1.0, n_samples)))
    values.setdefault("loss_u",
                      ",".join(repr(float(v)) for v in rng.uniform(0.0, 1.0, n_samples)))
    cfg = coerce_config(values, DrSimulationConfig)
    mean, stderr = monte_carlo_unbiasedness(cfg, args.scenario)
    payload = {
        "scenario": args.scenario,
        "trials": cfg.trials,
        "mean": mean,
        "stderr": stderr,
        "pass": bool(abs(mean) <= 4.0 * stderr),
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


_SEED_SUFFIX_RE = re.compile(r"[-_]s(\d+)$")


def _cmd_report(args, overrides) -> int:
    if overrides:
        raise ConfigError("report takes no --key=value overrides")
    rows = []
    for path in args.histories:
        stem = pathlib.Path(path).name
        for suffix in (".history.csv", ".csv"):
            if stem.endswith(suffix):
                stem = stem[: -len(suffix)]
                break
        m = _SEED_SUFFIX_RE.search(stem)
        group = stem[: m.start()] if m else stem
        seed = m.group(1) if m else ""
        history = load_history(path)
        final = history.records[-1]
        rows.append({"run": stem, "group": group, "seed": seed,
                     "mean_acc": repr(float(final.mean_acc)),
                     "gm_acc": repr(float(final.gm_acc)),
                     "mean_acc_std": "", "gm_acc_std": "", "status": "ok"})
    rows += _aggregate_rows(rows)
    _write_table(args.out, rows)
    print(f"wrote {args.out}: {len(rows)} rows")
    return 0


def _cmd_run_manifest(args, overrides) -> int:
    if overrides:
        raise ConfigError("run-manifest takes no --key=value overrides; edit the manifest")
    with open(args.manifest, "r", encoding="utf-8") as fh:
        manifest = parse_manifest(fh.read(), source=args.manifest)
    rows = run_manifest(manifest, args.outdir, parallel=args.parallel)
    out = pathlib.Path(args.outdir) / "comparison.csv"
    _write_table(out, rows)
    failures = [r for r in rows if r["status"].startswith("error")]
    print(f"wrote {out}: {len(rows)} rows ({len(failures)} failed runs)")
    return 0


def _cmd_plot_data(args, overrides) -> int:
    if overrides:
        raise ConfigError("plot-data takes no --key=value overrides")
    import csv

    histories = {}
    for path in args.histories:
        stem = pathlib.Path(path).name
        for suffix in (".history.csv", ".csv"):
            if stem.endswith(suffix):
                stem = stem[: -len(suffix)]
                break
        histories[stem] = load_history(path)
    rows = plot_rows(histories)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "run", "metric", "value"])
        for step, name, metric, value in rows:
            writer.writerow([step, name, metric, repr(value)])
    print(f"wrote {args.out}: {len(rows)} rows")
    return 0


# ---------------------------------------------------------------- entry

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cadr",
        description="Semi-supervised training workbench for missing-not-at-random labels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a dataset file")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout_out", default=None)
    p.set_defaults(handler=_cmd_generate)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--eval_data", default=None)
    p.add_argument("--out_prefix", required=True)
    p.add_argument("--prior_log", default=None)
    p.add_argument("--imputation_log", default=None)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("verify-dr", help="Monte Carlo unbiasedness check")
    p.add_argument("--scenario", type=int, required=True, choices=(1, 2))
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_verify_dr)

    p = sub.add_parser("report", help="aggregate history CSVs into a comparison table")
    p.add_argument("--out", required=True)
    p.add_argument("histories", nargs="+")
    p.set_defaults(handler=_cmd_report)

    p = sub.add_parser("run-manifest", help="execute a batch of runs from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(handler=_cmd_run_manifest)

    p = sub.add_parser("plot-data", help="reshape histories into long-format CSV")
    p.add_argument("--out", required=True)
    p.add_argument("histories", nargs="+")
    p.set_defaults(handler=_cmd_plot_data)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(extra)
        return args.handler(args, overrides)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
