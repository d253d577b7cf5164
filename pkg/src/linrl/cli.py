"""Command-line entry point: run, sweep, design, validate-posterior, plot-data."""

from __future__ import annotations

import argparse
import csv
import glob
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, apply_overrides, load_config, parse_value
from .critic import validate_posterior
from .design import greedy_g_design, kw_reference
from .harness import RunAborted, build_environment, run_experiment, write_csv

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def mean_ci95(samples):
    """Mean and half-width of a Student-t 95% interval (None for fewer than two samples)."""
    from scipy import stats

    x = np.asarray(samples, dtype=float)
    mean = float(np.mean(x))
    if x.size < 2:
        return mean, None
    half = stats.t.ppf(0.975, x.size - 1) * np.std(x, ddof=1) / np.sqrt(x.size)
    return mean, float(half)


def parse_seeds(text: str | None, default: int = 0) -> list[int]:
    """'3' -> [3]; '0-4' -> [0..4]; '1,5,7' -> [1, 5, 7]."""
    if text is None:
        return [default]
    seeds: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def _deterministic() -> bool:
    return os.environ.get("LINRL_DETERMINISTIC", "") == "1"


def _run_dir(out: Path, cfg: ExperimentConfig) -> Path:
    return out / (cfg.label or f"{cfg.name}-{cfg.digest()}")


def _execute(cfg: ExperimentConfig, out: Path, timing: bool) -> dict:
    """Run one (config, seed) and write its CSV and JSON summary."""
    run_dir = _run_dir(out, cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    csv_path = run_dir / f"seed_{cfg.seed}.csv"
    json_path = run_dir / f"seed_{cfg.seed}.json"
    if json_path.exists() and csv_path.exists():
        # artifacts are write-once per (config digest, seed): reuse instead of overwriting
        with open(json_path, encoding="utf-8") as fh:
            summary = json.load(fh)
        return {"status": "ok", "csv": str(csv_path), "seed": cfg.seed, "final_value": summary["final_value"],
                "v_star": summary["v_star"], "label": run_dir.name, "runtime_s": summary["runtime_s"],
                "reused": True}
    try:
        result = run_experiment(cfg, timing=timing)
    except RunAborted as exc:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            write_csv(exc.records, fh)
        return {"status": "aborted", "message": str(exc), "csv": str(csv_path), "seed": cfg.seed}
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        write_csv(result.records, fh)
    summary = result.summary()
    summary["label"] = run_dir.name
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"status": "ok", "csv": str(csv_path), "seed": cfg.seed, "final_value": summary["final_value"],
            "v_star": summary["v_star"], "label": run_dir.name, "runtime_s": summary["runtime_s"]}


def _execute_star(args):
    return _execute(*args)


def _run_many(jobs_list, jobs: int):
    if jobs <= 1 or _deterministic() or len(jobs_list) <= 1:
        return [_execute(*j) for j in jobs_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_execute_star, jobs_list))


def _base_doc(args) -> dict:
    doc: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    return apply_overrides(doc, args.set)


# --- subcommands ------------------------------------------------------------------------------


def cmd_run(args) -> int:
    doc = _base_doc(args)
    seeds = parse_seeds(args.seeds or args.seed, default=doc.get("seed", 0))
    configs = [ExperimentConfig.from_dict({**doc, "seed": s}) for s in seeds]  # validate before writing
    out = Path(args.out)
    results = _run_many([(c, out, args.timing) for c in configs], args.jobs)
    status = EXIT_OK
    for res in results:
        if res["status"] == "ok":
            print(f"seed {res['seed']}: final value {res['final_value']:.6g} (V* {res['v_star']:.6g}) -> {res['csv']}")
        else:
            print(f"seed {res['seed']}: ABORTED {res['message']}", file=sys.stderr)
            status = EXIT_NUMERICAL
    return status


def _grid_axes(args) -> list[tuple[str, list]]:
    axes: list[tuple[str, list]] = []
    if args.grid:
        with open(args.grid, encoding="utf-8") as fh:
            grid = json.load(fh)
        if not isinstance(grid, dict):
            raise ConfigError("grid file must map keys to value lists")
        axes.extend((k, list(v)) for k, v in grid.items())
    for item in args.vary or ():
        if "=" not in item:
            raise ConfigError(f"--vary '{item}' is not of the form key=v1,v2,...")
        key, values = item.split("=", 1)
        axes.append((key, [parse_value(v) for v in values.split(",")]))
    return axes


def cmd_sweep(args) -> int:
    doc = _base_doc(args)
    axes = _grid_axes(args)
    seeds = parse_seeds(args.seeds, default=doc.get("seed", 0))
    combos = list(itertools.product(*[vals for _, vals in axes])) or [()]
    out = Path(args.out)
    jobs_list = []
    labels = []
    for combo in combos:
        overrides = [f"{k}={json.dumps(v)}" for (k, _), v in zip(axes, combo)]
        label = "_".join(f"{k.split('.')[-1]}={v}" for (k, _), v in zip(axes, combo)) or "base"
        combo_doc = apply_overrides(doc, overrides)
        combo_doc["label"] = f"{doc.get('label') or 'sweep'}[{label}]"
        labels.append(combo_doc["label"])
        for s in seeds:
            jobs_list.append((ExperimentConfig.from_dict({**combo_doc, "seed": s}), out, args.timing))
    results = _run_many(jobs_list, args.jobs)
    rows = []
    for label in labels:
        mine = [r for r in results if r.get("label") == label and r["status"] == "ok"]
        aborted = sum(1 for r in results if r["status"] != "ok" and Path(r["csv"]).parent.name == label)
        finals = [r["final_value"] for r in mine]
        mean, ci = mean_ci95(finals) if finals else (float("nan"), None)
        v_star = mine[0]["v_star"] if mine else float("nan")
        rows.append({"label": label, "n": len(finals), "aborted": aborted, "final_mean": mean,
                     "final_ci95": ci, "v_star": v_star})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep_summary.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    valid = [r for r in rows if r["n"] > 0]
    if valid:
        best = max(valid, key=lambda r: r["final_mean"])
        print(f"best: {best['label']} final {best['final_mean']:.6g} +- {best['final_ci95']} (V* {best['v_star']:.6g})")
        with open(out / "sweep_best.json", "w", encoding="utf-8") as fh:
            json.dump(best, fh, indent=2)
            fh.write("\n")
    return EXIT_OK if all(r["status"] == "ok" for r in results) else EXIT_NUMERICAL


def cmd_design(args) -> int:
    cfg = load_config(args.config, args.set)
    _, phi_a = build_environment(cfg)
    flat = phi_a.reshape(-1, phi_a.shape[-1])
    coreset = greedy_g_design(flat, cfg.design_epsilon, cfg.design_cap)
    doc = coreset.to_dict()
    S, A = phi_a.shape[:2]
    doc["pairs"] = [[int(p) // A, int(p) % A] for p in coreset.points]
    doc["candidates"] = S * A
    doc["kw_reference"] = dict(zip(("design_norm_bound", "size_bound"), kw_reference(flat.shape[1])))
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_validate_posterior(args) -> int:
    params = {"n_chains": 5000, "zeta_inv": 0.1, "seed": 0, "dim": 2, "episodes": 2, "steps": 5,
              "lr_scale": 1.0, "threshold": 4.0}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        if key not in params:
            raise ConfigError(f"unknown validate-posterior key '{key}' (known: {sorted(params)})")
        params[key] = parse_value(value)
    report = validate_posterior(**params)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_plot_data(args) -> int:
    root = Path(args.runs)
    files = sorted(glob.glob(str(root / "*" / "seed_*.csv")))
    if not files:
        print(f"no run artifacts under {root}", file=sys.stderr)
        return EXIT_FAIL
    by_alg: dict[str, list[dict[int, float]]] = {}
    for path in files:
        with open(path, encoding="utf-8") as fh:
            series = {int(row["episode"]): float(row[args.metric]) for row in csv.DictReader(fh)}
        by_alg.setdefault(Path(path).parent.name, []).append(series)
    rows = []
    for alg in sorted(by_alg):
        runs = by_alg[alg]
        episodes = sorted(set().union(*runs))
        for ep in episodes:
            vals = [r[ep] for r in runs if ep in r]
            mean, ci = mean_ci95(vals)
            rows.append((ep, alg, args.metric, mean, ci, len(vals)))
    fh = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "algorithm", "metric", "mean", "ci95", "n"])
        for ep, alg, metric, mean, ci, n in rows:
            writer.writerow([ep, alg, metric, repr(mean), "" if ci is None else repr(ci), n])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


# --- parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linrl", description="Optimistic actor-critic for linear MDPs")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override (repeatable)")
        if out_default is not None:
            p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("run", help="run one config for one or more seeds")
    common(p, "runs")
    p.add_argument("--seed", help="single seed")
    p.add_argument("--seeds", help="seed list, e.g. 0-19 or 1,4,9")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timing", action="store_true", help="fill the wall_ms column")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid sweep over config keys and seeds")
    common(p, "sweep")
    p.add_argument("--grid", help="JSON file mapping dotted keys to value lists")
    p.add_argument("--vary", action="append", metavar="KEY=V1,V2", help="grid axis (repeatable)")
    p.add_argument("--seeds", help="seed list, e.g. 0-19")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timing", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("design", help="build the G-design coreset for the configured actor features")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", help="write the coreset JSON here as well")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("validate-posterior", help="statistical test of the LMC posterior moments")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="n_chains, zeta_inv, seed, dim, episodes, steps, lr_scale, threshold")
    p.set_defaults(func=cmd_validate_posterior)

    p = sub.add_parser("plot-data", help="aggregate seed CSVs into a long-format mean/CI table")
    p.add_argument("--runs", required=True, help="directory containing <algorithm>/seed_*.csv")
    p.add_argument("--out", help="output CSV (default stdout)")
    p.add_argument("--metric", default="exact_value")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, RunAborted) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
