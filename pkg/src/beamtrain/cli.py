"""``simulate`` command line: config parsing, experiment suites, CSV output.

Config and suite files are flat ``key = value`` text, one pair per line,
``#`` starts a comment.  In a suite file a comma-separated value declares a
sweep; the rows are the cartesian product of all swept keys in the order
the keys appear.  Suite-only keys:

``name``          suite name written to the ``suite`` column
``seeds``         comma-separated seed list (default 1..10)
``max_ber``       acceptance threshold on every group's mean BER
``max_nmse``      acceptance threshold on every group's mean NMSE
``max_overhead``  acceptance threshold on every group's mean overhead
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .link_simulator import ConfigError, SimConfig, run_scenario

COLUMNS = [
    "suite", "mode", "snr_db", "beta", "T_c", "T_d", "N_d",
    "overhead", "ber", "nmse", "seed", "runtime_s", "error",
]
GROUP_KEYS = ["suite", "mode", "snr_db", "beta", "T_c", "T_d", "N_d"]
METRICS = ["overhead", "ber", "nmse"]
THRESHOLD_KEYS = {"max_ber": "ber", "max_nmse": "nmse", "max_overhead": "overhead"}
SUITE_KEYS = {"name", "seeds", *THRESHOLD_KEYS}
DEFAULT_SEEDS = tuple(range(1, 11))
PAPER_SCALE = dict(N_b=32, N_m=32, M_b=128, M_m=128, total_symbols=1_000_000)

BUILTIN_SUITES = {
    "smoke": """
        name = smoke
        N_b = 8
        N_m = 8
        M_b = 32
        M_m = 32
        L = 2
        N_c = 16
        T_c = 500
        total_symbols = 10000
        seeds = 1,2
        max_overhead = 0.05
    """,
    "overhead_conventional": """
        name = overhead_conventional
        mode = ConventionalCycling
        beta = 0.0005, 0.001, 0.002
        T_c = 1000, 500, 200, 100
    """,
    "overhead_dedicated": """
        name = overhead_dedicated
        mode = DedicatedDual, DedicatedSingle
        beta = 0.001, 0.002
        T_c = 1000
        T_d = 500, 200, 100
    """,
    "mse_vs_snr": """
        name = mse_vs_snr
        seeds = 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20
        mode = ConventionalCycling
        estimator = omp, greedy_map
        T_c = 100
        beta = 0.002
        snr_db = 0, 5, 10, 15, 20, 30
        off_grid = true
        total_symbols = 20000
    """,
}


class DataError(Exception):
    """Malformed or missing input data (exit code 1)."""


# -- parsing -----------------------------------------------------------------

def _field_kinds() -> dict:
    return {f.name: type(f.default) for f in fields(SimConfig)}


def parse_value(key: str, text: str, kind: type):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            v = float(text)
            if not v.is_integer():
                raise ValueError
            return int(v)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def read_pairs(lines) -> list[tuple[str, str]]:
    """``key = value`` pairs in file order; blank lines and comments skipped."""
    out = []
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if not k:
            raise ConfigError(f"line {n}: empty key")
        out.append((k, v.strip()))
    return out


def _read_file(path) -> list[str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return p.read_text(encoding="utf-8").splitlines()


def parse_config(path=None, overrides=()) -> SimConfig:
    """Defaults, then the file's pairs, then ``key=value`` overrides."""
    kinds = _field_kinds()
    pairs = read_pairs(_read_file(path)) if path is not None else []
    pairs += read_pairs(overrides)
    values = {}
    for k, v in pairs:
        if k not in kinds:
            raise ConfigError(f"unknown key: {k}")
        values[k] = parse_value(k, v, kinds[k])
    return SimConfig(**values).validate()


# -- suites ------------------------------------------------------------------

@dataclass
class ExperimentSuite:
    name: str
    sweep: list
    seeds: tuple = DEFAULT_SEEDS
    thresholds: dict = field(default_factory=dict)
    output_path: str = "results.csv"

    def __post_init__(self):
        if not self.sweep:
            raise ConfigError(f"suite {self.name!r} has an empty sweep")
        if not self.seeds:
            raise ConfigError(f"suite {self.name!r} has no seeds")

    def rows(self):
        """(config, seed) pairs in declared order: configs outer, seeds inner."""
        for cfg in self.sweep:
            for s in self.seeds:
                yield replace(cfg, rng_seed=int(s))


def _parse_seeds(text: str) -> tuple:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"seeds: expected comma-separated integers, got {text!r}") from None


def parse_suite(lines, overrides=(), paper_scale=False, seeds=None, default_name="suite") -> ExperimentSuite:
    kinds = _field_kinds()
    name, suite_seeds, thresholds = default_name, DEFAULT_SEEDS, {}
    axes: dict[str, list] = {}
    if paper_scale:
        axes.update({k: [v] for k, v in PAPER_SCALE.items()})
    for k, v in read_pairs(lines) + read_pairs(overrides):
        if k == "name":
            name = v
        elif k == "seeds":
            suite_seeds = _parse_seeds(v)
        elif k in THRESHOLD_KEYS:
            thresholds[THRESHOLD_KEYS[k]] = parse_value(k, v, float)
        elif k in kinds:
            axes[k] = [parse_value(k, part, kinds[k]) for part in v.split(",")]
        else:
            raise ConfigError(f"unknown key: {k}")
    if seeds is not None:
        suite_seeds = tuple(seeds)
    keys = list(axes)
    sweep = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        sweep.append(SimConfig(**dict(zip(keys, combo))).validate())
    return ExperimentSuite(name, sweep, suite_seeds, thresholds)


def load_suite(spec: str, **kw) -> ExperimentSuite:
    """Built-in suite by name, or a suite file path."""
    if spec in BUILTIN_SUITES:
        return parse_suite(BUILTIN_SUITES[spec].splitlines(), default_name=spec, **kw)
    return parse_suite(_read_file(spec), default_name=Path(spec).stem, **kw)


# -- running -----------------------------------------------------------------

def fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.9g}"


def run_row(args) -> tuple[dict, float]:
    """One CSV row and its wall-clock time.  Failures land in ``error``."""
    suite_name, cfg = args
    row = {
        "suite": suite_name,
        "mode": cfg.mode_label,
        "snr_db": cfg.snr_db,
        "beta": cfg.beta,
        "T_c": cfg.T_c,
        "T_d": cfg.T_d if cfg.dedicated else 0,
        "N_d": cfg.dedicated_burst_length,
        "seed": cfg.rng_seed,
        # simulated air time, so CSV bodies stay reproducible
        "runtime_s": cfg.total_symbols * cfg.symbol_duration,
        "overhead": float("nan"),
        "ber": float("nan"),
        "nmse": float("nan"),
        "error": "",
    }
    t0 = time.perf_counter()
    try:
        rep = run_scenario(cfg)
        row.update(overhead=rep.overhead, ber=rep.ber, nmse=rep.nmse)
    except Exception as exc:  # recorded per row, the suite keeps going
        row["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
    return row, time.perf_counter() - t0


def run_suite(suite: ExperimentSuite, jobs: int = 1, out=None) -> list[dict]:
    """Run every (config, seed) row; rows come back in declared order."""
    tasks = [(suite.name, cfg) for cfg in suite.rows()]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(run_row, tasks))
    else:
        results = [run_row(t) for t in tasks]
    rows = [r for r, _ in results]
    if out is not None:
        write_csv(rows, out)
        write_meta(out, suite, [w for _, w in results])
    return rows


def write_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([fmt(r[c]) for c in COLUMNS])


def write_meta(path, suite: ExperimentSuite, wall) -> Path:
    meta = {
        "suite": suite.name,
        "version": __version__,
        "finished": datetime.now(timezone.utc).isoformat(),
        "rows": len(wall),
        "wall_clock_s": wall,
        "thresholds": suite.thresholds,
    }
    p = Path(str(path) + ".meta.json")
    p.write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return p


# -- summarizing ---------------------------------------------------------------

def read_csv(path) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such file: {p}")
    with open(p, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != COLUMNS:
            raise DataError(f"unexpected header in {p}: {header}")
        rows = []
        for n, rec in enumerate(reader, 2):
            if len(rec) != len(COLUMNS):
                raise DataError(f"line {n}: expected {len(COLUMNS)} fields, got {len(rec)}")
            row = dict(zip(COLUMNS, rec))
            try:
                for m in METRICS:
                    row[m] = float(row[m])
            except ValueError:
                raise DataError(f"line {n}: non-numeric metric") from None
            rows.append(row)
    return rows


def aggregate(rows) -> list[dict]:
    """Mean and sample standard deviation per group, in first-seen order.

    Rows with an error are skipped; a single-row group has std 0.
    """
    groups: dict[tuple, list] = {}
    for r in rows:
        if r.get("error"):
            continue
        groups.setdefault(tuple(fmt(r[k]) for k in GROUP_KEYS), []).append(r)
    out = []
    for key, members in groups.items():
        agg = dict(zip(GROUP_KEYS, key), n=len(members))
        for m in METRICS:
            x = np.array([r[m] for r in members], dtype=float)
            x = x[~np.isnan(x)]
            agg[m] = float(x.mean()) if x.size else float("nan")
            agg[m + "_std"] = float(x.std(ddof=1)) if x.size > 1 else 0.0
        out.append(agg)
    return out


def check_thresholds(groups, thresholds: dict) -> list[str]:
    failures = []
    for g in groups:
        for metric, limit in thresholds.items():
            if not g[metric] <= limit:
                failures.append(
                    f"{g['suite']} {g['mode']} T_c={g['T_c']} T_d={g['T_d']} beta={g['beta']} "
                    f"snr={g['snr_db']}: {metric} {fmt(g[metric])} > {fmt(limit)}"
                )
    return failures


def format_table(groups) -> str:
    head = f"{'suite':<22} {'mode':<32} {'snr':>5} {'beta':>7} {'T_c':>5} {'T_d':>4} {'N_d':>3} {'n':>3}"
    head += "".join(f" {m + ' (mean±std)':>24}" for m in METRICS)
    lines = [head]
    for g in groups:
        s = (f"{g['suite']:<22} {g['mode']:<32} {g['snr_db']:>5} {g['beta']:>7} {g['T_c']:>5} "
             f"{g['T_d']:>4} {g['N_d']:>3} {g['n']:>3}")
        for m in METRICS:
            s += f" {fmt(g[m]) + ' ± ' + fmt(g[m + '_std']):>24}"
        lines.append(s)
    return "\n".join(lines)


def summarize(path, thresholds=None, stream=sys.stdout) -> int:
    """Print per-group aggregates; returns the process exit code."""
    try:
        rows = read_csv(path)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not rows:
        print("warning: no rows", file=sys.stderr)
        return 1
    groups = aggregate(rows)
    print(format_table(groups), file=stream)
    errors = sum(1 for r in rows if r["error"])
    if errors:
        print(f"{errors} row(s) failed", file=stream)
    failures = check_thresholds(groups, thresholds or {})
    for f in failures:
        print(f"FAIL {f}", file=stream)
    return 2 if failures else 0


def _thresholds_for(rows_path, suite_spec):
    if suite_spec:
        return load_suite(suite_spec).thresholds
    # fall back to a built-in suite named in the CSV
    try:
        names = {r["suite"] for r in read_csv(rows_path)}
    except DataError:
        return {}
    th = {}
    for n in names:
        if n in BUILTIN_SUITES:
            th.update(load_suite(n).thresholds)
    return th


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="simulate", description="Beam-training link simulations.")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment suite and write CSV")
    run.add_argument("--suite", required=True, help="built-in suite name or suite file")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--out", default=None, help="CSV path (default <suite>.csv)")
    run.add_argument("--paper-scale", action="store_true")
    run.add_argument("--seed-list", default=None, help="comma-separated seeds")
    run.add_argument("overrides", nargs="*", metavar="key=value")
    summ = sub.add_parser("summarize", help="aggregate a results CSV")
    summ.add_argument("--in", dest="inp", required=True)
    summ.add_argument("--suite", default=None, help="suite whose thresholds apply")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "summarize":
        try:
            th = _thresholds_for(args.inp, args.suite)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return summarize(args.inp, th)

    try:
        seeds = _parse_seeds(args.seed_list) if args.seed_list else None
        if args.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        suite = load_suite(args.suite, overrides=args.overrides, paper_scale=args.paper_scale, seeds=seeds)
    except (ConfigError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = args.out or f"{suite.name}.csv"
    rows = run_suite(suite, jobs=args.jobs, out=out)
    print(f"wrote {len(rows)} rows to {out}")
    groups = aggregate(rows)
    print(format_table(groups))
    failures = check_thresholds(groups, suite.thresholds)
    for f in failures:
        print(f"FAIL {f}")
    if any(r["error"] for r in rows):
        return 1
    return 2 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
