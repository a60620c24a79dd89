"""Command-line front end: simulate, localize, eval, bench.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from . import bench as bench_mod
from .eval import REPORT_FIELDS, report_row, summarize_rows, read_report
from .experiment import SENSOR_SETS, localize as run_localize
from .filter import ConsistencyError, FilterConfig, MOTION_UPDATES
from .grid_map import InvalidInputError, NumericPolicy, compute_edt, load_map, save_map
from .sim import (
    RESOLUTION,
    SCHEMA,
    SCHEMA_VERSION,
    SensorNoise,
    builtin_sequences,
    builtin_worlds,
    read_sequence,
    simulate_sequence,
    write_sequence,
)

log = logging.getLogger("tofmcl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
DATA_ENV = "TOFMCL_DATA_DIR"
MAP_NAME = "map"


class ConfigError(Exception):
    def __init__(self, message: str, source: str = "", line: int | None = None, column: int | None = None):
        where = source
        if line is not None:
            where += f":{line}" + (f":{column}" if column is not None else "")
        super().__init__(f"{where}: {message}" if where else message)


class DataError(Exception):
    pass


# --- configuration ------------------------------------------------------------

DEFAULTS = {
    "world": "maze_world",
    "sequences": "all",
    "seed": 0,
    "seeds": [0, 1, 2, 3, 4, 5],
    "sensors": "both",
    "format": "jsonl",
    "resolution": RESOLUTION,
    "sim": {"odom_sigma": [0.005, 0.005, 0.005], "range_sigma": 0.02, "dropout": 0.05, "max_range": 1.5},
    "filter": {
        "particles": 4096,
        "sigma_odom": [0.1, 0.1, 0.1],
        "sigma_obs": 0.3,
        "sigma_obs_unit": "meters",
        "r_max": 1.5,
        "d_xy": 0.1,
        "d_theta": 0.1,
        "policy": "fp32",
        "workers": 1,
        "motion_update": "gated",
    },
}


def _marks(node, prefix=""):
    """Dotted key -> (line, column) of its value, 1-based."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}{k.value}"
            out[key] = (v.start_mark.line + 1, v.start_mark.column + 1)
            out["key:" + key] = (k.start_mark.line + 1, k.start_mark.column + 1)
            out.update(_marks(v, key + "."))
    return out


def _merge(base: dict, over: dict, marks: dict, source: str, prefix="") -> dict:
    out = dict(base)
    for k, v in over.items():
        key = f"{prefix}{k}"
        if k not in base:
            line, col = marks.get("key:" + key, (None, None))
            raise ConfigError(f"unknown key '{key}'", source, line, col)
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                line, col = marks.get(key, (None, None))
                raise ConfigError(f"'{key}' must be a mapping", source, line, col)
            out[k] = _merge(base[k], v, marks, source, key + ".")
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None) -> tuple[dict, dict, str]:
    """Defaults overlaid with the YAML file; returns (config, value marks, source name)."""
    if path is None:
        return json.loads(json.dumps(DEFAULTS)), {}, "<defaults>"
    source = str(path)
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", source) from e
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        m = e.problem_mark
        raise ConfigError(e.problem or "invalid YAML", source, m.line + 1 if m else None,
                          m.column + 1 if m else None) from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", source, 1, 1)
    marks = _marks(node)
    return _merge(DEFAULTS, data, marks, source), marks, source


@dataclass
class Resolved:
    cfg: dict
    marks: dict
    source: str

    def fail(self, key: str, message: str):
        line, col = self.marks.get(key, (None, None))
        if line is None:
            raise ConfigError(f"'{key}': {message}", "command line" if self.source == "<defaults>" else self.source)
        raise ConfigError(f"'{key}': {message}", self.source, line, col)

    def get(self, key: str):
        v = self.cfg
        for part in key.split("."):
            v = v[part]
        return v

    def number(self, key: str, positive: bool = True, integer: bool = False):
        v = self.get(key)
        ok = isinstance(v, int) if integer else isinstance(v, (int, float))
        if isinstance(v, bool) or not ok:
            self.fail(key, f"expected {'an integer' if integer else 'a number'}, got {v!r}")
        if positive and not v > 0:
            self.fail(key, "must be positive")
        return v

    def triple(self, key: str):
        v = self.get(key)
        if not (isinstance(v, list) and len(v) == 3 and all(isinstance(x, (int, float)) and x >= 0 for x in v)):
            self.fail(key, f"expected three non-negative numbers, got {v!r}")
        return tuple(float(x) for x in v)

    def choice(self, key: str, options):
        v = self.get(key)
        if v not in options:
            self.fail(key, f"expected one of {sorted(options)}, got {v!r}")
        return v


def _set(cfg: dict, key: str, value, marks: dict):
    d = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        d = d[p]
    d[parts[-1]] = value
    marks.pop(key, None)


def resolve(args) -> Resolved:
    cfg, marks, source = load_config(getattr(args, "config", None))
    overrides = {
        "world": getattr(args, "world", None),
        "seed": getattr(args, "seed", None),
        "sensors": getattr(args, "sensors", None),
        "filter.particles": getattr(args, "particles", None),
        "filter.workers": getattr(args, "workers", None),
        "filter.policy": getattr(args, "policy", None),
    }
    seq = getattr(args, "seq", None)
    if seq:
        overrides["sequences"] = "all" if seq == "all" else seq.split(",")
    seeds = getattr(args, "seeds", None)
    if seeds:
        overrides["seeds"] = parse_seeds(seeds)
    for k, v in overrides.items():
        if v is not None:
            _set(cfg, k, v, marks)
    return Resolved(cfg, marks, source)


def parse_seeds(text: str) -> list[int]:
    """'0-5' or '0,3,7' or a mix."""
    out = []
    try:
        for part in text.split(","):
            if "-" in part:
                a, b = part.split("-")
                out.extend(range(int(a), int(b) + 1))
            elif part:
                out.append(int(part))
    except ValueError as e:
        raise ConfigError(f"bad seed list {text!r}") from e
    if not out:
        raise ConfigError(f"bad seed list {text!r}")
    return out


def filter_config(r: Resolved, policy: str | None = None, seed: int = 0) -> FilterConfig:
    policies = {p.value for p in NumericPolicy}
    pol = policy or r.get("filter.policy")
    for p in str(pol).split(","):
        if p not in policies:
            r.fail("filter.policy", f"expected one of {sorted(policies)}, got {p!r}")
    return FilterConfig(
        n_particles=r.number("filter.particles", integer=True),
        sigma_odom=r.triple("filter.sigma_odom"),
        sigma_obs=float(r.number("filter.sigma_obs")),
        sigma_obs_unit=r.choice("filter.sigma_obs_unit", {"meters", "cells"}),
        r_max=float(r.number("filter.r_max")),
        d_xy=float(r.number("filter.d_xy")),
        d_theta=float(r.number("filter.d_theta")),
        policy=str(pol).split(",")[0],
        workers=r.number("filter.workers", integer=True),
        motion_update=r.choice("filter.motion_update", set(MOTION_UPDATES)),
        seed=seed,
    )


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, r: Resolved, files: list[Path], name: str = "manifest.json") -> Path:
    manifest = {
        "command": command,
        "config": r.cfg,
        "config_hash": config_hash(r.cfg),
        "seed": r.cfg["seed"],
        "schema": SCHEMA,
        "schema_version": SCHEMA_VERSION,
        "files": {p.name: file_hash(p) for p in sorted(files)},
    }
    path = out_dir / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _data_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(DATA_ENV) or "data")


# --- commands -----------------------------------------------------------------


def cmd_simulate(args) -> int:
    r = resolve(args)
    worlds = builtin_worlds()
    world_name = r.choice("world", set(worlds))
    if r.number("resolution") != RESOLUTION:
        r.fail("resolution", f"built-in worlds are drawn at {RESOLUTION} m per cell")
    fmt = r.choice("format", {"jsonl", "bin"})
    seed = r.number("seed", positive=False, integer=True)
    if seed < 0:
        r.fail("seed", "must be non-negative")
    specs = _select_sequences(r)
    noise = SensorNoise(float(r.number("sim.range_sigma", positive=False)), float(r.number("sim.dropout", positive=False)),
                        float(r.number("sim.max_range")))
    odom_sigma = r.triple("sim.odom_sigma")
    world = worlds[world_name]
    out = _data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = list(_map_files(save_map(world.grid, out / MAP_NAME)))
    for k, spec in enumerate(specs):
        rec = simulate_sequence(world, spec, odom_sigma, noise, seed=seed * 1000 + k)
        files.append(write_sequence(rec, out / f"{spec.name}.{fmt}"))
        log.info("wrote %s (%d ticks)", files[-1], len(rec))
    path = write_manifest(out, "simulate", r, files)
    print(f"{len(specs)} sequences -> {out} (manifest {path.name}, config {config_hash(r.cfg)[:12]})")
    return EXIT_OK


def _map_files(sidecar: Path) -> tuple[Path, Path]:
    return sidecar, sidecar.with_suffix(".pgm")


def _select_sequences(r: Resolved):
    specs = builtin_sequences()
    want = r.get("sequences")
    if want == "all":
        return specs
    names = {s.name for s in specs}
    if not isinstance(want, list) or not want:
        r.fail("sequences", "expected 'all' or a list of sequence names")
    for w in want:
        if w not in names:
            r.fail("sequences", f"unknown sequence {w!r}; have {sorted(names)}")
    return [s for s in specs if s.name in want]


def _load_dataset(data: Path, r: Resolved):
    if not (data / f"{MAP_NAME}.yaml").exists():
        raise DataError(f"{data}: no {MAP_NAME}.yaml; run 'tofmcl simulate' first")
    grid = load_map(data / f"{MAP_NAME}.yaml")
    paths = sorted(p for p in data.iterdir() if p.suffix in (".jsonl", ".bin") and p.stem != MAP_NAME)
    want = r.get("sequences")
    if want != "all":
        paths = [p for p in paths if p.stem in want]
    if not paths:
        raise DataError(f"{data}: no sequence files")
    return grid, [read_sequence(p) for p in paths]


def _one_run(job):
    rec, grid, field, config, sensors = job
    return report_row(run_localize(rec, grid, config, field, sensors))


def cmd_localize(args) -> int:
    r = resolve(args)
    data = _data_dir(args.data)
    sensors_opt = str(r.get("sensors")).split(",")
    for s in sensors_opt:
        if s not in SENSOR_SETS:
            r.fail("sensors", f"expected one of {sorted(SENSOR_SETS)}, got {s!r}")
    policies = str(r.get("filter.policy")).split(",")
    base = filter_config(r)
    seeds = r.get("seeds")
    if not (isinstance(seeds, list) and seeds and all(isinstance(s, int) and s >= 0 for s in seeds)):
        r.fail("seeds", "expected a non-empty list of non-negative integers")
    grid, records = _load_dataset(data, r)
    jobs = []
    fields = {}
    for pol in policies:
        cfg = replace(base, policy=NumericPolicy.parse(pol))
        fields.setdefault(cfg.policy.quantized_map, compute_edt(grid, cfg.r_max))
        for sensors in sensors_opt:
            for rec in records:
                for seed in seeds:
                    jobs.append((rec, grid, fields[cfg.policy.quantized_map], replace(cfg, seed=seed), sensors))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            rows = list(ex.map(_one_run, jobs))
    else:
        rows = [_one_run(j) for j in jobs]
    out = Path(args.out or "report.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    bench_mod.write_csv(rows, REPORT_FIELDS, out)
    write_manifest(out.parent, "localize", r, [out], name=out.stem + ".manifest.json")
    _print_summary(rows)
    return EXIT_OK


def _groups(rows):
    groups = {}
    for row in rows:
        key = (int(row["particles"]), row["policy"], row["sensors"])
        groups.setdefault(key, []).append(row)
    return groups


SUMMARY_FIELDS = ["particles", "policy", "sensors", "runs", "success_rate", "median_ate_m", "median_convergence_s"]


def summary_rows(rows) -> list[dict]:
    out = []
    for (n, pol, sensors), rs in sorted(_groups(rows).items()):
        norm = [{**x, "success": bool(int(x["success"])),
                 "convergence_tick": None if x["convergence_tick"] in ("", None) else int(x["convergence_tick"]),
                 "ate_rmse_m": None if x["ate_rmse_m"] in ("", None) else float(x["ate_rmse_m"])} for x in rs]
        s = summarize_rows(norm)
        out.append({"particles": n, "policy": pol, "sensors": sensors, "runs": s.runs,
                    "success_rate": f"{s.success_rate:.4f}",
                    "median_ate_m": "" if s.median_ate is None else f"{s.median_ate:.4f}",
                    "median_convergence_s": "" if s.median_convergence_s is None else f"{s.median_convergence_s:.3f}"})
    return out


def _print_summary(rows):
    for s in summary_rows(rows):
        print(f"N={s['particles']:>6} {s['policy']:<7} {s['sensors']:<6} runs={s['runs']:>3} "
              f"success={float(s['success_rate']) * 100:5.1f}% ate={s['median_ate_m'] or '-':>7} "
              f"conv={s['median_convergence_s'] or '-'} s")


def cmd_eval(args) -> int:
    rows = []
    for p in args.reports:
        if not Path(p).exists():
            raise DataError(f"{p}: no such report")
        rows.extend(read_report(p))
    if not rows:
        raise DataError("no runs in the given reports")
    table = summary_rows(rows)
    if args.out:
        bench_mod.write_csv(table, SUMMARY_FIELDS, args.out)
    _print_summary(rows)
    return EXIT_OK


def _int_list(text: str, what: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v]
    except ValueError as e:
        raise ConfigError(f"bad {what} list {text!r}") from e
    if not vals or min(vals) < 1:
        raise ConfigError(f"bad {what} list {text!r}")
    return vals


def cmd_bench(args) -> int:
    r = resolve(argparse.Namespace(config=args.config))
    config = filter_config(r)
    particles = _int_list(args.particles, "particle")
    workers = _int_list(args.workers, "worker")
    if args.reps < bench_mod.MIN_REPS or args.warmup < bench_mod.MIN_WARMUP:
        raise ConfigError(f"need --reps >= {bench_mod.MIN_REPS} and --warmup >= {bench_mod.MIN_WARMUP}")
    results = bench_mod.bench_step(particles, workers, args.reps, args.warmup, config)
    rows = bench_mod.step_rows(results)
    out = Path(args.out or "bench.csv")
    bench_mod.write_csv(rows, bench_mod.STEP_FIELDS, out)
    sp = bench_mod.speedup(results)
    for n in particles:
        line = " ".join(f"w{w}={sp.get((n, w), float('nan')):.2f}x" for w in workers)
        print(f"N={n:>6} total speedup {line}")
    if args.memory:
        bench_mod.write_csv(bench_mod.bench_memory(particles=particles), bench_mod.MEMORY_FIELDS, args.memory)
    return EXIT_OK


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tofmcl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, filt=True):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--world")
        p.add_argument("--seq", help="'all' or comma-separated sequence names")
        if filt:
            p.add_argument("--seeds", help="e.g. 0-5 or 0,2,4")
            p.add_argument("--particles", type=int)
            p.add_argument("--policy", help="fp32, fp32qm, fp16qm (comma-separated for a sweep)")
            p.add_argument("--sensors", help="both or front (comma-separated for a sweep)")
            p.add_argument("--workers", type=int)

    p = sub.add_parser("simulate", help="generate a dataset from a built-in world")
    common(p, filt=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default ${DATA_ENV} or ./data)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("localize", help="run the filter over a dataset")
    common(p)
    p.add_argument("--data", help=f"dataset directory (default ${DATA_ENV} or ./data)")
    p.add_argument("--jobs", type=int, default=1, help="parallel (sequence, seed) runs")
    p.add_argument("--out", help="report CSV (default report.csv)")
    p.set_defaults(fn=cmd_localize)

    p = sub.add_parser("eval", help="summarize localization reports")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out", help="summary CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="per-stage timing and speedup")
    p.add_argument("--config")
    p.add_argument("--particles", default=",".join(map(str, bench_mod.PARTICLE_GRID)))
    p.add_argument("--workers", default=",".join(map(str, bench_mod.WORKER_GRID)))
    p.add_argument("--reps", type=int, default=bench_mod.MIN_REPS)
    p.add_argument("--warmup", type=int, default=bench_mod.MIN_WARMUP)
    p.add_argument("--out", help="timing CSV (default bench.csv)")
    p.add_argument("--memory", help="also write the memory-footprint table here")
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ConsistencyError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except (DataError, InvalidInputError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
