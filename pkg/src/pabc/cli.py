"""Experiment runner: ``pabc {synth,infer,predict,report,bench}``.

A JSON config file may set any :class:`RunConfig` field plus ``levels``,
``kernels`` and ``trials``; command-line flags override it.  Each
``(kernel, level, trial)`` cell writes a trace, a final population and a
manifest whose presence marks the cell done, so an interrupted sweep can
simply be re-run.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import statistics
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .abc_core import CaseDataSeries, to_natural
from .data_io import (
    DataError, PredictionBand, RunConfig, TraceWriter, config_hash, fmt, generate_synthetic,
    load_case_data, load_population, load_trace, persist_population, persist_prediction, read_manifest,
    read_series, write_manifest, write_series,
)
from .epi_model import ParameterVector, SimConfig, simulate_batch
from .sampling import StreamBatch
from .smc import KERNELS, run_abc_smc

DEFAULT_LEVELS = (10, 100, 1000, 10000, 100000)
# what may differ between traces that are still comparable within one level
CELL_KEYS = ("kernel", "seed", "trials")
DEFAULT_THETA = (0.1, 20.0, 0.5, 0.05, 0.1, 0.01, 0.5, 1.0)


@dataclass
class ExperimentSpec:
    base: RunConfig
    parallelism_levels: list[int] = field(default_factory=lambda: list(DEFAULT_LEVELS))
    trials: int = 10
    kernels: list[str] = field(default_factory=lambda: list(KERNELS))

    def __post_init__(self):
        if not self.parallelism_levels or any(b < 1 for b in self.parallelism_levels):
            raise ValueError("parallelism levels must be positive")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        bad = set(self.kernels) - set(KERNELS)
        if bad or not self.kernels:
            raise ValueError(f"kernels must be a non-empty subset of {KERNELS}")


@dataclass
class CellResult:
    kernel: str
    level: int
    trial: int
    seed: int
    final_epsilon: float
    runs_used: int
    status: str
    wall_time: float
    sim_time: float
    trace_path: Path
    population_path: Path
    skipped: bool = False


def derive_seed(master: int, kernel: str, level: int, trial: int) -> int:
    digest = hashlib.sha256(f"{master}:{kernel}:{level}:{trial}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def cell_config(base: RunConfig, kernel: str, level: int, trial: int) -> RunConfig:
    return replace(base, kernel=kernel, batch=level, seed=derive_seed(base.seed, kernel, level, trial), trials=1)


def data_digest(series: CaseDataSeries) -> str:
    return hashlib.sha256(series.as_array().tobytes() + str(series.P).encode()).hexdigest()[:12]


def cell_paths(out_dir: Path, kernel: str, level: int, trial: int, chash: str) -> dict[str, Path]:
    stem = f"{kernel}_B{level}_t{trial}_{chash}"
    return {
        "trace": out_dir / f"{stem}.trace.tsv",
        "population": out_dir / f"{stem}.population.tsv",
        "manifest": out_dir / f"{stem}.manifest.json",
    }


def run_cell(base: RunConfig, train: CaseDataSeries, kernel: str, level: int, trial: int,
             out_dir: Path, *, resume: bool = True) -> CellResult:
    cfg = cell_config(base, kernel, level, trial)
    cfg_dict = cfg.to_dict()
    chash = config_hash(cfg_dict)
    paths = cell_paths(Path(out_dir), kernel, level, trial, chash)
    ddigest = data_digest(train)
    if resume and paths["manifest"].exists():
        man = read_manifest(paths["manifest"])
        if man.get("config_hash") == chash and man.get("data_digest") == ddigest:
            s = man["summary"]
            return CellResult(kernel, level, trial, cfg.seed, float(s["final_epsilon"]), s["runs_used"],
                              s["status"], math.nan, math.nan, paths["trace"], paths["population"], True)
    sim_cfg = train.sim_config(variance_mode=cfg.variance_mode)
    with TraceWriter(paths["trace"], trial) as writer:
        result = run_abc_smc(kernel, train, cfg.smc_config(), sim_config=sim_cfg, on_stage=writer)
    persist_population(paths["population"], result.population)
    summary = {"final_epsilon": fmt(result.final_epsilon), "runs_used": result.runs_used,
               "status": result.status, "stages": len(result.records)}
    write_manifest(paths["manifest"], cfg_dict, data_digest=ddigest, trial=trial, level=level,
                   kernel=kernel, base_hash=config_hash(base.to_dict(), exclude=CELL_KEYS + ("batch",)),
                   summary=summary)
    return CellResult(kernel, level, trial, cfg.seed, result.final_epsilon, result.runs_used, result.status,
                      result.wall_time, result.sim_time, paths["trace"], paths["population"])


def cmd_infer(spec: ExperimentSpec, train: CaseDataSeries, out_dir, *, resume: bool = True,
              log=print) -> list[CellResult]:
    out = []
    for kernel in spec.kernels:
        for level in spec.parallelism_levels:
            for trial in range(spec.trials):
                try:
                    res = run_cell(spec.base, train, kernel, level, trial, Path(out_dir), resume=resume)
                except Exception as exc:  # one bad cell must not sink the sweep
                    log(f"failed\t{kernel}\tB={level}\ttrial={trial}\t{type(exc).__name__}: {exc}")
                    continue
                tag = "skipped" if res.skipped else res.status
                log(f"{kernel}\tB={level}\ttrial={trial}\tfinal_epsilon={fmt(res.final_epsilon)}"
                    f"\truns={res.runs_used}\t{tag}")
                out.append(res)
    return out


def predict_band(population_thetas_unit: np.ndarray, sim_cfg: SimConfig, seed: int,
                 lower_q: float = 0.5, upper_q: float = 99.5) -> PredictionBand:
    """Per-day median and ``[lower_q, upper_q]`` percentiles, one trajectory per particle."""
    n = population_thetas_unit.shape[0]
    if n < 2:
        raise ValueError("predictive simulation needs at least 2 particles")
    traj = simulate_batch(StreamBatch.for_batch(seed, 0, n), to_natural(population_thetas_unit), sim_cfg)
    obs = traj.observed[traj.valid].astype(np.float64)
    if obs.shape[0] < 2:
        raise ValueError("fewer than 2 particles give a feasible initial state")
    lo, med, hi = np.percentile(obs, [lower_q, 50.0, upper_q], axis=0)
    return PredictionBand(med, lo, hi)


def cmd_predict(population_path, data: CaseDataSeries, train_days: int, horizon_days: int, out_path,
                *, seed: int = 0, noise_mode: str = "stochastic", variance_mode: str = "poisson") -> PredictionBand:
    pop = load_population(population_path)
    if len(pop) == 0:
        raise ValueError(f"{population_path}: empty population")
    cfg = data.sim_config(noise_mode=noise_mode, variance_mode=variance_mode, days=train_days + horizon_days)
    band = predict_band(pop.theta_unit, cfg, seed)
    persist_prediction(out_path, band)
    return band


# -- report ----------------------------------------------------------------------


def _variance(values: list[float]) -> float:
    return statistics.variance(values) if len(values) > 1 else math.nan


def runs_to_reach(rows, threshold: float) -> int | None:
    for r in rows:
        if r.epsilon <= threshold:
            return r.cumulative_runs
    return None


def _ratio(a, b):
    if a is None or b is None or (isinstance(a, float) and math.isnan(a)) or (isinstance(b, float) and math.isnan(b)):
        return math.nan
    if b == 0:
        return 1.0 if a == 0 else math.inf
    return a / b


def cmd_report(trace_paths, *, threshold: float | None = None, exclude_above: float | None = None) -> dict:
    """Per ``(kernel, level)``: final-tolerance mean/variance and runs to reach ``threshold``.

    Traces are grouped by level; every trace of a level must come from the
    same base config and data (read from its manifest).
    """
    groups: dict[int, dict[str, list]] = {}
    bases: dict[int, set] = {}
    for p in map(Path, trace_paths):
        man_path = p.with_name(p.name.replace(".trace.tsv", ".manifest.json"))
        man = read_manifest(man_path)
        level, kernel = int(man["level"]), man["kernel"]
        bases.setdefault(level, set()).add((man["base_hash"], man["data_digest"]))
        groups.setdefault(level, {}).setdefault(kernel, []).append(load_trace(p))
    for level, b in bases.items():
        if len(b) > 1:
            raise ValueError(f"traces at B={level} come from different configs or data: {sorted(b)}")
    report = {}
    for level, by_kernel in sorted(groups.items()):
        entry = {}
        for kernel, traces in sorted(by_kernel.items()):
            finals = [t[-1].epsilon for t in traces if t]
            kept = [f for f in finals if exclude_above is None or f <= exclude_above]
            row = {
                "trials": len(finals), "used": len(kept),
                "mean_final_epsilon": statistics.fmean(kept) if kept else math.nan,
                "var_final_epsilon": _variance(kept),
                "mean_runs": statistics.fmean(t[-1].cumulative_runs for t in traces if t),
            }
            if threshold is not None:
                hits = [runs_to_reach(t, threshold) for t in traces]
                reached = [h for h in hits if h is not None]
                row["runs_to_threshold"] = hits
                row["mean_runs_to_threshold"] = statistics.fmean(reached) if reached else math.nan
            entry[kernel] = row
        if "MCMC" in entry and "BDSS" in entry:
            m, b = entry["MCMC"], entry["BDSS"]
            entry["ratios"] = {
                "variance_bdss_over_mcmc": _ratio(b["var_final_epsilon"], m["var_final_epsilon"]),
                "mean_epsilon_bdss_over_mcmc": _ratio(b["mean_final_epsilon"], m["mean_final_epsilon"]),
                "runs_bdss_over_mcmc": _ratio(b.get("mean_runs_to_threshold", b["mean_runs"]),
                                              m.get("mean_runs_to_threshold", m["mean_runs"])),
            }
        report[level] = entry
    return report


# -- bench -----------------------------------------------------------------------


def cmd_bench(spec: ExperimentSpec, train: CaseDataSeries, out_path, *, log=print) -> dict:
    """Time the simulation phase against everything else, per run."""
    rows = []
    for kernel in spec.kernels:
        for level in spec.parallelism_levels:
            for trial in range(spec.trials):
                cfg = cell_config(spec.base, kernel, level, trial)
                t0 = time.perf_counter()
                res = run_abc_smc(kernel, train, cfg.smc_config(), sim_config=train.sim_config(variance_mode=cfg.variance_mode))
                total = time.perf_counter() - t0
                rows.append((kernel, level, trial, total, res.sim_time, total - res.sim_time, res.sim_time / total))
                log(f"{kernel}\tB={level}\ttrial={trial}\twall={total:.3f}s\tsim_fraction={res.sim_time / total:.3f}")
    header = "kernel\tlevel\ttrial\twall_time\tsim_time\tother_time\tsim_fraction"
    lines = [header] + ["\t".join(fmt(c) for c in r) for r in rows]
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text("\n".join(lines) + "\n")
    summary = {}
    for kernel in spec.kernels:
        for level in spec.parallelism_levels:
            sel = [r for r in rows if r[0] == kernel and r[1] == level]
            fr = [r[6] for r in sel]
            per_run = [r[3] for r in sel]
            summary[(kernel, level)] = {
                "median_sim_fraction": statistics.median(fr), "mean_sim_fraction": statistics.fmean(fr),
                "median_wall_time": statistics.median(per_run), "mean_wall_time": statistics.fmean(per_run),
            }
    return summary


# -- argument handling -----------------------------------------------------------


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc


def _add_run_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", help="observed series TSV (from `synth`)")
    p.add_argument("--jhu-dir", help="directory with JHU global time-series CSVs")
    p.add_argument("--country")
    p.add_argument("--start-date")
    for name, typ in [("population", int), ("train-days", int), ("test-days", int), ("N", int),
                      ("batch", int), ("run-budget", int), ("batch-budget", int), ("survival-ratio", float),
                      ("kernel", str), ("seed", int), ("trials", int), ("s0", float),
                      ("variance-mode", str), ("target-epsilon", float), ("workers", int)]:
        p.add_argument(f"--{name}", type=typ, dest=name.replace("-", "_"))
    p.add_argument("--step-as-variance", action="store_true", default=None)
    p.add_argument("--levels", type=int, nargs="+")
    p.add_argument("--kernels", nargs="+", choices=KERNELS)


def _resolve(args) -> tuple[RunConfig, dict]:
    raw = _load_config_file(args.config)
    extra_keys = ("levels", "kernels", "data", "jhu_dir", "start_date")
    extra = {k: raw.pop(k) for k in extra_keys if k in raw}
    for key in vars(RunConfig()):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    for key in extra_keys:
        val = getattr(args, key, None)
        if val is not None:
            extra[key] = val
    return RunConfig.from_dict(raw), extra


def _load_observed(cfg: RunConfig, extra: dict, days: int) -> CaseDataSeries:
    if extra.get("data"):
        series, _ = read_series(extra["data"])
        if series.days < days:
            raise DataError(f"{extra['data']} has {series.days} days, need {days}")
        return series.window(0, days)
    if extra.get("jhu_dir"):
        if not extra.get("start_date"):
            raise DataError("--start-date is required with --jhu-dir")
        return load_case_data(extra["jhu_dir"], cfg.country, extra["start_date"], days, cfg.population)
    raise DataError("no observed data: pass --data or --jhu-dir")


def _spec(cfg: RunConfig, extra: dict) -> ExperimentSpec:
    return ExperimentSpec(cfg, list(extra.get("levels") or [cfg.batch]), cfg.trials,
                          list(extra.get("kernels") or [cfg.kernel]))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pabc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="simulate a synthetic observed series")
    p.add_argument("--theta", type=float, nargs=8, default=list(DEFAULT_THETA))
    p.add_argument("--population", type=int, default=100_000)
    p.add_argument("--days", type=int, default=150)
    p.add_argument("--initial", type=int, nargs=3, default=[100, 10, 2], metavar=("A0", "R0", "D0"))
    p.add_argument("--variance-mode", default="poisson")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", help="run ABC-SMC for every (kernel, level, trial) cell")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-resume", action="store_true")

    p = sub.add_parser("predict", help="predictive bands from a population file")
    _add_run_flags(p)
    p.add_argument("--population-file", required=True)
    p.add_argument("--horizon", type=int, default=None, help="days beyond train_days (default test_days)")
    p.add_argument("--noise-mode", default="stochastic")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="compare kernels across trace files")
    p.add_argument("traces", nargs="+", help="trace files or directories")
    p.add_argument("--threshold", type=float)
    p.add_argument("--exclude-above", type=float)
    p.add_argument("--out")

    p = sub.add_parser("bench", help="time simulation vs non-simulation phases")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="timing TSV")
    return parser


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            cfg = SimConfig(args.population, args.days, tuple(args.initial), variance_mode=args.variance_mode)
            theta = ParameterVector(*args.theta)
            write_series(args.out, generate_synthetic(theta, cfg, args.seed), theta)
            print(f"wrote {args.out}")
        elif args.command == "infer":
            cfg, extra = _resolve(args)
            train = _load_observed(cfg, extra, cfg.train_days)
            results = cmd_infer(_spec(cfg, extra), train, args.out, resume=not args.no_resume)
            if not results:
                raise RuntimeError("every run failed")
        elif args.command == "predict":
            cfg, extra = _resolve(args)
            horizon = cfg.test_days if args.horizon is None else args.horizon
            data = _load_observed(cfg, extra, cfg.train_days)
            cmd_predict(args.population_file, data, cfg.train_days, horizon, args.out, seed=cfg.seed,
                        noise_mode=args.noise_mode, variance_mode=cfg.variance_mode)
            print(f"wrote {args.out}")
        elif args.command == "report":
            paths = []
            for t in args.traces:
                p = Path(t)
                paths.extend(sorted(p.glob("*.trace.tsv")) if p.is_dir() else [p])
            rep = _jsonable(cmd_report(paths, threshold=args.threshold, exclude_above=args.exclude_above))
            text = json.dumps(rep, indent=2, sort_keys=True)
            if args.out:
                Path(args.out).write_text(text + "\n")
            print(text)
        elif args.command == "bench":
            cfg, extra = _resolve(args)
            train = _load_observed(cfg, extra, cfg.train_days)
            summary = cmd_bench(_spec(cfg, extra), train, args.out)
            for (kernel, level), s in summary.items():
                print(f"{kernel}\tB={level}\tmedian_sim_fraction={s['median_sim_fraction']:.3f}"
                      f"\tmean_sim_fraction={s['mean_sim_fraction']:.3f}")
    except Exception as exc:
        print(f"error\t{type(exc).__name__}\t{exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
