"""Case-data loading, synthetic data, run configuration and on-disk formats.

All tables are tab-separated text with a mandatory header row.  Floats are
written with ``repr`` so they reload bit-for-bit.

Column orders:

* population: ``index, u_alpha0 .. u_kappa, distance, weight`` (+ ``# stage``/``# epsilon`` comment lines)
* trace: ``trial, stage, batches, cumulative_runs, epsilon, acceptance_ratio, kernel, step_s, beta_alpha, beta_beta, frozen``
* prediction: ``day, series, median, lower, upper``
* observed series: ``day, A, R, D`` (+ ``# population`` comment line)
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .abc_core import CaseDataSeries
from .epi_model import PARAM_NAMES, ParameterVector, SimConfig, simulate_batch
from .sampling import StreamBatch
from .smc import KERNELS, ParticlePopulation, StageRecord, StepSizeState

TRACE_COLUMNS = (
    "trial", "stage", "batches", "cumulative_runs", "epsilon", "acceptance_ratio",
    "kernel", "step_s", "beta_alpha", "beta_beta", "frozen",
)
POPULATION_COLUMNS = ("index", *(f"u_{p}" for p in PARAM_NAMES), "distance", "weight")
PREDICTION_COLUMNS = ("day", "series", "median", "lower", "upper")
SERIES_COLUMNS = ("day", "A", "R", "D")

JHU_FILES = {
    "confirmed": "time_series_covid19_confirmed_global.csv",
    "recovered": "time_series_covid19_recovered_global.csv",
    "deaths": "time_series_covid19_deaths_global.csv",
}


class DataError(ValueError):
    pass


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# -- configuration ---------------------------------------------------------------


@dataclass
class RunConfig:
    country: str = "synthetic"
    population: int = 100_000
    train_days: int = 120
    test_days: int = 30
    N: int = 1000
    batch: int = 100
    # simulations; ``batch_budget`` (batches of ``batch``) overrides when set
    run_budget: int = 100_000
    batch_budget: int | None = None
    survival_ratio: float = 0.5
    kernel: str = "BDSS"
    seed: int = 0
    trials: int = 1
    s0: float = 0.1
    step_as_variance: bool = False
    variance_mode: str = "poisson"
    target_epsilon: float | None = None
    hard_budget_factor: float = 2.0
    workers: int = 1

    def __post_init__(self):
        if self.train_days < 1:
            raise ValueError("train_days must be >= 1")
        for name in ("population", "N", "batch", "run_budget", "trials"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.test_days < 0:
            raise ValueError("test_days must be non-negative")
        if self.batch_budget is not None and self.batch_budget < 1:
            raise ValueError("batch_budget must be positive")
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")

    @property
    def simulation_budget(self) -> int:
        return self.batch_budget * self.batch if self.batch_budget is not None else self.run_budget

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def smc_config(self, seed: int | None = None):
        from .smc import SMCConfig

        return SMCConfig(
            N=self.N, batch_size=self.batch, survival_ratio=self.survival_ratio,
            run_budget=self.simulation_budget, seed=self.seed if seed is None else seed,
            s0=self.s0, step_as_variance=self.step_as_variance, target_epsilon=self.target_epsilon,
            hard_budget_factor=self.hard_budget_factor, workers=self.workers,
        )


def config_hash(data: dict, exclude=()) -> str:
    """Short sha256 of the canonical JSON of ``data`` minus ``exclude`` keys."""
    payload = {k: v for k, v in sorted(data.items()) if k not in exclude}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_manifest(path, config: dict, **extra) -> Path:
    path = Path(path)
    doc = {"code_version": __version__, "config": config, "config_hash": config_hash(config), **extra}
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc


def _write_text(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# -- case data -------------------------------------------------------------------


def _read_jhu_table(path: Path, country: str) -> tuple[list[str], np.ndarray]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 5 or header[1] != "Country/Region":
            raise DataError(f"{path}: header is not in the JHU global time-series layout")
        dates = header[4:]
        total = np.zeros(len(dates), dtype=np.int64)
        seen, found = set(), False
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            seen.add(row[1])
            if row[1] != country:
                continue
            found = True
            for j, cell in enumerate(row[4:]):
                try:
                    total[j] += int(float(cell)) if cell.strip() else 0
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {dates[j]!r} holds non-numeric {cell!r}") from None
    if not found:
        raise DataError(f"country {country!r} not in {path.name}; available: {', '.join(sorted(seen))}")
    return dates, total


def _parse_date(s: str):
    for fmt_ in ("%m/%d/%y", "%m/%d/%Y", "%Y-%m-%d"):
        try:
            return datetime.strptime(s, fmt_).date()
        except ValueError:
            continue
    raise DataError(f"unrecognised date {s!r}")


def load_case_data(path, country: str, start_date: str, days: int, population: int) -> CaseDataSeries:
    """Active/recovered/deaths series from JHU global time-series CSVs.

    ``path`` is a directory holding the three ``time_series_covid19_*_global.csv``
    files, or a mapping ``{"confirmed"|"recovered"|"deaths": file}``.
    Rows for the same country (provinces) are summed; ``A = C - R - D``.
    """
    files = {k: Path(path) / v for k, v in JHU_FILES.items()} if not isinstance(path, dict) else {
        k: Path(v) for k, v in path.items()
    }
    tables = {}
    for kind in JHU_FILES:
        if kind not in files:
            raise DataError(f"missing {kind} file")
        tables[kind] = _read_jhu_table(files[kind], country)
    dates = tables["confirmed"][0]
    for kind, (d, _) in tables.items():
        if d != dates:
            raise DataError(f"{files[kind]}: date columns differ from the confirmed file")
    parsed = [_parse_date(d) for d in dates]
    start = _parse_date(start_date)
    if start not in parsed:
        raise DataError(f"start date {start_date} outside file range {dates[0]} .. {dates[-1]}")
    i0 = parsed.index(start)
    if i0 + days > len(dates):
        raise DataError(f"{days} days from {start_date} run past the last date {dates[-1]}")
    sl = slice(i0, i0 + days)
    C, R, D = (tables[k][1][sl] for k in ("confirmed", "recovered", "deaths"))
    window = dates[sl]
    for name, series in (("confirmed", C), ("recovered", R), ("deaths", D)):
        drops = np.flatnonzero(np.diff(series) < 0)
        if drops.size:
            raise DataError(f"cumulative {name} decreases on {window[drops[0] + 1]} (column {name})")
    A = C - R - D
    if np.any(A < 0):
        bad = int(np.argmax(A < 0))
        raise DataError(f"derived active cases negative on {window[bad]} (confirmed < recovered + deaths)")
    try:
        return CaseDataSeries(A, R, D, population, list(window))
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def generate_synthetic(theta_true: ParameterVector, config: SimConfig, seed: int) -> CaseDataSeries:
    """One stochastic trajectory of ``config.days`` days, drawn from stream 0 of ``seed``."""
    traj = simulate_batch(StreamBatch(seed, np.zeros(1, dtype=np.uint64)), theta_true.as_array()[None], config)
    if not traj.valid[0]:
        raise ValueError("theta_true gives an infeasible initial state for this config")
    obs = traj.observed[0]
    return CaseDataSeries(obs[:, 0], obs[:, 1], obs[:, 2], config.population)


def write_series(path, series: CaseDataSeries, theta_true: ParameterVector | None = None) -> Path:
    path = Path(path)
    lines = [f"# population\t{series.P}"]
    if theta_true is not None:
        lines.append("# theta_true\t" + "\t".join(fmt(v) for v in theta_true.as_array()))
    lines.append("\t".join(SERIES_COLUMNS))
    for t in range(series.days):
        day = series.dates[t] if series.dates is not None else str(t)
        lines.append(f"{day}\t{series.A[t]}\t{series.R[t]}\t{series.D[t]}")
    _write_text(path, "\n".join(lines) + "\n")
    return path


def read_series(path) -> tuple[CaseDataSeries, ParameterVector | None]:
    meta, rows = _read_table(path, SERIES_COLUMNS)
    if "population" not in meta:
        raise DataError(f"{path}: missing '# population' line")
    days = [r[0] for r in rows]
    cols = np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int64).reshape(-1, 3)
    dates = None if all(d.isdigit() for d in days) else days
    theta = None
    if "theta_true" in meta:
        theta = ParameterVector.from_array([float(v) for v in meta["theta_true"]])
    series = CaseDataSeries(cols[:, 0], cols[:, 1], cols[:, 2], int(meta["population"][0]), dates)
    return series, theta


def _read_table(path, columns) -> tuple[dict, list[list[str]]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    meta, rows, header = {}, [], None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        if line.startswith("# "):
            key, *vals = line[2:].split("\t")
            meta[key] = vals
            continue
        cells = line.split("\t")
        if header is None:
            header = tuple(cells)
            if header != tuple(columns):
                raise DataError(f"{path}:{lineno}: header {header} != expected {tuple(columns)}")
            continue
        if len(cells) != len(columns):
            raise DataError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(cells)}")
        rows.append(cells)
    if header is None:
        raise DataError(f"{path}: missing header row")
    return meta, rows


# -- populations -----------------------------------------------------------------


def persist_population(path, pop: ParticlePopulation) -> Path:
    path = Path(path)
    lines = [f"# stage\t{pop.stage}", f"# epsilon\t{fmt(float(pop.epsilon))}", "\t".join(POPULATION_COLUMNS)]
    for k in range(len(pop)):
        cells = [str(k), *(fmt(v) for v in pop.theta_unit[k]), fmt(pop.distances[k]), fmt(pop.weights[k])]
        lines.append("\t".join(cells))
    _write_text(path, "\n".join(lines) + "\n")
    return path


def load_population(path) -> ParticlePopulation:
    meta, rows = _read_table(path, POPULATION_COLUMNS)
    arr = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64).reshape(-1, 10)
    return ParticlePopulation(arr[:, :8], arr[:, 8], arr[:, 9], int(meta["stage"][0]), float(meta["epsilon"][0]))


# -- traces ----------------------------------------------------------------------


def trace_row(trial: int, rec: StageRecord) -> str:
    st = rec.step
    shape = st.beta_shape
    cells = [
        trial, rec.stage, rec.batches, rec.runs_used, float(rec.epsilon), float(rec.acceptance_ratio),
        st.kind, float(st.scalar_s) if st.kind == "MCMC" else math.nan,
        float(shape.alpha) if shape else math.nan, float(shape.beta) if shape else math.nan,
        st.adaptation_frozen,
    ]
    return "\t".join(fmt(c) for c in cells)


class TraceWriter:
    """Line-oriented trace; every stage is flushed as soon as it is recorded."""

    def __init__(self, path, trial: int = 0):
        self.path = Path(path)
        self.trial = trial
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fh = open(self.path, "w")
        except OSError as exc:
            raise OSError(f"cannot write {self.path}: {exc}") from exc
        self._fh.write("\t".join(TRACE_COLUMNS) + "\n")
        self._fh.flush()

    def __call__(self, rec: StageRecord):
        self._fh.write(trace_row(self.trial, rec) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def persist_trace(path, records: list[StageRecord], trial: int = 0) -> Path:
    with TraceWriter(path, trial) as w:
        for rec in records:
            w(rec)
    return Path(path)


@dataclass
class TraceRow:
    trial: int
    stage: int
    batches: int
    cumulative_runs: int
    epsilon: float
    acceptance_ratio: float
    kernel: str
    step_s: float
    beta_alpha: float
    beta_beta: float
    frozen: bool


def load_trace(path) -> list[TraceRow]:
    _, rows = _read_table(path, TRACE_COLUMNS)
    out = []
    for r in rows:
        out.append(TraceRow(int(r[0]), int(r[1]), int(r[2]), int(r[3]), float(r[4]), float(r[5]),
                            r[6], float(r[7]), float(r[8]), float(r[9]), bool(int(r[10]))))
    return out


def records_from_trace(rows: list[TraceRow]) -> list[StageRecord]:
    """Rebuild the persisted projection of stage records (no timings, no counters)."""
    from .sampling import BetaShape

    out = []
    for r in rows:
        shape = None if math.isnan(r.beta_alpha) else BetaShape(r.beta_alpha, r.beta_beta)
        s = r.step_s if r.kernel == "MCMC" else 0.1
        step = StepSizeState(r.kernel, scalar_s=s, beta_shape=shape, adaptation_frozen=r.frozen)
        out.append(StageRecord(r.stage, r.epsilon, r.cumulative_runs, r.batches, r.acceptance_ratio, step))
    return out


# -- predictive bands ------------------------------------------------------------


@dataclass
class PredictionBand:
    median: np.ndarray  # (days, 3)
    lower: np.ndarray
    upper: np.ndarray
    series: tuple[str, ...] = field(default=("A", "R", "D"))

    @property
    def days(self) -> int:
        return self.median.shape[0]

    def covers(self, truth) -> np.ndarray:
        """Boolean ``(days, 3)``: truth inside ``[lower, upper]``."""
        truth = np.asarray(truth)
        return (truth >= self.lower) & (truth <= self.upper)


def persist_prediction(path, band: PredictionBand) -> Path:
    lines = ["\t".join(PREDICTION_COLUMNS)]
    for t in range(band.days):
        for k, name in enumerate(band.series):
            lines.append("\t".join([str(t), name, fmt(band.median[t, k]), fmt(band.lower[t, k]), fmt(band.upper[t, k])]))
    _write_text(Path(path), "\n".join(lines) + "\n")
    return Path(path)


def load_prediction(path) -> PredictionBand:
    _, rows = _read_table(path, PREDICTION_COLUMNS)
    series = tuple(dict.fromkeys(r[1] for r in rows))
    days = len(rows) // len(series)
    vals = np.array([[float(r[2]), float(r[3]), float(r[4])] for r in rows]).reshape(days, len(series), 3)
    return PredictionBand(vals[..., 0], vals[..., 1], vals[..., 2], series)
