"""Stochastic six-compartment COVID-19 model, tau-leaped in one-day steps.

State is ``[S, I, A, R, D, Ru]``; only ``A, R, D`` are observed.  Daily
flows ``S->I, I->A, A->R, A->D, I->Ru`` are drawn from a normal approximation
of Poisson counts, floored, and applied in that order with each flow clamped
to what is left in its source compartment.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass

import numba
import numpy as np

from .sampling import StreamBatch, _ONE, _u64, draw_std_normal_pair

PARAM_NAMES = ("alpha0", "alpha", "n", "beta", "gamma", "delta", "eta", "kappa")
PRIOR_LOWER = np.zeros(8)
PRIOR_UPPER = np.array([1.0, 100.0, 2.0, 1.0, 1.0, 1.0, 1.0, 2.0])
STATE_NAMES = ("S", "I", "A", "R", "D", "Ru")
FLOW_NAMES = ("S->I", "I->A", "A->R", "A->D", "I->Ru")

NOISE_MODES = ("stochastic", "deterministic")
# "poisson": std = sqrt(h); "literal": variance = sqrt(h), i.e. std = h ** 0.25
VARIANCE_MODES = ("poisson", "literal")


@dataclass(frozen=True)
class ParameterVector:
    alpha0: float
    alpha: float
    n: float
    beta: float
    gamma: float
    delta: float
    eta: float
    kappa: float

    @classmethod
    def from_array(cls, values) -> "ParameterVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (8,):
            raise ValueError(f"expected 8 parameters, got shape {values.shape}")
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    def in_prior_support(self) -> bool:
        v = self.as_array()
        return bool(np.all(v >= PRIOR_LOWER) and np.all(v <= PRIOR_UPPER))


@dataclass(frozen=True)
class EpiState:
    S: int
    I: int
    A: int
    R: int
    D: int
    Ru: int

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.int64)

    @classmethod
    def from_array(cls, values) -> "EpiState":
        return cls(*(int(v) for v in values))

    @property
    def total(self) -> int:
        return sum(astuple(self))

    @property
    def observed(self) -> tuple[int, int, int]:
        return self.A, self.R, self.D


@dataclass(frozen=True)
class SimConfig:
    population: int
    days: int
    initial_observed: tuple[int, int, int]
    noise_mode: str = "stochastic"
    variance_mode: str = "poisson"

    def __post_init__(self):
        if self.days < 1:
            raise ValueError(f"days must be >= 1, got {self.days}")
        a0, r0, d0 = self.initial_observed
        if min(a0, r0, d0) < 0:
            raise ValueError("initial observed counts must be non-negative")
        if a0 + r0 + d0 >= self.population:
            raise ValueError(
                f"A0 + R0 + D0 = {a0 + r0 + d0} must be below the population {self.population}"
            )
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")
        if self.variance_mode not in VARIANCE_MODES:
            raise ValueError(
                f"variance_mode must be one of {VARIANCE_MODES}, got {self.variance_mode!r}"
            )

    def with_days(self, days: int) -> "SimConfig":
        return SimConfig(self.population, days, self.initial_observed, self.noise_mode, self.variance_mode)


class InvalidConfigError(ValueError):
    pass


@dataclass
class Trajectories:
    """Batch output: ``observed[b, t] = (A, R, D)`` on day ``t`` (day 0 is the initial state)."""

    observed: np.ndarray
    valid: np.ndarray
    full: np.ndarray | None = None

    def __len__(self) -> int:
        return self.observed.shape[0]


def infection_rate(theta: ParameterVector, A: float, R: float, D: float) -> float:
    return theta.alpha0 + theta.alpha / (1.0 + (A + R + D) ** theta.n)


def hazard(theta: ParameterVector, state: EpiState, P: float) -> np.ndarray:
    """Expected daily flows ``(S->I, I->A, A->R, A->D, I->Ru)``."""
    g = infection_rate(theta, state.A, state.R, state.D)
    return np.array(
        [
            g * state.S * state.I / P,
            theta.gamma * state.I,
            theta.beta * state.A,
            theta.delta * state.A,
            theta.beta * theta.eta * state.I,
        ]
    )


def init_state(config: SimConfig, theta: ParameterVector) -> EpiState:
    a0, r0, d0 = config.initial_observed
    i0 = math.floor(theta.kappa * a0)
    s0 = config.population - (a0 + r0 + d0 + i0)
    if s0 < 0:
        raise InvalidConfigError(
            f"kappa={theta.kappa} gives I0={i0}, leaving negative S for population {config.population}"
        )
    return EpiState(s0, i0, a0, r0, d0, 0)


# -- numba kernels -------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _hazards(theta, S, I, A, R, D, P, h):
    g = theta[0] + theta[1] / (1.0 + float(A + R + D) ** theta[2])
    h[0] = g * S * I / P
    h[1] = theta[4] * I
    h[2] = theta[3] * A
    h[3] = theta[5] * A
    h[4] = theta[3] * theta[6] * I


@numba.njit(cache=True)
def _advance(theta, x, P, seed, sid, ctr, stochastic, literal, h, f, z):
    """One day in place on ``x = [S, I, A, R, D, Ru]``; returns the next counter."""
    _hazards(theta, x[0], x[1], x[2], x[3], x[4], P, h)
    if stochastic:
        # three blocks per day: flows (0, 1), (2, 3), (4, -)
        for k in range(0, 5, 2):
            z0, z1 = draw_std_normal_pair(seed, sid, ctr)
            ctr += _ONE
            z[k] = z0
            if k + 1 < 5:
                z[k + 1] = z1
    for k in range(5):
        if stochastic:
            std = h[k] ** 0.25 if literal else np.sqrt(h[k])
            v = np.floor(h[k] + std * z[k])
        else:
            v = np.floor(h[k])
        f[k] = np.int64(v) if v > 0.0 else 0
    # S->I, I->A, A->R, A->D, I->Ru; each clamped to the source balance at that moment
    m = min(f[0], x[0])
    x[0] -= m
    x[1] += m
    m = min(f[1], x[1])
    x[1] -= m
    x[2] += m
    m = min(f[2], x[2])
    x[2] -= m
    x[3] += m
    m = min(f[3], x[2])
    x[2] -= m
    x[4] += m
    m = min(f[4], x[1])
    x[1] -= m
    x[5] += m
    return ctr


@numba.njit(cache=True, nogil=True)
def _simulate_slots(
    thetas, seed, sids, ctrs, P, a0, r0, d0, stochastic, literal,
    obs_scaled, inv_scale, want_obs, want_full, want_dist,
    out_obs, out_full, out_dist, out_valid,
):
    B = thetas.shape[0]
    days = obs_scaled.shape[0]
    h = np.empty(5)
    f = np.empty(5, dtype=np.int64)
    z = np.empty(5)
    x = np.empty(6, dtype=np.int64)
    norm = 1.0 / np.sqrt(3.0 * days)
    for b in range(B):
        theta = thetas[b]
        i0 = np.int64(np.floor(theta[7] * a0))
        s0 = P - (a0 + r0 + d0 + i0)
        if s0 < 0:
            out_valid[b] = False
            if want_dist:
                out_dist[b] = np.inf
            continue
        out_valid[b] = True
        x[0] = s0
        x[1] = i0
        x[2] = a0
        x[3] = r0
        x[4] = d0
        x[5] = 0
        ctr = ctrs[b]
        acc = 0.0
        for t in range(days):
            if t > 0:
                ctr = _advance(theta, x, float(P), seed, sids[b], ctr, stochastic, literal, h, f, z)
            if want_obs:
                out_obs[b, t, 0] = x[2]
                out_obs[b, t, 1] = x[3]
                out_obs[b, t, 2] = x[4]
            if want_full:
                for k in range(6):
                    out_full[b, t, k] = x[k]
            if want_dist:
                for k in range(3):
                    e = x[2 + k] * inv_scale[k] - obs_scaled[t, k]
                    acc += e * e
        ctrs[b] = ctr
        if want_dist:
            out_dist[b] = np.sqrt(acc) * norm


def step_day(stream, theta: ParameterVector, state: EpiState, P: int, noise_mode: str = "stochastic",
             variance_mode: str = "poisson") -> EpiState:
    """Advance one state by one day, drawing from (and advancing) ``stream``."""
    x = state.as_array()
    stochastic = noise_mode == "stochastic"
    ctr = _u64(stream.counter) if stream is not None else np.uint64(0)
    seed = _u64(stream.seed) if stream is not None else np.uint64(0)
    sid = _u64(stream.stream_id) if stream is not None else np.uint64(0)
    ctr = _advance(
        theta.as_array(), x, float(P), seed, sid, ctr, stochastic, variance_mode == "literal",
        np.empty(5), np.empty(5, dtype=np.int64), np.empty(5),
    )
    if stream is not None:
        stream.counter = int(ctr)
    return EpiState.from_array(x)


def _chunks(n: int, workers: int) -> list[slice]:
    workers = max(1, min(workers, n))
    edges = np.linspace(0, n, workers + 1).astype(int)
    return [slice(lo, hi) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]


def _run_kernel(streams, thetas, config, obs_scaled, inv_scale, want_obs, want_full, want_dist, workers):
    thetas = np.ascontiguousarray(thetas, dtype=np.float64)
    if thetas.ndim != 2 or thetas.shape[1] != 8:
        raise ValueError(f"thetas must have shape (B, 8), got {thetas.shape}")
    B = thetas.shape[0]
    if B < 1:
        raise ValueError("batch must hold at least one parameter vector")
    if len(streams) != B:
        raise ValueError(f"{len(streams)} streams for {B} slots")
    days = config.days
    out_obs = np.zeros((B, days, 3) if want_obs else (0, 0, 0), dtype=np.int64)
    out_full = np.zeros((B, days, 6) if want_full else (0, 0, 0), dtype=np.int64)
    out_dist = np.zeros(B if want_dist else 0)
    out_valid = np.zeros(B, dtype=np.bool_)
    a0, r0, d0 = (int(v) for v in config.initial_observed)
    stochastic = config.noise_mode == "stochastic"
    literal = config.variance_mode == "literal"

    def run(sl: slice):
        _simulate_slots(
            thetas[sl], streams.key, streams.stream_ids[sl], streams.counters[sl],
            int(config.population), a0, r0, d0, stochastic, literal,
            obs_scaled, inv_scale, want_obs, want_full, want_dist,
            out_obs[sl] if want_obs else out_obs, out_full[sl] if want_full else out_full,
            out_dist[sl] if want_dist else out_dist, out_valid[sl],
        )

    parts = _chunks(B, workers)
    if len(parts) == 1:
        run(parts[0])
    else:
        with ThreadPoolExecutor(max_workers=len(parts)) as pool:
            list(pool.map(run, parts))
    return out_obs, out_full, out_dist, out_valid


def simulate_batch(streams: StreamBatch, thetas, config: SimConfig, *, full: bool = False,
                   workers: int = 1) -> Trajectories:
    """Simulate ``config.days`` days for each row of ``thetas`` (natural units).

    Slot ``b`` reads only ``thetas[b]`` and stream ``b``, so any split of the
    slots across ``workers`` threads gives identical output.  Slots whose
    initial state is infeasible are marked invalid and left zero-filled.
    """
    dummy = np.zeros((config.days, 3))
    obs, fl, _, valid = _run_kernel(
        streams, thetas, config, dummy, np.ones(3), True, full, False, workers
    )
    return Trajectories(obs, valid, fl if full else None)


def simulate_distances(streams: StreamBatch, thetas, config: SimConfig, observed_scaled: np.ndarray,
                       inv_scale: np.ndarray, *, workers: int = 1) -> np.ndarray:
    """Fused simulate + normalised distance; invalid slots get ``+inf``.

    ``observed_scaled`` is the observed ``(days, 3)`` series already multiplied
    by ``inv_scale``; see :func:`pabc.abc_core.distance_scaling`.
    """
    obs_scaled = np.ascontiguousarray(observed_scaled, dtype=np.float64)
    if obs_scaled.shape != (config.days, 3):
        raise ValueError(f"observed series has shape {obs_scaled.shape}, expected ({config.days}, 3)")
    _, _, dist, _ = _run_kernel(
        streams, thetas, config, obs_scaled, np.asarray(inv_scale, dtype=np.float64),
        False, False, True, workers,
    )
    return dist


__all__ = [
    "PARAM_NAMES", "PRIOR_LOWER", "PRIOR_UPPER", "STATE_NAMES", "FLOW_NAMES",
    "ParameterVector", "EpiState", "SimConfig", "Trajectories", "InvalidConfigError",
    "infection_rate", "hazard", "init_state", "step_day", "simulate_batch", "simulate_distances",
]
