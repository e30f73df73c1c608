"""Batch-parallel ABC-SMC with two perturbation kernels.

``MCMC``: one scalar random-walk step, adapted towards a 0.234 acceptance
rate during the first 10% of the run budget and frozen afterwards.

``BDSS``: every slot of a batch draws its own step from
``Beta(eps_i / eps_1, 2 i)``, so a single batch mixes long exploratory
moves with short local ones.

All sampling and perturbation happen in unit-cube coordinates.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .abc_core import CaseDataSeries, Particle, abc_rejection, distance_scaling, keep_accepted, to_natural
from .epi_model import SimConfig, simulate_distances
from .sampling import BetaShape, StreamBatch

KERNELS = ("MCMC", "BDSS")
TARGET_ACCEPTANCE = 0.234


class DegenerateStageError(RuntimeError):
    """No particle survives into the next stage, or the tolerance collapsed to zero."""


@dataclass
class ParticlePopulation:
    theta_unit: np.ndarray
    distances: np.ndarray
    weights: np.ndarray
    stage: int
    epsilon: float

    def __post_init__(self):
        self.theta_unit = np.asarray(self.theta_unit, dtype=np.float64).reshape(-1, 8)
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = self.theta_unit.shape[0]
        if self.distances.shape != (n,) or self.weights.shape != (n,):
            raise ValueError("theta_unit, distances and weights disagree in length")
        if n and np.any(self.distances > self.epsilon):
            raise ValueError(f"population holds distances above its tolerance {self.epsilon}")
        if n and (np.any(self.weights < 0) or not math.isclose(self.weights.sum(), 1.0, rel_tol=1e-9)):
            raise ValueError("weights must be non-negative and sum to 1")

    @classmethod
    def weighted(cls, theta_unit, distances, stage: int, epsilon: float) -> "ParticlePopulation":
        """Population with weights proportional to ``epsilon - distance``."""
        distances = np.asarray(distances, dtype=np.float64)
        w = tolerance_weights(distances, epsilon)
        return cls(theta_unit, distances, w, stage, epsilon)

    def __len__(self) -> int:
        return self.distances.shape[0]

    def __getitem__(self, k: int) -> Particle:
        return Particle(self.theta_unit[k], float(self.distances[k]))

    @property
    def theta_natural(self) -> np.ndarray:
        return to_natural(self.theta_unit)


def tolerance_weights(distances: np.ndarray, epsilon: float) -> np.ndarray:
    """Normalised ``epsilon - d``; uniform when that is undefined or all zero."""
    n = distances.shape[0]
    if n == 0:
        return np.empty(0)
    if math.isinf(epsilon):
        return np.full(n, 1.0 / n)
    w = epsilon - distances
    total = w.sum()
    if total <= 0:
        return np.full(n, 1.0 / n)
    return w / total


@dataclass(frozen=True)
class StepSizeState:
    kind: str
    scalar_s: float = 0.1
    beta_shape: BetaShape | None = None
    adaptation_frozen: bool = False
    accept_count: int = 0
    attempt_count: int = 0

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}, got {self.kind!r}")
        if not self.scalar_s > 0:
            raise ValueError(f"step size must be positive, got {self.scalar_s}")


@dataclass
class StageRecord:
    stage: int
    epsilon: float
    runs_used: int
    batches: int
    acceptance_ratio: float
    step: StepSizeState
    wall_time: float = 0.0
    sim_time: float = 0.0


@dataclass
class SMCConfig:
    N: int = 1000
    batch_size: int = 100
    survival_ratio: float = 0.5
    run_budget: int = 100_000
    seed: int = 0
    s0: float = 0.1
    step_as_variance: bool = False
    target_epsilon: float | None = None
    # an in-flight stage is abandoned once runs exceed this multiple of the budget
    hard_budget_factor: float = 2.0
    adapt_fraction: float = 0.10
    min_bdss_alpha: float = 1e-3
    workers: int = 1

    def __post_init__(self):
        if self.N < 1 or self.batch_size < 1 or self.run_budget < 1:
            raise ValueError("N, batch_size and run_budget must be positive")
        if not 0 < self.survival_ratio < 1:
            raise ValueError(f"survival_ratio must lie in (0, 1), got {self.survival_ratio}")
        if self.hard_budget_factor < 1:
            raise ValueError("hard_budget_factor must be >= 1")


@dataclass
class SMCResult:
    population: ParticlePopulation
    records: list[StageRecord]
    status: str
    wall_time: float = 0.0
    sim_time: float = 0.0
    populations: list[ParticlePopulation] = field(default_factory=list)

    @property
    def final_epsilon(self) -> float:
        return self.records[-1].epsilon

    @property
    def runs_used(self) -> int:
        return self.records[-1].runs_used


def next_tolerance(distances, survival_ratio: float) -> float:
    """Linear-interpolation ``survival_ratio`` quantile of the accepted distances."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("cannot take a tolerance quantile of an empty population")
    if not 0 < survival_ratio < 1:
        raise ValueError(f"survival_ratio must lie in (0, 1), got {survival_ratio}")
    return float(np.quantile(d, survival_ratio, method="linear"))


def build_stage_prior(prev: ParticlePopulation, epsilon_next: float) -> ParticlePopulation:
    if epsilon_next > prev.epsilon:
        raise ValueError(f"tolerance may not increase ({prev.epsilon} -> {epsilon_next})")
    keep = prev.distances < epsilon_next
    if not np.any(keep):
        raise DegenerateStageError(f"no particle below tolerance {epsilon_next}")
    return ParticlePopulation.weighted(
        prev.theta_unit[keep], prev.distances[keep], prev.stage + 1, epsilon_next
    )


def resample(streams: StreamBatch, population: ParticlePopulation) -> tuple[np.ndarray, np.ndarray]:
    """One weighted parent per slot; returns ``(parents, indices)``."""
    idx = streams.categorical(population.weights)
    return population.theta_unit[idx], idx


def _step_std(step, as_variance: bool):
    return np.sqrt(step) if as_variance else step


def _inside(theta_unit: np.ndarray) -> np.ndarray:
    return np.all((theta_unit >= 0.0) & (theta_unit <= 1.0), axis=1)


def perturb_mcmc(streams: StreamBatch, parents: np.ndarray, s: float, *,
                 step_as_variance: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian random walk plus Metropolis test against the uniform prior.

    The proposal is symmetric, so the acceptance ratio is the prior ratio:
    1 inside the unit cube and 0 outside.  Returns ``(proposals, accepted)``.
    """
    if not s > 0:
        raise ValueError(f"step size must be positive, got {s}")
    z = streams.std_normal(8)
    proposals = parents + _step_std(s, step_as_variance) * z
    ratio = _inside(proposals).astype(np.float64)
    accepted = ratio > streams.uniform()
    return proposals, accepted


def tune_step_mcmc(state: StepSizeState, accepted: int, attempts: int, progress: float, *,
                   adapt_fraction: float = 0.10, target: float = TARGET_ACCEPTANCE) -> StepSizeState:
    """Multiplicative step update ``s * exp((A - A_T) / ((1 - A_T)(accepted + 1)))``.

    Only applied while ``progress`` (fraction of the run budget used) is below
    ``adapt_fraction``; afterwards the step is frozen for good.
    """
    if attempts < 1:
        raise ValueError("attempts must be >= 1")
    counts = dict(accept_count=state.accept_count + accepted, attempt_count=state.attempt_count + attempts)
    if state.adaptation_frozen or progress >= adapt_fraction:
        return replace(state, adaptation_frozen=True, **counts)
    rate = accepted / attempts
    s_new = state.scalar_s * math.exp((rate - target) / ((1.0 - target) * (accepted + 1)))
    return replace(state, scalar_s=s_new, **counts)


def bdss_shape(stage: int, epsilon: float, epsilon_1: float, *, min_alpha: float = 1e-3) -> BetaShape:
    """``Beta(eps_i / eps_1, 2 i)`` with the first shape floored at ``min_alpha``."""
    if stage < 1:
        raise ValueError("Beta step sizes start at stage 1")
    if not epsilon_1 > 0:
        raise DegenerateStageError("first-stage tolerance is zero; Beta shape undefined")
    if epsilon > epsilon_1:
        raise ValueError(f"tolerance {epsilon} above the first-stage tolerance {epsilon_1}")
    return BetaShape(max(epsilon / epsilon_1, min_alpha), 2.0 * stage)


def sample_bdss_steps(streams: StreamBatch, stage: int, epsilon: float, epsilon_1: float, *,
                      min_alpha: float = 1e-3) -> np.ndarray:
    shape = bdss_shape(stage, epsilon, epsilon_1, min_alpha=min_alpha)
    return streams.beta(shape.alpha, shape.beta)


def perturb_bdss(streams: StreamBatch, parents: np.ndarray, steps, *,
                 step_as_variance: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot random walk with no Metropolis test; returns ``(proposals, inside_cube)``."""
    steps = np.broadcast_to(np.asarray(steps, dtype=np.float64), (parents.shape[0],))
    if np.any(steps <= 0):
        raise ValueError("step sizes must be positive")
    z = streams.std_normal(8)
    proposals = parents + _step_std(steps, step_as_variance)[:, None] * z
    return proposals, _inside(proposals)


class _Clock:
    def __init__(self):
        self.sim = 0.0

    def simulate(self, *args, **kwargs):
        t = time.perf_counter()
        out = simulate_distances(*args, **kwargs)
        self.sim += time.perf_counter() - t
        return out


def run_abc_smc(kind: str, observed: CaseDataSeries, config: SMCConfig, *,
                sim_config: SimConfig | None = None,
                on_stage: Callable[[StageRecord], None] | None = None,
                keep_populations: bool = False) -> SMCResult:
    """Stage 0 is rejection ABC at tolerance ``+inf``; each later stage sets its
    tolerance to the ``survival_ratio`` quantile of the previous distances and
    refills ``N`` particles from perturbed, weight-resampled survivors.

    Stops at the first stage boundary where ``run_budget`` simulations have
    been used (or ``target_epsilon`` reached).  The status is ``"complete"``,
    ``"degenerate"`` or ``"truncated"`` (a stage blew through the hard cap).
    """
    if kind not in KERNELS:
        raise ValueError(f"kernel must be one of {KERNELS}, got {kind!r}")
    cfg = config
    sim_cfg = sim_config or observed.sim_config()
    scale = distance_scaling(observed)
    obs_scaled = observed.as_array() * scale
    B = cfg.batch_size
    hard_cap = max(int(cfg.hard_budget_factor * cfg.run_budget), B)
    clock = _Clock()
    t_start = time.perf_counter()

    # stage 0 accepts everything, so it always completes in ceil(N / B) batches
    stage0_cap = max(hard_cap, -(-cfg.N // B) * B)
    stage0 = abc_rejection(cfg.seed, observed, math.inf, cfg.N, B, stage0_cap,
                           sim_config=sim_cfg, workers=cfg.workers)
    clock.sim = time.perf_counter() - t_start
    serial = stage0.batches
    runs = stage0.runs_used
    step = StepSizeState(kind, scalar_s=cfg.s0)
    pop = ParticlePopulation.weighted(stage0.theta_unit, stage0.distances, 0, math.inf)
    records = [StageRecord(0, math.inf, runs, serial, len(stage0) / runs, step,
                           time.perf_counter() - t_start, clock.sim)]
    populations = [pop] if keep_populations else []
    if on_stage:
        on_stage(records[0])
    status = "truncated" if stage0.partial else "complete"
    epsilon_1 = None

    while status == "complete" and runs < cfg.run_budget:
        if cfg.target_epsilon is not None and pop.epsilon <= cfg.target_epsilon:
            break
        t_stage, sim_before = time.perf_counter(), clock.sim
        eps = next_tolerance(pop.distances, cfg.survival_ratio)
        try:
            prior = build_stage_prior(pop, eps)
            if kind == "BDSS":
                epsilon_1 = eps if epsilon_1 is None else epsilon_1
                shape = bdss_shape(prior.stage, eps, epsilon_1, min_alpha=cfg.min_bdss_alpha)
                step = replace(step, beta_shape=shape)
        except DegenerateStageError:
            status = "degenerate"
            break

        thetas, dists = [], []
        have = accepted_total = attempts_total = 0
        while have < cfg.N:
            if runs + B > hard_cap:
                status = "truncated"
                break
            streams = StreamBatch.for_batch(cfg.seed, serial, B)
            serial += 1
            parents, _ = resample(streams, prior)
            if kind == "MCMC":
                proposals, ok = perturb_mcmc(streams, parents, step.scalar_s,
                                             step_as_variance=cfg.step_as_variance)
            else:
                steps = streams.beta(step.beta_shape.alpha, step.beta_shape.beta)
                proposals, ok = perturb_bdss(streams, parents, steps, step_as_variance=cfg.step_as_variance)
            d = np.full(B, np.inf)
            if np.any(ok):
                d[ok] = clock.simulate(streams.subset(ok), to_natural(proposals[ok]), sim_cfg,
                                       obs_scaled, scale, workers=cfg.workers)
            runs += B
            n_acc = int(np.count_nonzero(d <= eps))
            accepted_total += n_acc
            attempts_total += B
            if kind == "MCMC":
                step = tune_step_mcmc(step, n_acc, B, runs / cfg.run_budget, adapt_fraction=cfg.adapt_fraction)
            else:
                step = replace(step, accept_count=step.accept_count + n_acc,
                               attempt_count=step.attempt_count + B)
            idx = keep_accepted(d, eps, cfg.N - have)
            thetas.append(proposals[idx])
            dists.append(d[idx])
            have += idx.size
        if status != "complete":
            break

        pop = ParticlePopulation.weighted(np.concatenate(thetas), np.concatenate(dists), prior.stage, eps)
        if keep_populations:
            populations.append(pop)
        rec = StageRecord(pop.stage, eps, runs, serial, accepted_total / attempts_total, step,
                          time.perf_counter() - t_stage, clock.sim - sim_before)
        records.append(rec)
        if on_stage:
            on_stage(rec)

    return SMCResult(pop, records, status, time.perf_counter() - t_start, clock.sim, populations)
