"""Distance between simulated and observed case series, and rejection ABC."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .epi_model import PRIOR_LOWER, PRIOR_UPPER, ParameterVector, SimConfig, simulate_distances
from .sampling import StreamBatch


@dataclass
class CaseDataSeries:
    """Observed daily ``A, R, D`` counts for a population of ``P``."""

    A: np.ndarray
    R: np.ndarray
    D: np.ndarray
    P: int
    dates: list[str] | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.int64)
        self.R = np.asarray(self.R, dtype=np.int64)
        self.D = np.asarray(self.D, dtype=np.int64)
        self.P = int(self.P)
        n = self.A.shape[0]
        if n < 1 or self.R.shape != (n,) or self.D.shape != (n,):
            raise ValueError("A, R, D must be 1-d series of equal non-zero length")
        if self.dates is not None and len(self.dates) != n:
            raise ValueError("dates must match the series length")
        for name, series in (("A", self.A), ("R", self.R), ("D", self.D)):
            if np.any(series < 0):
                raise ValueError(f"{name} has negative entries on day {self._day(np.argmax(series < 0))}")
            if np.any(series > self.P):
                raise ValueError(f"{name} exceeds the population on day {self._day(np.argmax(series > self.P))}")
        for name, series in (("R", self.R), ("D", self.D)):
            drops = np.flatnonzero(np.diff(series) < 0)
            if drops.size:
                raise ValueError(f"cumulative {name} decreases on day {self._day(drops[0] + 1)}")

    def _day(self, i) -> str:
        return self.dates[int(i)] if self.dates is not None else str(int(i))

    @property
    def days(self) -> int:
        return self.A.shape[0]

    def as_array(self) -> np.ndarray:
        """``(days, 3)`` array of ``A, R, D``."""
        return np.stack([self.A, self.R, self.D], axis=1)

    def window(self, start: int, days: int) -> "CaseDataSeries":
        sl = slice(start, start + days)
        if start < 0 or start + days > self.days:
            raise ValueError(f"window [{start}, {start + days}) outside series of {self.days} days")
        dates = self.dates[sl] if self.dates is not None else None
        return CaseDataSeries(self.A[sl], self.R[sl], self.D[sl], self.P, dates)

    def sim_config(self, noise_mode="stochastic", variance_mode="poisson", days=None) -> SimConfig:
        """Simulator set-up starting from this series' first day."""
        return SimConfig(
            self.P, self.days if days is None else days,
            (int(self.A[0]), int(self.R[0]), int(self.D[0])), noise_mode, variance_mode,
        )


@dataclass
class Particle:
    theta_unit: np.ndarray
    distance: float

    @property
    def theta_natural(self) -> ParameterVector:
        return ParameterVector.from_array(to_natural(self.theta_unit))


def to_natural(theta_unit):
    return PRIOR_LOWER + np.asarray(theta_unit, dtype=np.float64) * (PRIOR_UPPER - PRIOR_LOWER)


def to_unit(theta_natural):
    return (np.asarray(theta_natural, dtype=np.float64) - PRIOR_LOWER) / (PRIOR_UPPER - PRIOR_LOWER)


def distance_scaling(observed: CaseDataSeries) -> np.ndarray:
    """Per-series ``1 / max`` factors; an all-zero series is left unscaled."""
    peaks = observed.as_array().max(axis=0).astype(np.float64)
    peaks[peaks == 0] = 1.0
    return 1.0 / peaks


def distance(simulated, observed: CaseDataSeries) -> float:
    """Normalised Euclidean distance between ``(days, 3)`` simulated counts and ``observed``.

    Each series is divided by its observed maximum and the norm by
    ``sqrt(3 * days)``, so values are O(1) whatever the country size.
    """
    sim = np.asarray(simulated, dtype=np.float64)
    if sim.shape != (observed.days, 3):
        raise ValueError(f"simulated shape {sim.shape} does not match {observed.days} observed days")
    scale = distance_scaling(observed)
    diff = (sim - observed.as_array()) * scale
    return float(np.sqrt(np.sum(diff * diff)) / math.sqrt(3 * observed.days))


@dataclass
class RejectionResult:
    theta_unit: np.ndarray
    distances: np.ndarray
    runs_used: int
    batches: int
    batch_accepts: list[int]
    partial: bool
    batch_distances: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return self.distances.shape[0]


def keep_accepted(distances: np.ndarray, epsilon: float, needed: int) -> np.ndarray:
    """Indices with ``distance <= epsilon``; at most ``needed``, lowest distances first."""
    idx = np.flatnonzero(distances <= epsilon)
    if idx.size > needed:
        order = np.argsort(distances[idx], kind="stable")
        idx = np.sort(idx[order[:needed]])
    return idx


def abc_rejection(seed: int, observed: CaseDataSeries, epsilon: float, N: int, batch_size: int,
                  run_budget: int, *, sim_config: SimConfig | None = None, first_serial: int = 0,
                  workers: int = 1, record: bool = False) -> RejectionResult:
    """Plain rejection ABC with uniform draws from the unit cube.

    Whole batches of ``batch_size`` always run; ``run_budget`` caps the total
    number of simulations, after which a partial result is returned.
    Batch ``k`` uses the streams of serial ``first_serial + k``.
    """
    if N < 1 or batch_size < 1:
        raise ValueError("N and batch_size must be >= 1")
    cfg = sim_config or observed.sim_config()
    scale = distance_scaling(observed)
    obs_scaled = observed.as_array() * scale
    thetas, dists, accepts, recorded = [], [], [], []
    have, runs, k = 0, 0, 0
    # the first batch always runs; later ones only while they fit in the budget
    while have < N and (k == 0 or runs + batch_size <= run_budget):
        streams = StreamBatch.for_batch(seed, first_serial + k, batch_size)
        unit = streams.uniform_matrix(8)
        d = simulate_distances(streams, to_natural(unit), cfg, obs_scaled, scale, workers=workers)
        runs += batch_size
        k += 1
        if record:
            recorded.append(d.copy())
        idx = keep_accepted(d, epsilon, N - have)
        accepts.append(int(np.count_nonzero(d <= epsilon)))
        thetas.append(unit[idx])
        dists.append(d[idx])
        have += idx.size
    theta = np.concatenate(thetas) if thetas else np.empty((0, 8))
    dist = np.concatenate(dists) if dists else np.empty(0)
    return RejectionResult(theta, dist, runs, k, accepts, have < N, recorded)
