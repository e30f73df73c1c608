"""Counter-based random streams and the distribution samplers built on them.

Every draw is a pure function of ``(seed, stream_id, counter)``: the 64-bit
seed is the Philox key, and the counter block is ``(counter, stream_id)``.
One counter value yields one 128-bit block, so a stream can be replayed from
any position and slots of a batch never share state.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

_M32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_SHIFT11 = np.uint64(11)
_ONE = np.uint64(1)
_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = np.uint64(0x9E3779B9)
_PHILOX_W1 = np.uint64(0xBB67AE85)
_TWO_M53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * np.pi
_ONE_BELOW = np.nextafter(1.0, 0.0)
_TINY = np.finfo(np.float64).tiny

# Stream ids of one batch are ``serial << SLOT_BITS | slot``.
SLOT_BITS = 20
MAX_SLOTS = 1 << SLOT_BITS


@numba.njit(cache=True, inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Philox4x32-10 block function on uint64-held 32-bit words."""
    for r in range(10):
        p0 = _PHILOX_M0 * c0
        p1 = _PHILOX_M1 * c2
        n0 = (p1 >> _SHIFT32) ^ c1 ^ k0
        n2 = (p0 >> _SHIFT32) ^ c3 ^ k1
        c0 = n0 & _M32
        c1 = p1 & _M32
        c2 = n2 & _M32
        c3 = p0 & _M32
        if r < 9:
            k0 = (k0 + _PHILOX_W0) & _M32
            k1 = (k1 + _PHILOX_W1) & _M32
    return c0, c1, c2, c3


@numba.njit(cache=True, inline="always")
def _block(seed, sid, ctr):
    return philox4x32(
        ctr & _M32, ctr >> _SHIFT32, sid & _M32, sid >> _SHIFT32, seed & _M32, seed >> _SHIFT32
    )


@numba.njit(cache=True, inline="always")
def _to_unit(hi, lo):
    return float(((hi << _SHIFT32) | lo) >> _SHIFT11) * _TWO_M53


@numba.njit(cache=True)
def draw_uniform(seed, sid, ctr):
    """Uniform on [0, 1) from one counter block."""
    w0, w1, _, _ = _block(seed, sid, ctr)
    return _to_unit(w0, w1)


@numba.njit(cache=True)
def draw_std_normal(seed, sid, ctr):
    """Standard normal by Box-Muller (cosine branch) from one counter block."""
    w0, w1, w2, w3 = _block(seed, sid, ctr)
    u1 = 1.0 - _to_unit(w0, w1)
    u2 = _to_unit(w2, w3)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


@numba.njit(cache=True)
def draw_std_normal_pair(seed, sid, ctr):
    """Both Box-Muller outputs of one counter block; the first equals ``draw_std_normal``."""
    w0, w1, w2, w3 = _block(seed, sid, ctr)
    u1 = 1.0 - _to_unit(w0, w1)
    u2 = _to_unit(w2, w3)
    r = np.sqrt(-2.0 * np.log(u1))
    return r * np.cos(_TWO_PI * u2), r * np.sin(_TWO_PI * u2)


@numba.njit(cache=True)
def draw_log_gamma(seed, sid, ctr, shape):
    """Log of a Gamma(shape, 1) variate; returns (value, next counter).

    Marsaglia-Tsang squeeze/rejection, with the ``U**(1/a)`` boost for
    shape < 1 applied in log space so tiny variates do not underflow.
    """
    boost = 0.0
    a = shape
    if shape < 1.0:
        u = draw_uniform(seed, sid, ctr)
        ctr += _ONE
        boost = np.log(1.0 - u) / shape
        a = shape + 1.0
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    while True:
        x = draw_std_normal(seed, sid, ctr)
        ctr += _ONE
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = 1.0 - draw_uniform(seed, sid, ctr)
        ctr += _ONE
        if np.log(u) < 0.5 * x * x + d - d * v + d * np.log(v):
            return np.log(d * v) + boost, ctr


@numba.njit(cache=True)
def draw_beta(seed, sid, ctr, a, b):
    """Beta(a, b) as X / (X + Y) of two Gammas, clamped strictly inside (0, 1)."""
    lx, ctr = draw_log_gamma(seed, sid, ctr, a)
    ly, ctr = draw_log_gamma(seed, sid, ctr, b)
    m = max(lx, ly)
    out = np.exp(lx - (m + np.log(np.exp(lx - m) + np.exp(ly - m))))
    if out < _TINY:
        out = _TINY
    elif out > _ONE_BELOW:
        out = _ONE_BELOW
    return out, ctr


@numba.njit(cache=True)
def _pick(cumulative, target):
    # first index whose running total exceeds target; zero-weight tails excluded
    i = np.searchsorted(cumulative, target, side="right")
    n = cumulative.shape[0]
    if i >= n:
        i = n - 1
        while i > 0 and cumulative[i] == cumulative[i - 1]:
            i -= 1
    return i


# -- vectorised kernels: one draw per slot, counters advanced in place --------


@numba.njit(cache=True, nogil=True)
def _uniform_slots(seed, sids, ctrs, out):
    for j in range(sids.shape[0]):
        out[j] = draw_uniform(seed, sids[j], ctrs[j])
        ctrs[j] += _ONE


@numba.njit(cache=True, nogil=True)
def _uniform_rows(seed, sids, ctrs, out):
    for j in range(sids.shape[0]):
        for i in range(out.shape[1]):
            out[j, i] = draw_uniform(seed, sids[j], ctrs[j])
            ctrs[j] += _ONE


@numba.njit(cache=True, nogil=True)
def _normal_slots(seed, sids, ctrs, out):
    # out has shape (slots, k); k sequential draws per slot
    for j in range(sids.shape[0]):
        for i in range(out.shape[1]):
            out[j, i] = draw_std_normal(seed, sids[j], ctrs[j])
            ctrs[j] += _ONE


@numba.njit(cache=True, nogil=True)
def _beta_slots(seed, sids, ctrs, a, b, out):
    for j in range(sids.shape[0]):
        out[j], ctrs[j] = draw_beta(seed, sids[j], ctrs[j], a[j], b[j])


@numba.njit(cache=True, nogil=True)
def _categorical_slots(seed, sids, ctrs, cumulative, out):
    total = cumulative[-1]
    for j in range(sids.shape[0]):
        u = draw_uniform(seed, sids[j], ctrs[j])
        ctrs[j] += _ONE
        out[j] = _pick(cumulative, u * total)


# -- sequential kernels: n draws from a single stream ---------------------------


@numba.njit(cache=True)
def _uniform_seq(seed, sid, ctr, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = draw_uniform(seed, sid, ctr)
        ctr += _ONE
    return out, ctr


@numba.njit(cache=True)
def _normal_seq(seed, sid, ctr, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = draw_std_normal(seed, sid, ctr)
        ctr += _ONE
    return out, ctr


@numba.njit(cache=True)
def _beta_seq(seed, sid, ctr, a, b, n):
    out = np.empty(n)
    for i in range(n):
        out[i], ctr = draw_beta(seed, sid, ctr, a, b)
    return out, ctr


@numba.njit(cache=True)
def _categorical_seq(seed, sid, ctr, cumulative, n):
    out = np.empty(n, dtype=np.int64)
    total = cumulative[-1]
    for i in range(n):
        out[i] = _pick(cumulative, draw_uniform(seed, sid, ctr) * total)
        ctr += _ONE
    return out, ctr


def _u64(x: int) -> np.uint64:
    return np.uint64(int(x) & 0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class BetaShape:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"Beta shapes must be positive, got ({self.alpha}, {self.beta})")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


@dataclass
class RngStream:
    """A single logical stream; ``counter`` is the index of the next block."""

    seed: int
    stream_id: int = 0
    counter: int = 0

    def _state(self):
        return _u64(self.seed), _u64(self.stream_id), _u64(self.counter)

    def uniform(self, size: int | None = None):
        seed, sid, ctr = self._state()
        out, ctr = _uniform_seq(seed, sid, ctr, 1 if size is None else int(size))
        self.counter = int(ctr)
        return float(out[0]) if size is None else out

    def normal(self, mean: float = 0.0, std: float = 1.0, size: int | None = None):
        if std < 0:
            raise ValueError(f"normal std must be non-negative, got {std}")
        seed, sid, ctr = self._state()
        z, ctr = _normal_seq(seed, sid, ctr, 1 if size is None else int(size))
        self.counter = int(ctr)
        out = mean + std * z
        return float(out[0]) if size is None else out

    def beta(self, shape: BetaShape, size: int | None = None):
        seed, sid, ctr = self._state()
        out, ctr = _beta_seq(
            seed, sid, ctr, float(shape.alpha), float(shape.beta), 1 if size is None else int(size)
        )
        self.counter = int(ctr)
        return float(out[0]) if size is None else out

    def categorical(self, weights, size: int | None = None):
        cumulative = _cumulative(weights)
        seed, sid, ctr = self._state()
        out, ctr = _categorical_seq(seed, sid, ctr, cumulative, 1 if size is None else int(size))
        self.counter = int(ctr)
        return int(out[0]) if size is None else out


def uniform(stream: RngStream) -> float:
    return stream.uniform()


def normal(stream: RngStream, mean: float = 0.0, std: float = 1.0) -> float:
    return stream.normal(mean, std)


def beta(stream: RngStream, shape: BetaShape) -> float:
    return stream.beta(shape)


def categorical(stream: RngStream, weights) -> int:
    return stream.categorical(weights)


def _cumulative(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("categorical weights must be a non-empty 1-d sequence")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("categorical weights must be finite and non-negative")
    cumulative = np.cumsum(w)
    if cumulative[-1] <= 0:
        raise ValueError("categorical weights sum to zero")
    return cumulative


@dataclass
class StreamBatch:
    """One stream per slot; every method draws once per slot and advances it."""

    seed: int
    stream_ids: np.ndarray
    counters: np.ndarray = field(default=None)

    def __post_init__(self):
        self.stream_ids = np.ascontiguousarray(self.stream_ids, dtype=np.uint64)
        if self.counters is None:
            self.counters = np.zeros(self.stream_ids.shape[0], dtype=np.uint64)
        else:
            self.counters = np.ascontiguousarray(self.counters, dtype=np.uint64)

    @classmethod
    def for_batch(cls, seed: int, serial: int, size: int) -> "StreamBatch":
        """Fresh streams for batch number ``serial``, slots ``0 .. size-1``."""
        if not 1 <= size <= MAX_SLOTS:
            raise ValueError(f"batch size must be in [1, {MAX_SLOTS}], got {size}")
        ids = (np.uint64(serial) << np.uint64(SLOT_BITS)) + np.arange(size, dtype=np.uint64)
        return cls(seed, ids)

    def __len__(self) -> int:
        return self.stream_ids.shape[0]

    @property
    def key(self) -> np.uint64:
        return _u64(self.seed)

    def subset(self, mask) -> "StreamBatch":
        """Streams for the selected slots; the copy advances independently."""
        return StreamBatch(self.seed, self.stream_ids[mask], self.counters[mask].copy())

    def slot(self, j: int) -> RngStream:
        return RngStream(self.seed, int(self.stream_ids[j]), int(self.counters[j]))

    def uniform(self) -> np.ndarray:
        out = np.empty(len(self))
        _uniform_slots(self.key, self.stream_ids, self.counters, out)
        return out

    def std_normal(self, k: int = 1) -> np.ndarray:
        """Array of shape ``(slots, k)`` of standard normals."""
        out = np.empty((len(self), k))
        _normal_slots(self.key, self.stream_ids, self.counters, out)
        return out

    def uniform_matrix(self, k: int) -> np.ndarray:
        """Array of shape ``(slots, k)`` of uniforms, ``k`` sequential draws per slot."""
        out = np.empty((len(self), k))
        _uniform_rows(self.key, self.stream_ids, self.counters, out)
        return out

    def beta(self, alpha, beta) -> np.ndarray:
        n = len(self)
        a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n,)).copy()
        b = np.broadcast_to(np.asarray(beta, dtype=np.float64), (n,)).copy()
        if np.any(a <= 0) or np.any(b <= 0):
            raise ValueError("Beta shapes must be positive")
        out = np.empty(n)
        _beta_slots(self.key, self.stream_ids, self.counters, a, b, out)
        return out

    def categorical(self, weights) -> np.ndarray:
        cumulative = _cumulative(weights)
        out = np.empty(len(self), dtype=np.int64)
        _categorical_slots(self.key, self.stream_ids, self.counters, cumulative, out)
        return out
