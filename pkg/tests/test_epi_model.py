import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import reference
from pabc.abc_core import to_natural
from pabc.epi_model import (
    EpiState, InvalidConfigError, ParameterVector, SimConfig, hazard, infection_rate,
    init_state, simulate_batch, step_day,
)
from pabc.sampling import RngStream, StreamBatch


def theta(**kw):
    base = dict(alpha0=0.1, alpha=0.5, n=1.0, beta=0.05, gamma=0.1, delta=0.01, eta=0.5, kappa=0.5)
    base.update(kw)
    return ParameterVector(**base)


def test_infection_rate_at_zero_cases():
    assert infection_rate(theta(), 0, 0, 0) == pytest.approx(0.6)


def test_infection_rate_without_feedback():
    t = theta(alpha=0.0)
    for a, r, d in [(0, 0, 0), (5, 3, 1), (10**5, 0, 7)]:
        assert infection_rate(t, a, r, d) == 0.1


def test_infection_rate_hand_value():
    assert infection_rate(theta(), 3, 1, 0) == pytest.approx(0.2)


def test_hazard_empty():
    h = hazard(theta(), EpiState(1000, 0, 0, 0, 0, 0), 1000)
    assert np.all(h == 0)


def test_hazard_hand_value():
    # g = 0.2 at A + R + D = 0
    t = theta(alpha0=0.2, alpha=0.0)
    h = hazard(t, EpiState(900, 100, 0, 0, 0, 0), 1000)
    np.testing.assert_allclose(h, [18, 10, 0, 0, 2.5])


def test_hazard_linear_in_gamma():
    s = EpiState(800, 60, 40, 50, 10, 40)
    h1 = hazard(theta(), s, 1000)
    h2 = hazard(theta(gamma=0.2), s, 1000)
    assert h2[1] == pytest.approx(2 * h1[1])
    np.testing.assert_array_equal(np.delete(h1, 1), np.delete(h2, 1))


def test_step_day_zero_hazards_unchanged():
    s = EpiState(990, 0, 0, 7, 3, 0)
    assert step_day(RngStream(1), theta(), s, 1000) == s


def test_step_day_deterministic_bookkeeping():
    t = theta(alpha0=0.2, alpha=0.0)
    out = step_day(None, t, EpiState(900, 100, 0, 0, 0, 0), 1000, noise_mode="deterministic")
    assert out == EpiState(882, 106, 10, 0, 0, 2)


@given(st.integers(0, 2**32), st.lists(st.integers(0, 500), min_size=6, max_size=6),
       st.lists(st.floats(0, 1), min_size=8, max_size=8))
@settings(max_examples=100, deadline=None)
def test_step_day_conserves(seed, counts, u):
    s = EpiState(*counts)
    P = max(s.total, 1)
    out = step_day(RngStream(seed), ParameterVector.from_array(to_natural(u)), s, P)
    assert out.total == s.total
    assert min(out.as_array()) >= 0
    assert out.R >= s.R and out.D >= s.D


def test_init_state():
    cfg = SimConfig(1000, 5, (10, 3, 1))
    s = init_state(cfg, theta(kappa=0.0))
    assert (s.I, s.S, s.Ru) == (0, 986, 0)
    s = init_state(cfg, theta(kappa=2.0))
    assert s.I == 20 and s.total == 1000


def test_init_state_infeasible():
    with pytest.raises(InvalidConfigError):
        init_state(SimConfig(100, 5, (60, 0, 0)), theta(kappa=2.0))


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(100, 5, (50, 30, 20))
    with pytest.raises(ValueError):
        SimConfig(100, 0, (1, 0, 0))
    with pytest.raises(ValueError):
        SimConfig(100, 5, (1, 0, 0), noise_mode="chaotic")


def test_parameter_vector_support():
    assert theta().in_prior_support()
    assert not theta(alpha=101.0).in_prior_support()
    with pytest.raises(ValueError):
        ParameterVector.from_array(np.ones(7))


THETA_FIXTURE = (0.3, 20.0, 0.5, 0.05, 0.2, 0.01, 0.5, 1.5)


def test_deterministic_matches_scalar_oracle():
    cfg = SimConfig(1000, 3, (20, 5, 1), noise_mode="deterministic")
    traj = simulate_batch(StreamBatch.for_batch(0, 0, 1), np.array([THETA_FIXTURE]), cfg, full=True)
    want = reference.simulate(THETA_FIXTURE, 1000, 3, 20, 5, 1)
    assert traj.full[0].tolist() == [list(s) for s in want]


@pytest.mark.parametrize("variance", ["poisson", "literal"])
def test_stochastic_matches_scalar_oracle(variance):
    cfg = SimConfig(5000, 30, (40, 5, 1), variance_mode=variance)
    streams = StreamBatch.for_batch(17, 2, 3)
    traj = simulate_batch(streams, np.array([THETA_FIXTURE] * 3), cfg, full=True)
    for j in range(3):
        want = reference.simulate(THETA_FIXTURE, 5000, 30, 40, 5, 1, seed=17,
                                  stream_id=int(streams.stream_ids[j]), variance=variance)
        assert traj.full[j].tolist() == [list(s) for s in want]


def test_batch_of_one_equals_step_loop():
    cfg = SimConfig(10_000, 40, (50, 10, 2))
    t = ParameterVector(*THETA_FIXTURE)
    streams = StreamBatch.for_batch(3, 0, 1)
    traj = simulate_batch(streams, np.array([THETA_FIXTURE]), cfg, full=True)
    stream = RngStream(3, int(StreamBatch.for_batch(3, 0, 1).stream_ids[0]))
    s = init_state(cfg, t)
    states = [s]
    for _ in range(39):
        s = step_day(stream, t, s, 10_000)
        states.append(s)
    assert traj.full[0].tolist() == [list(x.as_array()) for x in states]


def test_slot_permutation():
    cfg = SimConfig(10_000, 30, (50, 10, 2))
    rng = np.random.default_rng(1)
    thetas = to_natural(rng.uniform(size=(20, 8)))
    streams = StreamBatch.for_batch(5, 1, 20)
    base = simulate_batch(streams, thetas, cfg).observed
    perm = rng.permutation(20)
    permuted = StreamBatch(5, streams.stream_ids[perm], np.zeros(20, dtype=np.uint64))
    np.testing.assert_array_equal(simulate_batch(permuted, thetas[perm], cfg).observed, base[perm])


def test_worker_count_does_not_change_output():
    cfg = SimConfig(100_000, 60, (100, 10, 2))
    thetas = to_natural(np.random.default_rng(2).uniform(size=(10_000, 8)))
    digests = []
    for workers in (1, 4):
        obs = simulate_batch(StreamBatch.for_batch(9, 0, 10_000), thetas, cfg, workers=workers).observed
        digests.append(hashlib.sha256(obs.tobytes()).hexdigest())
    assert digests[0] == digests[1]


def test_invalid_slots_are_flagged():
    cfg = SimConfig(100, 5, (60, 0, 0))
    thetas = np.array([THETA_FIXTURE, (0.1, 1, 1, 0.1, 0.1, 0.1, 0.1, 0.1)])
    traj = simulate_batch(StreamBatch.for_batch(0, 0, 2), thetas, cfg)
    assert traj.valid.tolist() == [False, True]


def test_day_one_flows_match_hazard():
    # Large hazards keep the 0-clamp and balance clamps inactive; floor(h + sqrt(h) z)
    # then has mean h - 1/2 (the periodic correction is below 1e-30 for sqrt(h) > 10).
    t = ParameterVector(0.3, 0.0, 1.0, 0.2, 0.3, 0.05, 0.5, 1.0)
    P = 10**6
    cfg = SimConfig(P, 2, (2000, 100, 10))
    n = 20_000
    traj = simulate_batch(StreamBatch.for_batch(11, 0, n), np.tile(t.as_array(), (n, 1)), cfg, full=True)
    x0, x1 = traj.full[:, 0].astype(float), traj.full[:, 1].astype(float)
    s_i = x0[:, 0] - x1[:, 0]
    a_r = x1[:, 3] - x0[:, 3]
    a_d = x1[:, 4] - x0[:, 4]
    i_ru = x1[:, 5] - x0[:, 5]
    i_a = x1[:, 2] - x0[:, 2] + a_r + a_d
    flows = np.stack([s_i, i_a, a_r, a_d, i_ru], axis=1)
    h = hazard(t, init_state(cfg, t), P)
    se = flows.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(flows.mean(axis=0) - (h - 0.5)) < 3 * se)


def test_random_thetas_conserve_and_stay_nonnegative():
    cfg = SimConfig(100_000, 120, (100, 10, 2))
    rng = np.random.default_rng(3)
    u = rng.uniform(size=(1000, 8))
    traj = simulate_batch(StreamBatch.for_batch(1, 0, 1000), to_natural(u), cfg, full=True)
    full = traj.full[traj.valid]
    assert np.all(full.sum(axis=2) == 100_000)
    assert np.all(full >= 0)
    assert np.all(np.diff(full[:, :, 3], axis=1) >= 0)
    assert np.all(np.diff(full[:, :, 4], axis=1) >= 0)
