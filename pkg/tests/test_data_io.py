import math

import numpy as np
import pytest

from pabc.abc_core import distance
from pabc.data_io import (
    JHU_FILES, DataError, PredictionBand, RunConfig, TraceWriter, config_hash, generate_synthetic,
    load_case_data, load_population, load_prediction, load_trace, persist_population,
    persist_prediction, persist_trace, read_manifest, read_series, records_from_trace,
    write_manifest, write_series,
)
from pabc.epi_model import ParameterVector, SimConfig
from pabc.sampling import BetaShape
from pabc.smc import ParticlePopulation, StageRecord, StepSizeState

DATES = ["1/22/20", "1/23/20", "1/24/20", "1/25/20"]


def write_jhu(tmp_path, confirmed, recovered, deaths, extra_rows=()):
    header = "Province/State,Country/Region,Lat,Long," + ",".join(DATES)
    for kind, rows in (("confirmed", confirmed), ("recovered", recovered), ("deaths", deaths)):
        lines = [header]
        for province, country, vals in list(rows) + list(extra_rows):
            lines.append(f"{province},{country},0,0," + ",".join(str(v) for v in vals))
        (tmp_path / JHU_FILES[kind]).write_text("\n".join(lines) + "\n")
    return tmp_path


def test_jhu_active_cases(tmp_path):
    d = write_jhu(
        tmp_path,
        [("", "Italy", [5, 10, 15, 20])], [("", "Italy", [0, 1, 2, 3])], [("", "Italy", [0, 0, 1, 1])],
        extra_rows=[("", "Spain", [1, 1, 1, 1])],
    )
    s = load_case_data(d, "Italy", "1/23/20", 2, 60_000_000)
    assert s.A.tolist() == [9, 12] and s.R.tolist() == [1, 2] and s.D.tolist() == [0, 1]
    assert s.dates == ["1/23/20", "1/24/20"]


def test_jhu_provinces_are_summed(tmp_path):
    rows = lambda a, b: [("North", "X", a), ("South", "X", b)]
    d = write_jhu(tmp_path, rows([1, 2, 3, 4], [10, 20, 30, 40]), rows([0] * 4, [0] * 4), rows([0] * 4, [1] * 4))
    s = load_case_data(d, "X", "2020-01-22", 4, 1000)
    assert s.A.tolist() == [10, 21, 32, 43]


def test_jhu_missing_country_lists_available(tmp_path):
    d = write_jhu(tmp_path, [("", "Italy", [1] * 4)], [("", "Italy", [0] * 4)], [("", "Italy", [0] * 4)],
                  extra_rows=[("", "Spain", [0] * 4)])
    with pytest.raises(DataError, match="available: Italy, Spain"):
        load_case_data(d, "France", "1/22/20", 2, 100)


def test_jhu_nonmonotone_deaths_cites_date(tmp_path):
    d = write_jhu(tmp_path, [("", "Italy", [5, 6, 7, 8])], [("", "Italy", [0] * 4)], [("", "Italy", [0, 2, 1, 1])])
    with pytest.raises(DataError, match="deaths decreases on 1/24/20"):
        load_case_data(d, "Italy", "1/22/20", 4, 100)


def test_jhu_malformed_cell(tmp_path):
    d = write_jhu(tmp_path, [("", "Italy", [5, "x", 7, 8])], [("", "Italy", [0] * 4)], [("", "Italy", [0] * 4)])
    with pytest.raises(DataError, match=r":2: column '1/23/20'"):
        load_case_data(d, "Italy", "1/22/20", 4, 100)


def test_jhu_negative_active(tmp_path):
    d = write_jhu(tmp_path, [("", "Italy", [1, 1, 1, 1])], [("", "Italy", [0, 2, 2, 2])], [("", "Italy", [0] * 4)])
    with pytest.raises(DataError, match="negative on 1/23/20"):
        load_case_data(d, "Italy", "1/22/20", 4, 100)


def test_jhu_window_out_of_range(tmp_path):
    d = write_jhu(tmp_path, [("", "Italy", [1] * 4)], [("", "Italy", [0] * 4)], [("", "Italy", [0] * 4)])
    with pytest.raises(DataError, match="past the last date"):
        load_case_data(d, "Italy", "1/24/20", 5, 100)


CFG = SimConfig(100_000, 60, (100, 10, 2))
THETA = ParameterVector(0.1, 20.0, 0.5, 0.05, 0.1, 0.01, 0.5, 1.0)


def test_synthetic_identity_and_determinism():
    a = generate_synthetic(THETA, CFG, 5)
    b = generate_synthetic(THETA, CFG, 5)
    assert distance(a.as_array(), a) == 0.0
    np.testing.assert_array_equal(a.as_array(), b.as_array())
    assert not np.array_equal(a.as_array(), generate_synthetic(THETA, CFG, 6).as_array())


def test_synthetic_no_new_confirmations():
    t = ParameterVector(0.1, 20.0, 0.5, 0.05, 0.0, 0.01, 0.5, 0.0)
    s = generate_synthetic(t, CFG, 1)
    outflow = np.diff(s.R) + np.diff(s.D)
    np.testing.assert_array_equal(np.diff(s.A), -outflow)


def test_series_round_trip(tmp_path):
    s = generate_synthetic(THETA, CFG, 2)
    back, theta = read_series(write_series(tmp_path / "s.tsv", s, THETA))
    np.testing.assert_array_equal(back.as_array(), s.as_array())
    assert theta == THETA and back.P == s.P


def test_population_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    d = rng.uniform(0, 0.3, size=1000)
    pop = ParticlePopulation.weighted(rng.uniform(size=(1000, 8)), d, 4, 0.3)
    back = load_population(persist_population(tmp_path / "p.tsv", pop))
    np.testing.assert_array_equal(back.theta_unit, pop.theta_unit)
    np.testing.assert_array_equal(back.distances, pop.distances)
    np.testing.assert_array_equal(back.weights, pop.weights)
    assert (back.stage, back.epsilon) == (4, 0.3)


def test_infinite_epsilon_population(tmp_path):
    pop = ParticlePopulation.weighted(np.full((3, 8), 0.5), [0.1, 0.2, 0.3], 0, math.inf)
    assert load_population(persist_population(tmp_path / "p.tsv", pop)).epsilon == math.inf


def records():
    mcmc = StepSizeState("MCMC", 0.1234567890123)
    return [
        StageRecord(0, math.inf, 100, 10, 1.0, mcmc),
        StageRecord(1, 0.5, 300, 30, 0.2, StepSizeState("MCMC", 0.2, adaptation_frozen=True)),
        StageRecord(1, 0.1 / 3, 700, 70, 0.05, StepSizeState("BDSS", beta_shape=BetaShape(1.0, 2.0))),
    ]


def test_trace_rows_match_records(tmp_path):
    recs = records()
    rows = load_trace(persist_trace(tmp_path / "t.tsv", recs, trial=3))
    assert len(rows) == len(recs)
    back = records_from_trace(rows)
    for r, b, row in zip(recs, back, rows):
        assert row.trial == 3
        assert (b.stage, b.epsilon, b.runs_used, b.batches, b.acceptance_ratio) == (
            r.stage, r.epsilon, r.runs_used, r.batches, r.acceptance_ratio)
        assert b.step.kind == r.step.kind and b.step.beta_shape == r.step.beta_shape
        if r.step.kind == "MCMC":
            assert b.step.scalar_s == r.step.scalar_s
            assert b.step.adaptation_frozen == r.step.adaptation_frozen


def test_trace_readable_mid_run(tmp_path):
    path = tmp_path / "t.tsv"
    w = TraceWriter(path)
    w(records()[0])
    assert len(load_trace(path)) == 1
    w(records()[1])
    assert len(load_trace(path)) == 2
    w.close()


def test_prediction_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    med = rng.uniform(size=(5, 3))
    band = PredictionBand(med, med - 0.1, med + 0.1)
    back = load_prediction(persist_prediction(tmp_path / "b.tsv", band))
    np.testing.assert_array_equal(back.median, band.median)
    np.testing.assert_array_equal(back.upper, band.upper)
    assert back.covers(med).all()


def test_bad_header(tmp_path):
    (tmp_path / "t.tsv").write_text("a\tb\n1\t2\n")
    with pytest.raises(DataError, match="header"):
        load_trace(tmp_path / "t.tsv")


def test_run_config():
    cfg = RunConfig(batch=10, batch_budget=50)
    assert cfg.simulation_budget == 500
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        RunConfig(kernel="HMC")
    assert config_hash(cfg.to_dict()) != config_hash(RunConfig(batch=10, batch_budget=51).to_dict())
    assert config_hash(cfg.to_dict(), exclude=("seed",)) == config_hash(
        RunConfig(batch=10, batch_budget=50, seed=9).to_dict(), exclude=("seed",))


def test_manifest_round_trip(tmp_path):
    write_manifest(tmp_path / "m.json", {"a": 1}, note="x")
    m = read_manifest(tmp_path / "m.json")
    assert m["config"] == {"a": 1} and m["note"] == "x" and m["config_hash"]
