import csv
import io
import json

import numpy as np
import pytest
from scipy import stats

from ivcox.em import EMConfig
from ivcox.errors import EmptyEstimates, InvalidSpec
from ivcox.rng import SeededStream
from ivcox.simulation import (
    TABLE_COLUMNS,
    TRUE_HR,
    format_table,
    generate,
    run_replications,
    scenario,
    summarize,
    table_rows,
    to_csv,
    to_json,
)

BIG = 100_000


def test_true_hazard_ratio():
    assert TRUE_HR == pytest.approx(1.6487, abs=1e-4)


@pytest.mark.parametrize("bad", [0, 8, -1])
def test_unknown_scenario(bad):
    with pytest.raises(InvalidSpec):
        scenario(bad)


def test_scenario_table():
    assert scenario(2).sigma_u2 == 0.1 and scenario(2).sigma_uv == pytest.approx(0.4 * np.sqrt(0.1))
    assert scenario(3).sigma_uv == pytest.approx(0.1)
    assert scenario(4).alpha_wz == 0.1
    assert scenario(5).treatment_family == "logistic"
    assert scenario(6).frailty_family == "centered-gamma"
    assert scenario(7).frailty_family == "student-t"
    assert scenario(3).truth()["rho"] == 0.1


def test_generate_marginals():
    g = generate(scenario(1, n=BIG), SeededStream(1))
    ds = g.dataset
    assert abs(ds.X.mean()) < 0.01 and ds.X.min() >= -1 and ds.X.max() <= 1
    assert abs(ds.Z.mean() - 1.0) < 0.01
    assert abs(np.corrcoef(g.U, g.V)[0, 1] - 0.4) < 0.01
    assert np.array_equal(ds.treatment, ds.Z[:, 0] + g.V >= 0)
    assert g.censoring_fraction == pytest.approx(1 - ds.event.mean())


def test_event_fraction_near_seventy_percent():
    g = generate(scenario(1, n=BIG), SeededStream(8))
    assert 0.65 <= 1 - g.censoring_fraction <= 0.75


def test_generate_reproducible():
    a = generate(scenario(1, n=50), SeededStream(3, (4,)))
    b = generate(scenario(1, n=50), SeededStream(3, (4,)))
    np.testing.assert_array_equal(a.dataset.time, b.dataset.time)
    np.testing.assert_array_equal(a.U, b.U)


def test_gamma_scenario_correlation():
    g = generate(scenario(6, n=BIG), SeededStream(6))
    assert abs(np.corrcoef(g.U, g.V)[0, 1] - 0.4) < 0.05
    assert abs(g.U.mean()) < 1e-12


def test_logistic_scenario_structure():
    g = generate(scenario(5, n=BIG), SeededStream(5))
    assert abs(g.V.var() - np.pi**2 / 3) < 0.1
    assert abs(np.cov(g.U, g.V)[0, 1] - 0.45 * np.pi**2 / 3) < 0.1


def test_null_confounding_latent_balance():
    g = generate(scenario(1, n=BIG, sigma_uv_factor=0.0), SeededStream(7))
    w = g.dataset.treatment
    assert stats.ks_2samp(g.U[w], g.U[~w]).statistic < 0.02


# --------------------------------------------------------------------------- summarize

def test_summarize_hand_case():
    s = summarize([1.0, 2.0, 3.0], 2.0)
    assert (s.mean, s.sd, s.median) == (2.0, 1.0, 2.0)
    assert s.rmse == pytest.approx(np.sqrt(2 / 3), rel=1e-15)
    assert s.cv == 0.5


def test_summarize_at_truth():
    s = summarize([1.649] * 4, 1.649)
    assert s.rmse == 0.0 and s.sd == 0.0


def test_summarize_single():
    s = summarize([1.649], 1.649)
    assert s.mean == s.median == 1.649 and s.rmse == 0.0
    assert s.sd == 0.0 and not s.sd_defined


def test_summarize_even_median_and_order():
    s = summarize([4.0, 1.0, 3.0, 2.0], 0.0)
    assert s.median == 2.5 and s.min <= s.median <= s.max


def test_summarize_empty():
    with pytest.raises(EmptyEstimates):
        summarize([], 1.0)


# --------------------------------------------------------------------------- replications

@pytest.mark.parametrize("sid", [1, 2, 4, 6, 7])
def test_confounding_bias_direction(sid):
    res = run_replications(scenario(sid, n=500), 30, seed=11, estimators=("Ordinary", "Ordinary-infeasible"))
    assert res.estimates("Ordinary").mean() > res.estimates("Ordinary-infeasible").mean()


def test_infeasible_oracle_sanity():
    res = run_replications(scenario(1, n=500), 100, seed=12, estimators=("Ordinary", "Ordinary-infeasible"))
    assert 1.55 <= res.estimates("Ordinary-infeasible").mean() <= 1.80
    assert 2.05 <= res.estimates("Ordinary").mean() <= 2.40


@pytest.fixture(scope="module")
def tiny_result():
    return run_replications(scenario(1, n=120), 3, EMConfig(B=20), seed=5)


def test_replications_deterministic(tiny_result):
    again = run_replications(scenario(1, n=120), 3, EMConfig(B=20), seed=5)
    assert again.replications == tiny_result.replications
    assert format_table(again, True) == format_table(tiny_result, True)


def test_replications_parallel_matches_serial(tiny_result):
    par = run_replications(scenario(1, n=120), 3, EMConfig(B=20), seed=5, jobs=2)
    assert par.replications == tiny_result.replications


def test_failures_are_counted():
    res = run_replications(scenario(1, n=120), 2, EMConfig(B=20, max_iter=1), seed=5)
    assert res.n_failed("Proposed") == 2
    assert res.estimates("Proposed").size == 0
    assert [s.estimator for s in res.summaries()] == ["Ordinary", "Ordinary-infeasible"]


def test_csv_round_trip(tiny_result):
    rows = table_rows(tiny_result, parameters=True)
    parsed = list(csv.DictReader(io.StringIO(to_csv(rows))))
    assert tuple(parsed[0]) == TABLE_COLUMNS
    assert len(parsed) == 3 + 5
    assert float(parsed[0]["mean"]) == rows[0]["mean"]


def test_json_round_trip(tiny_result):
    rows = table_rows(tiny_result)
    doc = json.loads(to_json(tiny_result, rows))
    assert doc["reps"] == 3 and doc["seed"] == 5
    assert doc["rows"] == json.loads(json.dumps(rows))
    assert [r["estimator"] for r in doc["rows"]] == ["Proposed", "Ordinary", "Ordinary-infeasible"]
