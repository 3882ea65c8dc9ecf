import warnings

import numpy as np
import pytest

from ivcox.errors import (
    DimensionMismatch,
    EmptyData,
    IdentificationViolation,
    InvalidParameter,
    NonFiniteValue,
    TiedEventTimes,
)
from ivcox.em import EMConfig
from ivcox.model import (
    BaselineHazard,
    Dataset,
    DesignSpec,
    ParameterSet,
    SubjectRecord,
    build_designs,
    has_tied_events,
    jitter_ties,
    validate_dataset,
    validate_identification,
)


def records():
    return [
        SubjectRecord(1.0, True, True, (0.5,), (2.0,)),
        SubjectRecord(2.0, False, False, (-0.1,), (0.3,)),
        SubjectRecord(3.0, True, True, (0.2,), (1.1,)),
    ]


def test_valid_dataset():
    ds = validate_dataset(records())
    assert (ds.n, ds.p, ds.K) == (3, 1, 1)
    assert ds.n_events == 2
    assert ds.records[0] == records()[0]


def test_empty_dataset():
    with pytest.raises(EmptyData):
        validate_dataset([])


def test_dimension_mismatch():
    recs = records() + [SubjectRecord(4.0, True, False, (0.1, 0.2), (1.0,))]
    with pytest.raises(DimensionMismatch):
        validate_dataset(recs)


def test_negative_time_rejected():
    recs = records()
    recs[1] = SubjectRecord(-1.0, False, False, (0.0,), (0.0,))
    with pytest.raises(NonFiniteValue):
        validate_dataset(recs)


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_covariate_rejected(bad):
    recs = records()
    recs[0] = SubjectRecord(1.0, True, True, (bad,), (1.0,))
    with pytest.raises(NonFiniteValue):
        validate_dataset(recs)


def test_tied_event_times_rejected():
    recs = records()
    recs[2] = SubjectRecord(1.0, True, False, (0.2,), (1.1,))
    with pytest.raises(TiedEventTimes):
        validate_dataset(recs)


def test_tie_between_censored_subjects_is_allowed():
    recs = records() + [SubjectRecord(2.0, False, True, (0.0,), (0.0,))]
    assert validate_dataset(recs).n == 4


def test_jitter_policy_breaks_ties_and_preserves_ranks():
    t = np.array([1.0, 2.0, 2.0, 2.0, 5.0])
    d = np.array([1, 1, 1, 0, 1], bool)
    ds = Dataset.from_arrays(t, d, [1, 0, 1, 0, 1], tie_policy="jitter", seed=3)
    assert not has_tied_events(ds.time, ds.event)
    assert np.all(np.abs(ds.time - t) <= 1e-9 * 5.0)
    assert ds.time[0] < ds.time[1:4].min() and ds.time[1:4].max() < ds.time[4]
    again = Dataset.from_arrays(t, d, [1, 0, 1, 0, 1], tie_policy="jitter", seed=3)
    np.testing.assert_array_equal(ds.time, again.time)


def test_jitter_respects_tiny_gaps():
    t = np.array([1.0, 1.0, 1.0 + 1e-12])
    out = jitter_ties(t, np.ones(3, bool), seed=0)
    assert len(np.unique(out)) == 3
    assert out.max() == t[2]


def test_dataset_arrays_are_read_only():
    ds = validate_dataset(records())
    with pytest.raises(ValueError):
        ds.time[0] = 9.0


def test_build_designs_main_effects():
    ds = Dataset.from_arrays([1.0], [1], [1], [[0.5]], [[2.0]])
    Xw, Xt = build_designs(ds, DesignSpec("z1 + x1", "w + x1"))
    np.testing.assert_array_equal(Xw, [[2.0, 0.5]])
    np.testing.assert_array_equal(Xt, [[1.0, 0.5]])


@pytest.mark.parametrize("w, expected", [(1, [1.0, 0.5, 0.5]), (0, [0.0, 0.5, 0.0])])
def test_build_designs_interaction(w, expected):
    ds = Dataset.from_arrays([1.0], [1], [w], [[0.5]], [[2.0]])
    _, Xt = build_designs(ds, DesignSpec(["z1"], ["w", "x1", "w:x1"]))
    np.testing.assert_array_equal(Xt[0], expected)


def test_design_term_out_of_range():
    ds = validate_dataset(records())
    with pytest.raises(DimensionMismatch):
        build_designs(ds, DesignSpec("z2", "w"))


def test_design_rejects_misplaced_terms():
    with pytest.raises(ValueError):
        DesignSpec("w + z1", "w")
    with pytest.raises(ValueError):
        DesignSpec("z1", "w + z1")
    with pytest.raises(ValueError):
        DesignSpec("z1", "x1")


def test_default_design():
    d = DesignSpec.default(p=2, K=1)
    assert d.treatment_design == ("z1", "x1", "x2")
    assert d.hazard_design == ("w", "x1", "x2")


def test_identification_default_ok():
    validate_identification(DesignSpec("z1", "w + x1"), EMConfig())


def test_identification_hazard_intercept():
    with pytest.raises(IdentificationViolation) as err:
        validate_identification(DesignSpec("z1", "1 + w"), EMConfig())
    assert err.value.condition == "2"


def test_identification_treatment_intercept_requires_fixed_rho():
    with pytest.raises(IdentificationViolation) as err:
        validate_identification(DesignSpec("1 + z1", "w"), EMConfig())
    assert err.value.condition == "3"
    validate_identification(DesignSpec("1 + z1", "w"), EMConfig(fixed_rho=0.3))


def test_identification_sigma_estimation_warns():
    with pytest.warns(UserWarning, match="not identified"):
        validate_identification(DesignSpec("z1", "w"), EMConfig(estimate_sigma_u=True))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        validate_identification(DesignSpec("z1", "w"), EMConfig())


def test_parameter_set_bounds():
    with pytest.raises(InvalidParameter):
        ParameterSet([1.0], [0.5], rho=0.999)
    with pytest.raises(InvalidParameter):
        ParameterSet([1.0], [0.5], sigma_u=0.0)
    p = ParameterSet([1.0], [0.5, 0.2], rho=0.3)
    np.testing.assert_array_equal(p.vector(), [0.5, 0.2, 1.0, 0.3])
    assert p.xi == (1.0, 0.3)


def test_baseline_step_function():
    bh = BaselineHazard([1.0, 2.0, 4.0], [0.5, 0.25, 1.0])
    np.testing.assert_allclose(bh.cumulative([0.5, 1.0, 1.5, 2.0, 3.9, 4.0, 10.0]),
                               [0.0, 0.5, 0.5, 0.75, 0.75, 1.75, 1.75])
    np.testing.assert_allclose(bh.jump_at([1.0, 1.5, 4.0]), [0.5, 0.0, 1.0])
    assert bh.n_s == 3
    with pytest.raises(InvalidParameter):
        BaselineHazard([1.0, 2.0], [0.5, 0.0])
    with pytest.raises(InvalidParameter):
        BaselineHazard([2.0, 1.0], [0.5, 0.5])
