import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canopy_abe.errors import DomainError, SingularDesignError, ValidationError
from canopy_abe.regression import (
    LogLogModel,
    Observation,
    aic_value,
    fit_loglog,
    load_model,
    predict,
    predict_loglog,
    save_model,
    stepwise_select,
)
from canopy_abe.validation import loocv

from oracles import normal_equations
from synth import DECOYS, TRUE_NAME, loglinear, planted


def model(beta, sigma2=0.0, names=("x",), rng=None):
    return LogLogModel(names, beta, sigma2, 10, 0.0, rng)


# -- fitting -----------------------------------------------------------------------


def test_noiseless_recovery():
    xs = np.arange(1.0, 11.0)
    data = [Observation(str(i), math.exp(1 + 2 * math.log(x)), {"x": x}) for i, x in enumerate(xs)]
    m = fit_loglog(data, ["x"])
    assert m.beta == pytest.approx([1.0, 2.0], abs=1e-10)
    assert m.sigma2 == pytest.approx(0.0, abs=1e-10)
    assert m.n_obs == 10
    assert m.predictor_range[0] == pytest.approx((1.0, 10.0), rel=1e-14)


def test_constant_column_is_singular():
    data = [Observation(str(i), float(i + 1), {"x": 3.0}) for i in range(6)]
    with pytest.raises(SingularDesignError):
        fit_loglog(data, ["x"])


def test_nonpositive_response_names_row():
    data = [Observation("a", 1.0, {"x": 1.0}), Observation("b", 0.0, {"x": 2.0}),
            Observation("c", 2.0, {"x": 3.0})]
    with pytest.raises(DomainError, match="row 1"):
        fit_loglog(data, ["x"])


def test_nonpositive_predictor_names_row():
    data = [Observation("a", 1.0, {"x": 1.0}), Observation("b", 2.0, {"x": 2.0}),
            Observation("c", 3.0, {"x": -1.0})]
    with pytest.raises(DomainError, match="row 2"):
        fit_loglog(data, ["x"])


def test_too_few_rows():
    data = [Observation("a", 1.0, {"x": 1.0}), Observation("b", 2.0, {"x": 2.0})]
    with pytest.raises(ValidationError):
        fit_loglog(data, ["x"])


def test_sigma2_and_aic_definitions():
    data = loglinear(30, [0.3, 0.8, -0.4], np.random.default_rng(5), sigma=0.1)
    m = fit_loglog(data, ["x0", "x1"])
    X = np.column_stack([np.ones(30)] + [np.log([o.metrics[c] for o in data]) for c in ("x0", "x1")])
    y = np.log([o.response for o in data])
    rss = float(np.sum((y - X @ normal_equations(X, y)) ** 2))
    assert m.sigma2 == pytest.approx(rss / (30 - 2 - 1), rel=1e-10)
    assert m.aic == pytest.approx(30 * math.log(rss / 30) + 2 * 4, rel=1e-10)
    assert aic_value(rss, 30, 3) == pytest.approx(m.aic, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.integers(12, 100))
def test_matches_normal_equations(seed, k, n):
    rng = np.random.default_rng(seed)
    beta = rng.uniform(-2, 2, k + 1)
    data = loglinear(n, beta, rng, sigma=0.3)
    names = [f"x{i}" for i in range(k)]
    m = fit_loglog(data, names)
    X = np.column_stack([np.ones(n)] + [np.log([o.metrics[c] for o in data]) for c in names])
    y = np.log([o.response for o in data])
    want = normal_equations(X, y)
    assert np.allclose(m.beta, want, rtol=1e-8, atol=1e-8 * np.abs(want).max())


# -- prediction -----------------------------------------------------------------------


def test_predict_examples():
    assert predict_loglog(model([0.0, 1.0]), {"x": 5.0}) == pytest.approx(5.0, abs=1e-12)
    assert predict_loglog(model([0.0, 1.0], 0.02), {"x": 5.0}) == pytest.approx(5 * math.exp(0.01), rel=1e-14)
    assert 5 * math.exp(0.01) == pytest.approx(5.0502, abs=1e-4)


def test_predict_domain_errors():
    m = model([0.0, 1.0])
    with pytest.raises(DomainError):
        predict_loglog(m, {})
    with pytest.raises(DomainError):
        predict_loglog(m, {"x": 0.0})


def test_dispatching_predict():
    assert predict(model([0.0, 1.0]), {"x": 5.0}) == pytest.approx(5.0)


def test_clamp_limits_extrapolation():
    m = model([0.0, 2.0], names=("x",), rng=((2.0, 4.0),))
    assert predict_loglog(m, {"x": 8.0}) == pytest.approx(64.0)
    assert predict_loglog(m, {"x": 8.0}, clamp=True) == pytest.approx(16.0)
    assert predict_loglog(m, {"x": 1.0}, clamp=True) == pytest.approx(4.0)
    assert predict_loglog(m, {"x": 3.0}, clamp=True) == predict_loglog(m, {"x": 3.0})
    # the domain check still runs before clamping
    with pytest.raises(DomainError):
        predict_loglog(m, {"x": 0.0}, clamp=True)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 3.0), st.floats(-1, 1), st.floats(0.1, 100), st.floats(1.0001, 2.0))
def test_monotone_in_positive_coefficient(b, b0, x, factor):
    m = model([b0, b], 0.05)
    assert predict_loglog(m, {"x": x * factor}) > predict_loglog(m, {"x": x})


def test_invalid_model():
    with pytest.raises(ValidationError):
        LogLogModel(("x",), [1.0], 0.0, 10, 0.0)
    with pytest.raises(ValidationError):
        LogLogModel(("x",), [1.0, 2.0], -1.0, 10, 0.0)


# -- stepwise ----------------------------------------------------------------------------


def test_stepwise_picks_planted_predictor():
    # each decoy passes the AIC penalty with probability ~0.16, so the exact
    # single-predictor outcome is a property of this seed
    trace = []
    m = stepwise_select(planted(1), [TRUE_NAME, *DECOYS], trace=trace)
    assert m.predictor_names == (TRUE_NAME,)
    assert m.beta[1] == pytest.approx(1.2, abs=0.02)
    assert trace[0]["move"] == "start" and trace[1]["move"] == "+" + TRUE_NAME
    assert [t["aic"] for t in trace] == sorted((t["aic"] for t in trace), reverse=True)


def test_stepwise_pure_noise_gives_intercept_only():
    rng = np.random.default_rng(0)
    names = [TRUE_NAME, *DECOYS]
    data = [Observation(str(j), float(math.exp(rng.normal(3, 0.2))),
                        {n: float(rng.uniform(1, 30)) for n in names}) for j in range(100)]
    assert stepwise_select(data, names).predictor_names == ()


def test_stepwise_respects_max_predictors():
    rng = np.random.default_rng(2)
    names = ["zmean_f", "zsd_f", "zp10_f", "zp20_f", "zp30_f", "zp40_f"]
    data = loglinear(120, [0.1, 0.5, -0.4, 0.3, 0.7, -0.6, 0.2], rng, sigma=0.01, names=names)
    full = stepwise_select(data, names, max_predictors=6)
    assert len(full.predictor_names) == 6
    for cap in (0, 1, 2, 4):
        assert len(stepwise_select(data, names, max_predictors=cap).predictor_names) <= cap


def test_stepwise_drops_nonpositive_candidates():
    data = planted(1, n=60)
    data = [Observation(o.plot_id, o.response, {**o.metrics, "d2_f": 0.0 if i == 0 else 5.0})
            for i, o in enumerate(data)]
    m = stepwise_select(data, [TRUE_NAME, "d2_f"])
    assert "d2_f" not in m.predictor_names


def test_stepwise_empty_pool():
    with pytest.raises(ValidationError):
        stepwise_select(planted(0, n=20), ["not_a_metric"])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_stepwise_row_order_free(seed):
    data = planted(seed % 1000, n=80, sigma=0.3)
    perm = list(np.random.default_rng(seed).permutation(len(data)))
    a = stepwise_select(data, [TRUE_NAME, *DECOYS])
    b = stepwise_select([data[i] for i in perm], [TRUE_NAME, *DECOYS])
    assert a.predictor_names == b.predictor_names
    assert np.allclose(a.beta, b.beta, rtol=1e-10, atol=1e-12)


# -- LOOCV and persistence ------------------------------------------------------------------


def test_loocv_noiseless_equals_full_fit():
    data = loglinear(20, [1.0, 0.5, -0.3], np.random.default_rng(9))
    names = ["x0", "x1"]
    full = fit_loglog(data, names)
    cv = loocv(data, lambda rows: fit_loglog(rows, names), lambda m, o: predict_loglog(m, o.metrics))
    want = [predict_loglog(full, o.metrics) for o in data]
    assert np.allclose(cv, want, rtol=1e-8)


def test_model_file_round_trip(tmp_path):
    data = loglinear(40, [0.2, 1.1, 0.4], np.random.default_rng(4), sigma=0.2)
    m = fit_loglog(data, ["x0", "x1"])
    p = tmp_path / "m.json"
    save_model(m, p)
    doc = json.loads(p.read_text())
    assert doc["family"] == "loglog" and doc["predictor_names"] == ["x0", "x1"]
    assert "toolkit_version" in doc
    back = load_model(p)
    for o in data:
        assert predict_loglog(back, o.metrics) == predict_loglog(m, o.metrics)
        assert predict_loglog(back, o.metrics, clamp=True) == predict_loglog(m, o.metrics, clamp=True)
