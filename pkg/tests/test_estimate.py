import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize, stats

from unbiasgeo import estimate as E
from unbiasgeo import prior as P
from unbiasgeo.errors import BoundaryError, PreconditionError
from unbiasgeo.manifold import Dataset, make_builtin


def _em_data(seed, n, s):
    x = np.random.default_rng(seed).normal(0.0, math.sqrt(1.0 + s), size=n)
    return x, Dataset.from_array(x[:, None])


@given(st.integers(0, 10_000), st.sampled_from([0.5, 1.0, 2.0]))
def test_em_mle_and_map_closed_forms(seed, s):
    n = 20
    model = make_builtin("efron_morris", {"n": n})
    x, data = _em_data(seed, n, s)
    S = float(x @ x)
    assert E.mle(model, data).estimate[0] == pytest.approx(S / n - 1.0, abs=1e-10)
    est = E.map_estimate(model, P.make_prior(model, "log1p_var"), data).estimate[0]
    assert est == pytest.approx(S / (n - 2) - 1.0, abs=1e-10)


def test_em_natural_chart_gives_the_same_estimator():
    n = 15
    var = make_builtin("efron_morris", {"n": n})
    nat = make_builtin("efron_morris", {"n": n}, "natural")
    _, data = _em_data(4, n, 1.0)
    a = E.map_estimate(var, P.make_prior(var, "log1p_var"), data).estimate[0]
    b = E.map_estimate(nat, P.make_prior(nat, "log1p_var"), data).estimate[0]
    assert -0.5 / b - 1.0 == pytest.approx(a, rel=1e-9)


def test_mvn_mle_is_sample_mean():
    model = make_builtin("mvn_known_cov", {"d": 3})
    X = np.random.default_rng(1).normal(size=(40, 3)) + [1.0, -2.0, 0.5]
    assert E.mle(model, Dataset.from_array(X)).estimate == pytest.approx(X.mean(axis=0), abs=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mvn_norm_map_root(seed):
    n = 30
    model = make_builtin("mvn_known_cov", {"d": 2})
    X = np.random.default_rng(seed).normal(size=(n, 2)) + [1.5, 0.5]
    xbar = X.mean(axis=0)
    R = float(np.linalg.norm(xbar))
    r = 0.5 * (R + math.sqrt(R * R - 2.0 / n))
    est = E.map_estimate(model, P.make_prior(model, "norm_power", {"power": -0.5}), Dataset.from_array(X)).estimate
    assert est == pytest.approx(r * xbar / R, abs=1e-9)


def test_location_scale_mle():
    model = make_builtin("location_scale_normal")
    x = np.random.default_rng(7).normal(1.0, 2.0, size=50)
    est = E.mle(model, Dataset.from_array(x[:, None])).estimate
    # the built-in density is N(mu, sigma^2 / 2)
    assert est == pytest.approx([x.mean(), math.sqrt(2.0) * x.std()], abs=1e-9)


def _lme_oracle(units, start):
    def negll(p):
        a, d = p
        if a <= 0 or d <= 0:
            return np.inf
        return -sum(
            stats.multivariate_normal(np.zeros(u.size), d * np.eye(u.size) + a * np.ones((u.size, u.size))).logpdf(u)
            for u in units
        )

    res = optimize.minimize(negll, start, method="Nelder-Mead", options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 4000})
    return res.x


@pytest.mark.parametrize("seed", [3, 8])
def test_lme_mle_matches_independent_likelihood(seed):
    model = make_builtin("nested_error_lme", {"m": [2, 5] * 15})
    data = model.sampler(np.array([1.0, 1.5]), 30, np.random.default_rng(seed))
    est = E.mle(model, data).estimate
    assert est == pytest.approx(_lme_oracle(data.observations, est * 1.05), abs=1e-4)


def test_lme_map_matches_independent_objective():
    model = make_builtin("nested_error_lme", {"m": [2, 5] * 15})
    data = model.sampler(np.array([1.0, 1.5]), 30, np.random.default_rng(11))
    prior = P.make_prior(model, "lme_unit_pr1", {"unit": 0})
    est = E.map_estimate(model, prior, data).estimate

    def negpost(p):
        if p[0] <= 0 or p[1] <= 0:
            return np.inf
        ll = sum(
            stats.multivariate_normal(np.zeros(u.size), p[1] * np.eye(u.size) + p[0] * np.ones((u.size,) * 2)).logpdf(u)
            for u in data.observations
        )
        return -(ll + math.log(p[1] / 2.0 + p[0]))

    ref = optimize.minimize(negpost, est * 0.95, method="Nelder-Mead", options={"xatol": 1e-9, "fatol": 1e-12}).x
    assert est == pytest.approx(ref, abs=1e-4)


def test_constant_prior_gives_mle_candidates():
    model = make_builtin("location_scale_normal")
    data = Dataset.from_array(np.random.default_rng(2).normal(size=(25, 1)))
    a = E.mle(model, data)
    b = E.map_estimate(model, P.constant_prior(), data)
    c = E.map_estimate(model, None, data)
    assert a.candidates == b.candidates == c.candidates
    assert np.array_equal(a.estimate, b.estimate)
    assert a.method == "mle" and b.method == "map"


def test_boundary_estimate_raises():
    model = make_builtin("nested_error_lme", {"m": [2, 3, 2]})
    # every unit mean is zero, so the between-unit variance estimate is zero
    data = Dataset((np.array([1.0, -1.0]), np.array([0.5, -1.0, 0.5]), np.array([-2.0, 2.0])))
    with pytest.raises(BoundaryError) as err:
        E.mle(model, data)
    assert err.value.coordinate == 0


def test_empty_dataset():
    model = make_builtin("mvn_known_cov", {"d": 2})
    with pytest.raises(PreconditionError):
        E.mle(model, Dataset(()))


def test_tie_break_prefers_smallest_norm():
    c1 = E.Candidate((0.0,), (2.0, 0.0), -1.0, 0.0, 3, "converged")
    c2 = E.Candidate((0.0,), (-1.0, 0.5), -1.0 + 1e-14, 0.0, 3, "converged")
    c3 = E.Candidate((0.0,), (0.1, 0.1), 5.0, 0.0, 3, "max-iter")
    assert E._select([c1, c2, c3]) is c2
    assert E._select([c3]) is None


def test_explicit_starts_are_reported():
    model = make_builtin("mvn_known_cov", {"d": 2})
    data = Dataset.from_array(np.random.default_rng(0).normal(size=(10, 2)))
    res = E.mle(model, data, starts=[[5.0, 5.0], [-3.0, 1.0]])
    assert [c.start for c in res.candidates] == [(5.0, 5.0), (-3.0, 1.0)]
    assert all(c.status == "converged" for c in res.candidates)
    d = res.to_dict()
    assert d["method"] == "mle" and len(d["candidates"]) == 2


def test_default_starts_stay_inside():
    model = make_builtin("efron_morris", {"n": 5})
    data = Dataset.from_array(np.array([[0.01], [0.02], [-0.01], [0.0], [0.03]]))
    for s in E.default_starts(model, data, 5):
        assert model.contains(s)


@given(st.integers(0, 1000))
def test_plug_in_model_mle(seed):
    from conftest import exponential_model

    model = exponential_model()
    x = np.random.default_rng(seed).exponential(0.5, size=40)
    assert E.mle(model, Dataset.from_array(x[:, None])).estimate[0] == pytest.approx(1.0 / x.mean(), rel=1e-6)
