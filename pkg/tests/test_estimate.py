import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharelens.errors import DomainError, IdentificationError, RankDeficiencyError
from sharelens.estimate import (
    absorb_fixed_effects, check_loss, fit_iv, fit_ols, fit_quantile, quantile_process, recover_fixed_effects,
    stars,
)

import oracles


# -- fixed effects -----------------------------------------------------------


def test_one_way_exact_in_one_sweep():
    rng = np.random.default_rng(0)
    g = rng.integers(0, 7, 50)
    ab = absorb_fixed_effects(rng.normal(size=50), rng.normal(size=(50, 2)), {"g": g})
    assert ab.sweeps == 1
    for c in range(7):
        assert abs(ab.y[g == c].mean()) < 1e-14
    assert ab.dof == 7


def test_constant_within_group_demeans_to_zero():
    g = np.repeat([0, 1, 2], 4)
    x = np.repeat([3.0, -1.0, 8.0], 4)
    ab = absorb_fixed_effects(np.arange(12.0), x[:, None], {"g": g})
    np.testing.assert_allclose(ab.X, 0.0, atol=1e-14)


def test_balanced_two_way_sweeps():
    rng = np.random.default_rng(1)
    a, b = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
    ab = absorb_fixed_effects(rng.normal(size=16), rng.normal(size=(16, 1)), {"a": a.ravel(), "b": b.ravel()},
                              tol=1e-10)
    assert ab.sweeps <= 3
    assert ab.dof == 4 + 4 - 1


def test_frisch_waugh_against_dummies(frozen):
    o = frozen["fixed_effects"]
    y, X = np.array(o["y"]), np.array(o["X"])
    rep = fit_ols(y, X, fe={"g": o["g"], "h": o["h"]})
    np.testing.assert_allclose(rep.params, o["coef"], atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_frisch_waugh_property(seed):
    rng = np.random.default_rng(seed)
    n = 80
    g, h = rng.integers(0, 5, n), rng.integers(0, 4, n)
    X = rng.normal(size=(n, 2)) + 0.5 * g[:, None]
    y = X @ [1.0, -2.0] + g - h + rng.normal(size=n)
    rep = fit_ols(y, X, fe={"g": g, "h": h})
    np.testing.assert_allclose(rep.params, oracles.dummy_ols(y, X, [g, h]), atol=1e-8)


def test_recover_fixed_effects():
    rng = np.random.default_rng(2)
    g, h = rng.integers(0, 4, 60), rng.integers(0, 3, 60)
    a, b = rng.normal(size=4), rng.normal(size=3)
    eff = recover_fixed_effects(a[g] + b[h], {"g": g, "h": h})
    np.testing.assert_allclose(eff["g"][g] + eff["h"][h], a[g] + b[h], atol=1e-10)


# -- OLS ---------------------------------------------------------------------


def test_ols_exact_fit_and_intercept():
    x = np.arange(1.0, 6.0)
    rep = fit_ols(2 * x, x[:, None])
    assert rep.params[0] == pytest.approx(2.0)
    np.testing.assert_allclose(rep.resid, 0.0, atol=1e-12)
    y = np.array([1.0, 5.0, 9.0])
    assert fit_ols(y, np.ones((3, 1))).params[0] == pytest.approx(y.mean())


def test_ols_noise_recovery():
    rng = np.random.default_rng(0)
    x = rng.normal(size=10_000)
    rep = fit_ols(x + rng.normal(size=10_000), x[:, None])
    assert 0.97 <= rep.params[0] <= 1.03


def test_cluster_covariance_matches_loop(frozen):
    X, y = np.array(frozen["iv"]["X"]), np.array(frozen["iv"]["y"])
    rep = fit_ols(y, X, cluster=np.array(frozen["cluster"]["clusters"]))
    np.testing.assert_allclose(rep.cov, frozen["cluster"]["cov"], rtol=1e-10)


def test_hc1_matches_statsmodels_formula():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(40), rng.normal(size=40)])
    y = X @ [1.0, 2.0] + rng.normal(size=40) * (1 + np.abs(X[:, 1]))
    rep = fit_ols(y, X)
    e = y - X @ rep.params
    bread = np.linalg.inv(X.T @ X)
    want = bread @ (X.T * e**2) @ X @ bread * 40 / 38
    np.testing.assert_allclose(rep.cov, want, rtol=1e-10)


def test_rank_deficiency_names_columns():
    x = np.arange(10.0)
    X = pd.DataFrame({"a": x, "b": 2 * x, "c": np.ones(10)})
    with pytest.raises(RankDeficiencyError) as e:
        fit_ols(x, X)
    # either member of the collinear pair may be reported
    assert e.value.columns in (["a"], ["b"])


def test_report_conventions():
    rng = np.random.default_rng(4)
    X = pd.DataFrame({"const": 1.0, "price": rng.normal(size=200)})
    rep = fit_ols(1 - 0.7 * X["price"] + rng.normal(size=200), X)
    assert rep.alpha == pytest.approx(-rep.coef("price"))
    lo, hi = rep.conf_int("price")
    assert lo < rep.coef("price") < hi
    assert "***" in rep.to_text()
    json.loads(rep.to_json())
    assert stars(0.04) == "*" and stars(0.009) == "**" and stars(0.0009) == "***" and stars(0.2) == ""


# -- IV ----------------------------------------------------------------------


def test_iv_z_equals_x_is_ols():
    rng = np.random.default_rng(5)
    X = pd.DataFrame({"const": 1.0, "a": rng.normal(size=100), "b": rng.normal(size=100)})
    y = X.to_numpy() @ [1.0, 2.0, 3.0] + rng.normal(size=100)
    iv = fit_iv(y, X, ["a", "b"], X[["a", "b"]].rename(columns=lambda c: "z_" + c))
    np.testing.assert_allclose(iv.params, fit_ols(y, X).params, atol=1e-10)


def test_iv_matches_textbook(frozen):
    o = frozen["iv"]
    X = pd.DataFrame(np.array(o["X"]), columns=["const", "w", "x"])
    Z = pd.DataFrame(np.array(o["Z"])[:, 2:], columns=["z1", "z2"])
    rep = fit_iv(np.array(o["y"]), X, ["x"], Z)
    np.testing.assert_allclose(rep.params, o["tsls"], atol=1e-10)
    exact = fit_iv(np.array(o["y"]), X, ["x"], Z[["z1"]])
    np.testing.assert_allclose(exact.params, o["exact"], atol=1e-10)
    # sample moments vanish under exact identification
    Zfull = np.column_stack([np.array(o["X"])[:, :2], Z["z1"]])
    assert np.all(np.abs(Zfull.T @ exact.resid / len(exact.resid)) < 1e-8)


def test_gmm2step_equals_2sls_when_exact():
    rng = np.random.default_rng(6)
    z = rng.normal(size=300)
    x = z + rng.normal(size=300)
    X = pd.DataFrame({"const": 1.0, "x": x})
    y = 1 + x + rng.normal(size=300)
    a = fit_iv(y, X, ["x"], pd.DataFrame({"z": z}))
    b = fit_iv(y, X, ["x"], pd.DataFrame({"z": z}), method="gmm2step")
    np.testing.assert_allclose(a.params, b.params, atol=1e-10)


def test_iv_underidentified_and_missing_rows():
    rng = np.random.default_rng(7)
    X = pd.DataFrame({"const": 1.0, "x": rng.normal(size=50), "w": rng.normal(size=50)})
    with pytest.raises(IdentificationError):
        fit_iv(rng.normal(size=50), X, ["x", "w"], pd.DataFrame({"z": rng.normal(size=50)}))
    Z = pd.DataFrame({"z": X["x"] + rng.normal(size=50)})
    Z.loc[:4, "z"] = np.nan
    rep = fit_iv(rng.normal(size=50), X, ["x"], Z)
    assert rep.n == 45 and rep.ivdata.mask.sum() == 45


def test_iv_removes_endogeneity_bias():
    rng = np.random.default_rng(8)
    n = 5000
    z = rng.normal(size=n)
    u = rng.normal(size=n)
    x = z + u + rng.normal(size=n)
    y = 1 + 2 * x + u
    X = pd.DataFrame({"const": 1.0, "x": x})
    ols = fit_ols(y, X).coef("x")
    iv = fit_iv(y, X, ["x"], pd.DataFrame({"z": z}))
    assert ols > 2.2
    assert abs(iv.coef("x") - 2) < 3 * iv.stderr("x")


# -- quantile ---------------------------------------------------------------


def test_median_of_three():
    rep = fit_quantile(np.array([1.0, 2.0, 100.0]), np.ones((3, 1)), 0.5)
    assert rep.params[0] == pytest.approx(2.0, abs=1e-9)


@pytest.mark.parametrize("tau", ["0.1", "0.5", "0.9"])
def test_quantile_matches_lp(frozen, tau):
    o = frozen["quantile"]
    X, y = np.array(o["X"]), np.array(o["y"])
    rep = fit_quantile(y, X, float(tau))
    fit = o["fits"][tau]
    assert check_loss(y - X @ rep.params, float(tau)).sum() == pytest.approx(fit["objective"], abs=1e-6)
    np.testing.assert_allclose(rep.params, fit["coef"], atol=1e-6)


def test_quantile_slopes_increase_under_heteroskedasticity():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 4, 2000)
    y = x + (1 + 0.5 * x) * rng.normal(size=2000)
    X = np.column_stack([np.ones_like(x), x])
    reps, info = quantile_process(y, X, [0.1, 0.5, 0.9])
    slopes = [r.params[1] for r in reps]
    assert slopes[0] < slopes[1] < slopes[2]
    assert info["crossings"] == []


def test_quantile_fe_and_domain():
    rng = np.random.default_rng(1)
    g = rng.integers(0, 3, 90)
    x = rng.normal(size=90)
    y = x + g + rng.standard_t(3, size=90)
    rep = fit_quantile(y, x[:, None], 0.5, fe={"g": g})
    D = np.column_stack([x, (g[:, None] == np.arange(3)).astype(float)])
    b, f = oracles.lp_quantile(D, y, 0.5)
    assert rep.params[0] == pytest.approx(b[0], abs=1e-6)
    with pytest.raises(DomainError):
        fit_quantile(y, x[:, None], 1.0)
