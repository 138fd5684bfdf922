"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

Criteria that cannot be met are strict xfails that still print their FAIL line
together with the measured numbers.
"""

import itertools
import math
import time

import numpy as np
import pytest
from scipy import integrate, stats

from unbiasgeo import geodesic as GD
from unbiasgeo import geometry as G
from unbiasgeo import mc
from unbiasgeo import prior as P
from unbiasgeo.manifold import LS_C1, LS_C2, LS_R2, make_builtin

LME_GRID = tuple(itertools.product((0.5, 1.0, 2.0), (0.5, 1.0, 2.0)))
LME_PARAMS = {"m_pattern": [2, 5], "n_units": 100}


@pytest.fixture
def line(capsys):
    def emit(label, ok, detail=""):
        with capsys.disabled():
            print(f"\n{label}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())

    return emit


def _neg(f):
    return P.Estimand(lambda x: -f.eval(x), lambda x: -f.grad(x), lambda x: -f.hessian(x), f"-{f.label}")


# ---------------------------------------------------------------------------
# 1. Efron-Morris bias law
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def em_run():
    exp = mc.BiasExperiment("efron_morris", "shrinkage", ((0.5,), (1.0,), (2.0,)), (20, 50, 100, 200), 200_000,
                            20261016, prior="log1p_var")
    t = time.perf_counter()
    rep = mc.run_bias(exp)
    return rep, time.perf_counter() - t


def _em_exact(s, n):
    # E[n / chi2_n] = n / (n - 2)
    return 2.0 * n / ((n - 2.0) * (1.0 + s))


def test_c1_map_arm_is_unbiased(em_run, line):
    rep, secs = em_run
    z = [c.mean_bias / c.se for c in rep.cells if c.arm == "map"]
    ok = max(map(abs, z)) <= 3.0 and secs <= 120.0
    line("C1 efron_morris MAP bias within 3 SE of 0", ok, f"max|z|={max(map(abs, z)):.2f} runtime={secs:.1f}s")
    assert ok


def test_c1_mle_arm_matches_exact_bias(em_run, line):
    rep, _ = em_run
    z = [(c.n_times_bias - _em_exact(c.param_point[0], c.n)) / (c.n * c.se) for c in rep.cells if c.arm == "mle"]
    ok = max(map(abs, z)) <= 3.0
    line("C1 efron_morris MLE n*bias vs exact 2n/((n-2)(1+s))", ok, f"max|z|={max(map(abs, z)):.2f}")
    assert ok


@pytest.mark.xfail(strict=True, reason="the leading-order law misses the exact bias by a factor n/(n-2)")
def test_c1_mle_arm_leading_order_law(em_run, line):
    rep, _ = em_run
    worst = max(
        (abs(c.n_times_bias - 2.0 / (1.0 + c.param_point[0])) / (c.n * c.se), c.param_point[0], c.n)
        for c in rep.cells
        if c.arm == "mle"
    )
    ok = worst[0] <= 3.0
    line("C1 efron_morris MLE n*bias = 2/(1+s) within 3 SE per cell", ok,
         f"worst z={worst[0]:.1f} at s={worst[1]}, n={worst[2]}")
    assert ok


def test_c1_order_fits(em_run, line):
    rep, _ = em_run
    fits = {(f.param_point, f.arm): f for f in rep.fits}
    mle_ok = all(abs(fits[(p, "mle")].slope + 1.0) <= 0.15 for p in ((0.5,), (1.0,), (2.0,)))
    map_ok = all(fits[(p, "map")].verdict == "second-order unbiased" for p in ((0.5,), (1.0,), (2.0,)))
    slopes = ", ".join(f"{fits[(p, 'mle')].slope:.3f}" for p in ((0.5,), (1.0,), (2.0,)))
    line("C1 efron_morris MLE slope -1 and MAP verdict", mle_ok and map_ok, f"mle slopes=[{slopes}]")
    assert mle_ok and map_ok


# ---------------------------------------------------------------------------
# 2. MVN norm
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def mvn_run():
    exp = mc.BiasExperiment("mvn_known_cov", "norm", ((1.0, 0.0), (0.0, 2.0)), (50, 100, 200), 200_000, 4242,
                            prior="norm_power", model_params={"d": 2}, prior_params={"power": -0.5})
    return mc.run_bias(exp)


def _rice_bias(r, n):
    """Exact E|xbar| - r for xbar ~ N(xi, I/n), |xi| = r, by quadrature of the Rice density."""
    nu = r * math.sqrt(n)
    mean, _ = integrate.quad(lambda x: x * stats.rice.pdf(x, nu), 0.0, nu + 40.0, epsabs=1e-13, limit=200)
    return mean / math.sqrt(n) - r


def test_c2_rice_oracle_is_consistent():
    for r, n in ((1.0, 50), (2.0, 200)):
        assert _rice_bias(r, n) == pytest.approx(stats.rice.mean(r * math.sqrt(n)) / math.sqrt(n) - r, rel=1e-8)


def test_c2_mle_arm(mvn_run, line):
    cells = [c for c in mvn_run.cells if c.arm == "mle"]
    exact_z = max(abs(c.mean_bias - _rice_bias(float(np.hypot(*c.param_point)), c.n)) / c.se for c in cells)
    lead = [c for c in cells if c.n == 200]
    lead_z = max(abs(c.n_times_bias - 0.5 / float(np.hypot(*c.param_point))) / (c.n * c.se) for c in lead)
    ok = lead_z <= 3.0 and exact_z <= 3.0
    line("C2 mvn |xbar| n*bias -> 1/(2r) at n=200", ok, f"max|z|={lead_z:.2f}, vs Rice oracle max|z|={exact_z:.2f}")
    assert ok


def test_c2_map_arm_verdict(mvn_run, line):
    fits = [f for f in mvn_run.fits if f.arm == "map"]
    ok = all(f.verdict == "second-order unbiased" for f in fits)
    line("C2 mvn MAP with -(log r)/2 is second-order unbiased", ok, ", ".join(f.verdict for f in fits))
    assert ok


# ---------------------------------------------------------------------------
# 3. nested-error LME
# ---------------------------------------------------------------------------


def _lme_residual(prior_name, unit):
    model = make_builtin("nested_error_lme", LME_PARAMS)
    f = P.make_estimand(model, "lme_shrinkage", {"unit": unit})
    prior = P.make_prior(model, prior_name, {"unit": unit})
    return max(abs(P.condition_residual(model, p, f, prior)) for p in LME_GRID)


def _lme_mc(prior_name, unit):
    exp = mc.BiasExperiment("nested_error_lme", "lme_shrinkage", LME_GRID, (100,), 50_000, 11, prior=prior_name,
                            model_params={"m_pattern": [2, 5]}, estimand_params={"unit": unit},
                            prior_params={"unit": unit})
    rep = mc.run_bias(exp)
    bad = []
    for p in LME_GRID:
        a, b = rep.cell("mle", p, 100), rep.cell("map", p, 100)
        if not (abs(b.n_times_bias) <= 0.1 * abs(a.n_times_bias) or abs(b.mean_bias) <= 3.0 * b.se):
            bad.append((p, round(b.n_times_bias, 3), round(b.mean_bias / b.se, 2), round(a.n_times_bias, 3)))
    return bad


def test_c3_pr1_residual(line):
    worst = max(_lme_residual("lme_unit_pr1", u) for u in (0, 1))
    line("C3 lme unit_pr1 condition residual <= 1e-6", worst <= 1e-6, f"max={worst:.2e}")
    assert worst <= 1e-6


@pytest.mark.xfail(strict=True, reason="the closed-form unit_pr2 prior solves the condition only on balanced designs")
def test_c3_pr2_residual(line):
    worst = max(_lme_residual("lme_unit_pr2", u) for u in (0, 1))
    line("C3 lme unit_pr2 condition residual <= 1e-6", worst <= 1e-6, f"max={worst:.2e}")
    assert worst <= 1e-6


@pytest.mark.slow
@pytest.mark.parametrize("unit", [0, 1])
def test_c3_pr1_monte_carlo(unit, line):
    bad = _lme_mc("lme_unit_pr1", unit)
    line(f"C3 lme unit_pr1 MAP bias, unit {unit} (m={2 if unit == 0 else 5})", not bad, f"failing points={bad}")
    assert not bad


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="unit_pr2 leaves a first-order bias on the mixed design")
def test_c3_pr2_monte_carlo(line):
    bad = _lme_mc("lme_unit_pr2", 0)
    line("C3 lme unit_pr2 MAP bias, unit 0 (m=2)", not bad, f"failing points (point, MAP n*bias, z, MLE n*bias)={bad}")
    assert not bad


# ---------------------------------------------------------------------------
# 4. tensor identities
# ---------------------------------------------------------------------------

LS_POINTS = [[mu, s] for mu in (-1.0, 0.0, 1.5) for s in (0.5, 1.0, 2.0)] + [[0.3, 3.0]]
LME_POINTS = [[a, d] for a in (0.5, 1.0, 2.0) for d in (0.5, 1.0, 2.0)] + [[1.3, 0.7]]
EM_POINTS = [[s] for s in np.linspace(-0.5, 6.0, 10)]


def test_c4_identity_suite(line):
    t = time.perf_counter()
    worst = {}
    # the numeric route on the LME uses short units: its cost grows with the Gauss-Hermite grid
    cases = [
        ("efron_morris", {"n": 5}, EM_POINTS, True),
        ("location_scale_normal", {}, LS_POINTS, True),
        ("nested_error_lme", {"m": [2, 3, 5]}, LME_POINTS, False),
        ("nested_error_lme", {"m": [1, 2]}, LME_POINTS, True),
    ]
    for name, params, pts, numeric in cases:
        model = make_builtin(name, params)
        key = f"{name}{params.get('m', '')}"
        worst[key + " closed"] = (max(G.check_identities(model, pts, curvature=model.dim > 1).values()), 1e-6)
        if numeric:
            res = G.check_identities(model.numeric_only(), pts, curvature=False)
            worst[key + " numeric"] = (max(res.values()), 1e-3)

    lme = make_builtin("nested_error_lme", {"m": [1, 2]})
    for tag, mod, tol in (("closed", lme, 1e-6), ("numeric", lme.numeric_only(), 1e-3)):
        g1 = max(float(np.max(np.abs(G.frame_at(mod, p).connection(-1.0)))) for p in LME_POINTS)
        worst[f"lme Gamma(-1) {tag}"] = (g1, tol)

    ls = make_builtin("location_scale_normal")
    dev = 0.0
    for alpha in (-1.0, -0.5, 0.0, 0.5, 1.0):
        for mu, s in LS_POINTS:
            want = -(LS_R2 / s**4) * (1 + alpha * LS_C1 / (2 * LS_R2)) * (1 + alpha * (LS_C1 - LS_C2) / (2 * LS_R2))
            got = G.riemann_curvature(ls, [mu, s], alpha).riemann[0, 1, 0, 1]
            dev = max(dev, abs(got - want) / max(1.0, abs(want)))
    worst["ls R_musigmamusigma closed form"] = (dev, 1e-6)

    mvn = make_builtin("mvn_known_cov", {"d": 3})
    c = np.array([0.5, -0.2, 0.1])
    f = P.make_estimand(mvn, "inverse_power_norm", {"center": c.tolist(), "power": 1.0})
    fn = P.Estimand(lambda x: 1.0 / np.linalg.norm(x - c))
    pts = c + np.random.default_rng(5).uniform(0.5, 2.0, size=(10, 3)) * np.random.default_rng(6).choice([-1, 1], (10, 3))
    worst["r^-1 harmonic closed"] = (max(abs(G.alpha_laplacian(mvn, x, f, 0.0)) for x in pts), 1e-6)
    worst["r^-1 harmonic numeric"] = (max(abs(G.alpha_laplacian(mvn, x, fn, 0.0)) for x in pts), 1e-3)

    secs = time.perf_counter() - t
    bad = {k: v[0] for k, v in worst.items() if v[0] > v[1]}
    ok = not bad and secs <= 30.0
    top = max(v[0] / v[1] for v in worst.values())
    line("C4 tensor identities, 10 points each", ok, f"worst residual/tol={top:.2e} runtime={secs:.1f}s {bad or ''}")
    assert ok


# ---------------------------------------------------------------------------
# 5. geodesics
# ---------------------------------------------------------------------------


def test_c5_geodesic_suite(line):
    ls = make_builtin("location_scale_normal")
    rng = np.random.default_rng(2024)
    hyp = 0.0
    for _ in range(20):
        p = [rng.uniform(-1.5, 1.5), rng.uniform(0.5, 2.0)]
        q = [rng.uniform(-1.5, 1.5), rng.uniform(0.5, 2.0)]
        hyp = max(hyp, abs(GD.distance(ls, p, q).r - GD.hyperbolic_distance(p, q)))

    flat = 0.0
    for d in (2, 3):
        res = GD.riesz_check(make_builtin("mvn_known_cov", {"d": d}), np.zeros(d), np.linspace(0.4, -1.0, d))
        flat = max(flat, abs(res["laplacian_r2"] - 2 * d), abs(res["laplacian_r2_jacobi"] - 2 * d))

    riesz = 0.0
    for r, u in ((0.2, [1.0, 1.0]), (0.5, [1.0, -0.3]), (1.0, [-0.4, 1.0])):
        u = np.array(u) / (math.sqrt(2.0) * np.linalg.norm(u))
        target = GD.shoot(ls, [0.0, 1.0], u, r).points[-1]
        res = GD.riesz_check(ls, [0.0, 1.0], target)
        riesz = max(riesz, res["riesz_i"], res["riesz_ii"], res["riesz_iii"])

    ok = hyp <= 1e-6 and flat <= 1e-8 and riesz <= 1e-4
    line("C5 geodesics", ok, f"hyperbolic={hyp:.1e} flat Laplacian={flat:.1e} riesz={riesz:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 6. moment expansions
# ---------------------------------------------------------------------------


def test_c6_efron_morris_first_moment(line):
    rec = mc.moment_check("efron_morris", "log1p_var", [1.0], 100, 100_000, 21)
    z = (rec.mean[0] - 2.0 * 2.0 / 100) / rec.mean_se[0]
    line("C6 efron_morris MAP mean error = 2(1+s)/n at n=100", abs(z) <= 3.0, f"z={z:.2f}")
    assert abs(z) <= 3.0


@pytest.mark.parametrize(
    "args",
    [
        ("efron_morris", "log1p_var", [1.0], 2000, 22, {}, {}),
        ("mvn_known_cov", "uniform", [1.0, 0.5], 50, 23, {"d": 2}, {}),
        ("nested_error_lme", "lme_unit_pr1", [1.0, 1.0], 200, 24, {"m_pattern": [2, 5]}, {"unit": 0}),
    ],
    ids=["efron_morris", "mvn", "lme"],
)
def test_c6_moment_predictions(args, line):
    name, prior, xi, n, seed, mp, pp = args
    rec = mc.moment_check(name, prior, xi, n, 100_000, seed, model_params=mp, prior_params=pp)
    zm = float(np.max(np.abs(rec.mean_z())))
    zc = float(np.max(np.abs(rec.cov_z())))
    ok = zm <= 4.0 and zc <= 4.0
    line(f"C6 {name} moments at n={n}", ok, f"mean max|z|={zm:.2f} cov max|z|={zc:.2f}")
    assert ok


# ---------------------------------------------------------------------------
# 7. prior constructors
# ---------------------------------------------------------------------------


def _spread(prior, ref, points):
    return float(np.ptp([prior.eval(p) - ref(p) for p in points]))


def test_c7_constructor_agreement(line):
    em = make_builtin("efron_morris", {"n": 10})
    negb = _neg(P.make_estimand(em, "shrinkage"))
    s0, k = 0.2, math.sqrt(2.0 / 10)

    def fprime(t):
        return k / (2.0 * (1 + s0) * math.sqrt(t)) * math.exp(-k * math.sqrt(t))

    em_priors = [
        P.build_prior_1d(em, negb, anchor=[1.0]),
        P.build_prior_along_estimand(em, negb, anchor=[1.0]),
        P.build_prior_geodesic(em, [s0], fprime),
    ]
    em_pts = [[0.5], [1.0], [2.0], [4.0]]
    em_dev = max(_spread(p, lambda x: math.log1p(x[0]), em_pts) for p in em_priors)

    lme = make_builtin("nested_error_lme", {"m": [3] * 6})
    f = P.make_estimand(lme, "lme_shrinkage", {"unit": 0})
    ref = P.make_prior(lme, "lme_unit_pr2", {"unit": 0})
    lme_dev = _spread(P.build_prior_along_estimand(lme, f, anchor=[1.0, 1.0]), ref.eval,
                      [[0.5, 0.5], [1.0, 2.0], [2.0, 1.0], [0.7, 1.3]])

    ls = make_builtin("location_scale_normal")
    cv = P.make_estimand(ls, "cv")
    cv_dev = _spread(P.build_prior_along_estimand(ls, cv, anchor=[1.0, 1.0]), P.make_prior(ls, "cv_prior").eval,
                     [[1.0, 0.5], [1.0, 2.0], [2.0, 1.0], [0.5, 1.5]])

    ok = max(em_dev, lme_dev, cv_dev) <= 1e-6
    line("C7 prior constructors agree", ok, f"efron_morris={em_dev:.1e} lme b^(n/m-1)={lme_dev:.1e} cv={cv_dev:.1e}")
    assert ok
