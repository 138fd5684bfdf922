"""Log-priors, estimands, the second-order unbiasedness condition and prior constructors.

A prior here is a scalar function l~ on the manifold (no Jacobian factor):
the MAP estimate maximises l + l~ as a function of the point, so the same
prior composed with a chart change gives the same estimator.

The condition for f(xi_hat) to be unbiased to O(1/n) is

    <df, dl~> + (1/2) Laplacian^(-1) f = 0,

where <u, v> = g^ij u_i v_j.  `condition_residual` evaluates its left side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
from scipy import integrate, special

from . import _numdiff
from .config import DEFAULT, NumericConfig
from .errors import (
    ConfigError,
    DomainError,
    NotLevelConstantError,
    NumericError,
    PreconditionError,
    SolverError,
)
from .geodesic import distance, radial_profile
from .geometry import frame_at, function_derivatives, laplacian_from_frame, metric_derivative
from .manifold import LS_C, LS_R2, Chart, ParametricModel

# ---------------------------------------------------------------------------
# value objects
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LogPrior:
    """Scalar log-prior l~(xi), defined up to an additive constant."""

    eval_fn: Callable
    grad_fn: Optional[Callable] = None
    label: str = "closed-form"
    meta: Mapping = field(default_factory=dict)
    fd_step: float = DEFAULT.fd_step

    def eval(self, xi) -> float:
        return float(self.eval_fn(np.asarray(xi, dtype=float)))

    __call__ = eval

    def grad(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if self.grad_fn is not None:
            return np.asarray(self.grad_fn(xi), dtype=float)
        return _numdiff.gradient(self.eval_fn, xi, self.fd_step)

    def shifted(self, c: float) -> "LogPrior":
        return LogPrior(lambda x: self.eval_fn(x) + c, self.grad_fn, self.label, dict(self.meta), self.fd_step)

    def compose(self, chart: Chart) -> "LogPrior":
        """The same scalar function expressed in the chart's new coordinates."""

        def grad(y):
            return chart.inverse_jacobian(y).T @ self.grad(chart.inverse(y))

        return LogPrior(lambda y: self.eval_fn(chart.inverse(y)), grad, self.label, dict(self.meta))


@dataclass(frozen=True, eq=False)
class Estimand:
    """Scalar estimand f(xi) with gradient and Hessian access."""

    eval_fn: Callable
    grad_fn: Optional[Callable] = None
    hess_fn: Optional[Callable] = None
    label: str = "estimand"
    fd_step: float = DEFAULT.fd_step
    fd_step2: float = DEFAULT.fd_step2
    batch_fn: Optional[Callable] = None

    def eval_many(self, points) -> np.ndarray:
        """Values at the rows of ``points``."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        if self.batch_fn is not None:
            return np.asarray(self.batch_fn(P), dtype=float)
        return np.array([self.eval_fn(p) for p in P], dtype=float)

    def eval(self, xi) -> float:
        return float(self.eval_fn(np.asarray(xi, dtype=float)))

    __call__ = eval

    def grad(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if self.grad_fn is not None:
            return np.asarray(self.grad_fn(xi), dtype=float)
        return _numdiff.gradient(self.eval_fn, xi, self.fd_step)

    def hessian(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if self.hess_fn is not None:
            return np.asarray(self.hess_fn(xi), dtype=float)
        return _numdiff.hessian(self.eval_fn, xi, self.fd_step2)

    def compose(self, chart: Chart) -> "Estimand":
        """f o chart.inverse with derivatives from the chain rule (Hessian numeric)."""

        def grad(y):
            return chart.inverse_jacobian(y).T @ self.grad(chart.inverse(y))

        return Estimand(lambda y: self.eval_fn(chart.inverse(y)), grad, None, self.label)


@dataclass(frozen=True, eq=False)
class Denormalization:
    """Denormalisation factor z(xi) > 0 of a model z q(x; xi)."""

    z: Callable


def constant_prior(label: str = "uniform") -> LogPrior:
    return LogPrior(lambda x: 0.0, lambda x: np.zeros(np.asarray(x).size), label, {"form": "0"})


# ---------------------------------------------------------------------------
# the condition
# ---------------------------------------------------------------------------


def condition_terms(model: ParametricModel, xi, f, prior: LogPrior, cfg: NumericConfig = DEFAULT):
    """(<df, dl~>, Laplacian^(-1) f) at xi."""
    frame = frame_at(model, xi, cfg)
    df, H = function_derivatives(f, frame.point, cfg)
    return frame.inner(df, prior.grad(frame.point)), laplacian_from_frame(frame, df, H, -1.0)


def condition_residual(model: ParametricModel, xi, f, prior: LogPrior, cfg: NumericConfig = DEFAULT) -> float:
    """<df, dl~> + (1/2) Laplacian^(-1) f; zero when f(MAP) is unbiased to O(1/n)."""
    inner, lap = condition_terms(model, xi, f, prior, cfg)
    return inner + 0.5 * lap


def bias_leading_term(model, xi, f, prior, cfg=DEFAULT, n: Optional[int] = None) -> float:
    """Leading O(1/n) bias of f(MAP): the condition residual with the data's information.

    For per-record models the metric is multiplied by ``n``; sample-level
    models already carry the full information.
    """
    res = condition_residual(model, xi, f, prior, cfg)
    if model.sample_level:
        return res
    if n is None:
        raise PreconditionError("n is required for per-record models")
    return res / n


# ---------------------------------------------------------------------------
# one-dimensional constructor
# ---------------------------------------------------------------------------


def _affine_alpha(model) -> Optional[float]:
    closed = model.closed_geometry
    if closed is None:
        return None
    if closed.affine_all:
        return 1.0
    for a in closed.affine_alphas:
        if a != 0.0:
            return float(a)
    return None


def _quad(fn, a, b, cfg):
    val, err = integrate.quad(fn, a, b, epsabs=cfg.quad_abs, epsrel=cfg.quad_rel, limit=cfg.quad_limit)
    if not np.isfinite(val):
        raise SolverError("quadrature returned a non-finite value")
    return val


def build_prior_1d(model: ParametricModel, f, cfg: NumericConfig = DEFAULT, anchor=None, grid=(),
                   method: str = "auto") -> LogPrior:
    """Prior making f(MAP) unbiased to O(1/n) on a one-dimensional model.

    e^l~ is proportional to g^(1/4) f'^(-1/2) exp((1/4) int S_1).  On a chart
    that is alpha-affine for a non-zero alpha (declared by the closed-form
    geometry) the integral has the closed form g^((alpha+1)/(4 alpha)) f'^(-1/2);
    ``method="quadrature"`` forces the integral route.

    Raises:
        PreconditionError: the model is not one-dimensional, or f' <= 0 at
            the anchor, at a point of ``grid``, or later at an evaluation point.
    """
    if model.dim != 1:
        raise PreconditionError("build_prior_1d needs a one-dimensional model")
    anchor = model.check(model.reference if anchor is None else anchor)

    def fprime(x):
        df, H = function_derivatives(f, x, cfg)
        if not df[0] > 0:
            raise PreconditionError(f"f' = {df[0]:.3g} <= 0 at {x.tolist()}; negate the estimand")
        return df[0], H[0, 0]

    for p in [anchor, *[np.atleast_1d(np.asarray(q, float)) for q in grid]]:
        fprime(model.check(p))

    def dlogg(x):
        frame = frame_at(model, x, cfg)
        return metric_derivative(model, x, cfg)[0, 0, 0] / frame.metric[0, 0]

    def logg(x):
        return math.log(frame_at(model, x, cfg).metric[0, 0])

    alpha = _affine_alpha(model) if method in ("auto", "affine") else None
    if method == "affine" and alpha is None:
        raise PreconditionError("the chart is not declared alpha-affine for a non-zero alpha")
    if alpha is not None:
        k = (alpha + 1.0) / (4.0 * alpha)

        def ev(x):
            x = model.check(x)
            return k * logg(x) - 0.5 * math.log(fprime(x)[0])

        def gr(x):
            x = model.check(x)
            f1, f2 = fprime(x)
            return np.array([k * dlogg(x) - 0.5 * f2 / f1])

        return LogPrior(ev, gr, "one-d", {"method": "affine", "alpha": alpha, "anchor": anchor.tolist()})

    def s1(t):
        return float(frame_at(model, np.array([t]), cfg).contracted_skewness[0])

    def ev(x):
        x = model.check(x)
        return 0.25 * logg(x) - 0.5 * math.log(fprime(x)[0]) + 0.25 * _quad(s1, anchor[0], x[0], cfg)

    def gr(x):
        x = model.check(x)
        f1, f2 = fprime(x)
        return np.array([0.25 * dlogg(x) - 0.5 * f2 / f1 + 0.25 * s1(x[0])])

    return LogPrior(ev, gr, "one-d", {"method": "quadrature", "anchor": anchor.tolist()})


# ---------------------------------------------------------------------------
# prior along the estimand
# ---------------------------------------------------------------------------


class _EstimandPath:
    """Gradient-flow path xi(t) with f(xi(t)) = t through the anchor, plus the integrand."""

    GROWTH = 1.1

    def __init__(self, model, f, anchor, cfg, t_span):
        self.model, self.f, self.cfg = model, f, cfg
        self.anchor = anchor
        self.t0 = f.eval(anchor)
        self.step = 0.01 * max(abs(self.t0), 1e-3)
        self.t_span = t_span
        # per direction: list of (t_end, dense solution), current end state, exhausted flag
        self.branches = {s: {"segments": [], "t": self.t0, "y": anchor.copy(), "done": False} for s in (1, -1)}
        self.knots = {1: [(self.t0, 0.0)], -1: [(self.t0, 0.0)]}

    def _velocity(self, xi):
        frame = frame_at(self.model, xi, self.cfg, check=False)
        df = self.f.grad(xi)
        w = frame.metric_inv @ df
        return w / float(df @ w)

    def _extend(self, sign, target):
        br = self.branches[sign]
        model = self.model
        lo, hi = model.lower, model.upper

        def rhs(t, y):
            if not model.contains(y):
                return np.full(y.shape, np.nan)
            return self._velocity(y)

        def margin(t, y):
            m = np.minimum(y - lo, hi - y)
            m = m[np.isfinite(m)]
            return float(np.min(m)) - 1e-9 * max(1.0, float(np.max(np.abs(y)))) if m.size else 1.0

        margin.terminal = True
        limit = None
        if self.t_span is not None:
            limit = self.t_span[1] if sign > 0 else self.t_span[0]
        while not br["done"] and (target - br["t"]) * sign > 0:
            end = target + sign * 0.25 * abs(target - self.t0)
            if limit is not None and (end - limit) * sign > 0:
                end = limit
                br["done"] = True
            sol = integrate.solve_ivp(
                rhs, (br["t"], end), br["y"], method="DOP853", rtol=self.cfg.ode_rtol,
                atol=self.cfg.ode_atol, dense_output=True, events=margin,
            )
            if sol.sol is None or sol.t.size < 2:
                br["done"] = True
                break
            reach = float(sol.t[-1])
            if sol.status != 0:
                # stopped at the domain margin or by step-size collapse
                br["done"] = True
                reach = br["t"] + (reach - br["t"]) * (1 - 1e-9)
            br["segments"].append((reach, sol.sol))
            br["t"], br["y"] = reach, sol.sol(reach)

    def point(self, t) -> np.ndarray:
        if t == self.t0:
            return self.anchor.copy()
        sign = 1 if t > self.t0 else -1
        self._extend(sign, t)
        br = self.branches[sign]
        if (t - br["t"]) * sign > 0:
            raise DomainError(f"level t = {t:.6g} is outside the range reached from the anchor")
        for t_end, dense in br["segments"]:
            if (t - t_end) * sign <= 0:
                return dense(t)
        return br["segments"][-1][1](t)

    def integrand(self, xi) -> float:
        frame = frame_at(self.model, xi, self.cfg)
        df, H = function_derivatives(self.f, frame.point, self.cfg)
        return laplacian_from_frame(frame, df, H, -1.0) / frame.inner(df, df)

    def _project(self, xi, t):
        for _ in range(50):
            if not self.model.contains(xi):
                return None
            err = self.f.eval(xi) - t
            if abs(err) <= 1e-13 * max(1.0, abs(t)):
                return xi
            xi = xi - err * self._velocity(xi)
        return None

    def check_level(self, t) -> float:
        """Integrand at level t after confirming it is constant along the level set."""
        xi = self.point(t)
        base = self.integrand(xi)
        d = self.model.dim
        if d == 1:
            return base
        df = self.f.grad(xi)
        _, _, Vt = np.linalg.svd(df[None, :])
        tangents = Vt[1:]
        scale = max(1.0, float(np.max(np.abs(xi))))
        values = [base]
        sizes = (0.02, 0.05, 0.1, 0.2)
        for j in range(self.cfg.level_probes):
            direction = tangents[j % tangents.shape[0]] * (1 if (j // tangents.shape[0]) % 2 == 0 else -1)
            s = sizes[(j // 2) % len(sizes)] * scale
            for _ in range(8):
                probe = self._project(xi + s * direction, t)
                if probe is not None:
                    values.append(self.integrand(probe))
                    break
                s *= 0.5
        values = np.array(values)
        spread = float(np.max(values) - np.min(values))
        ref = float(np.max(np.abs(values)))
        if spread > self.cfg.level_tol * max(ref, 1e-12):
            raise NotLevelConstantError(
                f"integrand varies by {spread:.3e} (relative {spread / max(ref, 1e-300):.3e}) on the level set t = {t:.6g}"
            )
        return base

    def _knot_positions(self, sign, k):
        return self.t0 + sign * self.step * (self.GROWTH**k - 1.0) / (self.GROWTH - 1.0)

    def integral(self, t) -> float:
        """int_{t0}^{t} integrand dt using cached knots."""
        if t == self.t0:
            return 0.0
        sign = 1 if t > self.t0 else -1
        knots = self.knots[sign]
        while (t - knots[-1][0]) * sign > 0:
            k = len(knots)
            nxt = self._knot_positions(sign, k)
            if (nxt - t) * sign > 0:
                break
            self.point(nxt)  # range check
            self.check_level(nxt)
            a = knots[-1][0]
            knots.append((nxt, knots[-1][1] + _quad(lambda s: self.integrand(self.point(s)), a, nxt, self.cfg)))
        a, acc = knots[-1]
        for ka, kv in reversed(knots):
            if (t - ka) * sign >= 0:
                a, acc = ka, kv
                break
        self.check_level(t)
        return acc + _quad(lambda s: self.integrand(self.point(s)), a, t, self.cfg)


def build_prior_along_estimand(model: ParametricModel, f: Estimand, anchor=None, cfg: NumericConfig = DEFAULT,
                               t_span=None) -> LogPrior:
    """Prior that is a function of f itself: l~(t) = -(1/2) int^t Laplacian^(-1) f / <df, df>.

    Levels are reached along the gradient flow of f from ``anchor``; at every
    knot and evaluation level, ``cfg.level_probes`` points on the level set are
    checked for constancy of the integrand.

    Raises:
        NotLevelConstantError: the integrand is not a function of t alone.
        DomainError: the requested level is not reached from the anchor.
    """
    anchor = model.check(model.reference if anchor is None else anchor)
    path = _EstimandPath(model, f, anchor, cfg, t_span)
    df0 = f.grad(anchor)
    if frame_at(model, anchor, cfg).inner(df0, df0) <= 0:
        raise PreconditionError("<df, df> vanishes at the anchor")

    def ev(x):
        x = model.check(x)
        return -0.5 * path.integral(f.eval(x))

    def gr(x):
        x = model.check(x)
        t = f.eval(x)
        return -0.5 * path.integrand(path.point(t)) * f.grad(x)

    prior = LogPrior(ev, gr, "condg", {"method": "condg", "anchor": anchor.tolist(), "t0": path.t0})
    object.__setattr__(prior, "path", path)
    return prior


def tabulate(prior: LogPrior, f: Estimand, t_values, anchor_point=None) -> list:
    """(t, l~(t)) knots of a prior that depends on xi only through f."""
    path = getattr(prior, "path", None)
    if path is None:
        raise PreconditionError("only estimand-path priors can be tabulated")
    return [(float(t), -0.5 * path.integral(float(t))) for t in t_values]


# ---------------------------------------------------------------------------
# geodesic-distance constructor
# ---------------------------------------------------------------------------


def build_prior_geodesic(model: ParametricModel, xi0, fprime: Callable, cfg: NumericConfig = DEFAULT,
                         det_power: float = 0.5) -> LogPrior:
    """Prior for estimands f(r^2) of the geodesic distance r from ``xi0``.

    l~ = -(1/2) log{f'(r^2) r^d det(bar g)^p} + (1/4) int_0^zeta bar S_i d zeta^i

    with p = ``det_power`` (1/2 by default) and the line integral taken along
    the radial geodesic.  ``fprime`` is the derivative of f with respect to r^2.
    """
    xi0 = model.check(xi0)
    d = model.dim
    logdet0 = math.log(np.linalg.det(frame_at(model, xi0, cfg).metric))
    cache = {}

    def parts(x):
        key = tuple(np.round(x, 15))
        if key in cache:
            return cache[key]
        res = distance(model, xi0, x, cfg)
        if res.r == 0.0:
            raise DomainError("the geodesic prior is singular at the base point")
        prof = radial_profile(model, xi0, res.zeta, res.r, cfg)
        out = (res.r, prof.log_det_bar_g(res.r), prof.skew_integral(res.r))
        if len(cache) > 512:
            cache.clear()
        cache[key] = out
        return out

    def ev(x):
        x = model.check(x)
        r, logdet, q = parts(x)
        fp = float(fprime(r * r))
        if not fp > 0:
            raise PreconditionError(f"f'(r^2) = {fp:.3g} <= 0")
        return -0.5 * (math.log(fp) + d * math.log(r) + det_power * (logdet - logdet0)) + 0.25 * q

    return LogPrior(ev, None, "geodesic", {"method": "geodesic", "base": xi0.tolist(), "det_power": det_power},
                    fd_step=cfg.fd_step2)


def skew_line_integral_trapezoid(model, xi0, xi, cfg: NumericConfig = DEFAULT) -> float:
    """Trapezoid rule (cfg.skew_nodes nodes) for int S_i d xi^i along the radial geodesic."""
    res = distance(model, xi0, xi, cfg)
    prof = radial_profile(model, xi0, res.zeta, res.r, cfg)
    rho = np.linspace(0.0, res.r, cfg.skew_nodes)
    d = model.dim
    vals = []
    for p in rho:
        y = prof.state(p)
        xi_p, v = y[:d], y[d:2 * d] / prof.rho_max
        vals.append(float(frame_at(model, xi_p, cfg).contracted_skewness @ v))
    return float(integrate.trapezoid(vals, rho))


# ---------------------------------------------------------------------------
# alpha-parallel and alpha-invariant priors
# ---------------------------------------------------------------------------


def _log_det_metric(model, cfg):
    def ev(x):
        sign, val = np.linalg.slogdet(frame_at(model, x, cfg).metric)
        return val

    def gr(x):
        frame = frame_at(model, x, cfg)
        dg = metric_derivative(model, x, cfg)
        return np.einsum("ij,kij->k", frame.metric_inv, dg)

    return ev, gr


def alpha_parallel_prior(model: ParametricModel, alpha: float, alpha0: float, cfg: NumericConfig = DEFAULT) -> LogPrior:
    """l~ = (1/2 - alpha/(2 alpha0)) log det g, the alpha-parallel volume density."""
    if alpha0 == 0:
        raise PreconditionError("alpha0 must be non-zero")
    k = 0.5 - alpha / (2.0 * alpha0)
    ev, gr = _log_det_metric(model, cfg)
    return LogPrior(
        lambda x: k * ev(model.check(x)),
        lambda x: k * gr(model.check(x)),
        f"alpha-parallel({alpha:g},{alpha0:g})",
        {"method": "alpha-parallel", "alpha": alpha, "alpha0": alpha0, "exponent": k},
    )


def jeffreys_prior(model: ParametricModel, cfg: NumericConfig = DEFAULT) -> LogPrior:
    ev, gr = _log_det_metric(model, cfg)
    return LogPrior(lambda x: 0.5 * ev(model.check(x)), lambda x: 0.5 * gr(model.check(x)), "jeffreys",
                    {"method": "jeffreys"})


def _trace_connection(model, x, alpha, cfg):
    C = frame_at(model, x, cfg).raised_connection(alpha)
    return np.einsum("jij->i", C)


def invariant_prior_residual(model: ParametricModel, xi, prior: LogPrior, alpha: float,
                             cfg: NumericConfig = DEFAULT) -> dict:
    """d_i l~ - Gamma^(alpha)j_{ij} and the integrability defect d_k Gamma^j_{ij} - d_i Gamma^j_{kj}."""
    xi = model.check(xi)
    trace = _trace_connection(model, xi, alpha, cfg)
    h = cfg.fd_step if model.closed_geometry is not None else cfg.fd_step_curv
    D = _numdiff.jacobian(lambda p: _trace_connection(model, p, alpha, cfg), xi, h)  # D[i, k] = d_k T_i
    return {"residual": prior.grad(xi) - trace, "integrability": D - D.T}


# ---------------------------------------------------------------------------
# Jeffreys-prior estimand
# ---------------------------------------------------------------------------


def jeffreys_estimand(model: ParametricModel, xi0, cfg: NumericConfig = DEFAULT, rho_ref: float = 1.0,
                      include_skew: bool = True) -> Estimand:
    """Estimand f(r^2) whose MAP plug-in with the Jeffreys prior is unbiased to O(1/n).

    f(xi) = int_{rho_ref}^{r} 2 rho^(1-d) det(bar g)^(-3/2) exp((1/2) int_0^rho S_r) d rho

    along the radial geodesic from ``xi0`` through xi.  The Jeffreys prior
    meant here is the volume density in the normal chart at ``xi0``
    (`normal_jeffreys_prior`).
    """
    xi0 = model.check(xi0)
    d = model.dim
    logdet0 = math.log(np.linalg.det(frame_at(model, xi0, cfg).metric))
    state = {"zeta": None}

    def ev(x):
        x = model.check(x)
        res = distance(model, xi0, x, cfg, zeta0=state["zeta"])
        if res.r == 0.0:
            raise DomainError("the Jeffreys estimand is evaluated away from the base point")
        state["zeta"] = res.zeta
        rho_max = max(res.r, rho_ref)
        prof = radial_profile(model, xi0, res.zeta, rho_max, cfg)

        def h(rho):
            q = prof.skew_integral(rho) if include_skew else 0.0
            return 2.0 * rho ** (1 - d) * math.exp(-1.5 * (prof.log_det_bar_g(rho) - logdet0) + 0.5 * q)

        return _quad(h, rho_ref, res.r, cfg)

    return Estimand(ev, None, None, "jeffreys-estimand", fd_step=cfg.fd_step2, fd_step2=cfg.fd_step_curv)


def normal_jeffreys_prior(model: ParametricModel, xi0, cfg: NumericConfig = DEFAULT) -> LogPrior:
    """(1/2) log det bar g: the Jeffreys density of the normal chart centred at xi0."""
    xi0 = model.check(xi0)

    def ev(x):
        x = model.check(x)
        res = distance(model, xi0, x, cfg)
        if res.r == 0.0:
            return 0.5 * math.log(np.linalg.det(frame_at(model, xi0, cfg).metric))
        prof = radial_profile(model, xi0, res.zeta, res.r, cfg)
        return 0.5 * prof.log_det_bar_g(res.r)

    return LogPrior(ev, None, "jeffreys-normal-chart", {"method": "jeffreys-normal", "base": xi0.tolist()},
                    fd_step=cfg.fd_step2)


# ---------------------------------------------------------------------------
# denormalisation
# ---------------------------------------------------------------------------


def denorm_gap(z: float) -> float:
    """-1 + z - log z, the KL cost of scaling a normalised model by z."""
    if not z > 0:
        raise DomainError("the denormalisation factor must be positive")
    return -1.0 + z - math.log(z)


def log_prior_from_denorm(denorm: Denormalization, n: int) -> LogPrior:
    """l~ = n (1 - z + log z) = -n gap(z)."""

    def ev(x):
        return -n * denorm_gap(float(denorm.z(x)))

    return LogPrior(ev, None, "denormalization", {"method": "denormalization", "n": n})


def denorm_from_log_prior(prior: LogPrior, n: int, exact: bool = False) -> Denormalization:
    """Invert l~ = n(1 - z + log z) on the branch z >= 1.

    The default is the leading expansion z = 1 + sqrt(-2 l~ / n); ``exact``
    uses the lower Lambert-W branch.

    Raises:
        PreconditionError: l~ > 0 somewhere it is evaluated (priors above 1
            admit no denormalisation reading).
    """

    def z(x):
        lt = prior.eval(x)
        if lt > 0:
            raise PreconditionError(f"log-prior {lt:.3g} > 0 is not a denormalization")
        if exact:
            c = -lt / n
            if c < 1e-8:
                # W_-1 is ill-conditioned next to -1/e; series in s = sqrt(2c)
                s = math.sqrt(2.0 * c)
                return 1.0 + s + s * s / 3.0 + s**3 / 36.0
            return float(np.real(-special.lambertw(-math.exp(-c - 1.0), k=-1)))
        return 1.0 + math.sqrt(-2.0 * lt / n)

    return Denormalization(z)


def kl_divergence(p, q) -> float:
    """D(p||q) = sum q - sum p + sum p log p - sum p log q for unnormalised measures."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    return float(q.sum() - p.sum() + np.sum(p[mask] * np.log(p[mask])) - np.sum(p[mask] * np.log(q[mask])))


def pythagorean_residual(p, q0, z) -> float:
    """D(p||z q0) - D(p||q0) - gap(z); zero for normalised p and q0."""
    q0 = np.asarray(q0, dtype=float)
    return kl_divergence(p, z * q0) - kl_divergence(p, q0) - denorm_gap(z)


# ---------------------------------------------------------------------------
# catalogues used by the command line and the Monte Carlo harness
# ---------------------------------------------------------------------------


def _unit(model, params):
    m = np.asarray(model.params["m"])
    i = params.get("unit", 0)
    if not isinstance(i, int) or not 0 <= i < m.size:
        raise ConfigError(f"unit index must be an integer in [0, {m.size})", "estimand.params.unit")
    return i, float(m[i]), float(m.sum()), m.size


def _require(model, *names):
    if model.name not in names:
        raise ConfigError(f"not available for model {model.name!r}", "estimand.name")


def make_estimand(model: ParametricModel, name: str, params: Optional[Mapping] = None) -> Estimand:
    """Named estimands of the built-in models (see README for the list)."""
    params = dict(params or {})
    d = model.dim
    if name == "shrinkage":
        _require(model, "efron_morris")
        if model.chart_name == "natural":
            return Estimand(lambda x: -2.0 * x[0], lambda x: np.array([-2.0]), lambda x: np.zeros((1, 1)), "b",
                            batch_fn=lambda P: -2.0 * P[:, 0])
        return Estimand(
            lambda x: 1.0 / (1.0 + x[0]),
            lambda x: np.array([-1.0 / (1.0 + x[0]) ** 2]),
            lambda x: np.array([[2.0 / (1.0 + x[0]) ** 3]]),
            "b",
            batch_fn=lambda P: 1.0 / (1.0 + P[:, 0]),
        )
    if name == "expectation":
        _require(model, "efron_morris")
        n = model.params["n"]
        if model.chart_name != "natural":
            return Estimand(lambda x: n * (1.0 + x[0]), lambda x: np.array([float(n)]), lambda x: np.zeros((1, 1)), "eta")
        return Estimand(
            lambda x: -n / (2.0 * x[0]),
            lambda x: np.array([n / (2.0 * x[0] ** 2)]),
            lambda x: np.array([[-n / x[0] ** 3]]),
            "eta",
        )
    if name == "lme_shrinkage":
        _require(model, "nested_error_lme")
        i, mi, _, _ = _unit(model, params)

        def b(x):
            return (x[1] / mi) / (x[1] / mi + x[0])

        def gb(x):
            v = x[1] / mi + x[0]
            return np.array([-(x[1] / mi) / v**2, (x[0] / mi) / v**2])

        def hb(x):
            a, dd = x
            v = dd / mi + a
            return np.array([
                [2 * (dd / mi) / v**3, (dd / mi - a) / (mi * v**3)],
                [(dd / mi - a) / (mi * v**3), -2 * a / (mi**2 * v**3)],
            ])

        return Estimand(b, gb, hb, f"b[{i}]", batch_fn=lambda P: (P[:, 1] / mi) / (P[:, 1] / mi + P[:, 0]))
    if name in ("norm", "squared_norm", "inverse_power_norm"):
        c = np.asarray(params.get("center", np.zeros(d)), dtype=float)
        if name == "squared_norm":
            return Estimand(lambda x: float((x - c) @ (x - c)), lambda x: 2.0 * (x - c), lambda x: 2.0 * np.eye(d), "r2",
                            batch_fn=lambda P: np.sum((P - c) ** 2, axis=1))
        if name == "norm":
            def gn(x):
                return (x - c) / np.linalg.norm(x - c)

            def hn(x):
                r = np.linalg.norm(x - c)
                u = (x - c) / r
                return (np.eye(d) - np.outer(u, u)) / r

            return Estimand(lambda x: float(np.linalg.norm(x - c)), gn, hn, "r",
                            batch_fn=lambda P: np.linalg.norm(P - c, axis=1))
        p = float(params.get("power", d - 2))

        def ev(x):
            return float(np.linalg.norm(x - c) ** (-p))

        def gr(x):
            r = np.linalg.norm(x - c)
            return -p * r ** (-p - 2) * (x - c)

        def hs(x):
            r = np.linalg.norm(x - c)
            return -p * r ** (-p - 2) * np.eye(d) + p * (p + 2) * r ** (-p - 4) * np.outer(x - c, x - c)

        return Estimand(ev, gr, hs, f"r^-{p:g}")
    if name == "coordinate":
        k = int(params.get("index", 0))
        e = np.zeros(d)
        e[k] = 1.0
        return Estimand(lambda x: float(x[k]), lambda x: e.copy(), lambda x: np.zeros((d, d)), f"xi[{k}]",
                        batch_fn=lambda P: P[:, k].copy())
    if name == "cv":
        _require(model, "location_scale_normal")
        return Estimand(
            lambda x: x[1] / x[0],
            lambda x: np.array([-x[1] / x[0] ** 2, 1.0 / x[0]]),
            lambda x: np.array([[2 * x[1] / x[0] ** 3, -1.0 / x[0] ** 2], [-1.0 / x[0] ** 2, 0.0]]),
            "gamma",
            batch_fn=lambda P: P[:, 1] / P[:, 0],
        )
    if name == "sigma_power":
        _require(model, "location_scale_normal")
        if "alpha" in params:
            p = 5.0 + (1.0 + 2.0 * float(params["alpha"])) * LS_C / (2.0 * LS_R2)
        else:
            p = float(params.get("power", 1.0))
        return Estimand(
            lambda x: x[1] ** p,
            lambda x: np.array([0.0, p * x[1] ** (p - 1)]),
            lambda x: np.array([[0.0, 0.0], [0.0, p * (p - 1) * x[1] ** (p - 2)]]),
            f"sigma^{p:g}",
            batch_fn=lambda P: P[:, 1] ** p,
        )
    raise ConfigError(f"unknown estimand {name!r}", "estimand.name")


def make_prior(model: ParametricModel, name: str, params: Optional[Mapping] = None,
               cfg: NumericConfig = DEFAULT) -> LogPrior:
    """Named closed-form priors of the built-in models (see README for the list)."""
    params = dict(params or {})
    if name in ("uniform", "constant"):
        return constant_prior()
    if name == "log1p_var":
        _require(model, "efron_morris")
        if model.chart_name == "natural":
            return LogPrior(lambda x: math.log(-0.5 / x[0]), lambda x: np.array([-1.0 / x[0]]), name, {"form": "log(1+sigma^2)"})
        return LogPrior(lambda x: math.log1p(x[0]), lambda x: np.array([1.0 / (1.0 + x[0])]), name, {"form": "log(1+sigma^2)"})
    if name in ("lme_unit_pr1", "lme_unit_pr2"):
        _require(model, "nested_error_lme")
        i, mi, m_tot, n = _unit(model, params)
        if name == "lme_unit_pr1":
            return LogPrior(
                lambda x: math.log(x[1] / mi + x[0]),
                lambda x: np.array([1.0, 1.0 / mi]) / (x[1] / mi + x[0]),
                name,
                {"form": "log(d/m_i + a)", "unit": i},
            )
        k = n / m_tot - 1.0

        def ev(x):
            return k * math.log((x[1] / mi) / (x[1] / mi + x[0]))

        def gr(x):
            v = x[1] / mi + x[0]
            return k * np.array([-1.0 / v, 1.0 / x[1] - 1.0 / (mi * v)])

        return LogPrior(ev, gr, name, {"form": "(n/m - 1) log b_i", "unit": i, "exponent": k})
    if name == "norm_power":
        c = np.asarray(params.get("center", np.zeros(model.dim)), dtype=float)
        p = float(params.get("power", -0.5))
        return LogPrior(
            lambda x: p * math.log(np.linalg.norm(x - c)),
            lambda x: p * (x - c) / float((x - c) @ (x - c)),
            name,
            {"form": "power * log|xi - center|", "power": p},
        )
    if name == "ls_invariant":
        _require(model, "location_scale_normal")
        a = float(params.get("alpha", 0.0))
        k = -2.0 - a * LS_C / (2.0 * LS_R2)
        return LogPrior(lambda x: k * math.log(x[1]), lambda x: np.array([0.0, k / x[1]]), name,
                        {"form": "sigma^k", "exponent": k, "alpha": a})
    if name == "cv_prior":
        _require(model, "location_scale_normal")
        e = LS_C / (8.0 * LS_R2)

        def ev(x):
            g2 = (x[1] / x[0]) ** 2
            return -0.5 * math.log1p(g2) + e * math.log(g2 / (1.0 + g2))

        def gr(x):
            g = x[1] / x[0]
            dl = -g / (1 + g * g) + e * 2.0 / (g * (1 + g * g))
            return dl * np.array([-x[1] / x[0] ** 2, 1.0 / x[0]])

        return LogPrior(ev, gr, name, {"form": "(1+g^2)^(-1/2) (g^2/(1+g^2))^(c/(8R^2))"})
    if name == "jeffreys":
        return jeffreys_prior(model, cfg)
    if name == "alpha_parallel":
        return alpha_parallel_prior(model, float(params.get("alpha", 0.0)), float(params.get("alpha0", 1.0)), cfg)
    raise ConfigError(f"unknown prior {name!r}", "prior.name")
