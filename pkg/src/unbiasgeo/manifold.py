"""Parametric models, coordinate charts and the four built-in worked models.

A `ParametricModel` describes one *sample* from the point of view of the
geometry code: a tuple of independent `Component` blocks, each repeated
``count`` times, whose score moments add up to the Fisher metric and the
skewness tensor.  Two flavours exist:

* per-record models (``mvn_known_cov``, ``location_scale_normal``): the
  geometry is that of a single record, and a dataset of n records carries
  n times that information;
* sample-level models (``efron_morris``, ``nested_error_lme``): the geometry
  already describes the whole dataset of the declared size.

Every built-in also carries closed-form geometry (metric, skewness and the
lowered alpha-connection) so numeric and closed-form routes can be compared.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import _numdiff
from .errors import ConfigError, DomainError, NumericError

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observation records; each record is a 1-D float array."""

    observations: tuple = ()

    def __post_init__(self):
        obs = tuple(np.atleast_1d(np.asarray(o, dtype=float)) for o in self.observations)
        object.__setattr__(self, "observations", obs)

    @property
    def n(self) -> int:
        return len(self.observations)

    @classmethod
    def from_array(cls, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=float)
        if rows.ndim == 1:
            rows = rows[:, None]
        return cls(tuple(rows))

    def stacked(self) -> np.ndarray:
        """Records as an (n, k) array; requires equal record lengths."""
        if self.n == 0:
            return np.empty((0, 0))
        lengths = {o.size for o in self.observations}
        if len(lengths) != 1:
            raise ValueError("records have unequal lengths")
        return np.vstack(self.observations)

    def __len__(self):
        return self.n


@dataclass(frozen=True, eq=False)
class Component:
    """An independent block of the sample, repeated ``count`` times.

    ``log_density(xi, X)`` is vectorised over the rows of X.  ``rule(xi, cfg)``
    returns quadrature nodes and weights for expectations over one block, or
    is None when only Monte Carlo is possible (then ``sample`` is used).
    """

    count: int
    log_density: Callable
    rule: Optional[Callable] = None
    sample: Optional[Callable] = None
    score: Optional[Callable] = None


@dataclass(frozen=True, eq=False)
class ClosedGeometry:
    metric: Callable
    skewness: Callable
    connection: Optional[Callable] = None
    affine_alphas: tuple = ()
    affine_all: bool = False

    def is_affine(self, alpha: float) -> bool:
        return self.affine_all or any(abs(alpha - a) < 1e-14 for a in self.affine_alphas)


@dataclass(frozen=True, eq=False)
class Chart:
    """Coordinate change xi_old -> xi_new.

    ``jacobian(xi_old)`` is d(forward)/d(xi_old); ``domain`` is the open box of
    the new coordinates.  ``linear`` marks affine maps, which preserve the
    affine-coordinate property of a model.
    """

    name: str
    forward: Callable
    inverse: Callable
    jacobian: Callable
    domain: tuple
    inverse_hessian: Optional[Callable] = None
    linear: bool = False

    def inverse_jacobian(self, xi_new):
        """d(xi_old)/d(xi_new) at the new-chart point."""
        J = np.atleast_2d(np.asarray(self.jacobian(self.inverse(xi_new)), dtype=float))
        try:
            cond = np.linalg.cond(J)
        except np.linalg.LinAlgError:
            cond = np.inf
        if not np.isfinite(cond) or cond > 1e14:
            raise NumericError(f"chart {self.name!r} has a singular jacobian", value=cond)
        return np.linalg.inv(J)


@dataclass(frozen=True, eq=False)
class ParametricModel:
    name: str
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    chart_name: str
    log_density: Callable
    sampler: Callable
    closed_geometry: Optional[ClosedGeometry] = None
    components: tuple = ()
    reference: Optional[np.ndarray] = None
    sample_level: bool = False
    params: Mapping = field(default_factory=dict)
    loglik: Optional[Callable] = None
    coordinate_names: tuple = ()
    loglik_grad: Optional[Callable] = None

    @property
    def domain(self):
        return self.lower, self.upper

    def contains(self, xi) -> bool:
        xi = np.asarray(xi, dtype=float)
        return bool(
            xi.shape == (self.dim,)
            and np.all(np.isfinite(xi))
            and np.all(xi > self.lower)
            and np.all(xi < self.upper)
        )

    def check(self, xi) -> np.ndarray:
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        if xi.shape != (self.dim,):
            raise DomainError(f"{self.name}: expected a point of dimension {self.dim}, got shape {xi.shape}")
        if not self.contains(xi):
            raise DomainError(f"{self.name}: point {xi.tolist()} outside the open domain")
        return xi

    def information_scale(self, n: int) -> float:
        """Factor turning the model metric into the information of n records."""
        return 1.0 if self.sample_level else float(n)

    def numeric_only(self) -> "ParametricModel":
        """Same model with the closed-form geometry removed."""
        return replace(self, closed_geometry=None)


# ---------------------------------------------------------------------------
# quadrature rules
# ---------------------------------------------------------------------------


def gauss_hermite_nodes(k: int, nodes: int, max_points: int) -> int:
    if nodes**k <= max_points:
        return nodes
    return max(4, int(math.floor(max_points ** (1.0 / k))))


def normal_rule(mean, cov, cfg):
    """Tensor-product Gauss-Hermite rule for N(mean, cov)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    k = mean.size
    m = gauss_hermite_nodes(k, cfg.gh_nodes, cfg.gh_max_points)
    t, w = np.polynomial.hermite.hermgauss(m)
    grids = np.meshgrid(*([t] * k), indexing="ij")
    T = np.stack([g.ravel() for g in grids], axis=1) * math.sqrt(2.0)
    W = np.ones(T.shape[0])
    for wg in np.meshgrid(*([w] * k), indexing="ij"):
        W = W * wg.ravel()
    W = W / math.pi ** (k / 2.0)
    L = np.linalg.cholesky(cov)
    return mean + T @ L.T, W


# ---------------------------------------------------------------------------
# charts
# ---------------------------------------------------------------------------


def identity_chart(model: ParametricModel) -> Chart:
    return Chart(
        name=model.chart_name,
        forward=lambda x: np.asarray(x, dtype=float),
        inverse=lambda x: np.asarray(x, dtype=float),
        jacobian=lambda x: np.eye(model.dim),
        domain=(model.lower, model.upper),
        inverse_hessian=lambda x: np.zeros((model.dim,) * 3),
        linear=True,
    )


def efron_morris_natural_chart() -> Chart:
    """sigma^2 -> xi = -1/(2(1 + sigma^2))."""
    return Chart(
        name="natural",
        forward=lambda s: np.array([-0.5 / (1.0 + s[0])]),
        inverse=lambda x: np.array([-0.5 / x[0] - 1.0]),
        jacobian=lambda s: np.array([[0.5 / (1.0 + s[0]) ** 2]]),
        domain=(np.array([-np.inf]), np.array([0.0])),
        inverse_hessian=lambda x: np.array([[[-1.0 / x[0] ** 3]]]),
    )


def polar_chart() -> Chart:
    """Cartesian (x, y) -> (rho, theta) on the plane cut along the negative x-axis."""

    def forward(p):
        return np.array([math.hypot(p[0], p[1]), math.atan2(p[1], p[0])])

    def inverse(q):
        return np.array([q[0] * math.cos(q[1]), q[0] * math.sin(q[1])])

    def jac(p):
        r2 = p[0] ** 2 + p[1] ** 2
        r = math.sqrt(r2)
        return np.array([[p[0] / r, p[1] / r], [-p[1] / r2, p[0] / r2]])

    def inv_hess(q):
        r, t = q
        c, s = math.cos(t), math.sin(t)
        H = np.zeros((2, 2, 2))
        # x = r cos t
        H[0] = [[0.0, -s], [-s, -r * c]]
        # y = r sin t
        H[1] = [[0.0, c], [c, -r * s]]
        return H

    return Chart(
        name="polar",
        forward=forward,
        inverse=inverse,
        jacobian=jac,
        domain=(np.array([0.0, -math.pi]), np.array([np.inf, math.pi])),
        inverse_hessian=inv_hess,
    )


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------


def _em_variance_geometry(n):
    def metric(x):
        v = 1.0 + x[0]
        return np.array([[n / (2.0 * v * v)]])

    def skewness(x):
        v = 1.0 + x[0]
        return np.array([[[n / v**3]]])

    def connection(x, alpha):
        v = 1.0 + x[0]
        return np.array([[[-(1.0 + alpha) * n / (2.0 * v**3)]]])

    return ClosedGeometry(metric, skewness, connection, affine_alphas=(-1.0,))


def _em_natural_geometry(n):
    def metric(x):
        return np.array([[n / (2.0 * x[0] ** 2)]])

    def skewness(x):
        return np.array([[[-n / x[0] ** 3]]])

    def connection(x, alpha):
        return np.array([[[-(1.0 - alpha) * n / (2.0 * x[0] ** 3)]]])

    return ClosedGeometry(metric, skewness, connection, affine_alphas=(1.0,))


def _efron_morris(params, chart):
    n = params.get("n", 1)
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 1:
        raise DomainError(f"efron_morris: n must be a positive integer, got {n!r}")
    n = int(n)
    chart = chart or "variance"
    if chart == "variance":
        var = lambda x: 1.0 + x[0]  # noqa: E731  total variance 1 + sigma^2
        dvar = lambda x: 1.0  # noqa: E731
        lower, upper = np.array([-1.0]), np.array([np.inf])
        geometry = _em_variance_geometry(n)
        reference = np.array([1.0])
        names = ("sigma2",)
    elif chart == "natural":
        var = lambda x: -0.5 / x[0]  # noqa: E731
        dvar = lambda x: 0.5 / x[0] ** 2  # noqa: E731
        lower, upper = np.array([-np.inf]), np.array([0.0])
        geometry = _em_natural_geometry(n)
        reference = np.array([-0.25])
        names = ("xi",)
    else:
        raise ConfigError(f"efron_morris has charts 'variance' and 'natural', not {chart!r}", "chart")

    def logpdf(xi, X):
        v = var(xi)
        return -0.5 * (LOG_2PI + math.log(v)) - X[:, 0] ** 2 / (2.0 * v)

    def rule(xi, cfg):
        return normal_rule([0.0], [[var(xi)]], cfg)

    def sample(xi, count, rng):
        return rng.normal(0.0, math.sqrt(var(xi)), size=(count, 1))

    def log_density(xi, x):
        return float(logpdf(xi, np.atleast_2d(np.asarray(x, dtype=float))))

    def sampler(xi, count, rng):
        return Dataset.from_array(sample(xi, count, rng))

    def loglik(xi, data):
        if data.n == 0:
            return 0.0
        X = data.stacked()
        v = var(xi)
        return float(-0.5 * X.shape[0] * (LOG_2PI + math.log(v)) - np.sum(X[:, 0] ** 2) / (2.0 * v))

    def loglik_grad(xi, data):
        X = data.stacked()
        v = var(xi)
        return np.array([(-0.5 * X.shape[0] / v + np.sum(X[:, 0] ** 2) / (2.0 * v * v)) * dvar(xi)])

    return ParametricModel(
        name="efron_morris",
        dim=1,
        lower=lower,
        upper=upper,
        chart_name=chart,
        log_density=log_density,
        sampler=sampler,
        closed_geometry=geometry,
        components=(Component(n, logpdf, rule, sample),),
        reference=reference,
        sample_level=True,
        params={"n": n},
        loglik=loglik,
        loglik_grad=loglik_grad,
        coordinate_names=names,
    )


def _mvn_known_cov(params, chart):
    d = params.get("d", 2)
    if not isinstance(d, (int, np.integer)) or isinstance(d, bool) or d < 1:
        raise DomainError(f"mvn_known_cov: d must be a positive integer, got {d!r}")
    d = int(d)
    cov = params.get("cov")
    if cov is not None and not np.allclose(np.asarray(cov, dtype=float), np.eye(d)):
        raise DomainError("mvn_known_cov: only the identity covariance is supported")
    if chart not in (None, "cartesian"):
        raise ConfigError(f"mvn_known_cov has chart 'cartesian', not {chart!r}", "chart")

    def logpdf(xi, X):
        return -0.5 * d * LOG_2PI - 0.5 * np.sum((X - xi) ** 2, axis=1)

    def rule(xi, cfg):
        return normal_rule(xi, np.eye(d), cfg)

    def sample(xi, count, rng):
        return xi + rng.standard_normal((count, d))

    def log_density(xi, x):
        return float(logpdf(np.asarray(xi, dtype=float), np.atleast_2d(np.asarray(x, dtype=float))))

    def loglik(xi, data):
        if data.n == 0:
            return 0.0
        X = data.stacked()
        return float(-0.5 * X.shape[0] * d * LOG_2PI - 0.5 * np.sum((X - xi) ** 2))

    def loglik_grad(xi, data):
        return np.sum(data.stacked() - xi, axis=0)

    geometry = ClosedGeometry(
        metric=lambda x: np.eye(d),
        skewness=lambda x: np.zeros((d, d, d)),
        connection=lambda x, a: np.zeros((d, d, d)),
        affine_all=True,
    )
    reference = np.zeros(d)
    reference[0] = 1.0
    return ParametricModel(
        name="mvn_known_cov",
        dim=d,
        lower=np.full(d, -np.inf),
        upper=np.full(d, np.inf),
        chart_name="cartesian",
        log_density=log_density,
        sampler=lambda xi, count, rng: Dataset.from_array(sample(np.asarray(xi, float), count, rng)),
        closed_geometry=geometry,
        components=(Component(1, logpdf, rule, sample),),
        reference=reference,
        params={"d": d},
        loglik=loglik,
        loglik_grad=loglik_grad,
        coordinate_names=tuple(f"xi{i + 1}" for i in range(d)),
    )


# density p(z) = exp(-z^2)/sqrt(pi): z ~ N(0, 1/2)
LS_C1, LS_C2, LS_R2 = 4.0, 8.0, 2.0
LS_C = LS_C1 + LS_C2


def _location_scale_geometry():
    c1, c2, R2 = LS_C1, LS_C2, LS_R2

    def metric(x):
        return (R2 / x[1] ** 2) * np.eye(2)

    def skewness(x):
        s3 = x[1] ** 3
        S = np.zeros((2, 2, 2))
        S[0, 0, 1] = S[0, 1, 0] = S[1, 0, 0] = c1 / s3
        S[1, 1, 1] = c2 / s3
        return S

    def connection(x, alpha):
        s3 = x[1] ** 3
        G = np.zeros((2, 2, 2))
        G[1, 1, 1] = -R2 / s3 - 0.5 * alpha * c2 / s3
        G[0, 1, 0] = G[1, 0, 0] = -R2 / s3 - 0.5 * alpha * c1 / s3
        G[0, 0, 1] = R2 / s3 - 0.5 * alpha * c1 / s3
        return G

    return ClosedGeometry(metric, skewness, connection)


def _location_scale_normal(params, chart):
    if chart not in (None, "(mu,sigma)"):
        raise ConfigError(f"location_scale_normal has chart '(mu,sigma)', not {chart!r}", "chart")
    extra = set(params) - {"density"}
    if extra or params.get("density", "gauss") != "gauss":
        raise DomainError("location_scale_normal takes no parameters besides density='gauss'")

    def logpdf(xi, X):
        z = (X[:, 0] - xi[0]) / xi[1]
        return -z * z - math.log(xi[1]) - 0.5 * math.log(math.pi)

    def rule(xi, cfg):
        return normal_rule([xi[0]], [[0.5 * xi[1] ** 2]], cfg)

    def sample(xi, count, rng):
        return xi[0] + xi[1] * math.sqrt(0.5) * rng.standard_normal((count, 1))

    def log_density(xi, x):
        return float(logpdf(np.asarray(xi, dtype=float), np.atleast_2d(np.asarray(x, dtype=float))))

    def loglik(xi, data):
        if data.n == 0:
            return 0.0
        return float(np.sum(logpdf(np.asarray(xi, dtype=float), data.stacked())))

    def loglik_grad(xi, data):
        x = data.stacked()[:, 0]
        z = (x - xi[0]) / xi[1]
        return np.array([np.sum(2.0 * z) / xi[1], np.sum(2.0 * z * z - 1.0) / xi[1]])

    return ParametricModel(
        name="location_scale_normal",
        dim=2,
        lower=np.array([-np.inf, 0.0]),
        upper=np.array([np.inf, np.inf]),
        chart_name="(mu,sigma)",
        log_density=log_density,
        sampler=lambda xi, count, rng: Dataset.from_array(sample(np.asarray(xi, float), count, rng)),
        closed_geometry=_location_scale_geometry(),
        components=(Component(1, logpdf, rule, sample),),
        reference=np.array([0.0, 1.0]),
        params={},
        loglik=loglik,
        loglik_grad=loglik_grad,
        coordinate_names=("mu", "sigma"),
    )


def lme_unit_sizes(params) -> np.ndarray:
    if "m" in params:
        m = params["m"]
    elif "m_pattern" in params:
        pattern = list(params["m_pattern"])
        units = params.get("n_units", len(pattern))
        if not isinstance(units, (int, np.integer)) or units < 1 or not pattern:
            raise DomainError("nested_error_lme: n_units must be a positive integer and m_pattern non-empty")
        m = [pattern[i % len(pattern)] for i in range(int(units))]
    else:
        raise DomainError("nested_error_lme: unit sizes 'm' (or 'm_pattern' with 'n_units') are required")
    m = list(m)
    if not m or any(not isinstance(k, (int, np.integer)) or isinstance(k, bool) or k < 1 for k in m):
        raise DomainError(f"nested_error_lme: unit sizes must be integers >= 1, got {m!r}")
    if all(k == 1 for k in m):
        raise DomainError("nested_error_lme: all unit sizes equal to 1 is the excluded degenerate case")
    return np.asarray(m, dtype=int)


def lme_metric(x, m):
    a, d = x
    v = d / m + a
    m_tot, n = m.sum(), m.size
    g = np.empty((2, 2))
    g[0, 0] = np.sum(1.0 / v**2)
    g[0, 1] = g[1, 0] = np.sum(1.0 / (m * v**2))
    g[1, 1] = np.sum(1.0 / (m**2 * v**2)) + (m_tot - n) / d**2
    return 0.5 * g


def lme_skewness(x, m):
    a, d = x
    v = d / m + a
    m_tot, n = m.sum(), m.size
    S = np.empty((2, 2, 2))
    S[0, 0, 0] = np.sum(1.0 / v**3)
    S[0, 0, 1] = S[0, 1, 0] = S[1, 0, 0] = np.sum(1.0 / (m * v**3))
    S[0, 1, 1] = S[1, 0, 1] = S[1, 1, 0] = np.sum(1.0 / (m**2 * v**3))
    S[1, 1, 1] = np.sum(1.0 / (m**3 * v**3)) + (m_tot - n) / d**3
    return S


def lme_unit_logpdf(xi, Y):
    """Exact log-density of unit vectors Y (rows) with a = xi[0], d = xi[1]."""
    a, d = xi
    k = Y.shape[1]
    v = d / k + a
    ybar = Y.mean(axis=1)
    W = np.sum((Y - ybar[:, None]) ** 2, axis=1)
    return (
        -0.5 * k * LOG_2PI
        - 0.5 * ((k - 1) * math.log(d) + math.log(k * v))
        - W / (2.0 * d)
        - ybar**2 / (2.0 * v)
    )


def lme_sufficient(data: Dataset):
    """Per-unit sizes, means and within-unit sums of squares."""
    sizes = np.array([o.size for o in data.observations], dtype=int)
    means = np.array([o.mean() for o in data.observations])
    within = np.array([np.sum((o - o.mean()) ** 2) for o in data.observations])
    return sizes, means, within


def lme_loglik_from_stats(xi, sizes, means, within):
    a, d = xi
    v = d / sizes + a
    return float(
        np.sum(
            -0.5 * sizes * LOG_2PI
            - 0.5 * ((sizes - 1) * math.log(d) + np.log(sizes * v))
            - within / (2.0 * d)
            - means**2 / (2.0 * v)
        )
    )


def lme_score_from_stats(xi, sizes, means, within):
    a, d = xi
    v = d / sizes + a
    da = np.sum(-0.5 / v + means**2 / (2.0 * v * v))
    dd = np.sum(-0.5 * (sizes - 1) / d - 0.5 / (sizes * v) + within / (2.0 * d * d) + means**2 / (2.0 * sizes * v * v))
    return np.array([da, dd])


def _nested_error_lme(params, chart):
    if chart not in (None, "(a,d)"):
        raise ConfigError(f"nested_error_lme has chart '(a,d)', not {chart!r}", "chart")
    m = lme_unit_sizes(params)
    groups = sorted(set(m.tolist()))

    def make_component(k):
        def rule(xi, cfg):
            return normal_rule(np.zeros(k), xi[1] * np.eye(k) + xi[0] * np.ones((k, k)), cfg)

        def sample(xi, count, rng):
            z = math.sqrt(xi[0]) * rng.standard_normal((count, 1))
            return z + math.sqrt(xi[1]) * rng.standard_normal((count, k))

        return Component(int(np.sum(m == k)), lme_unit_logpdf, rule, sample)

    def log_density(xi, x):
        return float(lme_unit_logpdf(np.asarray(xi, dtype=float), np.atleast_2d(np.asarray(x, dtype=float))))

    def sampler(xi, count, rng):
        xi = np.asarray(xi, dtype=float)
        sizes = [int(m[i % m.size]) for i in range(count)]
        z = math.sqrt(xi[0]) * rng.standard_normal(count)
        units = [z[i] + math.sqrt(xi[1]) * rng.standard_normal(k) for i, k in enumerate(sizes)]
        return Dataset(tuple(units))

    def loglik(xi, data):
        if data.n == 0:
            return 0.0
        return lme_loglik_from_stats(np.asarray(xi, dtype=float), *lme_sufficient(data))

    def loglik_grad(xi, data):
        return lme_score_from_stats(np.asarray(xi, dtype=float), *lme_sufficient(data))

    geometry = ClosedGeometry(
        metric=lambda x: lme_metric(x, m),
        skewness=lambda x: lme_skewness(x, m),
        connection=lambda x, alpha: -0.5 * (1.0 + alpha) * lme_skewness(x, m),
        affine_alphas=(-1.0,),
    )
    return ParametricModel(
        name="nested_error_lme",
        dim=2,
        lower=np.array([0.0, 0.0]),
        upper=np.array([np.inf, np.inf]),
        chart_name="(a,d)",
        log_density=log_density,
        sampler=sampler,
        closed_geometry=geometry,
        components=tuple(make_component(k) for k in groups),
        reference=np.array([1.0, 1.0]),
        sample_level=True,
        params={"m": m.tolist()},
        loglik=loglik,
        loglik_grad=loglik_grad,
        coordinate_names=("a", "d"),
    )


BUILTINS = {
    "efron_morris": _efron_morris,
    "mvn_known_cov": _mvn_known_cov,
    "location_scale_normal": _location_scale_normal,
    "nested_error_lme": _nested_error_lme,
}


def make_builtin(name: str, params: Optional[Mapping] = None, chart: Optional[str] = None) -> ParametricModel:
    """Construct a built-in model by identifier.

    Args:
        name: one of ``efron_morris``, ``mvn_known_cov``,
            ``location_scale_normal``, ``nested_error_lme``.
        params: model parameters (``n`` for efron_morris, ``d`` for
            mvn_known_cov, ``m`` or ``m_pattern``/``n_units`` for the LME).
        chart: coordinate system; efron_morris accepts ``variance`` and
            ``natural``.

    Raises:
        ConfigError: unknown name or chart.
        DomainError: invalid parameter values.
    """
    try:
        builder = BUILTINS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; expected one of {sorted(BUILTINS)}", "model.name") from None
    return builder(dict(params or {}), chart)


# ---------------------------------------------------------------------------
# likelihood and charts
# ---------------------------------------------------------------------------


def log_likelihood(model: ParametricModel, xi, data: Dataset) -> float:
    """Sum of per-record log densities at xi."""
    xi = model.check(xi)
    if data.n == 0:
        return 0.0
    if model.loglik is not None:
        return float(model.loglik(xi, data))
    return math.fsum(model.log_density(xi, x) for x in data.observations)


def log_likelihood_gradient(model: ParametricModel, xi, data: Dataset):
    """Analytic score sum when the model provides one, else None."""
    if model.loglik_grad is None:
        return None
    xi = model.check(xi)
    if data.n == 0:
        return np.zeros(model.dim)
    return np.asarray(model.loglik_grad(xi, data), dtype=float)


def _transform_geometry(geo: ClosedGeometry, chart: Chart) -> ClosedGeometry:
    inv = chart.inverse

    def jac(y):
        return chart.inverse_jacobian(np.asarray(y, dtype=float))

    def second(y):
        y = np.asarray(y, dtype=float)
        if chart.inverse_hessian is not None:
            return np.asarray(chart.inverse_hessian(y), dtype=float)
        # H[i, a, b] = d^2 old_i / d new_a d new_b
        return np.moveaxis(_numdiff.jacobian(jac, y, 1e-5), -1, 1)

    def metric(y):
        J = jac(y)
        return J.T @ geo.metric(inv(y)) @ J

    def skewness(y):
        J = jac(y)
        return np.einsum("ijk,ia,jb,kc->abc", geo.skewness(inv(y)), J, J, J)

    def connection(y, alpha):
        x = inv(y)
        J = jac(y)
        if geo.connection is not None:
            G = geo.connection(x, alpha)
        else:
            G = None
        if G is None:
            return None
        inhom = np.einsum("ij,iab,jc->abc", geo.metric(x), second(y), J)
        return np.einsum("ijk,ia,jb,kc->abc", G, J, J, J) + inhom

    affine = geo.affine_alphas if chart.linear else ()
    return ClosedGeometry(
        metric,
        skewness,
        connection if geo.connection is not None else None,
        affine_alphas=affine,
        affine_all=geo.affine_all and chart.linear,
    )


def reparametrize(model: ParametricModel, chart: Chart) -> ParametricModel:
    """Express ``model`` in new coordinates given by ``chart``.

    Densities are composed with ``chart.inverse``; closed-form geometry is
    carried along by the tensor transformation rules (J^T g J for the metric,
    the rank-3 pushforward for the skewness, and the inhomogeneous rule for
    the connection).
    """
    inv = chart.inverse
    lower, upper = (np.asarray(b, dtype=float) for b in chart.domain)
    if lower.shape != (model.dim,) or upper.shape != (model.dim,):
        raise ConfigError(f"chart {chart.name!r} has the wrong dimension", "chart")

    def wrap_component(c):
        rule = None if c.rule is None else (lambda y, cfg, c=c: c.rule(inv(y), cfg))
        sample = None if c.sample is None else (lambda y, k, rng, c=c: c.sample(inv(y), k, rng))
        return Component(c.count, lambda y, X, c=c: c.log_density(inv(y), X), rule, sample)

    reference = None
    if model.reference is not None:
        ref = np.asarray(chart.forward(model.reference), dtype=float)
        if np.all(ref > lower) and np.all(ref < upper):
            reference = ref
    loglik = None
    if model.loglik is not None:
        loglik = lambda y, data: model.loglik(inv(y), data)  # noqa: E731
    loglik_grad = None
    if model.loglik_grad is not None:

        def loglik_grad(y, data):
            y = np.asarray(y, dtype=float)
            return chart.inverse_jacobian(y).T @ model.loglik_grad(inv(y), data)
    return replace(
        model,
        lower=lower,
        upper=upper,
        chart_name=chart.name,
        log_density=lambda y, x: model.log_density(inv(y), x),
        sampler=lambda y, count, rng: model.sampler(inv(y), count, rng),
        closed_geometry=None if model.closed_geometry is None else _transform_geometry(model.closed_geometry, chart),
        components=tuple(wrap_component(c) for c in model.components),
        reference=reference,
        loglik=loglik,
        loglik_grad=loglik_grad,
        coordinate_names=(),
    )


# ---------------------------------------------------------------------------
# CSV input / output
# ---------------------------------------------------------------------------


LME_COLUMNS = ("unit", "obs_index", "value")


def write_lme_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LME_COLUMNS)
        for u, obs in enumerate(data.observations):
            for j, val in enumerate(obs):
                w.writerow([u, j, repr(float(val))])


def read_lme_csv(path) -> Dataset:
    units: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LME_COLUMNS:
            raise ConfigError(f"expected columns {','.join(LME_COLUMNS)}", "data")
        for lineno, row in enumerate(reader, start=2):
            try:
                u, j, val = int(row["unit"]), int(row["obs_index"]), float(row["value"])
            except (TypeError, ValueError):
                raise ConfigError(f"line {lineno}: malformed row {row}", "data") from None
            units.setdefault(u, {})[j] = val
    obs = []
    for u in sorted(units):
        idx = sorted(units[u])
        if idx != list(range(len(idx))):
            raise ConfigError(f"unit {u}: obs_index must run 0..m-1", "data")
        obs.append(np.array([units[u][j] for j in idx]))
    return Dataset(tuple(obs))


def write_records_csv(data: Dataset, path) -> None:
    X = data.stacked()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(X.shape[1] if X.size else 0)])
        for row in X:
            w.writerow([repr(float(v)) for v in row])


def read_records_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ConfigError("empty data file", "data")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(f"line {lineno}: expected {len(header)} fields", "data")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ConfigError(f"line {lineno}: non-numeric value", "data") from None
    if not rows:
        return Dataset(())
    return Dataset.from_array(np.array(rows))


def read_dataset(model: ParametricModel, path) -> Dataset:
    if model.name == "nested_error_lme":
        return read_lme_csv(path)
    return read_records_csv(path)


def write_dataset(model: ParametricModel, data: Dataset, path) -> None:
    if model.name == "nested_error_lme":
        write_lme_csv(data, path)
    else:
        write_records_csv(data, path)


def point_list(values: Sequence[float]) -> list:
    return [float(v) for v in np.atleast_1d(values)]
