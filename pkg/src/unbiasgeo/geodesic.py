"""Levi-Civita geodesics: shooting, distance, normal coordinates and the Riesz identities.

The exponential map is integrated together with its variational equations
(Jacobi fields), so d exp / d zeta and the normal-coordinate determinant
come out of the same ODE solve as the geodesic itself.  A scalar state
accumulates the line integral of the contracted skewness S_i along the path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from . import _numdiff
from .config import DEFAULT, NumericConfig
from .errors import DomainError, NumericError, SolverError
from .geometry import frame_at
from .manifold import ParametricModel

JACOBIAN_COND_MAX = 1e12


class TruncatedPathError(DomainError):
    """The geodesic left the parameter box before the requested length."""

    def __init__(self, message, exit_radius):
        super().__init__(message)
        self.exit_radius = exit_radius


@dataclass(frozen=True, eq=False)
class GeodesicPath:
    base: np.ndarray
    velocity: np.ndarray
    r: np.ndarray
    points: np.ndarray
    velocities: np.ndarray
    dense: Optional[Callable] = field(default=None, repr=False)

    def speed_residual(self, model, cfg=DEFAULT) -> float:
        """max |g(xi') - 1| over the knots."""
        out = 0.0
        for p, v in zip(self.points, self.velocities):
            g = frame_at(model, p, cfg).metric
            out = max(out, abs(float(v @ g @ v) - 1.0))
        return out

    def equation_residual(self, model, cfg=DEFAULT) -> float:
        """max |xi'' + Gamma^k_ij xi'^i xi'^j| with xi'' from the dense output."""
        if self.dense is None or self.r[-1] == 0.0:
            return 0.0
        d = self.base.size
        h = 1e-3 * max(1.0, float(self.r[-1]))
        out = 0.0
        for rho in self.r:
            rho = float(np.clip(rho, 2 * h, self.r[-1] - 2 * h))
            acc = _numdiff.jacobian5(lambda t: self.dense(t[0])[d:2 * d], np.array([rho]), h / max(1.0, rho))[:, 0]
            y = self.dense(rho)
            C = frame_at(model, y[:d], cfg).raised_connection(0.0)
            out = max(out, float(np.max(np.abs(acc + np.einsum("kij,i,j->k", C, y[d:2 * d], y[d:2 * d])))))
        return out


@dataclass(frozen=True, eq=False)
class ExpResult:
    point: np.ndarray
    velocity: np.ndarray
    jacobian: Optional[np.ndarray]
    jacobian_rate: Optional[np.ndarray]
    skew_integral: float
    solution: object = field(repr=False, default=None)


@dataclass(frozen=True, eq=False)
class DistanceResult:
    r: float
    zeta: np.ndarray
    path: GeodesicPath
    exp: ExpResult = field(repr=False, default=None)


@dataclass(frozen=True, eq=False)
class NormalChart:
    base: np.ndarray
    to_normal: Callable = field(repr=False)
    to_param: Callable = field(repr=False)
    det_bar_g: Callable = field(repr=False)
    skew_bar: Callable = field(repr=False)

    def sqrt_det_bar_g(self, zeta) -> float:
        return math.sqrt(self.det_bar_g(zeta))


# ---------------------------------------------------------------------------
# ODE plumbing
# ---------------------------------------------------------------------------


def christoffel(model, xi, cfg=DEFAULT) -> np.ndarray:
    """Gamma^(0)s_{ij} as C[s, i, j]; no domain check."""
    closed = model.closed_geometry
    if closed is not None and closed.connection is not None:
        xi = np.asarray(xi, dtype=float)
        ginv = np.linalg.inv(np.asarray(closed.metric(xi), dtype=float))
        return np.einsum("sk,ijk->sij", ginv, np.asarray(closed.connection(xi, 0.0), dtype=float))
    return frame_at(model, xi, cfg, check=False).raised_connection(0.0)


def christoffel_gradient(model, xi, cfg=DEFAULT) -> np.ndarray:
    """dC[k, s, i, j] = d_k Gamma^s_{ij}."""
    return np.moveaxis(_numdiff.jacobian(lambda p: christoffel(model, p, cfg), xi, cfg.fd_step), -1, 0)


def _margin(model: ParametricModel):
    finite_lo = np.isfinite(model.lower)
    finite_hi = np.isfinite(model.upper)

    def event(t, y):
        xi = y[: model.dim]
        m = np.inf
        if finite_lo.any():
            m = min(m, float(np.min((xi - model.lower)[finite_lo])))
        if finite_hi.any():
            m = min(m, float(np.min((model.upper - xi)[finite_hi])))
        return m - 1e-12 if np.isfinite(m) else 1.0

    event.terminal = True
    event.direction = -1
    return event


def _integrate(model, xi0, v0, t_end, cfg, jacobian=False, skew=False, t_eval=None):
    d = model.dim

    def rhs(t, y):
        xi, v = y[:d], y[d:2 * d]
        if not model.contains(xi):
            return np.full(y.shape, np.nan)
        C = christoffel(model, xi, cfg)
        out = [v, -np.einsum("kij,i,j->k", C, v, v)]
        pos = 2 * d
        if jacobian:
            Y = y[pos:pos + d * d].reshape(d, d)
            Yd = y[pos + d * d:pos + 2 * d * d].reshape(d, d)
            dC = christoffel_gradient(model, xi, cfg)
            Ydd = -np.einsum("ksij,ka,i,j->sa", dC, Y, v, v) - 2.0 * np.einsum("sij,i,ja->sa", C, v, Yd)
            out += [Yd.ravel(), Ydd.ravel()]
            pos += 2 * d * d
        if skew:
            out.append(np.array([frame_at(model, xi, cfg, check=False).contracted_skewness @ v]))
        return np.concatenate(out)

    y0 = [np.asarray(xi0, float), np.asarray(v0, float)]
    if jacobian:
        y0 += [np.zeros(d * d), np.eye(d).ravel()]
    if skew:
        y0.append(np.zeros(1))
    y0 = np.concatenate(y0)
    sol = solve_ivp(
        rhs,
        (0.0, float(t_end)),
        y0,
        method="DOP853",
        rtol=cfg.ode_rtol,
        atol=cfg.ode_atol,
        dense_output=True,
        events=_margin(model),
        t_eval=t_eval,
    )
    if sol.status == 1:
        raise TruncatedPathError(
            f"geodesic left the domain at parameter {sol.t_events[0][0]:.6g}", float(sol.t_events[0][0])
        )
    if sol.status != 0 or not np.all(np.isfinite(sol.y[:, -1])):
        raise SolverError(f"geodesic integration failed: {sol.message}")
    return sol


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def shoot(model: ParametricModel, xi0, v, r_max: float, cfg: NumericConfig = DEFAULT, r_eval=None) -> GeodesicPath:
    """Unit-speed geodesic from ``xi0`` in direction ``v`` up to arclength ``r_max``."""
    xi0 = model.check(xi0)
    v = np.asarray(v, dtype=float)
    g0 = frame_at(model, xi0, cfg).metric
    norm = math.sqrt(float(v @ g0 @ v)) if np.any(v) else 0.0
    if norm == 0.0:
        raise DomainError("shooting direction must be non-zero")
    u = v / norm
    if r_max < 0:
        raise DomainError("r_max must be non-negative")
    if r_max == 0:
        return GeodesicPath(xi0, u, np.array([0.0]), xi0[None, :], u[None, :])
    grid = np.linspace(0.0, r_max, 33) if r_eval is None else np.asarray(r_eval, dtype=float)
    sol = _integrate(model, xi0, u, r_max, cfg)
    Y = sol.sol(grid)
    d = model.dim
    return GeodesicPath(xi0, u, grid, Y[:d].T.copy(), Y[d:2 * d].T.copy(), dense=sol.sol)


def exp_map(model: ParametricModel, xi0, zeta, cfg: NumericConfig = DEFAULT, jacobian=True, skew=False) -> ExpResult:
    """exp_{xi0}(zeta) with d exp / d zeta (columns index zeta) and the skewness line integral."""
    xi0 = np.asarray(xi0, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    d = model.dim
    if not np.any(zeta):
        return ExpResult(xi0.copy(), zeta.copy(), np.eye(d) if jacobian else None,
                         np.eye(d) if jacobian else None, 0.0)
    sol = _integrate(model, xi0, zeta, 1.0, cfg, jacobian=jacobian, skew=skew)
    y = sol.y[:, -1]
    pos = 2 * d
    J = Jd = None
    if jacobian:
        J = y[pos:pos + d * d].reshape(d, d)
        Jd = y[pos + d * d:pos + 2 * d * d].reshape(d, d)
        pos += 2 * d * d
    q = float(y[pos]) if skew else 0.0
    return ExpResult(y[:d].copy(), y[d:2 * d].copy(), J, Jd, q, sol)


def _start_directions(g0, scale, count):
    d = g0.shape[0]
    w, V = np.linalg.eigh(g0)
    E = V / np.sqrt(w)  # columns orthonormal in g0
    dirs = []
    if d == 1:
        base = [np.array([1.0]), np.array([-1.0])]
    elif d == 2:
        base = [np.array([math.cos(t), math.sin(t)]) for t in 2 * math.pi * np.arange(count) / count]
    else:
        base = []
        for k in range(count):
            e = np.zeros(d)
            e[k % d] = 1.0 if (k // d) % 2 == 0 else -1.0
            base.append(e)
    for b in base[:count]:
        dirs.append(scale * (E @ b))
    return dirs


def distance(model: ParametricModel, xi0, xi1, cfg: NumericConfig = DEFAULT, zeta0=None) -> DistanceResult:
    """Geodesic distance by Newton shooting on the endpoint map.

    The first start is ``zeta0`` (or the coordinate difference); then
    ``cfg.shooting_starts`` directions on the unit sphere of g(xi0).

    Raises:
        SolverError: no start converged.
        NumericError: near-singular endpoint Jacobian (conjugate point).
    """
    xi0 = model.check(xi0)
    xi1 = model.check(xi1)
    d = model.dim
    if np.array_equal(xi0, xi1):
        path = GeodesicPath(xi0, np.zeros(d), np.array([0.0]), xi0[None, :], np.zeros((1, d)))
        return DistanceResult(0.0, np.zeros(d), path, ExpResult(xi0.copy(), np.zeros(d), np.eye(d), np.eye(d), 0.0))
    g0 = frame_at(model, xi0, cfg).metric
    diff = xi1 - xi0
    scale = math.sqrt(float(diff @ g0 @ diff))
    starts = [diff if zeta0 is None else np.asarray(zeta0, float)]
    starts += _start_directions(g0, scale, cfg.shooting_starts)
    tol = cfg.shooting_tol * max(1.0, float(np.max(np.abs(xi1))))
    singular = False
    coarse = cfg.with_(ode_rtol=max(cfg.ode_rtol, 1e-7), ode_atol=max(cfg.ode_atol, 1e-9))
    for v in starts:
        try:
            # cheap tolerances first, then polish at the configured ones
            res = _newton_shoot(model, xi0, xi1, np.array(v, float), coarse, max(tol, 1e-6))
            if res is not None:
                res = _newton_shoot(model, xi0, xi1, res[0], cfg, tol)
        except NumericError as exc:
            singular = singular or "singular" in str(exc)
            continue
        except DomainError:
            continue
        if res is None:
            continue
        zeta, ex = res
        r = math.sqrt(float(zeta @ g0 @ zeta))
        grid = np.linspace(0.0, 1.0, 33)
        Y = ex.solution.sol(grid)
        path = GeodesicPath(
            xi0,
            zeta / r,
            grid * r,
            Y[:d].T.copy(),
            Y[d:2 * d].T.copy() / r,
            dense=lambda rho, s=ex.solution, r=r: _rescale(s(rho / r), d, r),
        )
        return DistanceResult(r, zeta, path, ex)
    if singular:
        raise NumericError("endpoint Jacobian is near-singular (conjugate point) for every start")
    raise SolverError(f"shooting did not converge from {len(starts)} starts")


def _rescale(y, d, r):
    y = np.array(y, dtype=float)
    y[d:2 * d] /= r
    return y


def _newton_shoot(model, xi0, xi1, v, cfg, tol):
    ex = exp_map(model, xi0, v, cfg)
    F = ex.point - xi1
    for _ in range(cfg.shooting_max_iter):
        if float(np.max(np.abs(F))) <= tol:
            return v, ex
        J = ex.jacobian
        if np.linalg.cond(J) > JACOBIAN_COND_MAX:
            raise NumericError("endpoint Jacobian is near-singular")
        step = np.linalg.solve(J, F)
        lam = 1.0
        while True:
            trial = v - lam * step
            try:
                ex_t = exp_map(model, xi0, trial, cfg)
                F_t = ex_t.point - xi1
                if np.linalg.norm(F_t) < np.linalg.norm(F) or lam < 1e-3:
                    break
            except DomainError:
                pass
            lam *= 0.5
            if lam < 1e-6:
                return None
        v, ex, F = trial, ex_t, F_t
    return (v, ex) if float(np.max(np.abs(F))) <= tol else None


def log_map(model, xi0, xi, cfg=DEFAULT) -> np.ndarray:
    return distance(model, xi0, xi, cfg).zeta


def normal_chart(model: ParametricModel, xi0, cfg: NumericConfig = DEFAULT) -> NormalChart:
    """Normal coordinates zeta = r * xi'(0) centred at ``xi0`` (basis of the xi chart)."""
    xi0 = model.check(xi0)

    def jac(zeta):
        ex = exp_map(model, xi0, zeta, cfg)
        if np.linalg.cond(ex.jacobian) > JACOBIAN_COND_MAX:
            raise NumericError("exponential map is near-singular (conjugate point)")
        return ex

    def det_bar_g(zeta):
        ex = jac(zeta)
        g = frame_at(model, ex.point, cfg).metric
        return float(np.linalg.det(g) * np.linalg.det(ex.jacobian) ** 2)

    def skew_bar(zeta):
        ex = jac(zeta)
        return ex.jacobian.T @ frame_at(model, ex.point, cfg).contracted_skewness

    return NormalChart(
        base=xi0,
        to_normal=lambda xi: distance(model, xi0, xi, cfg).zeta,
        to_param=lambda zeta: exp_map(model, xi0, zeta, cfg, jacobian=False).point,
        det_bar_g=det_bar_g,
        skew_bar=skew_bar,
    )


@dataclass(frozen=True, eq=False)
class RadialProfile:
    """Quantities along the ray rho -> exp(rho * e), 0 <= rho <= rho_max, with |e|_g = 1."""

    base: np.ndarray
    direction: np.ndarray
    rho_max: float
    solution: object = field(repr=False)
    model: ParametricModel = field(repr=False)
    cfg: NumericConfig = field(repr=False)

    def state(self, rho):
        return self.solution.sol(rho / self.rho_max)

    def point(self, rho) -> np.ndarray:
        return self.state(rho)[: self.model.dim]

    def log_det_bar_g(self, rho) -> float:
        d = self.model.dim
        if rho == 0.0:
            return float(np.log(np.linalg.det(frame_at(self.model, self.base, self.cfg).metric)))
        y = self.state(rho)
        tau = rho / self.rho_max
        Y = y[2 * d:2 * d + d * d].reshape(d, d) / tau
        g = frame_at(self.model, y[:d], self.cfg).metric
        return float(np.log(np.linalg.det(g)) + 2.0 * np.log(abs(np.linalg.det(Y))))

    def skew_integral(self, rho) -> float:
        """Integral of S_i d xi^i from the base point to arclength rho."""
        return float(self.state(rho)[-1])

    def dlog_det_bar_g(self, rho) -> float:
        """d/d rho of log det bar g, from the Jacobi fields."""
        d = self.model.dim
        y = self.state(rho)
        tau = rho / self.rho_max
        xi, v = y[:d], y[d:2 * d]
        Y = y[2 * d:2 * d + d * d].reshape(d, d)
        Yd = y[2 * d + d * d:2 * d + 2 * d * d].reshape(d, d)
        C = christoffel(self.model, xi, self.cfg)
        rate = 2.0 * np.einsum("ssk,k->", C, v) + 2.0 * np.trace(np.linalg.solve(Y, Yd)) - 2.0 * d / tau
        return float(rate / self.rho_max)


def radial_profile(model, xi0, direction, rho_max, cfg=DEFAULT) -> RadialProfile:
    xi0 = model.check(xi0)
    e = np.asarray(direction, dtype=float)
    g0 = frame_at(model, xi0, cfg).metric
    e = e / math.sqrt(float(e @ g0 @ e))
    sol = _integrate(model, xi0, rho_max * e, 1.0, cfg, jacobian=True, skew=True)
    return RadialProfile(xi0, e, float(rho_max), sol, model, cfg)


def _grad_r2(model, xi0, xi, cfg, zeta0=None):
    res = distance(model, xi0, xi, cfg, zeta0=zeta0)
    g0 = frame_at(model, xi0, cfg).metric
    G = 2.0 * np.linalg.solve(res.exp.jacobian.T, g0 @ res.zeta)
    return G, res


def riesz_check(model: ParametricModel, xi0, xi, cfg: NumericConfig = DEFAULT, test_f=None) -> dict:
    """Residuals of the three Riesz identities and of the unit-gradient property.

    * (i)   (1/2) d(r^2)/d xi^i  vs  r g_ij d xi^j / dr
    * (ii)  Laplacian of F(r^2)  vs  F' Laplacian(r^2) + 4 r^2 F''
    * (iii) Laplacian(r^2) from the metric  vs  2d + r d(log det bar g)/dr from Jacobi fields
    """
    xi0 = model.check(xi0)
    xi = model.check(xi)
    d = model.dim
    if test_f is None:
        test_f = (lambda t: t + 0.5 * t * t, lambda t: 1.0 + t, lambda t: 1.0)
    F, F1, F2 = test_f

    G, res = _grad_r2(model, xi0, xi, cfg)
    r = res.r
    frame = frame_at(model, xi, cfg)
    ginv = frame.metric_inv
    C = frame.raised_connection(0.0)
    v_end = res.exp.velocity / r  # unit speed velocity at xi
    lhs_i = 0.5 * G
    rhs_i = r * frame.metric @ v_end
    res_i = float(np.max(np.abs(lhs_i - rhs_i))) / max(1.0, float(np.max(np.abs(lhs_i))))

    unit = float(G @ ginv @ G) / (4.0 * r * r) - 1.0

    zeta = res.zeta

    def grad_r2(p):
        return _grad_r2(model, xi0, p, cfg, zeta0=zeta)[0]

    H = _numdiff.jacobian(grad_r2, xi, cfg.fd_step)
    H = 0.5 * (H + H.T)
    lap_r2 = float(np.einsum("ij,ij->", ginv, H) - np.einsum("ij,kij,k->", ginv, C, G))

    prof = radial_profile(model, xi0, zeta, r, cfg)
    lap_r2_jacobi = 2.0 * d + r * prof.dlog_det_bar_g(r)
    res_iii = abs(lap_r2 - lap_r2_jacobi) / max(1.0, abs(lap_r2))

    t = r * r

    def grad_F(p):
        return F1(float(_grad_r2(model, xi0, p, cfg, zeta0=zeta)[1].r ** 2)) * grad_r2(p)

    HF = _numdiff.jacobian(grad_F, xi, cfg.fd_step)
    HF = 0.5 * (HF + HF.T)
    lap_F = float(np.einsum("ij,ij->", ginv, HF) - np.einsum("ij,kij,k->", ginv, C, F1(t) * G))
    chain = F1(t) * lap_r2 + 4.0 * t * F2(t)
    res_ii = abs(lap_F - chain) / max(1.0, abs(lap_F))
    return {
        "r": r,
        "riesz_i": res_i,
        "riesz_ii": res_ii,
        "riesz_iii": res_iii,
        "unit_gradient": abs(unit),
        "laplacian_r2": lap_r2,
        "laplacian_r2_jacobi": lap_r2_jacobi,
    }


def hyperbolic_distance(p, q, R=math.sqrt(2.0)) -> float:
    """Closed-form distance for the metric (R / sigma)^2 (d mu^2 + d sigma^2)."""
    (m1, s1), (m2, s2) = p, q
    return R * math.acosh(1.0 + ((m1 - m2) ** 2 + (s1 - s2) ** 2) / (2.0 * s1 * s2))
