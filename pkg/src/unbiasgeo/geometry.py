"""Fisher metric, skewness tensor, alpha-connections, curvature and the alpha-Laplacian.

Index conventions used throughout:

* ``connection[i, j, k]`` is the lowered symbol Gamma_{ij,k} = <nabla_i d_j, d_k>;
* ``raised[s, i, j]`` is Gamma^s_{ij} = g^{sk} Gamma_{ij,k};
* ``riemann[j, i, k, r]`` is R_{jikr} = g_{sj} R^s_{ikr}, where
  R(d_k, d_r) d_i = R^s_{ikr} d_s and R(X, Y) = [nabla_X, nabla_Y] - nabla_[X, Y];
* ``ricci[j, k]`` is R^i_{kij}.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _numdiff
from .config import DEFAULT, NumericConfig
from .errors import DomainError, NumericError
from .manifold import ParametricModel

ALPHAS = (-1.0, -0.5, 0.0, 0.5, 1.0)


@dataclass(frozen=True, eq=False)
class GeometryFrame:
    point: np.ndarray
    metric: np.ndarray
    metric_inv: np.ndarray
    skewness: np.ndarray
    contracted_skewness: np.ndarray
    connection_evaluator: Callable = field(repr=False)
    source: str = "closed-form"

    @property
    def dim(self) -> int:
        return self.point.size

    def connection(self, alpha: float) -> np.ndarray:
        return self.connection_evaluator(float(alpha))

    def raised_connection(self, alpha: float) -> np.ndarray:
        return np.einsum("sk,ijk->sij", self.metric_inv, self.connection(alpha))

    def inner(self, u, v) -> float:
        """<u, v> for covectors u, v (index down)."""
        return float(np.asarray(u) @ self.metric_inv @ np.asarray(v))


@dataclass(frozen=True, eq=False)
class CurvatureFrame:
    point: np.ndarray
    alpha: float
    riemann: np.ndarray
    ricci: np.ndarray


def _check_pd(g: np.ndarray, where) -> None:
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite metric at {where}")
    eig = np.linalg.eigvalsh(0.5 * (g + g.T))
    if eig[0] <= 0:
        raise NumericError(f"metric not positive definite at {where}: smallest eigenvalue {eig[0]:.3e}", value=eig[0])


def _stencil_ok(model: ParametricModel, xi, h) -> None:
    hs = _numdiff.steps(xi, h)
    for i in range(xi.size):
        e = np.zeros(xi.size)
        e[i] = 2 * hs[i]
        if not (model.contains(xi + e) and model.contains(xi - e)):
            raise DomainError(f"finite-difference stencil leaves the domain at {xi.tolist()}")


def _finish(xi, g, S, evaluator, source) -> GeometryFrame:
    _check_pd(g, xi.tolist())
    g = 0.5 * (g + g.T)
    ginv = np.linalg.inv(g)
    return GeometryFrame(
        point=xi,
        metric=g,
        metric_inv=ginv,
        skewness=S,
        contracted_skewness=np.einsum("jk,ijk->i", ginv, S),
        connection_evaluator=evaluator,
        source=source,
    )


def metric_derivative(model: ParametricModel, xi, cfg: NumericConfig = DEFAULT) -> np.ndarray:
    """dg[k, i, j] = d_k g_ij by central differences of the metric.

    The quadrature metric gets the wider step with a fourth-order stencil.
    """
    xi = model.check(xi)
    closed = model.closed_geometry
    if closed is not None:
        _stencil_ok(model, xi, cfg.fd_step)
        return np.moveaxis(_numdiff.jacobian(closed.metric, xi, cfg.fd_step), -1, 0)
    h = cfg.fd_step_curv
    _stencil_ok(model, xi, h)
    fn = lambda p: _numeric_moments(model, p, cfg)[0]  # noqa: E731
    return np.moveaxis(_numdiff.jacobian5(fn, xi, h), -1, 0)


def levi_civita_from_metric(dg: np.ndarray) -> np.ndarray:
    """Gamma^(0)_{ij,k} = (d_i g_jk + d_j g_ik - d_k g_ij) / 2."""
    return 0.5 * (
        np.einsum("ijk->ijk", dg) + np.einsum("jik->ijk", dg) - np.einsum("kij->ijk", dg)
    )


def _expectations(model: ParametricModel, xi, cfg):
    """Monte Carlo or quadrature estimates of g, S and E[d_i d_j l d_k l]."""
    d = model.dim
    g = np.zeros((d, d))
    S = np.zeros((d, d, d))
    T = np.zeros((d, d, d))
    source = "numeric-quadrature"
    if not model.components:
        raise NumericError(f"model {model.name!r} has no components to integrate over")
    for comp in model.components:
        if comp.rule is not None:
            X, w = comp.rule(xi, cfg)
        elif comp.sample is not None:
            rng = np.random.default_rng(cfg.expectation_seed)
            X = comp.sample(xi, cfg.expectation_samples, rng)
            w = np.full(X.shape[0], 1.0 / X.shape[0])
            source = "numeric-montecarlo"
        else:
            raise NumericError("component has neither a quadrature rule nor a sampler")
        if comp.score is not None:
            D1, D2 = comp.score(xi, X)
        else:
            D1, D2 = _numdiff.score_derivatives(comp.log_density, xi, X, cfg.fd_step, cfg.fd_step2)
        wD1 = w[:, None] * D1
        g += comp.count * np.einsum("ni,nj->ij", wD1, D1)
        S += comp.count * np.einsum("ni,nj,nk->ijk", wD1, D1, D1)
        T += comp.count * np.einsum("nij,nk->ijk", D2, wD1)
    return g, S, T, source


def _numeric_moments(model, xi, cfg):
    return _expectations(model, np.asarray(xi, dtype=float), cfg)


def frame_at(model: ParametricModel, xi, cfg: NumericConfig = DEFAULT, check: bool = True) -> GeometryFrame:
    """Geometry at ``xi``: closed forms when the model has them, otherwise numeric.

    The numeric route estimates E[d_i l d_j l], E[d_i l d_j l d_k l] and
    E[d_i d_j l d_k l] by Gauss-Hermite quadrature (Monte Carlo when a
    component only has a sampler), with scores from central differences.

    ``check=False`` skips the domain test; ODE right-hand sides use it for
    trial points that a terminal event will reject anyway.

    Raises:
        DomainError: ``xi`` outside the open parameter box.
        NumericError: the metric is not positive definite.
    """
    xi = model.check(xi) if check else np.asarray(xi, dtype=float)
    closed = model.closed_geometry
    if closed is not None:
        g = np.asarray(closed.metric(xi), dtype=float)
        S = np.asarray(closed.skewness(xi), dtype=float)
        if closed.connection is not None:
            conn = closed.connection

            def evaluator(alpha, xi=xi):
                return np.asarray(conn(xi, alpha), dtype=float)

        else:
            gamma0 = levi_civita_from_metric(metric_derivative(model, xi, cfg))

            def evaluator(alpha, gamma0=gamma0, S=S):
                return gamma0 - 0.5 * alpha * S

        return _finish(xi, g, S, evaluator, "closed-form")

    g, S, T, source = _expectations(model, xi, cfg)

    def evaluator(alpha, T=T, S=S):
        return T + 0.5 * (1.0 - alpha) * S

    return _finish(xi, g, S, evaluator, source)


def alpha_connection(frame: GeometryFrame, alpha: float) -> np.ndarray:
    """Lowered alpha-connection Gamma^(alpha)_{ij,k} = Gamma^(0)_{ij,k} - (alpha/2) S_ijk."""
    return frame.connection(alpha)


def function_derivatives(f, xi, cfg: NumericConfig = DEFAULT):
    """Gradient and Hessian of an estimand-like object or a plain callable."""
    grad = getattr(f, "grad", None)
    hess = getattr(f, "hessian", None)
    fn = getattr(f, "eval", f)
    df = np.asarray(grad(xi), dtype=float) if grad is not None else _numdiff.gradient(fn, xi, cfg.fd_step)
    H = np.asarray(hess(xi), dtype=float) if hess is not None else _numdiff.hessian(fn, xi, cfg.fd_step2)
    return df, H


def laplacian_from_frame(frame: GeometryFrame, df, H, alpha: float) -> float:
    conn = frame.connection(alpha)
    ginv = frame.metric_inv
    trace = np.einsum("ij,ij->", ginv, H)
    drift = np.einsum("ij,kr,kri,j->", ginv, ginv, conn, df)
    return float(trace - drift)


def alpha_laplacian(model: ParametricModel, xi, f, alpha: float, cfg: NumericConfig = DEFAULT) -> float:
    """g^ij d_i d_j f - g^ij g^kr Gamma^(alpha)_{kr,i} d_j f."""
    frame = frame_at(model, xi, cfg)
    df, H = function_derivatives(f, frame.point, cfg)
    return laplacian_from_frame(frame, df, H, alpha)


def raised_connection_at(model, xi, alpha, cfg=DEFAULT):
    return frame_at(model, xi, cfg).raised_connection(alpha)


def riemann_curvature(model: ParametricModel, xi, alpha: float, cfg: NumericConfig = DEFAULT) -> CurvatureFrame:
    """R^(alpha) from central differences of the raised connection plus the quadratic terms."""
    xi = model.check(xi)
    h = cfg.fd_step_curv
    _stencil_ok(model, xi, h)
    d = xi.size
    frame = frame_at(model, xi, cfg)
    C = frame.raised_connection(alpha)
    # dC[k, s, r, i] = d_k Gamma^s_{ri}
    dC = np.moveaxis(
        _numdiff.jacobian5(lambda p: raised_connection_at(model, p, alpha, cfg), xi, h), -1, 0
    )
    up = np.empty((d, d, d, d))  # up[s, i, k, r] = R^s_{ikr}
    for s in range(d):
        for i in range(d):
            for k in range(d):
                for r in range(d):
                    up[s, i, k, r] = (
                        dC[k, s, r, i]
                        - dC[r, s, k, i]
                        + C[s, k, :] @ C[:, r, i]
                        - C[s, r, :] @ C[:, k, i]
                    )
    riemann = np.einsum("sj,sikr->jikr", frame.metric, up)
    ricci = np.einsum("ikij->jk", up)
    return CurvatureFrame(point=xi, alpha=float(alpha), riemann=riemann, ricci=ricci)


# ---------------------------------------------------------------------------
# identity residuals
# ---------------------------------------------------------------------------


def _scaled(res, *terms) -> float:
    scale = max([1.0] + [float(np.max(np.abs(t))) for t in terms])
    return float(np.max(np.abs(res))) / scale


def duality_residual(model, xi, alpha, cfg=DEFAULT) -> float:
    """d_k g_ij - Gamma^(alpha)_{kj,i} - Gamma^(-alpha)_{ki,j}, scaled."""
    frame = frame_at(model, xi, cfg)
    dg = metric_derivative(model, frame.point, cfg)
    Ga = frame.connection(alpha)
    Gm = frame.connection(-alpha)
    res = dg - np.einsum("kji->kij", Ga) - np.einsum("kij->kij", Gm)
    return _scaled(res, dg, Ga, Gm)


def covariant_residual(model, xi, alpha, cfg=DEFAULT) -> float:
    """d_i g_jk - Gamma_{ik,j} - Gamma_{ij,k} - alpha S_ijk, scaled."""
    frame = frame_at(model, xi, cfg)
    dg = metric_derivative(model, frame.point, cfg)
    G = frame.connection(alpha)
    res = dg - np.einsum("ikj->ijk", G) - G - alpha * frame.skewness
    return _scaled(res, dg, G, frame.skewness)


def levi_civita_residual(model, xi, cfg=DEFAULT) -> float:
    frame = frame_at(model, xi, cfg)
    ref = levi_civita_from_metric(metric_derivative(model, frame.point, cfg))
    G0 = frame.connection(0.0)
    return _scaled(G0 - ref, ref)


def skewness_symmetry_residual(frame: GeometryFrame) -> float:
    S = frame.skewness
    perms = ["ijk->ikj", "ijk->jik", "ijk->jki", "ijk->kij", "ijk->kji"]
    return _scaled(np.max([np.max(np.abs(S - np.einsum(p, S))) for p in perms]), S)


def connection_symmetry_residual(frame: GeometryFrame, alpha) -> float:
    G = frame.connection(alpha)
    return _scaled(G - np.einsum("ijk->jik", G), G)


def antisymmetry_residual(curv: CurvatureFrame) -> float:
    R = curv.riemann
    return _scaled(R + np.einsum("ijkr->ijrk", R), R)


def bianchi_residual(curv: CurvatureFrame) -> float:
    """R_ijkr + R_ikrj + R_irjk."""
    R = curv.riemann
    res = R + np.einsum("ikrj->ijkr", R) + np.einsum("irjk->ijkr", R)
    return _scaled(res, R)


def skewness_derivative(model, xi, cfg=DEFAULT) -> np.ndarray:
    """dS[r, i, j, k] = d_r S_ijk."""
    xi = model.check(xi)
    h = cfg.fd_step if model.closed_geometry is not None else cfg.fd_step_curv
    _stencil_ok(model, xi, h)
    return np.moveaxis(_numdiff.jacobian(lambda p: frame_at(model, p, cfg).skewness, xi, h), -1, 0)


def covariant_skewness_derivative(model, xi, cfg=DEFAULT) -> np.ndarray:
    """nS[r, i, j, k] = nabla^(0)_r S_ijk."""
    frame = frame_at(model, xi, cfg)
    C = frame.raised_connection(0.0)
    S = frame.skewness
    return (
        skewness_derivative(model, xi, cfg)
        - np.einsum("lri,ljk->rijk", C, S)
        - np.einsum("lrj,ilk->rijk", C, S)
        - np.einsum("lrk,ijl->rijk", C, S)
    )


def conjugate_symmetry_residual(model, xi, alpha, cfg=DEFAULT, covariant=True) -> float:
    """R^(alpha)_{ijkr} - R^(-alpha)_{ijkr} - alpha (D_r S_ijk - D_k S_ijr), scaled.

    D is the Levi-Civita covariant derivative; with ``covariant=False`` plain
    coordinate derivatives are used instead, which only agree in charts where
    the Levi-Civita symbols vanish.
    """
    Rp = riemann_curvature(model, xi, alpha, cfg).riemann
    Rm = riemann_curvature(model, xi, -alpha, cfg).riemann
    if covariant:
        dS = covariant_skewness_derivative(model, xi, cfg)
    else:
        dS = skewness_derivative(model, xi, cfg)
    rhs = alpha * (np.einsum("rijk->ijkr", dS) - np.einsum("kijr->ijkr", dS))
    return _scaled(Rp - Rm - rhs, Rp, Rm, rhs)


def check_identities(model: ParametricModel, points, alphas=ALPHAS, cfg: NumericConfig = DEFAULT,
                     curvature: bool = True) -> dict:
    """Maximum scaled residual of every tensor identity over ``points``."""
    out = {
        "duality": 0.0,
        "covariant_derivative": 0.0,
        "levi_civita": 0.0,
        "skewness_symmetry": 0.0,
        "connection_symmetry": 0.0,
    }
    if curvature:
        out.update({"riemann_antisymmetry": 0.0, "bianchi": 0.0, "conjugate_symmetry": 0.0})
    for p in points:
        frame = frame_at(model, p, cfg)
        out["skewness_symmetry"] = max(out["skewness_symmetry"], skewness_symmetry_residual(frame))
        out["levi_civita"] = max(out["levi_civita"], levi_civita_residual(model, p, cfg))
        for a in alphas:
            out["duality"] = max(out["duality"], duality_residual(model, p, a, cfg))
            out["covariant_derivative"] = max(out["covariant_derivative"], covariant_residual(model, p, a, cfg))
            out["connection_symmetry"] = max(out["connection_symmetry"], connection_symmetry_residual(frame, a))
            if curvature:
                curv = riemann_curvature(model, p, a, cfg)
                out["riemann_antisymmetry"] = max(out["riemann_antisymmetry"], antisymmetry_residual(curv))
                out["bianchi"] = max(out["bianchi"], bianchi_residual(curv))
                if a > 0:
                    out["conjugate_symmetry"] = max(
                        out["conjugate_symmetry"], conjugate_symmetry_residual(model, p, a, cfg)
                    )
    return out


def sectional_curvature_2d(curv: CurvatureFrame, frame: Optional[GeometryFrame] = None) -> float:
    """R_{1212} / det g for a two-dimensional model."""
    if frame is None:
        raise ValueError("a frame at the same point is required")
    return float(curv.riemann[0, 1, 0, 1] / np.linalg.det(frame.metric))
