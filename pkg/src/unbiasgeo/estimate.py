"""Maximum-likelihood and MAP point estimates by multi-start damped Newton."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _numdiff
from .config import DEFAULT, NumericConfig
from .errors import BoundaryError, DomainError, PreconditionError, SolverError
from .manifold import Dataset, ParametricModel, log_likelihood, log_likelihood_gradient, lme_sufficient
from .prior import LogPrior, constant_prior


@dataclass(frozen=True)
class Candidate:
    start: tuple
    estimate: tuple
    objective: float
    grad_norm: float
    iterations: int
    status: str


@dataclass(frozen=True)
class EstimateResult:
    estimate: np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    candidates: tuple = field(default_factory=tuple)
    status: str = "converged"
    method: str = "mle"
    prior: str = "uniform"

    def to_dict(self) -> dict:
        return {
            "estimate": [float(v) for v in self.estimate],
            "objective": float(self.objective),
            "grad_norm": float(self.grad_norm),
            "iterations": int(self.iterations),
            "status": self.status,
            "method": self.method,
            "prior": self.prior,
            "candidates": [
                {
                    "start": list(c.start),
                    "estimate": list(c.estimate),
                    "objective": c.objective,
                    "grad_norm": c.grad_norm,
                    "iterations": c.iterations,
                    "status": c.status,
                }
                for c in self.candidates
            ],
        }


# ---------------------------------------------------------------------------
# starting points
# ---------------------------------------------------------------------------


def moment_start(model: ParametricModel, data: Dataset) -> np.ndarray:
    """Method-of-moments seed for the built-ins, the reference point otherwise."""
    name = model.name
    seed = None
    if name == "efron_morris":
        x = data.stacked()[:, 0]
        v = float(np.mean(x * x))
        seed = np.array([-0.5 / v]) if model.chart_name == "natural" else np.array([v - 1.0])
    elif name == "mvn_known_cov":
        seed = data.stacked().mean(axis=0)
    elif name == "location_scale_normal":
        x = data.stacked()[:, 0]
        seed = np.array([x.mean(), math.sqrt(2.0 * max(x.var(), 1e-12))])
    elif name == "nested_error_lme":
        sizes, means, within = lme_sufficient(data)
        dof = np.sum(sizes - 1)
        d = float(np.sum(within) / dof) if dof > 0 else 1.0
        d = max(d, 1e-6)
        a = float(np.mean(means**2) - np.mean(d / sizes))
        seed = np.array([max(a, 0.1 * d), d])
    if seed is None or not model.contains(seed):
        if model.reference is None:
            raise PreconditionError(f"{model.name}: no starting point available")
        seed = np.asarray(model.reference, dtype=float)
    return seed


def default_starts(model: ParametricModel, data: Dataset, count: int) -> list:
    """Moment seed plus count-1 deterministic perturbations kept inside the domain."""
    seed = moment_start(model, data)
    starts = [seed]
    d = model.dim
    for k in range(1, count):
        angle = 2.0 * math.pi * (k - 1) / max(count - 1, 1)
        u = np.array([math.cos(angle + j * math.pi / 2.0 / max(d, 1)) for j in range(d)])
        scale = 0.1 * np.maximum(1.0, np.abs(seed))
        cand = seed + scale * u
        for _ in range(40):
            if model.contains(cand):
                break
            cand = seed + 0.5 * (cand - seed)
        starts.append(cand)
    return starts


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def _objective(model, data, prior):
    def obj(x):
        if not model.contains(x):
            return -math.inf
        try:
            val = log_likelihood(model, x, data) + prior.eval(x)
        except DomainError:
            return -math.inf
        return val if np.isfinite(val) else -math.inf

    return obj


def _derivatives(model, data, prior, obj, cfg):
    """Gradient and Hessian callables: analytic score when available, else differences of obj."""
    if model.loglik_grad is None:
        return (lambda x: _numdiff.gradient(obj, x, cfg.fd_step)), (lambda x: _numdiff.hessian(obj, x, cfg.fd_step2))

    def grad(x):
        if not model.contains(x):
            return np.full(model.dim, np.nan)
        try:
            return log_likelihood_gradient(model, x, data) + prior.grad(x)
        except DomainError:
            return np.full(model.dim, np.nan)

    def hess(x):
        H = _numdiff.jacobian(grad, x, cfg.fd_step)
        return 0.5 * (H + H.T)

    return grad, hess


def _boundary_gap(model, x):
    lo = x - model.lower
    hi = model.upper - x
    gap = np.minimum(lo, hi)
    k = int(np.argmin(gap))
    return float(gap[k]), k


def _outward(model, x, g):
    """Index of a nearby box face the ascent direction pushes into, else None."""
    scale = 1e-4 * np.maximum(1.0, np.abs(x))
    for k in range(model.dim):
        if x[k] - model.lower[k] <= scale[k] and g[k] < 0:
            return k
        if model.upper[k] - x[k] <= scale[k] and g[k] > 0:
            return k
    return None


def _polish(obj, grad, hess, model, x, f, gnorm, it):
    """One extra Newton step once the gradient test passes, kept if it does not lose objective."""
    try:
        H = hess(x)
        np.linalg.cholesky(-H)
        xn = x - np.linalg.solve(H, grad(x))
    except np.linalg.LinAlgError:
        return x, f, gnorm, it, "converged"
    if model.contains(xn):
        fn = obj(xn)
        if np.isfinite(fn) and fn >= f - 1e-15 * max(1.0, abs(f)):
            gn = grad(xn)
            if np.all(np.isfinite(gn)):
                return xn, fn, float(np.max(np.abs(gn))), it, "converged"
    return x, f, gnorm, it, "converged"


def _newton(obj, grad, hess, model, x0, cfg: NumericConfig):
    x = np.array(x0, dtype=float)
    f = obj(x)
    if not np.isfinite(f):
        return x, f, math.inf, 0, "bad-start"
    gnorm = math.inf
    for it in range(1, cfg.max_iter + 1):
        g = grad(x)
        if not np.all(np.isfinite(g)):
            # stencil left the domain: the iterate sits at the boundary
            gap, k = _boundary_gap(model, x)
            return x, f, math.inf, it, f"boundary:{k}"
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= cfg.grad_tol * max(1.0, abs(f)):
            return _polish(obj, grad, hess, model, x, f, gnorm, it)
        H = hess(x)
        newton = True
        try:
            np.linalg.cholesky(-H)
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            newton = False
            step = g / max(float(np.max(np.abs(np.diag(H)))), 1.0)
        if newton and 0.5 * float(g @ step) <= 1e-13 * max(1.0, abs(f)) and model.contains(x + step):
            # Newton decrement below the objective's rounding floor
            x = x + step
            return x, obj(x), gnorm, it, "converged"
        # shorten to stay strictly interior
        t = 1.0
        for _ in range(60):
            if model.contains(x + t * step):
                break
            t *= 0.5
        slope = float(g @ step)
        accepted = False
        for _ in range(60):
            xn = x + t * step
            fn = obj(xn)
            if np.isfinite(fn) and fn >= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if np.max(np.abs(step)) <= 1e-10 * max(1.0, float(np.max(np.abs(x)))):
                return x, f, gnorm, it, "converged"
            k = _outward(model, x, g)
            return x, f, gnorm, it, "line-search-failed" if k is None else f"boundary:{k}"
        dx = xn - x
        x, f = xn, fn
        gap, k = _boundary_gap(model, x)
        if gap <= 1e-10 * max(1.0, float(np.max(np.abs(x)))):
            return x, f, gnorm, it, f"boundary:{k}"
        if newton and t == 1.0 and np.max(np.abs(dx)) <= 1e-13 * max(1.0, float(np.max(np.abs(x)))):
            # FD gradient noise floor reached with full Newton steps
            gnorm = float(np.max(np.abs(grad(x))))
            return x, f, gnorm, it, "converged"
    g = grad(x)
    k = _outward(model, x, g) if np.all(np.isfinite(g)) else None
    return x, f, gnorm, cfg.max_iter, "max-iter" if k is None else f"boundary:{k}"


def _select(candidates: Sequence[Candidate]) -> Candidate:
    ok = [c for c in candidates if c.status == "converged"]
    if not ok:
        return None
    best = max(c.objective for c in ok)
    tol = 1e-12 * max(1.0, abs(best))
    tied = [c for c in ok if c.objective >= best - tol]
    return min(tied, key=lambda c: (float(np.linalg.norm(c.estimate)), c.estimate))


def _maximize(model, data, prior, cfg, starts, method):
    if data.n == 0:
        raise PreconditionError("empty dataset")
    obj = _objective(model, data, prior)
    grad, hess = _derivatives(model, data, prior, obj, cfg)
    if starts is None:
        starts = default_starts(model, data, cfg.n_starts)
    cands = []
    for s in starts:
        s = np.asarray(s, dtype=float)
        x, f, gnorm, it, status = _newton(obj, grad, hess, model, s, cfg)
        cands.append(Candidate(tuple(map_float(s)), tuple(map_float(x)), float(f), float(gnorm), it, status))
    best = _select(cands)
    if best is None:
        bnd = [c for c in cands if c.status.startswith("boundary:")]
        if bnd:
            k = int(bnd[0].status.split(":")[1])
            raise BoundaryError(
                f"{method}: iterates reach the boundary of coordinate {k} ({model.coordinate_names[k] if model.coordinate_names else k})",
                coordinate=k,
            )
        raise SolverError(f"{method}: no start converged ({', '.join(c.status for c in cands)})")
    return EstimateResult(
        estimate=np.array(best.estimate),
        objective=best.objective,
        grad_norm=best.grad_norm,
        iterations=best.iterations,
        candidates=tuple(cands),
        status=best.status,
        method=method,
        prior=prior.label,
    )


def map_float(x):
    return [float(v) for v in x]


def mle(model: ParametricModel, data: Dataset, cfg: NumericConfig = DEFAULT, starts=None) -> EstimateResult:
    """Maximise l(xi; data)."""
    return _maximize(model, data, constant_prior(), cfg, starts, "mle")


def map_estimate(model: ParametricModel, prior: Optional[LogPrior], data: Dataset, cfg: NumericConfig = DEFAULT,
                 starts=None) -> EstimateResult:
    """Maximise l(xi; data) + l~(xi); the global maximiser among the candidates is returned.

    Equal objectives (relative 1e-12) are broken by the smallest parameter norm.
    """
    prior = constant_prior() if prior is None else prior
    return _maximize(model, data, prior, cfg, starts, "map")
