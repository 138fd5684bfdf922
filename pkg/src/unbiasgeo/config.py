"""Numerical settings shared by the geometry, prior, geodesic and estimate modules."""

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class NumericConfig:
    # central-difference steps, scaled per coordinate by max(1, |xi_i|)
    fd_step: float = 1e-5
    fd_step2: float = 1e-4
    fd_step_curv: float = 1e-3
    # expectations
    gh_nodes: int = 64
    gh_max_points: int = 2**18
    expectation_samples: int = 200_000
    expectation_seed: int = 20240601
    # adaptive quadrature
    quad_abs: float = 1e-10
    quad_rel: float = 1e-8
    quad_limit: int = 200
    # estimand-path prior
    level_probes: int = 8
    level_tol: float = 1e-4
    # geodesic prior line integral
    skew_nodes: int = 64
    # ODE / shooting
    ode_rtol: float = 1e-10
    ode_atol: float = 1e-12
    shooting_starts: int = 8
    shooting_tol: float = 1e-9
    shooting_max_iter: int = 50
    # optimizer
    grad_tol: float = 1e-10
    max_iter: int = 200
    n_starts: int = 5

    def with_(self, **changes):
        return replace(self, **changes)


DEFAULT = NumericConfig()
