import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from unbiasgeo.manifold import ClosedGeometry, Component, Dataset, ParametricModel

settings.register_profile(
    "unbiasgeo",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("unbiasgeo")


def exponential_model(closed: bool = False) -> ParametricModel:
    """Exponential(rate lam) as a programmatic plug-in, expectations by Gauss-Laguerre."""

    def logpdf(xi, X):
        lam = xi[0]
        return math.log(lam) - lam * np.asarray(X, float)[:, 0]

    def rule(xi, cfg):
        t, w = np.polynomial.laguerre.laggauss(40)
        return (t / xi[0])[:, None], w

    def sample(xi, count, rng):
        return rng.exponential(1.0 / xi[0], size=(count, 1))

    def score(xi, X):
        X = np.asarray(X, float)
        d1 = (1.0 / xi[0] - X[:, 0])[:, None]
        d2 = np.full((X.shape[0], 1, 1), -1.0 / xi[0] ** 2)
        return d1, d2

    geometry = None
    if closed:
        geometry = ClosedGeometry(
            metric=lambda x: np.array([[1.0 / x[0] ** 2]]),
            skewness=lambda x: np.array([[[-2.0 / x[0] ** 3]]]),
        )
    return ParametricModel(
        name="exponential",
        dim=1,
        lower=np.array([0.0]),
        upper=np.array([np.inf]),
        chart_name="rate",
        log_density=lambda xi, x: float(logpdf(np.asarray(xi, float), np.atleast_2d(x))[0]),
        sampler=lambda xi, count, rng: Dataset.from_array(sample(np.asarray(xi, float), count, rng)),
        closed_geometry=geometry,
        components=(Component(1, logpdf, rule, sample, score),),
        reference=np.array([1.0]),
        coordinate_names=("lam",),
    )


@pytest.fixture
def expo():
    return exponential_model()
