"""Monte Carlo bias harness.

Replicates are grouped in blocks of ``BLOCK`` consecutive indices.  Block
``b`` of cell ``c`` draws from ``SeedSequence([seed, c, b])``, so every
replicate's data is a fixed function of (seed, cell, replicate) whatever the
number of worker threads.  Both estimator arms see the same dataset (common
random numbers) unless ``crn`` is switched off, in which case the MAP arm
draws from ``SeedSequence([seed, c, b, 1])``.

Built-in models have vectorised block samplers and closed-form or batched
Newton estimators for their catalogued priors; anything else goes through
`estimate.mle` / `estimate.map_estimate` replicate by replicate.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .config import DEFAULT, NumericConfig
from .errors import ConfigError, ExperimentError, UnbiasGeoError
from .estimate import map_estimate, mle
from .geometry import frame_at
from .manifold import Dataset, ParametricModel, make_builtin
from .prior import Estimand, LogPrior, constant_prior, make_estimand, make_prior

BLOCK = 1024
FAILURE_BUDGET = 0.01
CSV_COLUMNS = (
    "model", "estimand", "prior", "arm", "param_point", "n",
    "replicates", "failures", "mean_bias", "se", "n_times_bias",
)


@dataclass(frozen=True)
class BiasExperiment:
    model: str
    estimand: str
    param_grid: tuple
    n_grid: tuple
    replicates: int
    seed: int
    prior: str = "uniform"
    model_params: dict = field(default_factory=dict)
    estimand_params: dict = field(default_factory=dict)
    prior_params: dict = field(default_factory=dict)
    chart: Optional[str] = None
    crn: bool = True

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1", "run.replicates")
        n = list(self.n_grid)
        if not n or any(b <= a for a, b in zip(n, n[1:])):
            raise ConfigError("n grid must be non-empty and strictly increasing", "run.n_grid")
        if not self.param_grid:
            raise ConfigError("param grid must be non-empty", "run.param_grid")
        object.__setattr__(self, "param_grid", tuple(tuple(float(v) for v in np.atleast_1d(p)) for p in self.param_grid))
        object.__setattr__(self, "n_grid", tuple(int(v) for v in n))


@dataclass(frozen=True)
class CellResult:
    model: str
    estimand: str
    prior: str
    arm: str
    param_point: tuple
    n: int
    replicates: int
    failures: int
    mean_bias: float
    se: float
    n_times_bias: float

    def row(self) -> list:
        return [
            self.model, self.estimand, self.prior, self.arm,
            " ".join(repr(float(v)) for v in self.param_point), self.n, self.replicates,
            self.failures, repr(self.mean_bias), repr(self.se), repr(self.n_times_bias),
        ]


@dataclass(frozen=True)
class PairedResult:
    """MAP minus MLE per replicate, on replicates where both arms succeeded."""

    param_point: tuple
    n: int
    mean_diff: float
    se_diff: float


@dataclass(frozen=True)
class BiasReport:
    cells: tuple
    paired: tuple = ()
    fits: tuple = ()
    experiment: Optional[dict] = None

    def cell(self, arm: str, param_point, n: int) -> CellResult:
        key = tuple(float(v) for v in np.atleast_1d(param_point))
        for c in self.cells:
            if c.arm == arm and c.n == n and tuple(c.param_point) == key:
                return c
        raise KeyError((arm, key, n))

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "cells": [asdict(c) | {"param_point": list(c.param_point)} for c in self.cells],
            "paired": [asdict(p) | {"param_point": list(p.param_point)} for p in self.paired],
            "fits": [asdict(f) | {"param_point": list(f.param_point)} for f in self.fits],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "BiasReport":
        def cells(key, kind):
            out = []
            for c in obj.get(key, []):
                c = dict(c)
                c["param_point"] = tuple(float(v) for v in c["param_point"])
                if c.get("band") is not None:
                    c["band"] = tuple(c["band"])
                out.append(kind(**c))
            return tuple(out)

        return cls(cells("cells", CellResult), cells("paired", PairedResult), cells("fits", OrderFit), obj.get("experiment"))


@dataclass(frozen=True)
class OrderFit:
    param_point: tuple
    arm: str
    slope: Optional[float]
    slope_se: Optional[float]
    band: Optional[tuple]
    points_used: int
    verdict: str


# ---------------------------------------------------------------------------
# block samplers and fast estimators
# ---------------------------------------------------------------------------


def _block_rng(seed: int, cell: int, block: int, stream: int = 0):
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, cell, block] + ([stream] if stream else [])
    return np.random.default_rng(np.random.SeedSequence(key))


class _Design:
    """Data generation plus optional vectorised estimators for one model at one n."""

    def __init__(self, model: ParametricModel, n: int):
        self.model, self.n = model, n

    def draw(self, xi, rng, count):
        return [self.model.sampler(xi, self.n, rng) for _ in range(count)]

    def dataset(self, block, j) -> Dataset:
        return block[j]

    def fast(self, block, prior_name, prior_params, arm):
        return None


class _EfronMorrisDesign(_Design):
    def draw(self, xi, rng, count):
        v = 1.0 + xi[0] if self.model.chart_name == "variance" else -0.5 / xi[0]
        return rng.normal(0.0, math.sqrt(v), size=(count, self.n))

    def dataset(self, block, j):
        return Dataset.from_array(block[j][:, None])

    def fast(self, block, prior_name, prior_params, arm):
        S = np.einsum("ij,ij->i", block, block)
        if arm == "mle" or prior_name in ("uniform", "constant"):
            dof = self.n
        elif prior_name == "log1p_var":
            dof = self.n - 2
        else:
            return None
        if dof <= 0:
            return np.full((S.size, 1), np.nan), np.zeros(S.size, bool)
        v = S / dof
        est = (v - 1.0) if self.model.chart_name == "variance" else (-0.5 / v)
        return est[:, None], np.isfinite(est)


class _MvnDesign(_Design):
    def draw(self, xi, rng, count):
        d = self.model.dim
        return xi + rng.standard_normal((count, self.n, d))

    def dataset(self, block, j):
        return Dataset.from_array(block[j])

    def fast(self, block, prior_name, prior_params, arm):
        xbar = block.mean(axis=1)
        if arm == "mle" or prior_name in ("uniform", "constant"):
            return xbar, np.ones(xbar.shape[0], bool)
        if prior_name != "norm_power":
            return None
        c = np.asarray(prior_params.get("center", np.zeros(self.model.dim)), dtype=float)
        p = float(prior_params.get("power", -0.5))
        y = xbar - c
        ry = np.linalg.norm(y, axis=1)
        disc = ry * ry + 4.0 * p / self.n
        ok = (disc >= 0) & (ry > 0)
        # local posterior maximum on the ray through xbar: larger root of n rho^2 - n|y| rho - p = 0
        rho = 0.5 * (ry + np.sqrt(np.where(ok, disc, 0.0)))
        ok &= rho > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            est = c + y * (rho / ry)[:, None]
        return est, ok


class _LmeDesign(_Design):
    def __init__(self, model, n):
        super().__init__(model, n)
        self.sizes = np.asarray(model.params["m"], dtype=int)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])

    def draw(self, xi, rng, count):
        a, d = xi
        z = math.sqrt(a) * rng.standard_normal((count, self.sizes.size))
        e = math.sqrt(d) * rng.standard_normal((count, int(self.offsets[-1])))
        return z, e

    def dataset(self, block, j):
        z, e = block
        return Dataset(tuple(z[j, i] + e[j, self.offsets[i]:self.offsets[i + 1]] for i in range(self.sizes.size)))

    def stats(self, block):
        z, e = block
        means = np.empty(z.shape)
        within = np.empty(z.shape)
        for i in range(self.sizes.size):
            seg = e[:, self.offsets[i]:self.offsets[i + 1]]
            mu = seg.mean(axis=1)
            means[:, i] = z[:, i] + mu
            within[:, i] = np.sum((seg - mu[:, None]) ** 2, axis=1)
        return means, within

    def fast(self, block, prior_name, prior_params, arm):
        if arm == "mle" or prior_name in ("uniform", "constant"):
            prior = None
        elif prior_name in ("lme_unit_pr1", "lme_unit_pr2"):
            i = int(prior_params.get("unit", 0))
            mi = float(self.sizes[i])
            k = self.sizes.size / float(self.sizes.sum()) - 1.0
            prior = (prior_name, mi, k)
        else:
            return None
        means, within = self.stats(block)
        return lme_batch_newton(self.sizes, means, within, prior)


def _lme_objective(x, sizes, means, within, prior):
    a, d = x[:, :1], x[:, 1:]
    v = d / sizes + a
    val = np.sum(-0.5 * ((sizes - 1) * np.log(d) + np.log(v)) - within / (2 * d) - means**2 / (2 * v), axis=1)
    if prior is not None:
        name, mi, k = prior
        u = x[:, 1] / mi + x[:, 0]
        val = val + (np.log(u) if name == "lme_unit_pr1" else k * (np.log(x[:, 1] / mi) - np.log(u)))
    return val


def _lme_derivatives(x, sizes, means, within, prior):
    a, d = x[:, :1], x[:, 1:]
    v = d / sizes + a
    y2 = means**2
    g = np.stack([
        np.sum(-0.5 / v + y2 / (2 * v**2), axis=1),
        np.sum(-0.5 * (sizes - 1) / d - 0.5 / (sizes * v) + within / (2 * d**2) + y2 / (2 * sizes * v**2), axis=1),
    ], axis=1)
    haa = np.sum(0.5 / v**2 - y2 / v**3, axis=1)
    had = np.sum((0.5 / v**2 - y2 / v**3) / sizes, axis=1)
    hdd = np.sum((sizes - 1) / (2 * d**2) + (0.5 / v**2 - y2 / v**3) / sizes**2 - within / d**3, axis=1)
    if prior is not None:
        name, mi, k = prior
        u = x[:, 1] / mi + x[:, 0]
        if name == "lme_unit_pr1":
            g[:, 0] += 1 / u
            g[:, 1] += 1 / (mi * u)
            haa -= 1 / u**2
            had -= 1 / (mi * u**2)
            hdd -= 1 / (mi * mi * u**2)
        else:
            g[:, 0] += -k / u
            g[:, 1] += k * (1 / x[:, 1] - 1 / (mi * u))
            haa += k / u**2
            had += k / (mi * u**2)
            hdd += k * (-1 / x[:, 1] ** 2 + 1 / (mi * mi * u**2))
    return g, haa, had, hdd


def lme_batch_newton(sizes, means, within, prior=None, max_iter=100, tol=1e-10):
    """Damped Newton for many LME datasets at once.

    Args:
        sizes: unit sizes (n,).
        means, within: per-replicate unit means and within sums of squares (B, n).
        prior: None or (name, m_i, exponent) for the unit priors.

    Returns:
        estimates (B, 2) and a success mask (B,).
    """
    sizes = np.asarray(sizes, dtype=float)
    B = means.shape[0]
    dof = np.sum(sizes - 1)
    d0 = np.maximum(np.sum(within, axis=1) / max(dof, 1), 1e-6)
    a0 = np.maximum(np.mean(means**2, axis=1) - np.mean(d0[:, None] / sizes, axis=1), 0.1 * d0)
    x = np.stack([a0, d0], axis=1)
    f = _lme_objective(x, sizes, means, within, prior)
    active = np.ones(B, bool)
    ok = np.zeros(B, bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa = x[idx]
        g, haa, had, hdd = _lme_derivatives(xa, sizes, means[idx], within[idx], prior)
        scale = np.maximum(1.0, np.abs(f[idx]))
        done = np.max(np.abs(g), axis=1) <= tol * scale
        ok[idx[done]] = True
        active[idx[done]] = False
        keep = ~done
        idx, xa, g, haa, had, hdd = idx[keep], xa[keep], g[keep], haa[keep], had[keep], hdd[keep]
        if idx.size == 0:
            break
        det = haa * hdd - had * had
        negdef = (haa < 0) & (det > 0)
        step = np.empty_like(xa)
        step[:, 0] = np.where(negdef, -(hdd * g[:, 0] - had * g[:, 1]) / np.where(negdef, det, 1.0), 0.0)
        step[:, 1] = np.where(negdef, -(-had * g[:, 0] + haa * g[:, 1]) / np.where(negdef, det, 1.0), 0.0)
        diag = np.maximum(np.maximum(np.abs(haa), np.abs(hdd)), 1.0)
        step[~negdef] = g[~negdef] / diag[~negdef, None]
        # Newton decrement below the objective's rounding floor: stationary
        floor = negdef & (0.5 * np.sum(g * step, axis=1) <= 1e-13 * np.maximum(1.0, np.abs(f[idx])))
        if floor.any():
            x[idx[floor]] = xa[floor] + step[floor]
            ok[idx[floor]] = True
            active[idx[floor]] = False
            keep = ~floor
            idx, xa, g, step, haa, hdd, had = idx[keep], xa[keep], g[keep], step[keep], haa[keep], hdd[keep], had[keep]
            if idx.size == 0:
                break
        t = np.ones(idx.size)
        for _ in range(60):
            bad = np.any(xa + t[:, None] * step <= 0, axis=1)
            if not bad.any():
                break
            t[bad] *= 0.5
        fa = f[idx]
        slope = np.sum(g * step, axis=1)
        accepted = np.zeros(idx.size, bool)
        xn = xa.copy()
        fn = fa.copy()
        for _ in range(60):
            trial = xa + t[:, None] * step
            pending = ~accepted
            if not pending.any():
                break
            pos = np.all(trial > 0, axis=1)
            ft = np.full(idx.size, -np.inf)
            sel = pending & pos
            if sel.any():
                ft[sel] = _lme_objective(trial[sel], sizes, means[idx[sel]], within[idx[sel]], prior)
            good = pending & np.isfinite(ft) & (ft >= fa + 1e-4 * t * slope)
            xn[good], fn[good] = trial[good], ft[good]
            accepted |= good
            t[pending & ~good] *= 0.5
        tiny = np.max(np.abs(step), axis=1) <= 1e-12 * np.maximum(1.0, np.max(np.abs(xa), axis=1))
        conv = ~accepted & tiny
        ok[idx[conv]] = True
        active[idx[~accepted]] = False
        x[idx[accepted]] = xn[accepted]
        f[idx[accepted]] = fn[accepted]
        near = np.min(x[idx], axis=1) <= 1e-8
        active[idx[near]] = False
    return x, ok


def _design(model: ParametricModel, n: int) -> _Design:
    if model.name == "efron_morris":
        return _EfronMorrisDesign(model, n)
    if model.name == "mvn_known_cov":
        return _MvnDesign(model, n)
    if model.name == "nested_error_lme":
        return _LmeDesign(model, n)
    return _Design(model, n)


def model_for_n(name: str, params: dict, n: int, chart=None) -> ParametricModel:
    """Built-in model for a sample of size n (sets n for efron_morris and the unit count for the LME)."""
    params = dict(params)
    if name == "efron_morris":
        params["n"] = n
    elif name == "nested_error_lme":
        if "m_pattern" in params:
            params["n_units"] = n
        elif "m" in params:
            pattern = list(params.pop("m"))
            params["m"] = [pattern[i % len(pattern)] for i in range(n)]
        else:
            raise ConfigError("nested_error_lme needs m or m_pattern", "model.params")
    return make_builtin(name, params, chart)


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def _arm_values(design, block, count, arm, prior, prior_name, prior_params, estimand, cfg, use_fast):
    fast = design.fast(block, prior_name, prior_params, arm) if use_fast else None
    if fast is not None:
        est, ok = fast
        vals = np.full(count, np.nan)
        if ok.any():
            vals[ok] = estimand.eval_many(est[ok])
        return vals, ok
    vals = np.full(count, np.nan)
    ok = np.zeros(count, bool)
    for j in range(count):
        data = design.dataset(block, j)
        try:
            res = mle(design.model, data, cfg) if arm == "mle" else map_estimate(design.model, prior, data, cfg)
            vals[j] = estimand.eval(res.estimate)
            ok[j] = True
        except UnbiasGeoError:
            pass
    return vals, ok


def _threads(threads):
    if threads is None:
        env = os.environ.get("UNBIASGEO_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def _fsum_stats(x):
    """Mean and standard error with compensated sums (order independent)."""
    m = x.size
    if m == 0:
        return math.nan, math.nan
    mean = math.fsum(x) / m
    if m < 2:
        return mean, math.nan
    var = math.fsum((x - mean) ** 2) / (m - 1)
    return mean, math.sqrt(var / m)


def run_bias(exp: BiasExperiment, cfg: NumericConfig = DEFAULT, threads=None, use_fast: bool = True,
             arms: Sequence[str] = ("mle", "map")) -> BiasReport:
    """Bias of f(MLE) and f(MAP) on every (param point, n) cell.

    Raises:
        ExperimentError: more than 1% of the replicates of an arm failed in some cell.
        ConfigError: unknown model, estimand or prior ids.
    """
    workers = _threads(threads)
    cells, paired = [], []
    cell_index = 0
    for point in exp.param_grid:
        for n in exp.n_grid:
            model = model_for_n(exp.model, exp.model_params, n, exp.chart)
            xi = model.check(point)
            estimand = make_estimand(model, exp.estimand, exp.estimand_params)
            prior = constant_prior() if exp.prior in ("uniform", "constant") else make_prior(model, exp.prior, exp.prior_params, cfg)
            truth = estimand.eval(xi)
            design = _design(model, n)
            nblocks = -(-exp.replicates // BLOCK)

            def work(b, cell=cell_index):
                count = min(BLOCK, exp.replicates - b * BLOCK)
                block = design.draw(xi, _block_rng(exp.seed, cell, b), count)
                out = {}
                for arm in arms:
                    blk = block
                    if arm == "map" and not exp.crn:
                        blk = design.draw(xi, _block_rng(exp.seed, cell, b, 1), count)
                    out[arm] = _arm_values(design, blk, count, arm, prior, exp.prior, exp.prior_params, estimand, cfg, use_fast)
                return out

            if workers > 1 and nblocks > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(work, range(nblocks)))
            else:
                results = [work(b) for b in range(nblocks)]
            per_arm = {}
            for arm in arms:
                vals = np.concatenate([r[arm][0] for r in results])
                ok = np.concatenate([r[arm][1] for r in results])
                per_arm[arm] = (vals, ok)
                failures = int(np.sum(~ok))
                if failures > FAILURE_BUDGET * exp.replicates:
                    raise ExperimentError(
                        f"{arm} arm: {failures} of {exp.replicates} replicates failed at {list(point)}, n={n}"
                    )
                mean, se = _fsum_stats(vals[ok] - truth)
                cells.append(CellResult(exp.model, exp.estimand, exp.prior if arm == "map" else "uniform", arm,
                                        tuple(point), n, exp.replicates, failures, mean, se, n * mean))
            if "mle" in per_arm and "map" in per_arm:
                both = per_arm["mle"][1] & per_arm["map"][1]
                md, sd = _fsum_stats(per_arm["map"][0][both] - per_arm["mle"][0][both])
                paired.append(PairedResult(tuple(point), n, md, sd))
            cell_index += 1
    report = BiasReport(tuple(cells), tuple(paired), (), experiment_to_dict(exp))
    return BiasReport(report.cells, report.paired, tuple(fit_bias_order(report)), report.experiment)


def fit_bias_order(report: BiasReport) -> list:
    """Log-log slope of |bias| against n per (param point, arm) and the MAP verdict.

    Cells with SE >= |bias|/2 are treated as noise and left out of the slope.
    The MAP arm is "second-order unbiased" when |n bias| at the largest n is
    at most max(3 SE n, 0.1 |n bias| of the MLE arm there).
    """
    out = []
    points = sorted({c.param_point for c in report.cells})
    for point in points:
        by_arm = {}
        for c in report.cells:
            if c.param_point == point:
                by_arm.setdefault(c.arm, []).append(c)
        fits = {}
        for arm, cs in by_arm.items():
            cs = sorted(cs, key=lambda c: c.n)
            use = [c for c in cs if np.isfinite(c.se) and c.mean_bias != 0 and c.se < abs(c.mean_bias) / 2]
            slope = slope_se = band = None
            if len(use) >= 3:
                X = np.log([c.n for c in use])
                Y = np.log([abs(c.mean_bias) for c in use])
                W = np.array([(c.mean_bias / c.se) ** 2 if c.se > 0 else 1e30 for c in use])
                A = np.stack([np.ones_like(X), X], axis=1)
                AtW = A.T * W
                cov = np.linalg.inv(AtW @ A)
                beta = cov @ (AtW @ Y)
                slope = float(beta[1])
                resid = Y - A @ beta
                dof = len(use) - 2
                s2 = float(np.sum(W * resid**2) / dof) if dof > 0 else 0.0
                slope_se = float(math.sqrt(cov[1, 1] * max(s2, 1.0)))
                band = (slope - 1.96 * slope_se, slope + 1.96 * slope_se)
            fits[arm] = (cs, use, slope, slope_se, band)
        for arm, (cs, use, slope, slope_se, band) in fits.items():
            if len(cs) < 2 or slope is None:
                verdict = "insufficient"
            else:
                verdict = "first-order" if slope > -1.5 else "higher-order"
            if arm == "map" and "mle" in fits:
                top = cs[-1]
                mle_top = fits["mle"][0][-1]
                all_noise = not fits["mle"][1] and not use
                if all_noise:
                    verdict = "inconclusive"
                elif np.isfinite(top.se):
                    limit = max(3.0 * top.se * top.n, 0.1 * abs(mle_top.n_times_bias))
                    verdict = "second-order unbiased" if abs(top.n_times_bias) <= limit else "first-order bias"
            out.append(OrderFit(point, arm, slope, slope_se, band, len(use), verdict))
    return out


# ---------------------------------------------------------------------------
# moment check
# ---------------------------------------------------------------------------


def predicted_moments(model: ParametricModel, prior: LogPrior, xi, n: int, cfg: NumericConfig = DEFAULT):
    """First moment g^ij(d_j l~ - (1/2) g^kr Gamma^(-1)_{kr,j}) and covariance g^ij with the sample information."""
    frame = frame_at(model, xi, cfg)
    scale = model.information_scale(n)
    ginv = frame.metric_inv / scale
    G = frame.connection(-1.0) * scale
    contracted = np.einsum("kr,krj->j", ginv, G)
    mean = ginv @ (prior.grad(frame.point) - 0.5 * contracted)
    return mean, ginv


@dataclass(frozen=True)
class MomentRecord:
    model: str
    prior: str
    param_point: tuple
    n: int
    replicates: int
    failures: int
    mean: tuple
    mean_se: tuple
    mean_pred: tuple
    cov: tuple
    cov_se: tuple
    cov_pred: tuple

    def mean_z(self) -> np.ndarray:
        return (np.array(self.mean) - np.array(self.mean_pred)) / np.array(self.mean_se)

    def cov_z(self) -> np.ndarray:
        return (np.array(self.cov) - np.array(self.cov_pred)) / np.array(self.cov_se)

    def to_dict(self) -> dict:
        return asdict(self)


def moment_check(model_name: str, prior_name: str, xi_true, n: int, replicates: int, seed: int,
                 model_params=None, prior_params=None, chart=None, cfg: NumericConfig = DEFAULT,
                 use_fast: bool = True) -> MomentRecord:
    """Monte Carlo first and second centred moments of the estimate against their expansions."""
    model = model_for_n(model_name, dict(model_params or {}), n, chart)
    xi = model.check(xi_true)
    prior_params = dict(prior_params or {})
    prior = constant_prior() if prior_name in ("uniform", "constant") else make_prior(model, prior_name, prior_params, cfg)
    arm = "mle" if prior_name in ("uniform", "constant") else "map"
    design = _design(model, n)
    errs, oks = [], []
    for b in range(-(-replicates // BLOCK)):
        count = min(BLOCK, replicates - b * BLOCK)
        block = design.draw(xi, _block_rng(seed, 0, b), count)
        fast = design.fast(block, prior_name, prior_params, arm) if use_fast else None
        if fast is None:
            est = np.full((count, model.dim), np.nan)
            ok = np.zeros(count, bool)
            for j in range(count):
                try:
                    res = mle(model, design.dataset(block, j), cfg) if arm == "mle" else map_estimate(model, prior, design.dataset(block, j), cfg)
                    est[j], ok[j] = res.estimate, True
                except UnbiasGeoError:
                    pass
        else:
            est, ok = fast
        errs.append(est - xi)
        oks.append(ok)
    E = np.concatenate(errs)
    ok = np.concatenate(oks)
    failures = int(np.sum(~ok))
    if failures > FAILURE_BUDGET * replicates:
        raise ExperimentError(f"{failures} of {replicates} replicates failed")
    E = E[ok]
    m = E.shape[0]
    d = model.dim
    mean = np.array([math.fsum(E[:, i]) / m for i in range(d)])
    mean_se = np.array([math.sqrt(math.fsum((E[:, i] - mean[i]) ** 2) / (m - 1) / m) for i in range(d)])
    C = E - mean
    cov = np.empty((d, d))
    cov_se = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            prod = C[:, i] * C[:, j]
            cov[i, j] = math.fsum(prod) / (m - 1)
            cov_se[i, j] = math.sqrt(math.fsum((prod - cov[i, j]) ** 2) / (m - 1) / m)
    mean_pred, cov_pred = predicted_moments(model, prior, xi, n, cfg)
    return MomentRecord(
        model_name, prior_name, tuple(float(v) for v in xi), n, replicates, failures,
        tuple(mean.tolist()), tuple(mean_se.tolist()), tuple(mean_pred.tolist()),
        tuple(map(tuple, cov.tolist())), tuple(map(tuple, cov_se.tolist())), tuple(map(tuple, cov_pred.tolist())),
    )


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def experiment_to_dict(exp: BiasExperiment) -> dict:
    d = asdict(exp)
    d["param_grid"] = [list(p) for p in exp.param_grid]
    d["n_grid"] = list(exp.n_grid)
    return d


def experiment_from_dict(obj: dict) -> BiasExperiment:
    known = set(BiasExperiment.__dataclass_fields__)
    extra = set(obj) - known
    if extra:
        raise ConfigError(f"unknown experiment fields {sorted(extra)}", sorted(extra)[0])
    try:
        return BiasExperiment(**obj)
    except TypeError as exc:
        raise ConfigError(str(exc), "experiment") from None


def report_csv_rows(report: BiasReport) -> list:
    return [list(CSV_COLUMNS)] + [c.row() for c in report.cells]


def report_json(report: BiasReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)


def synthetic_report(ns: Sequence[int], bias: Callable, se: Callable, arm: str = "mle", point=(0.0,)) -> BiasReport:
    """Report with prescribed bias(n) and se(n), for testing the order fit."""
    cells = tuple(
        CellResult("synthetic", "f", "uniform", arm, tuple(point), int(n), 1000, 0, float(bias(n)), float(se(n)), n * float(bias(n)))
        for n in ns
    )
    return BiasReport(cells)
