"""Synthetic data with known conditional quantiles, and a Monte Carlo runner."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from .core import ExtremeQuantileWarning, SolverOptions, fit_quantile
from .data import CATEGORICAL, CONTINUOUS, Dataset, GdpSeries, decadal_growth
from .errors import NumericalError, ToolkitError
from .inference import METHODS, SANDWICH, quantile_covariance

AGES = (0, 6, 12, 18)


def derived_seed(seed: int, index: int) -> int:
    """Seed for replication ``index`` of a study seeded with ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


@dataclass(frozen=True)
class LocationScaleDgp:
    """``y = a + b x + (s0 + s1 x) e`` with ``x ~ U[0, 2]`` and ``e ~ N(0, 1)``."""

    n: int = 1000
    a: float = 1.0
    b: float = 1.0
    s0: float = 1.0
    s1: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if min(self.s0, self.s0 + 2 * self.s1) <= 0:
            raise ValueError("scale s0 + s1*x must be positive on [0, 2]")


def gen_location_scale(dgp: LocationScaleDgp) -> Dataset:
    rng = np.random.default_rng(dgp.seed)
    x = rng.uniform(0.0, 2.0, dgp.n)
    e = rng.standard_normal(dgp.n)
    y = dgp.a + dgp.b * x + (dgp.s0 + dgp.s1 * x) * e
    return Dataset.from_arrays({"x": x, "y": y}, {"x": CONTINUOUS, "y": CONTINUOUS})


def analytic_slope(dgp: LocationScaleDgp, tau: float) -> float:
    """Slope of the tau-th conditional quantile, ``b + s1 * Phi^-1(tau)``."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return dgp.b + dgp.s1 * float(ndtri(tau))


def analytic_intercept(dgp: LocationScaleDgp, tau: float) -> float:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return dgp.a + dgp.s0 * float(ndtri(tau))


@dataclass(frozen=True)
class HeightPanelDgp:
    """Individuals nested in province x birth-decade cells.

    Heights are ``mu_p + lambda_t + noise * Phi^-1(U) + sum_k beta_k(U) G_k``
    with ``U ~ U(0, 1)`` and ``beta_k`` linear in the quantile level, running
    from ``profiles[k][0]`` at 0 to ``profiles[k][1]`` at 1.  ``G_k`` is the
    decadal GDP growth of the birth province in the decade the individual
    reached age 0, 6, 12 and 18.  Growth is kept inside
    ``[-max_growth, max_growth]`` and the profiles must be flat enough that
    the conditional quantile function stays increasing; the tau-th
    conditional quantile is then exactly linear with coefficients
    ``beta_k(tau)``.
    """

    provinces: int = 10
    decades: int = 6
    cohort_size: int = 100
    first_decade: int = 1890
    profiles: tuple = ((-4.0, 4.0), (40.0, 0.0), (10.0, 0.0), (4.0, 4.0))
    noise: float = 6.5
    max_growth: float = 0.2
    mean_height: float = 165.0
    province_sd: float = 2.0
    decade_trend: float = 0.5
    province_effects: tuple | None = None
    decade_effects: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.provinces < 1 or self.decades < 1 or self.cohort_size < 1:
            raise ValueError("every province x decade cell needs at least one individual")
        if len(self.profiles) != len(AGES):
            raise ValueError(f"need {len(AGES)} coefficient profiles")
        tilt = sum(abs(hi - lo) for lo, hi in self.profiles) * self.max_growth
        if self.noise > 0 and tilt >= self.noise * math.sqrt(2 * math.pi):
            raise ValueError("coefficient profiles too steep for the noise level")
        if self.noise == 0 and tilt > 0:
            raise ValueError("tau-varying coefficients need positive noise")
        if self.province_effects is not None and len(self.province_effects) != self.provinces:
            raise ValueError("province_effects must have one entry per province")
        if self.decade_effects is not None and len(self.decade_effects) != self.decades:
            raise ValueError("decade_effects must have one entry per decade")

    def beta(self, tau) -> np.ndarray:
        """True growth coefficients at quantile level(s) ``tau``."""
        tau = np.asarray(tau, dtype=float)
        return np.stack([lo + (hi - lo) * tau for lo, hi in self.profiles], axis=-1)

    @property
    def decade_labels(self) -> list[str]:
        return [str(self.first_decade + 10 * t) for t in range(self.decades)]

    @property
    def province_labels(self) -> list[str]:
        width = len(str(self.provinces))
        return [f"P{p + 1:0{width}d}" for p in range(self.provinces)]


def _gdp_paths(dgp, rng):
    n_growth = dgp.decades + 2  # age 18 reaches up to two decades past birth
    series = []
    for label in dgp.province_labels:
        g = np.clip(rng.normal(0.08, 0.07, n_growth), -dgp.max_growth, dgp.max_growth)
        level = 1000.0 * math.exp(rng.normal(0.0, 0.2)) * np.cumprod(np.r_[1.0, 1.0 + g])
        periods = tuple(dgp.first_decade + 10 * t for t in range(n_growth + 1))
        series.append(GdpSeries(label, periods, tuple(level.tolist())))
    return series


def gen_height_panel(dgp: HeightPanelDgp) -> Dataset:
    rng = np.random.default_rng(dgp.seed)
    P, T, m = dgp.provinces, dgp.decades, dgp.cohort_size
    growth = np.vstack([decadal_growth(s) for s in _gdp_paths(dgp, rng)])
    mu = (
        np.asarray(dgp.province_effects, dtype=float)
        if dgp.province_effects is not None
        else dgp.mean_height + rng.normal(0.0, dgp.province_sd, P)
    )
    lam = (
        np.asarray(dgp.decade_effects, dtype=float)
        if dgp.decade_effects is not None
        else dgp.decade_trend * np.arange(T) + rng.normal(0.0, 0.5, T)
    )
    p = np.repeat(np.arange(P), T * m)
    t = np.tile(np.repeat(np.arange(T), m), P)
    offset = rng.integers(0, 10, p.size)
    birth_year = dgp.first_decade + 10 * t + offset
    G = np.column_stack([growth[p, (10 * t + offset + age) // 10] for age in AGES])
    u = rng.uniform(size=p.size)
    height = mu[p] + lam[t] + dgp.noise * ndtri(u) + np.sum(dgp.beta(u) * G, axis=1)
    if (height <= 0).any():
        raise NumericalError("generated a nonpositive height; check the DGP parameters")
    provinces = np.array(dgp.province_labels, dtype=object)[p]
    decades = np.array(dgp.decade_labels, dtype=object)[t]
    cols = {
        "province": provinces,
        "decade": decades,
        "birth_year": birth_year.astype(float),
        **{f"growth{age}": G[:, k] for k, age in enumerate(AGES)},
        "height": height,
    }
    kinds = {"province": CATEGORICAL, "decade": CATEGORICAL}
    return Dataset.from_arrays(cols, kinds)


HEIGHT_TERMS = tuple(f"growth{age}" for age in AGES)
HEIGHT_FIXED_EFFECTS = ("province", "decade")


@dataclass(frozen=True)
class McConfig:
    dgp: LocationScaleDgp = field(default_factory=LocationScaleDgp)
    taus: tuple = (0.1, 0.5, 0.9)
    replications: int = 200
    seed: int = 0
    method: str = SANDWICH
    level: float = 0.95
    bootstrap_reps: int = 200
    workers: int = 1

    def __post_init__(self):
        if self.replications < 50:
            raise ValueError("a Monte Carlo study needs at least 50 replications")
        if self.method not in METHODS:
            raise ValueError(f"unknown inference method {self.method!r}")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        taus = [float(t) for t in self.taus]
        if not taus or any(not 0.0 < t < 1.0 for t in taus):
            raise ValueError("taus must be a nonempty list inside (0, 1)")


@dataclass(frozen=True)
class McRow:
    tau: float
    truth: float
    mean_estimate: float
    bias: float
    rmse: float
    coverage: float
    mean_std_error: float
    replications: int
    n_failed: int


def _one_replication(cfg: McConfig, r: int):
    dgp = replace(cfg.dgp, seed=derived_seed(cfg.seed, r))
    data = gen_location_scale(dgp)
    x, y = data.numeric("x"), data.numeric("y")
    X = np.column_stack([np.ones_like(x), x])
    z = float(ndtri((1 + cfg.level) / 2))
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtremeQuantileWarning)
        for tau in cfg.taus:
            try:
                fit = fit_quantile(X, y, tau)
                cov = quantile_covariance(
                    fit, X, y, cfg.method, B=cfg.bootstrap_reps, seed=dgp.seed,
                    cluster_ids=np.arange(y.size) if cfg.method == "cluster-bootstrap" else None,
                )
            except ToolkitError:
                out.append(None)
                continue
            est, se = float(fit.beta[1]), float(cov.std_errors[1])
            out.append((est, se, est - z * se, est + z * se))
    return out


def mc_study(cfg: McConfig) -> list[McRow]:
    """Bias, RMSE and interval coverage of the quantile slope per tau.

    Replication ``r`` draws its data from ``derived_seed(cfg.seed, r)`` so
    results do not depend on ``workers``.
    """
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(lambda r: _one_replication(cfg, r), range(cfg.replications)))
    else:
        results = [_one_replication(cfg, r) for r in range(cfg.replications)]

    rows = []
    for j, tau in enumerate(cfg.taus):
        truth = analytic_slope(cfg.dgp, tau)
        ok = [res[j] for res in results if res[j] is not None]
        failed = cfg.replications - len(ok)
        if failed > 0.1 * cfg.replications:
            raise NumericalError(f"tau={tau:g}: {failed} of {cfg.replications} replications failed")
        est = np.array([o[0] for o in ok])
        se = np.array([o[1] for o in ok])
        lo = np.array([o[2] for o in ok])
        hi = np.array([o[3] for o in ok])
        rows.append(
            McRow(
                tau=float(tau),
                truth=truth,
                mean_estimate=float(est.mean()),
                bias=float(est.mean() - truth),
                rmse=float(np.sqrt(np.mean((est - truth) ** 2))),
                coverage=float(np.mean((lo <= truth) & (truth <= hi))),
                mean_std_error=float(se.mean()),
                replications=len(ok),
                n_failed=failed,
            )
        )
    return rows
