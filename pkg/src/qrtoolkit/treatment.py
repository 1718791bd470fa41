"""Quantile treatment effects, the Wald LATE, complier CDFs and local QTEs."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError, RelevanceError, ResamplingError, ToolkitError

RAW = "raw"
MONOTONIZED = "monotonized"


@dataclass(frozen=True)
class EmpiricalCdf:
    support: np.ndarray
    probs: np.ndarray
    kind: str = RAW

    def __call__(self, value):
        i = np.searchsorted(self.support, value, side="right")
        return np.where(i > 0, self.probs[np.maximum(i - 1, 0)], 0.0)

    def quantile(self, tau) -> float:
        """Smallest support point whose cumulative probability reaches ``tau``."""
        if self.kind != MONOTONIZED:
            raise ValueError("invert only a monotonized CDF")
        hit = np.flatnonzero(self.probs >= tau)
        if hit.size == 0:
            raise NumericalError(
                f"tau={tau:g} exceeds the CDF maximum {self.probs.max():g}"
            )
        return float(self.support[hit[0]])


@dataclass(frozen=True)
class ComplierCdfs:
    treated_raw: EmpiricalCdf
    control_raw: EmpiricalCdf
    treated: EmpiricalCdf
    control: EmpiricalCdf
    first_stage: float


@dataclass(frozen=True)
class TreatmentResult:
    taus: np.ndarray
    effects: np.ndarray
    q1: np.ndarray
    q0: np.ndarray
    first_stage: float | None = None
    band: "TreatmentBand | None" = None


@dataclass(frozen=True)
class TreatmentBand:
    taus: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    std_error: np.ndarray
    level: float
    replications: int
    n_failed: int
    seed: int


def _taus(taus):
    arr = np.atleast_1d(np.asarray(taus, dtype=float))
    if arr.size == 0:
        raise ValueError("quantile grid is empty")
    if np.any((arr <= 0) | (arr >= 1)):
        raise ValueError("every tau must lie in (0, 1)")
    return arr


def empirical_quantile(sample, tau) -> float:
    """Left-continuous sample quantile, ``inf{y : F_n(y) >= tau}``.

    This is the k-th order statistic for the smallest k with ``k/n >= tau``.
    The comparison is done on ``k/n`` itself so floating point rounding of
    ``n * tau`` cannot shift the index.
    """
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise ValueError("empirical quantile of an empty sample")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    k = min(max(int(np.ceil(n * tau)), 1), n)
    while k > 1 and (k - 1) / n >= tau:
        k -= 1
    while k < n and k / n < tau:
        k += 1
    return float(x[k - 1])


def _binary(name, v):
    v = np.asarray(v)
    if v.ndim != 1:
        raise DataError(f"{name} must be one-dimensional")
    if not np.isin(v, (0, 1)).all():
        raise DataError(f"{name} must be binary (0/1)")
    return v.astype(bool)


def _check_lengths(*arrays):
    if len({len(a) for a in arrays}) != 1:
        raise DataError("outcome, treatment and instrument lengths differ")


def qte(y, d, taus) -> TreatmentResult:
    """Difference of treated and control sample quantiles at each tau."""
    y = np.asarray(y, dtype=float)
    d = _binary("treatment", d)
    _check_lengths(y, d)
    taus = _taus(taus)
    treated, control = y[d], y[~d]
    if treated.size == 0 or control.size == 0:
        raise DataError("both treatment groups must be nonempty")
    q1 = np.array([empirical_quantile(treated, t) for t in taus])
    q0 = np.array([empirical_quantile(control, t) for t in taus])
    return TreatmentResult(taus=taus, effects=q1 - q0, q1=q1, q0=q0)


def _split_by_instrument(y, d, z):
    y = np.asarray(y, dtype=float)
    d = _binary("treatment", d)
    z = _binary("instrument", z)
    _check_lengths(y, d, z)
    if z.all() or not z.any():
        raise DataError("both instrument groups must be nonempty")
    return y, d, z


def first_stage(d, z) -> float:
    """Difference in treatment take-up between instrument groups."""
    d = _binary("treatment", d)
    z = _binary("instrument", z)
    _check_lengths(d, z)
    if z.all() or not z.any():
        raise DataError("both instrument groups must be nonempty")
    return float(d[z].mean() - d[~z].mean())


def late_wald(y, d, z) -> float:
    """Reduced-form difference in mean outcomes over the first stage."""
    y, d, z = _split_by_instrument(y, d, z)
    fs = first_stage(d, z)
    if fs == 0.0:
        raise RelevanceError("instrument has no first-stage effect (first stage = 0)", fs)
    return float((y[z].mean() - y[~z].mean()) / fs)


def monotonize(cdf: EmpiricalCdf) -> EmpiricalCdf:
    """Clamp to [0, 1] and take the running maximum."""
    p = np.maximum.accumulate(np.clip(cdf.probs, 0.0, 1.0))
    return EmpiricalCdf(cdf.support, p, MONOTONIZED)


def complier_cdfs(y, d, z, grid=None) -> ComplierCdfs:
    """Outcome CDFs of compliers under treatment and under control.

    At each grid point ``v`` the treated-complier CDF is the instrument
    contrast in the mean of ``1{Y <= v} * D`` divided by the first stage;
    the control-complier CDF uses ``1 - D`` and the contrast in ``1 - D``.
    The grid defaults to the sorted distinct outcome values.
    """
    y, d, z = _split_by_instrument(y, d, z)
    grid = np.unique(y) if grid is None else np.sort(np.asarray(grid, dtype=float))
    fs = first_stage(d, z)
    if fs == 0.0:
        raise RelevanceError("instrument has no first-stage effect (first stage = 0)", fs)
    nd = ~d
    den0 = float(nd[z].mean() - nd[~z].mean())
    if den0 == 0.0:
        raise RelevanceError("control-complier denominator is zero", fs)

    def share_below(mask, size):
        # mean of 1{Y <= v} * mask within an instrument group, as count / size
        return np.searchsorted(np.sort(y[mask]), grid, side="right") / size

    n1, n0 = int(z.sum()), int((~z).sum())
    t1, t0 = share_below(d & z, n1), share_below(d & ~z, n0)
    c1, c0 = share_below(nd & z, n1), share_below(nd & ~z, n0)
    raw1 = EmpiricalCdf(grid, (t1 - t0) / fs)
    raw0 = EmpiricalCdf(grid, (c1 - c0) / den0)
    mono1, mono0 = monotonize(raw1), monotonize(raw0)
    if grid.size and grid[-1] >= y.max():
        # both CDFs equal one at the top of the sample by construction
        mono1.probs[-1] = 1.0
        mono0.probs[-1] = 1.0
    return ComplierCdfs(raw1, raw0, mono1, mono0, fs)


def lqte(y, d, z, taus) -> TreatmentResult:
    """Quantile contrasts of the monotonized complier outcome CDFs."""
    taus = _taus(taus)
    cdfs = complier_cdfs(y, d, z)
    q1 = np.array([cdfs.treated.quantile(t) for t in taus])
    q0 = np.array([cdfs.control.quantile(t) for t in taus])
    return TreatmentResult(taus=taus, effects=q1 - q0, q1=q1, q0=q0, first_stage=cdfs.first_stage)


def replication_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for one resampling replication.

    Streams are keyed by ``(seed, index)`` so the draws of a replication do
    not depend on which worker runs it or in what order.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def bootstrap_treatment(y, d, z=None, taus=(0.5,), B=200, seed=0, level=0.95, workers=1) -> TreatmentBand:
    """Pairs bootstrap percentile band for QTE (or LQTE when ``z`` is given)."""
    if B < 50:
        raise ValueError("bootstrap needs at least 50 replications")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    taus = _taus(taus)
    y = np.asarray(y, dtype=float)
    d = np.asarray(d)
    z = None if z is None else np.asarray(z)
    n = y.size
    estimate = (lambda idx: qte(y[idx], d[idx], taus)) if z is None else (
        lambda idx: lqte(y[idx], d[idx], z[idx], taus)
    )
    estimate(np.arange(n))  # surface errors on the full sample first

    def one(b):
        idx = replication_rng(seed, b).integers(0, n, n)
        try:
            return estimate(idx).effects
        except (ToolkitError, ValueError):
            return None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            draws = list(pool.map(one, range(B)))
    else:
        draws = [one(b) for b in range(B)]
    ok = [e for e in draws if e is not None]
    failed = B - len(ok)
    if failed > 0.1 * B:
        raise ResamplingError(f"{failed} of {B} bootstrap replications failed")
    reps = np.vstack(ok)
    alpha = (1.0 - level) / 2
    return TreatmentBand(
        taus=taus,
        lower=np.quantile(reps, alpha, axis=0),
        upper=np.quantile(reps, 1 - alpha, axis=0),
        std_error=reps.std(axis=0, ddof=1),
        level=level,
        replications=len(ok),
        n_failed=failed,
        seed=int(seed),
    )
