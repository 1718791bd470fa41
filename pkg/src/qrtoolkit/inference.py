"""Standard errors for quantile regression coefficients.

Asymptotic covariances follow ``tau (1 - tau) / N * H^-1 J H^-1`` with
``J = X'X / N`` and ``H = X' diag(f_i) X / N``.  Under iid errors every
``f_i`` equals the error density at the tau-th quantile and the expression
collapses to ``tau (1 - tau) / (N f^2) * J^-1``.  Resampling alternatives
draw whole rows (or whole clusters) with replacement and refit.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.special import ndtri

from .core import ExtremeQuantileWarning, QuantileFit, SolverOptions, _as_arrays, fit_ols, fit_quantile
from .data import DesignMatrix
from .errors import DensityEstimationError, NumericalError, ResamplingError, ToolkitError
from .treatment import empirical_quantile, replication_rng

IID = "iid"
SANDWICH = "sandwich"
BOOTSTRAP = "bootstrap"
CLUSTER_BOOTSTRAP = "cluster-bootstrap"
METHODS = (IID, SANDWICH, BOOTSTRAP, CLUSTER_BOOTSTRAP)

# keeps tau +/- h strictly inside (0, 1)
_EDGE = 1e-6


@dataclass(frozen=True)
class CovarianceEstimate:
    matrix: np.ndarray
    method: str
    density_at_tau: float | np.ndarray | None = None
    bandwidth: float | None = None
    replications: int | None = None
    seed: int | None = None
    n_failed: int = 0

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if m.shape[0] != m.shape[1]:
            raise ValueError("covariance matrix must be square")
        if not np.isfinite(m).all():
            raise NumericalError(f"{self.method} covariance has non-finite entries")
        m = 0.5 * (m + m.T)
        eig = np.linalg.eigvalsh(m)
        if eig.size and eig[0] < -1e-10 * max(np.trace(m), 0.0) - 1e-300:
            raise NumericalError(
                f"{self.method} covariance is not positive semidefinite "
                f"(smallest eigenvalue {eig[0]:.3g})"
            )
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.matrix), 0.0, None))


@dataclass(frozen=True)
class ConfidenceBand:
    taus: np.ndarray
    column_names: tuple
    estimate: np.ndarray
    std_error: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float


def hall_sheather_bandwidth(n: int, tau: float, alpha: float = 0.05) -> float:
    """Hall-Sheather bandwidth for the sparsity difference quotient."""
    x = ndtri(tau)
    z = ndtri(1 - alpha / 2)
    return n ** (-1 / 3) * z ** (2 / 3) * (1.5 * stats.norm.pdf(x) ** 2 / (2 * x**2 + 1)) ** (1 / 3)


def _residuals_and_tau(fit, tau):
    if isinstance(fit, QuantileFit):
        return np.asarray(fit.residuals, dtype=float), float(fit.tau if tau is None else tau)
    if tau is None:
        raise ValueError("tau is required when passing raw residuals")
    return np.asarray(fit, dtype=float).ravel(), float(tau)


def _clamped(tau, h):
    return max(tau - h, _EDGE), min(tau + h, 1.0 - _EDGE)


def estimate_density(fit, tau=None, bandwidth=None) -> float:
    """Error density at the tau-th quantile from the residual quantile function.

    ``fit`` is a :class:`QuantileFit` or a plain residual vector.  The
    estimate is ``(hi - lo) / (Q(hi) - Q(lo))`` with ``lo, hi = tau -/+ h``
    clamped inside (0, 1) and Q the left-continuous empirical quantile of
    the residuals.  ``h`` defaults to the Hall-Sheather rule.
    """
    r, tau = _residuals_and_tau(fit, tau)
    h = hall_sheather_bandwidth(r.size, tau) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    lo, hi = _clamped(tau, h)
    spread = empirical_quantile(r, hi) - empirical_quantile(r, lo)
    if not spread > 0:
        raise DensityEstimationError(
            "residual quantiles do not spread around tau; density cannot be "
            "estimated, use a bootstrap method instead"
        )
    return (hi - lo) / spread


def _design(X):
    X = np.asarray(X.values if isinstance(X, DesignMatrix) else X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _gram(X):
    n = X.shape[0]
    return X.T @ X / n


def _inverse(m, what):
    eig = np.linalg.eigvalsh(0.5 * (m + m.T))
    if eig[0] <= 1e-12 * max(abs(eig[-1]), 1e-300):
        raise NumericalError(f"{what} is singular (smallest eigenvalue {eig[0]:.3g})")
    return np.linalg.inv(m)


def covariance_iid(fit, X, tau=None, bandwidth=None) -> CovarianceEstimate:
    """``tau (1 - tau) / (N f^2) * (X'X / N)^-1`` with a common density f."""
    X = _design(X)
    tau = fit.tau if tau is None else float(tau)
    n = X.shape[0]
    h = hall_sheather_bandwidth(n, tau) if bandwidth is None else float(bandwidth)
    f = estimate_density(fit, tau, h)
    jinv = _inverse(_gram(X), "X'X")
    return CovarianceEstimate(
        matrix=tau * (1 - tau) / (n * f**2) * jinv,
        method=IID,
        density_at_tau=f,
        bandwidth=h,
    )


def kernel_bandwidth(residuals, tau, bandwidth=None) -> float:
    """Residual-scale kernel bandwidth.

    The Hall-Sheather half-width ``h`` in probability units is mapped to
    outcome units as ``s * (Phi^-1(tau + h) - Phi^-1(tau - h)) / 2``, where
    ``s`` is the normal-consistent median absolute deviation of the
    residuals.
    """
    r = np.asarray(residuals, dtype=float)
    h = hall_sheather_bandwidth(r.size, tau) if bandwidth is None else float(bandwidth)
    lo, hi = _clamped(tau, h)
    mad = 1.4826 * np.median(np.abs(r - np.median(r)))
    if not mad > 0:
        raise DensityEstimationError(
            "residuals have zero median absolute deviation; use a bootstrap method instead"
        )
    return float(0.5 * (ndtri(hi) - ndtri(lo)) * mad)


def covariance_sandwich(fit, X, tau=None, bandwidth=None, density_weights=None) -> CovarianceEstimate:
    """Heteroskedasticity-robust ``tau (1 - tau) / N * H^-1 J H^-1``.

    Observation densities are Gaussian kernel weights ``phi(r_i / h) / h``
    on the residuals.  ``density_weights`` (scalar or length-N) overrides
    them, which is mainly useful for checking the iid reduction.
    """
    X = _design(X)
    tau = fit.tau if tau is None else float(tau)
    n = X.shape[0]
    r = np.asarray(fit.residuals, dtype=float)
    if density_weights is None:
        hk = kernel_bandwidth(r, tau, bandwidth)
        f = stats.norm.pdf(r / hk) / hk
    else:
        hk = None
        f = np.broadcast_to(np.asarray(density_weights, dtype=float), (n,))
    J = _gram(X)
    H = X.T @ (f[:, None] * X) / n
    hinv = _inverse(H, "H (density-weighted X'X)")
    return CovarianceEstimate(
        matrix=tau * (1 - tau) / n * hinv @ J @ hinv,
        method=SANDWICH,
        density_at_tau=f if density_weights is None else np.asarray(density_weights, dtype=float),
        bandwidth=hk,
    )


def _cluster_members(cluster_ids):
    ids = np.asarray(cluster_ids)
    _, first, inverse = np.unique(ids, return_index=True, return_inverse=True)
    # clusters ordered by first appearance, rows within a cluster in file order
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    labels = rank[inverse.ravel()]
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(first.size + 1))
    return [order[bounds[g]:bounds[g + 1]] for g in range(first.size)]


def resample_rows(n, seed, index, clusters=None) -> np.ndarray:
    """Row indices of one pairs-bootstrap draw.

    With ``clusters`` (a list of row-index arrays) whole clusters are drawn
    and concatenated.  With singleton clusters this is the same draw as the
    plain row bootstrap.
    """
    rng = replication_rng(seed, index)
    if clusters is None:
        return rng.integers(0, n, n)
    picks = rng.integers(0, len(clusters), len(clusters))
    return np.concatenate([clusters[g] for g in picks])


def resample_cov(
    estimator: Callable[[np.ndarray, np.ndarray], np.ndarray],
    X,
    y,
    B: int,
    seed: int,
    cluster_ids=None,
    workers: int = 1,
):
    """Covariance of ``estimator`` over B pairs-bootstrap draws.

    Returns ``(matrix, replications_used, n_failed)``.  A replication fails
    when the estimator raises a toolkit error (typically a rank deficient
    resample); failures are dropped and more than 10% of them is an error.
    """
    if B < 50:
        raise ValueError("bootstrap needs at least 50 replications")
    n = X.shape[0]
    clusters = None
    if cluster_ids is not None:
        if len(cluster_ids) != n:
            raise ValueError("cluster ids must have one entry per row")
        clusters = _cluster_members(cluster_ids)
        if len(clusters) < 10:
            raise ValueError(f"cluster bootstrap needs at least 10 clusters, found {len(clusters)}")

    def one(b):
        idx = resample_rows(n, seed, b, clusters)
        try:
            return estimator(X[idx], y[idx])
        except ToolkitError:
            return None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            draws = list(pool.map(one, range(B)))
    else:
        draws = [one(b) for b in range(B)]
    ok = [d for d in draws if d is not None]
    failed = B - len(ok)
    if failed > 0.1 * B:
        raise ResamplingError(f"{failed} of {B} bootstrap replications failed")
    reps = np.vstack(ok)
    return np.atleast_2d(np.cov(reps, rowvar=False)), len(ok), failed


def bootstrap_cov(
    X,
    y,
    tau,
    B: int = 200,
    seed: int = 0,
    cluster_ids=None,
    options: SolverOptions | None = None,
    workers: int = 1,
) -> CovarianceEstimate:
    """Pairs (or cluster pairs) bootstrap covariance of the quantile coefficients."""
    X, y, _ = _as_arrays(X, y)

    def refit(Xb, yb):
        return fit_quantile(Xb, yb, tau, options).beta

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtremeQuantileWarning)
        matrix, used, failed = resample_cov(refit, X, y, B, seed, cluster_ids, workers)
    return CovarianceEstimate(
        matrix=matrix,
        method=BOOTSTRAP if cluster_ids is None else CLUSTER_BOOTSTRAP,
        replications=used,
        seed=int(seed),
        n_failed=failed,
    )


def quantile_covariance(fit, X, y, method, B=200, seed=0, cluster_ids=None, options=None, workers=1):
    """Dispatch on the method tag."""
    if method == IID:
        return covariance_iid(fit, X)
    if method == SANDWICH:
        return covariance_sandwich(fit, X)
    if method == BOOTSTRAP:
        return bootstrap_cov(X, y, fit.tau, B, seed, None, options, workers)
    if method == CLUSTER_BOOTSTRAP:
        if cluster_ids is None:
            raise ValueError("cluster-bootstrap requires cluster ids")
        return bootstrap_cov(X, y, fit.tau, B, seed, cluster_ids, options, workers)
    raise ValueError(f"unknown inference method {method!r}; choose from {', '.join(METHODS)}")


def ols_covariance(X, y, method, B=200, seed=0, cluster_ids=None, workers=1) -> CovarianceEstimate:
    """OLS counterpart of each method.

    ``iid`` gives the classical ``s^2 (X'X)^-1``, ``sandwich`` the HC1
    White estimator, and the bootstrap methods resample exactly as for
    quantile fits.
    """
    X, y, _ = _as_arrays(X, y)
    n, k = X.shape
    if method in (IID, SANDWICH):
        fit = fit_ols(X, y)
        xtx_inv = _inverse(X.T @ X, "X'X")
        if method == IID:
            m = fit.ssr / (n - k) * xtx_inv if n > k else np.zeros((k, k))
        else:
            meat = X.T @ (fit.residuals[:, None] ** 2 * X)
            m = xtx_inv @ meat @ xtx_inv * (n / (n - k) if n > k else 1.0)
        return CovarianceEstimate(matrix=m, method=method)
    if method in (BOOTSTRAP, CLUSTER_BOOTSTRAP):
        if method == CLUSTER_BOOTSTRAP and cluster_ids is None:
            raise ValueError("cluster-bootstrap requires cluster ids")
        ids = cluster_ids if method == CLUSTER_BOOTSTRAP else None
        matrix, used, failed = resample_cov(lambda a, b: fit_ols(a, b).beta, X, y, B, seed, ids, workers)
        return CovarianceEstimate(matrix=matrix, method=method, replications=used, seed=int(seed), n_failed=failed)
    raise ValueError(f"unknown inference method {method!r}; choose from {', '.join(METHODS)}")


def confidence_band(fits: Sequence[QuantileFit], covs: Sequence[CovarianceEstimate], level: float = 0.95) -> ConfidenceBand:
    """Normal intervals ``estimate +/- z * se`` for every coefficient and tau."""
    if len(fits) != len(covs):
        raise ValueError(f"{len(fits)} fits but {len(covs)} covariance estimates")
    if not fits:
        raise ValueError("no fits supplied")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    est = np.vstack([f.beta for f in fits])
    se = np.vstack([c.std_errors for c in covs])
    if est.shape != se.shape:
        raise ValueError("coefficient and standard error dimensions differ")
    z = ndtri((1 + level) / 2)
    return ConfidenceBand(
        taus=np.array([f.tau for f in fits]),
        column_names=tuple(fits[0].column_names),
        estimate=est,
        std_error=se,
        lower=est - z * se,
        upper=est + z * se,
        level=float(level),
    )
