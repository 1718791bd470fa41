"""Linear quantile regression by check-loss minimization, plus an OLS baseline.

The solver works on the linear program

    min  tau * 1'u + (1 - tau) * 1'v   s.t.  X b + u - v = y,  u, v >= 0

in two stages.  A Frisch-Newton primal-dual interior point method on the
dual problem gets close to the optimum; a vertex exchange (Barrodale-Roberts
style edge descent with a weighted-median line search) then moves to an
exact basic solution, i.e. one that interpolates K observations.  Exchange
steps run on a response perturbed by a tiny deterministic amount so that
ties cannot stall the descent; the final coefficients are always re-solved
from the unperturbed data on the optimal basis.
"""

from __future__ import annotations

import itertools
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .data import DesignMatrix, dependent_columns
from .errors import ConvergenceError, NumericalError, RankDeficiencyError, ToolkitError

CONVERGED = "converged"
DEGENERATE = "degenerate"
MAX_ITER = "max-iter"


class ExtremeQuantileWarning(UserWarning):
    """Too few observations in the tail for a stable estimate."""


@dataclass(frozen=True)
class SolverOptions:
    method: str = "fn"
    max_iter: int = 5000
    ipm_max_iter: int = 100
    ipm_tol: float = 1e-9
    optimality_tol: float = 1e-9
    zero_tol: float = 1e-8
    perturbation: float = 1e-9

    def __post_init__(self):
        if self.method not in ("fn", "br"):
            raise ValueError(f"unknown solver method {self.method!r}; use 'fn' or 'br'")


@dataclass(frozen=True)
class QuantileFit:
    tau: float
    beta: np.ndarray
    residuals: np.ndarray
    objective: float
    n_zero_residuals: int
    solver_status: str
    basis: tuple = ()
    iterations: int = 0
    column_names: tuple = field(default=(), repr=False)


@dataclass(frozen=True)
class OlsFit:
    beta: np.ndarray
    residuals: np.ndarray
    ssr: float
    column_names: tuple = field(default=(), repr=False)


def _check_tau(tau):
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"quantile tau must lie in (0, 1), got {tau}")
    return tau


def check_loss(residuals, tau) -> float:
    """Sum of tau * r over nonnegative residuals and (1 - tau) * |r| over negative ones."""
    tau = _check_tau(tau)
    r = np.asarray(residuals, dtype=float)
    return float(np.sum(np.where(r >= 0, tau * r, (tau - 1.0) * r)))


def _as_arrays(X, y):
    names = ()
    if isinstance(X, DesignMatrix):
        names = X.column_names
        X = X.values
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.size} entries")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("X and y must be finite")
    if not names:
        names = tuple(f"x{j}" for j in range(X.shape[1]))
    return X, y, names


def _require_full_rank(X, names):
    n, k = X.shape
    if n < k:
        raise RankDeficiencyError(f"{n} observations for {k} coefficients", names)
    rank = np.linalg.matrix_rank(X)
    if rank < k:
        cols = dependent_columns(X, names)
        raise RankDeficiencyError(
            f"design is rank deficient (rank {rank} < {k}); collinear columns: {', '.join(cols)}",
            cols,
        )


def zero_residual_mask(residuals, y, zero_tol=1e-8) -> np.ndarray:
    """Residuals within ``zero_tol * (1 + |y_i|)`` of zero."""
    return np.abs(residuals) <= zero_tol * (1.0 + np.abs(y))


def _frisch_newton(X, y, tau, tol, max_iter):
    """Approximate minimizer via Mehrotra predictor-corrector on the dual LP.

    Dual problem: max y'a  s.t.  X'a = (1 - tau) X'1,  0 <= a <= 1.
    """
    n, k = X.shape
    c = -y
    b = (1.0 - tau) * X.sum(axis=0)
    x = np.full(n, 1.0 - tau)
    s = np.full(n, tau)
    dual, *_ = np.linalg.lstsq(X, c, rcond=None)
    r = c - X @ dual
    eps = 1e-3 * (np.mean(np.abs(r)) + 1e-12)
    z = np.maximum(r, 0.0) + eps
    w = np.maximum(-r, 0.0) + eps
    step = 0.99995

    def solve(theta, rhs):
        m = X.T @ (theta[:, None] * X)
        try:
            return linalg.cho_solve(linalg.cho_factor(m, check_finite=False), rhs, check_finite=False)
        except linalg.LinAlgError:
            return np.linalg.lstsq(m, rhs, rcond=None)[0]

    def direction(theta, rb, rc, rxz, rsw):
        rho = rc - rxz / x + rsw / s
        dy = solve(theta, rb + X.T @ (theta * rho))
        dx = theta * (X @ dy - rho)
        dz = (rxz - z * dx) / x
        dw = (rsw + w * dx) / s
        return dx, dy, dz, dw

    def max_step(v, dv):
        neg = dv < 0
        if not neg.any():
            return 1.0
        return min(1.0, float(np.min(-v[neg] / dv[neg])))

    for _ in range(max_iter):
        gap = z @ x + w @ s
        if gap <= tol * (1.0 + abs(c @ x)):
            break
        rb = b - X.T @ x
        rc = c - X @ dual - z + w
        theta = 1.0 / (z / x + w / s)
        dx, dy, dz, dw = direction(theta, rb, rc, -x * z, -s * w)
        ap = min(max_step(x, dx), max_step(s, -dx))
        ad = min(max_step(z, dz), max_step(w, dw))
        mu_aff = (x + ap * dx) @ (z + ad * dz) + (s - ap * dx) @ (w + ad * dw)
        mu = (mu_aff / gap) ** 3 * gap / (2 * n)
        dx, dy, dz, dw = direction(
            theta, rb, rc, mu - x * z - dx * dz, mu - s * w + dx * dw
        )
        ap = step * min(max_step(x, dx), max_step(s, -dx))
        ad = step * min(max_step(z, dz), max_step(w, dw))
        x = x + ap * dx
        s = s - ap * dx
        dual = dual + ad * dy
        z = z + ad * dz
        w = w + ad * dw
    return -dual


def _independent_rows(X, order, k):
    """First k rows of X, taken in ``order``, that are linearly independent."""
    basis = []
    q = np.zeros((0, X.shape[1]))
    for i in order:
        v = X[i]
        nv = np.linalg.norm(v)
        if nv == 0.0:
            continue
        rem = v - q.T @ (q @ v)
        nr = np.linalg.norm(rem)
        if nr > 1e-9 * nv:
            # second pass keeps the orthonormal set accurate
            rem = rem - q.T @ (q @ rem)
            q = np.vstack([q, rem / np.linalg.norm(rem)])
            basis.append(int(i))
            if len(basis) == k:
                return np.array(basis)
    raise RankDeficiencyError("could not find a nonsingular starting basis")


def _exchange(X, y, tau, basis, max_iter, tol):
    """Edge descent over basic solutions until every edge is non-improving.

    Returns the final basis and the number of iterations used; ``None`` for
    the iteration count signals that the cap was reached.
    """
    n, k = X.shape
    h = np.array(basis)
    in_basis = np.zeros(n, dtype=bool)
    in_basis[h] = True
    for it in range(max_iter):
        binv = np.linalg.inv(X[h])
        beta = binv @ y[h]
        r = y - X @ beta
        r[h] = 0.0
        psi = np.where(r > 0, tau, tau - 1.0)
        psi[h] = 0.0
        # dual values of the basic observations; optimal iff all in [tau-1, tau]
        a = -((X.T @ psi) @ binv)
        up = (1.0 - tau) + a
        down = tau - a
        j_up = int(np.argmin(up))
        j_down = int(np.argmin(down))
        if up[j_up] <= down[j_down]:
            j, sign, slope = j_up, 1.0, up[j_up]
        else:
            j, sign, slope = j_down, -1.0, down[j_down]
        if slope >= -tol:
            return h, it
        g = X @ (sign * binv[:, j])
        cand = ~in_basis & (g != 0.0)
        idx = np.flatnonzero(cand)
        t = r[idx] / g[idx]
        ahead = t > 0
        idx, t = idx[ahead], t[ahead]
        if idx.size == 0:
            raise NumericalError("check-loss objective unbounded along an edge")
        order = np.argsort(t, kind="stable")
        cum = slope + np.cumsum(np.abs(g[idx[order]]))
        stop = int(np.argmax(cum >= 0)) if (cum >= 0).any() else order.size - 1
        enter = int(idx[order[stop]])
        in_basis[h[j]] = False
        in_basis[enter] = True
        h[j] = enter
    return h, None


def _perturbation(n):
    return np.random.default_rng(20240511).uniform(-1.0, 1.0, n)


def _solve(X, y, tau, opts):
    n, k = X.shape
    if opts.method == "fn":
        start = _frisch_newton(X, y, tau, opts.ipm_tol, opts.ipm_max_iter)
    else:
        start, *_ = np.linalg.lstsq(X, y, rcond=None)
    order = np.argsort(np.abs(y - X @ start), kind="stable")
    h = _independent_rows(X, order, k)

    u = _perturbation(n)
    scale = opts.perturbation * (1.0 + np.mean(np.abs(y)))
    total = 0
    for _ in range(6):
        yp = y + scale * u
        h, its = _exchange(X, yp, tau, h, opts.max_iter - total, opts.optimality_tol)
        if its is None:
            return h, None
        total += its
        beta = np.linalg.solve(X[h], y[h])
        r = y - X @ beta
        rp = yp - X @ np.linalg.solve(X[h], yp[h])
        nonbasic = np.ones(n, dtype=bool)
        nonbasic[h] = False
        live = nonbasic & ~zero_residual_mask(r, y, opts.zero_tol)
        if np.all(np.sign(r[live]) == np.sign(rp[live])):
            return h, total
        scale *= 1e-3
    raise NumericalError("vertex exchange could not resolve a degenerate optimum")


def fit_quantile(X, y, tau, options: SolverOptions | None = None) -> QuantileFit:
    """Minimize the check loss of ``y - X @ beta`` at quantile ``tau``.

    ``X`` may be a :class:`~qrtoolkit.data.DesignMatrix` or any 2-d array of
    full column rank.  The returned coefficients are a basic solution: they
    interpolate at least K observations exactly.

    Raises
    ------
    RankDeficiencyError
        If ``X`` does not have full column rank.
    ConvergenceError
        If the exchange phase exceeds ``options.max_iter``; the partial fit
        is attached as ``exc.fit``.
    """
    opts = options or SolverOptions()
    tau = _check_tau(tau)
    X, y, names = _as_arrays(X, y)
    n, k = X.shape
    _require_full_rank(X, names)
    if n * min(tau, 1.0 - tau) < 5 * k:
        warnings.warn(
            f"tau={tau:g} leaves n*min(tau, 1-tau)={n * min(tau, 1 - tau):g} "
            f"tail observations for {k} coefficients; estimates may be fragile",
            ExtremeQuantileWarning,
            stacklevel=2,
        )
    h, its = _solve(X, y, tau, opts)
    beta = np.linalg.solve(X[h], y[h])
    r = y - X @ beta
    r[h] = 0.0
    n_zero = int(zero_residual_mask(r, y, opts.zero_tol).sum())
    status = CONVERGED if n_zero == k else DEGENERATE
    fit = QuantileFit(
        tau=tau,
        beta=beta,
        residuals=r,
        objective=check_loss(r, tau),
        n_zero_residuals=n_zero,
        solver_status=MAX_ITER if its is None else status,
        basis=tuple(sorted(int(i) for i in h)),
        iterations=its or 0,
        column_names=names,
    )
    if its is None:
        raise ConvergenceError(
            f"vertex exchange did not certify optimality within {opts.max_iter} iterations",
            fit,
        )
    return fit


def fit_grid(X, y, taus, options: SolverOptions | None = None, workers: int = 1) -> list[QuantileFit]:
    """Independent fits over an increasing grid of quantiles."""
    taus = [float(t) for t in taus]
    if not taus:
        raise ValueError("quantile grid is empty")
    for t in taus:
        _check_tau(t)
    if any(b <= a for a, b in zip(taus, taus[1:])):
        raise ValueError("quantile grid must be strictly increasing")

    def one(tau):
        try:
            return fit_quantile(X, y, tau, options)
        except ToolkitError as exc:
            exc.args = (f"tau={tau:g}: {exc.args[0]}",) + exc.args[1:]
            exc.tau = tau
            raise

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, taus))
    return [one(t) for t in taus]


def fit_ols(X, y) -> OlsFit:
    """Least squares via an orthogonal decomposition."""
    X, y, names = _as_arrays(X, y)
    _require_full_rank(X, names)
    q, r = np.linalg.qr(X)
    beta = linalg.solve_triangular(r, q.T @ y)
    resid = y - X @ beta
    return OlsFit(beta=beta, residuals=resid, ssr=float(resid @ resid), column_names=names)


def brute_force_fit(X, y, tau) -> QuantileFit:
    """Exhaustive search over all exact-fit solutions through K observations.

    Some minimizer of the check loss is always a basic solution, so the best
    of all of them is a global minimizer.  Only meant as a reference for
    small problems (n <= 14, K <= 3).
    """
    tau = _check_tau(tau)
    X, y, names = _as_arrays(X, y)
    n, k = X.shape
    if n > 14 or k > 3:
        raise ValueError(f"instance too large for enumeration (n={n}, K={k}; limits 14 and 3)")
    best = None
    for combo in itertools.combinations(range(n), k):
        sub = X[list(combo)]
        if np.linalg.matrix_rank(sub) < k:
            continue
        beta = np.linalg.solve(sub, y[list(combo)])
        r = y - X @ beta
        obj = check_loss(r, tau)
        if best is None or obj < best[0]:
            best = (obj, beta, r, combo)
    if best is None:
        raise RankDeficiencyError("every K-subset of observations is singular", names)
    obj, beta, r, combo = best
    r = r.copy()
    r[list(combo)] = 0.0
    return QuantileFit(
        tau=tau,
        beta=beta,
        residuals=r,
        objective=obj,
        n_zero_residuals=int(zero_residual_mask(r, y).sum()),
        solver_status=CONVERGED,
        basis=tuple(combo),
        column_names=names,
    )
