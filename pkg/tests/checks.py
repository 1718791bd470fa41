"""Optimality checks written independently of the solver."""

import numpy as np


def zero_mask(residuals, y, tol=1e-8):
    return np.abs(residuals) <= tol * (1.0 + np.abs(y))


def spans_constant(X, tol=1e-8):
    """True when the column space of X contains the all-ones vector."""
    X = np.asarray(X, dtype=float)
    ones = np.ones(X.shape[0])
    coef, *_ = np.linalg.lstsq(X, ones, rcond=None)
    return bool(np.linalg.norm(X @ coef - ones) <= tol * np.sqrt(X.shape[0]))


def counting_holds(fit, y):
    """N- <= n tau <= N- + N0.

    This follows from optimality only when the design spans a constant.
    """
    r = np.asarray(fit.residuals)
    zero = zero_mask(r, y)
    n_neg = int(np.sum((r < 0) & ~zero))
    n_zero = int(np.sum(zero))
    n_tau = r.size * fit.tau
    slack = 1e-9 * r.size
    return n_neg <= n_tau + slack and n_tau <= n_neg + n_zero + slack


def subgradient_holds(fit, X, y, rtol=1e-8):
    """|sum_i psi(r_i) x_ik| <= sum_{r_i = 0} |x_ik| for every column k."""
    X = np.asarray(X, dtype=float)
    r = np.asarray(fit.residuals)
    zero = zero_mask(r, y)
    psi = fit.tau - (r < 0).astype(float)
    psi[zero] = fit.tau
    lhs = np.abs(psi @ X)
    rhs = np.abs(X[zero]).sum(axis=0)
    return bool(np.all(lhs <= rhs + rtol * (1.0 + np.abs(X).sum(axis=0))))


def objective(residuals, tau):
    r = np.asarray(residuals, dtype=float)
    return float(np.sum(r * (tau - (r < 0))))


def rel_close(a, b, tol=1e-8):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))
