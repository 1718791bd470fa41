import functools
import threading
import warnings

import numpy as np
import pytest

import qrtoolkit
import qrtoolkit.core
import qrtoolkit.inference
import qrtoolkit.simulate
from checks import counting_holds, spans_constant, subgradient_holds
from qrtoolkit.core import ExtremeQuantileWarning

_ACCEPTANCE = []


class FitAudit:
    """Optimality checks on every fit the solver returns during the session."""

    def __init__(self):
        self.lock = threading.Lock()
        self.fits = 0
        self.counted = 0
        self.failures = []

    def check(self, fit, X, y):
        X = np.asarray(getattr(X, "values", X), dtype=float)
        X = X[:, None] if X.ndim == 1 else X
        y = np.asarray(y, dtype=float)
        # the counting property is the subgradient condition along a constant direction
        with_constant = spans_constant(X)
        ok_count = counting_holds(fit, y) if with_constant else True
        ok_grad = subgradient_holds(fit, X, y)
        with self.lock:
            self.fits += 1
            self.counted += with_constant
            if not (ok_count and ok_grad):
                self.failures.append((fit.tau, X.shape, ok_count, ok_grad))


AUDIT = FitAudit()
_original_fit = qrtoolkit.core.fit_quantile


@functools.wraps(_original_fit)
def _audited_fit(X, y, tau, options=None):
    fit = _original_fit(X, y, tau, options)
    AUDIT.check(fit, X, y)
    return fit


for _module in (qrtoolkit, qrtoolkit.core, qrtoolkit.inference, qrtoolkit.simulate):
    _module.fit_quantile = _audited_fit


def pytest_collection_modifyitems(items):
    # the corpus-wide optimality audit reports after every other test has run
    last = [it for it in items if it.get_closest_marker("audit")]
    items[:] = [it for it in items if not it.get_closest_marker("audit")] + last


@pytest.fixture(autouse=True)
def _quiet_tail_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtremeQuantileWarning)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fit_audit():
    return AUDIT


@pytest.fixture
def record_criterion():
    """Register the outcome of one acceptance criterion for the summary."""

    def record(number, title, passed, detail=""):
        _ACCEPTANCE.append((number, title, bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        mark = "PASS" if passed else "FAIL"
        line = f"[{mark}] criterion {number:>2}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
