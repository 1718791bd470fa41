"""Batch command line front end.

Subcommands ``fit``, ``qte``, ``lqte`` and ``simulate`` read a CSV (or a
synthetic design), run the estimators and write a plot-ready table as CSV or
JSON.  Options can also come from a ``key = value`` file passed with
``--config``; flags given on the command line win.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import traceback
import warnings
from dataclasses import dataclass
from pathlib import Path

from scipy.special import ndtri

from .core import ExtremeQuantileWarning, SolverOptions, fit_grid, fit_ols
from .data import BINARY, CATEGORICAL, CONTINUOUS, build_design, load_dataset
from .errors import DataError, NumericalError
from .inference import (
    BOOTSTRAP,
    CLUSTER_BOOTSTRAP,
    METHODS,
    confidence_band,
    ols_covariance,
    quantile_covariance,
)
from .simulate import (
    HeightPanelDgp,
    LocationScaleDgp,
    McConfig,
    gen_height_panel,
    gen_location_scale,
    mc_study,
)
from .treatment import bootstrap_treatment, lqte, qte

PACKAGE = __name__.rsplit(".", 1)[0]
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

FIT_FIELDS = ("tau", "coefficient_name", "estimate", "std_error", "ci_lower", "ci_upper", "method")
QTE_FIELDS = ("tau", "effect", "q1", "q0", "ci_lower", "ci_upper")
LQTE_FIELDS = QTE_FIELDS + ("first_stage",)
MC_FIELDS = ("tau", "truth", "mean_estimate", "bias", "rmse", "coverage", "mean_std_error", "replications", "n_failed")

DEFAULTS = {
    "output": "-",
    "format": "csv",
    "seed": 0,
    "workers": 1,
    "level": 0.95,
    "taus": "0.05:0.95:0.05",
    "se": "sandwich",
    "reps": 200,
    "intercept": True,
    "ols": False,
    "solver": "fn",
    "terms": "",
    "fixed_effects": "",
    "n": 1000,
    "replications": 200,
    "a": 1.0,
    "b": 1.0,
    "s0": 1.0,
    "s1": 0.5,
    "generate": None,
    "provinces": 10,
    "decades": 6,
    "cohort_size": 100,
}


class UsageError(ValueError):
    pass


def parse_taus(text) -> list[float]:
    """``"0.05:0.95:0.05"`` (inclusive range) or ``"0.25,0.5,0.75"``."""
    text = str(text).strip()
    try:
        if ":" in text:
            start, stop, step = (float(p) for p in text.split(":"))
            if step <= 0:
                raise UsageError("tau step must be positive")
            count = int(round((stop - start) / step)) + 1
            taus = [round(start + i * step, 10) for i in range(count)]
        else:
            taus = [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"cannot parse tau grid {text!r}") from None
    if not taus:
        raise UsageError("tau grid is empty")
    if any(not 0.0 < t < 1.0 for t in taus):
        raise UsageError("every tau must lie strictly between 0 and 1")
    if any(b <= a for a, b in zip(taus, taus[1:])):
        raise UsageError("tau grid must be strictly increasing")
    return taus


def _names(text) -> list[str]:
    return [t.strip() for t in str(text or "").split(",") if t.strip()]


@dataclass(frozen=True)
class RunConfig:
    command: str
    input: str | None
    response: str | None
    terms: tuple
    fixed_effects: tuple
    intercept: bool
    taus: tuple
    se: str
    reps: int
    seed: int
    cluster: str | None
    treatment: str | None
    instrument: str | None
    ols: bool
    level: float
    output: str
    format: str
    workers: int
    solver: str
    n: int
    replications: int
    a: float
    b: float
    s0: float
    s1: float
    generate: str | None
    provinces: int
    decades: int
    cohort_size: int

    def __post_init__(self):
        if self.se not in METHODS and self.se != "none":
            raise UsageError(f"unknown inference method {self.se!r}")
        if self.se in (BOOTSTRAP, CLUSTER_BOOTSTRAP) and self.reps < 50:
            raise UsageError("bootstrap methods need --reps >= 50")
        if self.se == CLUSTER_BOOTSTRAP and not self.cluster and self.command == "fit":
            raise UsageError("cluster-bootstrap needs --cluster")
        if self.format not in ("csv", "json"):
            raise UsageError("--format must be csv or json")
        if not 0.0 < self.level < 1.0:
            raise UsageError("--level must lie in (0, 1)")
        if self.workers < 1:
            raise UsageError("--workers must be at least 1")


def read_config_file(path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{num}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(key, value):
    if value is None:
        return None
    default = DEFAULTS.get(key)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        low = str(value).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {value!r}") from None
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qrtoolkit", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value file; command-line flags override it")
        p.add_argument("--output", "-o", help="output path, '-' for stdout (default)")
        p.add_argument("--format", choices=("csv", "json"))
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="threads for resampling and grid fits")
        p.add_argument("--level", type=float, help="confidence level (default 0.95)")
        p.add_argument("--taus", help="'start:stop:step' or comma list (default 0.05:0.95:0.05)")
        p.add_argument("--reps", type=int, help="bootstrap replications (default 200)")

    p = sub.add_parser("fit", help="quantile regression over a tau grid")
    common(p)
    p.add_argument("--input", "-i")
    p.add_argument("--response", "-y")
    p.add_argument("--terms", help="comma-separated continuous regressors")
    p.add_argument("--fixed-effects", dest="fixed_effects", help="comma-separated categorical columns")
    p.add_argument("--no-intercept", dest="intercept", action="store_const", const=False)
    p.add_argument("--se", choices=METHODS + ("none",))
    p.add_argument("--cluster", help="cluster column for cluster-bootstrap")
    p.add_argument("--ols", action="store_const", const=True, help="append an OLS block (tau = mean)")
    p.add_argument("--solver", choices=("fn", "br"))

    for name in ("qte", "lqte"):
        p = sub.add_parser(name, help="quantile treatment effects" if name == "qte" else "local QTE with a binary instrument")
        common(p)
        p.add_argument("--input", "-i")
        p.add_argument("--response", "-y")
        p.add_argument("--treatment", "-d")
        if name == "lqte":
            p.add_argument("--instrument", "-z")

    p = sub.add_parser("simulate", help="Monte Carlo study or synthetic data")
    common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--se", choices=METHODS)
    p.add_argument("--a", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--s0", type=float)
    p.add_argument("--s1", type=float)
    p.add_argument("--generate", choices=("location-scale", "height-panel"),
                   help="write a synthetic dataset instead of a study report")
    p.add_argument("--provinces", type=int)
    p.add_argument("--decades", type=int)
    p.add_argument("--cohort-size", dest="cohort_size", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            merged[key] = _coerce(key, value)
    for key, value in vars(args).items():
        if value is not None and key != "config":
            merged[key] = value
    command = args.command
    se = merged.get("se")
    if command in ("qte", "lqte"):
        # treatment commands only offer a bootstrap band
        se = BOOTSTRAP if int(merged["reps"]) > 0 else "none"
    return RunConfig(
        command=command,
        input=merged.get("input"),
        response=merged.get("response"),
        terms=tuple(_names(merged.get("terms"))),
        fixed_effects=tuple(_names(merged.get("fixed_effects"))),
        intercept=bool(merged["intercept"]),
        taus=tuple(parse_taus(merged["taus"])),
        se=se,
        reps=int(merged["reps"]),
        seed=int(merged["seed"]),
        cluster=merged.get("cluster"),
        treatment=merged.get("treatment"),
        instrument=merged.get("instrument"),
        ols=bool(merged["ols"]),
        level=float(merged["level"]),
        output=str(merged["output"]),
        format=str(merged["format"]),
        workers=int(merged["workers"]),
        solver=str(merged["solver"]),
        n=int(merged["n"]),
        replications=int(merged["replications"]),
        a=float(merged["a"]),
        b=float(merged["b"]),
        s0=float(merged["s0"]),
        s1=float(merged["s1"]),
        generate=merged.get("generate"),
        provinces=int(merged["provinces"]),
        decades=int(merged["decades"]),
        cohort_size=int(merged["cohort_size"]),
    )


def _require(cfg, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if not getattr(cfg, n)]
    if missing:
        raise UsageError(f"{cfg.command} requires {', '.join(missing)}")


def _num(x):
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) else x


def cmd_fit(cfg: RunConfig) -> list[dict]:
    _require(cfg, "input", "response")
    schema = {cfg.response: CONTINUOUS}
    schema.update({t: CONTINUOUS for t in cfg.terms})
    schema.update({c: CATEGORICAL for c in cfg.fixed_effects})
    if cfg.cluster:
        schema[cfg.cluster] = CATEGORICAL
    data = load_dataset(cfg.input, schema)
    design, y = build_design(data, cfg.response, cfg.terms, cfg.fixed_effects, cfg.intercept)
    X = design.values
    clusters = data[cfg.cluster].values[design.row_index] if cfg.cluster else None
    if clusters is not None and data[cfg.cluster].missing[design.row_index].any():
        raise DataError(f"cluster column {cfg.cluster!r} has missing values in the estimation sample")
    opts = SolverOptions(method=cfg.solver)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtremeQuantileWarning)
        fits = fit_grid(design, y, cfg.taus, opts, workers=cfg.workers)
    rows = []
    names = design.column_names
    if cfg.se == "none":
        for f in fits:
            for name, est in zip(names, f.beta):
                rows.append(dict(tau=f.tau, coefficient_name=name, estimate=float(est),
                                 std_error=None, ci_lower=None, ci_upper=None, method="none"))
    else:
        covs = []
        for f in fits:
            try:
                covs.append(quantile_covariance(f, X, y, cfg.se, cfg.reps, cfg.seed, clusters, opts, cfg.workers))
            except NumericalError as exc:
                raise type(exc)(f"tau={f.tau:g}: {exc}") from exc
        band = confidence_band(fits, covs, cfg.level)
        for i, f in enumerate(fits):
            for j, name in enumerate(names):
                rows.append(dict(
                    tau=f.tau, coefficient_name=name, estimate=float(band.estimate[i, j]),
                    std_error=float(band.std_error[i, j]), ci_lower=float(band.lower[i, j]),
                    ci_upper=float(band.upper[i, j]), method=cfg.se,
                ))
    if cfg.ols:
        ols = fit_ols(design, y)
        if cfg.se == "none":
            se = [None] * len(names)
        else:
            se = ols_covariance(X, y, cfg.se, cfg.reps, cfg.seed, clusters, cfg.workers).std_errors
        z = float(ndtri((1 + cfg.level) / 2))
        for name, est, s in zip(names, ols.beta, se):
            rows.append(dict(
                tau="mean", coefficient_name=name, estimate=float(est),
                std_error=_num(s), ci_lower=None if s is None else float(est - z * s),
                ci_upper=None if s is None else float(est + z * s),
                method=("ols" if cfg.se == "none" else f"ols-{cfg.se}"),
            ))
    return rows


def _treatment_rows(cfg: RunConfig, local: bool) -> list[dict]:
    need = ("input", "response", "treatment") + (("instrument",) if local else ())
    _require(cfg, *need)
    schema = {cfg.response: CONTINUOUS, cfg.treatment: BINARY}
    if local:
        schema[cfg.instrument] = BINARY
    data = load_dataset(cfg.input, schema)
    keep = ~data[cfg.response].missing & ~data[cfg.treatment].missing
    if local:
        keep &= ~data[cfg.instrument].missing
    y = data.numeric(cfg.response)[keep]
    d = data[cfg.treatment].values[keep]
    z = data[cfg.instrument].values[keep] if local else None
    taus = list(cfg.taus)
    res = lqte(y, d, z, taus) if local else qte(y, d, taus)
    band = None
    if cfg.reps > 0:
        band = bootstrap_treatment(y, d, z, taus, cfg.reps, cfg.seed, cfg.level, cfg.workers)
    rows = []
    for i, tau in enumerate(res.taus):
        row = dict(
            tau=float(tau), effect=float(res.effects[i]), q1=float(res.q1[i]), q0=float(res.q0[i]),
            ci_lower=None if band is None else float(band.lower[i]),
            ci_upper=None if band is None else float(band.upper[i]),
        )
        if local:
            row["first_stage"] = float(res.first_stage)
        rows.append(row)
    return rows


def cmd_qte(cfg: RunConfig) -> list[dict]:
    return _treatment_rows(cfg, local=False)


def cmd_lqte(cfg: RunConfig) -> list[dict]:
    return _treatment_rows(cfg, local=True)


def cmd_simulate(cfg: RunConfig):
    if cfg.generate == "location-scale":
        data = gen_location_scale(LocationScaleDgp(cfg.n, cfg.a, cfg.b, cfg.s0, cfg.s1, cfg.seed))
        return _dataset_rows(data)
    if cfg.generate == "height-panel":
        dgp = HeightPanelDgp(provinces=cfg.provinces, decades=cfg.decades,
                             cohort_size=cfg.cohort_size, seed=cfg.seed)
        return _dataset_rows(gen_height_panel(dgp))
    mc = McConfig(
        dgp=LocationScaleDgp(cfg.n, cfg.a, cfg.b, cfg.s0, cfg.s1, 0),
        taus=cfg.taus,
        replications=cfg.replications,
        seed=cfg.seed,
        method=cfg.se,
        level=cfg.level,
        bootstrap_reps=cfg.reps,
        workers=cfg.workers,
    )
    return [dict(zip(MC_FIELDS, (r.tau, r.truth, r.mean_estimate, r.bias, r.rmse, r.coverage,
                                 r.mean_std_error, r.replications, r.n_failed)))
            for r in mc_study(mc)]


def _dataset_rows(data):
    rows = []
    for i in range(data.n_rows):
        row = {}
        for name, col in data.columns.items():
            if col.missing[i]:
                row[name] = None
            elif col.kind == CATEGORICAL:
                row[name] = col.values[i]
            elif col.kind == BINARY:
                row[name] = int(col.values[i])
            else:
                row[name] = float(col.values[i])
        rows.append(row)
    return rows


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render(rows: list[dict], fmt: str, fields=None) -> str:
    """Serialize rows; CSV header is ``fields`` (or the keys of the first row)."""
    fields = list(fields or (rows[0].keys() if rows else ()))
    if fmt == "json":
        return json.dumps([{k: r.get(k) for k in fields} for r in rows], indent=2) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for r in rows:
        writer.writerow([_cell(r.get(k)) for k in fields])
    return buf.getvalue()


COMMANDS = {
    "fit": (cmd_fit, FIT_FIELDS),
    "qte": (cmd_qte, QTE_FIELDS),
    "lqte": (cmd_lqte, LQTE_FIELDS),
    "simulate": (cmd_simulate, None),
}


def _origin(exc) -> str:
    """Dotted name of the innermost toolkit module in the traceback."""
    where = PACKAGE
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith(PACKAGE + "."):
            where = mod
    return where


def run(cfg: RunConfig) -> str:
    func, fields = COMMANDS[cfg.command]
    rows = func(cfg)
    if fields is None:
        fields = MC_FIELDS if cfg.generate is None else list(rows[0].keys())
    return render(rows, cfg.format, fields)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        text = run(cfg)
    except DataError as exc:
        print(f"qrtoolkit: data error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"qrtoolkit: numeric failure [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"qrtoolkit: usage error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if cfg.output == "-":
        sys.stdout.write(text)
    else:
        Path(cfg.output).write_bytes(text.encode("utf-8"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
