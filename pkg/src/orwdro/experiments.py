"""Corruption-experiment harness: grids, method policies, bootstrap bands.

A config fixes a task (regression, classification, multiregression), a grid
over the sample size n or the dimension d, contamination knobs, and a list
of fitting methods. Each grid point is simulated ``trials`` times; every
method is fit on the same corrupted samples and scored by excess risk on
the clean empirical measure against the generating parameter. Rows carry
bootstrap 10/90 quantile bands of the trial mean and, for the
outlier-robust methods, the theoretical excess-risk bound evaluated with
order-level constants.

Method tokens:

    wdro                      classical fit: eps_hat = 0, no moment cap
    orwdro-g2 [k=v ...]       second-moment cap, trimmed-mean center
    orwdro-gcov [k=v ...]     covariance cap, filtered-mean center

Recognized keys are eps_hat, rho_hat, sigma (auto | inf | number), z0
(origin | trimmed | filter), and e_const, the certified estimation-error
constant entering the default sigma policy. With sigma=auto the cap is
sqrt(d) + E for the second-moment family and 1 + E for the covariance
family, E defaulting to sqrt(d) + rho_hat and 1 + rho_hat respectively.
When a capped fit comes back unbounded the cap is doubled and the fit
retried (the binary-search hyperparameter step), at most six times.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corruption import (
    RegressionCorruption,
    corrupt_classification,
    corrupt_multiregression,
    corrupt_regression,
)
from .losses import evaluate, hinge, l1_multiregression, mad_regression, seminorms
from .reformulate import AmbiguitySpec, G2, Gcov, RiskBoundInputs, joint_fit, risk_bound
from .robust_ot import ResilienceQuery, resilience_bound

log = logging.getLogger(__name__)

TASKS = ("regression", "classification", "multiregression")
METHOD_NAMES = ("wdro", "orwdro-g2", "orwdro-gcov")
MAX_SIGMA_DOUBLINGS = 6


@dataclass(frozen=True)
class MethodSpec:
    """One fitting method with optional overrides of its policy defaults."""

    name: str
    eps_hat: float = None
    rho_hat: float = None
    sigma: object = "auto"  # "auto" | "inf" | positive float
    z0: str = None  # origin | trimmed | filter
    e_const: float = None
    label: str = ""

    def __post_init__(self):
        if self.name not in METHOD_NAMES:
            raise ValueError(f"unknown method {self.name!r}")
        if self.z0 not in (None, "origin", "trimmed", "filter"):
            raise ValueError(f"unknown z0 policy {self.z0!r}")
        if isinstance(self.sigma, str) and self.sigma not in ("auto", "inf"):
            raise ValueError("sigma must be 'auto', 'inf', or a number")
        if not self.label:
            object.__setattr__(self, "label", _default_label(self))


def _default_label(m):
    parts = [m.name]
    if m.eps_hat is not None:
        parts.append(f"eps_hat={m.eps_hat:g}")
    if m.rho_hat is not None:
        parts.append(f"rho_hat={m.rho_hat:g}")
    if m.sigma != "auto":
        parts.append(f"sigma={m.sigma}" if isinstance(m.sigma, str) else f"sigma={m.sigma:g}")
    if m.z0 is not None:
        parts.append(f"z0={m.z0}")
    if m.e_const is not None:
        parts.append(f"e_const={m.e_const:g}")
    return " ".join(parts)


def parse_method(text):
    """Parse a method line: a name token followed by key=value pairs."""
    tokens = text.split()
    if not tokens:
        raise ValueError("empty method specification")
    name, kwargs = tokens[0], {}
    for tok in tokens[1:]:
        if "=" not in tok:
            raise ValueError(f"method option {tok!r} is not key=value")
        key, val = tok.split("=", 1)
        if key in ("eps_hat", "rho_hat", "e_const"):
            kwargs[key] = float(val)
        elif key == "sigma":
            kwargs[key] = val if val in ("auto", "inf") else float(val)
        elif key == "z0":
            kwargs[key] = val
        elif key == "label":
            kwargs[key] = val
        else:
            raise ValueError(f"unknown method option {key!r}")
    return MethodSpec(name, **kwargs)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "regression"
    grid: str = "n"
    n_values: tuple = ()
    d_values: tuple = ()
    n: int = 20
    d: int = 10
    C: float = 8.0
    rho: float = 0.1
    eps: float = 0.1
    p: int = 1
    k_out: int = 3
    trials: int = 20
    resamples: int = 100
    seed: int = 0
    methods: tuple = ()

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.grid not in ("n", "d"):
            raise ValueError("grid must be 'n' or 'd'")
        if not self.grid_points():
            raise ValueError(f"grid over {self.grid} needs {self.grid}_values")
        if self.trials < 2:
            raise ValueError("need at least two trials")
        if self.resamples < 1:
            raise ValueError("need at least one bootstrap resample")
        if not self.methods:
            raise ValueError("at least one method is required")

    def grid_points(self):
        return self.n_values if self.grid == "n" else self.d_values


_CONFIG_KEYS = {
    "task": str,
    "grid": str,
    "n_values": "ints",
    "d_values": "ints",
    "n": int,
    "d": int,
    "C": float,
    "rho": float,
    "eps": float,
    "p": int,
    "k_out": int,
    "trials": int,
    "resamples": int,
    "seed": int,
}


def parse_config(text):
    """Parse the flat key = value config format; '#' starts a comment.

    'method' lines may repeat, one per fitted method, and are kept in file
    order. Every other key matches an ExperimentConfig field.
    """
    fields = {}
    methods = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "method":
            methods.append(parse_method(val))
        elif key in _CONFIG_KEYS:
            kind = _CONFIG_KEYS[key]
            if kind == "ints":
                fields[key] = tuple(int(v) for v in val.split())
            else:
                fields[key] = kind(val)
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return ExperimentConfig(methods=tuple(methods), **fields)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


@dataclass
class ResultRow:
    grid: int
    method: str
    mean: float
    q10: float
    q90: float
    bound: float
    status: str
    walltime_ms: int
    within_bound: bool = None
    sigma_doublings: int = 0
    ambiguity: dict = field(default=None, repr=False)


def bootstrap_quantiles(values, resamples, q, seed):
    """Nearest-rank q and 1-q quantiles of resampled-with-replacement means."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("cannot bootstrap an empty sample")
    if not 0.0 < q < 0.5:
        raise ValueError("q must lie in (0, 0.5)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(resamples, values.size))
    means = np.sort(values[idx].mean(axis=1), kind="stable")
    lo = means[max(0, math.ceil(q * resamples) - 1)]
    hi = means[max(0, math.ceil((1.0 - q) * resamples) - 1)]
    return float(lo), float(hi)


def _loss_for(cfg, d):
    if cfg.task == "regression":
        return mad_regression(d)
    if cfg.task == "classification":
        return hinge(d)
    return l1_multiregression(d, cfg.k_out)


def _simulate(cfg, n, d, seed):
    """Returns (clean, corrupted, generating parameter as a flat vector)."""
    if cfg.task == "regression":
        plan = RegressionCorruption(C=cfg.C, rho=cfg.rho, eps=cfg.eps, p=cfg.p)
        clean, corrupted, theta = corrupt_regression(n, d, plan, seed)
    elif cfg.task == "classification":
        clean, corrupted, theta = corrupt_classification(n, d, cfg.rho, cfg.eps, seed)
    else:
        clean, corrupted, theta = corrupt_multiregression(
            n, d, cfg.k_out, cfg.rho, cfg.eps, seed
        )
    return clean, corrupted, np.asarray(theta, dtype=float).ravel()


@dataclass(frozen=True)
class _Resolved:
    kind: str  # g2 | gcov
    eps_hat: float
    rho_hat: float
    sigma: float
    z0_source: str


def _resolve_method(m, cfg, data_dim):
    """Fill in the policy defaults for one method at one grid point."""
    if m.name == "wdro":
        eps_hat = 0.0 if m.eps_hat is None else m.eps_hat
        rho_hat = cfg.rho if m.rho_hat is None else m.rho_hat
        sigma = math.inf if m.sigma in ("auto", "inf") else float(m.sigma)
        return _Resolved("g2", eps_hat, rho_hat, sigma, m.z0 or "origin")
    eps_hat = cfg.eps if m.eps_hat is None else m.eps_hat
    rho_hat = cfg.rho if m.rho_hat is None else m.rho_hat
    if m.name == "orwdro-g2":
        if m.sigma == "auto":
            e_const = m.e_const if m.e_const is not None else math.sqrt(data_dim) + rho_hat
            sigma = math.sqrt(data_dim) + e_const
        elif m.sigma == "inf":
            sigma = math.inf
        else:
            sigma = float(m.sigma)
        return _Resolved("g2", eps_hat, rho_hat, sigma, m.z0 or "trimmed")
    if m.sigma == "inf":
        raise ValueError("the covariance family needs a finite sigma")
    if m.sigma == "auto":
        e_const = m.e_const if m.e_const is not None else 1.0 + rho_hat
        sigma = 1.0 + e_const
    else:
        sigma = float(m.sigma)
    return _Resolved("gcov", eps_hat, rho_hat, sigma, m.z0 or "filter")


def _make_spec(res, sigma, data_dim, p):
    z0 = np.zeros(data_dim)  # replaced inside joint_fit per z0_source
    family = G2(sigma=sigma, z0=z0) if res.kind == "g2" else Gcov(sigma=sigma, z0=z0)
    return AmbiguitySpec(p=p, eps=res.eps_hat, rho=res.rho_hat, family=family)


def _mean_risk(family, theta, sample):
    return float(
        sum(
            sample.weights[i] * evaluate(family, theta, sample.support[i])
            for i in range(sample.n)
        )
    )


def fit_once(family, corrupted, res, p):
    """One fit with the unbounded-cap escalation; returns (fit, sigma, doublings)."""
    sigma = res.sigma
    fit = joint_fit(
        family, corrupted, _make_spec(res, sigma, corrupted.dim, p), z0_source=res.z0_source
    )
    doublings = 0
    while (
        fit.status == "unbounded"
        and math.isfinite(sigma)
        and doublings < MAX_SIGMA_DOUBLINGS
    ):
        sigma *= 2.0
        doublings += 1
        fit = joint_fit(
            family,
            corrupted,
            _make_spec(res, sigma, corrupted.dim, p),
            z0_source=res.z0_source,
        )
    return fit, sigma, doublings


def _run_cell(cfg, family, sims, method, res, gi, mi, grid_value):
    t0 = time.perf_counter()
    values = []
    statuses = []
    doublings = 0
    for clean, corrupted, theta_star in sims:
        fit, _, dbl = fit_once(family, corrupted, res, cfg.p)
        doublings = max(doublings, dbl)
        statuses.append(fit.status)
        if fit.theta is not None and fit.status in ("optimal", "inaccurate"):
            values.append(
                _mean_risk(family, fit.theta, clean)
                - _mean_risk(family, theta_star, clean)
            )
    if values:
        mean = float(np.mean(values))
        q10, q90 = bootstrap_quantiles(values, cfg.resamples, 0.1, seed=[cfg.seed, gi, mi])
    else:
        mean = q10 = q90 = math.nan
    counts = Counter(statuses)
    status = "ok" if counts == {"optimal": len(sims)} else "; ".join(
        f"{name} x{counts[name]}" for name in sorted(counts)
    )
    ms = int(round(1000.0 * (time.perf_counter() - t0)))
    ambiguity = {
        "family": res.kind,
        "p": cfg.p,
        "eps_hat": res.eps_hat,
        "rho_hat": res.rho_hat,
        "sigma": res.sigma,
    }
    return ResultRow(
        grid=grid_value,
        method=method.label,
        mean=mean,
        q10=q10,
        q90=q90,
        bound=math.inf,
        status=status,
        walltime_ms=ms,
        sigma_doublings=doublings,
        ambiguity=ambiguity,
    )


def overlay_bounds(rows, bound_inputs):
    """Attach the theoretical excess-risk bound and the mean <= bound flag.

    bound_inputs maps each grid value to the loss seminorms at the
    generating parameter: {"d", "lipschitz", "sobolev12"}. Methods with no
    moment cap get an infinite bound. The displacement constant comes from
    the closed-form resilience at doubled contamination, and the leading
    constant is taken as one, so the flag is an order-level check.
    """
    for row in rows:
        amb = row.ambiguity
        inp = bound_inputs.get(row.grid)
        if amb is None or inp is None or not math.isfinite(amb["sigma"]):
            row.bound = math.inf
            row.within_bound = bool(row.mean <= row.bound)
            continue
        if 2.0 * amb["eps_hat"] >= 1.0:
            row.bound = math.inf
            row.within_bound = True
            continue
        query = ResilienceQuery(
            amb["family"],
            eps=2.0 * amb["eps_hat"],
            p=amb["p"],
            sigma=amb["sigma"],
            d=inp["d"],
        )
        tau = resilience_bound(query)
        inputs = RiskBoundInputs(
            p=amb["p"],
            eps=amb["eps_hat"],
            rho=amb["rho_hat"],
            tau=tau,
            lipschitz=inp["lipschitz"],
            sobolev12=inp["sobolev12"],
            smoothness=0.0,  # piecewise-affine losses have no curvature
        )
        row.bound = risk_bound(inputs)
        row.within_bound = bool(math.isnan(row.mean) or row.mean <= row.bound)
    return rows


def run_experiment(cfg):
    """Simulate, fit, and aggregate every (grid point, method) cell.

    Deterministic given the config: simulation seeds are derived from
    (seed, grid index, trial) and bootstrap seeds from (seed, grid index,
    method index), so reruns reproduce every column except wall time.
    """
    rows = []
    bound_inputs = {}
    for gi, grid_value in enumerate(cfg.grid_points()):
        n, d = (grid_value, cfg.d) if cfg.grid == "n" else (cfg.n, grid_value)
        family = _loss_for(cfg, d)
        sims = [
            _simulate(cfg, n, d, [cfg.seed, gi, t]) for t in range(cfg.trials)
        ]
        lip = 0.0
        sob = 0.0
        for clean, _, theta_star in sims:
            rep = seminorms(family, theta_star, clean)
            lip = max(lip, rep.lipschitz)
            sob = max(sob, rep.sobolev12)
        bound_inputs[grid_value] = {
            "d": family.data_dim,
            "lipschitz": lip,
            "sobolev12": sob,
        }
        for mi, method in enumerate(cfg.methods):
            res = _resolve_method(method, cfg, family.data_dim)
            row = _run_cell(cfg, family, sims, method, res, gi, mi, grid_value)
            rows.append(row)
            log.info(
                "grid %s=%s %s: mean=%.6g status=%s %.1fs",
                cfg.grid,
                grid_value,
                method.label,
                row.mean,
                row.status,
                row.walltime_ms / 1000.0,
            )
    rows.sort(key=lambda r: (r.grid, r.method))
    return overlay_bounds(rows, bound_inputs)


def _fmt(x):
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


CSV_COLUMNS = ("grid", "method", "mean", "q10", "q90", "bound", "status", "walltime_ms")


def results_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow(
            [
                r.grid,
                r.method,
                _fmt(r.mean),
                _fmt(r.q10),
                _fmt(r.q90),
                _fmt(r.bound),
                r.status,
                r.walltime_ms,
            ]
        )
    return buf.getvalue()


def results_gnuplot(rows):
    """Index-block data file: one block per method, two blank lines apart."""
    methods = sorted({r.method for r in rows})
    blocks = []
    for m in methods:
        lines = [f"# method: {m}", "# grid mean q10 q90 bound"]
        for r in rows:
            if r.method == m:
                lines.append(
                    f"{r.grid} {_fmt(r.mean)} {_fmt(r.q10)} {_fmt(r.q90)} {_fmt(r.bound)}"
                )
        blocks.append("\n".join(lines))
    return "\n\n\n".join(blocks) + "\n"


def run_manifest(cfg, rows):
    doc = {
        "task": cfg.task,
        "grid": cfg.grid,
        "grid_values": list(cfg.grid_points()),
        "n": cfg.n,
        "d": cfg.d,
        "C": cfg.C,
        "rho": cfg.rho,
        "eps": cfg.eps,
        "p": cfg.p,
        "trials": cfg.trials,
        "resamples": cfg.resamples,
        "seed": cfg.seed,
        "methods": [m.label for m in cfg.methods],
        "rows": len(rows),
        "bound_violations": sum(1 for r in rows if r.within_bound is False),
        "sigma_doublings": [
            [r.grid, r.method, r.sigma_doublings]
            for r in rows
            if r.sigma_doublings
        ],
        "total_walltime_ms": sum(r.walltime_ms for r in rows),
    }
    if cfg.task == "multiregression":
        doc["k_out"] = cfg.k_out
    return doc


def write_outputs(cfg, rows, out_dir):
    """Write results.csv, results.dat (gnuplot blocks), and meta.json."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w") as fh:
        fh.write(results_csv(rows))
    with open(os.path.join(out_dir, "results.dat"), "w") as fh:
        fh.write(results_gnuplot(rows))
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(run_manifest(cfg, rows), fh, indent=1)
        fh.write("\n")
