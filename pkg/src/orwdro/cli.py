"""Command line front end.

Subcommands: rwp (robust transport distance), eval (inner worst case at a
fixed parameter), fit (joint minimization), worst-case (extract the
attaining distribution), mean (robust location estimates), simulate
(corruption generators), experiment (grid runs from a config file).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

import numpy as np

from .corruption import (
    RegressionCorruption,
    corrupt_classification,
    corrupt_multiregression,
    corrupt_regression,
)
from .experiments import load_config, run_experiment, write_outputs
from .losses import (
    hinge,
    l1_multiregression,
    load_custom_loss,
    mad_regression,
    pieces_at,
)
from .measures import (
    GroundCost,
    TransportMask,
    full_mask,
    load_dataset_csv,
    save_dataset_csv,
    save_weighted_csv,
)
from .reformulate import (
    AmbiguitySpec,
    G2,
    Gcov,
    eval_inner,
    extract_worst_case,
    joint_fit,
    resolve_z0,
    solve_worst_case,
)
from .robust_ot import rwp_one_sided, rwp_two_sided
from .robust_stats import TrimSpec, iterative_filter_mean, trimmed_mean


def _fmt(x):
    return format(float(x), ".10g")


def _fmt_vec(v):
    return ",".join(_fmt(x) for x in np.asarray(v).ravel())


def _parse_sigma(text):
    if text == "inf":
        return math.inf
    val = float(text)
    if not val > 0:
        raise argparse.ArgumentTypeError("sigma must be positive or 'inf'")
    return val


def _parse_theta(text):
    if text.startswith("@"):
        with open(text[1:]) as fh:
            text = fh.read()
    return np.array([float(t) for t in text.replace(",", " ").split()])


def _ambiguity_flags(sub):
    sub.add_argument("--p", type=int, choices=(1, 2), default=1)
    sub.add_argument("--eps", type=float, default=0.0, help="trimming level")
    sub.add_argument("--rho", type=float, default=0.1, help="transport radius")
    sub.add_argument("--family", choices=("g2", "gcov"), default="g2")
    sub.add_argument(
        "--sigma",
        type=_parse_sigma,
        default=math.inf,
        help="moment cap; 'inf' disables it (second-moment family only)",
    )
    sub.add_argument(
        "--z0",
        default="origin",
        help="cap center: origin, trimmed, filter, or @FILE with one vector",
    )
    sub.add_argument("--tol", type=float, default=1e-7)


def _loss_flags(sub):
    sub.add_argument(
        "--loss",
        default="mad",
        help="mad, hinge, multireg, or a path to a custom-loss JSON file",
    )
    sub.add_argument("--k-out", type=int, default=2, help="multireg response count")


def _resolve_loss(args, dim):
    if args.loss == "mad":
        return mad_regression(dim)
    if args.loss == "hinge":
        return hinge(dim)
    if args.loss == "multireg":
        return l1_multiregression(dim - args.k_out, args.k_out)
    return load_custom_loss(args.loss)


def _resolve_spec(args, data):
    if args.z0.startswith("@"):
        z0 = _parse_theta(args.z0)
    else:
        z0 = resolve_z0(data, args.z0, eps=args.eps)
    if args.family == "g2":
        family = G2(sigma=args.sigma, z0=z0)
    else:
        family = Gcov(sigma=args.sigma, z0=z0)
    return AmbiguitySpec(p=args.p, eps=args.eps, rho=args.rho, family=family)


def _load_measure(path):
    measure, mask = load_dataset_csv(path)
    return measure, mask


def cmd_rwp(args):
    mu, mask_mu = _load_measure(args.mu)
    nu, mask_nu = _load_measure(args.nu)
    mask = mask_mu or mask_nu
    if mask_mu is not None and mask_nu is not None:
        if not np.array_equal(mask_mu.transported, mask_nu.transported):
            raise SystemExit("the two datasets carry different transport masks")
    cost = GroundCost(args.p, mask if mask is not None else full_mask(mu.dim))
    if args.one_sided:
        val = rwp_one_sided(mu, nu, args.eps, cost)
    else:
        val = rwp_two_sided(mu, nu, args.eps, cost)
    print(_fmt(val))
    return 0


def cmd_eval(args):
    data, _ = _load_measure(args.data)
    family = _resolve_loss(args, data.dim)
    spec = _resolve_spec(args, data)
    theta = _parse_theta(args.theta)
    sol = eval_inner(family, theta, data, spec, tol=args.tol)
    print(f"value {_fmt(sol.value) if not math.isnan(sol.value) else 'nan'}")
    print(f"status {sol.status}")
    if sol.diagnostic:
        print(sol.diagnostic, file=sys.stderr)
    return 0 if sol.status in ("optimal", "inaccurate") else 1


def cmd_fit(args):
    data, _ = _load_measure(args.data)
    family = _resolve_loss(args, data.dim)
    spec = _resolve_spec(args, data)
    source = "given" if args.z0.startswith("@") else args.z0
    fit = joint_fit(family, data, spec, z0_source=source, tol=args.tol)
    if fit.theta is not None:
        print(f"theta {_fmt_vec(fit.theta)}")
    print(f"value {_fmt(fit.value) if not math.isnan(fit.value) else 'nan'}")
    print(f"status {fit.status}")
    if fit.diagnostic:
        print(fit.diagnostic, file=sys.stderr)
    return 0 if fit.status in ("optimal", "inaccurate") else 1


def cmd_worst_case(args):
    data, _ = _load_measure(args.data)
    family = _resolve_loss(args, data.dim)
    spec = _resolve_spec(args, data)
    theta = _parse_theta(args.theta)
    t = family.mask.transported
    pieces = [pieces_at(family, theta, data.support[i][~t]) for i in range(data.n)]
    sol = solve_worst_case(pieces, data, spec, mask=family.mask, tol=args.tol)
    if sol.status != "optimal":
        print(f"status {sol.status}", file=sys.stderr)
        if sol.diagnostic:
            print(sol.diagnostic, file=sys.stderr)
        return 1
    nu = extract_worst_case(sol)
    save_weighted_csv(args.out, nu)
    print(f"value {_fmt(sol.value)}")
    print(f"atoms {nu.n}")
    print(f"wrote {args.out}")
    return 0


def cmd_mean(args):
    data, _ = _load_measure(args.data)
    if args.method == "trimmed":
        est = trimmed_mean(data, TrimSpec())
    else:
        # same clamp as the fit-time policy: the filter is stated for eps <= 1/12
        est = iterative_filter_mean(data, min(args.eps, 1.0 / 12.0))
    print(_fmt_vec(est))
    return 0


def cmd_simulate(args):
    if args.task == "regression":
        plan = RegressionCorruption(C=args.C, rho=args.rho, eps=args.eps, p=args.p)
        clean, corrupted, theta = corrupt_regression(args.n, args.d, plan, args.seed)
        mask = None
    elif args.task == "classification":
        clean, corrupted, theta = corrupt_classification(
            args.n, args.d, args.rho, args.eps, args.seed
        )
        mask = TransportMask(np.array([True] * (args.d - 1) + [False]))
    else:
        clean, corrupted, theta = corrupt_multiregression(
            args.n, args.d, args.k_out, args.rho, args.eps, args.seed
        )
        mask = None
    save_dataset_csv(args.out_clean, clean, mask)
    save_dataset_csv(args.out_corrupted, corrupted, mask)
    meta = {
        "task": args.task,
        "n": args.n,
        "d": args.d,
        "rho": args.rho,
        "eps": args.eps,
        "seed": args.seed,
        "theta_star": np.asarray(theta).tolist(),
    }
    if args.task == "regression":
        meta["C"] = args.C
        meta["p"] = args.p
    if args.task == "multiregression":
        meta["k_out"] = args.k_out
    with open(args.out_meta, "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")
    print(f"wrote {args.out_clean} {args.out_corrupted} {args.out_meta}")
    return 0


def cmd_experiment(args):
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
    )
    cfg = load_config(args.config)
    rows = run_experiment(cfg)
    write_outputs(cfg, rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}/results.csv")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="orwdro", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    s = subs.add_parser("rwp", help="robust transport distance between two datasets")
    s.add_argument("mu")
    s.add_argument("nu")
    s.add_argument("--p", type=int, choices=(1, 2), default=1)
    s.add_argument("--eps", type=float, default=0.0)
    s.add_argument(
        "--one-sided",
        action="store_true",
        help="trim only the first argument; the second is kept whole",
    )
    s.set_defaults(func=cmd_rwp)

    s = subs.add_parser("eval", help="inner worst-case value at a fixed parameter")
    s.add_argument("data")
    s.add_argument("--theta", required=True, help="comma separated, or @FILE")
    _loss_flags(s)
    _ambiguity_flags(s)
    s.set_defaults(func=cmd_eval)

    s = subs.add_parser("fit", help="minimize the worst case over the parameter")
    s.add_argument("data")
    _loss_flags(s)
    _ambiguity_flags(s)
    s.set_defaults(func=cmd_fit)

    s = subs.add_parser("worst-case", help="extract the worst-case distribution")
    s.add_argument("data")
    s.add_argument("--theta", required=True)
    s.add_argument("--out", required=True, help="weighted-CSV output path")
    _loss_flags(s)
    _ambiguity_flags(s)
    s.set_defaults(func=cmd_worst_case)

    s = subs.add_parser("mean", help="robust mean of a dataset")
    s.add_argument("data")
    s.add_argument("--method", choices=("trimmed", "filter"), default="trimmed")
    s.add_argument("--eps", type=float, default=0.1, help="filter contamination level")
    s.set_defaults(func=cmd_mean)

    s = subs.add_parser("simulate", help="generate paired clean/corrupted samples")
    s.add_argument("task", choices=("regression", "classification", "multiregression"))
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--C", type=float, default=8.0)
    s.add_argument("--rho", type=float, default=0.1)
    s.add_argument("--eps", type=float, default=0.1)
    s.add_argument("--p", type=int, choices=(1, 2), default=1)
    s.add_argument("--k-out", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-clean", required=True)
    s.add_argument("--out-corrupted", required=True)
    s.add_argument("--out-meta", required=True)
    s.set_defaults(func=cmd_simulate)

    s = subs.add_parser("experiment", help="run a grid experiment from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--verbose", action="store_true", help="progress lines on stderr")
    s.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
