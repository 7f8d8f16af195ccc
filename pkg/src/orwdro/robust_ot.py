"""Exact transport distances between discrete measures, with trimming.

Classical W_p and both trimmed variants are solved as a single linear
program each: trimming mass and transporting it are jointly linear in the
partial plan, so no nested search over contamination sets is needed. All
LPs route through the conic module's nonnegative-cone path. Masked ground
costs exclude atom pairs whose pinned coordinates differ; excluded pairs
simply get no plan variable.
"""

import itertools
import math

import numpy as np

from . import conic
from .measures import DiscreteMeasure, GroundCost, full_mask

MASS_TOL = 1e-9


def _feasible_pairs(mu, nu, cost):
    """(i, j, |x_T - y_T|^p) for pairs whose fixed coordinates agree exactly."""
    mask = cost.mask if cost.mask is not None else full_mask(mu.dim)
    if mask.dim != mu.dim or mu.dim != nu.dim:
        raise ValueError("dimension mismatch between measures and ground cost")
    t = mask.transported
    pairs = []
    for i in range(mu.n):
        xi = mu.support[i]
        for j in range(nu.n):
            yj = nu.support[j]
            if np.array_equal(xi[~t], yj[~t]):
                c = float(np.linalg.norm(xi[t] - yj[t]) ** cost.p)
                pairs.append((i, j, c))
    return pairs


def _plan_lp(mu, nu, cost, row_caps, col_caps, col_exact, total):
    """Shared LP core: min sum(c pi) over pi >= 0 with capped marginals.

    row_caps/col_caps are per-atom upper bounds; col_exact switches columns
    to equalities; total, if not None, pins the overall plan mass.
    Returns the optimal cost^p, or raises ValueError when no plan exists.
    """
    pairs = _feasible_pairs(mu, nu, cost)
    prog = conic.ConicProgram()
    pivars = prog.add_var("pi", len(pairs)) if pairs else np.zeros(0, dtype=int)
    if len(pairs) == 1:
        pivars = np.array([pivars])
    if pairs:
        prog.add_nonneg(pivars)
    by_row = [[] for _ in range(mu.n)]
    by_col = [[] for _ in range(nu.n)]
    for k, (i, j, c) in enumerate(pairs):
        by_row[i].append(k)
        by_col[j].append(k)
        prog.add_obj(pivars[k], c)
    for i in range(mu.n):
        ks = by_row[i]
        if not ks:
            if col_exact and row_caps[i] > MASS_TOL and total is None:
                raise ValueError("no transport plan respects the mask")
            continue
        slack = prog.add_var(f"row_slack[{i}]")
        prog.add_nonneg([slack])
        prog.add_eq(list(pivars[ks]) + [slack], [1.0] * len(ks) + [1.0], row_caps[i])
    for j in range(nu.n):
        ks = by_col[j]
        if not ks:
            if col_exact and col_caps[j] > MASS_TOL:
                raise ValueError("no transport plan respects the mask")
            continue
        if col_exact:
            prog.add_eq(pivars[ks], [1.0] * len(ks), col_caps[j])
        else:
            slack = prog.add_var(f"col_slack[{j}]")
            prog.add_nonneg([slack])
            prog.add_eq(list(pivars[ks]) + [slack], [1.0] * len(ks) + [1.0], col_caps[j])
    if total is not None:
        if not pairs:
            if total > MASS_TOL:
                raise ValueError("no transport plan respects the mask")
            return 0.0
        prog.add_eq(pivars, [1.0] * len(pairs), total)
    report = conic.solve(prog)
    if report.status == "infeasible":
        raise ValueError("no transport plan respects the mask")
    if report.status != "optimal":
        raise RuntimeError(f"transport LP ended with status {report.status}")
    return max(report.objective, 0.0)


def _wasserstein_1d(mu, nu, p):
    """Monotone quantile coupling; optimal on the line for convex costs."""
    ix = np.argsort(mu.support[:, 0])
    iy = np.argsort(nu.support[:, 0])
    xs, wx = mu.support[ix, 0], mu.weights[ix]
    ys, wy = nu.support[iy, 0], nu.weights[iy]
    i = j = 0
    ai, bj = wx[0], wy[0]
    total = 0.0
    while i < len(xs) and j < len(ys):
        m = min(ai, bj)
        total += m * abs(xs[i] - ys[j]) ** p
        ai -= m
        bj -= m
        if ai <= 1e-15:
            i += 1
            ai = wx[i] if i < len(xs) else 0.0
        if bj <= 1e-15:
            j += 1
            bj = wy[j] if j < len(ys) else 0.0
    return total


def wasserstein(mu, nu, cost, use_1d_fast_path=True):
    """W_p(mu, nu) under the masked ground cost."""
    if mu.dim != nu.dim:
        raise ValueError("dimension mismatch")
    mask = cost.mask if cost.mask is not None else full_mask(mu.dim)
    if use_1d_fast_path and mu.dim == 1 and mask.transported.all():
        return _wasserstein_1d(mu, nu, cost.p) ** (1.0 / cost.p)
    val = _plan_lp(mu, nu, cost, mu.weights, nu.weights, col_exact=True, total=None)
    return val ** (1.0 / cost.p)


def rwp_two_sided(mu, nu, eps, cost):
    """inf over trimmed mu' within TV distance eps of W_p(mu', nu).

    Equals the partial-transport LP that moves only 1 - eps mass, with the
    convention that a plan of total c is charged c * W_p(plan/c)^p.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    val = _plan_lp(mu, nu, cost, mu.weights, nu.weights, col_exact=False, total=1.0 - eps)
    return val ** (1.0 / cost.p)


def rwp_one_sided(mu_tilde, nu, eps, cost):
    """inf over mu' <= mu_tilde / (1 - eps) of W_p(mu', nu); nu kept whole."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    row_caps = mu_tilde.weights / (1.0 - eps)
    val = _plan_lp(mu_tilde, nu, cost, row_caps, nu.weights, col_exact=True, total=None)
    return val ** (1.0 / cost.p)


class ResilienceQuery:
    """Inputs for the worst-case transport displacement under deletion.

    family is "g2" (bounded second moment sigma about some center) or
    "gcov" (covariance bounded by identity, dimension d required).
    """

    def __init__(self, family, eps, p, sigma=1.0, d=None):
        if family not in ("g2", "gcov"):
            raise ValueError("family must be 'g2' or 'gcov'")
        if not 0.0 <= eps < 1.0:
            raise ValueError("eps must lie in [0, 1)")
        if not 1.0 <= p <= 2.0:
            raise ValueError("p must lie in [1, 2]")
        if family == "g2" and not sigma > 0:
            raise ValueError("g2 needs sigma > 0")
        if family == "gcov" and (d is None or d < 1):
            raise ValueError("gcov needs dimension d >= 1")
        self.family = family
        self.eps = float(eps)
        self.p = float(p)
        self.sigma = float(sigma)
        self.d = d


def resilience_bound(q):
    """4 sigma eps^(1/p - 1/2) (1 - eps)^(-1/p), with sigma -> sqrt(d) sigma
    for the covariance family. Zero contamination moves nothing."""
    if q.eps == 0.0:
        return 0.0
    sigma = q.sigma if q.family == "g2" else math.sqrt(q.d) * q.sigma
    return 4.0 * sigma * q.eps ** (1.0 / q.p - 0.5) * (1.0 - q.eps) ** (-1.0 / q.p)


def gamma_trim_1d(m, gamma):
    """Conditional law of m on its quantile window [gamma, 1 - gamma]."""
    if not 0.0 <= gamma < 0.5:
        raise ValueError("gamma must lie in [0, 1/2)")
    if m.dim != 1:
        raise ValueError("gamma_trim_1d needs a one-dimensional measure")
    if gamma == 0.0:
        return m
    order = np.argsort(m.support[:, 0], kind="stable")
    xs = m.support[order]
    ws = m.weights[order]
    hi_cum = np.cumsum(ws)
    lo_cum = hi_cum - ws
    # overlap of each atom's quantile interval with the kept window
    kept = np.minimum(hi_cum, 1.0 - gamma) - np.maximum(lo_cum, gamma)
    keep = kept > MASS_TOL
    return DiscreteMeasure(xs[keep], kept[keep] / (1.0 - 2.0 * gamma))


def tau_p_exhaustive(m, eps, p):
    """Worst W_p displacement of m under deleting eps mass, exactly.

    Enumerates the vertices of the deletion polytope (a subset removed
    whole plus at most one fractional atom); the objective is quasi-convex
    in the deletion, so a vertex attains the supremum. Exponential in n by
    design; refuses n > 8.
    """
    if m.n > 8:
        raise ValueError("exhaustive resilience is limited to n <= 8 atoms")
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    if eps == 0.0:
        return 0.0
    cost = GroundCost(p=p, mask=full_mask(m.dim))
    w = m.weights
    best = 0.0
    for r in range(m.n):
        for subset in itertools.combinations(range(m.n), r):
            ws = sum(w[i] for i in subset)
            if ws > eps + MASS_TOL:
                continue
            rem = eps - ws
            partials = [None] if rem <= MASS_TOL else [
                k for k in range(m.n) if k not in subset and w[k] >= rem - MASS_TOL
            ]
            for k in partials:
                deleted = np.zeros(m.n)
                deleted[list(subset)] = w[list(subset)]
                if k is not None:
                    deleted[k] += rem
                new_w = (w - deleted) / (1.0 - eps)
                keep = new_w > MASS_TOL
                trimmed = DiscreteMeasure(m.support[keep], new_w[keep] / new_w[keep].sum())
                best = max(best, wasserstein(m, trimmed, cost))
    return best
