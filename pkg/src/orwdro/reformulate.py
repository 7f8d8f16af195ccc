"""Worst-case expectation programs over trimmed transport balls.

Given an empirical sample, a radius rho in RW_p, and a moment family
(second moment about z0, or covariance about z0), the inner adversary

    sup { E_nu[loss] : nu in family, RW_p(sample || nu) <= rho }

is an exact conic program in either direction: a dual minimization built
from piece conjugates (SOCP for the second-moment family, SDP for the
covariance family) and, for the second-moment family, a primal
maximization over homogenized atom locations whose solution yields the
worst-case distribution itself. Piece coefficients may be affine in a
learner parameter theta, in which case the dual minimization absorbs theta
as extra variables and the min-max collapses into one solve (joint_fit).

Points may carry a pinned block (labels): transport and loss read only the
transported block, while moment caps act on the full vector, contributing
per-sample constants that are threaded through both duals and the primal.

sigma = math.inf is the documented sentinel for "no moment cap": the
second-moment multiplier and its terms are dropped rather than scaled by a
huge number.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import robust_stats
from .conic import Ball, Box, ConicProgram, FullSpace, add_perspective_h, add_support_fn_term, solve
from .losses import pieces_at as losses_pieces_at
from .measures import DiscreteMeasure, full_mask

RHO_FLOOR = 1e-9


@dataclass(frozen=True)
class G2:
    """Second moment about z0 capped by sigma^2; sigma may be math.inf."""

    sigma: float
    z0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z0", np.asarray(self.z0, dtype=float).ravel())
        if not (self.sigma > 0):
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class Gcov:
    """Centered second-moment matrix about z0 capped by sigma^2 I."""

    sigma: float
    z0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z0", np.asarray(self.z0, dtype=float).ravel())
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError("sigma must be positive and finite for the covariance family")


@dataclass(frozen=True)
class AmbiguitySpec:
    p: int
    eps: float
    rho: float
    family: object

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")
        if not 0.0 <= self.eps < 1.0:
            raise ValueError("eps must lie in [0, 1)")
        if not (self.rho >= 0.0 and math.isfinite(self.rho)):
            raise ValueError("rho must be finite and nonnegative")
        if not isinstance(self.family, (G2, Gcov)):
            raise ValueError("family must be G2 or Gcov")


def _effective_rho(spec):
    if spec.rho == 0.0:
        warnings.warn("rho = 0 breaks strict feasibility; bumped to 1e-9", stacklevel=3)
        return RHO_FLOOR
    return spec.rho


def _resolve_pieces(pieces, n):
    """Accept one shared piece list [(a, b), ...] or one list per sample."""
    if len(pieces) == 0:
        raise ValueError("at least one loss piece is required")
    first = pieces[0]
    shared = (
        isinstance(first, (tuple, list))
        and len(first) == 2
        and np.isscalar(first[1])
    )
    if shared:
        rows = [(np.asarray(a, dtype=float).ravel(), float(b)) for a, b in pieces]
        return [rows] * n
    if len(pieces) != n:
        raise ValueError("per-sample pieces must have one list per sample")
    return [
        [(np.asarray(a, dtype=float).ravel(), float(b)) for a, b in lst]
        for lst in pieces
    ]


def _const_rows(rows):
    """Wrap constant pieces in the (a0, b0, A, B) form used by assembly."""
    return [[(a, b, None, None) for a, b in lst] for lst in rows]


def _accum_eq(prog, terms, rhs):
    acc = {}
    for idx, coeff in terms:
        if coeff != 0.0:
            acc[int(idx)] = acc.get(int(idx), 0.0) + float(coeff)
    if not acc:
        if abs(rhs) > 1e-12:
            raise ValueError("constant row with nonzero right-hand side")
        return
    prog.add_eq(list(acc.keys()), list(acc.values()), rhs)


def _instance_frame(data, spec, mask):
    """Shared geometry: transported slice of atoms, split center, per-sample
    fixed-block moment constants."""
    t = mask.transported
    if mask.dim != data.dim:
        raise ValueError("mask dimension does not match the data")
    z0 = spec.family.z0
    if z0.size != data.dim:
        raise ValueError("z0 must live in the full data space")
    x_t = data.support[:, t]
    f_rows = data.support[:, ~t]
    z0_t, z0_f = z0[t], z0[~t]
    c = np.array([float(np.sum((f_rows[i] - z0_f) ** 2)) for i in range(data.n)])
    return t, x_t, f_rows, z0_t, z0_f, c


def _domain_dim_check(z_domain, d_t):
    if isinstance(z_domain, Box) and z_domain.lower.size != d_t:
        raise ValueError("domain box must match the transported dimension")
    if isinstance(z_domain, Ball) and z_domain.center.size != d_t:
        raise ValueError("domain ball must match the transported dimension")


# ---------------------------------------------------------------------------
# Dual builders
# ---------------------------------------------------------------------------


def _assemble_dual_i(data, spec, z_domain, mask, rows, theta_dim):
    if not isinstance(spec.family, G2):
        raise ValueError("this dual handles the second-moment family; use the covariance builder")
    t, x_t, f_rows, z0_t, z0_f, c = _instance_frame(data, spec, mask)
    d_t = int(t.sum())
    _domain_dim_check(z_domain, d_t)
    n = data.n
    rho = _effective_rho(spec)
    sigma = spec.family.sigma
    finite_sigma = math.isfinite(sigma)
    full_space = isinstance(z_domain, FullSpace)

    prog = ConicProgram("min")
    lam2 = prog.add_var("lam2")
    alpha = prog.add_var("alpha")
    s = prog.add_var("s", n)
    if n == 1:
        s = np.array([s])
    prog.add_nonneg([lam2])
    prog.add_nonneg(s)
    prog.add_obj(lam2, rho ** spec.p)
    prog.add_obj(alpha, 1.0)
    # trimming caps are per-atom: mu' <= weights / (1 - eps)
    prog.add_obj(s, data.weights / (1.0 - spec.eps))
    lam1 = None
    if finite_sigma:
        lam1 = prog.add_var("lam1")
        prog.add_nonneg([lam1])
        prog.add_obj(lam1, sigma ** 2)
    theta = None
    if theta_dim:
        theta = prog.add_var("theta", theta_dim)
        if theta_dim == 1:
            theta = np.array([theta])

    layout = {
        "kind": "dual1", "n": n, "d_t": d_t, "mask": mask, "spec": spec,
        "rows": rows, "z_domain": z_domain, "data": data,
        "lam1": lam1, "lam2": lam2, "alpha": alpha, "s": s, "theta": theta,
        "zW": [], "zG": [], "thalf": [], "zZ": [], "tper": [],
    }

    for i in range(n):
        zw_i, zg_i, th_i, zz_i, tp_i = [], [], [], [], []
        for j, (a0, b0, a_map, b_map) in enumerate(rows[i]):
            if a0.size != d_t:
                raise ValueError("piece slope must match the transported dimension")
            zw = np.atleast_1d(prog.add_var(f"zW[{i},{j}]", d_t))
            srow = [(s[i], 1.0), (alpha, 1.0)]
            srow += [(zw[k], -x_t[i, k]) for k in range(d_t)]
            zg = th = None
            if finite_sigma:
                zg = np.atleast_1d(prog.add_var(f"zG[{i},{j}]", d_t))
                # 2 lam1 th >= |zG|^2, so th/2 bounds the conjugate |zG|^2/(4 lam1)
                th = prog.add_var(f"tauq[{i},{j}]")
                prog.add_rsoc(lam1, th, zg)
                srow += [(zg[k], -z0_t[k]) for k in range(d_t)]
                srow.append((th, -0.5))
                srow.append((lam1, c[i]))
            zz = None
            if not full_space:
                zz = np.atleast_1d(prog.add_var(f"zZ[{i},{j}]", d_t))
                srow += [(idx, -coeff) for idx, coeff in add_support_fn_term(prog, zz, z_domain)]
            tper = add_perspective_h(prog, zw, lam2, spec.p)
            if tper is not None:
                srow.append((tper, -1.0))
            for k in range(d_t):
                row_k = [(zw[k], 1.0)]
                if zg is not None:
                    row_k.append((zg[k], 1.0))
                if zz is not None:
                    row_k.append((zz[k], 1.0))
                if theta is not None and a_map is not None:
                    row_k += [(theta[m], -a_map[k, m]) for m in range(theta_dim)]
                _accum_eq(prog, row_k, a0[k])
            if theta is not None and b_map is not None:
                srow += [(theta[m], -b_map[m]) for m in range(theta_dim)]
            g = prog.add_var(f"srow_slack[{i},{j}]")
            prog.add_nonneg([g])
            srow.append((g, -1.0))
            _accum_eq(prog, srow, b0)
            zw_i.append(zw)
            zg_i.append(zg)
            th_i.append(th)
            zz_i.append(zz)
            tp_i.append(tper)
        layout["zW"].append(zw_i)
        layout["zG"].append(zg_i)
        layout["thalf"].append(th_i)
        layout["zZ"].append(zz_i)
        layout["tper"].append(tp_i)
    prog.layout = layout
    return prog


def build_inner_dual_I(pieces, data, spec, z_domain=None, mask=None):
    """Dual minimization for the second-moment family.

    pieces: one shared [(slope, offset)] list or one list per sample,
    slopes over the transported block. Solving the program gives the inner
    sup; solve_inner packages the multipliers.
    """
    mask = mask if mask is not None else full_mask(data.dim)
    z_domain = z_domain if z_domain is not None else FullSpace()
    rows = _const_rows(_resolve_pieces(pieces, data.n))
    return _assemble_dual_i(data, spec, z_domain, mask, rows, theta_dim=0)


def _assemble_dual_ii(data, spec, z_domain, mask, rows, theta_dim):
    if not isinstance(spec.family, Gcov):
        raise ValueError("this dual handles the covariance family")
    t, x_t, f_rows, z0_t, z0_f, c = _instance_frame(data, spec, mask)
    d = data.dim
    d_t = int(t.sum())
    _domain_dim_check(z_domain, d_t)
    t_idx = np.where(t)[0]
    f_idx = np.where(~t)[0]
    n = data.n
    rho = _effective_rho(spec)
    sigma = spec.family.sigma
    z0 = spec.family.z0
    full_space = isinstance(z_domain, FullSpace)

    prog = ConicProgram("min")
    # upper triangle of the moment multiplier matrix, shared symmetric entries
    lmat = np.zeros((d, d), dtype=int)
    for aa in range(d):
        for bb in range(aa, d):
            v = prog.add_var(f"L[{aa},{bb}]")
            lmat[aa, bb] = v
            lmat[bb, aa] = v
    prog.add_psd(lmat)
    lam2 = prog.add_var("lam2")
    alpha = prog.add_var("alpha")
    s = prog.add_var("s", n)
    if n == 1:
        s = np.array([s])
    prog.add_nonneg([lam2])
    prog.add_nonneg(s)
    prog.add_obj(lam2, rho ** spec.p)
    prog.add_obj(alpha, 1.0)
    prog.add_obj(s, data.weights / (1.0 - spec.eps))
    for aa in range(d):
        prog.add_obj(lmat[aa, aa], sigma ** 2)
    # -z0' Lambda z0 restricted to the transported block; the fixed-block
    # remainder is sample-dependent and lives in the s rows below
    for ka, aa in enumerate(t_idx):
        for kb, bb in enumerate(t_idx):
            if bb < aa:
                continue
            prog.add_obj(lmat[aa, bb], -(2.0 - (aa == bb)) * z0[aa] * z0[bb])
    theta = None
    if theta_dim:
        theta = prog.add_var("theta", theta_dim)
        if theta_dim == 1:
            theta = np.array([theta])

    layout = {
        "kind": "dual2", "n": n, "d_t": d_t, "mask": mask, "spec": spec,
        "rows": rows, "z_domain": z_domain, "data": data, "lmat": lmat,
        "lam2": lam2, "alpha": alpha, "s": s, "theta": theta,
        "zW": [], "zG": [], "c4": [], "zZ": [], "tper": [],
    }

    for i in range(n):
        delta = f_rows[i] - z0_f
        zw_i, zg_i, c4_i, zz_i, tp_i = [], [], [], [], []
        for j, (a0, b0, a_map, b_map) in enumerate(rows[i]):
            if a0.size != d_t:
                raise ValueError("piece slope must match the transported dimension")
            zw = np.atleast_1d(prog.add_var(f"zW[{i},{j}]", d_t))
            zg = np.atleast_1d(prog.add_var(f"zG[{i},{j}]", d_t))
            c4 = prog.add_var(f"c4[{i},{j}]")  # Schur corner, equals 4 tau
            schur = np.zeros((d_t + 1, d_t + 1), dtype=int)
            schur[:d_t, :d_t] = lmat[np.ix_(t_idx, t_idx)]
            schur[:d_t, d_t] = zg
            schur[d_t, :d_t] = zg
            schur[d_t, d_t] = c4
            prog.add_psd(schur)
            srow = [(s[i], 1.0), (alpha, 1.0), (c4, -0.25)]
            srow += [(zw[k], -x_t[i, k]) for k in range(d_t)]
            # fixed-block remainder of -(Z - z0)' Lambda (Z - z0)
            for ka, aa in enumerate(t_idx):
                for kf, ff in enumerate(f_idx):
                    srow.append((lmat[aa, ff], -2.0 * z0[aa] * delta[kf]))
            for ka, ff in enumerate(f_idx):
                for kb, gg in enumerate(f_idx):
                    if gg < ff:
                        continue
                    srow.append((lmat[ff, gg], (2.0 - (ff == gg)) * delta[ka] * delta[kb]))
            zz = None
            if not full_space:
                zz = np.atleast_1d(prog.add_var(f"zZ[{i},{j}]", d_t))
                srow += [(idx, -coeff) for idx, coeff in add_support_fn_term(prog, zz, z_domain)]
            tper = add_perspective_h(prog, zw, lam2, spec.p)
            if tper is not None:
                srow.append((tper, -1.0))
            for k in range(d_t):
                aa = t_idx[k]
                row_k = [(zw[k], 1.0), (zg[k], 1.0)]
                if zz is not None:
                    row_k.append((zz[k], 1.0))
                for u in range(d):
                    coeff = -2.0 * (z0[u] if t[u] else -(data.support[i, u] - z0[u]))
                    row_k.append((lmat[aa, u], coeff))
                if theta is not None and a_map is not None:
                    row_k += [(theta[m], -a_map[k, m]) for m in range(theta_dim)]
                _accum_eq(prog, row_k, a0[k])
            if theta is not None and b_map is not None:
                srow += [(theta[m], -b_map[m]) for m in range(theta_dim)]
            g = prog.add_var(f"srow_slack[{i},{j}]")
            prog.add_nonneg([g])
            srow.append((g, -1.0))
            _accum_eq(prog, srow, b0)
            zw_i.append(zw)
            zg_i.append(zg)
            c4_i.append(c4)
            zz_i.append(zz)
            tp_i.append(tper)
        layout["zW"].append(zw_i)
        layout["zG"].append(zg_i)
        layout["c4"].append(c4_i)
        layout["zZ"].append(zz_i)
        layout["tper"].append(tp_i)
    prog.layout = layout
    return prog


def build_inner_dual_II(pieces, data, spec, z_domain=None, mask=None):
    """Dual minimization for the covariance family (semidefinite)."""
    mask = mask if mask is not None else full_mask(data.dim)
    z_domain = z_domain if z_domain is not None else FullSpace()
    rows = _const_rows(_resolve_pieces(pieces, data.n))
    return _assemble_dual_ii(data, spec, z_domain, mask, rows, theta_dim=0)


# ---------------------------------------------------------------------------
# Solution packaging
# ---------------------------------------------------------------------------


@dataclass
class DualSolutionI:
    lambda1: float
    lambda2: float
    alpha: float
    s: np.ndarray
    tau: list  # per (i, j)
    zeta_loss: list  # -slope of the active piece map, per (i, j)
    zeta_moment: list
    zeta_transport: list
    zeta_domain: list
    objective: float
    splitting_residual: float


@dataclass
class DualSolutionII:
    Lambda1: np.ndarray
    lambda2: float
    alpha: float
    s: np.ndarray
    tau: list
    zeta_loss: list
    zeta_moment: list
    zeta_transport: list
    zeta_domain: list
    objective: float
    splitting_residual: float


@dataclass
class InnerSolution:
    value: float
    status: str
    diagnostic: str
    dual: object
    report: object
    program: ConicProgram


def _diagnose(status, spec):
    if status == "unbounded":
        return (
            "dual minimization is unbounded below, so no distribution meets both "
            f"budgets (transport radius rho={spec.rho:g}, moment cap sigma="
            f"{spec.family.sigma:g}); strict feasibility fails -- enlarge rho or sigma"
        )
    if status == "infeasible":
        return (
            "dual minimization is infeasible, so the worst-case expectation is "
            "unbounded above (the loss outgrows the transport and moment penalties); "
            "shrink rho, bound the domain, or use a finite sigma"
        )
    if status == "inaccurate":
        return "solver stopped short of the target tolerance; treat the value as approximate"
    return ""


def _resolved_slopes(layout, x):
    theta = layout["theta"]
    th = x[theta] if theta is not None else None
    out = []
    for lst in layout["rows"]:
        row = []
        for a0, b0, a_map, b_map in lst:
            a = a0 if (th is None or a_map is None) else a0 + a_map @ th
            row.append(a)
        out.append(row)
    return out


def _package_dual(layout, report):
    x = report.primal
    n, d_t = layout["n"], layout["d_t"]
    slopes = _resolved_slopes(layout, x)
    is_two = layout["kind"] == "dual2"
    spec = layout["spec"]
    t = layout["mask"].transported
    t_idx = np.where(t)[0]
    zl, zg, zw, zz, tau = [], [], [], [], []
    resid = 0.0
    if is_two:
        d = layout["data"].dim
        lam_mat = x[layout["lmat"]]
        z0 = spec.family.z0
    for i in range(n):
        zl_i, zg_i, zw_i, zz_i, tau_i = [], [], [], [], []
        for j in range(len(layout["rows"][i])):
            a = slopes[i][j]
            zl_i.append(-a)
            gw = x[layout["zW"][i][j]]
            zw_i.append(gw)
            gg = x[layout["zG"][i][j]] if layout["zG"][i][j] is not None else np.zeros(d_t)
            zg_i.append(gg)
            gz = x[layout["zZ"][i][j]] if layout["zZ"][i][j] is not None else np.zeros(d_t)
            zz_i.append(gz)
            if is_two:
                tau_i.append(float(x[layout["c4"][i][j]]) / 4.0)
                delta_full = layout["data"].support[i] - z0
                delta_full[t_idx] = 0.0
                rhs = 2.0 * (lam_mat @ (np.where(t, z0, 0.0) - delta_full))[t_idx]
            else:
                tau_i.append(0.5 * float(x[layout["thalf"][i][j]])
                             if layout["thalf"][i][j] is not None else 0.0)
                rhs = np.zeros(d_t)
            resid = max(resid, float(np.max(np.abs(gg + gw + gz - a - rhs))))
        zl.append(zl_i)
        zg.append(zg_i)
        zw.append(zw_i)
        zz.append(zz_i)
        tau.append(tau_i)
    common = dict(
        lambda2=float(x[layout["lam2"]]), alpha=float(x[layout["alpha"]]),
        s=np.asarray(x[layout["s"]], dtype=float), tau=tau, zeta_loss=zl,
        zeta_moment=zg, zeta_transport=zw, zeta_domain=zz,
        objective=float(report.objective), splitting_residual=resid,
    )
    if is_two:
        return DualSolutionII(Lambda1=lam_mat, **common)
    lam1 = float(x[layout["lam1"]]) if layout["lam1"] is not None else 0.0
    return DualSolutionI(lambda1=lam1, **common)


def solve_inner(prog, tol=1e-7):
    """Solve a built dual program and package value, status, multipliers."""
    report = solve(prog, tol=tol)
    layout = prog.layout
    diagnostic = _diagnose(report.status, layout["spec"])
    dual = None
    if report.status in ("optimal", "inaccurate") and report.primal is not None:
        dual = _package_dual(layout, report)
    value = report.objective if report.status in ("optimal", "inaccurate") else math.nan
    if report.status == "infeasible":
        value = math.inf
    return InnerSolution(value, report.status, diagnostic, dual, report, prog)


def eval_inner(family, theta, data, spec, z_domain=None, tol=1e-7):
    """Inner worst-case value of a loss family at a fixed parameter."""
    t = family.mask.transported
    pieces = [
        losses_pieces_at(family, theta, data.support[i][~t]) for i in range(data.n)
    ]
    if isinstance(spec.family, G2):
        prog = build_inner_dual_I(pieces, data, spec, z_domain=z_domain, mask=family.mask)
    else:
        prog = build_inner_dual_II(pieces, data, spec, z_domain=z_domain, mask=family.mask)
    return solve_inner(prog, tol=tol)


# ---------------------------------------------------------------------------
# Worst-case primal and extraction
# ---------------------------------------------------------------------------


def build_worst_case_primal(pieces, data, spec, z_domain=None, mask=None):
    """Maximization over homogenized atoms (q_ij, xi_ij); second-moment
    family only. Optimal value matches the dual; atoms give the distribution."""
    if not isinstance(spec.family, G2):
        raise ValueError("the worst-case primal is stated for the second-moment family only")
    mask = mask if mask is not None else full_mask(data.dim)
    z_domain = z_domain if z_domain is not None else FullSpace()
    rows = _resolve_pieces(pieces, data.n)
    t, x_t, f_rows, z0_t, z0_f, c = _instance_frame(data, spec, mask)
    d_t = int(t.sum())
    _domain_dim_check(z_domain, d_t)
    n = data.n
    rho = _effective_rho(spec)
    sigma = spec.family.sigma
    finite_sigma = math.isfinite(sigma)
    caps = data.weights / (1.0 - spec.eps)

    prog = ConicProgram("max")
    layout = {
        "kind": "worst_case", "n": n, "d_t": d_t, "mask": mask, "spec": spec,
        "rows": rows, "data": data, "z_domain": z_domain,
        "q": [], "xi": [],
    }
    transport_terms = []
    moment_terms = []
    total_terms = []
    for i in range(n):
        q_i, xi_i = [], []
        row_terms = []
        for j, (a, b) in enumerate(rows[i]):
            if a.size != d_t:
                raise ValueError("piece slope must match the transported dimension")
            q = prog.add_var(f"q[{i},{j}]")
            prog.add_nonneg([q])
            xi = np.atleast_1d(prog.add_var(f"xi[{i},{j}]", d_t))
            prog.add_obj(q, b)
            prog.add_obj(xi, a)
            row_terms.append((q, 1.0))
            total_terms.append((q, 1.0))
            # transport displacement e = xi - q * sample_i
            e = np.atleast_1d(prog.add_var(f"e[{i},{j}]", d_t))
            for k in range(d_t):
                prog.add_eq([e[k], xi[k], q], [1.0, -1.0, x_t[i, k]], 0.0)
            if spec.p == 1:
                tv = prog.add_var(f"tnorm[{i},{j}]")
                prog.add_soc(tv, e)
                transport_terms.append((tv, 1.0))
            else:
                tv = prog.add_var(f"tquad[{i},{j}]")
                prog.add_rsoc(tv, q, e)
                transport_terms.append((tv, 2.0))
            if finite_sigma:
                gvec = np.atleast_1d(prog.add_var(f"g[{i},{j}]", d_t))
                for k in range(d_t):
                    prog.add_eq([gvec[k], xi[k], q], [1.0, -1.0, z0_t[k]], 0.0)
                mv = prog.add_var(f"mquad[{i},{j}]")
                prog.add_rsoc(mv, q, gvec)
                moment_terms.append((mv, 2.0))
                if c[i] != 0.0:
                    moment_terms.append((q, c[i]))
            if isinstance(z_domain, Box):
                for k in range(d_t):
                    up = prog.add_var(f"zbox_hi[{i},{j},{k}]")
                    lo = prog.add_var(f"zbox_lo[{i},{j},{k}]")
                    prog.add_nonneg([up, lo])
                    prog.add_eq([xi[k], q, up], [1.0, -z_domain.upper[k], 1.0], 0.0)
                    prog.add_eq([xi[k], q, lo], [1.0, -z_domain.lower[k], -1.0], 0.0)
            elif isinstance(z_domain, Ball):
                h = np.atleast_1d(prog.add_var(f"zball[{i},{j}]", d_t))
                for k in range(d_t):
                    prog.add_eq([h[k], xi[k], q], [1.0, -1.0, z_domain.center[k]], 0.0)
                w = prog.add_var(f"zball_r[{i},{j}]")
                prog.add_eq([w, q], [1.0, -z_domain.radius], 0.0)
                prog.add_soc(w, h)
            q_i.append(q)
            xi_i.append(xi)
        slack = prog.add_var(f"rowcap_slack[{i}]")
        prog.add_nonneg([slack])
        _accum_eq(prog, row_terms + [(slack, 1.0)], float(caps[i]))
        layout["q"].append(q_i)
        layout["xi"].append(xi_i)
    _accum_eq(prog, total_terms, 1.0)
    tslack = prog.add_var("transport_slack")
    prog.add_nonneg([tslack])
    _accum_eq(prog, transport_terms + [(tslack, 1.0)], rho ** spec.p)
    if finite_sigma:
        mslack = prog.add_var("moment_slack")
        prog.add_nonneg([mslack])
        _accum_eq(prog, moment_terms + [(mslack, 1.0)], sigma ** 2)
    prog.layout = layout
    return prog


@dataclass
class WorstCaseSolution:
    q: list  # per sample, array of pair masses
    xi: list  # per sample, array of homogenized locations (J_i, d_t)
    value: float
    status: str
    diagnostic: str
    report: object
    layout: dict


def solve_worst_case(pieces, data, spec, z_domain=None, mask=None, tol=1e-7):
    prog = build_worst_case_primal(pieces, data, spec, z_domain=z_domain, mask=mask)
    report = solve(prog, tol=tol)
    layout = prog.layout
    status = report.status
    diagnostic = ""
    if status == "infeasible":
        diagnostic = _diagnose("unbounded", layout["spec"])  # empty feasible set, same cause
    elif status == "unbounded":
        diagnostic = _diagnose("infeasible", layout["spec"])
    q, xi = [], []
    if report.primal is not None:
        for i in range(layout["n"]):
            q.append(np.array([report.primal[qi] for qi in layout["q"][i]]))
            xi.append(np.array([report.primal[x] for x in layout["xi"][i]]))
    value = report.objective if status in ("optimal", "inaccurate") else math.nan
    return WorstCaseSolution(q, xi, value, status, diagnostic, report, layout)


def extract_worst_case(sol, q_threshold_factor=1e-12):
    """Turn a solved primal into the discrete worst-case distribution.

    Every pair with q above solver noise becomes an atom xi/q (fixed block
    reattached), including low-mass atoms parked far away: those are
    legitimate members of the set whenever the pair satisfied the cone
    rows. Pairs at noise level whose homogenized location still carries
    objective weight indicate a true ray, i.e. the supremum is approached
    but not attained; that case is rejected.
    """
    if sol.status != "optimal":
        raise ValueError(f"extraction needs an optimal primal, got status {sol.status}")
    layout = sol.layout
    mask = layout["mask"]
    data = layout["data"]
    rows = layout["rows"]
    t = mask.transported
    qmax = max(float(qi.max()) for qi in sol.q if qi.size)
    if qmax <= 0.0:
        raise ValueError("degenerate solution: no pair carries mass")
    thr = q_threshold_factor * max(qmax, 1.0)
    atoms, weights = [], []
    dropped_value = 0.0
    for i in range(layout["n"]):
        for j in range(sol.q[i].size):
            qij = float(sol.q[i][j])
            xij = sol.xi[i][j]
            contrib = float(rows[i][j][0] @ xij + rows[i][j][1] * qij)
            if qij <= thr:
                dropped_value += abs(contrib)
                continue
            point = np.empty(data.dim)
            point[t] = xij / qij
            point[~t] = data.support[i][~t]
            atoms.append(point)
            weights.append(qij)
    if not atoms:
        raise ValueError("degenerate solution: all pair masses below threshold")
    if dropped_value > 1e-6 * (1.0 + abs(sol.value)):
        raise ValueError(
            "transport budget rides on zero-mass pairs, so no finite set of "
            "atoms certifies the value; re-solve with a finite sigma or a "
            "bounded domain to obtain an attaining distribution"
        )
    w = np.array(weights)
    drift = abs(w.sum() - 1.0)
    if drift > 1e-5:
        raise ValueError(f"kept mass drifts from 1 by {drift:.2e}; solution too loose")
    return DiscreteMeasure(np.array(atoms), w / w.sum())


# ---------------------------------------------------------------------------
# Joint minimization over theta
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    theta: np.ndarray
    value: float
    status: str
    diagnostic: str
    z0: np.ndarray
    spec: AmbiguitySpec
    report: object


def _family_rows(family, theta_dim, data):
    t = family.mask.transported
    rows = []
    for i in range(data.n):
        fixed = data.support[i][~t]
        rows.append([
            (p.a0, float(p.b0), p.A, p.B) for p in family.pieces_for(fixed)
        ])
    return rows


def resolve_z0(data, source, eps=0.0):
    """z0 policies shared by joint_fit and the command line."""
    if isinstance(source, np.ndarray):
        return np.asarray(source, dtype=float).ravel()
    if source == "origin":
        return np.zeros(data.dim)
    if source == "trimmed":
        return robust_stats.trimmed_mean(data, robust_stats.TrimSpec())
    if source == "filter":
        return robust_stats.iterative_filter_mean(data, min(eps, 1.0 / 12.0))
    raise ValueError(f"unknown z0 source {source!r}")


def joint_fit(family, data, spec, z0_source="given", z_domain=None, tol=1e-7):
    """Minimize the inner worst case over theta in one conic solve.

    Piece coefficients are affine in theta, so theta rides along as extra
    variables in the dual minimization. z0_source may be "given" (use
    spec.family.z0), "trimmed", "filter", "origin", or an explicit point.
    """
    if z0_source == "given":
        z0 = spec.family.z0
    else:
        z0 = resolve_z0(data, z0_source, eps=spec.eps)
        fam = spec.family
        new_family = type(fam)(sigma=fam.sigma, z0=z0)
        spec = AmbiguitySpec(p=spec.p, eps=spec.eps, rho=spec.rho, family=new_family)
    z_domain = z_domain if z_domain is not None else FullSpace()
    rows = _family_rows(family, family.theta_dim, data)
    if isinstance(spec.family, G2):
        prog = _assemble_dual_i(data, spec, z_domain, family.mask, rows, family.theta_dim)
    else:
        prog = _assemble_dual_ii(data, spec, z_domain, family.mask, rows, family.theta_dim)
    report = solve(prog, tol=tol)
    diagnostic = _diagnose(report.status, spec)
    theta = None
    if report.primal is not None and prog.layout["theta"] is not None:
        theta = np.asarray(report.primal[prog.layout["theta"]], dtype=float)
    value = report.objective if report.status in ("optimal", "inaccurate") else math.nan
    return FitResult(theta, value, report.status, diagnostic, z0, spec, report)


# ---------------------------------------------------------------------------
# Closed forms and risk bounds
# ---------------------------------------------------------------------------


def cvar(values, weights, eps):
    """Average of the top (1 - eps) probability mass, fractional at the cut."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(-values, kind="stable")
    need = 1.0 - eps
    acc = 0.0
    taken = 0.0
    for k in order:
        grab = min(weights[k], need - taken)
        if grab <= 0.0:
            break
        acc += grab * values[k]
        taken += grab
        if taken >= need - 1e-15:
            break
    return acc / need


def closed_form_value_p1(pieces, data, eps, rho, mask=None, p=1, sigma=math.inf):
    """rho * (steepest slope) + tail average of sample losses.

    Exact for order-1 transport with no moment cap on the full space: the
    transport multiplier must dominate every slope, and then each sample's
    bracket collapses to its own loss value.
    """
    if p != 1:
        raise ValueError("closed form holds for p = 1 only")
    if math.isfinite(sigma):
        raise ValueError("closed form requires the no-moment-cap sentinel sigma = inf")
    mask = mask if mask is not None else full_mask(data.dim)
    rows = _resolve_pieces(pieces, data.n)
    t = mask.transported
    lip = 0.0
    losses = np.zeros(data.n)
    for i in range(data.n):
        x = data.support[i][t]
        vals = [a @ x + b for a, b in rows[i]]
        losses[i] = max(vals)
        lip = max(lip, max(float(np.linalg.norm(a)) for a, _ in rows[i]))
    return rho * lip + cvar(losses, data.weights, eps)


@dataclass(frozen=True)
class RiskBoundInputs:
    p: int
    eps: float
    rho: float
    tau: float  # resilience at contamination 2*eps for the chosen family
    lipschitz: float = None
    sobolev12: float = None
    smoothness: float = None

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")
        if min(self.eps, self.rho, self.tau) < 0:
            raise ValueError("eps, rho, tau must be nonnegative")


def risk_bound(inputs):
    """Excess-risk radius c*rho + 2*tau scaled by the loss seminorms,
    c = 2 (1 - eps)^(-1/p); quadratic smoothness correction when p = 2."""
    c = 2.0 * (1.0 - inputs.eps) ** (-1.0 / inputs.p)
    radius = c * inputs.rho + 2.0 * inputs.tau
    if inputs.p == 1:
        if inputs.lipschitz is None:
            raise ValueError("p = 1 bound needs the Lipschitz seminorm")
        return inputs.lipschitz * radius
    if inputs.sobolev12 is None or inputs.smoothness is None:
        raise ValueError("p = 2 bound needs the Sobolev seminorm and a smoothness constant")
    return inputs.sobolev12 * radius + 0.5 * inputs.smoothness * radius ** 2
