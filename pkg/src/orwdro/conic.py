"""Conic-program intermediate representation and a uniform solve contract.

The IR is cone-native: a program is a list of scalar variables, a sparse
linear objective, sparse equality rows, and cone memberships over variable
index sets (nonnegative orthant, second-order, rotated second-order, and
semidefinite blocks given as symmetric matrices of variable indices).

Programs whose only cones are nonnegative orthants are linear and are solved
with scipy's HiGHS interface; anything else goes to the Clarabel
interior-point solver, with rotated cones lowered to plain second-order
cones. All paths report equality-constraint multipliers y normalized so
that, at an optimal solution,

    objective == b_eq @ y + objective_constant

in the program's own sense (min or max). This works because every cone
membership row is homogeneous; only equality rows carry right-hand sides.

Programs with a large semidefinite part take a third path: cvxopt's conelp
with a structure-aware KKT solver (see _solve_cvxopt). The covariance-aware
fits produce many moderate PSD blocks that all touch one shared matrix
variable, a pattern whose fill-in defeats sparse direct factorization
inside off-the-shelf solvers.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import lapack
from scipy.optimize import linprog

import clarabel

DEFAULT_TOL = 1e-7

# svec size of the PSD part above which conelp + the block KKT solver beats
# Clarabel (whose KKT factor fills in on the coupled-block duals)
CVXOPT_PSD_LIMIT = 6000


@dataclass(frozen=True)
class FullSpace:
    """Domain R^d; its support function is 0 on {0} and +inf elsewhere."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lower, upper]."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box needs lower <= upper of equal length")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)


@dataclass(frozen=True)
class Ball:
    """Euclidean ball of given center and radius."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).ravel()
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")
        object.__setattr__(self, "center", c)


@dataclass
class SolveReport:
    status: str  # optimal | infeasible | unbounded | inaccurate
    primal: np.ndarray
    dual_eq: np.ndarray
    objective: float
    residuals: tuple  # (primal feasibility, dual feasibility proxy, rel gap)


class ConicProgram:
    """Mutable builder for a single conic program; solving never mutates it."""

    def __init__(self, sense="min"):
        if sense not in ("min", "max"):
            raise ValueError("sense must be 'min' or 'max'")
        self.sense = sense
        self.num_vars = 0
        self.var_names = []
        self.obj = {}
        self.obj_const = 0.0
        self.eqs = []  # (index array, coeff array, rhs)
        self.cones = []  # ("nonneg", idxs) | ("soc", t, xs) | ("rsoc", u, v, xs) | ("psd", idxmat)

    # -- construction -------------------------------------------------------

    def add_var(self, name, n=1):
        """Append n scalar variables; returns an index (n=1) or index array."""
        start = self.num_vars
        self.num_vars += n
        if n == 1:
            self.var_names.append(name)
            return start
        self.var_names.extend(f"{name}[{k}]" for k in range(n))
        return np.arange(start, start + n)

    def add_obj(self, idx, coeff):
        for i, c in zip(np.atleast_1d(idx), np.broadcast_to(coeff, np.atleast_1d(idx).shape)):
            if c != 0.0:
                self.obj[int(i)] = self.obj.get(int(i), 0.0) + float(c)

    def add_obj_const(self, c):
        self.obj_const += float(c)

    def add_eq(self, idxs, coeffs, rhs):
        idxs = np.atleast_1d(np.asarray(idxs, dtype=int))
        coeffs = np.atleast_1d(np.asarray(coeffs, dtype=float))
        if idxs.shape != coeffs.shape:
            raise ValueError("index/coefficient length mismatch in equality row")
        self.eqs.append((idxs, coeffs, float(rhs)))

    def add_nonneg(self, idxs):
        self.cones.append(("nonneg", np.atleast_1d(np.asarray(idxs, dtype=int))))

    def add_soc(self, t, xs):
        """t >= ||x||_2 over the referenced variables."""
        self.cones.append(("soc", int(t), np.atleast_1d(np.asarray(xs, dtype=int))))

    def add_rsoc(self, u, v, xs):
        """2 u v >= ||x||^2 with u, v >= 0 over the referenced variables."""
        self.cones.append(("rsoc", int(u), int(v), np.atleast_1d(np.asarray(xs, dtype=int))))

    def add_psd(self, idxmat):
        """The symmetric matrix of referenced variables is PSD.

        idxmat must be square with idxmat[i, j] == idxmat[j, i] (shared
        variable for each symmetric pair).
        """
        idxmat = np.asarray(idxmat, dtype=int)
        self.cones.append(("psd", idxmat))

    # -- validation and debugging ------------------------------------------

    def _check_idx(self, idx, where):
        idx = np.atleast_1d(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_vars):
            raise ValueError(f"variable index out of range in {where}")

    def validate(self):
        """Structural checks; raises ValueError on a malformed program."""
        for i in self.obj:
            self._check_idx(np.array([i]), "objective")
        for k, (idxs, _, _) in enumerate(self.eqs):
            self._check_idx(idxs, f"equality {k}")
        for cone in self.cones:
            kind = cone[0]
            if kind == "nonneg":
                self._check_idx(cone[1], "nonneg cone")
            elif kind == "soc":
                self._check_idx(np.append(cone[2], cone[1]), "soc cone")
                if cone[2].size < 1:
                    raise ValueError("soc cone needs at least one x entry")
            elif kind == "rsoc":
                self._check_idx(np.concatenate([[cone[1], cone[2]], cone[3]]), "rsoc cone")
                if cone[3].size < 1:
                    raise ValueError("rsoc cone needs at least one x entry")
            elif kind == "psd":
                mat = cone[1]
                if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                    raise ValueError("psd block must be square")
                if not np.array_equal(mat, mat.T):
                    raise ValueError("psd block index matrix must be symmetric")
                self._check_idx(mat.ravel(), "psd cone")
            else:
                raise ValueError(f"unknown cone kind {kind!r}")

    def dump(self):
        """Human-readable text form.

        Grammar (one item per line):
            program <sense> vars=<N>
            var <index> <name>
            obj <const> [+ <coeff>*x<i> ...]
            eq: <coeff>*x<i> ... = <rhs>
            cone nonneg: x<i> ...
            cone soc: t=x<i> x=(x<j> ...)
            cone rsoc: u=x<i> v=x<j> x=(x<k> ...)
            cone psd dim=<k>: row of indices per line
        """
        out = [f"program {self.sense} vars={self.num_vars}"]
        for i, name in enumerate(self.var_names):
            out.append(f"var {i} {name}")
        terms = " + ".join(f"{c:.17g}*x{i}" for i, c in sorted(self.obj.items()))
        out.append(f"obj {self.obj_const:.17g}" + (f" + {terms}" if terms else ""))
        for idxs, coeffs, rhs in self.eqs:
            lhs = " + ".join(f"{c:.17g}*x{i}" for i, c in zip(idxs, coeffs))
            out.append(f"eq: {lhs} = {rhs:.17g}")
        for cone in self.cones:
            if cone[0] == "nonneg":
                out.append("cone nonneg: " + " ".join(f"x{i}" for i in cone[1]))
            elif cone[0] == "soc":
                out.append(f"cone soc: t=x{cone[1]} x=(" + " ".join(f"x{i}" for i in cone[2]) + ")")
            elif cone[0] == "rsoc":
                out.append(
                    f"cone rsoc: u=x{cone[1]} v=x{cone[2]} x=("
                    + " ".join(f"x{i}" for i in cone[3]) + ")"
                )
            else:
                mat = cone[1]
                out.append(f"cone psd dim={mat.shape[0]}:")
                for row in mat:
                    out.append("  " + " ".join(str(i) for i in row))
        return "\n".join(out) + "\n"

    # -- feasibility measurement -------------------------------------------

    def residual_primal(self, x):
        """Worst absolute violation of equalities and cone memberships at x."""
        worst = 0.0
        for idxs, coeffs, rhs in self.eqs:
            worst = max(worst, abs(float(coeffs @ x[idxs]) - rhs))
        for cone in self.cones:
            if cone[0] == "nonneg":
                if cone[1].size:
                    worst = max(worst, float(np.maximum(-x[cone[1]], 0.0).max()))
            elif cone[0] == "soc":
                worst = max(worst, float(np.linalg.norm(x[cone[2]]) - x[cone[1]]))
            elif cone[0] == "rsoc":
                u, v = x[cone[1]], x[cone[2]]
                worst = max(worst, float(np.linalg.norm(x[cone[3]]) ** 2 - 2 * u * v))
                worst = max(worst, float(-u), float(-v))
            else:
                mat = x[cone[1]]
                worst = max(worst, float(-np.linalg.eigvalsh(mat)[0]))
        return worst


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------


def _is_linear(prog):
    return all(c[0] == "nonneg" for c in prog.cones)


def _min_form_objective(prog):
    q = np.zeros(prog.num_vars)
    for i, c in prog.obj.items():
        q[i] = c
    if prog.sense == "max":
        q = -q
    return q


def _psd_svec_size(prog):
    return sum(
        c[1].shape[0] * (c[1].shape[0] + 1) // 2 for c in prog.cones if c[0] == "psd"
    )


def solve(prog, tol=DEFAULT_TOL, force_backend=None):
    """Solve a validated program; statuses are reported, never raised.

    force_backend in {None, "highs", "clarabel", "cvxopt"} exists so tests
    can cross-check the linear path against the interior-point paths on the
    same program.
    """
    prog.validate()
    backend = force_backend
    if backend is None:
        if _is_linear(prog):
            backend = "highs"
        elif _psd_svec_size(prog) > CVXOPT_PSD_LIMIT:
            backend = "cvxopt"
        else:
            backend = "clarabel"
    if backend == "highs" and not _is_linear(prog):
        raise ValueError("highs backend only handles programs with nonneg cones")
    if backend == "highs":
        report = _solve_highs(prog, tol)
    elif backend == "cvxopt":
        report = _solve_cvxopt(prog, tol)
    else:
        report = _solve_clarabel(prog, tol)
    return report


def _finish_report(prog, status, x, y_minform, raw_obj):
    if x is None:
        return SolveReport(status, None, None, math.nan, (math.inf, math.inf, math.inf))
    if prog.sense == "max":
        objective = -raw_obj + prog.obj_const
        y = None if y_minform is None else -y_minform
    else:
        objective = raw_obj + prog.obj_const
        y = y_minform
    pres = prog.residual_primal(x)
    if y is not None and len(prog.eqs) > 0:
        b_eq = np.array([rhs for _, _, rhs in prog.eqs])
        dual_obj = float(b_eq @ y) + prog.obj_const
        gap = abs(objective - dual_obj) / (1.0 + abs(objective))
    else:
        gap = 0.0 if len(prog.eqs) == 0 else math.inf
    return SolveReport(status, x, y, objective, (pres, gap, gap))


def _solve_highs(prog, tol):
    q = _min_form_objective(prog)
    nonneg = np.zeros(prog.num_vars, dtype=bool)
    for cone in prog.cones:
        nonneg[cone[1]] = True
    bounds = [(0.0, None) if nn else (None, None) for nn in nonneg]
    if prog.eqs:
        rows, cols, vals, rhs = [], [], [], []
        for r, (idxs, coeffs, b) in enumerate(prog.eqs):
            rows.extend([r] * idxs.size)
            cols.extend(idxs.tolist())
            vals.extend(coeffs.tolist())
            rhs.append(b)
        a_eq = sparse.csr_matrix(
            (vals, (rows, cols)), shape=(len(prog.eqs), prog.num_vars)
        )
        b_eq = np.asarray(rhs)
    else:
        a_eq, b_eq = None, None
    res = linprog(q, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    status = {0: "optimal", 2: "infeasible", 3: "unbounded"}.get(res.status, "inaccurate")
    if res.x is None:
        return _finish_report(prog, status, None, None, math.nan)
    y = res.eqlin.marginals if prog.eqs else np.zeros(0)
    return _finish_report(prog, status, np.asarray(res.x), np.asarray(y), float(res.fun))


_CLARABEL_STATUS = {
    "Solved": "optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
}


def _clarabel_rows(prog):
    """Lower the IR to Clarabel form: A x + s = b, s in K (b = 0 on cone rows)."""
    rows, cols, vals, bs, cones = [], [], [], [], []
    r = 0
    for idxs, coeffs, rhs in prog.eqs:
        rows.extend([r] * idxs.size)
        cols.extend(idxs.tolist())
        vals.extend(coeffs.tolist())
        bs.append(rhs)
        r += 1
    if prog.eqs:
        cones.append(clarabel.ZeroConeT(len(prog.eqs)))

    def emit(entries):
        # entries: list of (var index, coefficient) pairs defining s_row = coeff*x
        nonlocal r
        for i, c in entries:
            rows.append(r)
            cols.append(int(i))
            vals.append(-float(c))
        bs.append(0.0)
        r += 1

    for cone in prog.cones:
        if cone[0] == "nonneg":
            for i in cone[1]:
                emit([(i, 1.0)])
            cones.append(clarabel.NonnegativeConeT(int(cone[1].size)))
        elif cone[0] == "soc":
            emit([(cone[1], 1.0)])
            for i in cone[2]:
                emit([(i, 1.0)])
            cones.append(clarabel.SecondOrderConeT(int(1 + cone[2].size)))
        elif cone[0] == "rsoc":
            # 2uv >= ||x||^2  <=>  ||(u - v, sqrt(2) x)|| <= u + v
            u, v, xs = cone[1], cone[2], cone[3]
            emit([(u, 1.0), (v, 1.0)])
            emit([(u, 1.0), (v, -1.0)])
            rt2 = math.sqrt(2.0)
            for i in xs:
                emit([(i, rt2)])
            cones.append(clarabel.SecondOrderConeT(int(2 + xs.size)))
        else:
            mat = cone[1]
            d = mat.shape[0]
            rt2 = math.sqrt(2.0)
            for j in range(d):
                for i in range(j + 1):
                    emit([(mat[i, j], 1.0 if i == j else rt2)])
            cones.append(clarabel.PSDTriangleConeT(d))
    a = sparse.csc_matrix((vals, (rows, cols)), shape=(r, prog.num_vars))
    return a, np.asarray(bs), cones


def _solve_clarabel(prog, tol):
    q = _min_form_objective(prog)
    a, b, cones = _clarabel_rows(prog)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = tol * 1e-1
    settings.tol_gap_rel = tol * 1e-1
    settings.tol_feas = tol * 1e-1
    p = sparse.csc_matrix((prog.num_vars, prog.num_vars))
    solver = clarabel.DefaultSolver(p, q, a, b, cones, settings)
    sol = solver.solve()
    status = _CLARABEL_STATUS.get(str(sol.status), "inaccurate")
    if status in ("infeasible", "unbounded"):
        return _finish_report(prog, status, None, None, math.nan)
    x = np.asarray(sol.x)
    z_eq = np.asarray(sol.z[: len(prog.eqs)]) if prog.eqs else np.zeros(0)
    return _finish_report(prog, status, x, -z_eq, float(q @ x))


# ---------------------------------------------------------------------------
# cvxopt backend for programs with a heavy semidefinite part
# ---------------------------------------------------------------------------


_CVXOPT_STATUS = {
    "optimal": "optimal",
    "primal infeasible": "infeasible",
    "dual infeasible": "unbounded",
}


def _cvxopt_lower(prog):
    """Lower the IR to conelp form: min q.x, G x + s = 0, A x = b.

    Rows are grouped nonnegative, then second-order (rotated cones lowered),
    then semidefinite; cvxopt stores each PSD block as a full matrix in
    column-major order. Returns the COO triplet of G so the caller can
    rescale values in place before assembling, plus a row-block layout:
    ("l", start, count), ("q", start, dim, block) or
    ("s", start, d, slot_rows, slot_cols, slot_vars, slot_entry) where
    slot_entry indexes each svec slot's (a, b) entry inside the COO values.
    """
    l_idx = [int(i) for c in prog.cones if c[0] == "nonneg" for i in c[1]]
    rows, cols, vals = [], [], []

    def put(i, j, v):
        rows.append(i)
        cols.append(int(j))
        vals.append(-float(v))
        return len(vals) - 1

    r = 0
    blocks = []
    if l_idx:
        blocks.append(("l", 0, len(l_idx)))
    for i in l_idx:
        put(r, i, 1.0)
        r += 1
    dims = {"l": len(l_idx), "q": [], "s": []}
    rt2 = math.sqrt(2.0)
    for cone in prog.cones:
        if cone[0] == "soc":
            start = r
            put(r, cone[1], 1.0)
            r += 1
            for i in cone[2]:
                put(r, i, 1.0)
                r += 1
            dims["q"].append(r - start)
            blocks.append(("q", start, r - start))
        elif cone[0] == "rsoc":
            u, v, xs = cone[1], cone[2], cone[3]
            start = r
            put(r, u, 1.0)
            put(r, v, 1.0)
            r += 1
            put(r, u, 1.0)
            put(r, v, -1.0)
            r += 1
            for i in xs:
                put(r, i, rt2)
                r += 1
            dims["q"].append(r - start)
            blocks.append(("q", start, r - start))
    for cone in prog.cones:
        if cone[0] != "psd":
            continue
        mat = cone[1]
        d = mat.shape[0]
        aa, bb, vv, ee = [], [], [], []
        for j in range(d):
            for i in range(j + 1):
                aa.append(i)
                bb.append(j)
                vv.append(int(mat[i, j]))
                ee.append(put(r + i + j * d, mat[i, j], 1.0))
                if i != j:
                    put(r + j + i * d, mat[i, j], 1.0)
        blocks.append(
            ("s", r, d, np.array(aa), np.array(bb), np.array(vv), np.array(ee))
        )
        dims["s"].append(d)
        r += d * d
    coo = (np.array(rows), np.array(cols), np.array(vals))
    return coo, r, dims, blocks


def _ruiz_scales(a_coo, shape, row_group, psd_blocks=(), iters=8):
    """Iterative row/column scaling with cone-invariant row groups.

    Rows sharing a group index (second-order blocks) get one scalar.
    Semidefinite blocks get a per-index diagonal congruence: row (i, j)
    is scaled by m_i m_j, which maps the cone to itself and absorbs far
    more dynamic range than a single block scalar. The exponent 1/4 makes
    the squared effect of m match Ruiz's square-root step.
    """
    rows, cols, vals = a_coo
    m, n = shape
    dr = np.ones(m)
    dc = np.ones(n)
    v = np.abs(vals.astype(float))
    grouped = row_group >= 0
    ngroups = int(row_group.max()) + 1 if grouped.any() else 0
    for _ in range(iters):
        v_scaled = v * dr[rows] * dc[cols]
        rmax = np.zeros(m)
        np.maximum.at(rmax, rows, v_scaled)
        rmax[rmax == 0.0] = 1.0
        scale = np.ones(m)
        if ngroups:
            gmax = np.zeros(ngroups)
            np.maximum.at(gmax, row_group[grouped], rmax[grouped])
            gmax[gmax == 0.0] = 1.0
            scale[grouped] = 1.0 / np.sqrt(gmax)[row_group[grouped]]
        for start, d in psd_blocks:
            rm = rmax[start : start + d * d].reshape(d, d, order="F")
            idxmax = np.maximum(rm.max(axis=0), rm.max(axis=1))
            mi = idxmax**-0.25
            scale[start : start + d * d] = np.outer(mi, mi).ravel(order="F")
        dr = dr * scale
        v_scaled = v * dr[rows] * dc[cols]
        cmax = np.zeros(n)
        np.maximum.at(cmax, cols, v_scaled)
        cmax[cmax == 0.0] = 1.0
        dc = dc / np.sqrt(cmax)
    return dr, dc


def _make_conelp_kkt(n, p, a_dense, g_csr, g_csc_t, dims, blocks):
    """Build a conelp kktsolver exploiting the program's block structure.

    With the cone rows eliminated, each iteration needs
    H = G' (W'W)^{-1} G and a factorization of [[H, A'], [A, 0]]. Every
    column of a PSD block is a scaled symmetric unit matrix E_ab, so that
    block's contribution has the closed form

        <E_ab, S E_cd S> = S_ac S_bd + S_ad S_bc,    S = rti rti',

    doubled off the slot diagonal; no congruences of full G columns are
    ever formed, and the remaining quasi-definite system is factored
    densely by LAPACK's Bunch-Kaufman routine.
    """
    nk = n + p
    kkt = np.zeros((nk, nk), order="F")
    hkeep = np.zeros((n, n))
    lwork = lapack.dsytrf_lwork(nk)
    diag = np.arange(n)
    diag_p = np.arange(n, nk)

    # per-block fixed structure
    l_cnt = dims["l"]
    g_l = g_csr[:l_cnt] if l_cnt else None
    q_meta = []
    s_meta = []
    for blk in blocks:
        if blk[0] == "q":
            _, start, dim = blk
            sub = g_csr[start : start + dim]
            tc = np.unique(sub.indices)  # csr indices are column ids
            q_meta.append((start, dim, tc, sub[:, tc].toarray()))
        elif blk[0] == "s":
            _, start, d, aa, bb, vv, ee = blk
            # 2 for off-diagonal slots, 1 on the diagonal; see docstring
            gfac = np.where(aa == bb, 1.0, 2.0)
            unique_vars = len(set(vv.tolist())) == len(vv)
            s_meta.append((start, d, aa, bb, vv, ee, gfac, unique_vars))

    state = {}

    def factor(w):
        di = np.asarray(w["di"]).ravel() if l_cnt else np.zeros(0)
        betas = [float(b) for b in w["beta"]]
        vmats = [np.asarray(vk).ravel() for k, vk in enumerate(w["v"])]
        rtis = [np.asarray(rk) for rk in w["rti"]]

        kkt[:] = 0.0
        h = kkt[:n, :n]
        if l_cnt:
            gl_w = g_l.multiply((di * di)[:, None]).tocsc()
            h += (g_l.T @ gl_w).toarray()
        winvs = []
        for k, (start, dim, tc, gq) in enumerate(q_meta):
            vk = vmats[k]
            jv = vk.copy()
            jv[1:] *= -1.0
            jmat = np.diag(np.concatenate([[1.0], -np.ones(dim - 1)]))
            winv = (2.0 * np.outer(jv, jv) - jmat) / betas[k]
            winvs.append(winv)
            wg = winv @ gq
            h[np.ix_(tc, tc)] += wg.T @ wg
        smats = []
        gvals = state["gvals"]
        for k, (start, d, aa, bb, vv, ee, gfac, uniq) in enumerate(s_meta):
            rti = rtis[k]
            s = rti @ rti.T
            smats.append((s, rti))
            alpha = gvals[ee]
            sac = s[np.ix_(aa, aa)]
            sbd = s[np.ix_(bb, bb)]
            sad = s[np.ix_(aa, bb)]
            sbc = s[np.ix_(bb, aa)]
            scale = np.outer(alpha * gfac, alpha * gfac)
            hb = 0.5 * scale * (sac * sbd + sad * sbc)
            if uniq:
                h[np.ix_(vv, vv)] += hb
            else:
                np.add.at(h, (vv[:, None], vv[None, :]), hb)
        if p:
            kkt[n:, :n] = a_dense
        np.copyto(hkeep, kkt[:n, :n])
        # keep the regularization absolute: the data is equilibrated, and
        # anything proportional to |H| blows up as the barrier parameter
        # vanishes, capping the attainable accuracy
        kkt[diag, diag] += 1e-12
        kkt[diag_p, diag_p] -= 1e-12
        ldu, ipiv, info = lapack.dsytrf(kkt, lower=1, lwork=lwork[0], overwrite_a=1)
        if info != 0:
            raise ArithmeticError("singular KKT system")
        state["factor"] = (ldu, ipiv)
        state["scal"] = (di, winvs, smats)

        def solve(x, y, z):
            bx = np.asarray(x).ravel().copy()
            by = np.asarray(y).ravel() if p else np.zeros(0)
            bz = np.asarray(z).ravel().copy()
            # cvxopt guarantees only the lower triangle of semidefinite
            # slots; rebuild the full symmetric matrices before using them
            for k, (start, d, *_rest) in enumerate(s_meta):
                bmat = bz[start : start + d * d].reshape(d, d, order="F")
                bmat = np.tril(bmat) + np.tril(bmat, -1).T
                bz[start : start + d * d] = bmat.ravel(order="F")
            di_, winvs_, smats_ = state["scal"]
            wz = np.empty_like(bz)
            if l_cnt:
                wz[:l_cnt] = bz[:l_cnt] * di_ * di_
            for k, (start, dim, tc, gq) in enumerate(q_meta):
                wz[start : start + dim] = winvs_[k] @ (
                    winvs_[k] @ bz[start : start + dim]
                )
            for k, (start, d, *_rest) in enumerate(s_meta):
                s, _ = smats_[k]
                bmat = bz[start : start + d * d].reshape(d, d, order="F")
                wz[start : start + d * d] = (s @ bmat @ s).ravel(order="F")
            rhs = np.empty(nk)
            rhs[:n] = bx + g_csc_t @ wz
            rhs[n:] = by
            ldu, ipiv = state["factor"]
            sol, info = lapack.dsytrs(ldu, ipiv, rhs, lower=1)
            if info != 0:
                raise ArithmeticError("KKT solve failed")
            # refine against the unregularized reduced system; the
            # Bunch-Kaufman factors alone lose enough digits late in the
            # interior-point run to corrupt the corrector direction
            rhs_norm = max(1.0, float(np.linalg.norm(rhs)))
            for _ in range(2):
                res = rhs.copy()
                res[:n] -= hkeep @ sol[:n]
                if p:
                    res[:n] -= a_dense.T @ sol[n:]
                    res[n:] -= a_dense @ sol[:n]
                if float(np.linalg.norm(res)) <= 1e-12 * rhs_norm:
                    break
                dsol, dinfo = lapack.dsytrs(ldu, ipiv, res, lower=1)
                if dinfo != 0:
                    break
                sol = sol + dsol
            ux, uy = sol[:n], sol[n:]
            v = g_csr @ ux - bz
            zout = np.empty_like(v)
            if l_cnt:
                zout[:l_cnt] = v[:l_cnt] * di_
            for k, (start, dim, tc, gq) in enumerate(q_meta):
                zout[start : start + dim] = winvs_[k] @ v[start : start + dim]
            for k, (start, d, *_rest) in enumerate(s_meta):
                _, rti = smats_[k]
                vmat = v[start : start + d * d].reshape(d, d, order="F")
                zmat = rti.T @ vmat @ rti
                zout[start : start + d * d] = zmat.ravel(order="F")
            _write_cvx(x, ux)
            if p:
                _write_cvx(y, uy)
            _write_cvx(z, zout)

        return solve

    return factor, state


def _write_cvx(dst, values):
    import cvxopt

    dst[:] = cvxopt.matrix(values)


def _solve_cvxopt(prog, tol, maxiters=200):
    import cvxopt
    from cvxopt import solvers

    q = _min_form_objective(prog)
    n = prog.num_vars
    coo, m, dims, blocks = _cvxopt_lower(prog)
    rows, cols, vals = coo

    p = len(prog.eqs)
    if p:
        er, ec, ev, be = [], [], [], []
        for r, (idxs, coeffs, rhs) in enumerate(prog.eqs):
            er.extend([r] * idxs.size)
            ec.extend(idxs.tolist())
            ev.extend(coeffs.tolist())
            be.append(rhs)
        er, ec, ev = np.array(er), np.array(ec), np.array(ev)
        b_eq = np.array(be)
    else:
        er = ec = ev = np.zeros(0, dtype=int)
        b_eq = np.zeros(0)

    # equilibrate the stacked system; eq rows scale freely, cone blocks
    # within their invariance group, and iteration counts drop sharply on
    # ill-scaled fits
    row_group = np.empty(p + m, dtype=int)
    row_group[:p] = np.arange(p)
    gid = p
    psd_blocks = []
    for blk in blocks:
        if blk[0] == "l":
            cnt = blk[2]
            row_group[p + blk[1] : p + blk[1] + cnt] = np.arange(gid, gid + cnt)
            gid += cnt
        elif blk[0] == "q":
            row_group[p + blk[1] : p + blk[1] + blk[2]] = gid
            gid += 1
        else:
            d = blk[2]
            row_group[p + blk[1] : p + blk[1] + d * d] = -1
            psd_blocks.append((p + blk[1], d))
    all_rows = np.concatenate([er, rows + p])
    all_cols = np.concatenate([ec, cols])
    all_vals = np.concatenate([ev, vals])
    dr, dc = _ruiz_scales(
        (all_rows, all_cols, all_vals), (p + m, n), row_group, psd_blocks
    )
    dr_eq, dr_g = dr[:p], dr[p:]

    gvals = vals * dr_g[rows] * dc[cols]
    g_csr = sparse.csr_matrix((gvals, (rows, cols)), shape=(m, n))
    g_csc_t = g_csr.T.tocsr()
    ev_s = ev * dr_eq[er] * dc[ec]
    a_dense = np.zeros((p, n))
    a_dense[er, ec] = ev_s
    b_s = b_eq * dr_eq
    q_s = q * dc

    kktsolver, state = _make_conelp_kkt(
        n, p, a_dense, g_csr, g_csc_t, dims, blocks
    )
    state["gvals"] = gvals

    a_cvx = cvxopt.spmatrix(ev_s, er, ec, (p, n))
    g_cvx = cvxopt.spmatrix(gvals, rows, cols, (m, n))
    options = {
        "show_progress": False,
        "maxiters": maxiters,
        "refinement": 2,
        "abstol": max(tol, 1e-9),
        "reltol": max(10.0 * tol, 1e-8),
        "feastol": max(tol, 1e-9),
    }
    try:
        sol = solvers.conelp(
            cvxopt.matrix(q_s),
            g_cvx,
            cvxopt.matrix(np.zeros(m)),
            dims,
            A=a_cvx,
            b=cvxopt.matrix(b_s),
            kktsolver=kktsolver,
            options=options,
        )
    except (ArithmeticError, ZeroDivisionError):
        return _finish_report(prog, "inaccurate", None, None, math.nan)
    status = _CVXOPT_STATUS.get(sol["status"], "inaccurate")
    if sol["x"] is None or status in ("infeasible", "unbounded"):
        return _finish_report(prog, status, None, None, math.nan)
    x = dc * np.asarray(sol["x"]).ravel()
    y = -dr_eq * np.asarray(sol["y"]).ravel() if p else np.zeros(0)
    return _finish_report(prog, status, x, y, float(q @ x))


# ---------------------------------------------------------------------------
# Reformulation-facing helper terms
# ---------------------------------------------------------------------------


def add_perspective_h(prog, zeta_indices, lambda_index, p):
    """Append the epigraph of the order-p transport penalty term.

    p=1: the term is the indicator of ||zeta|| <= lambda, added as a
    second-order cone; contributes nothing to objectives. Returns None.

    p=2: the term is ||zeta||^2 / (4 lambda) (perspective of ||.||^2/4).
    Appends a fresh epigraph variable t with ||zeta||^2 <= 4 t lambda
    (a rotated cone on an auxiliary u = 2t) and returns t, which the
    caller adds wherever the term's value is consumed.
    """
    zeta_indices = np.atleast_1d(np.asarray(zeta_indices, dtype=int))
    if p == 1:
        prog.add_soc(lambda_index, zeta_indices)
        return None
    if p == 2:
        t = prog.add_var("persp_t")
        u = prog.add_var("persp_u")
        prog.add_eq([u, t], [1.0, -2.0], 0.0)
        prog.add_rsoc(u, lambda_index, zeta_indices)
        return t
    raise ValueError("only p in {1, 2} is supported")


def add_support_fn_term(prog, zeta_indices, domain):
    """Append the support function of the domain evaluated at zeta.

    Returns a list of (variable index, coefficient) pairs whose sum equals
    the support-function value at the optimum; the caller inserts them into
    whatever row or objective consumes the term.

    FullSpace: forces zeta = 0, contributes nothing.
    Box[l, u]: sum_k max(l_k z_k, u_k z_k) via a nonnegative split.
    Ball(c, r): c @ zeta + r ||zeta|| via a norm epigraph.
    """
    zeta_indices = np.atleast_1d(np.asarray(zeta_indices, dtype=int))
    d = zeta_indices.size
    if isinstance(domain, FullSpace):
        for i in zeta_indices:
            prog.add_eq([i], [1.0], 0.0)
        return []
    if isinstance(domain, Box):
        if domain.lower.size != d:
            raise ValueError("box dimension mismatch")
        pos = np.atleast_1d(prog.add_var("suppfn_pos", d))
        neg = np.atleast_1d(prog.add_var("suppfn_neg", d))
        prog.add_nonneg(pos)
        prog.add_nonneg(neg)
        terms = []
        for k in range(d):
            prog.add_eq([zeta_indices[k], pos[k], neg[k]], [1.0, -1.0, 1.0], 0.0)
            terms.append((int(pos[k]), float(domain.upper[k])))
            terms.append((int(neg[k]), -float(domain.lower[k])))
        return terms
    if isinstance(domain, Ball):
        if domain.center.size != d:
            raise ValueError("ball dimension mismatch")
        w = prog.add_var("suppfn_norm")
        prog.add_soc(w, zeta_indices)
        terms = [(int(w), float(domain.radius))]
        terms.extend(
            (int(zeta_indices[k]), float(domain.center[k]))
            for k in range(d)
            if domain.center[k] != 0.0
        )
        return terms
    raise ValueError(f"unsupported domain {type(domain).__name__}")
