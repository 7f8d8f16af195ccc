"""Seeded corruption simulators with certified transport budgets.

Two generic contamination patterns (replace a fraction after a bounded
transport shift; add a fraction on top of a clean core) plus the three
task-specific constructions used by the experiment harness: scaled
regression outliers, flipped-scale classification features with pinned
labels, and scaled multi-output regression. Every simulator re-verifies
its declared trimmed-transport budget with the exact LP when the sample is
small enough (n <= 60); beyond that the constructive argument is the
guarantee and callers can log it.

All randomness flows through numpy's default_rng on a caller-supplied
seed (an integer or a sequence, so trials can use disjoint streams);
identical inputs give bit-identical outputs.
"""

import math
from dataclasses import dataclass

import numpy as np

from .measures import DiscreteMeasure, GroundCost, TransportMask, empirical, full_mask
from .robust_ot import rwp_one_sided, rwp_two_sided

BUDGET_CHECK_MAX_N = 60
BUDGET_TOL = 1e-6


@dataclass(frozen=True)
class CorruptionPlanB:
    """Translate everything by rho0, then replace a floor(eps n) subset."""

    rho0: float
    eps: float
    p: int = 1
    seed: object = 0
    direction: np.ndarray = None  # unit shift direction, default e1
    outlier_distance: float = 1e3
    outlier_scale: float = 0.0  # Gaussian spread around the outlier location
    heterogeneous: bool = False  # per-point displacement instead of rigid shift

    def __post_init__(self):
        if not 0.0 <= self.eps <= 0.49:
            raise ValueError("eps must lie in [0, 0.49]")
        if self.rho0 < 0:
            raise ValueError("rho0 must be nonnegative")
        if self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")


@dataclass(frozen=True)
class CorruptionPlanBPrime:
    """Keep a clean core of ceil((1-eps) n) samples, append far atoms."""

    rho0: float
    eps: float
    p: int = 1
    seed: object = 0
    direction: np.ndarray = None
    outlier_distance: float = 1e3

    def __post_init__(self):
        if not 0.0 <= self.eps <= 0.49:
            raise ValueError("eps must lie in [0, 0.49]")


@dataclass(frozen=True)
class RegressionCorruption:
    """Outliers at (C x, -C^2 theta'x + rho); every label shifted by rho."""

    C: float
    rho: float
    eps: float
    p: int = 1
    theta_star: np.ndarray = None  # drawn uniformly on the sphere when None


def _unit_direction(direction, d):
    if direction is None:
        e1 = np.zeros(d)
        e1[0] = 1.0
        return e1
    v = np.asarray(direction, dtype=float).ravel()
    if v.size != d or not np.linalg.norm(v) > 0:
        raise ValueError("direction must be a nonzero vector of the data dimension")
    return v / np.linalg.norm(v)


def _check_two_sided(corrupted, clean, eps, p, bound, mask=None):
    if clean.n > BUDGET_CHECK_MAX_N:
        return None
    cost = GroundCost(p, mask if mask is not None else full_mask(clean.dim))
    val = rwp_two_sided(corrupted, clean, eps, cost)
    if val > bound + BUDGET_TOL:
        raise RuntimeError(
            f"corruption exceeded its transport budget: {val:.6g} > {bound:.6g}"
        )
    return val


def corrupt_setting_b(clean, plan):
    """Bounded-shift-then-replace contamination of an empirical measure.

    The shift is a rigid translation of length rho0 (so the transport cost
    is met with equality for either order); plan.heterogeneous instead
    spreads random per-point displacements with the same total budget.
    The replaced subset is uniform of size floor(eps n).
    """
    rng = np.random.default_rng(plan.seed)
    n, d = clean.n, clean.dim
    k = int(math.floor(plan.eps * n))
    pts = clean.support.copy()
    if plan.rho0 > 0:
        if plan.heterogeneous:
            dirs = rng.normal(size=(n, d))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            raw = np.abs(rng.normal(size=n)) + 1e-3
            # normalize so the empirical p-cost of the displacement is rho0^p
            scale = plan.rho0 / float(clean.weights @ raw ** plan.p) ** (1.0 / plan.p)
            pts += (raw * scale)[:, None] * dirs
        else:
            pts += plan.rho0 * _unit_direction(plan.direction, d)
    if k > 0:
        picked = rng.choice(n, size=k, replace=False)
        center = plan.outlier_distance * _unit_direction(plan.direction, d)
        pts[picked] = center
        if plan.outlier_scale > 0:
            pts[picked] += plan.outlier_scale * rng.normal(size=(k, d))
    out = DiscreteMeasure(pts, clean.weights)
    _check_two_sided(out, clean, plan.eps, plan.p, plan.rho0)
    return out


def corrupt_setting_b_prime(clean, plan):
    """Additive contamination: the first ceil((1-eps) n) atoms survive (after
    the rho0 shift) and floor(eps n) far atoms are appended.

    Returns (corrupted, core) where core is the untouched clean part as its
    own measure; the corrupted sample restricted to the core dominates it
    atom by atom, which is the additive-model membership condition.
    """
    rng = np.random.default_rng(plan.seed)
    n, d = clean.n, clean.dim
    m = int(math.ceil((1.0 - plan.eps) * n))
    k = n - m
    core_pts = clean.support[:m]
    shifted = core_pts + plan.rho0 * _unit_direction(plan.direction, d)
    extra = np.tile(plan.outlier_distance * _unit_direction(plan.direction, d), (k, 1))
    extra += rng.normal(size=(k, d))
    corrupted = empirical(np.vstack([shifted, extra]))
    core = empirical(core_pts)
    if n <= BUDGET_CHECK_MAX_N:
        cost = GroundCost(plan.p, full_mask(d))
        val = rwp_one_sided(corrupted, core, k / n, cost)
        if val > plan.rho0 + BUDGET_TOL:
            raise RuntimeError(
                f"additive corruption exceeded its budget: {val:.6g} > {plan.rho0:.6g}"
            )
    return corrupted, core


def corrupt_regression(n, d, plan, seed):
    """Linear-response sample with scaled outliers.

    Features are standard normal in d-1 coordinates, responses exact on a
    unit-sphere coefficient vector. Corruption shifts every response by
    rho and sends a uniform floor(eps n) subset to (C x, -C^2 theta'x),
    which stays inside the trimmed transport ball of radius rho by
    construction. Returns (clean, corrupted, theta_star).
    """
    if d < 2:
        raise ValueError("need at least one feature dimension and a response")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d - 1))
    if plan.theta_star is not None:
        theta = np.asarray(plan.theta_star, dtype=float).ravel()
    else:
        theta = rng.normal(size=d - 1)
        theta /= np.linalg.norm(theta)
    y = x @ theta
    clean = empirical(np.column_stack([x, y]))
    k = int(math.floor(plan.eps * n))
    picked = rng.choice(n, size=k, replace=False) if k else np.zeros(0, dtype=int)
    xs = x.copy()
    ys = y + plan.rho
    xs[picked] = plan.C * x[picked]
    ys[picked] = -plan.C ** 2 * (x[picked] @ theta) + plan.rho
    corrupted = empirical(np.column_stack([xs, ys]))
    _check_two_sided(corrupted, clean, plan.eps, plan.p, plan.rho)
    return clean, corrupted, theta


def corrupt_classification(n, d, rho, eps, seed):
    """Margin-classification sample; labels are pinned, features move.

    Clean points are (x, sign(theta'x)); corruption adds rho e1 to every
    feature vector and flips a floor(eps n) subset to -100 x. Labels never
    change, matching the ground cost that refuses to transport them.
    Returns (clean, corrupted, theta_star).
    """
    if d < 2:
        raise ValueError("need at least one feature dimension and a label")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d - 1))
    theta = rng.normal(size=d - 1)
    theta /= np.linalg.norm(theta)
    y = np.sign(x @ theta)
    y[y == 0] = 1.0
    clean = empirical(np.column_stack([x, y]))
    k = int(math.floor(eps * n))
    picked = rng.choice(n, size=k, replace=False) if k else np.zeros(0, dtype=int)
    xs = x.copy()
    xs[picked] = -100.0 * x[picked]
    xs[:, 0] += rho
    corrupted = empirical(np.column_stack([xs, y]))
    mask = TransportMask(np.array([True] * (d - 1) + [False]))
    _check_two_sided(corrupted, clean, eps, 1, rho, mask=mask)
    return clean, corrupted, theta


def corrupt_multiregression(n, d, k_out, rho, eps, seed):
    """Multi-output linear sample; coefficient matrix has standard normal
    entries. Outliers scale features by 10 and responses by -100; every
    feature vector is shifted by rho e1. Returns (clean, corrupted, m_star).

    k_out is capped at 12 because the matching loss enumerates 2^k pieces.
    """
    if k_out > 12:
        raise ValueError("response dimension capped at 12 (loss pieces are 2^k)")
    if k_out < 1 or d < 1:
        raise ValueError("need d >= 1 features and k >= 1 responses")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    m_star = rng.normal(size=(k_out, d))
    y = x @ m_star.T
    clean = empirical(np.column_stack([x, y]))
    k = int(math.floor(eps * n))
    picked = rng.choice(n, size=k, replace=False) if k else np.zeros(0, dtype=int)
    xs = x.copy()
    ys = y.copy()
    xs[picked] = 10.0 * x[picked]
    ys[picked] = -100.0 * y[picked]
    xs[:, 0] += rho
    corrupted = empirical(np.column_stack([xs, ys]))
    _check_two_sided(corrupted, clean, eps, 1, rho)
    return clean, corrupted, m_star
