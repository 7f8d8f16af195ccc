"""Robust location estimates for picking the moment center z0, plus a
power-of-two search for the moment cap itself."""

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TrimSpec:
    gamma: float = 1.0 / 3.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 0.5:
            raise ValueError("gamma must lie in [0, 1/2)")


def _trimmed_mean_1d(values, weights, gamma):
    order = np.argsort(values, kind="stable")
    xs = values[order]
    ws = weights[order]
    hi = np.cumsum(ws)
    lo = hi - ws
    kept = np.minimum(hi, 1.0 - gamma) - np.maximum(lo, gamma)
    kept = np.maximum(kept, 0.0)
    return float(kept @ xs) / (1.0 - 2.0 * gamma)


def trimmed_mean(data, spec=TrimSpec()):
    """Coordinate-wise mean of the conditional law on quantiles
    [gamma, 1 - gamma]; atoms straddling the cut contribute fractionally."""
    if data.n < 3:
        raise ValueError("trimming needs at least 3 atoms")
    return np.array([
        _trimmed_mean_1d(data.support[:, k], data.weights, spec.gamma)
        for k in range(data.dim)
    ])


@dataclass
class FilterState:
    weights: np.ndarray
    iterations: int
    top_eigenvalue: float  # of the normalized weighted covariance at exit
    removed_mass: float


def _weighted_moments(support, w):
    total = w.sum()
    mean = (w @ support) / total
    centered = support - mean
    cov_unnorm = (centered * w[:, None]).T @ centered
    return mean, cov_unnorm, total


def iterative_filter(data, eps, lambda_threshold=9.0):
    """Downweight high-variance directions until the covariance flattens.

    Each round removes 1/n total weight from the atoms with the largest
    squared projections on the top eigenvector (fractional at the cut),
    stopping once the normalized top eigenvalue falls below the threshold
    or the cumulative removal budget 2*eps is spent, so at most
    ceil(2 eps n) + 1 rounds run. Works in O(n d^2) per round. The
    unnormalized weighted second moment about the running mean can only
    shrink under removal, which is asserted each step.

    The eps <= 1/12 precondition matches the regime where the returned
    point is guaranteed within O(1 + rho0) of the true mean; n of order at
    least d is assumed for the covariance estimates to concentrate.
    """
    if eps > 1.0 / 12.0 + 1e-12:
        raise ValueError("filtering guarantee requires eps <= 1/12")
    if eps < 0.0:
        raise ValueError("eps must be nonnegative")
    w = data.weights.copy()
    n = data.n
    budget = 2.0 * eps
    removed = 0.0
    prev_unnorm_top = math.inf
    iterations = 0
    while True:
        mean, cov_unnorm, total = _weighted_moments(data.support, w)
        if total <= 1e-12:
            raise ValueError("all mass removed; input is pathological")
        eigvals, eigvecs = np.linalg.eigh(cov_unnorm)
        unnorm_top = float(eigvals[-1])
        if unnorm_top > prev_unnorm_top * (1.0 + 1e-9) + 1e-12:
            raise AssertionError("filter step increased the weighted second moment")
        prev_unnorm_top = unnorm_top
        lam = unnorm_top / total
        v = eigvecs[:, -1]
        if lam <= lambda_threshold or budget - removed <= 1e-15:
            return mean, FilterState(w, iterations, lam, removed)
        step = min(1.0 / n, budget - removed)
        scores = ((data.support - mean) @ v) ** 2
        order = np.argsort(-scores, kind="stable")
        left = step
        for k in order:
            take = min(w[k], left)
            w[k] -= take
            left -= take
            if left <= 1e-15:
                break
        removed += step - left
        iterations += 1


def iterative_filter_mean(data, eps, lambda_threshold=9.0):
    return iterative_filter(data, eps, lambda_threshold)[0]


def tune_sigma(data, eps, rho, family_builder, sigma_lo, sigma_hi, solve_fn=None):
    """Smallest power-of-two multiple of sigma_lo whose inner program is
    bounded, found by binary search (feasibility is monotone in sigma).

    family_builder(sigma) must return a ConicProgram for the given data,
    eps, and rho; it is a callable so this module stays independent of the
    program builders. The result is at most twice the minimal feasible
    sigma in the bracket.
    """
    from .conic import solve as conic_solve
    solve_fn = solve_fn or (lambda prog: conic_solve(prog).status)
    if not (0 < sigma_lo < sigma_hi):
        raise ValueError("need 0 < sigma_lo < sigma_hi")
    m = int(math.ceil(math.log2(sigma_hi / sigma_lo)))

    def feasible(i):
        return solve_fn(family_builder(sigma_lo * 2.0 ** i)) == "optimal"

    if not feasible(m):
        raise ValueError("no feasible sigma in the bracket")
    lo, hi = -1, m  # invariant: lo infeasible (or sentinel), hi feasible
    if feasible(0):
        hi = 0
    else:
        lo = 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return sigma_lo * 2.0 ** hi
