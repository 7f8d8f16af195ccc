"""Discrete probability measures on R^d with an optional non-transported block.

A measure is a finite list of support points with nonnegative weights summing
to one. Some coordinates may be marked as non-transported: they carry infinite
movement cost, which downstream code realizes by pinning those coordinates
rather than doing arithmetic with infinities.
"""

import io
from dataclasses import dataclass, field

import numpy as np

WEIGHT_REJECT_TOL = 1e-9
WEIGHT_NORMALIZE_TOL = 1e-12


@dataclass(frozen=True)
class TransportMask:
    """Marks which coordinates participate in the transport norm.

    transported[k] is True when coordinate k may be moved. Points whose
    non-transported coordinates differ are at infinite transport cost.
    """

    transported: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.transported, dtype=bool)
        if arr.ndim != 1:
            raise ValueError("mask must be a 1-D boolean vector")
        if not arr.any():
            raise ValueError("at least one coordinate must be transported")
        object.__setattr__(self, "transported", arr)
        self.transported.setflags(write=False)

    @property
    def dim(self):
        return self.transported.size

    @property
    def fixed(self):
        return ~self.transported

    def split(self, z):
        """Return (transported block, fixed block) of a point or point array."""
        z = np.asarray(z, dtype=float)
        return z[..., self.transported], z[..., self.fixed]


def full_mask(d):
    """Mask with every coordinate transported."""
    return TransportMask(np.ones(d, dtype=bool))


@dataclass(frozen=True)
class GroundCost:
    """Transport cost ||masked difference||_2^p, +inf on fixed-block mismatch."""

    p: int
    mask: TransportMask

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError("order p must be 1 or 2")


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finitely supported probability measure.

    support has shape (n, d); weights has shape (n,), is nonnegative, and sums
    to one. Weights off by more than 1e-9 are rejected rather than silently
    renormalized; within that tolerance they are normalized exactly.
    Duplicate atoms are preserved, never merged: downstream reformulations
    index dual variables per sample, so atom identity matters.
    """

    support: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.support, dtype=float))
        if pts.size == 0:
            raise ValueError("support must be nonempty")
        if not np.all(np.isfinite(pts)):
            raise ValueError("support points must be finite")
        if self.weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.asarray(self.weights, dtype=float)
        if w.shape != (pts.shape[0],):
            raise ValueError("weights must match the number of support points")
        if np.any(w < -WEIGHT_NORMALIZE_TOL):
            raise ValueError("weights must be nonnegative")
        total = float(w.sum())
        if abs(total - 1.0) > WEIGHT_REJECT_TOL:
            raise ValueError(
                f"weights sum to {total!r}, off by more than {WEIGHT_REJECT_TOL}"
            )
        w = np.clip(w, 0.0, None) / total
        object.__setattr__(self, "support", pts)
        object.__setattr__(self, "weights", w)
        self.support.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def n(self):
        return self.support.shape[0]

    @property
    def dim(self):
        return self.support.shape[1]

    def mean(self):
        return self.weights @ self.support


def empirical(points):
    """Uniform empirical measure over the given points, duplicates kept.

    Parameters
    ----------
    points : sequence of coordinate vectors, all of the same dimension.
    """
    if len(points) == 0:
        raise ValueError("empirical measure needs at least one point")
    dims = {np.asarray(p, dtype=float).ravel().size for p in points}
    if len(dims) != 1:
        raise ValueError("points have ragged dimensions")
    arr = np.array([np.asarray(p, dtype=float).ravel() for p in points])
    return DiscreteMeasure(arr)


def second_moment_about(m, z0):
    """E_m[||Z - z0||^2] for a discrete measure m and center z0."""
    z0 = np.asarray(z0, dtype=float).ravel()
    if z0.size != m.dim:
        raise ValueError(f"center has dimension {z0.size}, measure has {m.dim}")
    diff = m.support - z0
    return float(m.weights @ np.einsum("ij,ij->i", diff, diff))


def centered_covariance_cap_check(m, z0, sigma, tol=1e-9):
    """Check E_m[(Z-z0)(Z-z0)^T] <= sigma^2 I by its top eigenvalue.

    Returns (ok, lambda_max) where ok is lambda_max <= sigma^2 + tol.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    z0 = np.asarray(z0, dtype=float).ravel()
    if z0.size != m.dim:
        raise ValueError(f"center has dimension {z0.size}, measure has {m.dim}")
    diff = m.support - z0
    mat = (diff * m.weights[:, None]).T @ diff
    lam = float(np.linalg.eigvalsh(mat)[-1])
    return lam <= sigma**2 + tol, lam


# ---------------------------------------------------------------------------
# Dataset file format: CSV with one numeric row per sample and an optional
# first line `# transported: 1,1,...,0` carrying the transport mask.
# ---------------------------------------------------------------------------

MASK_HEADER = "# transported:"


def load_dataset_csv(path):
    """Load a dataset CSV, returning (measure, mask or None).

    Rows are samples with uniform weight. A leading `# transported: ...`
    line is parsed into a TransportMask; any other content must be numeric.
    """
    with open(path, "r") as fh:
        text = fh.read()
    return loads_dataset(text)


def loads_dataset(text):
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    mask = None
    if lines and lines[0].lower().startswith(MASK_HEADER):
        flags = lines[0][len(MASK_HEADER):].split(",")
        mask = TransportMask(np.array([int(f) != 0 for f in flags]))
        lines = lines[1:]
    if not lines:
        raise ValueError("dataset file has no sample rows")
    data = np.loadtxt(io.StringIO("\n".join(lines)), delimiter=",", ndmin=2)
    if mask is not None and mask.dim != data.shape[1]:
        raise ValueError("mask length does not match the number of columns")
    return DiscreteMeasure(data), mask


def save_dataset_csv(path, m, mask=None):
    """Write a dataset CSV (uniform-weight samples; weights are not stored)."""
    with open(path, "w") as fh:
        fh.write(dumps_dataset(m, mask))


def dumps_dataset(m, mask=None):
    out = []
    if mask is not None:
        flags = ",".join("1" if t else "0" for t in mask.transported)
        out.append(f"{MASK_HEADER} {flags}")
    for row in m.support:
        out.append(",".join(f"{v:.17g}" for v in row))
    return "\n".join(out) + "\n"


def save_weighted_csv(path, m):
    """Write a measure as CSV with the weight in the first column."""
    with open(path, "w") as fh:
        fh.write("# columns: weight," + ",".join(f"z{k+1}" for k in range(m.dim)) + "\n")
        for w, row in zip(m.weights, m.support):
            fh.write(f"{w:.17g}," + ",".join(f"{v:.17g}" for v in row) + "\n")


def load_weighted_csv(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    data = np.loadtxt(io.StringIO("\n".join(lines)), delimiter=",", ndmin=2)
    return DiscreteMeasure(data[:, 1:], data[:, 0])
