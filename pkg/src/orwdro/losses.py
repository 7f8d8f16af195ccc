"""Piecewise-max-affine loss families over a learner parameter theta.

Every family evaluates as max_j a_j(theta)' z_T + b_j(theta) where z_T is
the transported block of the data point and the coefficient maps are affine
in theta, held as explicit matrices (a_j = A_j theta + a0_j, b_j = B_j theta
+ b0_j). Coefficients may read the point's pinned block (labels) as
constants, so pieces are materialized per fixed block.
"""

import json
from dataclasses import dataclass

import numpy as np

from .measures import TransportMask, full_mask


@dataclass(frozen=True)
class AffinePiece:
    A: np.ndarray  # (d_T, theta_dim)
    a0: np.ndarray  # (d_T,)
    B: np.ndarray  # (theta_dim,)
    b0: float

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        object.__setattr__(self, "a0", np.asarray(self.a0, dtype=float).ravel())
        object.__setattr__(self, "B", np.asarray(self.B, dtype=float).ravel())
        if self.A.ndim != 2 or self.A.shape[0] != self.a0.size:
            raise ValueError("slope matrix shape must be (transported dim, theta dim)")
        if self.B.size != self.A.shape[1]:
            raise ValueError("offset row must match theta dim")

    def slope(self, theta):
        return self.A @ theta + self.a0

    def offset(self, theta):
        return float(self.B @ theta) + float(self.b0)


class LossFamily:
    """kind, parameter dimension, transport mask, and a piece table.

    For families whose coefficients read the fixed block (hinge labels),
    the table is built per fixed block and memoized; otherwise it is built
    once and shared.
    """

    def __init__(self, kind, theta_dim, mask, builder, fixed_dependent):
        self.kind = kind
        self.theta_dim = theta_dim
        self.mask = mask
        self._builder = builder
        self.fixed_dependent = fixed_dependent
        self._cache = {}

    @property
    def data_dim(self):
        return self.mask.dim

    def pieces_for(self, fixed_block):
        fixed_block = np.asarray(fixed_block, dtype=float).ravel()
        if fixed_block.size != int((~self.mask.transported).sum()):
            raise ValueError("fixed-block length does not match the mask")
        key = fixed_block.tobytes() if self.fixed_dependent else b""
        if key not in self._cache:
            self._cache[key] = tuple(self._builder(fixed_block))
        return self._cache[key]


def mad_regression(d):
    """|theta' x - y| on points (x, y) in R^d, everything transported."""
    if d < 2:
        raise ValueError("regression needs at least one feature and a response")
    dx = d - 1
    a_mat = np.vstack([np.eye(dx), np.zeros((1, dx))])
    a0 = np.zeros(d)
    a0[-1] = -1.0
    zeros_b = np.zeros(dx)
    pieces = (
        AffinePiece(a_mat, a0, zeros_b, 0.0),
        AffinePiece(-a_mat, -a0, zeros_b, 0.0),
    )
    return LossFamily("mad", dx, full_mask(d), lambda f: pieces, False)


def hinge(d):
    """max(0, 1 - y theta' x) with the label y pinned (never transported)."""
    if d < 2:
        raise ValueError("hinge needs at least one feature and a label")
    dx = d - 1
    mask = TransportMask(np.array([True] * dx + [False]))
    zeros_b = np.zeros(dx)

    def build(fixed):
        y = float(fixed[0])
        return (
            AffinePiece(np.zeros((dx, dx)), np.zeros(dx), zeros_b, 0.0),
            AffinePiece(-y * np.eye(dx), np.zeros(dx), zeros_b, 1.0),
        )

    return LossFamily("hinge", dx, mask, build, True)


def l1_multiregression(dx, k):
    """max_alpha alpha' (M x - y) over sign vectors; theta = M.ravel().

    2^k pieces; k above 12 is refused since the table is exponential.
    """
    if k < 1 or dx < 1:
        raise ValueError("need dx >= 1 and k >= 1")
    if k > 12:
        raise ValueError("piece table has 2^k rows; k <= 12 required")
    d = dx + k
    theta_dim = k * dx
    pieces = []
    for bits in range(2 ** k):
        alpha = np.array([1.0 if (bits >> (k - 1 - r)) & 1 == 0 else -1.0 for r in range(k)])
        a_mat = np.zeros((d, theta_dim))
        for r in range(k):
            for c in range(dx):
                a_mat[c, r * dx + c] = alpha[r]
        a0 = np.concatenate([np.zeros(dx), -alpha])
        pieces.append(AffinePiece(a_mat, a0, np.zeros(theta_dim), 0.0))
    pieces = tuple(pieces)
    return LossFamily("l1_multireg", theta_dim, full_mask(d), lambda f: pieces, False)


def custom_loss(pieces, mask, theta_dim):
    """Arbitrary piece table, constant in the fixed block."""
    pieces = tuple(pieces)
    if not pieces:
        raise ValueError("at least one piece required")
    d_t = int(mask.transported.sum())
    for p in pieces:
        if p.A.shape != (d_t, theta_dim):
            raise ValueError("piece slope shape disagrees with mask/theta_dim")
    return LossFamily("custom", theta_dim, mask, lambda f: pieces, False)


def load_custom_loss(path):
    """Read a custom family from JSON: theta_dim, transported, pieces list
    of {A, a0, B, b0}."""
    with open(path) as fh:
        doc = json.load(fh)
    mask = TransportMask(np.asarray(doc["transported"], dtype=bool))
    pieces = [
        AffinePiece(np.asarray(p["A"], dtype=float),
                    np.asarray(p["a0"], dtype=float),
                    np.asarray(p["B"], dtype=float),
                    float(p["b0"]))
        for p in doc["pieces"]
    ]
    return custom_loss(pieces, mask, int(doc["theta_dim"]))


def save_custom_loss(path, family):
    pieces = family.pieces_for(np.zeros(int((~family.mask.transported).sum())))
    doc = {
        "theta_dim": family.theta_dim,
        "transported": family.mask.transported.tolist(),
        "pieces": [
            {"A": p.A.tolist(), "a0": p.a0.tolist(), "B": p.B.tolist(), "b0": p.b0}
            for p in pieces
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def _check_theta(family, theta):
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != family.theta_dim:
        raise ValueError(f"theta must have length {family.theta_dim}")
    return theta


def pieces_at(family, theta, fixed_block=()):
    """Materialize the J (slope over transported coords, offset) rows."""
    theta = _check_theta(family, theta)
    return [(p.slope(theta), p.offset(theta)) for p in family.pieces_for(fixed_block)]


def evaluate(family, theta, z):
    theta = _check_theta(family, theta)
    z = np.asarray(z, dtype=float).ravel()
    if z.size != family.data_dim:
        raise ValueError(f"point must have dimension {family.data_dim}")
    z_t, z_f = family.mask.split(z)
    vals = [a @ z_t + b for a, b in pieces_at(family, theta, z_f)]
    return float(max(vals))


def argmax_piece(family, theta, z):
    """Index of the active piece; ties go to the lowest index."""
    theta = _check_theta(family, theta)
    z = np.asarray(z, dtype=float).ravel()
    z_t, z_f = family.mask.split(z)
    vals = np.array([a @ z_t + b for a, b in pieces_at(family, theta, z_f)])
    return int(np.argmax(vals))


@dataclass(frozen=True)
class SeminormReport:
    lipschitz: float
    sobolev12: float


def seminorms(family, theta, sample):
    """Gradient seminorms of the loss over the transported block.

    lipschitz is the worst slope norm across pieces (and across the fixed
    blocks present in the sample, since labels change the table); sobolev12
    is the sample L2 mean of the active-piece slope norm.
    """
    theta = _check_theta(family, theta)
    if sample.dim != family.data_dim:
        raise ValueError("sample dimension does not match the loss family")
    lip = 0.0
    seen = set()
    sob_sq = 0.0
    for i in range(sample.n):
        z = sample.support[i]
        z_t, z_f = family.mask.split(z)
        key = z_f.tobytes()
        rows = pieces_at(family, theta, z_f)
        if key not in seen:
            seen.add(key)
            lip = max(lip, max(float(np.linalg.norm(a)) for a, _ in rows))
        vals = np.array([a @ z_t + b for a, b in rows])
        a_star = rows[int(np.argmax(vals))][0]
        sob_sq += sample.weights[i] * float(a_star @ a_star)
    return SeminormReport(lipschitz=lip, sobolev12=float(np.sqrt(sob_sq)))
