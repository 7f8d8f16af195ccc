"""Seeded random builders shared across test modules."""

import numpy as np

from orwdro import DiscreteMeasure


def random_measure(rng, n, d, scale=1.0, weighted=True):
    pts = scale * rng.normal(size=(n, d))
    if weighted:
        w = rng.uniform(0.2, 1.0, size=n)
        return DiscreteMeasure(pts, w / w.sum())
    return DiscreteMeasure(pts)


def random_pieces(rng, d, j, slope_scale=1.0):
    """Shared piece list [(a, b), ...] for a d-dimensional point."""
    return [
        (slope_scale * rng.normal(size=d), float(rng.normal()))
        for _ in range(j)
    ]
