"""Gauss quadrature on triangles and edges.

Rules are given in barycentric coordinates on the reference triangle and
mapped to physical triangles in batch. Weights are normalized so that they
sum to 1; physical weights are `weight * area`.
"""

import numpy as np

__all__ = [
    "triangle_rule",
    "physical_points",
    "subdivide_reference",
    "edge_rule",
]


def _sym3(a, w):
    """Three-point orbit (a, b, b) with b = (1-a)/2."""
    b = 0.5 * (1.0 - a)
    return [(a, b, b, w), (b, a, b, w), (b, b, a, w)]


def _sym6(a, b, w):
    """Six-point orbit of (a, b, c) with c = 1-a-b."""
    c = 1.0 - a - b
    return [
        (a, b, c, w), (a, c, b, w), (b, a, c, w),
        (b, c, a, w), (c, a, b, w), (c, b, a, w),
    ]


def _build_rules():
    rules = {}
    # degree 1: centroid
    rules[1] = [(1 / 3, 1 / 3, 1 / 3, 1.0)]
    # degree 2: 3 interior points
    rules[2] = _sym3(2 / 3, 1 / 3)
    # degree 4: Dunavant 6-point
    rules[4] = (
        _sym3(0.816847572980459, 0.109951743655322)
        + _sym3(0.108103018168070, 0.223381589678011)
    )
    # degree 6: Dunavant 12-point
    rules[6] = (
        _sym3(0.873821971016996, 0.050844906370207)
        + _sym3(0.501426509658179, 0.116786275726379)
        + _sym6(0.636502499121399, 0.310352451033785, 0.082851075618374)
    )
    out = {}
    for deg, rows in rules.items():
        arr = np.array(rows)
        out[deg] = (np.ascontiguousarray(arr[:, :3]), np.ascontiguousarray(arr[:, 3]))
    return out


_RULES = _build_rules()


def triangle_rule(degree):
    """Return (bary, weights) exact for polynomials up to `degree`.

    bary has shape (nq, 3); weights sum to 1.
    """
    for deg in sorted(_RULES):
        if deg >= degree:
            return _RULES[deg]
    raise ValueError(f"no triangle rule of degree {degree} available")


def physical_points(tri_coords, bary):
    """Map barycentric points onto a batch of triangles.

    tri_coords: (nt, 3, 2) vertex coordinates.
    bary: (nq, 3).
    Returns points of shape (nt, nq, 2).
    """
    return np.einsum("qk,tkd->tqd", bary, tri_coords)


def subdivide_reference(bary, weights, levels):
    """Refine a rule by uniform 4-way triangle subdivision.

    Each level splits every (sub)triangle into 4 congruent ones; the base rule
    is applied on each. Returns (bary, weights) with weights still summing
    to 1. Used for integrands with an interior discontinuity.
    """
    corners = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    tris = [corners]
    for _ in range(levels):
        nxt = []
        for t in tris:
            m01 = 0.5 * (t[0] + t[1])
            m12 = 0.5 * (t[1] + t[2])
            m20 = 0.5 * (t[2] + t[0])
            nxt.extend([
                np.array([t[0], m01, m20]),
                np.array([m01, t[1], m12]),
                np.array([m20, m12, t[2]]),
                np.array([m01, m12, m20]),
            ])
        tris = nxt
    frac = 1.0 / len(tris)
    all_b = np.concatenate([bary @ t for t in tris], axis=0)
    all_w = np.concatenate([weights * frac for _ in tris], axis=0)
    return all_b, all_w


def edge_rule(npoints):
    """Gauss-Legendre rule on [0, 1]: returns (points, weights), weights sum to 1."""
    x, w = np.polynomial.legendre.leggauss(npoints)
    return 0.5 * (x + 1.0), 0.5 * w
