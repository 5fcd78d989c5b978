"""Quadrature rules for Galerkin boundary-element assembly.

Two families live here:

* symmetric rules on a single triangle, used for pairs of panels that are
  well separated (with a higher-order variant for close but non-touching
  pairs), and

* tensor-product rules on [0,1]^4 composed with singularity-removing
  coordinate transformations, used for pairs of panels that share a
  vertex, an edge, or coincide.  The transformations split the product of
  two reference simplices into relative-coordinate regions on which the
  kernel singularity r^-1 is cancelled by the Jacobian, so plain Gauss
  points converge at full order.

Reference parametrization: a triangle with corners (v0, v1, v2) is the
image of the simplex 0 <= r2 <= r1 <= 1 under

    x(r1, r2) = v0 + r1 (v1 - v0) + r2 (v2 - v1),

with surface Jacobian 2A.  The barycentric coordinates of x(r1, r2) are
(1 - r1, r1 - r2, r2); these are also the nodal hat-function values, which
is what assembly consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "gauss_legendre_01", "triangle_rule", "PairRule", "singular_pair_rule",
    "shared_vertices", "canonical_edge_order", "canonical_vertex_order",
]


def gauss_legendre_01(q: int):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (x + 1.0), 0.5 * w


# -- single-triangle rules ----------------------------------------------------

def _orbit1():
    return [(1 / 3, 1 / 3, 1 / 3)], [1.0]


def _orbit3(a, w):
    b = 1.0 - 2.0 * a
    return [(b, a, a), (a, b, a), (a, a, b)], [w] * 3


def _orbit6(a, b, w):
    c = 1.0 - a - b
    pts = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
    return pts, [w] * 6


@lru_cache(maxsize=None)
def triangle_rule(degree: int):
    """Quadrature on the triangle, weights normalized to sum 1.

    Returns (bary, w) with bary of shape (n, 3); the integral of f over a
    triangle with corners C and area A is A * sum_i w_i f(bary_i @ C).
    Rules exist for degrees 1, 2, 4, 6, 8; a requested degree in between
    rounds up.  Degrees up to 6 use symmetric point sets; degree 8 is a
    collapsed tensor rule (published symmetric weights for it carry too
    few digits to survive a 1e-13 exactness check).
    """
    pts, wts = [], []
    if degree <= 1:
        p, w = _orbit1()
        pts += p; wts += w
    elif degree == 2:
        p, w = _orbit3(1 / 6, 1 / 3)
        pts += p; wts += w
    elif degree <= 4:
        for a, w in ((0.445948490915965, 0.223381589678011),
                     (0.091576213509771, 0.109951743655322)):
            p, ww = _orbit3(a, w)
            pts += p; wts += ww
    elif degree <= 6:
        for a, w in ((0.249286745170910, 0.116786275726379),
                     (0.063089014491502, 0.050844906370207)):
            p, ww = _orbit3(a, w)
            pts += p; wts += ww
        p, ww = _orbit6(0.310352451033785, 0.053145049844816, 0.082851075618374)
        pts += p; wts += ww
    elif degree <= 8:
        # Duffy collapse (x, y) = (u, (1-u) v): the integrand (1-u) f has
        # degree <= 9 in u and <= 8 in v, exact with 5 Gauss points each
        g, gw = gauss_legendre_01(5)
        u, v = np.meshgrid(g, g, indexing="ij")
        ww = np.outer(gw, gw) * (1.0 - u)
        x, y = u.ravel(), ((1.0 - u) * v).ravel()
        bary = np.column_stack([1.0 - x - y, x, y])
        return bary, 2.0 * ww.ravel()
    else:
        raise ValueError(f"no triangle rule of degree {degree}")
    bary = np.array(pts, dtype=np.float64)
    w = np.array(wts, dtype=np.float64)
    return bary, w


# -- singular pair rules ------------------------------------------------------

@dataclass(frozen=True)
class PairRule:
    """Flattened quadrature for one adjacency class.

    Attributes
    ----------
    bx, by : ndarray (nq, 3)
        Barycentric coordinates of the x- and y-points with respect to the
        canonically ordered corners of the test and trial triangle.
    w : ndarray (nq,)
        Weights including the region Jacobians; the pair integral of a
        kernel F is (2 Ax)(2 Ay) * sum_k w_k F(x_k, y_k).
    """
    bx: np.ndarray
    by: np.ndarray
    w: np.ndarray


def _bary(r1, r2):
    return np.stack([1.0 - r1, r1 - r2, r2], axis=-1)


@lru_cache(maxsize=None)
def singular_pair_rule(kind: str, q: int) -> PairRule:
    """Build the 4D rule for a singular pair class.

    kind is one of "coincident", "edge", "vertex"; q is the Gauss order
    per tensor direction, so a class with R regions uses R * q**4 points.

    For "edge" the two triangles must be ordered so both traverse the
    shared edge as corners 0 -> 1; for "vertex" the shared corner must sit
    at position 0 of both.
    """
    g, gw = gauss_legendre_01(q)
    xi, e1, e2, e3 = [a.ravel() for a in np.meshgrid(g, g, g, g, indexing="ij")]
    w4 = (gw[:, None, None, None] * gw[None, :, None, None]
          * gw[None, None, :, None] * gw[None, None, None, :]).ravel()

    t1 = xi
    t2 = xi * e1
    t3 = xi * e1 * e2
    t4 = xi * e1 * e2 * e3

    regions = []  # (r1x, r2x, r1y, r2y, jacobian)
    if kind == "coincident":
        jac = xi**3 * e1**2 * e2
        base = [
            (t1, t1 - t2 + t3, t1 - t4, t1 - t2),
            (t1, t2 - t3 + t4, t1 - t3, t2 - t3),
            (t1 - t4, t2 - t4, t1, t2 - t3),
        ]
        for r1x, r2x, r1y, r2y in base:
            regions.append((r1x, r2x, r1y, r2y, jac))
            regions.append((r1y, r2y, r1x, r2x, jac))  # mirrored partner
    elif kind == "edge":
        jac1 = xi**3 * e1**2
        jac = xi**3 * e1**2 * e2
        regions = [
            (t1, t1 * 0 + xi * e1 * e3, xi * (1 - e1 * e2), xi * e1 * (1 - e2), jac1),
            (t1, t2, xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3), jac),
            (xi * (1 - e1 * e2), xi * e1 * (1 - e2), t1, t4, jac),
            (xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3), t1, t2, jac),
            (xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3), t1, t3, jac),
        ]
    elif kind == "vertex":
        jac = xi**3 * e2
        regions = [
            (t1, t2, xi * e2, xi * e2 * e3, jac),
            (xi * e2, xi * e2 * e3, t1, t2, jac),
        ]
    else:
        raise ValueError(f"unknown singular pair kind '{kind}'")

    bx, by, ww = [], [], []
    for r1x, r2x, r1y, r2y, jac in regions:
        bx.append(_bary(r1x, r2x))
        by.append(_bary(r1y, r2y))
        ww.append(w4 * jac)
    return PairRule(np.concatenate(bx), np.concatenate(by), np.concatenate(ww))


# -- adjacency helpers --------------------------------------------------------

def shared_vertices(tri_a, tri_b):
    """Global vertex ids common to two triangles, as a sorted list."""
    return sorted(set(int(v) for v in tri_a) & set(int(v) for v in tri_b))


def _reorder(tri, first_ids):
    """Local permutation putting `first_ids` (in order) at the front."""
    tri = [int(v) for v in tri]
    perm = [tri.index(g) for g in first_ids]
    perm += [k for k in range(3) if k not in perm]
    return perm


def canonical_edge_order(tri_x, tri_y):
    """Corner permutations sending the shared edge of both triangles to
    positions (0, 1) with a common direction.

    Returns (perm_x, perm_y): local index triples such that
    tri[perm][0:2] is the shared edge, identically ordered.
    """
    shared = shared_vertices(tri_x, tri_y)
    if len(shared) != 2:
        raise ValueError("triangles do not share exactly one edge")
    return _reorder(tri_x, shared), _reorder(tri_y, shared)


def canonical_vertex_order(tri_x, tri_y):
    """Corner permutations sending the single shared vertex to position 0."""
    shared = shared_vertices(tri_x, tri_y)
    if len(shared) != 1:
        raise ValueError("triangles do not share exactly one vertex")
    return _reorder(tri_x, shared), _reorder(tri_y, shared)
