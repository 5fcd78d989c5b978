"""Brute-force reference integration for panel pairs (test helper).

Independent of the production quadrature: the inner integral of the
kernel exp(-s r)/(4 pi r) over a triangle is done by a signed polar fan
around the projection of the observation point onto the triangle plane
(the radial part has a closed form; only a smooth 1D angular integral is
left), and the outer integral uses a symmetric triangle rule on a
uniformly subdivided test panel.  Slow but trustworthy.
"""

from __future__ import annotations

import numpy as np

from tdbem.quadrature import gauss_legendre_01, triangle_rule


def _inner_polar(x, corners, s, n_theta=120):
    """integral over the triangle `corners` of exp(-s|x-y|)/(4 pi |x-y|) dy."""
    a, b, c = corners
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    z = float(np.dot(x - a, n))            # signed height above the plane
    xh = x - z * n                          # in-plane projection
    az = abs(z)

    g, gw = gauss_legendre_01(n_theta)
    total = 0.0
    for p, q in ((a, b), (b, c), (c, a)):
        u, v = p - xh, q - xh
        lu, lv = np.linalg.norm(u), np.linalg.norm(v)
        if lu < 1e-14 or lv < 1e-14:
            continue                        # fan triangle degenerates
        # wedge (xh, p, q): signed by orientation against the plane normal
        w = np.cross(u, v)
        sign = np.sign(np.dot(w, n))
        if sign == 0.0:
            continue
        ang = np.arctan2(np.linalg.norm(w), np.dot(u, v))
        # distance from xh to the line (p, q)
        edge = q - p
        t = -np.dot(p - xh, edge) / np.dot(edge, edge)
        foot = p + t * edge - xh
        d = np.linalg.norm(foot)
        if d < 1e-14:
            continue                        # xh on the edge line: zero wedge
        # in-plane frame with v at angle +ang; the perpendicular foot may
        # sit outside the wedge, so its angle must keep its sign
        ex = u / lu
        ey = sign * np.cross(n, ex)
        phi0 = np.arctan2(np.dot(foot, ey), np.dot(foot, ex))
        theta = ang * g
        R = d / np.cos(theta - phi0)
        rmax = np.sqrt(R**2 + z**2)
        if s == 0:
            radial = rmax - az
        else:
            radial = (np.exp(-s * az) - np.exp(-s * rmax)) / s
        total += sign * ang * np.dot(gw, radial) / (4 * np.pi)
    return total


def _subdivide_triangle(corners, levels):
    tris = [np.asarray(corners, dtype=float)]
    for _ in range(levels):
        out = []
        for t in tris:
            a, b, c = t
            ab, bc, ca = 0.5 * (a + b), 0.5 * (b + c), 0.5 * (c + a)
            out += [np.array(v) for v in ([a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca])]
        tris = out
    return tris


def pair_integral(corners_x, corners_y, s, fx=None, fy=None,
                  outer_levels=3, outer_degree=8, n_theta=120):
    """Reference double integral of fx(x) fy(y) exp(-s r)/(4 pi r).

    fx, fy map a 3-vector to a scalar (default 1).  Only constant fy is
    supported exactly by the polar inner integral, so fy must be None;
    fx may vary.
    """
    if fy is not None:
        raise NotImplementedError("inner density must be constant")
    bary, w = triangle_rule(outer_degree)
    total = 0.0
    for t in _subdivide_triangle(corners_x, outer_levels):
        area = 0.5 * np.linalg.norm(np.cross(t[1] - t[0], t[2] - t[0]))
        pts = bary @ t
        for p, ww in zip(pts, w):
            val = _inner_polar(p, np.asarray(corners_y, dtype=float), s, n_theta)
            if fx is not None:
                val *= fx(p)
            total += area * ww * val
    return total


def pair_integral_extrapolated(corners_x, corners_y, s, **kw):
    """Richardson extrapolation over one outer subdivision halving.

    The outer error decays like h^2 (edge singularities of the inner
    potential), so (4 I_3 - I_2) / 3 gains roughly two more digits.
    """
    i2 = pair_integral(corners_x, corners_y, s, outer_levels=2, n_theta=60, **kw)
    i3 = pair_integral(corners_x, corners_y, s, outer_levels=3, n_theta=60, **kw)
    return (4.0 * i3 - i2) / 3.0
