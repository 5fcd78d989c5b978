"""Boundary element trace spaces.

Two discrete families: piecewise constants with one dof per triangle
(natural for fluxes, order -1/2) and continuous piecewise linears with
one dof per vertex (traces, order +1/2).  A space may be restricted to
a tagged part of the surface; on open surfaces the linear family drops
boundary vertices so its functions vanish on the rim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .mesh import Mesh

P0 = "p0"
P1 = "p1"


@dataclass(frozen=True)
class TraceSpace:
    """A P0 or P1 space, possibly restricted to part of the mesh.

    `dofs` holds global triangle ids (p0) or vertex ids (p1), sorted.
    Coefficient vectors follow the order of `dofs`.
    """

    mesh: Mesh
    kind: str
    dofs: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kind not in (P0, P1):
            raise ValueError(f"unknown space kind {self.kind!r}")
        d = np.asarray(self.dofs, dtype=np.int64)
        if d.ndim != 1 or (d.size and (np.any(np.diff(d) <= 0))):
            raise ValueError("dofs must be strictly increasing")
        limit = len(self.mesh.triangles) if self.kind == P0 else len(self.mesh.vertices)
        if d.size and (d[0] < 0 or d[-1] >= limit):
            raise ValueError("dof id out of range")
        object.__setattr__(self, "dofs", d)

    @property
    def n_dofs(self) -> int:
        return len(self.dofs)

    @property
    def is_zero(self) -> bool:
        return self.n_dofs == 0

    @property
    def is_full(self) -> bool:
        limit = len(self.mesh.triangles) if self.kind == P0 else len(self.mesh.vertices)
        return self.n_dofs == limit

    def extend(self, coeffs):
        """Coefficients on `dofs` -> full-length vector, zero elsewhere."""
        coeffs = np.asarray(coeffs)
        limit = len(self.mesh.triangles) if self.kind == P0 else len(self.mesh.vertices)
        out = np.zeros(coeffs.shape[:-1] + (limit,), dtype=coeffs.dtype)
        out[..., self.dofs] = coeffs
        return out

    def restrict(self, full):
        return np.asarray(full)[..., self.dofs]

    def interpolate(self, f):
        """Pointwise interpolation: centroids for p0, vertices for p1."""
        pts = self.mesh.centroids if self.kind == P0 else self.mesh.vertices
        vals = np.apply_along_axis(f, 1, pts[self.dofs]) if self.n_dofs else np.zeros(0)
        return np.asarray(vals, dtype=np.float64)


def build_space(mesh: Mesh, kind: str, tags=None) -> TraceSpace:
    """Construct a trace space, restricted to `tags` when given.

    p0 keeps triangles whose tag is in the set.  p1 keeps vertices whose
    incident triangles are all in the set, so the hat functions live
    inside the region; on an open mesh the rim vertices are dropped as
    well.  `tags=()` gives the zero space.
    """
    if kind == P0:
        if tags is None:
            dofs = np.arange(len(mesh.triangles), dtype=np.int64)
        else:
            keep = np.isin(mesh.tags, np.asarray(sorted(set(tags)), dtype=np.int64))
            dofs = np.flatnonzero(keep).astype(np.int64)
        return TraceSpace(mesh, P0, dofs)
    if kind != P1:
        raise ValueError(f"unknown space kind {kind!r}")
    inside = np.ones(len(mesh.vertices), dtype=bool)
    if tags is not None:
        tagged = np.isin(mesh.tags, np.asarray(sorted(set(tags)), dtype=np.int64))
        inside[mesh.triangles[~tagged].ravel()] = False
    if not mesh.closed:
        inside[mesh.boundary_vertices] = False
    return TraceSpace(mesh, P1, np.flatnonzero(inside).astype(np.int64))


def duality_matrix(flux_space: TraceSpace, trace_space: TraceSpace) -> np.ndarray:
    """Pairing (psi_i, phi_j) of p0 test against p1 trial functions.

    A hat integrates to area/3 over each incident triangle, so the
    entry is A_T / 3 exactly when vertex j is a corner of triangle i.
    """
    if flux_space.kind != P0 or trace_space.kind != P1:
        raise ValueError("duality pairs a p0 space against a p1 space")
    if flux_space.mesh is not trace_space.mesh:
        raise ValueError("spaces live on different meshes")
    mesh = flux_space.mesh
    full = np.zeros((len(mesh.triangles), len(mesh.vertices)))
    rows = np.repeat(np.arange(len(mesh.triangles)), 3)
    full[rows, mesh.triangles.ravel()] = np.repeat(mesh.areas / 3.0, 3)
    return full[np.ix_(flux_space.dofs, trace_space.dofs)]


class EnergyNorm:
    """A symmetric positive definite Gram matrix as an inner product."""

    def __init__(self, space: TraceSpace, gram: np.ndarray):
        gram = np.asarray(gram, dtype=np.float64)
        if gram.shape != (space.n_dofs, space.n_dofs):
            raise ValueError("gram matrix does not match the space")
        if space.n_dofs and not np.allclose(gram, gram.T, rtol=1e-10, atol=1e-12):
            raise ValueError("gram matrix is not symmetric")
        self.space = space
        self.gram = 0.5 * (gram + gram.T)
        self._chol = cho_factor(self.gram) if space.n_dofs else None

    def norm(self, coeffs) -> float:
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.size == 0:
            return 0.0
        return float(np.sqrt(max(coeffs @ self.gram @ coeffs, 0.0)))

    def inner(self, u, v) -> float:
        if self.space.n_dofs == 0:
            return 0.0
        return float(np.asarray(u) @ self.gram @ np.asarray(v))

    def dual_norm(self, rhs) -> float:
        """Norm of a functional given by its coefficient vector."""
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.size == 0:
            return 0.0
        return float(np.sqrt(max(rhs @ cho_solve(self._chol, rhs), 0.0)))

    def project_best(self, target, basis=None):
        """Best approximation of `target` in this norm.

        Without `basis` this is the identity (target already lives in the
        space, useful only for its residual form).  With an (n, m) basis
        matrix Z the projection onto span(Z) is returned as coefficients
        in the ambient space.
        """
        target = np.asarray(target, dtype=np.float64)
        if basis is None:
            return target.copy()
        Z = np.asarray(basis, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[0] != self.space.n_dofs:
            raise ValueError("basis must be (n_dofs, m)")
        G = Z.T @ self.gram @ Z
        rhs = Z.T @ (self.gram @ target)
        return Z @ np.linalg.solve(G, rhs)
