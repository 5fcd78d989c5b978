"""Galerkin boundary operators for the kernel exp(-s r) / (4 pi r).

For Re s > 0 the kernel decays, the single layer and hypersingular
forms are coercive, and everything is real when s is real.

Assembly runs one vectorized sweep with a regular rule over all panel
pairs, then corrects the pairs that need care: touching pairs get the
singular rules, close pairs a higher order regular rule.  One sweep
produces all three distinct matrices together, since they contract the
same kernel values against different basis moments.  The hypersingular
form uses the integrated (surface curl) representation, whose gradient
piece is built from the single layer panel integrals, so only weakly
singular integrals ever appear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from .mesh import Mesh
from .quadrature import (
    canonical_edge_order,
    canonical_vertex_order,
    shared_vertices,
    singular_pair_rule,
    triangle_rule,
)
from .spaces import EnergyNorm, TraceSpace, build_space


@dataclass(frozen=True)
class AssemblyConfig:
    """Quadrature selections for operator assembly.

    Distance bands, measured in mean panel diameters between centroids:
    touching pairs use the singular rules of the given order, pairs
    closer than near_factor the near rule, pairs closer than mid_factor
    the mid rule, everything else the cheap far rule of the all-pairs
    sweep.  The defaults keep a higher-order upgrade within 1e-6.
    """

    far_degree: int = 4
    mid_degree: int = 6
    near_degree: int = 8
    singular_order: int = 6
    near_factor: float = 2.0
    mid_factor: float = 5.0


DEFAULT_CONFIG = AssemblyConfig()


def curl_vectors(mesh: Mesh) -> np.ndarray:
    """Surface curl of each hat function, constant per triangle.

    out[t, i] is the curl of the hat at corner i of triangle t: the
    opposite edge vector over twice the area.
    """
    v = mesh.corners
    out = np.empty((len(mesh.triangles), 3, 3))
    for i in range(3):
        out[:, i, :] = v[:, (i + 2) % 3, :] - v[:, (i + 1) % 3, :]
    return out / (2.0 * mesh.areas)[:, None, None]


def _curl_component_maps(mesh: Mesh):
    """Sparse maps C_d (n_tri x n_vert) holding component d of the curl
    of each hat, so that the gradient part of the hypersingular form is
    sum_d C_d^T (single layer panel integrals) C_d."""
    curls = curl_vectors(mesh)
    n_tri, n_vert = len(mesh.triangles), len(mesh.vertices)
    rows = np.repeat(np.arange(n_tri), 3)
    cols = mesh.triangles.ravel()
    return [
        sp.csr_matrix((curls[:, :, d].ravel(), (rows, cols)), shape=(n_tri, n_vert))
        for d in range(3)
    ]


def _classify_pairs(mesh: Mesh):
    """Unordered touching pairs with canonical corner permutations.

    Returns (edge, vertex): integer arrays with rows
    (tx, ty, px0, px1, px2, py0, py1, py2).
    """
    tris = mesh.triangles
    v2t = mesh.vertex_to_triangles
    edge_rows, vert_rows = [], []
    for tx in range(len(tris)):
        neighbours = set()
        for v in tris[tx]:
            neighbours.update(int(t) for t in v2t[v])
        for ty in sorted(neighbours):
            if ty <= tx:
                continue
            shared = shared_vertices(tris[tx], tris[ty])
            if len(shared) == 2:
                px, py = canonical_edge_order(tris[tx], tris[ty])
                edge_rows.append((tx, ty, *px, *py))
            else:
                px, py = canonical_vertex_order(tris[tx], tris[ty])
                vert_rows.append((tx, ty, *px, *py))
    edge = np.array(edge_rows, dtype=np.int64).reshape(-1, 8)
    vert = np.array(vert_rows, dtype=np.int64).reshape(-1, 8)
    return edge, vert


def _band_pairs(mesh: Mesh, near_factor: float, mid_factor: float, touching: set):
    """Non-touching pairs of the near and mid distance bands."""
    c = mesh.centroids
    diam = mesh.edge_lengths.max(axis=1)
    d2 = np.sum((c[:, None, :] - c[None, :, :]) ** 2, axis=-1)
    mean = 0.5 * (diam[:, None] + diam[None, :])
    outer = max(near_factor, mid_factor)
    tx, ty = np.nonzero(np.triu(d2 < (outer * mean) ** 2, k=1))
    is_near = d2[tx, ty] < (near_factor * mean[tx, ty]) ** 2
    is_mid = ~is_near & (d2[tx, ty] < (mid_factor * mean[tx, ty]) ** 2)
    near_rows, mid_rows = [], []
    for a, b, nr, md in zip(tx.tolist(), ty.tolist(), is_near.tolist(), is_mid.tolist()):
        if (a, b) in touching:
            continue
        if nr:
            near_rows.append((a, b))
        elif md:
            mid_rows.append((a, b))
    return (
        np.array(near_rows, dtype=np.int64).reshape(-1, 2),
        np.array(mid_rows, dtype=np.int64).reshape(-1, 2),
    )


def _kernel(r, s):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.exp(-s * r) / (4.0 * np.pi * r)


def _cexp_neg(r, s):
    """exp(-s r) for float32 r through real SIMD ufuncs; much faster
    than the complex exponential."""
    sig = np.float32(s.real)
    om = np.float32(s.imag)
    E = np.exp(-sig * r)
    if om == 0.0:
        return E
    arg = om * r
    ek = np.empty(r.shape, np.complex64)
    np.multiply(E, np.cos(arg), out=ek.real)
    np.sin(arg, out=arg)
    np.multiply(E, arg, out=arg)
    np.negative(arg, out=ek.imag)
    return ek


class _Accumulator:
    """Scatters weighted kernel values of pair batches into the forms.

    Batches arrive in quadrature-major layout: km (nq, npair) carries
    the plain kernel times all weights and jacobians, feeding the
    single layer and the mass part of the hypersingular form.  The
    double layer contracts its own kernel carrying the trial-side
    normal: dk_fwd for trial on the y panel, dk_rev for the mirrored
    pair with trial on the x panel (not a transpose, the normal
    changes).  bx / by (nq, 3) hold hat values of the shared rule,
    vx / vy (npair, 3) the global vertex ids behind their columns.
    """

    def __init__(self, mesh, which, dtype):
        n_tri, n_vert = len(mesh.triangles), len(mesh.vertices)
        self.need_v = "v" in which or "w" in which
        self.need_k = "k" in which
        self.need_w = "w" in which
        self.V = np.zeros((n_tri, n_tri), dtype=dtype) if self.need_v else None
        self.K = np.zeros((n_tri, n_vert), dtype=dtype) if self.need_k else None
        self.W2 = np.zeros((n_vert, n_vert), dtype=dtype) if self.need_w else None
        self.nxny = mesh.normals @ mesh.normals.T if self.need_w else None

    def add(self, txs, tys, km, dk_fwd, dk_rev, bx, by, vx, vy, mirror):
        """Add one batch; with mirror set, the (ty, tx) contribution is
        added too using symmetry of the plain kernel."""
        if self.need_v:
            vals = km.sum(axis=0)
            np.add.at(self.V, (txs, tys), vals)
            if mirror:
                np.add.at(self.V, (tys, txs), vals)
        if self.need_k and dk_fwd is not None:
            mom = np.tensordot(dk_fwd, by, axes=([0], [0]))
            rows = np.broadcast_to(txs[:, None], mom.shape)
            np.add.at(self.K, (rows.ravel(), vy.ravel()), mom.ravel())
            if mirror:
                mom = np.tensordot(dk_rev, bx, axes=([0], [0]))
                rows = np.broadcast_to(tys[:, None], mom.shape)
                np.add.at(self.K, (rows.ravel(), vx.ravel()), mom.ravel())
        if self.need_w:
            bxy = (bx[:, :, None] * by[:, None, :]).reshape(len(bx), 9)
            wb = np.tensordot(km, bxy, axes=([0], [0])).reshape(-1, 3, 3)
            wb = wb * self.nxny[txs, tys][:, None, None]
            rows = np.broadcast_to(vx[:, :, None], wb.shape)
            cols = np.broadcast_to(vy[:, None, :], wb.shape)
            np.add.at(self.W2, (rows.ravel(), cols.ravel()), wb.ravel())
            if mirror:
                np.add.at(
                    self.W2,
                    (np.transpose(cols, (0, 2, 1)).ravel(),
                     np.transpose(rows, (0, 2, 1)).ravel()),
                    np.transpose(wb, (0, 2, 1)).ravel(),
                )


def _map_points(bary, corners):
    """Rule points on a batch of panels, quadrature major: (nq, n, 3)."""
    return np.tensordot(bary, corners, axes=([1], [1]))


def _radii(diff):
    return np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2)


def _normal_dots(diff, normals):
    """(y - x) . n for diff (nq, n, 3) against per-pair normals (n, 3)."""
    return (diff[..., 0] * normals[None, :, 0]
            + diff[..., 1] * normals[None, :, 1]
            + diff[..., 2] * normals[None, :, 2])


def assemble_operators(mesh: Mesh, s, config: AssemblyConfig | None = None,
                       which: str = "vkw"):
    """Assemble the requested Galerkin matrices at one Laplace point.

    Returns a dict with keys among 'v' (p0 x p0 single layer), 'k'
    (p0 test x p1 trial double layer) and 'w' (p1 x p1 hypersingular
    form).  The transposed double layer is exactly k.T.  Matrices cover
    the full mesh; restriction to subspaces is slicing.
    """
    config = config or DEFAULT_CONFIG
    if not which or not set(which) <= set("kvw"):
        raise ValueError(f"unknown operator selection {which!r}")
    s = complex(s)
    if s.real <= 0:
        raise ValueError("the kernel needs Re s > 0")
    real = s.imag == 0.0
    sval = s.real if real else s
    dtype = np.float64 if real else np.complex128

    tris = mesh.triangles
    n_tri = len(tris)
    areas = mesh.areas
    acc = _Accumulator(mesh, which, dtype)

    # regular sweep over all ordered pairs --------------------------------
    bary, wq = triangle_rule(config.far_degree)
    nq = len(wq)
    pts = np.einsum("qi,tic->tqc", bary, mesh.corners)
    wA = wq[None, :] * areas[:, None]
    flat = pts.reshape(-1, 3)
    sq = np.sum(flat**2, axis=1)

    momy_k = np.einsum("qj,tq->tqj", bary, wA) if acc.need_k or acc.need_w else None
    if acc.need_k:
        n_flat = np.repeat(mesh.normals, nq, axis=0)
        yn = np.einsum("pc,pc->p", flat, n_flat)
    chunk = max(1, int(2**22 // max(n_tri * nq * nq, 1)))
    for lo in range(0, n_tri, chunk):
        hi = min(lo + chunk, n_tri)
        X = flat[lo * nq : hi * nq]
        r2 = sq[lo * nq : hi * nq, None] + sq[None, :] - 2.0 * (X @ flat.T)
        r = np.sqrt(np.maximum(r2, 0.0))
        km = _kernel(r, sval)

        def zero_diag(block):
            for t in range(lo, hi):
                block[(t - lo) * nq : (t - lo + 1) * nq, t * nq : (t + 1) * nq] = 0.0

        zero_diag(km)
        wx = wA[lo:hi]
        if acc.need_k:
            # trial-side normal derivative of the kernel
            ndot = yn[None, :] - X @ n_flat.T
            with np.errstate(divide="ignore", invalid="ignore"):
                dk = km * (-(sval + 1.0 / r)) * ndot / r
            zero_diag(dk)
            dk = dk.reshape(hi - lo, nq, n_tri, nq)
            kb = np.einsum("aqbp,aq,bpj->abj", dk, wx, momy_k, optimize=True)
            rows = np.broadcast_to(np.arange(lo, hi)[:, None, None], kb.shape)
            cols = np.broadcast_to(tris[None, :, :], kb.shape)
            np.add.at(acc.K, (rows.ravel(), cols.ravel()), kb.ravel())
        km = km.reshape(hi - lo, nq, n_tri, nq)
        if acc.need_v:
            acc.V[lo:hi] += np.einsum("aqbp,aq,bp->ab", km, wx, wA, optimize=True)
        if acc.need_w:
            momx = np.einsum("qi,tq->tqi", bary, wx)
            wb = np.einsum("aqbp,aqi,bpj->aibj", km, momx, momy_k, optimize=True)
            wb *= acc.nxny[lo:hi, None, :, None]
            rows = np.broadcast_to(tris[lo:hi, :, None, None], wb.shape)
            cols = np.broadcast_to(tris[None, None, :, :], wb.shape)
            np.add.at(acc.W2, (rows.ravel(), cols.ravel()), wb.ravel())

    # corrections ----------------------------------------------------------
    edge, vert = _classify_pairs(mesh)
    touching = {(int(a), int(b)) for a, b in edge[:, :2]} | {
        (int(a), int(b)) for a, b in vert[:, :2]
    }
    near, mid = _band_pairs(mesh, config.near_factor, config.mid_factor, touching)

    def dk_pair(km, r, diff, txs, tys):
        # trial-normal kernels for both pair orders; diff = Y - X
        scale = km * (-(sval + 1.0 / r)) / r
        fwd = scale * _normal_dots(diff, mesh.normals[tys])
        rev = -scale * _normal_dots(diff, mesh.normals[txs])
        return fwd, rev

    def regular_batch(txs, tys, degree, sign):
        # flattened tensor grid of a regular rule on both panels
        b, w = triangle_rule(degree)
        m = len(w)
        bx = np.repeat(b, m, axis=0)
        by = np.tile(b, (m, 1))
        w2 = sign * np.outer(w, w).ravel()
        step = max(1, int(2**21 // (m * m)))
        for lo in range(0, len(txs), step):
            tx, ty = txs[lo : lo + step], tys[lo : lo + step]
            px = _map_points(b, mesh.corners[tx])
            py = _map_points(b, mesh.corners[ty])
            diff = (py[None, :, :, :] - px[:, None, :, :]).reshape(m * m, len(tx), 3)
            r = _radii(diff)
            km = _kernel(r, sval)
            km *= w2[:, None]
            km *= (areas[tx] * areas[ty])[None, :]
            dkf, dkr = dk_pair(km, r, diff, tx, ty) if acc.need_k else (None, None)
            acc.add(tx, ty, km, dkf, dkr, bx, by, tris[tx], tris[ty], mirror=True)

    def singular_batch(kind, rows):
        if not len(rows):
            return
        rule = singular_pair_rule(kind, config.singular_order)
        step = max(1, int(2**21 // len(rule.w)))
        for lo in range(0, len(rows), step):
            part = rows[lo : lo + step]
            txs, tys = part[:, 0], part[:, 1]
            cx = np.take_along_axis(mesh.corners[txs], part[:, 2:5, None], axis=1)
            cy = np.take_along_axis(mesh.corners[tys], part[:, 5:8, None], axis=1)
            vx = np.take_along_axis(tris[txs], part[:, 2:5], axis=1)
            vy = np.take_along_axis(tris[tys], part[:, 5:8], axis=1)
            diff = _map_points(rule.by, cy) - _map_points(rule.bx, cx)
            r = _radii(diff)
            km = _kernel(r, sval)
            km *= rule.w[:, None]
            km *= (4.0 * areas[txs] * areas[tys])[None, :]
            if kind != "coincident" and acc.need_k:
                # coincident pairs are flat: trial normal orthogonal to Y - X
                dkf, dkr = dk_pair(km, r, diff, txs, tys)
            else:
                dkf = dkr = None
            acc.add(txs, tys, km, dkf, dkr, rule.bx, rule.by, vx, vy,
                    mirror=kind != "coincident")

    for pairs, degree in ((near, config.near_degree), (mid, config.mid_degree)):
        if len(pairs):
            regular_batch(pairs[:, 0], pairs[:, 1], config.far_degree, -1.0)
            regular_batch(pairs[:, 0], pairs[:, 1], degree, +1.0)
    for rows in (edge, vert):
        if len(rows):
            regular_batch(rows[:, 0], rows[:, 1], config.far_degree, -1.0)
    singular_batch("edge", edge)
    singular_batch("vertex", vert)
    diag = np.arange(n_tri, dtype=np.int64)
    singular_batch("coincident", np.concatenate(
        [diag[:, None], diag[:, None], np.tile([0, 1, 2, 0, 1, 2], (n_tri, 1))], axis=1))

    # final forms ----------------------------------------------------------
    out = {}
    if acc.need_v:
        V = 0.5 * (acc.V + acc.V.T)
        if "v" in which:
            out["v"] = V
    if acc.need_k:
        out["k"] = acc.K
    if acc.need_w:
        W = (s * s if not real else sval * sval) * acc.W2
        for C in _curl_component_maps(mesh):
            W += C.T @ (V @ C.toarray())
        out["w"] = 0.5 * (W + W.T)
    return out


def assemble_v(mesh, s, config=None):
    return assemble_operators(mesh, s, config, which="v")["v"]


def assemble_k(mesh, s, config=None):
    return assemble_operators(mesh, s, config, which="k")["k"]


def assemble_w(mesh, s, config=None):
    return assemble_operators(mesh, s, config, which="w")["w"]


# -- potentials ----------------------------------------------------------


def potential_matrices(mesh: Mesh, points, s, config: AssemblyConfig | None = None,
                       which: str = "sd"):
    """Evaluation matrices of the layer potentials at off-surface points.

    's': single layer from p0 densities, shape (n_pts, n_tri).
    'd': double layer from p1 densities, shape (n_pts, n_vert), using
    the outward normal of the mesh.
    """
    config = config or DEFAULT_CONFIG
    if not which or not set(which) <= set("sd"):
        raise ValueError(f"unknown potential selection {which!r}")
    s = complex(s)
    real = s.imag == 0.0
    sval = s.real if real else s
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))

    bary, wq = triangle_rule(config.near_degree)
    pts = np.einsum("qi,tic->tqc", bary, mesh.corners)
    wA = wq[None, :] * mesh.areas[:, None]

    diff = points[:, None, None, :] - pts[None, :, :, :]      # (o, t, q, 3)
    r = np.linalg.norm(diff, axis=-1)
    km = _kernel(r, sval)

    out = {}
    if "s" in which:
        out["s"] = np.einsum("otq,tq->ot", km, wA, optimize=True)
    if "d" in which:
        # normal derivative in y: -(s + 1/r) k * ((y - x) . n) / r
        ndot = np.einsum("otqc,tc->otq", -diff, mesh.normals)  # (y - x) . n
        dk = -(sval + 1.0 / r) * km * ndot / r
        vals = np.einsum("otq,tq,qj->otj", dk, wA, bary, optimize=True)
        D = np.zeros((len(points), len(mesh.vertices)), dtype=km.dtype)
        orow = np.arange(len(points))[:, None]
        for j in range(3):
            np.add.at(D, (orow, mesh.triangles[None, :, j]), vals[:, :, j])
        out["d"] = D
    return out


# -- energy norms and cached assembly -------------------------------------


def energy_norms(mesh: Mesh, flux_space: TraceSpace | None = None,
                 trace_space: TraceSpace | None = None,
                 config: AssemblyConfig | None = None):
    """Equip a flux and a trace space with their natural energy norms.

    The flux norm is the single layer form at s = 1, the trace norm the
    hypersingular form at s = 1.  Both are definite: the s^2 mass part
    keeps constants out of the hypersingular kernel.
    """
    flux_space = flux_space or build_space(mesh, "p0")
    trace_space = trace_space or build_space(mesh, "p1")
    ops = assemble_operators(mesh, 1.0, config, which="vw")
    Gv = ops["v"][np.ix_(flux_space.dofs, flux_space.dofs)]
    Gw = ops["w"][np.ix_(trace_space.dofs, trace_space.dofs)]
    return EnergyNorm(flux_space, Gv), EnergyNorm(trace_space, Gw)


class OperatorCache:
    """Memoizes operator assembly per Laplace point on one mesh."""

    def __init__(self, mesh: Mesh, config: AssemblyConfig | None = None):
        self.mesh = mesh
        self.config = config or DEFAULT_CONFIG
        self._store = {}

    def ops(self, s, which: str):
        s = complex(s)
        missing = [op for op in set(which) if (s, op) not in self._store]
        if missing:
            got = assemble_operators(self.mesh, s, self.config, which="".join(sorted(missing)))
            for op, mat in got.items():
                self._store[(s, op)] = mat
        return {op: self._store[(s, op)] for op in set(which)}

    def __call__(self, s, which="vkw"):
        return self.ops(s, which)


class SweepGeometry:
    """Pair geometry for assembling the same mesh at many Laplace points.

    A contour sweep evaluates V (and for direct formulations K) at tens
    to hundreds of frequencies.  Distances, fused quadrature weights and
    scatter indices are frequency independent, so they are computed once
    and each assembly reduces to one kernel exponential plus cheap
    contractions.  Everything is held in float32: sweep consumers store
    their stacks in single precision anyway, and the quadrature error of
    the default config sits well above float32 resolution.
    """

    def __init__(self, mesh: Mesh, config: AssemblyConfig | None = None,
                 with_k: bool = False):
        self.mesh = mesh
        self.config = config or DEFAULT_CONFIG
        self.with_k = with_k
        self.n_tri = len(mesh.triangles)
        self.n_vert = len(mesh.vertices)
        self._build_far()
        self._build_corrections()

    def _build_far(self):
        mesh, config = self.mesh, self.config
        bary, wq = triangle_rule(config.far_degree)
        nq = len(wq)
        self._far_nq = nq
        self._far_bary = bary.astype(np.float32)
        pts = np.einsum("qi,tic->tqc", bary, mesh.corners)
        flat = pts.reshape(-1, 3)
        sq = np.sum(flat**2, axis=1)
        wflat = (wq[None, :] * mesh.areas[:, None]).ravel()
        n_tri = self.n_tri
        if self.with_k:
            n_flat = np.repeat(mesh.normals, nq, axis=0)
            yn = np.einsum("pc,pc->p", flat, n_flat)
        chunk = max(1, int(2**22 // max(n_tri * nq * nq, 1)))
        self._far = []
        for lo in range(0, n_tri, chunk):
            hi = min(lo + chunk, n_tri)
            X = flat[lo * nq : hi * nq]
            r2 = sq[lo * nq : hi * nq, None] + sq[None, :] - 2.0 * (X @ flat.T)
            r = np.sqrt(np.maximum(r2, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                q = wflat[lo * nq : hi * nq, None] * wflat[None, :] / (4.0 * np.pi * r)
            for t in range(lo, hi):
                q[(t - lo) * nq : (t - lo + 1) * nq, t * nq : (t + 1) * nq] = 0.0
            rec = {"lo": lo, "hi": hi, "r": r.astype(np.float32),
                   "q": q.astype(np.float32)}
            if self.with_k:
                ndot = yn[None, :] - X @ n_flat.T
                with np.errstate(invalid="ignore", divide="ignore"):
                    rec["n1"] = np.nan_to_num(rec["q"] * ndot / r).astype(np.float32)
                    rec["n2"] = np.nan_to_num(rec["n1"] / r).astype(np.float32)
            self._far.append(rec)

    def _correction_record(self, txs, tys, r, w, diff, vx, vy, bx, by, mirror):
        rec = {"txs": txs, "tys": tys, "r": r.astype(np.float32),
               "a": w.astype(np.float32), "vx": vx, "vy": vy,
               "bx": bx.astype(np.float32), "by": by.astype(np.float32),
               "mirror": mirror}
        if self.with_k and diff is not None:
            mesh = self.mesh
            base = rec["a"] * (-(1.0 / r)).astype(np.float32)
            ndf = _normal_dots(diff, mesh.normals[tys]).astype(np.float32)
            ndr = -_normal_dots(diff, mesh.normals[txs]).astype(np.float32)
            # dk = exp(-s r) * (s * p1 + p2), both pair orders
            rec["p1f"] = (-rec["a"] * ndf / r).astype(np.float32)
            rec["p2f"] = (base * ndf / r).astype(np.float32)
            rec["p1r"] = (-rec["a"] * ndr / r).astype(np.float32)
            rec["p2r"] = (base * ndr / r).astype(np.float32)
        self._corr.append(rec)

    def _build_corrections(self):
        mesh, config = self.mesh, self.config
        tris = mesh.triangles
        areas = mesh.areas
        self._corr = []
        edge, vert = _classify_pairs(mesh)
        touching = {(int(a), int(b)) for a, b in edge[:, :2]} | {
            (int(a), int(b)) for a, b in vert[:, :2]
        }
        near, mid = _band_pairs(mesh, config.near_factor, config.mid_factor, touching)

        def regular(txs, tys, degree, sign):
            b, w = triangle_rule(degree)
            m = len(w)
            bx = np.repeat(b, m, axis=0)
            by = np.tile(b, (m, 1))
            w2 = sign * np.outer(w, w).ravel()
            step = max(1, int(2**21 // (m * m)))
            for lo in range(0, len(txs), step):
                tx, ty = txs[lo : lo + step], tys[lo : lo + step]
                px = _map_points(b, mesh.corners[tx])
                py = _map_points(b, mesh.corners[ty])
                diff = (py[None, :, :, :] - px[:, None, :, :]).reshape(m * m, len(tx), 3)
                r = _radii(diff)
                with np.errstate(divide="ignore"):
                    wgt = w2[:, None] / (4.0 * np.pi * r) * (areas[tx] * areas[ty])[None, :]
                self._correction_record(tx, ty, r, wgt, diff, tris[tx], tris[ty],
                                        bx, by, mirror=True)

        def singular(kind, rows):
            if not len(rows):
                return
            rule = singular_pair_rule(kind, config.singular_order)
            step = max(1, int(2**21 // len(rule.w)))
            for lo in range(0, len(rows), step):
                part = rows[lo : lo + step]
                txs, tys = part[:, 0], part[:, 1]
                cx = np.take_along_axis(mesh.corners[txs], part[:, 2:5, None], axis=1)
                cy = np.take_along_axis(mesh.corners[tys], part[:, 5:8, None], axis=1)
                vx = np.take_along_axis(tris[txs], part[:, 2:5], axis=1)
                vy = np.take_along_axis(tris[tys], part[:, 5:8], axis=1)
                diff = _map_points(rule.by, cy) - _map_points(rule.bx, cx)
                r = _radii(diff)
                with np.errstate(divide="ignore"):
                    wgt = rule.w[:, None] / (4.0 * np.pi * r) * (
                        4.0 * areas[txs] * areas[tys])[None, :]
                # coincident pairs are flat, the trial normal kernel vanishes
                self._correction_record(
                    txs, tys, r, wgt, None if kind == "coincident" else diff,
                    vx, vy, rule.bx, rule.by, mirror=kind != "coincident")

        for pairs, degree in ((near, config.near_degree), (mid, config.mid_degree)):
            if len(pairs):
                regular(pairs[:, 0], pairs[:, 1], config.far_degree, -1.0)
                regular(pairs[:, 0], pairs[:, 1], degree, +1.0)
        for rows in (edge, vert):
            if len(rows):
                regular(rows[:, 0], rows[:, 1], config.far_degree, -1.0)
        singular("edge", edge)
        singular("vertex", vert)
        diag = np.arange(self.n_tri, dtype=np.int64)
        singular("coincident", np.concatenate(
            [diag[:, None], diag[:, None], np.tile([0, 1, 2, 0, 1, 2], (self.n_tri, 1))],
            axis=1))

    def assemble(self, s, which: str = "v"):
        """Matrices at one Laplace point from the cached geometry.

        Returns float32-accurate complex128 matrices; 'k' needs the
        cache built with with_k.
        """
        if not which or not set(which) <= set("vk"):
            raise ValueError(f"unknown operator selection {which!r}")
        if "k" in which and not self.with_k:
            raise ValueError("cache was built without double layer geometry")
        s = complex(s)
        if s.real <= 0:
            raise ValueError("the kernel needs Re s > 0")
        sc = np.complex64(s)
        need_k = "k" in which
        need_v = "v" in which
        V = np.zeros((self.n_tri, self.n_tri), dtype=np.complex64) if need_v else None
        K = np.zeros((self.n_tri, self.n_vert), dtype=np.complex64) if need_k else None
        nq = self._far_nq
        for rec in self._far:
            lo, hi = rec["lo"], rec["hi"]
            ek = _cexp_neg(rec["r"], s)
            km = ek * rec["q"]
            if need_v:
                V[lo:hi] += km.reshape(hi - lo, nq, self.n_tri, nq).sum(axis=(1, 3))
            if need_k:
                dk = ek * (-(sc * rec["n1"] + rec["n2"]))
                dksum = dk.reshape(hi - lo, nq, self.n_tri, nq).sum(axis=1)
                kb = dksum.reshape(-1, nq) @ self._far_bary
                kb = kb.reshape(hi - lo, self.n_tri, 3)
                rows = np.broadcast_to(np.arange(lo, hi)[:, None, None], kb.shape)
                cols = np.broadcast_to(self.mesh.triangles[None, :, :], kb.shape)
                np.add.at(K, (rows.ravel(), cols.ravel()), kb.ravel())
        for rec in self._corr:
            ek = _cexp_neg(rec["r"], s)
            txs, tys = rec["txs"], rec["tys"]
            if need_v:
                vals = (ek * rec["a"]).sum(axis=0)
                np.add.at(V, (txs, tys), vals)
                if rec["mirror"]:
                    np.add.at(V, (tys, txs), vals)
            if need_k and "p1f" in rec:
                dk = ek * (sc * rec["p1f"] + rec["p2f"])
                mom = np.tensordot(dk, rec["by"], axes=([0], [0]))
                rows = np.broadcast_to(txs[:, None], mom.shape)
                np.add.at(K, (rows.ravel(), rec["vy"].ravel()), mom.ravel())
                if rec["mirror"]:
                    dk = ek * (sc * rec["p1r"] + rec["p2r"])
                    mom = np.tensordot(dk, rec["bx"], axes=([0], [0]))
                    rows = np.broadcast_to(tys[:, None], mom.shape)
                    np.add.at(K, (rows.ravel(), rec["vx"].ravel()), mom.ravel())
        out = {}
        if need_v:
            V = V.astype(np.complex128)
            out["v"] = 0.5 * (V + V.T)
        if need_k:
            out["k"] = K.astype(np.complex128)
        return out

    def single_layer(self, s):
        return self.assemble(s, "v")["v"]


# -- growth probes ---------------------------------------------------------


@dataclass(frozen=True)
class FrequencyGrid:
    """Laplace points s = sigma + i omega along one abscissa."""

    sigma: float = 1.0
    omegas: tuple = (1.0, 2.0, 4.0, 8.0, 16.0)

    @property
    def s_values(self):
        return tuple(complex(self.sigma, w) for w in self.omegas)


def _generalized_norm(A, gram_out, gram_in, iters=50, seed=0):
    """Operator norm of A : (R^n, gram_in) -> dual of (R^m, gram_out),
    via power iteration on gram_in^-1 A^H gram_out^-1 A."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(A.shape[1]) + 0j
    co = cho_factor(gram_out)
    ci = cho_factor(gram_in)
    lam = 0.0
    for _ in range(iters):
        y = cho_solve(co, A @ x)
        z = cho_solve(ci, A.conj().T @ y)
        lam = np.sqrt(max(np.real(np.vdot(x, A.conj().T @ y)), 0.0))
        nrm = np.sqrt(np.real(np.vdot(z, gram_in @ z)))
        if nrm == 0.0:
            return 0.0
        x = z / nrm
    xn = np.real(np.vdot(x, gram_in @ x))
    return float(np.sqrt(max(np.real(np.vdot(x, A.conj().T @ cho_solve(co, A @ x))), 0.0) / xn))


def bound_probe(mesh: Mesh, grid: FrequencyGrid | None = None,
                config: AssemblyConfig | None = None, cache: OperatorCache | None = None):
    """Measure discrete operator norms along a frequency ladder and fit
    their growth exponents in |s|.

    Norms are taken between the energy spaces (single layer form at 1
    for fluxes, hypersingular form at 1 for traces).  The returned
    exponents are least squares slopes of log norm against log |s|,
    nan when the grid has a single point.
    """
    grid = grid or FrequencyGrid()
    cache = cache or OperatorCache(mesh, config)
    en_v, en_w = energy_norms(mesh, config=config)
    Gv, Gw = en_v.gram, en_w.gram
    norms = {"v": [], "k": [], "w": []}
    for s in grid.s_values:
        ops = cache.ops(s, "vkw")
        norms["v"].append(_generalized_norm(ops["v"], Gv, Gv))
        norms["k"].append(_generalized_norm(ops["k"], Gv, Gw))
        norms["w"].append(_generalized_norm(ops["w"], Gw, Gw))
    mods = np.array([abs(s) for s in grid.s_values])
    out = {"s_values": list(grid.s_values), "norms": {k: list(map(float, v)) for k, v in norms.items()}}
    for key, vals in norms.items():
        if len(vals) < 2:
            out[f"slope_{key}"] = float("nan")
            continue
        slope = np.polyfit(np.log(mods), np.log(vals), 1)[0]
        out[f"slope_{key}"] = float(slope)
    return out
