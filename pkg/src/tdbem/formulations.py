"""Boundary integral formulations of transient acoustic scattering.

A single transmission problem generates every solver here.  Pick a flux
test space X (piecewise constants), a trace test space Y (continuous
piecewise linears) and four causal data signals, then look for jump
densities lam in X, phi in Y so that the wave field

    u = S * (beta2 + lam) - D * (alpha2 + phi)

matches alpha1 with its exterior trace when tested against X and
matches beta1 with its interior flux when tested against Y:

    <mu,  V*m - (1/2 + K)*p - alpha1>  = 0   for all mu in X,
    <(1/2 + K^t)*m + W*p - beta1, psi> = 0   for all psi in Y,

where m = beta2 + lam and p = alpha2 + phi are the total densities.
The named formulations fill the four slots from one or two physical
boundary signals; `custom` exposes the slots directly.  A slot whose
test space is empty is void: it is never read.  Time discretization is
convolution quadrature on a shared contour, so one operator sweep
yields the marching weights, the data convolutions on the right-hand
side and, later, the field reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .cq import (EPS_DOUBLE, EPS_SINGLE, contour_nodes, damped_spectrum,
                 h2_seminorm, march, method_by_name, undamped_signal,
                 weights_from_samples)
from .laplace_ops import (DEFAULT_CONFIG, SweepGeometry, assemble_operators,
                          energy_norms, potential_matrices)
from .mesh import Mesh
from .spaces import P0, P1, TraceSpace, build_space, duality_matrix

LABELS = (
    "indirect_dirichlet",
    "direct_dirichlet",
    "indirect_neumann",
    "direct_neumann",
    "symmetric_dirichlet",
    "symmetric_neumann",
    "mixed",
    "screen_dirichlet",
    "screen_neumann",
    "custom",
)


class _Void:
    """Marker for a data slot that the formulation never reads."""

    _only = None

    def __new__(cls):
        if cls._only is None:
            cls._only = super().__new__(cls)
        return cls._only

    def __repr__(self):
        return "void"


VOID = _Void()


def _as_signal(data, width, name):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"{name} must have shape (n_steps, {width}), "
                         f"got {arr.shape}")
    return arr


@dataclass(frozen=True)
class TransmissionSpec:
    """One transmission problem, ready for the marching solver.

    alpha1/alpha2 are vertex coefficient signals of shape (n_steps,
    n_vertices); beta1/beta2 are triangle coefficient signals of shape
    (n_steps, n_triangles).  alpha1 may be VOID exactly when the flux
    space is empty and beta1 exactly when the trace space is empty; any
    array stored in a void slot is tolerated and ignored.  Signals
    read by the solver must vanish at t = 0.
    """

    label: str
    flux_space: TraceSpace
    trace_space: TraceSpace
    alpha1: object
    alpha2: np.ndarray
    beta1: object
    beta2: np.ndarray
    dt: float

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.flux_space.kind != P0 or self.trace_space.kind != P1:
            raise ValueError("flux space must be p0 and trace space p1")
        if self.flux_space.mesh is not self.trace_space.mesh:
            raise ValueError("test spaces live on different meshes")
        if self.flux_space.n_dofs == 0 and self.trace_space.n_dofs == 0:
            raise ValueError("both test spaces are empty")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        mesh = self.flux_space.mesh
        nv, nt = len(mesh.vertices), len(mesh.triangles)
        read = [("alpha2", _as_signal(self.alpha2, nv, "alpha2")),
                ("beta2", _as_signal(self.beta2, nt, "beta2"))]
        object.__setattr__(self, "alpha2", read[0][1])
        object.__setattr__(self, "beta2", read[1][1])
        if self.flux_space.n_dofs:
            if self.alpha1 is VOID:
                raise ValueError("alpha1 is required when the flux space "
                                 "is nonempty")
            object.__setattr__(self, "alpha1",
                               _as_signal(self.alpha1, nv, "alpha1"))
            read.append(("alpha1", self.alpha1))
        if self.trace_space.n_dofs:
            if self.beta1 is VOID:
                raise ValueError("beta1 is required when the trace space "
                                 "is nonempty")
            object.__setattr__(self, "beta1",
                               _as_signal(self.beta1, nt, "beta1"))
            read.append(("beta1", self.beta1))
        n = read[0][1].shape[0]
        for name, sig in read:
            if sig.shape[0] != n:
                raise ValueError("signals disagree on the number of steps")
            scale = np.abs(sig).max() if sig.size else 0.0
            if sig.size and np.abs(sig[0]).max() > 1e-10 * (1.0 + scale):
                raise ValueError(f"{name} must vanish at t = 0")

    @property
    def mesh(self) -> Mesh:
        return self.flux_space.mesh

    @property
    def n_steps(self) -> int:
        return self.alpha2.shape[0]

    @property
    def times(self):
        return np.arange(self.n_steps) * self.dt


def _sampled(data, points, dt, n_steps, name):
    """Signal as an array, sampling a callable f(points, t) if needed."""
    if data is None:
        raise ValueError(f"{name} data is required for this label")
    if callable(data):
        if n_steps is None:
            raise ValueError("n_steps is required with callable data")
        rows = [np.asarray(data(points, k * dt), dtype=np.float64)
                for k in range(n_steps)]
        return np.stack(rows)
    arr = _as_signal(data, len(points), name)
    if n_steps is not None and arr.shape[0] != n_steps:
        raise ValueError(f"{name} has {arr.shape[0]} steps, expected {n_steps}")
    return arr


def make_formulation(label: str, mesh: Mesh, *, dt: float, n_steps=None,
                     dirichlet=None, neumann=None, dirichlet_tags=None,
                     flux_space=None, trace_space=None, alpha1=None,
                     alpha2=None, beta1=None, beta2=None) -> TransmissionSpec:
    """Fill the transmission slots of a named formulation.

    Dirichlet data is a vertex coefficient signal (n_steps, n_vertices)
    or a callable g(points, t); Neumann data lives on triangles,
    (n_steps, n_triangles) or a callable evaluated at centroids.  The
    slot dictionary, with g the Dirichlet and q the Neumann signal:

        indirect_dirichlet   X=P0, Y=0    (g, 0, -, 0)     u = S*lam
        direct_dirichlet     X=P0, Y=0    (g, -g, -, 0)    u = S*lam + D*g
        indirect_neumann     X=0, Y=P1    (-, 0, q, 0)     u = -D*phi
        direct_neumann       X=0, Y=P1    (-, 0, 0, -q)    u = -S*q - D*phi
        symmetric_dirichlet  X=P0, Y=P1   (g, 0, 0, 0)
        symmetric_neumann    X=P0, Y=P1   (0, 0, q, 0)
        mixed                X=P0|D, Y=P1|N  (g, -g, 0, -q)
        screen_dirichlet     like indirect_dirichlet, open surface
        screen_neumann       like indirect_neumann, rim vertices dropped

    For the direct formulations lam and phi are the jumps across the
    surface, so the physical exterior traces are -lam and -phi.  mixed
    needs `dirichlet_tags`, the set of mesh tags forming the Dirichlet
    part; both signals are read as extensions to the whole surface.
    `custom` takes explicit spaces plus the four slots verbatim.
    """
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}")
    screen = label.startswith("screen_")
    if label == "custom":
        if flux_space is None or trace_space is None:
            raise ValueError("custom needs flux_space and trace_space")
        given = [a for a in (alpha1, alpha2, beta1, beta2)
                 if a is not None and a is not VOID]
        if n_steps is None:
            if not given:
                raise ValueError("custom needs n_steps or at least one signal")
            n_steps = np.asarray(given[0]).shape[0]
        nv, nt = len(mesh.vertices), len(mesh.triangles)
        zv = np.zeros((n_steps, nv))
        zt = np.zeros((n_steps, nt))
        return TransmissionSpec(
            label, flux_space, trace_space,
            zv if alpha1 is None else alpha1,
            zv if alpha2 is None else alpha2,
            zt if beta1 is None else beta1,
            zt if beta2 is None else beta2, dt)
    if screen and mesh.closed:
        raise ValueError(f"{label} needs an open surface")
    if not screen and not mesh.closed:
        raise ValueError(f"{label} needs a closed surface")

    p0_full = build_space(mesh, P0)
    zero_p0 = build_space(mesh, P0, tags=())
    zero_p1 = build_space(mesh, P1, tags=())
    nv, nt = len(mesh.vertices), len(mesh.triangles)

    if label in ("indirect_dirichlet", "direct_dirichlet", "screen_dirichlet",
                 "symmetric_dirichlet"):
        g = _sampled(dirichlet, mesh.vertices, dt, n_steps, "dirichlet")
        n = g.shape[0]
        zv, zt = np.zeros((n, nv)), np.zeros((n, nt))
        if label == "symmetric_dirichlet":
            return TransmissionSpec(label, p0_full, build_space(mesh, P1),
                                    g, zv, zt, zt, dt)
        a2 = -g if label == "direct_dirichlet" else zv
        return TransmissionSpec(label, p0_full, zero_p1, g, a2, VOID, zt, dt)

    if label in ("indirect_neumann", "direct_neumann", "screen_neumann",
                 "symmetric_neumann"):
        q = _sampled(neumann, mesh.centroids, dt, n_steps, "neumann")
        n = q.shape[0]
        zv, zt = np.zeros((n, nv)), np.zeros((n, nt))
        p1 = build_space(mesh, P1)
        if label == "symmetric_neumann":
            return TransmissionSpec(label, p0_full, p1, zv, zv, q, zt, dt)
        if label == "direct_neumann":
            return TransmissionSpec(label, zero_p0, p1, VOID, zv, zt, -q, dt)
        return TransmissionSpec(label, zero_p0, p1, VOID, zv, q, zt, dt)

    # mixed
    if dirichlet_tags is None:
        raise ValueError("mixed needs dirichlet_tags")
    all_tags = set(np.unique(mesh.tags).tolist())
    d_tags = set(dirichlet_tags)
    if not d_tags <= all_tags:
        raise ValueError("dirichlet_tags not present on the mesh")
    g = _sampled(dirichlet, mesh.vertices, dt, n_steps, "dirichlet")
    q = _sampled(neumann, mesh.centroids, dt, g.shape[0], "neumann")
    xh = build_space(mesh, P0, tags=sorted(d_tags))
    yh = build_space(mesh, P1, tags=sorted(all_tags - d_tags))
    return TransmissionSpec(label, xh, yh, g, -g,
                            np.zeros((g.shape[0], nt)), -q, dt)


class CausalBump:
    """Smooth pulse sin(pi (t - delay) / duration) ** 4 on its support.

    Vanishes to third order at both ends, which keeps the start of a
    marching scheme compatible and the quadrature error of second order
    methods clean.
    """

    def __init__(self, duration: float = 1.0, delay: float = 0.0):
        if not duration > 0:
            raise ValueError("duration must be positive")
        self.duration = duration
        self.delay = delay

    def _phase(self, t):
        t = np.asarray(t, dtype=np.float64)
        tau = (t - self.delay) / self.duration
        inside = (tau > 0.0) & (tau < 1.0)
        return tau, inside

    def __call__(self, t):
        tau, inside = self._phase(t)
        return np.where(inside, np.sin(np.pi * tau) ** 4, 0.0)

    def derivative(self, t):
        tau, inside = self._phase(t)
        rate = 4.0 * np.pi / self.duration
        vals = rate * np.sin(np.pi * tau) ** 3 * np.cos(np.pi * tau)
        return np.where(inside, vals, 0.0)


@dataclass(frozen=True)
class PointSourceField:
    """Spherical wave u(x, t) = psi(t - |x - c|) / (4 pi |x - c|).

    An exact causal solution of the wave equation away from the center
    c, handy for manufactured boundary data: `signal` must be callable
    with a `derivative` callable attached (CausalBump qualifies).
    """

    center: tuple
    signal: object

    def _radii(self, points):
        diff = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        return diff, np.linalg.norm(diff, axis=-1)

    def value(self, points, t):
        """Field at points; t scalar -> (m,), t array (N,) -> (N, m)."""
        _, r = self._radii(points)
        t = np.asarray(t, dtype=np.float64)
        tau = t[..., None] - r if t.ndim else t - r
        return self.signal(tau) / (4.0 * np.pi * r)

    def normal_flux(self, points, normals, t):
        """Directional derivative along `normals`, same shapes as value."""
        diff, r = self._radii(points)
        along = np.einsum("pc,pc->p", diff, np.asarray(normals)) / r
        t = np.asarray(t, dtype=np.float64)
        tau = t[..., None] - r if t.ndim else t - r
        radial = (self.signal.derivative(tau) / r + self.signal(tau) / r**2)
        return -radial * along / (4.0 * np.pi)

    def dirichlet_coeffs(self, mesh, times):
        return self.value(mesh.vertices, np.asarray(times))

    def flux_coeffs(self, mesh, times):
        return self.normal_flux(mesh.centroids, mesh.normals,
                                np.asarray(times))

    def trace(self, points, t):
        """Alias of value, shaped for make_formulation callables."""
        return self.value(points, t)


@dataclass
class SolveResult:
    """Densities of one marching solve plus whatever was observed.

    lambda_h/phi_h hold the X and Y coefficients per step; flux_jump
    and trace_jump add back the data slots to give the total densities
    that the field representation uses.  weights/nodes are only kept
    when requested, so a later solve of the same system can skip the
    operator sweep via solve_formulation(..., reuse=result).
    """

    spec: TransmissionSpec
    method: str
    t: np.ndarray
    lambda_h: np.ndarray
    phi_h: np.ndarray
    fields: np.ndarray | None = None
    points: np.ndarray | None = None
    residuals: np.ndarray | None = None
    nodes: object = dc_field(default=None, repr=False)
    weights: np.ndarray | None = dc_field(default=None, repr=False)

    @property
    def flux_jump(self):
        return self.spec.beta2 + self.spec.flux_space.extend(self.lambda_h)

    @property
    def trace_jump(self):
        return self.spec.alpha2 + self.spec.trace_space.extend(self.phi_h)

    @property
    def step_norms(self):
        """Euclidean coefficient norms per step, a cheap diagnostic."""
        return {"flux": np.linalg.norm(self.lambda_h, axis=1),
                "trace": np.linalg.norm(self.phi_h, axis=1)}


def _full_duality(mesh):
    """Duality pairing over every triangle and vertex.

    build_space would drop rim vertices on an open mesh, but the data
    slots carry coefficients for all of them.
    """
    all_p0 = TraceSpace(mesh, P0, np.arange(len(mesh.triangles),
                                            dtype=np.int64))
    all_p1 = TraceSpace(mesh, P1, np.arange(len(mesh.vertices),
                                            dtype=np.int64))
    return duality_matrix(all_p0, all_p1)


def _needed_ops(spec, conv_a2, conv_b2):
    dx, dy = spec.flux_space.n_dofs, spec.trace_space.n_dofs
    need = set()
    if dx:
        need.add("v")
        if conv_a2:
            need.add("k")
        if conv_b2:
            need.add("v")
    if dy:
        need.add("w")
        if conv_a2:
            need.add("w")
        if conv_b2:
            need.add("k")
    if dx and dy:
        need.add("k")
    return need


def _match_for_reuse(spec, result, method):
    prev = result.spec
    return (result.weights is not None
            and prev.mesh is spec.mesh
            and result.method == method.name
            and prev.dt == spec.dt
            and prev.n_steps == spec.n_steps
            and np.array_equal(prev.flux_space.dofs, spec.flux_space.dofs)
            and np.array_equal(prev.trace_space.dofs, spec.trace_space.dofs))


def solve_formulation(spec: TransmissionSpec, method: str = "bdf2", *,
                      config=None, dtype=None, eps=None, geometry=None,
                      observe=None, check_residuals: bool = False,
                      keep_weights: bool = False,
                      reuse: SolveResult | None = None) -> SolveResult:
    """March the convolution quadrature system of one formulation.

    The Laplace sweep assembles the block transfer on the contour and,
    in the same pass, the operator products against the data slots, so
    no operator stack beyond the system itself is ever stored.  Systems
    touching only V and K run through a cached SweepGeometry (pass
    `geometry` to share one across solves).  dtype=np.float32 keeps the
    sample stack and weights in single precision, which is the memory
    format for fine meshes; the contour radius then widens to match
    (see EPS_SINGLE).  `reuse` skips the sweep entirely by borrowing
    the weights of a previous result for the same system; that needs
    data slots free of operator convolutions, so solve the data-rich
    problem first and reuse from it.
    """
    method = method_by_name(method)
    config = config or DEFAULT_CONFIG
    dtype = np.dtype(np.float64 if dtype is None else dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("dtype must be float32 or float64")
    single = dtype == np.dtype(np.float32)
    if eps is None:
        eps = EPS_SINGLE if single else EPS_DOUBLE
    mesh = spec.mesh
    dx, dy = spec.flux_space.n_dofs, spec.trace_space.n_dofs
    d = dx + dy
    n, dt = spec.n_steps, spec.dt
    ix, iy = spec.flux_space.dofs, spec.trace_space.dofs
    conv_a2 = bool(spec.alpha2.any())
    conv_b2 = bool(spec.beta2.any())
    need = _needed_ops(spec, conv_a2, conv_b2)
    m01 = _full_duality(mesh)

    nodes = contour_nodes(method, dt, n, eps)
    r1h = r2h = None
    if reuse is not None:
        if not _match_for_reuse(spec, reuse, method):
            raise ValueError("previous result does not match this system")
        if conv_a2 or conv_b2:
            raise ValueError("reuse cannot supply data convolutions; solve "
                             "the problem with data slots first")
        nodes, weights = reuse.nodes, reuse.weights
    else:
        own_sweep = geometry is None and need <= {"v", "k"}
        if own_sweep:
            geometry = SweepGeometry(mesh, config, with_k="k" in need)
        if geometry is not None and not need <= {"v", "k"}:
            raise ValueError("sweep geometry covers only v and k; this "
                             "system needs " + "".join(sorted(need)))
        ghat_a2 = damped_spectrum(spec.alpha2, nodes) if conv_a2 else None
        ghat_b2 = damped_spectrum(spec.beta2, nodes) if conv_b2 else None
        if dx and (conv_a2 or conv_b2):
            r1h = np.zeros((nodes.half, dx), dtype=np.complex128)
        if dy and (conv_a2 or conv_b2):
            r2h = np.zeros((nodes.half, dy), dtype=np.complex128)
        stack = np.empty((nodes.half, d, d),
                         dtype=np.complex64 if single else np.complex128)
        which = "".join(sorted(need))
        for ell, s in enumerate(nodes.s):
            ops = (geometry.assemble(s, which) if geometry is not None
                   else assemble_operators(mesh, s, config, which=which))
            if dx:
                stack[ell, :dx, :dx] = ops["v"][np.ix_(ix, ix)]
            if dy:
                stack[ell, dx:, dx:] = ops["w"][np.ix_(iy, iy)]
            if dx and dy:
                b = 0.5 * m01[np.ix_(ix, iy)] + ops["k"][np.ix_(ix, iy)]
                stack[ell, :dx, dx:] = -b
                stack[ell, dx:, :dx] = b.T
            if r1h is not None:
                if conv_a2:
                    r1h[ell] += ops["k"][ix] @ ghat_a2[ell]
                if conv_b2:
                    r1h[ell] -= ops["v"][ix] @ ghat_b2[ell]
            if r2h is not None:
                if conv_b2:
                    r2h[ell] -= ops["k"][:, iy].T @ ghat_b2[ell]
                if conv_a2:
                    r2h[ell] -= ops["w"][iy] @ ghat_a2[ell]
        if own_sweep:
            geometry = None  # the pair cache can dwarf the weights; drop it
        weights = weights_from_samples(stack, nodes, dtype=dtype)
        del stack

    rhs = np.zeros((n, d))
    if dx:
        rhs[:, :dx] = (spec.alpha1 + 0.5 * spec.alpha2) @ m01[ix].T
        if r1h is not None:
            rhs[:, :dx] += undamped_signal(r1h, nodes, n)
    if dy:
        rhs[:, dx:] = (spec.beta1 - 0.5 * spec.beta2) @ m01[:, iy]
        if r2h is not None:
            rhs[:, dx:] += undamped_signal(r2h, nodes, n)

    x = march(weights, rhs)
    result = SolveResult(spec, method.name, spec.times,
                         x[:, :dx], x[:, dx:])
    if keep_weights:
        result.nodes, result.weights = nodes, weights

    if check_residuals:
        res = np.empty(n)
        scale = max(np.linalg.norm(rhs, axis=1).max(), 1e-300)
        for k in range(n):
            acc = np.einsum("mij,mj->i", weights[:k + 1].astype(np.float64),
                            x[k::-1])
            res[k] = np.linalg.norm(acc - rhs[k]) / scale
        result.residuals = res

    if observe is not None:
        result.points = np.atleast_2d(np.asarray(observe, dtype=np.float64))
        result.fields = reconstruct_field(spec, result, result.points,
                                          method.name, config=config)
    return result


def reconstruct_field(spec: TransmissionSpec, densities, points,
                      method: str = "bdf2", *, config=None,
                      eps: float = EPS_DOUBLE, n_out=None) -> np.ndarray:
    """Field samples u(points, t_n) radiated by solved densities.

    densities: a SolveResult or a (lambda_h, phi_h) pair.  Layer
    potentials are sampled on the same contour family as the solve, so
    causality and accuracy follow the marching scheme.  Points must
    stay away from the surface; the quadrature has no near-field
    correction.
    """
    method = method_by_name(method)
    config = config or DEFAULT_CONFIG
    mesh = spec.mesh
    if isinstance(densities, SolveResult):
        lam, phi = densities.lambda_h, densities.phi_h
    else:
        lam, phi = densities
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must have shape (m, 3)")
    gap = np.linalg.norm(pts[:, None, :] - mesh.vertices[None], axis=2).min()
    if gap < 0.5 * mesh.h_max():
        raise ValueError("observation point closer to the surface than half "
                         "a mesh width; the quadrature cannot resolve it")
    total_m = spec.beta2 + spec.flux_space.extend(np.asarray(lam, np.float64))
    total_p = spec.alpha2 + spec.trace_space.extend(np.asarray(phi, np.float64))
    n = spec.n_steps if n_out is None else int(n_out)
    size = max(n, spec.n_steps)
    nodes = contour_nodes(method, spec.dt, size, eps)
    which = ""
    if total_m.any():
        which += "s"
    if total_p.any():
        which += "d"
    if not which:
        return np.zeros((n, len(pts)))
    mhat = damped_spectrum(total_m, nodes) if "s" in which else None
    phat = damped_spectrum(total_p, nodes) if "d" in which else None
    out = np.zeros((nodes.half, len(pts)), dtype=np.complex128)
    for ell, s in enumerate(nodes.s):
        pot = potential_matrices(mesh, pts, s, config, which=which)
        if "s" in which:
            out[ell] += pot["s"] @ mhat[ell]
        if "d" in which:
            out[ell] -= pot["d"] @ phat[ell]
    return undamped_signal(out, nodes, n)


def _exact_unknowns(label, source, mesh, times):
    """Closed-form jump densities for manufactured data.

    Only the direct and symmetric formulations have physical unknowns.
    The exterior problems (source inside the surface) see jumps equal
    to minus the exterior traces of the source field; symmetric_neumann
    is the interior problem, so its source sits outside and the jumps
    carry the interior traces with a plus sign.
    """
    if label == "symmetric_neumann":
        sign = 1.0
    elif label in ("direct_dirichlet", "symmetric_dirichlet",
                   "direct_neumann"):
        sign = -1.0
    else:
        return None, None
    return (sign * source.flux_coeffs(mesh, times),
            sign * source.dirichlet_coeffs(mesh, times))


def _prolongation(coarse: Mesh, fine: Mesh):
    """P0 embedding for a mesh refined four-into-one, children of
    triangle i stored at 4i..4i+3 (the icosphere builder's layout)."""
    ntc, ntf = len(coarse.triangles), len(fine.triangles)
    if ntf != 4 * ntc:
        raise ValueError("fine mesh is not a four-into-one refinement")
    rows = np.arange(ntf)
    emb = np.zeros((ntf, ntc))
    emb[rows, rows // 4] = 1.0
    return emb


def error_study(label: str, ladder, *, source: PointSourceField,
                method: str = "bdf2", config=None, observe=None) -> dict:
    """Manufactured convergence study along a refinement ladder.

    ladder: sequence of dicts with keys mesh, dt, n_steps and optional
    fine_mesh, geometry, dtype.  Each level solves `label` with data
    from `source`, then reports the worst-step density error in the
    flux energy norm against the exact jump (direct and symmetric
    labels only) and, when fine_mesh is given, the quadrature majorant:
    the second order seminorm of the best-approximation deficit of the
    exact density, measured on the refined mesh.  Field errors at
    `observe` are relative space-time L2.
    """
    config = config or DEFAULT_CONFIG
    levels = []
    for entry in ladder:
        mesh, dt, n = entry["mesh"], entry["dt"], entry["n_steps"]
        times = np.arange(n) * dt
        kwargs = {"dt": dt, "n_steps": n}
        if "dirichlet" in label or label == "mixed":
            kwargs["dirichlet"] = source.dirichlet_coeffs(mesh, times)
        if "neumann" in label or label == "mixed":
            kwargs["neumann"] = source.flux_coeffs(mesh, times)
        spec = make_formulation(label, mesh, **kwargs)
        result = solve_formulation(spec, method, config=config,
                                   geometry=entry.get("geometry"),
                                   dtype=entry.get("dtype"))
        row = {"h_max": mesh.h_max(), "dt": dt, "n_steps": n}
        lam_exact, phi_exact = _exact_unknowns(label, source, mesh, times)
        need_v = lam_exact is not None and spec.flux_space.n_dofs > 0
        need_w = phi_exact is not None and spec.trace_space.n_dofs > 0
        if need_v or need_w:
            which = ("v" if need_v else "") + ("w" if need_w else "")
            ops = assemble_operators(mesh, 1.0, config, which=which)
            sq = np.zeros(n)
            if need_v:
                diff = spec.flux_space.extend(result.lambda_h) - lam_exact
                sq += np.einsum("ni,ij,nj->n", diff, ops["v"], diff)
            if need_w:
                diff = spec.trace_space.extend(result.phi_h) - phi_exact
                sq += np.einsum("ni,ij,nj->n", diff, ops["w"], diff)
            row["density_error"] = float(np.sqrt(sq).max())
            fine = entry.get("fine_mesh")
            if fine is not None and need_v:
                row["majorant"] = _deficit_majorant(
                    mesh, fine, source, times, dt, config)
                row["ratio"] = row["density_error"] / row["majorant"]
        if observe is not None:
            obs = np.atleast_2d(np.asarray(observe, dtype=np.float64))
            got = reconstruct_field(spec, result, obs, method, config=config)
            want = source.value(obs, times)
            num = np.sqrt(np.sum((got - want) ** 2) * dt)
            den = np.sqrt(np.sum(want**2) * dt)
            row["field_error"] = float(num / den)
        levels.append(row)
    report = {"label": label, "levels": levels}
    errs = [row["density_error"] for row in levels if "density_error" in row]
    if len(errs) > 1:
        report["monotone"] = all(a > b for a, b in zip(errs, errs[1:]))
    ratios = [row["ratio"] for row in levels if "ratio" in row]
    if ratios:
        report["ratio_spread"] = max(ratios) / min(ratios)
    return report


def _deficit_majorant(mesh, fine, source, times, dt, config):
    """H2-in-time seminorm of the best-approximation deficit of the
    exact flux density, measured in the fine single layer energy."""
    emb = _prolongation(mesh, fine)
    gram = assemble_operators(fine, 1.0, config, which="v")["v"]
    target = -source.flux_coeffs(fine, times)
    gp = gram @ emb
    coeffs = np.linalg.solve(emb.T @ gp, (target @ gp).T).T
    deficit = target - coeffs @ emb.T
    norm = lambda arr: np.sqrt(np.einsum("ni,ij,nj->n", arr, gram, arr))
    return float(h2_seminorm(deficit, dt, norm=norm))


def stability_probe(label: str, mesh: Mesh, *, dt: float, duration: float,
                    horizon: float = 20.0, method: str = "bdf2",
                    dirichlet=None, neumann=None, dirichlet_tags=None,
                    config=None, geometry=None) -> dict:
    """Long-horizon marching diagnostic for one formulation.

    Runs `label` with the given data (supported on [0, duration]) until
    horizon * duration and tracks the density norms per step in the
    energy norms of the test spaces.  Reports the envelope constant
    max_n ||x_n|| / (1 + t_n), the tail maximum after the data has
    passed, and a growth exponent fitted to windowed maxima of the
    tail; `exponential` flags net growth beyond one decade across the
    tail, which a stable scheme never produces.
    """
    config = config or DEFAULT_CONFIG
    n = int(round(horizon * duration / dt))
    spec = make_formulation(label, mesh, dt=dt, n_steps=n,
                            dirichlet=dirichlet, neumann=neumann,
                            dirichlet_tags=dirichlet_tags)
    result = solve_formulation(spec, method, config=config, geometry=geometry)
    gram_v, gram_w = energy_norms(mesh, spec.flux_space, spec.trace_space,
                                  config=config)
    sq = np.zeros(n)
    if spec.flux_space.n_dofs:
        lam = result.lambda_h
        sq += np.einsum("ni,ij,nj->n", lam, gram_v.gram, lam)
    if spec.trace_space.n_dofs:
        phi = result.phi_h
        sq += np.einsum("ni,ij,nj->n", phi, gram_w.gram, phi)
    norms = np.sqrt(sq)
    t = result.t
    envelope = float((norms / (1.0 + t)).max())
    tail = t >= duration
    tail_max = float(norms[tail].max()) if tail.any() else 0.0
    windows = np.array_split(np.flatnonzero(tail), 8)
    centers, maxima = [], []
    for idx in windows:
        if len(idx) == 0:
            continue
        peak = norms[idx].max()
        if peak > 0.0:
            centers.append(t[idx].mean())
            maxima.append(peak)
    rate = 0.0
    exponential = False
    if len(maxima) > 2:
        rate = float(np.polyfit(centers, np.log(maxima), 1)[0])
        span = centers[-1] - centers[0]
        exponential = rate * span > np.log(10.0)
    return {"t": t, "norms": norms, "envelope_constant": envelope,
            "tail_max": tail_max, "growth_rate": rate,
            "exponential": exponential, "duration": duration,
            "horizon": horizon, "label": label}
