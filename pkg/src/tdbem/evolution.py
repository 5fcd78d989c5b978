"""Finite-dimensional first-order evolution systems with boundary data.

The objects here mirror the operator quintet behind transient boundary
value problems: a state space H with its energy inner product, a
stronger graph space V on the same coordinates, a differential operator
A* defined on all of V, a surjective constraint operator B whose kernel
is the domain of the skew generator, and an optional natural-data map
G.  The evolution

    U'(t) = A* U(t) + G xi(t) + F(t),   B U(t) = chi(t),   U(0) = 0

is solved exactly along the constructive route: lift the boundary data
to U_NH with the stationary problem, integrate the remainder inside
Ker B where the generator is skew, and add.  Because every constant in
the a priori estimates (the norm equivalence pair C1*/C2*, the lifting
norm C_lift, and ||G||) is computable here, the estimates themselves
become executable checks: verify_bounds evaluates both sides on a
trajectory and reports the margins.

In finite dimensions the stationary equations are imposed weakly
against Ker B.  Together with the constraint rows this makes the
lifting system square, and it is exactly how the weak formulation
reads before the complement collapses in the continuous limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from functools import cached_property

import numpy as np
import scipy.linalg
from scipy.integrate import cumulative_trapezoid

_FLAG_TOL = 1e-10


def _check_spd(mat, name):
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square")
    if mat.size and not np.allclose(mat, mat.T, atol=1e-12 * np.abs(mat).max()):
        raise ValueError(f"{name} must be symmetric")
    if mat.size:
        try:
            np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            raise ValueError(f"{name} must be positive definite") from None
    return mat


@dataclass(frozen=True)
class AbstractSystem:
    """Quintet (H, V, A*, B, G) on a common coordinate space.

    mh and mv are the SPD Gram matrices of the H and V inner products,
    a_star the differential operator, b the (n_constraints, dim)
    constraint map, g the (dim, n_natural) natural-data map and mxi the
    SPD Gram of the data space M = M1 x M2.  Structural hypotheses
    (skewness on Ker B, surjectivity, solvable lifting) are not
    enforced here; check_hypotheses verifies them and reports the
    constants.
    """

    mh: np.ndarray
    mv: np.ndarray
    a_star: np.ndarray
    b: np.ndarray
    g: np.ndarray
    mxi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mh", _check_spd(self.mh, "mh"))
        object.__setattr__(self, "mv", _check_spd(self.mv, "mv"))
        a = np.asarray(self.a_star, dtype=np.float64)
        dim = self.mh.shape[0]
        if a.shape != (dim, dim):
            raise ValueError("a_star must match the state dimension")
        object.__setattr__(self, "a_star", a)
        if self.mv.shape != (dim, dim):
            raise ValueError("mv must match the state dimension")
        b = np.atleast_2d(np.asarray(self.b, dtype=np.float64))
        if b.shape[1] != dim:
            raise ValueError("b must have one column per state component")
        object.__setattr__(self, "b", b)
        g = np.asarray(self.g, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != dim:
            raise ValueError("g must have one row per state component")
        object.__setattr__(self, "g", g)
        m = g.shape[1] + b.shape[0]
        object.__setattr__(self, "mxi", _check_spd(self.mxi, "mxi"))
        if self.mxi.shape != (m, m):
            raise ValueError("mxi must cover the stacked data space")

    @property
    def dim(self) -> int:
        return self.mh.shape[0]

    @property
    def n_natural(self) -> int:
        return self.g.shape[1]

    @property
    def n_constraints(self) -> int:
        return self.b.shape[0]

    @cached_property
    def kernel_basis(self) -> np.ndarray:
        """H-orthonormal basis of Ker B, shape (dim, dim - rank B)."""
        if self.n_constraints == 0:
            z = np.eye(self.dim)
        else:
            u, sv, vt = np.linalg.svd(self.b)
            rank = int((sv > 1e-12 * max(sv[0], 1.0)).sum()) if sv.size else 0
            z = vt[rank:].T
        gram = z.T @ self.mh @ z
        return z @ np.linalg.inv(np.linalg.cholesky(gram).T)

    def norm_h(self, u):
        u = np.asarray(u)
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", u, self.mh,
                                            u), 0.0))

    def norm_v(self, u):
        u = np.asarray(u)
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", u, self.mv,
                                            u), 0.0))

    def norm_m(self, xi):
        xi = np.asarray(xi)
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", xi, self.mxi,
                                            xi), 0.0))


def _lifting_pieces(system):
    """Square lifting matrix [Z' Mh (I - A*); B] and its data map."""
    z = system.kernel_basis
    rows = z.T @ system.mh @ (np.eye(system.dim) - system.a_star)
    s = np.vstack([rows, system.b])
    data = np.zeros((system.dim, system.n_natural + system.n_constraints))
    data[:z.shape[1], :system.n_natural] = z.T @ system.mh @ system.g
    data[z.shape[1]:, system.n_natural:] = np.eye(system.n_constraints)
    return s, data


def lift(system: AbstractSystem, xi_chi) -> np.ndarray:
    """Solve the stationary problem U = A* U + G xi, B U = chi.

    xi_chi stacks (xi, chi).  The first equation is imposed weakly
    against Ker B, the constraint exactly; both residuals are verified
    to 1e-10 relative before returning.
    """
    xi_chi = np.asarray(xi_chi, dtype=np.float64)
    if xi_chi.shape != (system.n_natural + system.n_constraints,):
        raise ValueError("data must stack (xi, chi)")
    s, data = _lifting_pieces(system)
    if s.shape[0] != s.shape[1]:
        raise np.linalg.LinAlgError("constraint operator is not surjective; "
                                    "the lifting problem is overdetermined")
    u = np.linalg.solve(s, data @ xi_chi)
    scale = max(np.abs(u).max(), np.abs(xi_chi).max(), 1e-300)
    z = system.kernel_basis
    weak = z.T @ system.mh @ (u - system.a_star @ u
                              - system.g @ xi_chi[:system.n_natural])
    strong = system.b @ u - xi_chi[system.n_natural:]
    if max(np.abs(weak).max(initial=0.0),
           np.abs(strong).max(initial=0.0)) > 1e-10 * scale:
        raise np.linalg.LinAlgError("lifting system is numerically singular")
    return u


def _sum_norm_sup(p, q):
    """sup of sqrt(x'Px) + sqrt(x'Qx) over the unit sphere.

    The maximizer is a fixed point of the weighted pencil, reached by
    iterating from the extreme eigenvectors of each part; random
    restarts guard against starting in a null direction.
    """
    m = p.shape[0]
    if m == 0:
        return 0.0
    starts = []
    for mat in (p, q, p + q):
        vals, vecs = np.linalg.eigh(mat)
        starts.append(vecs[:, -1])
    rng = np.random.default_rng(12345)
    starts.extend(rng.normal(size=(8, m)))
    best = 0.0
    for x in starts:
        x = x / np.linalg.norm(x)
        for _ in range(60):
            a = np.sqrt(max(x @ p @ x, 0.0))
            b = np.sqrt(max(x @ q @ x, 0.0))
            best = max(best, a + b)
            mix = (p / a if a > 0 else 0.0 * p) + (q / b if b > 0 else 0.0 * q)
            if np.abs(mix).max() == 0.0:
                break
            _, vecs = np.linalg.eigh(mix)
            xn = vecs[:, -1]
            if np.abs(xn @ x) > 1.0 - 1e-14:
                break
            x = xn
    return float(best)


def check_hypotheses(system: AbstractSystem) -> dict:
    """Verify the structural hypotheses and compute their constants.

    Returns a report with the norm equivalence pair (c1_star, c2_star),
    the skewness residual of the generator on Ker B, surjectivity of
    I +- A there, the lifting constant c_lift and ||G||.  Failures are
    collected under "failures" instead of raised, so broken systems can
    be inspected.
    """
    failures = []
    # Norm equivalence via the extreme generalized eigenvalues of the
    # quadratic graph form; the sum norm costs at most sqrt(2) on top.
    graph = system.mh + system.a_star.T @ system.mh @ system.a_star
    eigs = scipy.linalg.eigh(graph, system.mv, eigvals_only=True)
    c1 = float(np.sqrt(max(eigs[0], 0.0)))
    c2 = float(np.sqrt(2.0 * eigs[-1]))
    if not np.isfinite(c1) or c1 <= 0.0:
        failures.append("norm equivalence")

    rank_ok = (np.linalg.matrix_rank(system.b) == system.n_constraints
               if system.n_constraints else True)
    if not rank_ok:
        failures.append("constraint operator not surjective")

    z = system.kernel_basis
    gen = z.T @ system.mh @ system.a_star @ z
    gen_scale = max(np.abs(gen).max(initial=0.0), 1.0)
    dissipativity = float(np.abs(gen + gen.T).max(initial=0.0) / gen_scale)
    if dissipativity > _FLAG_TOL:
        failures.append("dissipativity")

    rng = np.random.default_rng(2024)
    surjective = True
    eye = np.eye(gen.shape[0])
    for sign in (+1.0, -1.0):
        mat = eye + sign * gen
        bvec = rng.normal(size=gen.shape[0])
        try:
            x = np.linalg.solve(mat, bvec)
            surjective &= bool(np.abs(mat @ x - bvec).max(initial=0.0)
                               <= 1e-10 * max(np.abs(bvec).max(), 1.0))
        except np.linalg.LinAlgError:
            surjective = False
    if not surjective:
        failures.append("surjectivity of I +- A")

    c_lift = float("nan")
    lifting_ok = rank_ok
    if rank_ok:
        s, data = _lifting_pieces(system)
        cond = np.linalg.cond(s)
        if not np.isfinite(cond) or cond > 1e12:
            lifting_ok = False
        else:
            t = np.linalg.solve(s, data)
            # measure the solution operator from the M-unit ball
            chol = np.linalg.cholesky(system.mxi) if system.mxi.size else \
                np.zeros((0, 0))
            tm = np.linalg.solve(chol.T, t.T).T if system.mxi.size else t
            c_lift = _sum_norm_sup(tm.T @ system.mh @ tm,
                                   tm.T @ system.mv @ tm)
    if not lifting_ok:
        failures.append("lifting problem")

    g_norm = 0.0
    if system.n_natural:
        mxi1 = system.mxi[:system.n_natural, :system.n_natural]
        chol1 = np.linalg.cholesky(mxi1)
        gm = np.linalg.solve(chol1.T, system.g.T).T
        g_norm = float(np.sqrt(max(scipy.linalg.eigh(
            gm.T @ system.mh @ gm, eigvals_only=True)[-1], 0.0)))

    gen_eigs = np.linalg.eigvals(gen) if gen.size else np.zeros(0)
    return {"c1_star": c1, "c2_star": c2,
            "dissipativity_residual": dissipativity,
            "surjectivity_ok": surjective,
            "c_lift": c_lift, "g_norm": g_norm,
            "generator_real_part": float(np.abs(gen_eigs.real).max(initial=0.0)),
            "failures": failures}


def builtin_wave_system(n: int) -> AbstractSystem:
    """Staggered-grid wave system on [0, 1] with endpoint traces.

    The state is (u, v) with u on the n+1 nodes and v on the n cell
    midpoints; A*(u, v) = (div v, grad u) with the trapezoid pairing on
    the nodes, so the summation-by-parts boundary terms cancel exactly
    on Ker B = {u(0) = u(1) = 0}.  The divergence at the two end nodes
    is the one-sided first-order value, which keeps A* genuinely
    non-dissipative off the kernel.  V carries the discrete H1 x H(div)
    norm.  G is zero with a single dummy natural-data channel.
    """
    if n < 4:
        raise ValueError("n must be at least 4")
    h = 1.0 / n
    dim_u, dim_v = n + 1, n
    dim = dim_u + dim_v
    w_nodes = np.full(dim_u, h)
    w_nodes[0] = w_nodes[-1] = h / 2.0
    mh = np.diag(np.concatenate([w_nodes, np.full(dim_v, h)]))

    grad = (np.eye(dim_v, dim_u, k=1) - np.eye(dim_v, dim_u)) / h
    div = np.zeros((dim_u, dim_v))
    for i in range(1, n):
        div[i, i - 1] = -1.0 / h
        div[i, i] = 1.0 / h
    div[0, 0], div[0, 1] = -1.0 / h, 1.0 / h
    div[n, n - 2], div[n, n - 1] = -1.0 / h, 1.0 / h

    a_star = np.zeros((dim, dim))
    a_star[:dim_u, dim_u:] = div
    a_star[dim_u:, :dim_u] = grad

    b = np.zeros((2, dim))
    b[0, 0] = 1.0
    b[1, dim_u - 1] = 1.0

    mv = mh.copy()
    mv[:dim_u, :dim_u] += grad.T @ (h * np.eye(dim_v)) @ grad
    mv[dim_u:, dim_u:] += div.T @ np.diag(w_nodes) @ div

    return AbstractSystem(mh, mv, a_star, b, np.zeros((dim, 1)), np.eye(3))


@dataclass
class Trajectory:
    """Time samples of one evolution run.

    u holds the state per step, du its derivative; the data samples
    (f, xi and their time derivatives) ride along so that the a priori
    bounds can be evaluated without re-sampling the callables.
    constraint_residual tracks ||B U - chi|| per step.
    """

    dt: float
    t: np.ndarray
    u: np.ndarray
    du: np.ndarray
    f: np.ndarray
    f_dot: np.ndarray
    xi: np.ndarray
    xi_dot: np.ndarray
    xi_ddot: np.ndarray
    constraint_residual: np.ndarray
    integrator: str

    @property
    def steps(self) -> int:
        return len(self.t) - 1


def _vector_signal(fun, width, name):
    if fun is None:
        zero = np.zeros(width)
        return lambda t: zero
    if not callable(fun):
        raise ValueError(f"{name} must be callable or None")
    return lambda t: np.asarray(fun(t), dtype=np.float64).reshape(width)


def _fd_first(fun, t, h=1e-6):
    return (fun(t + h) - fun(t - h)) / (2.0 * h)


def _fd_second(fun, t, h=1e-4):
    return (fun(t + h) - 2.0 * fun(t) + fun(t - h)) / h**2


def evolve(system: AbstractSystem, f, xi, t_final: float, dt: float,
           integrator: str = "rk4", xi_dot=None, f_dot=None,
           initial=None) -> Trajectory:
    """March the constrained evolution with zero initial state.

    f(t) -> H and xi(t) -> M1 x M2 must be defined for all real t and
    vanish for t <= 0 (causal data); unless analytic derivatives are
    passed, centered differences of the callables supply them.  The
    state is split as U = L Xi + Z y and y is integrated inside Ker B,
    either with classical RK4 or with the exact exponential of the
    skew generator plus Simpson quadrature of the source ("expm").
    Compatibility at t = 0 (F in W1, Xi in W2) is enforced on the
    samples; `initial` is a test hook seeding an admissible state in
    Ker B, used to exercise the isometry group.
    """
    if integrator not in ("rk4", "expm"):
        raise ValueError(f"unknown integrator {integrator!r}")
    if dt <= 0 or t_final <= 0:
        raise ValueError("t_final and dt must be positive")
    m = system.n_natural + system.n_constraints
    f_fun = _vector_signal(f, system.dim, "f")
    xi_fun = _vector_signal(xi, m, "xi")
    xi_dot_fun = (_vector_signal(xi_dot, m, "xi_dot") if xi_dot is not None
                  else lambda t: _fd_first(xi_fun, t))
    f_dot_fun = (_vector_signal(f_dot, system.dim, "f_dot")
                 if f_dot is not None else lambda t: _fd_first(f_fun, t))

    steps = int(round(t_final / dt))
    t = np.arange(steps + 1) * dt
    f_s = np.stack([f_fun(tk) for tk in t])
    xi_s = np.stack([xi_fun(tk) for tk in t])
    xi_d = np.stack([xi_dot_fun(tk) for tk in t])
    xi_dd = np.stack([_fd_second(xi_fun, tk) for tk in t])
    f_d = np.stack([f_dot_fun(tk) for tk in t])

    scale_f = max(np.abs(f_s).max(initial=0.0), 1e-300)
    scale_x = max(np.abs(xi_s).max(initial=0.0), 1e-300)
    scale_xd = max(np.abs(xi_d).max(initial=0.0), 1e-300)
    if np.abs(f_s[0]).max(initial=0.0) > 1e-6 * scale_f:
        raise ValueError("f(0) != 0: data outside the W1 class")
    if np.abs(xi_s[0]).max(initial=0.0) > 1e-6 * scale_x:
        raise ValueError("xi(0) != 0: data outside the W2 class")
    if np.abs(xi_d[0]).max(initial=0.0) > 1e-4 * scale_xd:
        raise ValueError("xi'(0) != 0: data outside the W2 class")

    s_mat, data = _lifting_pieces(system)
    if s_mat.shape[0] != s_mat.shape[1]:
        raise np.linalg.LinAlgError("constraint operator is not surjective")
    lu = scipy.linalg.lu_factor(s_mat)
    lift_of = lambda vec: scipy.linalg.lu_solve(lu, data @ vec)

    z = system.kernel_basis
    gen = z.T @ system.mh @ system.a_star @ z
    zt_mh = z.T @ system.mh

    def source(tk):
        # F0 = F + L(Xi - Xi'), projected onto Ker B
        vec = xi_fun(tk) - xi_dot_fun(tk)
        return zt_mh @ (f_fun(tk) + lift_of(vec))

    y = np.zeros(gen.shape[0])
    if initial is not None:
        initial = np.asarray(initial, dtype=np.float64).reshape(system.dim)
        if np.abs(system.b @ initial).max(initial=0.0) > 1e-10 * max(
                np.abs(initial).max(), 1e-300):
            raise ValueError("initial state must satisfy B U = 0")
        y = zt_mh @ initial

    ys = np.empty((steps + 1, gen.shape[0]))
    ys[0] = y
    if integrator == "rk4":
        for k in range(steps):
            tk = t[k]
            g1 = source(tk)
            k1 = gen @ y + g1
            g2 = source(tk + 0.5 * dt)
            k2 = gen @ (y + 0.5 * dt * k1) + g2
            k3 = gen @ (y + 0.5 * dt * k2) + g2
            g4 = source(tk + dt)
            k4 = gen @ (y + dt * k3) + g4
            y = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            ys[k + 1] = y
    else:
        prop = scipy.linalg.expm(gen * dt)
        prop_half = scipy.linalg.expm(gen * 0.5 * dt)
        g_right = source(t[0])
        for k in range(steps):
            g_left, g_right = g_right, source(t[k + 1])
            g_mid = source(t[k] + 0.5 * dt)
            y = prop @ y + dt / 6.0 * (prop @ g_left
                                       + 4.0 * (prop_half @ g_mid) + g_right)
            ys[k + 1] = y

    u_nh = np.stack([lift_of(v) for v in xi_s])
    u = u_nh + ys @ z.T
    du_nh = np.stack([lift_of(v) for v in xi_d])
    dy = ys @ gen.T + np.stack([source(tk) for tk in t])
    du = du_nh + dy @ z.T
    chi = xi_s[:, system.n_natural:]
    residual = np.abs(u @ system.b.T - chi).max(axis=1, initial=0.0)
    limit = 1e-8 * max(np.abs(u).max(initial=0.0), 1e-300)
    if residual.max(initial=0.0) > max(limit, 1e-8 * scale_x):
        raise RuntimeError("constraint residual exceeded tolerance")
    return Trajectory(dt, t, u, du, f_s, f_d, xi_s, xi_d, xi_dd,
                      residual, integrator)


def verify_bounds(system: AbstractSystem, trajectory: Trajectory,
                  hypotheses: dict | None = None) -> dict:
    """Evaluate the a priori estimates along a trajectory.

    Both state bounds (on ||U|| and ||U'|| in H) and the graph-norm
    bound on ||U|| in V are formed from the computed constants and the
    trapezoid time integrals of the data; margins are right-hand side
    minus left-hand side per step, so the theorem predicts them all
    nonnegative up to quadrature noise.  Also reports the linear
    envelope constants of the polynomial growth estimate.
    """
    if hypotheses is None:
        hypotheses = check_hypotheses(system)
    c_lift = hypotheses["c_lift"]
    c1 = hypotheses["c1_star"]
    g_norm = hypotheses["g_norm"]
    t = trajectory.t
    dt = trajectory.dt

    def cum(vals):
        return cumulative_trapezoid(vals, dx=dt, initial=0.0)

    xi_n = system.norm_m(trajectory.xi)
    xi_d_n = system.norm_m(trajectory.xi_dot)
    xi_dd_n = system.norm_m(trajectory.xi_ddot)
    f_n = system.norm_h(trajectory.f)
    f_d_n = system.norm_h(trajectory.f_dot)
    i_xi, i_xi_d, i_xi_dd = cum(xi_n), cum(xi_d_n), cum(xi_dd_n)
    i_f, i_f_d = cum(f_n), cum(f_d_n)

    u_h = system.norm_h(trajectory.u)
    du_h = system.norm_h(trajectory.du)
    u_v = system.norm_v(trajectory.u)

    rhs_state = c_lift * (i_xi + 2.0 * i_xi_d) + i_f
    rhs_rate = c_lift * (i_xi_d + 2.0 * i_xi_dd) + i_f_d
    rhs_graph = (c_lift * (i_xi + 3.0 * i_xi_d + 2.0 * i_xi_dd)
                 + i_f + 2.0 * i_f_d + g_norm * xi_n)
    margins = {"state": rhs_state - u_h,
               "rate": rhs_rate - du_h,
               "graph": rhs_graph - c1 * u_v}
    c_xi = float(i_xi_dd[-1])
    c_f = float(i_f_d[-1])
    envelope = (c_lift * c_xi * (1.0 + 2.0 * t) + c_f * (1.0 + t)) - u_h
    report = {f"margin_{k}": v for k, v in margins.items()}
    report.update({f"min_{k}": float(v.min()) for k, v in margins.items()})
    report["ok"] = all(v.min() >= -1e-8 for v in margins.values())
    report["c_xi"] = c_xi
    report["c_f"] = c_f
    report["margin_envelope"] = envelope
    report["constraint_residual_max"] = float(
        trajectory.constraint_residual.max(initial=0.0))
    return report
