"""Constrained evolution framework: hypotheses, lifting, marching, bounds.

The staggered wave system doubles as the main oracle: its generator is
skew by summation-by-parts, its graph form coincides with its V norm
(so the equivalence constants are exactly 1 and sqrt(2)), and the
energy identity d/dt 1/2 ||U||^2 = (F, U)_H holds exactly for the
continuous dynamics.  Synthetic systems probe the failure paths.
"""

import numpy as np
import pytest
from scipy.integrate import cumulative_simpson

from tdbem.evolution import (AbstractSystem, Trajectory, builtin_wave_system,
                             check_hypotheses, evolve, lift, verify_bounds)


def causal_bump(t, duration=1.0, delay=0.0):
    s = (np.asarray(t, dtype=float) - delay) / duration
    inside = (s > 0.0) & (s < 1.0)
    return np.where(inside, np.sin(np.pi * np.clip(s, 0.0, 1.0))**4, 0.0)


def standard_data(system):
    """Interior force on the u block plus both endpoint traces."""
    n = system.dim // 2
    x = np.linspace(0.0, 1.0, n + 1)
    profile = np.exp(-40.0 * (x - 0.4)**2)

    def f(t):
        out = np.zeros(system.dim)
        out[:n + 1] = profile * causal_bump(t, duration=2.0)
        return out

    def xi(t):
        return np.array([0.0, 0.6 * causal_bump(t),
                         -0.2 * causal_bump(t, duration=1.5)])

    return f, xi


def random_smooth_data(system, seed):
    """Random amplitudes and supports, still W2-compatible at t = 0."""
    rng = np.random.default_rng(seed)
    n = system.dim // 2
    x = np.linspace(0.0, 1.0, n + 1)
    profiles = [np.sin((k + 1) * np.pi * x) for k in range(3)]
    amps_f = rng.normal(size=3)
    amps_xi = rng.normal(size=(2, 2))
    durations = rng.uniform(0.5, 1.0, size=4)

    def f(t):
        out = np.zeros(system.dim)
        for a, p, d in zip(amps_f, profiles, durations[:3]):
            out[:n + 1] += a * p * causal_bump(t, duration=d)
        return out

    def xi(t):
        b0 = causal_bump(t, duration=durations[3])
        b1 = causal_bump(t, duration=durations[0], delay=0.2)
        return np.array([0.0,
                         amps_xi[0, 0] * b0 + amps_xi[0, 1] * b1,
                         amps_xi[1, 0] * b0 + amps_xi[1, 1] * b1])

    return f, xi


def skew_on_kernel_system(dim=9, seed=7):
    """Random system that is skew exactly on Ker B and not off it."""
    rng = np.random.default_rng(seed)
    root = rng.normal(size=(dim, dim))
    mh = root @ root.T + dim * np.eye(dim)
    kay = rng.normal(size=(dim, dim))
    kay = kay - kay.T
    b = rng.normal(size=(2, dim))
    a_star = np.linalg.solve(mh, kay + b.T @ rng.normal(size=(2, 2)) @ b)
    mv = mh + a_star.T @ mh @ a_star
    g = rng.normal(size=(dim, 1))
    return AbstractSystem(mh, mv, a_star, b, g, np.eye(3))


@pytest.fixture(scope="module")
def sys16():
    return builtin_wave_system(16)


@pytest.fixture(scope="module")
def hyp16(sys16):
    return check_hypotheses(sys16)


@pytest.fixture(scope="module")
def driven16(sys16):
    f, xi = standard_data(sys16)
    return evolve(sys16, f, xi, t_final=4.0, dt=0.01), f, xi


class TestSystemValidation:
    def test_rejects_nonsymmetric_h(self):
        mh = np.eye(3)
        mh[0, 1] = 0.5
        with pytest.raises(ValueError, match="symmetric"):
            AbstractSystem(mh, np.eye(3), np.zeros((3, 3)),
                           np.zeros((1, 3)), np.zeros((3, 1)), np.eye(2))

    def test_rejects_indefinite_h(self):
        with pytest.raises(ValueError, match="positive definite"):
            AbstractSystem(np.diag([1.0, -1.0]), np.eye(2), np.zeros((2, 2)),
                           np.zeros((1, 2)), np.zeros((2, 0)), np.eye(1))

    def test_rejects_shape_mismatches(self):
        with pytest.raises(ValueError, match="a_star"):
            AbstractSystem(np.eye(3), np.eye(3), np.zeros((2, 2)),
                           np.zeros((1, 3)), np.zeros((3, 0)), np.eye(1))
        with pytest.raises(ValueError, match="column"):
            AbstractSystem(np.eye(3), np.eye(3), np.zeros((3, 3)),
                           np.zeros((1, 4)), np.zeros((3, 0)), np.eye(1))
        with pytest.raises(ValueError, match="stacked data"):
            AbstractSystem(np.eye(3), np.eye(3), np.zeros((3, 3)),
                           np.zeros((1, 3)), np.zeros((3, 1)), np.eye(3))

    def test_builtin_needs_four_cells(self):
        with pytest.raises(ValueError, match="at least 4"):
            builtin_wave_system(3)


class TestHypotheses:
    def test_builtin_constants(self, hyp16):
        # graph form and V form coincide for the staggered pair, so the
        # equivalence constants are exactly 1 and sqrt(2)
        assert abs(hyp16["c1_star"] - 1.0) < 1e-9
        assert abs(hyp16["c2_star"] - np.sqrt(2.0)) < 1e-9
        assert hyp16["dissipativity_residual"] < 1e-12
        assert hyp16["surjectivity_ok"]
        assert hyp16["failures"] == []
        assert np.isfinite(hyp16["c_lift"]) and hyp16["c_lift"] > 0

    def test_generator_spectrum_imaginary(self):
        for n in (8, 16, 32):
            rep = check_hypotheses(builtin_wave_system(n))
            assert rep["generator_real_part"] < 1e-10

    def test_constants_stable_under_refinement(self):
        reports = [check_hypotheses(builtin_wave_system(n))
                   for n in (8, 16, 32)]
        for key in ("c1_star", "c2_star", "c_lift"):
            vals = [r[key] for r in reports]
            assert max(vals) <= 4.0 * min(vals)

    def test_degenerate_system(self):
        # A* = 0 and no constraints: the lifting collapses to U = 0
        dim = 4
        sys0 = AbstractSystem(np.eye(dim), np.eye(dim), np.zeros((dim, dim)),
                              np.zeros((0, dim)), np.zeros((dim, 1)),
                              np.eye(1))
        rep = check_hypotheses(sys0)
        assert rep["failures"] == []
        assert rep["c_lift"] == 0.0
        assert np.all(lift(sys0, np.array([0.7])) == 0.0)

    def test_rank_deficient_constraints_flagged(self, sys16):
        b = np.vstack([sys16.b, sys16.b[0]])
        broken = AbstractSystem(sys16.mh, sys16.mv, sys16.a_star, b,
                                np.zeros((sys16.dim, 1)), np.eye(4))
        rep = check_hypotheses(broken)
        assert "constraint operator not surjective" in rep["failures"]
        assert "lifting problem" in rep["failures"]
        assert np.isnan(rep["c_lift"])

    def test_non_dissipative_system_flagged(self):
        rng = np.random.default_rng(3)
        dim = 6
        a = rng.normal(size=(dim, dim))
        loose = AbstractSystem(np.eye(dim), np.eye(dim) + a.T @ a, a,
                               rng.normal(size=(1, dim)),
                               np.zeros((dim, 0)), np.eye(1))
        rep = check_hypotheses(loose)
        assert "dissipativity" in rep["failures"]

    def test_synthetic_skew_system_passes(self):
        rep = check_hypotheses(skew_on_kernel_system())
        assert rep["dissipativity_residual"] < 1e-12
        assert rep["failures"] == []


class TestLift:
    def test_constraint_exact_and_weak_residual(self, sys16):
        xi_chi = np.array([0.4, 0.3, -0.7])
        u = lift(sys16, xi_chi)
        assert np.abs(sys16.b @ u - xi_chi[1:]).max() < 1e-12
        z = sys16.kernel_basis
        weak = z.T @ sys16.mh @ (u - sys16.a_star @ u)
        assert np.abs(weak).max() < 1e-10 * np.abs(u).max()

    def test_linearity_and_zero(self, sys16):
        rng = np.random.default_rng(11)
        x1, x2 = rng.normal(size=(2, 3))
        combo = lift(sys16, 2.0 * x1 - 0.5 * x2)
        parts = 2.0 * lift(sys16, x1) - 0.5 * lift(sys16, x2)
        np.testing.assert_allclose(combo, parts, atol=1e-12)
        assert np.all(lift(sys16, np.zeros(3)) == 0.0)

    def test_lifting_bound_holds_and_is_sharp(self, sys16, hyp16):
        # C_lift must dominate every data direction and be attained by
        # the worst one, so dense sphere sampling should graze it
        rng = np.random.default_rng(5)
        best = 0.0
        for xi_chi in rng.normal(size=(2000, 3)):
            u = lift(sys16, xi_chi)
            ratio = ((sys16.norm_h(u) + sys16.norm_v(u))
                     / sys16.norm_m(xi_chi))
            assert ratio <= hyp16["c_lift"] * (1.0 + 1e-10)
            best = max(best, ratio)
        assert best > 0.9 * hyp16["c_lift"]

    def test_rejects_wrong_width(self, sys16):
        with pytest.raises(ValueError, match="stack"):
            lift(sys16, np.zeros(2))


class TestEvolve:
    def test_zero_data_stays_zero(self, sys16):
        traj = evolve(sys16, None, None, t_final=1.0, dt=0.05)
        assert np.all(traj.u == 0.0)
        assert np.all(traj.du == 0.0)

    def test_starts_at_rest(self, driven16):
        traj, _, _ = driven16
        assert np.abs(traj.u[0]).max() == 0.0
        assert np.abs(traj.du[0]).max() < 1e-9

    def test_constraint_tracked_small(self, driven16, sys16):
        traj, _, xi = driven16
        assert traj.constraint_residual.max() < 1e-10
        chi = np.stack([xi(tk)[1:] for tk in traj.t])
        np.testing.assert_allclose(traj.u @ sys16.b.T, chi, atol=1e-12)

    def test_rejects_incompatible_data(self, sys16):
        flat = np.ones(sys16.dim)
        with pytest.raises(ValueError, match="W1"):
            evolve(sys16, lambda t: flat, None, t_final=0.5, dt=0.05)
        with pytest.raises(ValueError, match=r"xi\(0\)"):
            evolve(sys16, None, lambda t: np.array([0.0, 1.0, 0.0]),
                   t_final=0.5, dt=0.05)
        with pytest.raises(ValueError, match=r"xi'\(0\)"):
            evolve(sys16, None, lambda t: np.array([0.0, float(t), 0.0]),
                   t_final=0.5, dt=0.05)

    def test_rejects_bad_arguments(self, sys16):
        with pytest.raises(ValueError, match="integrator"):
            evolve(sys16, None, None, t_final=1.0, dt=0.1, integrator="ab2")
        with pytest.raises(ValueError, match="positive"):
            evolve(sys16, None, None, t_final=1.0, dt=0.0)
        off_kernel = np.ones(sys16.dim)
        with pytest.raises(ValueError, match="initial"):
            evolve(sys16, None, None, t_final=1.0, dt=0.1,
                   initial=off_kernel)

    def test_integrators_agree(self, sys16, driven16):
        traj, f, xi = driven16
        alt = evolve(sys16, f, xi, t_final=4.0, dt=0.01, integrator="expm")
        scale = np.abs(traj.u).max()
        assert np.abs(traj.u - alt.u).max() < 1e-4 * scale

    def test_analytic_derivative_hook(self, sys16):
        _, xi = standard_data(sys16)
        h = 1e-6
        xi_dot = lambda t: (xi(t + h) - xi(t - h)) / (2.0 * h)
        a = evolve(sys16, None, xi, t_final=2.0, dt=0.02)
        b = evolve(sys16, None, xi, t_final=2.0, dt=0.02, xi_dot=xi_dot)
        np.testing.assert_allclose(a.u, b.u, atol=1e-12)

    def test_energy_identity(self, sys16):
        # d/dt 1/2 ||U||_H^2 = (F, U)_H for skew A and no boundary data;
        # Simpson quadrature of the power is the independent reference,
        # and halving dt must not move the discrete identity
        f, _ = standard_data(sys16)
        drifts = []
        for dt in (0.01, 0.005):
            traj = evolve(sys16, f, None, t_final=5.0, dt=dt)
            energy = 0.5 * sys16.norm_h(traj.u)**2
            power = np.einsum("ki,ij,kj->k", traj.f, sys16.mh, traj.u)
            predicted = cumulative_simpson(power, dx=dt, initial=0.0)
            drifts.append(np.abs(energy - predicted).max() / energy.max())
        assert drifts[0] < 1e-6
        assert drifts[1] < drifts[0] / 4.0

    def test_isometry_group(self, sys16):
        # data switched off entirely: the flow preserves the H norm
        n = sys16.dim // 2
        x = np.linspace(0.0, 1.0, n + 1)
        xm = (x[:-1] + x[1:]) / 2.0
        u0 = np.concatenate([np.sin(np.pi * x) - 0.3 * np.sin(2 * np.pi * x),
                             0.5 * np.sin(np.pi * xm)**2])
        traj = evolve(sys16, None, None, t_final=4.0, dt=1e-3, initial=u0)
        norms = sys16.norm_h(traj.u)
        assert (norms.max() - norms.min()) / norms.max() < 1e-6

    def test_exponential_integrator_exact_isometry(self, sys16):
        n = sys16.dim // 2
        x = np.linspace(0.0, 1.0, n + 1)
        u0 = np.concatenate([np.sin(np.pi * x), np.zeros(n)])
        traj = evolve(sys16, None, None, t_final=3.0, dt=0.05,
                      integrator="expm", initial=u0)
        norms = sys16.norm_h(traj.u)
        assert (norms.max() - norms.min()) / norms.max() < 1e-12

    def test_isometry_after_force_ends(self, sys16, driven16):
        traj, _, _ = driven16
        tail = sys16.norm_h(traj.u[traj.t > 2.0])
        assert (tail.max() - tail.min()) / tail.max() < 1e-6

    def test_time_shift_and_causality(self, sys16):
        f, xi = standard_data(sys16)
        shift = 0.3
        f_late = lambda t: f(t - shift)
        xi_late = lambda t: xi(t - shift)
        base = evolve(sys16, f, xi, t_final=2.0, dt=0.01)
        late = evolve(sys16, f_late, xi_late, t_final=2.3, dt=0.01)
        assert np.abs(late.u[:30]).max() == 0.0
        # the difference sits at the noise floor of the sampled-in-time
        # data derivatives, not at machine precision
        scale = np.abs(base.u).max()
        assert np.abs(late.u[30:] - base.u).max() < 1e-9 * scale

    def test_dt_refinement_is_fourth_order(self, sys16):
        f, xi = standard_data(sys16)
        runs = [evolve(sys16, f, xi, t_final=2.0, dt=dt).u
                for dt in (0.04, 0.02, 0.01)]
        gap_coarse = np.abs(runs[0] - runs[1][::2]).max()
        gap_fine = np.abs(runs[1] - runs[2][::2]).max()
        assert 10.0 < gap_coarse / gap_fine < 26.0

    def test_trajectory_metadata(self, driven16):
        traj, _, _ = driven16
        assert isinstance(traj, Trajectory)
        assert traj.steps == 400
        assert traj.u.shape == (401, 33)
        assert traj.xi.shape == (401, 3)
        assert traj.integrator == "rk4"


class TestVerifyBounds:
    def test_margins_nonnegative(self, sys16, hyp16, driven16):
        traj, _, _ = driven16
        report = verify_bounds(sys16, traj, hyp16)
        assert report["ok"]
        for key in ("min_state", "min_rate", "min_graph"):
            assert report[key] >= -1e-8

    def test_random_data_margins(self):
        for n, seed in ((16, 0), (32, 1)):
            system = builtin_wave_system(n)
            f, xi = random_smooth_data(system, seed)
            traj = evolve(system, f, xi, t_final=3.0, dt=0.01)
            report = verify_bounds(system, traj)
            assert report["ok"], (n, report["min_state"],
                                  report["min_rate"], report["min_graph"])

    def test_margins_scale_linearly(self, sys16, hyp16):
        # every term in the estimates is 1-homogeneous in the data
        f, xi = standard_data(sys16)
        traj = evolve(sys16, f, xi, t_final=2.0, dt=0.02)
        scaled = evolve(sys16, lambda t: 3.0 * f(t), lambda t: 3.0 * xi(t),
                        t_final=2.0, dt=0.02)
        rep = verify_bounds(sys16, traj, hyp16)
        rep3 = verify_bounds(sys16, scaled, hyp16)
        for key in ("margin_state", "margin_rate", "margin_graph"):
            np.testing.assert_allclose(rep3[key], 3.0 * rep[key],
                                       rtol=1e-6, atol=1e-10)

    def test_linear_growth_envelope(self, sys16, hyp16, driven16):
        # compact-support data: ||U(t)||_H sits below the linear
        # envelope built from the full-horizon data integrals
        traj, _, _ = driven16
        report = verify_bounds(sys16, traj, hyp16)
        assert report["margin_envelope"].min() >= 0.0
        assert report["c_xi"] > 0.0

    def test_recomputes_hypotheses_when_missing(self, sys16, driven16):
        traj, _, _ = driven16
        report = verify_bounds(sys16, traj)
        assert report["ok"]
