"""Scenario runner and CLI: configs, artifacts, determinism, waveforms."""

import json

import numpy as np
import pytest

from tdbem.cli import main
from tdbem.mesh import build_icosphere
from tdbem.runner import (ConfigError, load_config, read_csv, read_matrix,
                          read_signal_csv, run_scenario, waveform, write_csv,
                          write_matrix, write_signal_csv)


def write_config(path, **kwargs):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(kwargs, fh)
    return str(path)


def minimal_solve(tmp_path, **extra):
    cfg = {
        "formulation": "indirect_dirichlet",
        "mesh": "icosphere", "mesh_level": 1,
        "method": "bdf2", "n_steps": 32, "dt": 0.1,
        "out": str(tmp_path / "out"), "seed": 1,
    }
    cfg.update(extra)
    return write_config(tmp_path / "config.json", **cfg)


class TestConfigErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="nope.json"):
            load_config(str(tmp_path / "nope.json"))

    def test_malformed_json_carries_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{\n "formulation": "x",\n "bad\n}\n')
        with pytest.raises(ConfigError, match=r"broken\.json:3"):
            load_config(str(path))

    def test_top_level_must_be_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]\n")
        with pytest.raises(ConfigError, match=r":1"):
            load_config(str(path))

    def test_unknown_formulation(self, tmp_path):
        path = minimal_solve(tmp_path, formulation="nonsense")
        with pytest.raises(ConfigError, match="nonsense"):
            run_scenario("solve", load_config(path), path)

    def test_custom_label_not_configurable(self, tmp_path):
        path = minimal_solve(tmp_path, formulation="custom")
        with pytest.raises(ConfigError, match="custom"):
            run_scenario("solve", load_config(path), path)

    def test_unknown_key_rejected(self, tmp_path):
        path = minimal_solve(tmp_path, banana=3)
        with pytest.raises(ConfigError, match="banana"):
            run_scenario("solve", load_config(path), path)

    def test_horizon_mismatch(self, tmp_path):
        path = minimal_solve(tmp_path, horizon=5.0)
        with pytest.raises(ConfigError, match="horizon"):
            run_scenario("solve", load_config(path), path)

    def test_horizon_consistent_accepted(self, tmp_path):
        path = minimal_solve(tmp_path, horizon=3.2)
        report, _ = run_scenario("solve", load_config(path), path)
        assert report["n_steps"] == 32

    def test_wrong_type(self, tmp_path):
        path = minimal_solve(tmp_path, n_steps="many")
        with pytest.raises(ConfigError, match="n_steps"):
            run_scenario("solve", load_config(path), path)

    def test_unknown_command(self):
        with pytest.raises(ConfigError, match="frobnicate"):
            run_scenario("frobnicate", {}, "x.json")

    def test_unknown_region(self, tmp_path):
        path = minimal_solve(tmp_path, formulation="mixed",
                             dirichlet_region="everywhere")
        with pytest.raises(ConfigError, match="everywhere"):
            run_scenario("solve", load_config(path), path)


class TestCli:
    def test_solve_roundtrip_and_listing(self, tmp_path, capsys):
        path = minimal_solve(tmp_path)
        assert main(["solve", path]) == 0
        listed = capsys.readouterr().out.strip().splitlines()
        assert any(line.endswith("densities.csv") for line in listed)
        assert any(line.endswith("report.json") for line in listed)

    def test_quiet_suppresses_listing(self, tmp_path, capsys):
        path = minimal_solve(tmp_path)
        assert main(["solve", path, "--quiet"]) == 0
        assert capsys.readouterr().out == ""

    def test_config_error_exit_code(self, tmp_path, capsys):
        path = minimal_solve(tmp_path, formulation="nonsense")
        assert main(["solve", path]) == 2
        err = capsys.readouterr().err
        assert "nonsense" in err and "config.json" in err

    def test_malformed_json_exit_code(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text('{"formulation": ]\n')
        assert main(["solve", str(path)]) == 2
        assert "broken.json:1" in capsys.readouterr().err

    def test_numerical_failure_exit_code(self, tmp_path, capsys):
        # negative abscissa is outside the kernel's domain; it passes
        # the structural config checks and dies in the assembly
        path = write_config(tmp_path / "probe.json", mesh_level=0,
                            sigma=-1.0, omegas=[1.0, 2.0],
                            out=str(tmp_path / "out"))
        assert main(["probe-bounds", str(path)]) == 3
        assert "numerical failure" in capsys.readouterr().err

    def test_out_flag_overrides_config(self, tmp_path):
        path = minimal_solve(tmp_path)
        override = tmp_path / "elsewhere"
        assert main(["solve", path, "--out", str(override), "--quiet"]) == 0
        assert (override / "densities.csv").exists()


class TestDeterminism:
    def test_rerun_is_byte_identical(self, tmp_path):
        path = minimal_solve(tmp_path,
                             observation_points=[[2.0, 0.0, 0.0]])
        data = load_config(path)
        _, first = run_scenario("solve", data, path,
                                str(tmp_path / "run1"))
        _, second = run_scenario("solve", data, path,
                                 str(tmp_path / "run2"))
        assert len(first) == len(second) == 3
        for a, b in zip(first, second):
            with open(a, "rb") as fa, open(b, "rb") as fb:
                assert fa.read() == fb.read()

    def test_check_hypotheses_seeded(self, tmp_path):
        cfg = {"system_size": 8, "t_final": 1.0, "dt": 0.02, "seed": 5,
               "isometry_t_final": 1.0, "isometry_dt": 0.01}
        path = write_config(tmp_path / "hyp.json", **cfg)
        data = load_config(path)
        r1, _ = run_scenario("check-hypotheses", data, path,
                             str(tmp_path / "a"))
        r2, _ = run_scenario("check-hypotheses", data, path,
                             str(tmp_path / "b"))
        assert r1 == r2


class TestWaveforms:
    def test_bump_vanishes_to_third_order(self):
        fn = waveform("bump", {"duration": 1.0},
                      {"dt": 1e-3, "n_steps": 4})
        # sampled start of sin^4 scales like t^4
        for k, sample in enumerate(fn):
            assert sample <= 1.1 * (np.pi * k * 1e-3) ** 4

    def test_bump_zero_amplitude(self):
        fn = waveform("bump", {"amplitude": 0.0}, {"dt": 0.1, "n_steps": 8})
        assert np.all(fn == 0.0)

    def test_point_source_on_unit_sphere(self):
        from tdbem.formulations import CausalBump
        mesh = build_icosphere(1)
        field = waveform("point_source",
                         {"location": [0.0, 0.0, 0.0], "duration": 1.0},
                         {"dt": 0.05, "n_steps": 64})
        t = np.arange(64) * 0.05
        got = field.value(mesh.vertices, t)
        want = CausalBump(1.0)(t - 1.0)[:, None] / (4.0 * np.pi)
        want = np.broadcast_to(want, got.shape)
        assert np.abs(got - want).max() < 1e-12

    def test_ramp_divided_differences_vanish(self):
        dt = 0.01
        f = waveform("ramp", {"duration": 1.0, "amplitude": 2.5},
                     {"dt": dt, "n_steps": 16})
        second_order = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * dt)
        assert abs(second_order) < 1e-8
        assert f[0] == 0.0

    def test_ramp_rises_and_holds(self):
        f = waveform("ramp", {"duration": 1.0}, {"dt": 0.1, "n_steps": 20})
        assert np.all(np.diff(f[:10]) > 0)
        assert np.allclose(f[10:], 1.0)

    def test_unknown_waveform(self):
        with pytest.raises(ValueError, match="wiggle"):
            waveform("wiggle", {}, {"dt": 0.1, "n_steps": 4})


class TestArtifacts:
    def test_csv_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(42)
        table = rng.standard_normal((17, 3)) * 10.0 ** rng.integers(
            -12, 12, size=(17, 3))
        path = str(tmp_path / "table.csv")
        write_csv(path, ["a", "b", "c"], [table[:, i] for i in range(3)])
        names, back = read_csv(path)
        assert names == ["a", "b", "c"]
        assert np.array_equal(back, table)

    def test_signal_csv_header_and_roundtrip(self, tmp_path):
        t = np.arange(5) * 0.25
        values = np.sin(np.outer(t, [1.0, 2.0]))
        path = str(tmp_path / "signal.csv")
        write_signal_csv(path, t, values)
        with open(path, encoding="utf-8") as fh:
            assert fh.readline().strip() == "t,comp0,comp1"
        t2, v2 = read_signal_csv(path)
        assert np.array_equal(t2, t) and np.array_equal(v2, values)

    def test_matrix_dump_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        mat = rng.standard_normal((4, 6)) + 1j * rng.standard_normal((4, 6))
        path = str(tmp_path / "mat.txt")
        write_matrix(path, mat)
        with open(path, encoding="utf-8") as fh:
            assert fh.readline() == "tdbem-matrix 1\n"
            assert fh.readline() == "4 6\n"
        assert np.array_equal(read_matrix(path), mat)

    def test_matrix_dump_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("not-a-matrix\n1 1\n0 0\n")
        with pytest.raises(ValueError, match="matrix dump"):
            read_matrix(str(path))

    def test_nonfinite_reports_stay_valid_json(self, tmp_path):
        from tdbem.runner import write_report
        path = str(tmp_path / "report.json")
        write_report(path, {"good": 1.0, "bad": float("inf"),
                            "worse": float("nan")})
        with open(path, encoding="utf-8") as fh:
            back = json.loads(fh.read(), parse_constant=lambda s: 1 / 0)
        assert back["good"] == 1.0
        assert back["bad"] is None and back["worse"] is None


class TestSolveScenario:
    def test_minimal_artifacts(self, tmp_path):
        path = minimal_solve(tmp_path,
                             observation_points=[[2.0, 0.0, 0.0]])
        report, artifacts = run_scenario("solve", load_config(path), path)
        names = [a.rsplit("/", 1)[-1] for a in artifacts]
        assert names == ["densities.csv", "field.csv", "report.json"]
        t, dens = read_signal_csv(artifacts[0])
        assert dens.shape == (32, 80)
        assert np.all(dens[0] == 0.0)
        assert report["sphere_oracle_error"] < 0.2

    def test_point_source_field_error_key(self, tmp_path):
        path = minimal_solve(
            tmp_path, formulation="direct_dirichlet", n_steps=48,
            dirichlet_waveform="point_source",
            source_location=[0.0, 0.0, 0.0], source_duration=1.0,
            observation_points=[[2.0, 0.0, 0.0]], sphere_oracle=False)
        report, _ = run_scenario("solve", load_config(path), path)
        assert 0.0 < report["field_error"] < 1.0

    def test_compare_needs_observation_points(self, tmp_path):
        path = minimal_solve(tmp_path, compare="direct_dirichlet")
        with pytest.raises(ConfigError, match="observation_points"):
            run_scenario("solve", load_config(path), path)

    def test_screen_solve(self, tmp_path):
        path = write_config(tmp_path / "screen.json",
                            formulation="screen_dirichlet", mesh="screen",
                            mesh_cells=3, n_steps=16, dt=0.1,
                            sphere_oracle=False, out=str(tmp_path / "out"))
        report, _ = run_scenario("solve", load_config(path), path)
        assert report["n_trace_dofs"] == 0
        assert "sphere_oracle_error" not in report


class TestReportCompleteness:
    """Each acceptance property has a named home in some report."""

    def test_solve_report_keys(self, tmp_path):
        path = minimal_solve(
            tmp_path, formulation="direct_dirichlet", mesh_level=0,
            n_steps=40, dirichlet_waveform="point_source",
            source_location=[0.0, 0.0, 0.0], source_duration=1.0,
            observation_points=[[2.0, 0.0, 0.0]],
            compare="indirect_dirichlet", shift_check=True,
            stability_horizon=4.0)
        report, _ = run_scenario("solve", load_config(path), path)
        for key in ("sphere_oracle_error", "field_error",
                    "formulation_agreement", "shift_equivalence_gap",
                    "envelope_constant", "exponential_flag"):
            assert key in report, key
        assert report["exponential_flag"] is False
        assert report["shift_equivalence_gap"] < 1e-8

    def test_error_study_report_keys(self, tmp_path):
        path = write_config(
            tmp_path / "study.json", formulation="direct_dirichlet",
            mesh_levels=[0, 1], dt=0.1, n_steps=24,
            source_location=[0.0, 0.0, 0.0], source_duration=1.0,
            source_delay=0.2, out=str(tmp_path / "out"))
        report, artifacts = run_scenario("error-study", load_config(path),
                                         path)
        for key in ("density_errors", "density_monotone", "majorants",
                    "ratio_spread", "calderon_residuals",
                    "calderon_monotone", "cq_order_bdf1", "cq_order_bdf2",
                    "cq_order_trapezoidal"):
            assert key in report, key
        names, table = read_csv(artifacts[0])
        assert "density_error" in names and table.shape[0] == 2

    def test_check_hypotheses_report_keys(self, tmp_path):
        path = write_config(tmp_path / "hyp.json", system_size=8,
                            t_final=1.0, dt=0.02, seed=2,
                            isometry_t_final=2.0, isometry_dt=0.001,
                            out=str(tmp_path / "out"))
        report, artifacts = run_scenario("check-hypotheses",
                                         load_config(path), path)
        for key in ("c1_star", "c2_star", "c_lift",
                    "dissipativity_residual", "margin_state_min",
                    "margin_rate_min", "margin_graph_min", "bounds_ok",
                    "isometry_drift", "constraint_residual_max"):
            assert key in report, key
        assert report["bounds_ok"] is True
        assert report["isometry_drift"] < 1e-6
        names, table = read_csv(artifacts[0])
        assert names[0] == "t" and "norm_h" in names
        assert "rhs_state" in names and "rhs_graph" in names

    def test_probe_bounds_report_keys_and_dump(self, tmp_path):
        path = write_config(tmp_path / "probe.json", mesh_level=0,
                            omegas=[1.0, 2.0], dump_matrices=True,
                            out=str(tmp_path / "out"))
        report, artifacts = run_scenario("probe-bounds", load_config(path),
                                         path)
        for key in ("single_layer_growth_exponent",
                    "double_layer_growth_exponent",
                    "hypersingular_growth_exponent"):
            assert key in report, key
        dumps = [a for a in artifacts if "matrix_" in a]
        assert len(dumps) == 6
        mat = read_matrix(dumps[0])
        assert mat.shape == (20, 20)
