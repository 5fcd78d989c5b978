"""Config-driven scenarios with deterministic file artifacts.

A scenario is one flat JSON object naming a formulation or an abstract
system, a mesh, a time scheme, and data waveforms.  The four runners
(solve, error study, hypothesis check, bound probe) orchestrate the
library modules, write CSV/JSON artifacts into the scenario's output
directory, and return a flat report whose keys collect every number a
reviewer would want to look at: field errors, density errors and their
majorant ratios, stability envelopes, bound margins, residuals, and
growth exponents.

Numbers are written with 17 significant digits, so every CSV round
trips bit-exactly through read_csv, and the same config always yields
byte-identical files.  The only randomness (test vectors for the
hypothesis check) flows from the config seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .cq import apply_transfer, method_by_name
from .evolution import builtin_wave_system, check_hypotheses, evolve, \
    verify_bounds
from .formulations import (LABELS, CausalBump, PointSourceField,
                           TransmissionSpec, error_study, make_formulation,
                           solve_formulation, stability_probe)
from .laplace_ops import FrequencyGrid, assemble_operators, bound_probe, \
    energy_norms
from .mesh import build_icosphere, build_screen_square, tag_partition


class ConfigError(Exception):
    """Invalid configuration; the message carries a file anchor."""


_REQUIRED = object()

_REGIONS = {
    "z_positive": lambda c: c[:, 2] > 0.0,
    "z_negative": lambda c: c[:, 2] < 0.0,
    "x_positive": lambda c: c[:, 0] > 0.0,
    "y_positive": lambda c: c[:, 1] > 0.0,
}

# averaged single layer at s = 1 applied to the constant density and
# paired with it, on the unit sphere: closed form by separation of
# variables, 2 pi (1 - e^-2)
SPHERE_CONSTANT_PAIRING = 2.0 * np.pi * (1.0 - np.exp(-2.0))


class _Cfg:
    """One flat JSON object with consumed-key tracking."""

    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.seen = set()

    def take(self, key, default=_REQUIRED, kind=None):
        self.seen.add(key)
        if key not in self.data:
            if default is _REQUIRED:
                raise ConfigError(f"{self.path}: missing required key "
                                  f"{key!r}")
            return default
        return self._coerce(key, self.data[key], kind)

    def _coerce(self, key, val, kind):
        anchor = f"{self.path}: key {key!r}"
        if kind == "int":
            if not isinstance(val, int) or isinstance(val, bool):
                raise ConfigError(f"{anchor}: expected an integer")
            return val
        if kind == "float":
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"{anchor}: expected a number")
            return float(val)
        if kind == "str":
            if not isinstance(val, str):
                raise ConfigError(f"{anchor}: expected a string")
            return val
        if kind == "bool":
            if not isinstance(val, bool):
                raise ConfigError(f"{anchor}: expected true or false")
            return val
        if kind == "floats":
            if (not isinstance(val, list) or not val
                    or not all(isinstance(x, (int, float))
                               and not isinstance(x, bool) for x in val)):
                raise ConfigError(f"{anchor}: expected a list of numbers")
            return [float(x) for x in val]
        if kind == "ints":
            if (not isinstance(val, list) or not val
                    or not all(isinstance(x, int) and not isinstance(x, bool)
                               for x in val)):
                raise ConfigError(f"{anchor}: expected a list of integers")
            return list(val)
        if kind == "points":
            try:
                pts = np.asarray(val, dtype=np.float64)
            except (TypeError, ValueError):
                pts = None
            if pts is None or pts.ndim != 2 or pts.shape[1] != 3 or not len(pts):
                raise ConfigError(f"{anchor}: expected a list of "
                                  "[x, y, z] points")
            return pts
        return val

    def finish(self):
        extra = sorted(set(self.data) - self.seen)
        if extra:
            raise ConfigError(f"{self.path}: unknown key {extra[0]!r}")


def load_config(path):
    """Parse one flat JSON config; errors point at file and line."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: the top level must be an object")
    return data


# -- waveforms ---------------------------------------------------------


@dataclass(frozen=True)
class _Scaled:
    """Amplitude-scaled signal keeping the derivative protocol."""

    base: object
    factor: float

    def __call__(self, t):
        return self.factor * self.base(t)

    def derivative(self, t):
        return self.factor * self.base.derivative(t)


class _Ramp:
    """C^1 quadratic ramp rising over [delay, delay + duration], flat after.

    The first half is exactly 2 tau^2, so the one-sided second order
    divided difference of the leading samples vanishes to rounding as
    long as two steps fit into the quadratic segment.
    """

    def __init__(self, duration=1.0, delay=0.0):
        if not duration > 0:
            raise ValueError("duration must be positive")
        self.duration = duration
        self.delay = delay

    def __call__(self, t):
        tau = (np.asarray(t, dtype=np.float64) - self.delay) / self.duration
        tau = np.clip(tau, 0.0, 1.0)
        lower = 2.0 * tau * tau
        upper = 1.0 - 2.0 * (1.0 - tau) ** 2
        return np.where(tau <= 0.5, lower, upper)

    def derivative(self, t):
        tau = (np.asarray(t, dtype=np.float64) - self.delay) / self.duration
        inside = (tau > 0.0) & (tau < 1.0)
        tau = np.clip(tau, 0.0, 1.0)
        slope = np.where(tau <= 0.5, 4.0 * tau, 4.0 * (1.0 - tau))
        return np.where(inside, slope / self.duration, 0.0)


def _waveform_callable(name, params):
    amplitude = params.get("amplitude", 1.0)
    duration = params.get("duration", 1.0)
    delay = params.get("delay", 0.0)
    if name == "bump":
        return _Scaled(CausalBump(duration, delay), amplitude)
    if name == "ramp":
        return _Scaled(_Ramp(duration, delay), amplitude)
    if name == "point_source":
        location = np.asarray(params["location"], dtype=np.float64)
        if location.shape != (3,):
            raise ValueError("point_source needs a 3d location")
        return PointSourceField(tuple(location),
                                _Scaled(CausalBump(duration, delay),
                                        amplitude))
    raise ValueError(f"unknown waveform {name!r}")


def waveform(name, params, scheme):
    """Samples of a named causal waveform on the scheme's time grid.

    `params` carries amplitude/duration/delay (plus location for the
    point source); `scheme` needs dt and n_steps.  Scalar waveforms
    return the (n_steps,) sample array; "point_source" returns the
    traveling spherical field, which is sampled in space downstream.
    """
    fn = _waveform_callable(name, params)
    if isinstance(fn, PointSourceField):
        return fn
    dt, n = scheme["dt"], scheme["n_steps"]
    return fn(np.arange(n) * dt)


# -- artifacts ---------------------------------------------------------


def _fmt(x):
    return f"{float(x):.17g}"


def write_csv(path, header, columns):
    """One header line, then rows of 17-significant-digit numbers."""
    columns = [np.asarray(col, dtype=np.float64) for col in columns]
    rows = len(columns[0])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(rows):
            fh.write(",".join(_fmt(col[i]) for col in columns) + "\n")


def read_csv(path):
    """Inverse of write_csv: (header list, (rows, cols) float array)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        table = [[float(cell) for cell in line.rstrip("\n").split(",")]
                 for line in fh if line.strip()]
    return header, np.asarray(table, dtype=np.float64).reshape(-1, len(header))


def write_signal_csv(path, t, values):
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[0] != len(t):
        values = values.T
    header = ["t"] + [f"comp{i}" for i in range(values.shape[1])]
    write_csv(path, header, [t] + [values[:, i]
                                   for i in range(values.shape[1])])


def read_signal_csv(path):
    _, table = read_csv(path)
    return table[:, 0], table[:, 1:]


def write_matrix(path, matrix):
    """ASCII dump for offline comparison: header, dims, `re im` rows."""
    matrix = np.atleast_2d(np.asarray(matrix))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("tdbem-matrix 1\n")
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for row in matrix:
            for entry in row:
                z = complex(entry)
                fh.write(f"{_fmt(z.real)} {_fmt(z.imag)}\n")


def read_matrix(path):
    with open(path, encoding="utf-8") as fh:
        magic = fh.readline().strip()
        if magic != "tdbem-matrix 1":
            raise ValueError(f"{path}: not a matrix dump")
        rows, cols = map(int, fh.readline().split())
        flat = np.array([complex(float(a), float(b))
                         for a, b in (line.split() for line in fh
                                      if line.strip())])
    if flat.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} entries, "
                         f"found {flat.size}")
    return flat.reshape(rows, cols)


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        # strict JSON has no Infinity/NaN tokens
        val = float(value)
        return val if np.isfinite(val) else None
    if isinstance(value, complex):
        return [value.real, value.imag]
    return value


def write_report(path, report):
    """Write the report as sorted JSON; returns the sanitized dict."""
    clean = _jsonable(report)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(clean, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return clean


def _out_dir(cfg, out_dir, command):
    configured = cfg.take("out", f"runs/{command}", "str")
    out = out_dir or configured
    os.makedirs(out, exist_ok=True)
    return out


# -- shared pieces -----------------------------------------------------


def _build_mesh(cfg):
    kind = cfg.take("mesh", "icosphere", "str")
    if kind == "icosphere":
        level = cfg.take("mesh_level", 1, "int")
        radius = cfg.take("radius", 1.0, "float")
        return build_icosphere(level, radius)
    if kind == "screen":
        cells = cfg.take("mesh_cells", 4, "int")
        side = cfg.take("side", 1.0, "float")
        return build_screen_square(cells, side)
    raise ConfigError(f"{cfg.path}: key 'mesh': unknown mesh kind {kind!r}")


def _scheme(cfg):
    method = cfg.take("method", "bdf2", "str")
    try:
        method_by_name(method)
    except (KeyError, ValueError):
        raise ConfigError(f"{cfg.path}: key 'method': unknown method "
                          f"{method!r}") from None
    n_steps = cfg.take("n_steps", kind="int")
    dt = cfg.take("dt", kind="float")
    if n_steps < 3 or dt <= 0:
        raise ConfigError(f"{cfg.path}: need n_steps >= 3 and dt > 0")
    horizon = cfg.take("horizon", None, "float")
    if horizon is not None and abs(horizon - n_steps * dt) > 1e-9 * horizon:
        raise ConfigError(f"{cfg.path}: key 'horizon': {horizon} does not "
                          f"equal n_steps * dt = {n_steps * dt}")
    return method, n_steps, dt


def _family_waveform(cfg, family, default_name):
    """Data callable for one boundary family from prefixed flat keys."""
    name = cfg.take(f"{family}_waveform", default_name, "str")
    if name in (None, "none"):
        return None, 0.0
    params = {
        "amplitude": cfg.take(f"{family}_amplitude", 1.0, "float"),
        "duration": cfg.take(f"{family}_duration", 1.0, "float"),
        "delay": cfg.take(f"{family}_delay", 0.0, "float"),
    }
    if name == "point_source":
        params = {
            "amplitude": cfg.take("source_amplitude", 1.0, "float"),
            "duration": cfg.take("source_duration", 1.0, "float"),
            "delay": cfg.take("source_delay", 0.0, "float"),
            "location": cfg.take("source_location", kind="floats"),
        }
    try:
        fn = _waveform_callable(name, params)
    except ValueError as exc:
        raise ConfigError(f"{cfg.path}: key '{family}_waveform': "
                          f"{exc}") from None
    return fn, params["duration"] + params["delay"]


def _family_data(fn, mesh, family):
    """make_formulation callable for a waveform: uniform profile for
    scalar signals, exact traces for the spherical field."""
    if fn is None:
        return None
    if isinstance(fn, PointSourceField):
        if family == "dirichlet":
            return lambda pts, t: fn.value(pts, t)
        # neumann callables are evaluated at the centroids in mesh order
        normals = mesh.normals
        return lambda pts, t: fn.normal_flux(pts, normals, t)
    return lambda pts, t: np.full(len(pts), fn(t))


def _source_field(cfg):
    location = cfg.take("source_location", kind="floats")
    params = {
        "amplitude": cfg.take("source_amplitude", 1.0, "float"),
        "duration": cfg.take("source_duration", 1.0, "float"),
        "delay": cfg.take("source_delay", 0.0, "float"),
        "location": location,
    }
    return _waveform_callable("point_source", params)


def _relative_l2(got, want, dt):
    num = np.sqrt(np.sum((got - want) ** 2) * dt)
    den = np.sqrt(np.sum(want**2) * dt)
    return float(num / den) if den > 0 else float(num)


# -- solve -------------------------------------------------------------


def _solve_label(cfg, label, mesh, method, n_steps, dt):
    if label not in LABELS or label == "custom":
        raise ConfigError(f"{cfg.path}: key 'formulation': unknown label "
                          f"{label!r}")
    need_d = "dirichlet" in label or label == "mixed"
    need_n = "neumann" in label or label == "mixed"
    kwargs = {"dt": dt, "n_steps": n_steps}
    data = {}
    durations = [0.0]
    source = None
    if need_d:
        fn, dur = _family_waveform(cfg, "dirichlet", "bump")
        if fn is None:
            raise ConfigError(f"{cfg.path}: {label} needs dirichlet data")
        if isinstance(fn, PointSourceField):
            source = fn
        data["dirichlet"] = _family_data(fn, mesh, "dirichlet")
        durations.append(dur)
    if need_n:
        fn, dur = _family_waveform(cfg, "neumann", "bump")
        if fn is None:
            raise ConfigError(f"{cfg.path}: {label} needs neumann data")
        if isinstance(fn, PointSourceField):
            source = fn
        data["neumann"] = _family_data(fn, mesh, "neumann")
        durations.append(dur)
    if label == "mixed":
        region = cfg.take("dirichlet_region", "z_positive", "str")
        if region not in _REGIONS:
            raise ConfigError(f"{cfg.path}: key 'dirichlet_region': unknown "
                              f"region {region!r}")
        mesh = tag_partition(mesh, _REGIONS[region])
        data["dirichlet_tags"] = [1]
    try:
        spec = make_formulation(label, mesh, **kwargs, **data)
    except ValueError as exc:
        raise ConfigError(f"{cfg.path}: {exc}") from None
    return spec, source, max(durations), data


def run_solve(data, path, out_dir=None):
    """Solve one formulation scenario and write its artifacts.

    Always writes densities.csv and report.json; field.csv appears when
    observation points are configured.  Optional report blocks: exact
    field error against a point-source reference, agreement with a
    second formulation sharing the data, the static sphere pairing
    oracle, equivalence under projecting redundant data slots out, and
    a long-horizon stability probe.
    """
    cfg = _Cfg(data, path)
    label = cfg.take("formulation", kind="str")
    mesh = _build_mesh(cfg)
    method, n_steps, dt = _scheme(cfg)
    seed = cfg.take("seed", 0, "int")
    obs = cfg.take("observation_points", None, "points")
    compare = cfg.take("compare", None, "str")
    check_res = cfg.take("check_residuals", False, "bool")
    want_oracle = cfg.take("sphere_oracle", True, "bool")
    want_shift = cfg.take("shift_check", False, "bool")
    stability_factor = cfg.take("stability_horizon", None, "float")
    out = _out_dir(cfg, out_dir, "solve")

    spec, source, duration, probe_data = _solve_label(cfg, label, mesh,
                                                      method, n_steps, dt)
    if compare is not None and obs is None:
        raise ConfigError(f"{cfg.path}: key 'compare': needs "
                          "observation_points to measure agreement")
    cfg.finish()

    result = solve_formulation(spec, method, observe=obs,
                               check_residuals=check_res,
                               keep_weights=compare is not None)
    report = {
        "formulation": label,
        "method": method,
        "n_steps": n_steps,
        "dt": dt,
        "mesh_triangles": len(spec.mesh.triangles),
        "mesh_vertices": len(spec.mesh.vertices),
        "n_flux_dofs": spec.flux_space.n_dofs,
        "n_trace_dofs": spec.trace_space.n_dofs,
        "seed": seed,
        "density_sup": float(max(np.abs(result.lambda_h).max(initial=0.0),
                                 np.abs(result.phi_h).max(initial=0.0))),
    }
    if check_res and result.residuals is not None:
        report["solve_residual_sup"] = float(result.residuals.max())

    artifacts = []
    dens = np.hstack([result.lambda_h, result.phi_h])
    dens_path = os.path.join(out, "densities.csv")
    write_signal_csv(dens_path, result.t, dens)
    artifacts.append(dens_path)

    if obs is not None:
        field_path = os.path.join(out, "field.csv")
        write_signal_csv(field_path, result.t, result.fields)
        artifacts.append(field_path)
        if source is not None:
            want = source.value(obs, spec.times)
            report["field_error"] = _relative_l2(result.fields, want, dt)

    if compare is not None:
        spec2, source2, _, _ = _solve_label(cfg, compare, mesh, method,
                                            n_steps, dt)
        try:
            result2 = solve_formulation(spec2, method, observe=obs,
                                        reuse=result)
        except ValueError:
            result2 = solve_formulation(spec2, method, observe=obs)
        scale = np.sqrt(np.sum(result.fields**2) * dt)
        gap = np.sqrt(np.sum((result2.fields - result.fields) ** 2) * dt)
        report["formulation_agreement"] = float(gap / scale)
        if source2 is not None:
            want = source2.value(obs, spec.times)
            report["compare_field_error"] = _relative_l2(result2.fields,
                                                         want, dt)
        cmp_path = os.path.join(out, "densities_compare.csv")
        write_signal_csv(cmp_path, result2.t,
                         np.hstack([result2.lambda_h, result2.phi_h]))
        artifacts.append(cmp_path)

    if want_oracle and mesh.closed and abs(mesh.vertices[0] @ mesh.vertices[0]
                                           - 1.0) < 1e-9:
        v1 = assemble_operators(spec.mesh, 1.0, which="v")["v"]
        ones = np.ones(len(spec.mesh.triangles))
        got = float(ones @ v1 @ ones)
        report["sphere_oracle_value"] = got
        report["sphere_oracle_error"] = abs(got - SPHERE_CONSTANT_PAIRING) \
            / SPHERE_CONSTANT_PAIRING

    if want_shift:
        report["shift_equivalence_gap"] = _shift_gap(spec, method)

    if stability_factor is not None:
        probe = stability_probe(label, spec.mesh, dt=dt, duration=duration,
                                horizon=stability_factor, method=method,
                                **probe_data)
        report["envelope_constant"] = probe["envelope_constant"]
        report["exponential_flag"] = probe["exponential"]
        report["tail_growth_rate"] = probe["growth_rate"]
        report["tail_max"] = probe["tail_max"]

    report_path = os.path.join(out, "report.json")
    report = write_report(report_path, report)
    artifacts.append(report_path)
    return report, artifacts


def _shift_gap(spec, method):
    """Re-solve with the resolvable parts of the jump data projected
    out; the total jump densities must not change, since the discrete
    unknowns absorb exactly the removed parts.  Both runs share a
    tightened contour: the gap sits on the quadrature aliasing floor
    (about sqrt(eps) of the data), so the default contour would bury
    the property under its own noise.
    """
    xs, ys = spec.flux_space, spec.trace_space
    a2 = spec.alpha2 - ys.extend(ys.restrict(spec.alpha2))
    b2 = spec.beta2 - xs.extend(xs.restrict(spec.beta2))
    shifted = TransmissionSpec(spec.label, xs, ys, spec.alpha1, a2,
                               spec.beta1, b2, spec.dt)
    base = solve_formulation(spec, method, eps=1e-16)
    other = solve_formulation(shifted, method, eps=1e-16)
    scale = max(np.abs(base.flux_jump).max(initial=0.0),
                np.abs(base.trace_jump).max(initial=0.0), 1e-300)
    gap = max(np.abs(other.flux_jump - base.flux_jump).max(initial=0.0),
              np.abs(other.trace_jump - base.trace_jump).max(initial=0.0))
    return float(gap / scale)


# -- error study -------------------------------------------------------


def _integrated_bump(t, duration):
    """Closed-form antiderivative of the sin^4 window."""
    tau = np.clip(np.asarray(t, dtype=np.float64) / duration, 0.0, 1.0)
    inner = (3.0 * tau / 8.0 - np.sin(2.0 * np.pi * tau) / (4.0 * np.pi)
             + np.sin(4.0 * np.pi * tau) / (32.0 * np.pi))
    return duration * inner


def cq_order_study(dt0=0.1, levels=4, t_final=3.0, eps=None):
    """Observed orders of the three schemes on the running integral.

    The transfer 1/s integrates; against the closed-form integral of a
    smooth window the maximal error over time recovers the classical
    orders 1, 2, 2 on a dt-halving ladder.
    """
    bump = CausalBump(1.0)
    out = {}
    for method in ("bdf1", "bdf2", "trapezoidal"):
        errs, dts = [], []
        for k in range(levels):
            dt = dt0 / 2**k
            t = np.arange(int(round(t_final / dt))) * dt
            kwargs = {} if eps is None else {"eps": eps}
            got = apply_transfer(lambda s: 1.0 / s, bump(t), method, dt,
                                 **kwargs)
            errs.append(np.abs(got - _integrated_bump(t, 1.0)).max())
            dts.append(dt)
        out[method] = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    return out


def _static_source_traces(mesh, s, center):
    """Vertex trace and centroid normal flux of e^{-s r} / (4 pi r)."""
    center = np.asarray(center, dtype=np.float64)
    dv = mesh.vertices - center
    rv = np.linalg.norm(dv, axis=1)
    phi = np.exp(-s * rv) / (4.0 * np.pi * rv)
    dc = mesh.centroids - center
    rc = np.linalg.norm(dc, axis=1)
    along = np.einsum("pc,pc->p", dc, mesh.normals) / rc
    lam = -(s / rc + 1.0 / rc**2) * np.exp(-s * rc) / (4.0 * np.pi) * along
    return phi, lam


def calderon_residual(mesh, s, center, config=None):
    """Energy-norm residuals of the two jump identities for the exact
    exterior traces of a point source inside the surface."""
    from .spaces import build_space, duality_matrix

    ops = assemble_operators(mesh, s, config, which="vkw")
    m01 = duality_matrix(build_space(mesh, "p0"), build_space(mesh, "p1"))
    phi, lam = _static_source_traces(mesh, s, center)
    en_v, en_w = energy_norms(mesh, config=config)
    cv, cw = cho_factor(en_v.gram), cho_factor(en_w.gram)

    def dual_norm(r, factor):
        return float(np.sqrt(max(r @ cho_solve(factor, r), 0.0)))

    r1 = ops["v"] @ lam - ops["k"] @ phi + 0.5 * m01 @ phi
    r2 = ops["w"] @ phi + ops["k"].T @ lam + 0.5 * m01.T @ lam
    d1 = m01 @ phi
    d2 = m01.T @ lam
    return {"flux_row": dual_norm(r1, cv) / dual_norm(d1, cv),
            "trace_row": dual_norm(r2, cw) / dual_norm(d2, cw)}


def run_error_study(data, path, out_dir=None):
    """Refinement ladder against a manufactured point source.

    Per level: worst-step density error in the energy norm, the
    quadrature majorant from a refined mesh (when requested), field
    errors at the observation points, and the static jump-identity
    residuals.  A scheme-order block measures the three time schemes
    on the smooth-data integral.
    """
    cfg = _Cfg(data, path)
    label = cfg.take("formulation", kind="str")
    if label not in LABELS or label == "custom":
        raise ConfigError(f"{cfg.path}: key 'formulation': unknown label "
                          f"{label!r}")
    levels = cfg.take("mesh_levels", [0, 1, 2], "ints")
    radius = cfg.take("radius", 1.0, "float")
    method = cfg.take("method", "bdf2", "str")
    dts = cfg.take("dts", None, "floats")
    if dts is None:
        dts = [cfg.take("dt", kind="float")] * len(levels)
    ns = cfg.take("n_steps_list", None, "ints")
    if ns is None:
        ns = [cfg.take("n_steps", kind="int")] * len(levels)
    if len(dts) != len(levels) or len(ns) != len(levels):
        raise ConfigError(f"{cfg.path}: mesh_levels, dts and n_steps_list "
                          "must have equal lengths")
    want_majorant = cfg.take("majorant", True, "bool")
    want_calderon = cfg.take("calderon", True, "bool")
    calderon_s = cfg.take("calderon_s", 2.0, "float")
    want_cq = cfg.take("cq_orders", True, "bool")
    obs = cfg.take("observation_points", None, "points")
    source = _source_field(cfg)
    out = _out_dir(cfg, out_dir, "error-study")
    cfg.take("seed", 0, "int")
    cfg.finish()

    meshes = {}

    def mesh_at(level):
        if level not in meshes:
            meshes[level] = build_icosphere(level, radius)
        return meshes[level]

    ladder = []
    for level, dt, n in zip(levels, dts, ns):
        entry = {"mesh": mesh_at(level), "dt": dt, "n_steps": n}
        if want_majorant:
            entry["fine_mesh"] = mesh_at(level + 1)
        ladder.append(entry)

    study = error_study(label, ladder, source=source, method=method,
                        observe=obs)
    report = {
        "formulation": label,
        "method": method,
        "mesh_levels": levels,
        "density_errors": [row.get("density_error") for row in
                           study["levels"]],
        "density_monotone": study.get("monotone"),
    }
    if want_majorant:
        report["majorants"] = [row.get("majorant") for row in
                               study["levels"]]
        report["deficit_ratios"] = [row.get("ratio") for row in
                                    study["levels"]]
        report["ratio_spread"] = study.get("ratio_spread")
    if obs is not None:
        report["field_errors"] = [row.get("field_error") for row in
                                  study["levels"]]

    if want_calderon:
        center = np.asarray(source.center, dtype=np.float64)
        residuals = [calderon_residual(mesh_at(level), calderon_s, center)
                     for level in levels]
        report["calderon_residuals"] = [r["flux_row"] for r in residuals]
        report["calderon_trace_residuals"] = [r["trace_row"]
                                              for r in residuals]
        vals = report["calderon_residuals"]
        report["calderon_monotone"] = all(a > b for a, b in
                                          zip(vals, vals[1:]))

    if want_cq:
        orders = cq_order_study()
        for name, slope in orders.items():
            report[f"cq_order_{name}"] = -slope if slope < 0 else slope

    rows = study["levels"]
    cols = {
        "level": np.asarray(levels, dtype=np.float64),
        "h_max": [row["h_max"] for row in rows],
        "dt": [row["dt"] for row in rows],
        "density_error": [row.get("density_error", np.nan) for row in rows],
        "majorant": [row.get("majorant", np.nan) for row in rows],
        "ratio": [row.get("ratio", np.nan) for row in rows],
        "field_error": [row.get("field_error", np.nan) for row in rows],
    }
    errors_path = os.path.join(out, "errors.csv")
    write_csv(errors_path, list(cols), list(cols.values()))
    report_path = os.path.join(out, "report.json")
    report = write_report(report_path, report)
    return report, [errors_path, report_path]


# -- hypothesis check --------------------------------------------------


def _random_wave_data(system, seed):
    """Seeded compatible data on the builtin system: a few smooth space
    profiles under bump time windows, all vanishing to second order."""
    rng = np.random.default_rng(seed)
    n = system.dim // 2
    x = np.linspace(0.0, 1.0, n + 1)
    profiles = [np.sin((k + 1) * np.pi * x) for k in range(3)]
    amps_f = rng.normal(size=3)
    amps_xi = rng.normal(size=(2, 2))
    durations = rng.uniform(0.5, 1.0, size=4)
    bumps = [CausalBump(d) for d in durations]

    def f(t):
        out = np.zeros(system.dim)
        for a, p, b in zip(amps_f, profiles, bumps[:3]):
            out[:n + 1] += a * p * b(t)
        return out

    def xi(t):
        b0 = bumps[3](t)
        b1 = CausalBump(durations[0], 0.2)(t)
        return np.array([0.0,
                         amps_xi[0, 0] * b0 + amps_xi[0, 1] * b1,
                         amps_xi[1, 0] * b0 + amps_xi[1, 1] * b1])

    return f, xi


def run_check_hypotheses(data, path, out_dir=None):
    """Verify the abstract hypotheses and exercise the bounds.

    Writes the hypothesis report (constants, residuals, margins) and
    the driven trajectory with its per-step norm and bound right-hand
    sides.  A separate data-free run from a smooth admissible state
    measures the isometry drift of the flow.
    """
    cfg = _Cfg(data, path)
    system_kind = cfg.take("system", "wave", "str")
    if system_kind != "wave":
        raise ConfigError(f"{cfg.path}: key 'system': unknown system "
                          f"{system_kind!r}")
    n = cfg.take("system_size", 16, "int")
    t_final = cfg.take("t_final", 3.0, "float")
    dt = cfg.take("dt", 0.01, "float")
    integrator = cfg.take("integrator", "rk4", "str")
    data_kind = cfg.take("data", "random", "str")
    seed = cfg.take("seed", 0, "int")
    iso_t = cfg.take("isometry_t_final", 10.0, "float")
    iso_dt = cfg.take("isometry_dt", 1e-3, "float")
    out = _out_dir(cfg, out_dir, "check-hypotheses")
    cfg.finish()

    try:
        system = builtin_wave_system(n)
    except ValueError as exc:
        raise ConfigError(f"{cfg.path}: key 'system_size': {exc}") from None
    hypotheses = check_hypotheses(system)
    if hypotheses["failures"]:
        raise RuntimeError("hypothesis check failed: "
                           + ", ".join(hypotheses["failures"]))

    report = {k: v for k, v in hypotheses.items() if k != "failures"}
    report.update({"system": system_kind, "system_size": n, "seed": seed,
                   "integrator": integrator})

    artifacts = []
    if data_kind not in ("random", "none"):
        raise ConfigError(f"{cfg.path}: key 'data': unknown kind "
                          f"{data_kind!r}")
    f, xi = (None, None) if data_kind == "none" else \
        _random_wave_data(system, seed)
    trajectory = evolve(system, f, xi, t_final=t_final, dt=dt,
                        integrator=integrator)
    bounds = verify_bounds(system, trajectory, hypotheses)
    report.update({
        "margin_state_min": bounds["min_state"],
        "margin_rate_min": bounds["min_rate"],
        "margin_graph_min": bounds["min_graph"],
        "bounds_ok": bounds["ok"],
        "envelope_margin_min": float(bounds["margin_envelope"].min()),
        "constraint_residual_max": bounds["constraint_residual_max"],
    })

    norm_h = system.norm_h(trajectory.u)
    rhs_state = bounds["margin_state"] + norm_h
    rhs_rate = bounds["margin_rate"] + system.norm_h(trajectory.du)
    rhs_graph = (bounds["margin_graph"]
                 + hypotheses["c1_star"] * system.norm_v(trajectory.u))
    header = (["t"] + [f"comp{i}" for i in range(system.dim)]
              + ["norm_h", "rhs_state", "rhs_rate", "rhs_graph"])
    columns = ([trajectory.t]
               + [trajectory.u[:, i] for i in range(system.dim)]
               + [norm_h, rhs_state, rhs_rate, rhs_graph])
    traj_path = os.path.join(out, "trajectory.csv")
    write_csv(traj_path, header, columns)
    artifacts.append(traj_path)

    x = np.linspace(0.0, 1.0, n + 1)
    xm = (x[:-1] + x[1:]) / 2.0
    state = np.concatenate([np.sin(np.pi * x), 0.5 * np.sin(np.pi * xm)**2])
    free = evolve(system, None, None, t_final=iso_t, dt=iso_dt,
                  initial=state)
    norms = system.norm_h(free.u)
    report["isometry_drift"] = float((norms.max() - norms.min())
                                     / norms.max())

    report_path = os.path.join(out, "report.json")
    report = write_report(report_path, report)
    artifacts.append(report_path)
    return report, artifacts


# -- bound probe -------------------------------------------------------


def run_probe_bounds(data, path, out_dir=None):
    """Operator norms along a frequency abscissa and their growth fits.

    Writes norms.csv with one row per frequency and a report with the
    fitted exponents; optionally dumps the assembled operator matrices
    in the ASCII exchange format for offline comparison.
    """
    cfg = _Cfg(data, path)
    level = cfg.take("mesh_level", 1, "int")
    radius = cfg.take("radius", 1.0, "float")
    sigma = cfg.take("sigma", 1.0, "float")
    omegas = cfg.take("omegas", [1.0, 2.0, 4.0, 8.0, 16.0], "floats")
    dump = cfg.take("dump_matrices", False, "bool")
    out = _out_dir(cfg, out_dir, "probe-bounds")
    cfg.take("seed", 0, "int")
    cfg.finish()

    mesh = build_icosphere(level, radius)
    grid = FrequencyGrid(sigma, tuple(omegas))
    probe = bound_probe(mesh, grid)
    report = {
        "mesh_level": level,
        "sigma": sigma,
        "omegas": omegas,
        "single_layer_growth_exponent": probe["slope_v"],
        "double_layer_growth_exponent": probe["slope_k"],
        "hypersingular_growth_exponent": probe["slope_w"],
        "single_layer_norms": probe["norms"]["v"],
        "double_layer_norms": probe["norms"]["k"],
        "hypersingular_norms": probe["norms"]["w"],
    }

    artifacts = []
    norms_path = os.path.join(out, "norms.csv")
    write_csv(norms_path, ["omega", "norm_v", "norm_k", "norm_w"],
              [np.asarray(omegas), probe["norms"]["v"], probe["norms"]["k"],
               probe["norms"]["w"]])
    artifacts.append(norms_path)

    if dump:
        for i, s in enumerate(grid.s_values):
            ops = assemble_operators(mesh, s, which="vkw")
            for kind in ("v", "k", "w"):
                dump_path = os.path.join(out, f"matrix_{kind}_{i}.txt")
                write_matrix(dump_path, ops[kind])
                artifacts.append(dump_path)

    report_path = os.path.join(out, "report.json")
    report = write_report(report_path, report)
    artifacts.append(report_path)
    return report, artifacts


_COMMANDS = {
    "solve": run_solve,
    "error-study": run_error_study,
    "check-hypotheses": run_check_hypotheses,
    "probe-bounds": run_probe_bounds,
}


def run_scenario(command, data, path, out_dir=None):
    """Dispatch one scenario; returns (report, artifact paths)."""
    if command not in _COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    return _COMMANDS[command](data, path, out_dir)
