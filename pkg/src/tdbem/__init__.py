"""Time-domain Galerkin boundary elements for the acoustic wave equation.

The package is organized around five layers:

* `mesh` / `spaces`: triangulated surfaces and the piecewise-constant /
  continuous piecewise-linear trace spaces on them, with energy norms.
* `quadrature` / `laplace_ops`: Galerkin assembly of the Laplace-domain
  boundary operators (single layer, double layer and its transpose,
  hypersingular) plus layer potentials, with singularity-adapted rules.
* `cq`: multistep convolution quadrature in time -- weights, forward
  convolution, and marching solution of convolution systems.
* `formulations`: a factory turning boundary-condition recipes into
  space-time Galerkin systems, plus field reconstruction, error studies,
  and long-time stability probes.
* `evolution`: a finite-dimensional evolution framework with checkable
  structural hypotheses and a-priori energy bounds.

`runner` and `cli` wire these into config-driven scenarios.
"""

import os as _os

# honored only before numpy first loads, so it must run here
_threads = _os.environ.get("TDBEM_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .cq import (EPS_DOUBLE, EPS_SINGLE, apply_transfer, method_by_name,
                 operator_weights)
from .evolution import (AbstractSystem, Trajectory, builtin_wave_system,
                        check_hypotheses, evolve, lift, verify_bounds)
from .formulations import (CausalBump, PointSourceField, TransmissionSpec,
                           error_study, make_formulation, reconstruct_field,
                           solve_formulation, stability_probe)
from .laplace_ops import (AssemblyConfig, FrequencyGrid, OperatorCache,
                          assemble_operators, bound_probe, energy_norms)
from .mesh import (Mesh, build_icosphere, build_screen_square, load_mesh,
                   mesh_stats, save_mesh, tag_partition)
from .runner import (ConfigError, load_config, run_scenario, waveform)
from .spaces import TraceSpace, build_space, duality_matrix

__all__ = [
    "AbstractSystem", "AssemblyConfig", "CausalBump", "ConfigError",
    "EPS_DOUBLE", "EPS_SINGLE", "FrequencyGrid", "Mesh", "OperatorCache",
    "PointSourceField", "TraceSpace", "Trajectory", "TransmissionSpec",
    "apply_transfer", "assemble_operators", "bound_probe",
    "build_icosphere", "build_screen_square", "build_space",
    "builtin_wave_system", "check_hypotheses", "duality_matrix",
    "energy_norms", "error_study", "evolve", "lift", "load_config",
    "load_mesh", "make_formulation", "mesh_stats", "method_by_name",
    "operator_weights", "reconstruct_field", "run_scenario", "save_mesh",
    "solve_formulation", "stability_probe", "tag_partition",
    "verify_bounds", "waveform",
]

__version__ = "0.1.0"
