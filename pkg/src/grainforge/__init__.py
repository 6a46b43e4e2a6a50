"""Numerical lab for a semi-discrete grain-boundary model: admissible
strain fields with quantized dislocations, explicit wall constructions,
cell problems and the limit interfacial energy."""
__version__ = "0.1.0"

from .errors import GrainforgeError, NumericalError, UsageError
from .fields import (DefectSet, Domain, GridField, Matrix2, ModelParams, Rotation2, rasterize,
                     read_grid, write_grid)
from .energy import dist2_so2, elastic_energy, core_energy, f_eps
from .circulation import GridLoop, check_h2, discrete_curl, loop_circulation, weak_circulation
from .constructions import build_c_to_c, build_r_to_c, build_r_to_r, derive_rr_params

__all__ = [
    "GrainforgeError", "NumericalError", "UsageError", "DefectSet", "Domain", "GridField",
    "Matrix2", "ModelParams", "Rotation2", "rasterize", "read_grid", "write_grid", "dist2_so2",
    "elastic_energy", "core_energy", "f_eps", "GridLoop", "check_h2", "discrete_curl",
    "loop_circulation", "weak_circulation", "build_c_to_c", "build_r_to_c", "build_r_to_r",
    "derive_rr_params",
]
