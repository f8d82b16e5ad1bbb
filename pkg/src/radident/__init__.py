"""radident: material identification from single non-energy-resolved
radiographs with a known-geometry scene.

The pipeline fits a polyenergetic Beer-Lambert direct model plus a
low-order polynomial scatter field to a preprocessed radiograph and ranks
material assignments with an exact top-N branch-and-bound search.
"""

__version__ = "0.1.0"

from .errors import BudgetError, NumericalError, RadidentError, ValidationError
from .forward import Assignment, FitResult, Radiograph, direct, fit_gain_scatter, loss
from .geometry import (
    ConstantSlab,
    DetectorGrid,
    PathLengthSet,
    Scene,
    SphericalShell,
    trace_scene,
)
from .materials import (
    EnergyGrid,
    MaterialTable,
    SpectrumResponse,
    load_material_table,
    load_spectrum_response,
)
from .solver import (
    SearchConfig,
    SolveResult,
    bound,
    branch,
    mask_for,
    solve_exhaustive,
    solve_topN,
)

__all__ = [
    "Assignment",
    "BudgetError",
    "ConstantSlab",
    "DetectorGrid",
    "EnergyGrid",
    "FitResult",
    "MaterialTable",
    "NumericalError",
    "PathLengthSet",
    "RadidentError",
    "Radiograph",
    "Scene",
    "SearchConfig",
    "SolveResult",
    "SpectrumResponse",
    "SphericalShell",
    "ValidationError",
    "bound",
    "branch",
    "direct",
    "fit_gain_scatter",
    "load_material_table",
    "load_spectrum_response",
    "loss",
    "mask_for",
    "solve_exhaustive",
    "solve_topN",
    "trace_scene",
]
