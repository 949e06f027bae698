"""Two-level multiscale thermal simulator for laser powder bed fusion."""

__version__ = "0.1.0"

from .mesh import Box, Mesh, InterfaceGamma, build_structured_mesh, extract_interface
from .materials import MaterialModel, load_material
from .sources import LaserBeam, ThermalBC
from .fem import FieldState, SolverSettings, Trajectory, solve_monolithic, uniform_field

__all__ = [
    "Box",
    "Mesh",
    "InterfaceGamma",
    "build_structured_mesh",
    "extract_interface",
    "MaterialModel",
    "load_material",
    "LaserBeam",
    "ThermalBC",
    "FieldState",
    "SolverSettings",
    "Trajectory",
    "solve_monolithic",
    "uniform_field",
]
