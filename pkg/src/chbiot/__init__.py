"""Finite-element simulator for the Cahn-Hilliard-Biot tumor growth system."""

from chbiot.grid import DofMap, GridSpec, Mesh, build_dofmap, build_mesh
from chbiot.material import MaterialTable
from chbiot.stepper import State, TimeStepConfig, advance, run

__all__ = [
    "DofMap",
    "GridSpec",
    "MaterialTable",
    "Mesh",
    "State",
    "TimeStepConfig",
    "advance",
    "build_dofmap",
    "build_mesh",
    "run",
]

__version__ = "0.1.0"
