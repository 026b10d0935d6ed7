"""Blood flow through a compliant cylindrical vessel reinforced by a rod net.

The package couples an incompressible fluid on a moving cylinder to a thin
elastic shell and a graph of inextensible rods, advanced by a two-step
splitting scheme whose discrete energy balance is tracked step by step.
"""
from .errors import (ConfigurationError, DomainError, LipschitzViolation, MeshShellError,
                     SolverError, StateError, SubgraphViolation)
from .geometry import AleSlabMap, BoundaryField, CylinderRef, ale_jacobian, ale_map, reparameterize
from .shell import ShellBasis, ShellField, ShellParams
from .net import NetTopology, load_topology, parse_topology
from .composite import StructureModel, StructureState
from .fluid import FluidGrid, FluidParams
from .splitting import CoupledProblem, CoupledState, EnergyLedger, PressureData, Simulation, energy_report, run
from .config import parse_config, parse_expression

__version__ = "0.1.0"
