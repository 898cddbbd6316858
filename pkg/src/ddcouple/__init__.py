"""Optimisation-based domain decomposition for incompressible flow with FEM and POD-ROM parts."""
from .coupling import Coupler, CouplingMode, CouplingSettings
from .mesh import decompose, generate_bfs_mesh, generate_rect_mesh
from .solvers import DDProblem, FlowProblem, Mu

__all__ = ["Coupler", "CouplingMode", "CouplingSettings", "DDProblem", "FlowProblem", "Mu",
           "decompose", "generate_bfs_mesh", "generate_rect_mesh"]
__version__ = "0.1.0"
