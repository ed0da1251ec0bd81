"""Surface-adjoint importance sampling for 2D Monte Carlo radiative transfer."""

from ._backend import BACKEND
from .adjoint import AdjointTable, ballistic_signal, solve_adjoint
from .estimators import FomReport, Tally, estimate, speedup
from .scene import Scene, build_scene, toy_direct_scene, toy_plates_scene
from .transport import Chain, ChainParams, Status, simulate, trace_paths

__all__ = [
    "BACKEND", "AdjointTable", "ballistic_signal", "solve_adjoint", "FomReport", "Tally", "estimate",
    "speedup", "Scene", "build_scene", "toy_direct_scene", "toy_plates_scene", "Chain", "ChainParams",
    "Status", "simulate", "trace_paths",
]
