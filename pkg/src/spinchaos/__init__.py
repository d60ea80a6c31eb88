"""Simulation and limit-law toolkit for disordered mean-field Langevin spin systems."""

from .model import (
    DisorderSpec,
    InitialLawSpec,
    ModelParams,
    PotentialSpec,
    TimeGrid,
    default_params,
)

__version__ = "0.1.0"

__all__ = [
    "DisorderSpec",
    "InitialLawSpec",
    "ModelParams",
    "PotentialSpec",
    "TimeGrid",
    "default_params",
    "__version__",
]
