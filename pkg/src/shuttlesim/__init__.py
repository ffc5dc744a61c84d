"""Simulation and analysis of EPR-pair separation by conveyor-mode spin shuttling."""

from shuttlesim.constants import CONSTANTS, PhysicalConstants

__version__ = "0.1.0"

__all__ = ["CONSTANTS", "PhysicalConstants", "__version__"]
