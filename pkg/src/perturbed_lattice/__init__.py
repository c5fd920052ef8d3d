"""Numerical laboratory for Lifshitz tails of randomly displaced lattice potentials."""
from .errors import ConfigError, DegenerateDomainError, DomainError, LabError, NumericalError, ResourceError
from .randfield import Configuration, ModelParams, PotentialSpec

__all__ = ["ConfigError", "Configuration", "DegenerateDomainError", "DomainError", "LabError",
           "ModelParams", "NumericalError", "PotentialSpec", "ResourceError"]
__version__ = "0.1.0"
