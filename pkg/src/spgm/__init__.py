"""SPGM and related first-order methods for smooth convex minimization."""
from ._accel import backend_name
from .fo_core import (AuxCertificate, FirstOrderTriple, History, aux_residual, coupling_q,
                      is_interpolable, plus_transform, q_matrix)
from .problems import Family, ProblemInstance, gen_random, reference_optimum

__version__ = "0.1.0"

__all__ = [
    "AuxCertificate", "FirstOrderTriple", "History", "aux_residual", "coupling_q",
    "is_interpolable", "plus_transform", "q_matrix", "Family", "ProblemInstance",
    "gen_random", "reference_optimum", "backend_name", "__version__",
]
