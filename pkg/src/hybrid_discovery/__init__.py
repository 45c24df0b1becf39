"""Sparse ODE discovery by hybrid state/parameter regression."""
from .discrete import HybridObjective, LossWeights, Observations, StateGrid, build_grid, loss
from .harness import DiscoveryConfig, NoiseSpec, discover, get_system, integrate_reference, run_benchmark
from .library import CandidateLibrary, CoefficientState, build_polynomial_library, format_equations
from .lm import LMConfig, minimize
from .selection import HyperGrid, hyperparameter_search, select_model

__version__ = "0.1.0"
