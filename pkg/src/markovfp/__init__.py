"""Discrete Markov-extension generators and Fokker-Planck-Kolmogorov solvers on boxes.

Symmetric diffusion operators ``L = rho^{-1} div(rho A grad) + c`` are assembled
as finite-volume generators under different boundary closures.  Their
semigroups are evolved and checked against the sub-Markov, duality and weak
equation identities, and the closures are compared as a uniqueness proxy.
"""
from .estimator import SemigroupTransformer
from .evolve import SolutionPath, TestFunctionPair, solve_fpke, solve_fpke_pair
from .expr import differentiate, parse, to_string
from .generator import GeneratorMatrix, assemble, friedrichs_reference
from .harness import catalog, run_convergence_study, run_uniqueness_proxy
from .hille import hille_classify
from .problem import CoefficientSet, DiscreteMeasure, Grid, Scenario, load_scenario, parse_scenario
from .reports import ConditionReport

__version__ = "0.1.0"

__all__ = [
    "CoefficientSet", "ConditionReport", "DiscreteMeasure", "GeneratorMatrix", "Grid", "Scenario",
    "SemigroupTransformer", "SolutionPath", "TestFunctionPair", "assemble", "catalog", "differentiate",
    "friedrichs_reference", "hille_classify", "load_scenario", "parse", "parse_scenario",
    "run_convergence_study", "run_uniqueness_proxy", "solve_fpke", "solve_fpke_pair", "to_string",
]
