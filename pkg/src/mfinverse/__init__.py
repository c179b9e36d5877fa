"""Multi-fidelity Bayesian inversion of spatial input fields.

An expensive high-fidelity simulator is replaced, inside the likelihood, by a
cheap low-fidelity solve plus a learned probabilistic conditional between the
two fidelities; the posterior over the field is approximated by sparse
Gaussian stochastic variational inference with EM treatment of the prior and
noise hyper-parameters.
"""

from .config import ConfigError, default_config, load_config
from .darcy import DarcySolver, PressureBC, SolverError
from .mesh import Mesh, MeshError, ObservationGrid, OutOfDomainError
from .observations import ObservationSet, gen_observations, make_ground_truth
from .prior import MarkovPrior, make_prior
from .svi import SparseGaussian, SviConfig, SviTrace, run_inference

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "default_config",
    "load_config",
    "DarcySolver",
    "PressureBC",
    "SolverError",
    "Mesh",
    "MeshError",
    "ObservationGrid",
    "OutOfDomainError",
    "ObservationSet",
    "gen_observations",
    "make_ground_truth",
    "MarkovPrior",
    "make_prior",
    "SparseGaussian",
    "SviConfig",
    "SviTrace",
    "run_inference",
    "__version__",
]
