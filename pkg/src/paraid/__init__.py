"""Parameter identification in parabolic problems with IRGNM and a trust-region reduced-basis variant."""
__version__ = "0.1.0"

from .errors import ConfigError, ParaidError, SolverError, StagnationError
from .fom import FomProblem, Observation, exact_parameter, make_noisy_data, problem_for_run
from .grid_fem import Mesh
from .irgnm import IrgnmSettings, run_fom_irgnm
from .reduction import hapod, pod
from .rom import RomModel
from .tr_irgnm import TrSettings, run_tr_irgnm

__all__ = [
    "__version__",
    "ConfigError",
    "ParaidError",
    "SolverError",
    "StagnationError",
    "FomProblem",
    "Observation",
    "Mesh",
    "exact_parameter",
    "make_noisy_data",
    "problem_for_run",
    "IrgnmSettings",
    "run_fom_irgnm",
    "TrSettings",
    "run_tr_irgnm",
    "RomModel",
    "pod",
    "hapod",
]
