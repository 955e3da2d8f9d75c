import numpy as np
import pytest

from paraid.fom import FomProblem, exact_parameter, make_noisy_data
from paraid.grid_fem import Mesh

KINDS = [("reaction", True), ("diffusion", True), ("reaction", False), ("diffusion", False)]
RUN_OF = {("reaction", True): 1, ("diffusion", True): 2, ("reaction", False): 3, ("diffusion", False): 4}


def small_problem(kind, stationary, cells=4, K=6):
    return FomProblem(Mesh(cells), kind, K=K, stationary=stationary)


def small_instance(kind, stationary, cells=4, K=6, delta=1e-5, seed=0):
    problem = small_problem(kind, stationary, cells, K)
    q_exact = exact_parameter(RUN_OF[(kind, stationary)], problem.mesh, K)
    return problem, make_noisy_data(problem, q_exact, delta, seed), q_exact


def random_parameter(problem, rng, low=1.0, high=5.0):
    return rng.uniform(low, high, size=(problem.n, problem.parameter_columns))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
