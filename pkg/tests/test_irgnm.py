import numpy as np
import pytest
from conftest import small_instance

from paraid.irgnm import IrgnmSettings, discrepancy_level, run_fom_irgnm
from paraid.subproblem import FomLinearization


def test_discrepancy_level():
    assert discrepancy_level(3.5, 1e-5) == pytest.approx(0.5 * (3.5e-5) ** 2)


@pytest.mark.parametrize("kind,stationary", [("reaction", True), ("diffusion", True), ("reaction", False)])
def test_small_runs_reach_discrepancy(kind, stationary):
    problem, obs, q_exact = small_instance(kind, stationary, cells=8, K=8)
    res = run_fom_irgnm(problem, obs)
    assert res.converged and res.stop_reason == "discrepancy"
    assert res.J <= discrepancy_level(3.5, 1e-5)
    J = [r.J for r in res.history]
    assert all(b < a for a, b in zip(J, J[1:]))
    assert all(problem.is_admissible(q) for q in res.iterates)
    # each accepted alpha satisfies the bracket when re-evaluated from scratch
    for q, (d, alpha) in zip(res.iterates, res.steps):
        lin = FomLinearization(problem, q, obs)
        ratio = 2 * lin.misfit(lin.state(d)) / lin.J
        assert 0.4 <= ratio <= 1.95
    # the reconstruction moves towards the exact parameter
    assert problem.param_norm(res.q - q_exact) < problem.param_norm(problem.constant_parameter() - q_exact)


def test_iteration_cap():
    problem, obs, _ = small_instance("reaction", True, cells=6, K=6)
    res = run_fom_irgnm(problem, obs, IrgnmSettings(max_iterations=1))
    assert not res.converged and res.stop_reason == "max-iterations"
    assert len(res.history) == 2


def test_settings_validation():
    with pytest.raises(ValueError):
        IrgnmSettings(tau=0.5)
    with pytest.raises(ValueError):
        IrgnmSettings(theta=1.0, Theta=0.5)
    problem, obs, _ = small_instance("reaction", True, cells=3, K=2)
    with pytest.raises(ValueError):
        run_fom_irgnm(problem, obs, q0=np.full((problem.n, 1), -1.0))
