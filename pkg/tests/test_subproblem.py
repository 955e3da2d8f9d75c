import numpy as np
import pytest
from conftest import random_parameter, small_instance
from test_rom import random_bases

from paraid.fom import FomProblem
from paraid.grid_fem import Mesh
from paraid.rom import RomModel
from paraid.subproblem import (
    ALPHA_FLOOR,
    FomLinearization,
    PgdSettings,
    RomLinearization,
    TikhonovSubproblem,
    regulate_alpha,
    solve_pgd,
)

TIGHT = PgdSettings(tolerance=1e-13)


def quadratic_oracle(sub, shape):
    """Gradient and Hessian of ``d -> J~_alpha(d)`` in raw coordinates by exact polarisation."""
    lin = sub.lin
    n = int(np.prod(shape))

    def f(v):
        d = v.reshape(shape)
        return sub.value(d, lin.state(d))

    f0 = f(np.zeros(n))
    eye = np.eye(n)
    fe = np.array([f(eye[i]) for i in range(n)])
    fm = np.array([f(-eye[i]) for i in range(n)])
    b = 0.5 * (fe - fm)
    H = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            H[i, j] = H[j, i] = f(eye[i] + eye[j]) - fe[i] - fe[j] + f0
    return b, H


@pytest.mark.parametrize("stationary", [True, False])
def test_pgd_matches_normal_equations(stationary):
    problem, obs, _ = small_instance("reaction", stationary, cells=3, K=3)
    q = problem.constant_parameter()
    lin = FomLinearization(problem, q, obs)
    sub = TikhonovSubproblem(lin, 1e-4, q)
    b, H = quadratic_oracle(sub, q.shape)
    d_ref = -np.linalg.solve(H, b).reshape(q.shape)
    assert problem.is_admissible(q + d_ref)
    res = solve_pgd(sub, TIGHT)
    assert res.stop_reason in ("optimal", "stagnation")
    assert np.abs(res.d - d_ref).max() <= 1e-7 * np.abs(d_ref).max()
    assert res.misfit == pytest.approx(lin.misfit(lin.state(res.d)), rel=1e-10)


def test_pgd_with_active_bounds():
    mesh = Mesh(3)
    problem = FomProblem(mesh, "reaction", K=3, upper=3.0005, lower=2.9995)
    _, obs, _ = small_instance("reaction", True, cells=3, K=3)
    q = problem.constant_parameter()
    lin = FomLinearization(problem, q, obs)
    sub = TikhonovSubproblem(lin, 1e-6, q)
    res = solve_pgd(sub, TIGHT)
    assert problem.is_admissible(q + res.d)
    assert np.any(np.isclose(q + res.d, problem.upper) | np.isclose(q + res.d, problem.lower))
    # first-order optimality: d is a fixed point of the projected gradient map
    g = lin.gradient + lin.state_gradient(lin.state(res.d)) + sub.alpha * (res.d - sub.shift)
    fixed = problem.project_box(q + res.d - g) - q
    g0 = lin.gradient + sub.alpha * (-sub.shift)
    ref = problem.param_norm(problem.project_box(q - g0) - q)
    assert problem.param_norm(fixed - res.d) <= 1e-8 * ref


@pytest.mark.parametrize("stationary", [True, False])
def test_reduced_dense_and_iterative_paths_agree(stationary, rng, monkeypatch):
    problem, obs, _ = small_instance("diffusion", stationary, cells=4, K=4)
    psi_q, psi_v = random_bases(problem, rng, n_q=3, n_v=6)
    rom = RomModel(problem, psi_q, psi_v, obs)
    q_r = rom.restrict(np.full((problem.n, problem.parameter_columns), 3.0))
    dense = RomLinearization(rom, q_r)
    assert dense.sensitivity is not None
    monkeypatch.setattr(RomLinearization, "dense_limit", 0)
    iterative = RomLinearization(rom, q_r)
    assert iterative.sensitivity is None
    d = rng.standard_normal(q_r.shape) * 0.01
    assert np.allclose(dense.state(d), iterative.state(d), atol=1e-13)
    u = dense.state(d)
    assert np.allclose(dense.state_gradient(u), iterative.state_gradient(u), atol=1e-12)
    a = solve_pgd(TikhonovSubproblem(dense, 1e-3, q_r), TIGHT)
    b = solve_pgd(TikhonovSubproblem(iterative, 1e-3, q_r), TIGHT)
    assert np.allclose(a.d, b.d, atol=1e-8 * max(np.abs(a.d).max(), 1e-300))


def test_reduced_state_gradient_is_adjoint(rng):
    problem, obs, _ = small_instance("reaction", False, cells=4, K=4)
    psi_q, psi_v = random_bases(problem, rng, n_q=3, n_v=6)
    rom = RomModel(problem, psi_q, psi_v, obs)
    lin = RomLinearization(rom, rom.restrict(np.full((problem.n, problem.K), 3.0)))
    d = rng.standard_normal(lin.q.shape)
    e = rng.standard_normal(lin.q.shape)
    lhs = lin.inner(lin.state_gradient(lin.state(d)), e)
    rhs = lin.obs_inner(lin.state(d), lin.state(e))
    assert lhs == pytest.approx(rhs, rel=1e-10)


@pytest.mark.parametrize("alpha0", [1e-9, 1e-5, 1.0])
def test_regulate_alpha_bracket(alpha0):
    problem, obs, _ = small_instance("reaction", True, cells=5, K=5, delta=1e-4)
    q = problem.constant_parameter()
    lin = FomLinearization(problem, q, obs)
    res = regulate_alpha(lin, q, alpha0)
    ratio = 2.0 * lin.misfit(lin.state(res.d)) / lin.J
    assert ratio == pytest.approx(res.ratio, rel=1e-8)
    if not res.at_floor:
        assert 0.4 <= ratio <= 1.95
    else:
        assert res.alpha == ALPHA_FLOOR
    # the trace follows doubling/halving until both sides are seen
    alphas = [t[0] for t in res.trace]
    assert alphas[0] == alpha0


def test_regulate_alpha_validation():
    problem, obs, _ = small_instance("reaction", True, cells=3, K=2)
    lin = FomLinearization(problem, problem.constant_parameter(), obs)
    with pytest.raises(ValueError):
        regulate_alpha(lin, lin.q, 1.0, theta=1.5, Theta=1.0)
    with pytest.raises(ValueError):
        regulate_alpha(lin, lin.q, -1.0)
    with pytest.raises(ValueError):
        TikhonovSubproblem(lin, 0.0, lin.q)
