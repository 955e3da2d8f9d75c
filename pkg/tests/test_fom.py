import numpy as np
import pytest
from conftest import KINDS, random_parameter, small_instance, small_problem

from paraid.fom import exact_field, exact_parameter, make_noisy_data, problem_for_run
from paraid.grid_fem import assemble_mass, assemble_stiffness


def dense_operator(problem, col):
    """Dense state matrix assembled directly from the weighted FE matrices."""
    mesh = problem.mesh
    interior = mesh.interior_mask.astype(float)
    if problem.kind == "reaction":
        full = assemble_stiffness(mesh) + assemble_mass(mesh, col)
    else:
        full = assemble_stiffness(mesh, col)
    A = full.toarray() * np.outer(interior, interior)
    return A + np.diag(1.0 - interior)


def dense_trajectories(problem, q, y):
    """Reference primal/adjoint trajectories by dense LU, one solve per step."""
    mesh = problem.mesh
    interior = mesh.interior_mask.astype(float)
    M = assemble_mass(mesh).toarray()
    MH = M * np.outer(interior, interior)
    L = interior * (M @ np.ones(mesh.n_nodes))
    dt = problem.dt
    K = problem.K
    cols = [q[:, 0 if q.shape[1] == 1 else k] for k in range(K)]
    u = np.zeros((problem.n, K))
    prev = np.zeros(problem.n)
    for k in range(K):
        S = MH / dt + dense_operator(problem, cols[k])
        prev = np.linalg.solve(S, L + MH @ prev / dt)
        u[:, k] = prev
    p = np.zeros((problem.n, K))
    nxt = np.zeros(problem.n)
    for k in reversed(range(K)):
        S = MH / dt + dense_operator(problem, cols[k])
        rhs = interior * (M @ y[:, k]) - MH @ u[:, k] + MH @ nxt / dt
        nxt = np.linalg.solve(S.T, rhs)
        p[:, k] = nxt
    return u, p


@pytest.mark.parametrize("kind,stationary", KINDS)
def test_dense_oracle(kind, stationary, rng):
    problem = small_problem(kind, stationary, cells=3, K=4)
    q = random_parameter(problem, rng)
    y = rng.standard_normal((problem.n, problem.K))
    obs = problem.observation(y)
    u_ref, p_ref = dense_trajectories(problem, q, y)
    u = problem.solve_primal(q)
    p = problem.solve_adjoint(q, u, obs)
    assert np.allclose(u, u_ref, rtol=1e-12, atol=1e-14)
    assert np.allclose(p, p_ref, rtol=1e-12, atol=1e-14)
    # boundary values stay zero
    assert np.all(u[problem.mesh.boundary_mask] == 0)
    # expanded and direct misfit agree
    M = assemble_mass(problem.mesh).toarray()
    direct = 0.5 * problem.dt * sum((u[:, k] - y[:, k]) @ M @ (u[:, k] - y[:, k]) for k in range(problem.K))
    assert problem.objective(q, obs, u) == pytest.approx(direct, rel=1e-12)
    assert problem.misfit_direct(u, obs) == pytest.approx(direct, rel=1e-12)


@pytest.mark.parametrize("kind,stationary", KINDS)
def test_linearized_solves_are_derivatives(kind, stationary, rng):
    problem, obs, _ = small_instance(kind, stationary, cells=4, K=5)
    q = random_parameter(problem, rng)
    d = rng.standard_normal(q.shape)
    u = problem.solve_primal(q)
    du = problem.solve_linearized_primal(q, u, d)
    h = 1e-6
    fd = (problem.solve_primal(q + h * d) - problem.solve_primal(q - h * d)) / (2 * h)
    assert np.allclose(du, fd, rtol=1e-6, atol=1e-10 * np.abs(fd).max())
    # the Gauss-Newton gradient at d is the derivative of the linearized misfit
    plin = problem.solve_linearized_adjoint(q, u, du, obs)
    g = problem.gradient_covector(q, u, plin)
    e = rng.standard_normal(q.shape)
    due = problem.solve_linearized_primal(q, u, e)

    def lin_misfit(v):
        return problem.misfit_from_state(u + v, obs)

    fd = (lin_misfit(du + h * due) - lin_misfit(du - h * due)) / (2 * h)
    assert problem.param_inner(problem.riesz(g), e) == pytest.approx(fd, rel=1e-5)


@pytest.mark.parametrize("kind,stationary", KINDS)
def test_gradient_matches_fd(kind, stationary, rng):
    problem, obs, _ = small_instance(kind, stationary)
    q = random_parameter(problem, rng)
    d = rng.standard_normal(q.shape)
    g = problem.gradient(q, obs)
    h = 1e-5
    fd = (problem.objective(q + h * d, obs) - problem.objective(q - h * d, obs)) / (2 * h)
    assert problem.param_inner(g, d) == pytest.approx(fd, rel=1e-6)


@pytest.mark.parametrize("delta", [1e-5, 1e-2])
def test_noise_norm(delta):
    problem = small_problem("reaction", True, cells=5, K=7)
    q = exact_parameter(1, problem.mesh, problem.K)
    obs = make_noisy_data(problem, q, delta, seed=3)
    u = problem.solve_primal(q)
    xi = obs.values - u
    H = (assemble_mass(problem.mesh) + assemble_stiffness(problem.mesh)).toarray()
    norm = np.sqrt(problem.dt * sum(xi[:, k] @ H @ xi[:, k] for k in range(problem.K)))
    assert norm == pytest.approx(delta, rel=1e-12)
    # noise lives on boundary observation nodes too
    assert np.any(xi[problem.mesh.boundary_mask] != 0)
    again = make_noisy_data(problem, q, delta, seed=3)
    assert np.array_equal(obs.values, again.values)
    assert not np.array_equal(obs.values, make_noisy_data(problem, q, delta, seed=4).values)
    assert np.array_equal(make_noisy_data(problem, q, 0.0).values, u)
    with pytest.raises(ValueError):
        make_noisy_data(problem, q, -1.0)


def test_exact_parameter_points():
    amp = 1.0 / (0.02 * np.pi)
    # first bump is centred at (1/4, 1/4), the second at (5/8, 5/8)
    assert exact_field(1, [[0.25, 0.25]])[0] == pytest.approx(3 + amp * (1 + np.exp(-9.0)))
    assert exact_field(1, [[0.625, 0.625]])[0] == pytest.approx(3 + amp * (1 + np.exp(-0.5 * 2 * 7.5 ** 2)))
    assert exact_field(1, [[0.0, 1.0]])[0] == pytest.approx(3.0, abs=1e-6)
    # bar, arm, disk and background of the inclusion field
    pts = [[0.2, 0.5], [0.5, 0.15], [0.5, 0.85], [0.6, 0.5], [0.95, 0.95], [0.75, 0.5]]
    assert np.allclose(exact_field(2, pts), [5, 5, 5, 1, 3, 3])
    # closed rectangles, open disk
    assert exact_field(2, [[5 / 30, 3 / 30]])[0] == 5.0
    assert exact_field(2, [[22 / 30, 15 / 30]])[0] == 3.0
    # time modulation
    assert exact_field(3, [[0.25, 0.25]], 0.5)[0] == pytest.approx(exact_field(1, [[0.25, 0.25]])[0])
    assert exact_field(4, [[0.2, 0.5]], 1.0)[0] == pytest.approx(3.0)
    assert exact_field(4, [[0.2, 0.5]], 0.25)[0] == pytest.approx(3 + 2 * np.sin(np.pi / 4))
    with pytest.raises(ValueError):
        exact_field(3, [[0.1, 0.1]])
    with pytest.raises(ValueError):
        exact_field(7, [[0.1, 0.1]])


def test_exact_parameter_shapes():
    for run, cols in ((1, 1), (2, 1), (3, 6), (4, 6)):
        p = problem_for_run(run, 4, 6)
        q = exact_parameter(run, p.mesh, 6)
        assert q.shape == (p.n, cols)
        assert p.is_admissible(q)
    q3 = exact_parameter(3, problem_for_run(3, 4, 6).mesh, 6)
    assert np.allclose(q3[:, -1], 3.0)


def test_parameter_helpers(rng):
    p = small_problem("diffusion", False, K=4)
    q = random_parameter(p, rng)
    assert p.param_norm(q) ** 2 == pytest.approx(p.dt * sum(q[:, k] @ p.h1 @ q[:, k] for k in range(4)))
    assert p.coercivity_constant(q) == pytest.approx(q.min())
    assert small_problem("reaction", True).coercivity_constant(q) == 1.0
    clipped = p.project_box(q * 1e4)
    assert p.is_admissible(clipped) and not p.is_admissible(q * 1e4)
    with pytest.raises(ValueError):
        p._as_parameter(np.ones((p.n, 3)))
    with pytest.raises(ValueError):
        p.coercivity_constant(-q)


def test_solve_counter_and_cache(rng):
    p = small_problem("reaction", True)
    q = random_parameter(p, rng)
    obs = p.observation(np.zeros((p.n, p.K)))
    p.evaluate(q, obs)
    assert p.fom_solves == 2
    p.solve_linearized_primal(q, p.solve_primal(q), q)
    assert p.fom_solves == 4
