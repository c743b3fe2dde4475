"""Test suite for the discrete adjoint."""

import numpy as np
import pytest

from src.imexode.models.adjoint import (
    AdjointAccumulator,
    adjoint_step,
    backward_sweep,
    gradient_check,
    kink_free_mlp,
    terminal_mse,
)
from src.imexode.models.fields import QuadraticField
from src.imexode.models.integrator import NewtonConfig, NfeCounter, integrate
from src.imexode.models.linalg import DenseOperator, LinearSolver
from src.imexode.models.netcore import Activation, PartitionedODE, make_ks_stencil
from src.imexode.models.tableaux import IMEX_SCHEMES, SchemeId, get_tableau
from src.imexode.utils.errors import DimensionMismatchError

ALL_SCHEMES = list(IMEX_SCHEMES) + [SchemeId.ERK4, SchemeId.DOPRI5_FIXED, SchemeId.CRANK_NICOLSON]


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(9))


@pytest.fixture
def linear_problem(rng):
    d = 4
    J = -np.diag([1.0, 2.0, 3.0, 5.0]) + 0.4 * rng.normal(size=(d, d))
    return PartitionedODE(g=QuadraticField(np.zeros((d, d, d))), j=DenseOperator(J))


def step_matrix(ode, scheme, dt):
    """Matrix of one step of a linear problem, built by stepping the identity block."""
    return integrate(ode, scheme, np.eye(ode.dim), dt, 1, newton_cfg=NewtonConfig(rtol=1e-14)).final


class TestLinearAdjoint:
    """Test cases against the transposed step matrix."""

    @pytest.mark.parametrize("scheme", ALL_SCHEMES)
    def test_initial_state_gradient(self, linear_problem, rng, scheme):
        """Test that lambda_0 = (M^N)^T c for the loss c . u_N."""
        dt, n_steps = 0.1, 3
        M = step_matrix(linear_problem, scheme, dt)
        u_0, c = rng.normal(size=4), rng.normal(size=4)
        traj = integrate(linear_problem, scheme, u_0, dt, n_steps, newton_cfg=NewtonConfig(rtol=1e-14))
        grad_p, grad_u0 = backward_sweep(linear_problem, traj, [(n_steps, c)],
                                         newton_cfg=NewtonConfig(rtol=1e-14))
        expected = np.linalg.matrix_power(M, n_steps).T @ c
        np.testing.assert_allclose(grad_u0, expected, rtol=1e-8, atol=1e-10)
        assert grad_p.size == 0

    def test_intermediate_seeds(self, linear_problem, rng):
        """Test that seeds at several indices add their pulled-back contributions."""
        dt = 0.1
        M = step_matrix(linear_problem, SchemeId.IMEX_RK3, dt)
        c1, c3 = rng.normal(size=4), rng.normal(size=4)
        traj = integrate(linear_problem, "imex-rk3", rng.normal(size=4), dt, 3)
        _, grad_u0 = backward_sweep(linear_problem, traj, [(1, c1), (3, c3)])
        expected = M.T @ c1 + np.linalg.matrix_power(M, 3).T @ c3
        np.testing.assert_allclose(grad_u0, expected, rtol=1e-10, atol=1e-12)

    def test_repeated_seed_indices_add(self, linear_problem, rng):
        """Test that two seeds at the same index sum."""
        traj = integrate(linear_problem, "imex-rk2", rng.normal(size=4), 0.1, 2)
        c = rng.normal(size=4)
        _, once = backward_sweep(linear_problem, traj, [(2, 2 * c)])
        _, twice = backward_sweep(linear_problem, traj, [(2, c), (2, c)])
        np.testing.assert_allclose(once, twice, atol=1e-14)

    def test_seed_at_initial_index(self, linear_problem, rng):
        """Test that a seed on u_0 passes through untouched."""
        traj = integrate(linear_problem, "imex-rk4", rng.normal(size=4), 0.1, 2)
        c = rng.normal(size=4)
        _, grad_u0 = backward_sweep(linear_problem, traj, [(0, c)])
        np.testing.assert_allclose(grad_u0, c, atol=1e-15)


class TestAdjointBookkeeping:
    """Test cases for counters and argument checks."""

    def test_counts(self, linear_problem, rng):
        """Test one VJP per stage and a single transposed factorization."""
        ctr = NfeCounter()
        solver = LinearSolver(linear_problem.j, counter=ctr)
        traj = integrate(linear_problem, "imex-rk3", rng.normal(size=4), 0.1, 5, solver=solver, ctr=ctr)
        backward_sweep(linear_problem, traj, [(5, np.ones(4))], solver=solver, ctr=ctr)
        assert ctr.backward_vjp_evals == 4 * 5
        assert ctr.recompute_g_evals == 4 * 5
        assert ctr.forward_g_evals == 4 * 5
        assert ctr.lu_factorizations == 2

    def test_seed_index_out_of_range(self, linear_problem, rng):
        """Test that seeds beyond the trajectory are refused."""
        traj = integrate(linear_problem, "imex-rk2", rng.normal(size=4), 0.1, 2)
        with pytest.raises(IndexError):
            backward_sweep(linear_problem, traj, [(3, np.ones(4))])

    def test_seed_shape(self, linear_problem, rng):
        """Test that seeds must match the state layout."""
        traj = integrate(linear_problem, "imex-rk2", rng.normal(size=(4, 2)), 0.1, 2)
        with pytest.raises(DimensionMismatchError):
            backward_sweep(linear_problem, traj, [(2, np.ones(4))])

    def test_missing_stage_records(self, linear_problem, rng):
        """Test that a forward-only trajectory cannot be swept backwards."""
        traj = integrate(linear_problem, "imex-rk2", rng.normal(size=4), 0.1, 2, store_stages=False)
        with pytest.raises(ValueError):
            backward_sweep(linear_problem, traj, [(2, np.ones(4))])

    def test_adjoint_step_keeps_stage_lambdas(self, linear_problem, rng):
        """Test that one step exposes its stage adjoints."""
        tab = get_tableau(SchemeId.IMEX_RK2)
        traj = integrate(linear_problem, SchemeId.IMEX_RK2, rng.normal(size=4), 0.1, 1)
        acc = AdjointAccumulator.terminal(np.ones(4), linear_problem.param_count)
        adjoint_step(linear_problem, tab, traj.stages[0], acc, 0.1, LinearSolver(linear_problem.j), NfeCounter())
        assert len(acc.stage_lambdas) == tab.s
        np.testing.assert_allclose(acc.lam, np.ones(4) + sum(acc.stage_lambdas))


class TestParameterGradients:
    """Test cases against central finite differences."""

    @pytest.fixture
    def ks_problem(self, rng):
        d = 16
        ode = PartitionedODE(g=kink_free_mlp([d, 32, 32, d], seed=4), j=make_ks_stencil(d, 22.0))
        u_0 = rng.normal(size=(d, 2))
        target = rng.normal(size=(d, 2))
        return ode, u_0, target

    @pytest.mark.parametrize("scheme", ALL_SCHEMES)
    def test_matches_finite_differences(self, ks_problem, scheme):
        """Test adjoint parameter gradients over three steps and thirty components."""
        ode, u_0, target = ks_problem
        report = gradient_check(ode, scheme, u_0, 0.2, 3, target, n_samples=30, seed=1,
                                newton_cfg=NewtonConfig(rtol=1e-13))
        assert report.indices.size == 30
        tol = 1e-5 if scheme is SchemeId.CRANK_NICOLSON else 1e-6
        assert report.max_rel_error < tol

    def test_parameters_restored(self, ks_problem):
        """Test that finite-difference probing leaves the parameters unchanged."""
        ode, u_0, target = ks_problem
        before = ode.params.copy()
        gradient_check(ode, "imex-rk2", u_0, 0.2, 2, target, n_samples=5)
        np.testing.assert_array_equal(ode.params, before)

    def test_zero_steps(self, ks_problem):
        """Test that without steps the parameter gradient is exactly zero."""
        ode, u_0, target = ks_problem
        report = gradient_check(ode, "imex-rk3", u_0, 0.2, 0, target, n_samples=10)
        assert report.max_rel_error == 0.0
        np.testing.assert_array_equal(report.adjoint, 0.0)


class TestHelpers:
    """Test cases for the gradient-check helpers."""

    def test_kink_free_mlp(self):
        """Test the +/- margin hidden biases and zero output bias."""
        model = kink_free_mlp([8, 16, 16, 8], seed=0, margin=2.0)
        layers = list(model.layers())
        for W, b, act, _, _ in layers[:-1]:
            assert act is Activation.RELU
            np.testing.assert_array_equal(np.abs(b), 2.0)
        assert np.all(layers[-1][1] == 0.0)

    def test_terminal_mse(self):
        """Test the loss value and its gradient."""
        loss, grad = terminal_mse(np.array([1.0, 3.0]), np.array([0.0, 1.0]))
        assert loss == pytest.approx(2.5)
        np.testing.assert_allclose(grad, [1.0, 2.0])
