"""Test suite for forward time stepping."""

import numpy as np
import pytest

from src.imexode.models.fields import QuadraticField, stiff_test_problem
from src.imexode.models.integrator import (
    NewtonConfig,
    NfeCounter,
    check_linear_stability,
    check_state,
    convergence_study,
    crank_nicolson_step,
    erk_step,
    imex_step,
    integrate,
    linear_amplification,
    rollout,
)
from src.imexode.models.linalg import DenseOperator, LinearSolver, SolverConfig
from src.imexode.models.netcore import PartitionedODE, make_ks_stencil
from src.imexode.models.tableaux import IMEX_SCHEMES, SchemeId, get_tableau, tableau_stability_function
from src.imexode.utils.errors import NewtonDivergenceError, StateBlowUpError, UnstableStepError


def zero_field(d):
    return QuadraticField(np.zeros((d, d, d)))


def linear_ode(lam):
    return PartitionedODE(g=zero_field(1), j=DenseOperator([[lam]]))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(5))


@pytest.fixture
def stiff_problem():
    J, field, u_0 = stiff_test_problem()
    return PartitionedODE(g=field, j=DenseOperator(J)), u_0


@pytest.fixture
def fast_stiff_problem():
    J, field, u_0 = stiff_test_problem(fast_rate=500.0)
    return PartitionedODE(g=field, j=DenseOperator(J)), u_0


def decaying_modes(J):
    """Sum of the cosine modes of a circulant stencil whose eigenvalues are negative."""
    d = J.dim
    lam = J.eigenvalues().real
    j = np.arange(d)
    return sum(np.cos(2 * np.pi * q * j / d) for q in range(d // 2 + 1) if lam[q] < 0)


class TestImexStep:
    """Test cases for one IMEX Runge-Kutta step."""

    @pytest.mark.parametrize("scheme", IMEX_SCHEMES)
    def test_linear_step_is_stability_function(self, scheme):
        """Test that u' = lambda*u is advanced by R(dt*lambda) of the implicit half."""
        lam, dt = -3.0, 0.2
        ode = linear_ode(lam)
        tab = get_tableau(scheme)
        u_next, _ = imex_step(ode, tab, np.array([1.0]), dt, LinearSolver(ode.j), NfeCounter())
        expected = tableau_stability_function(tab, dt * lam, implicit=True).real
        assert u_next[0] == pytest.approx(expected, rel=1e-12)

    def test_no_linear_part_reduces_to_explicit_rk(self, rng):
        """Test that with J = 0 the step is the explicit Runge-Kutta method (A, b)."""
        field = QuadraticField(0.3 * rng.normal(size=(3, 3, 3)))
        ode = PartitionedODE(g=field, j=DenseOperator(np.zeros((3, 3))))
        tab = get_tableau(SchemeId.IMEX_RK3)
        u, dt = rng.normal(size=3), 0.1
        u_next, _ = imex_step(ode, tab, u, dt, LinearSolver(ode.j), NfeCounter())

        K = []
        for i in range(tab.s):
            Ui = u + dt * sum(tab.A[i, j] * K[j] for j in range(i))
            K.append(field.forward(Ui))
        expected = u + dt * sum(tab.b[i] * K[i] for i in range(tab.s))
        np.testing.assert_allclose(u_next, expected, atol=1e-14)

    def test_batch_columns_independent(self, stiff_problem, rng):
        """Test that a block step equals stepping each column alone."""
        ode, _ = stiff_problem
        tab = get_tableau(SchemeId.IMEX_RK4)
        U = rng.normal(size=(3, 4))
        solver = LinearSolver(ode.j)
        block, _ = imex_step(ode, tab, U, 0.05, solver, NfeCounter())
        for k in range(4):
            single, _ = imex_step(ode, tab, U[:, k], 0.05, solver, NfeCounter())
            np.testing.assert_allclose(block[:, k], single, atol=1e-14)

    def test_stage_record(self, stiff_problem):
        """Test that every stage state and evaluation is kept."""
        ode, u_0 = stiff_problem
        tab = get_tableau(SchemeId.IMEX_RK3)
        _, record = imex_step(ode, tab, u_0, 0.1, LinearSolver(ode.j), NfeCounter())
        assert len(record.U) == len(record.G) == len(record.JU) == tab.s
        np.testing.assert_allclose(record.U[0], u_0)
        np.testing.assert_allclose(record.JU[2], ode.j.apply(record.U[2]))

    def test_counts(self, stiff_problem):
        """Test one explicit evaluation per stage and a single factorization."""
        ode, u_0 = stiff_problem
        ctr = NfeCounter()
        integrate(ode, SchemeId.IMEX_RK5, u_0, 0.1, 7, ctr=ctr)
        assert ctr.forward_g_evals == 8 * 7
        assert ctr.forward_j_applies == 8 * 7
        assert ctr.lu_factorizations == 1
        assert ctr.backward_vjp_evals == 0

    def test_krylov_matches_direct(self, stiff_problem):
        """Test that the Krylov backend reproduces the direct trajectory."""
        ode, u_0 = stiff_problem
        direct = integrate(ode, "imex-rk3", u_0, 0.1, 5).final
        ctr = NfeCounter()
        krylov = integrate(ode, "imex-rk3", u_0, 0.1, 5, solver=SolverConfig(kind="krylov"), ctr=ctr).final
        np.testing.assert_allclose(krylov, direct, atol=1e-9)
        assert ctr.krylov_iters > 0
        assert ctr.lu_factorizations == 0

    def test_invalid_dt(self, stiff_problem):
        """Test that the step size must be positive."""
        ode, u_0 = stiff_problem
        with pytest.raises(ValueError):
            imex_step(ode, get_tableau(SchemeId.IMEX_RK2), u_0, 0.0, LinearSolver(ode.j), NfeCounter())


class TestErkStep:
    """Test cases for the explicit baselines."""

    def test_rk4_linear(self):
        """Test that RK4 on u' = lambda*u applies its stability polynomial."""
        ode = linear_ode(-2.0)
        u_next, _ = erk_step(ode, get_tableau(SchemeId.ERK4), np.array([1.0]), 0.1, NfeCounter())
        z = -0.2
        assert u_next[0] == pytest.approx(1 + z + z ** 2 / 2 + z ** 3 / 6 + z ** 4 / 24, rel=1e-14)

    def test_rejects_implicit_tableau(self, stiff_problem):
        """Test that an IMEX tableau cannot be used explicitly."""
        ode, u_0 = stiff_problem
        with pytest.raises(ValueError):
            erk_step(ode, get_tableau(SchemeId.IMEX_RK3), u_0, 0.1, NfeCounter())

    def test_unstable_step_blows_up(self):
        """Test that RK4 beyond its stability bound on the KS stencil is flagged."""
        J = make_ks_stencil(64, 22.0)
        ode = PartitionedODE(g=zero_field(64), j=J)
        u_0 = decaying_modes(J)
        with pytest.raises(StateBlowUpError):
            integrate(ode, SchemeId.ERK4, u_0, 0.2, 100, store_stages=False)

    def test_no_linear_solves(self, stiff_problem):
        """Test that explicit schemes never factor."""
        ode, u_0 = stiff_problem
        ctr = NfeCounter()
        integrate(ode, SchemeId.DOPRI5_FIXED, u_0, 0.01, 3, ctr=ctr)
        assert ctr.lu_factorizations == 0
        assert ctr.forward_g_evals == 7 * 3


class TestImexStability:
    """Test cases for the stiff linear KS stencil."""

    @pytest.mark.parametrize("scheme", IMEX_SCHEMES)
    def test_bounded_on_decaying_modes(self, scheme):
        """Test that IMEX schemes stay bounded at dt = 0.2 where RK4 blows up."""
        J = make_ks_stencil(64, 22.0)
        ode = PartitionedODE(g=zero_field(64), j=J)
        u_0 = decaying_modes(J)
        final = integrate(ode, scheme, u_0, 0.2, 100, store_stages=False).final
        assert np.linalg.norm(final) < 10 * np.linalg.norm(u_0)


class TestCrankNicolson:
    """Test cases for the implicit trapezoidal baseline."""

    @pytest.mark.parametrize("lam, dt", [(-1.0, 0.1), (-50.0, 0.2), (2.0, 0.05)])
    def test_amplification_factor(self, lam, dt):
        """Test that a linear step multiplies by (1 + z/2) / (1 - z/2)."""
        ode = linear_ode(lam)
        u_next = crank_nicolson_step(ode, np.array([1.0]), dt, NewtonConfig(rtol=1e-14), NfeCounter())
        z = lam * dt
        assert u_next[0] == pytest.approx((1 + z / 2) / (1 - z / 2), abs=1e-9)

    def test_residual_small(self, stiff_problem):
        """Test that the accepted state solves the trapezoidal equation."""
        ode, u_0 = stiff_problem
        dt = 0.1
        v = crank_nicolson_step(ode, u_0, dt, NewtonConfig(rtol=1e-12), NfeCounter())
        r = v - u_0 - 0.5 * dt * (ode.rhs(u_0) + ode.rhs(v))
        assert np.linalg.norm(r) < 1e-10

    def test_iteration_limit(self, stiff_problem):
        """Test that Newton failure reports its residual history."""
        ode, u_0 = stiff_problem
        with pytest.raises(NewtonDivergenceError) as exc:
            crank_nicolson_step(ode, 3.0 * u_0, 0.5, NewtonConfig(max_iter=1, rtol=1e-15), NfeCounter())
        assert len(exc.value.residual_history) == 2
        assert exc.value.exit_code == 3

    def test_no_stage_records(self, stiff_problem):
        """Test that Crank-Nicolson trajectories store no stage records."""
        ode, u_0 = stiff_problem
        traj = integrate(ode, SchemeId.CRANK_NICOLSON, u_0, 0.1, 3)
        assert traj.stages == [None, None, None]
        assert traj.n_steps == 3


class TestIntegrate:
    """Test cases for multi-step integration."""

    def test_zero_steps(self, stiff_problem):
        """Test that zero steps return only the initial state."""
        ode, u_0 = stiff_problem
        traj = integrate(ode, "imex-rk2", u_0, 0.1, 0)
        assert traj.n_steps == 0
        np.testing.assert_array_equal(traj.final, u_0)

    def test_reconstruct(self, stiff_problem):
        """Test that stored stage evaluations rebuild each step."""
        ode, u_0 = stiff_problem
        traj = integrate(ode, "imex-rk4", u_0, 0.1, 4)
        for n in range(4):
            np.testing.assert_allclose(traj.reconstruct(n), traj.u[n + 1], atol=1e-14)

    def test_store_stages_off(self, stiff_problem):
        """Test that forward-only runs drop stage records."""
        ode, u_0 = stiff_problem
        traj = integrate(ode, "imex-rk4", u_0, 0.1, 2, store_stages=False)
        assert traj.stages == [None, None]
        with pytest.raises(ValueError):
            traj.reconstruct(0)

    def test_non_finite_initial_state(self, stiff_problem):
        """Test that NaN input is reported as a blow-up at step 0."""
        ode, _ = stiff_problem
        with pytest.raises(StateBlowUpError) as exc:
            integrate(ode, "imex-rk2", np.array([1.0, np.nan, 0.0]), 0.1, 1)
        assert exc.value.step == 0

    def test_negative_steps(self, stiff_problem):
        """Test that a negative step count is rejected."""
        ode, u_0 = stiff_problem
        with pytest.raises(ValueError):
            integrate(ode, "imex-rk2", u_0, 0.1, -1)

    def test_rejects_foreign_solver(self, stiff_problem):
        """Test that a solver bound to another operator is refused."""
        ode, u_0 = stiff_problem
        other = LinearSolver(DenseOperator(np.eye(3)))
        with pytest.raises(ValueError):
            integrate(ode, "imex-rk2", u_0, 0.1, 1, solver=other)


class TestCheckState:
    """Test cases for the blow-up guard."""

    def test_limit(self):
        """Test that states beyond the limit raise with the location."""
        with pytest.raises(StateBlowUpError) as exc:
            check_state(np.array([1e11]), step=4, stage=2)
        assert (exc.value.step, exc.value.stage) == (4, 2)
        assert exc.value.exit_code == 4

    def test_finite_state_passes(self):
        """Test that ordinary states pass silently."""
        check_state(np.ones((3, 2)), step=0)


class TestRollout:
    """Test cases for snapshot rollouts."""

    def test_snapshots(self, stiff_problem):
        """Test snapshot count and agreement with integrate."""
        ode, u_0 = stiff_problem
        snaps = rollout(ode, "imex-rk3", u_0, 0.05, 12, every=4)
        assert snaps.shape == (4, 3)
        np.testing.assert_array_equal(snaps[0], u_0)
        np.testing.assert_allclose(snaps[-1], integrate(ode, "imex-rk3", u_0, 0.05, 12).final, atol=1e-14)

    def test_invalid_every(self, stiff_problem):
        """Test that the snapshot interval must be positive."""
        ode, u_0 = stiff_problem
        with pytest.raises(ValueError):
            rollout(ode, "imex-rk3", u_0, 0.05, 4, every=0)


class TestLinearStability:
    """Test cases for the up-front step-size check."""

    def test_rk4_unstable_on_ks64(self):
        """Test that RK4 at dt = 0.2 is refused on the KS-64 stencil."""
        ode = PartitionedODE(g=zero_field(64), j=make_ks_stencil(64))
        with pytest.raises(UnstableStepError) as exc:
            check_linear_stability(ode, SchemeId.ERK4, 0.2)
        assert exc.value.amplification > 1e6
        assert exc.value.exit_code == 4

    def test_small_dt_is_stable(self):
        """Test that RK4 at dt = 0.001 passes."""
        ode = PartitionedODE(g=zero_field(64), j=make_ks_stencil(64))
        assert check_linear_stability(ode, SchemeId.ERK4, 0.001) <= 1.0 + 1e-9

    @pytest.mark.parametrize("scheme", list(IMEX_SCHEMES) + [SchemeId.CRANK_NICOLSON])
    def test_implicit_schemes_pass(self, scheme):
        """Test that implicit treatment of J is stable at dt = 0.2."""
        ode = PartitionedODE(g=zero_field(64), j=make_ks_stencil(64))
        assert check_linear_stability(ode, scheme, 0.2) <= 1.0 + 1e-9

    def test_crank_nicolson_amplification(self):
        """Test the closed-form Crank-Nicolson factor."""
        z = np.array([-0.5, -10.0])
        np.testing.assert_allclose(linear_amplification("cn", z), np.abs((1 + z / 2) / (1 - z / 2)))


class TestConvergence:
    """Test cases for observed orders of accuracy."""

    @pytest.mark.parametrize("scheme, order", [
        (SchemeId.IMEX_RK2, 2),
        (SchemeId.IMEX_RK3, 3),
        (SchemeId.IMEX_RK4, 4),
        (SchemeId.IMEX_RK5, 5),
        (SchemeId.EULER, 1),
        (SchemeId.CRANK_NICOLSON, 2),
    ])
    def test_slope(self, stiff_problem, scheme, order):
        """Test that halving dt reduces the error by 2^order."""
        ode, u_0 = stiff_problem
        result = convergence_study(ode, u_0, [scheme], dt=0.05, t_final=1.0)[scheme]
        assert len(result.errors) == 2
        assert result.slope == pytest.approx(order, abs=0.25)

    @pytest.mark.parametrize("scheme, order", [
        (SchemeId.IMEX_RK2, 2),
        (SchemeId.IMEX_RK3, 3),
        (SchemeId.IMEX_RK4, 4),
        (SchemeId.IMEX_RK5, 5),
    ])
    def test_slope_with_fast_mode(self, fast_stiff_problem, scheme, order):
        """Test the IMEX orders at dt*lambda = -25 on the fast mode."""
        ode, u_0 = fast_stiff_problem
        assert check_linear_stability(ode, scheme, 0.05) <= 1.0 + 1e-9
        result = convergence_study(ode, u_0, [scheme], dt=0.05, t_final=1.0)[scheme]
        assert result.slope == pytest.approx(order, abs=0.25)

    def test_fast_mode_needs_small_explicit_steps(self, fast_stiff_problem, stiff_problem):
        """Test that explicit schemes are refused at dt=0.05 only when the fast mode is present."""
        ode, _ = fast_stiff_problem
        slow_ode, _ = stiff_problem
        for scheme in (SchemeId.EULER, SchemeId.ERK4):
            assert check_linear_stability(slow_ode, scheme, 0.05) <= 1.0 + 1e-9
            with pytest.raises(UnstableStepError):
                check_linear_stability(ode, scheme, 0.05)
        assert check_linear_stability(ode, SchemeId.ERK4, 0.004) <= 1.0 + 1e-9

    def test_euler_halves_error(self, stiff_problem):
        """Test that the first-order control roughly halves its error."""
        ode, u_0 = stiff_problem
        errors = convergence_study(ode, u_0, ["euler"], dt=0.05, t_final=1.0)[SchemeId.EULER].errors
        assert errors[1] / errors[0] == pytest.approx(0.5, abs=0.1)

    def test_invalid_levels(self, stiff_problem):
        """Test that a slope needs two step sizes."""
        ode, u_0 = stiff_problem
        with pytest.raises(ValueError):
            convergence_study(ode, u_0, ["imex-rk2"], dt=0.05, t_final=1.0, levels=1)
