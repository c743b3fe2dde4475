"""Discrete adjoint of the time-stepping schemes.

The backward sweep differentiates the fully discrete forward map, so the
gradients agree with finite differences of what ``integrate`` computes, not
with a continuous adjoint. Per IMEX step, stages are visited from last to
first; stage i combines the already-computed stage adjoints into the
weights w_g (explicit coefficients) and w_h (implicit coefficients) before the
single VJP, then solves the transposed shifted system

    (I - dt*At[i,i]*J^T) xi_i = dt * (G_u(U_i)^T w_g + J^T w_h)

and finally lambda_n = lambda_{n+1} + sum_i xi_i, mu += dt * sum_i G_p(U_i)^T w_g.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse.linalg import LinearOperator

from ..utils.errors import DimensionMismatchError
from ..utils.logging import default_logger
from .integrator import (
    NewtonConfig,
    NfeCounter,
    StageRecord,
    StageTrajectory,
    integrate,
    resolve_solver,
)
from .linalg import LinearSolver, SolverConfig, gmres
from .netcore import Activation, MLPModel, PartitionedODE, count_params
from .tableaux import ButcherTableauPair, SchemeId, get_tableau


@dataclass
class AdjointAccumulator:
    """Running state adjoint ``lam`` and parameter adjoint ``mu``."""

    lam: np.ndarray
    mu: np.ndarray
    stage_lambdas: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def terminal(cls, lam: np.ndarray, param_count: int) -> "AdjointAccumulator":
        return cls(lam=np.array(lam, dtype=np.float64), mu=np.zeros(param_count))


def _stage_sweep(ode, tab, record, acc, dt, ctr, solve):
    if record is None or len(record.U) != tab.s:
        raise ValueError(f"Missing or incomplete stage record for tableau '{tab.name}'")
    s = tab.s
    lam = acc.lam
    xi: List[Optional[np.ndarray]] = [None] * s
    mu_step = np.zeros_like(acc.mu)

    for i in range(s - 1, -1, -1):
        w_g = tab.b[i] * lam
        w_h = tab.bt[i] * lam
        for j in range(i + 1, s):
            if tab.A[j, i] != 0.0:
                w_g = w_g + tab.A[j, i] * xi[j]
            if tab.At[j, i] != 0.0:
                w_h = w_h + tab.At[j, i] * xi[j]

        du, dp = ode.explicit_vjp(record.U[i], w_g)
        ctr.backward_vjp_evals += 1
        ctr.recompute_g_evals += 1
        rhs = dt * (du + ode.implicit_transpose(w_h))

        alpha = dt * tab.At[i, i]
        xi[i] = solve(alpha, rhs) if alpha != 0.0 else rhs
        mu_step += dt * dp
        mu_step += dt * ode.implicit_param_vjp(record.U[i], w_h)

    total = lam.copy()
    for x in xi:
        total += x
    acc.lam = total
    acc.mu = acc.mu + mu_step
    acc.stage_lambdas = xi
    return acc


def adjoint_step(
    ode: PartitionedODE,
    tab: ButcherTableauPair,
    stage_record: StageRecord,
    acc: AdjointAccumulator,
    dt: float,
    solver: LinearSolver,
    ctr: NfeCounter,
) -> AdjointAccumulator:
    """
    Pull the adjoint pair back across one IMEX step.

    Args:
        ode: Partitioned right-hand side used in the forward pass
        tab: Coefficient pair of the forward step
        stage_record: Stage states stored by the forward step
        acc: Adjoint at the end of the step; updated in place and returned
        dt: Step size
        solver: Solver bound to ode.j (shares the factorization cache)
        ctr: Work counters

    Returns:
        The accumulator holding lambda_n and the accumulated mu
    """

    def solve(alpha, rhs):
        return solver.solve(alpha, rhs, transposed=True, counter=ctr)

    return _stage_sweep(ode, tab, stage_record, acc, dt, ctr, solve)


def erk_adjoint_step(
    ode: PartitionedODE,
    tab: ButcherTableauPair,
    stage_record: StageRecord,
    acc: AdjointAccumulator,
    dt: float,
    ctr: NfeCounter,
) -> AdjointAccumulator:
    """Explicit Runge-Kutta specialisation: every stage adjoint is an assignment."""
    if np.any(np.diag(tab.A) != 0.0) or np.any(np.diag(tab.At) != 0.0):
        raise ValueError(f"Tableau '{tab.name}' is not explicit")

    def no_solve(alpha, rhs):
        raise AssertionError("explicit tableau requested a linear solve")

    return _stage_sweep(ode, tab, stage_record, acc, dt, ctr, no_solve)


class _TransposedCNOperator(LinearOperator):
    """(I - dt/2 * f_u(v)^T) applied through VJPs, on flattened states."""

    def __init__(self, ode, v, dt, ctr):
        super().__init__(dtype=np.float64, shape=(v.size, v.size))
        self.ode, self.v, self.dt, self.ctr = ode, v, dt, ctr

    def _matvec(self, y):
        Y = np.asarray(y).reshape(self.v.shape)
        du, _ = self.ode.explicit_vjp(self.v, Y)
        self.ctr.backward_vjp_evals += 1
        self.ctr.recompute_g_evals += 1
        return (Y - 0.5 * self.dt * (du + self.ode.implicit_transpose(Y))).ravel()


def crank_nicolson_adjoint_step(
    ode: PartitionedODE,
    u_n: np.ndarray,
    u_next: np.ndarray,
    acc: AdjointAccumulator,
    dt: float,
    ctr: NfeCounter,
    newton_cfg: Optional[NewtonConfig] = None,
) -> AdjointAccumulator:
    """
    Adjoint of one converged Crank-Nicolson step.

    Solves (I - dt/2 f_u(u_next)^T) xi = lambda_{n+1} by GMRES, then
    lambda_n = xi + dt/2 f_u(u_n)^T xi and mu += dt/2 (G_p(u_n)^T + G_p(u_next)^T) xi.
    """
    cfg = newton_cfg or NewtonConfig()
    op = _TransposedCNOperator(ode, np.asarray(u_next, dtype=np.float64), dt, ctr)
    xi_flat, its = gmres(op, acc.lam.ravel(), tol=cfg.krylov_tol, maxit=cfg.krylov_maxit,
                         restart=cfg.restart)
    ctr.krylov_iters += its
    xi = xi_flat.reshape(acc.lam.shape)

    du_n, dp_n = ode.explicit_vjp(u_n, xi)
    _, dp_next = ode.explicit_vjp(u_next, xi)
    ctr.backward_vjp_evals += 2
    ctr.recompute_g_evals += 2

    acc.lam = xi + 0.5 * dt * (du_n + ode.implicit_transpose(xi))
    acc.mu = acc.mu + 0.5 * dt * (dp_n + dp_next)
    acc.stage_lambdas = [xi]
    return acc


def backward_sweep(
    ode: PartitionedODE,
    traj: StageTrajectory,
    seed_grads: Sequence[Tuple[int, np.ndarray]],
    solver: Union[LinearSolver, SolverConfig, None] = None,
    ctr: Optional[NfeCounter] = None,
    newton_cfg: Optional[NewtonConfig] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of a loss observed at one or more step indices.

    Args:
        ode: Right-hand side used to produce ``traj``
        traj: Forward trajectory with stage records
        seed_grads: (step index, dloss/du at that index) pairs; repeated
            indices add up
        solver: The forward pass's LinearSolver, so transposed factorizations are cached too
        ctr: Work counters
        newton_cfg: Krylov settings for the Crank-Nicolson adjoint

    Returns:
        (grad_p, grad_u0)
    """
    ctr = ctr if ctr is not None else NfeCounter()
    linear = resolve_solver(ode, solver)
    N = traj.n_steps
    shape = traj.u[0].shape

    seeds: Dict[int, np.ndarray] = {}
    for index, grad in seed_grads:
        if not 0 <= index <= N:
            raise IndexError(f"Seed index {index} outside trajectory of {N} steps")
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != shape:
            raise DimensionMismatchError(f"Seed at index {index} has shape {grad.shape}, state is {shape}")
        seeds[index] = seeds[index] + grad if index in seeds else grad.copy()

    acc = AdjointAccumulator.terminal(seeds.get(N, np.zeros(shape)), ode.param_count)
    scheme = traj.scheme
    tab = None if scheme is SchemeId.CRANK_NICOLSON else get_tableau(scheme)

    for n in range(N - 1, -1, -1):
        if scheme is SchemeId.CRANK_NICOLSON:
            crank_nicolson_adjoint_step(ode, traj.u[n], traj.u[n + 1], acc, traj.dt, ctr, newton_cfg)
        elif scheme.is_explicit:
            erk_adjoint_step(ode, tab, traj.stages[n], acc, traj.dt, ctr)
        else:
            adjoint_step(ode, tab, traj.stages[n], acc, traj.dt, linear, ctr)
        if n in seeds:
            acc.lam = acc.lam + seeds[n]

    return acc.mu, acc.lam


# --- finite-difference verification ------------------------------------------

@dataclass
class GradCheckReport:
    """Adjoint versus central finite differences on sampled parameter components."""

    scheme: str
    indices: np.ndarray
    adjoint: np.ndarray
    finite_difference: np.ndarray

    @property
    def relative_errors(self) -> np.ndarray:
        scale = np.maximum(np.abs(self.adjoint), np.abs(self.finite_difference))
        diff = np.abs(self.adjoint - self.finite_difference)
        return np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)

    @property
    def max_rel_error(self) -> float:
        errors = self.relative_errors
        return float(errors.max()) if errors.size else 0.0


def kink_free_mlp(dims: Sequence[int], seed: int, margin: float = 2.0) -> MLPModel:
    """
    Random ReLU network whose hidden pre-activations stay about ``margin`` away from zero.

    Hidden biases are +/-margin with random signs and weights are scaled so the
    weighted inputs spread over a quarter of the margin, which keeps finite
    difference steps off the ReLU kinks while still mixing live and dead units.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    model = MLPModel(list(dims), np.zeros(count_params(dims)))
    n_layers = len(dims) - 1
    for l, (W, _, act, w_slice, b_slice) in enumerate(model.layers()):
        n_in = dims[l]
        if l == 0:
            sigma = 0.25 * margin / np.sqrt(n_in)
        elif act is Activation.RELU:
            sigma = 0.25 * np.sqrt(2.0) / np.sqrt(n_in)
        else:
            sigma = 0.5 / (np.sqrt(n_in) * margin)
        model.params[w_slice] = rng.normal(0.0, sigma, size=W.size)
        if l < n_layers - 1:
            model.params[b_slice] = margin * rng.choice([-1.0, 1.0], size=b_slice.stop - b_slice.start)
    return model


def terminal_mse(u: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error at the last state and its gradient."""
    diff = u - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def gradient_check(
    ode: PartitionedODE,
    scheme: Union[SchemeId, str],
    u_0: np.ndarray,
    dt: float,
    n_steps: int,
    target: np.ndarray,
    n_samples: int = 30,
    h_rel: float = 1e-5,
    seed: int = 0,
    solver_cfg: Optional[SolverConfig] = None,
    newton_cfg: Optional[NewtonConfig] = None,
) -> GradCheckReport:
    """
    Compare adjoint parameter gradients with central finite differences.

    The loss is the mean squared error of the final state against ``target``.
    Components are drawn with a Philox generator among those whose adjoint
    gradient is at least 1e-3 of the largest; the step for component k is
    h_rel * max(1, |p_k|).
    """
    scheme = scheme if isinstance(scheme, SchemeId) else SchemeId.parse(scheme)
    linear = LinearSolver(ode.j, solver_cfg or SolverConfig())

    traj = integrate(ode, scheme, u_0, dt, n_steps, solver=linear, newton_cfg=newton_cfg)
    _, seed_grad = terminal_mse(traj.final, target)
    grad_p, _ = backward_sweep(ode, traj, [(n_steps, seed_grad)], solver=linear, newton_cfg=newton_cfg)

    rng = np.random.Generator(np.random.Philox(seed))
    peak = np.max(np.abs(grad_p)) if grad_p.size else 0.0
    candidates = np.flatnonzero(np.abs(grad_p) >= 1e-3 * peak) if peak > 0 else np.arange(grad_p.size)
    count = min(n_samples, candidates.size)
    indices = np.sort(rng.choice(candidates, size=count, replace=False)) if count else np.zeros(0, int)

    def loss_at() -> float:
        final = integrate(ode, scheme, u_0, dt, n_steps, solver=linear,
                          newton_cfg=newton_cfg, store_stages=False).final
        return terminal_mse(final, target)[0]

    params = ode.params
    fd = np.zeros(indices.size)
    for slot, k in enumerate(indices):
        original = params[k]
        h = h_rel * max(1.0, abs(original))
        params[k] = original + h
        plus = loss_at()
        params[k] = original - h
        minus = loss_at()
        params[k] = original
        fd[slot] = (plus - minus) / (2.0 * h)

    report = GradCheckReport(scheme.value, indices, grad_p[indices], fd)
    default_logger.info(
        f"Gradient check {scheme.value}: {indices.size} components, max relative error {report.max_rel_error:.3e}"
    )
    return report
