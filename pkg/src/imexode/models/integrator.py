"""Forward time integration.

IMEX Runge-Kutta steps treat G explicitly and J implicitly, so each stage is a
linear solve with the shifted operator (I - dt*At[i,i]*J) whose right-hand
sides are the batch columns. Explicit RK and Crank-Nicolson are the baselines.
"""

from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.sparse.linalg import LinearOperator

from ..utils.config import Config
from ..utils.errors import ImexOdeError, NewtonDivergenceError, StateBlowUpError, UnstableStepError
from ..utils.logging import default_logger
from .linalg import ImplicitOperator, LinearSolver, SolverConfig, gmres
from .netcore import PartitionedODE
from .tableaux import ButcherTableauPair, SchemeId, get_tableau, tableau_stability_function


@dataclass
class NfeCounter:
    """Work counters; all fields only ever grow within a run."""

    forward_g_evals: int = 0
    forward_j_applies: int = 0
    backward_vjp_evals: int = 0
    recompute_g_evals: int = 0
    lu_factorizations: int = 0
    krylov_iters: int = 0

    def snapshot(self) -> "NfeCounter":
        return replace(self)

    def since(self, earlier: "NfeCounter") -> "NfeCounter":
        """Counts accumulated after ``earlier`` was taken."""
        return NfeCounter(**{f.name: getattr(self, f.name) - getattr(earlier, f.name) for f in fields(self)})

    @property
    def forward_nfe(self) -> int:
        """Forward-direction network evaluations, including those recomputed for VJPs."""
        return self.forward_g_evals + self.recompute_g_evals


@dataclass
class StageRecord:
    """Stage states of one step and the evaluations made at them."""

    U: List[np.ndarray] = field(default_factory=list)
    G: List[np.ndarray] = field(default_factory=list)
    JU: List[np.ndarray] = field(default_factory=list)


@dataclass
class StageTrajectory:
    """States at step boundaries plus what the adjoint sweep needs per step."""

    u: List[np.ndarray]
    stages: List[Optional[StageRecord]]
    dt: float
    scheme: SchemeId

    @property
    def n_steps(self) -> int:
        return len(self.u) - 1

    @property
    def final(self) -> np.ndarray:
        return self.u[-1]

    def reconstruct(self, n: int) -> np.ndarray:
        """u[n+1] rebuilt from u[n] and the stored stage evaluations."""
        record = self.stages[n]
        if record is None:
            raise ValueError(f"Step {n} has no stage record")
        tab = get_tableau(self.scheme)
        out = self.u[n].copy()
        for i in range(tab.s):
            out = out + self.dt * (tab.b[i] * record.G[i] + tab.bt[i] * record.JU[i])
        return out


class NewtonConfig(BaseModel):
    """Jacobian-free Newton-Krylov settings for the Crank-Nicolson baseline."""

    model_config = ConfigDict(frozen=True)

    max_iter: int = Field(default=25, ge=1)
    rtol: float = Field(default=1e-9, gt=0)
    fd_eps: float = Field(default=float(np.sqrt(np.finfo(np.float64).eps)), gt=0)
    krylov_tol: float = Field(default=Config.KRYLOV_TOL, gt=0)
    krylov_maxit: int = Field(default=Config.KRYLOV_MAXIT, ge=1)
    restart: int = Field(default=Config.KRYLOV_RESTART, ge=1)


def check_state(u: np.ndarray, step: int, stage: Optional[int] = None) -> None:
    """Raise StateBlowUpError for non-finite or runaway states."""
    finite = np.all(np.isfinite(u))
    max_abs = float(np.max(np.abs(u))) if finite else float("inf")
    if not finite or max_abs > Config.BLOWUP_LIMIT:
        where = f"step {step}" + (f" stage {stage}" if stage is not None else "")
        default_logger.error(f"State blow-up at {where}: max |u| = {max_abs:.3e}")
        raise StateBlowUpError(step, stage, max_abs)


def _advance(ode, tab, u_n, dt, ctr, solve, step):
    s = tab.s
    record = StageRecord()
    for i in range(s):
        rhs = u_n.copy()
        for j in range(i):
            if tab.A[i, j] != 0.0:
                rhs += (dt * tab.A[i, j]) * record.G[j]
            if tab.At[i, j] != 0.0:
                rhs += (dt * tab.At[i, j]) * record.JU[j]
        alpha = dt * tab.At[i, i]
        Ui = solve(alpha, rhs) if alpha != 0.0 else rhs
        check_state(Ui, step, i)
        record.U.append(Ui)
        record.G.append(ode.explicit(Ui))
        record.JU.append(ode.implicit(Ui))
        ctr.forward_g_evals += 1
        ctr.forward_j_applies += 1

    u_next = u_n.copy()
    for i in range(s):
        if tab.b[i] != 0.0:
            u_next += (dt * tab.b[i]) * record.G[i]
        if tab.bt[i] != 0.0:
            u_next += (dt * tab.bt[i]) * record.JU[i]
    check_state(u_next, step)
    return u_next, record


def imex_step(
    ode: PartitionedODE,
    tab: ButcherTableauPair,
    u_n: np.ndarray,
    dt: float,
    solver: LinearSolver,
    ctr: NfeCounter,
    step: int = 0,
) -> Tuple[np.ndarray, StageRecord]:
    """
    Advance one IMEX Runge-Kutta step.

    Stage i solves (I - dt*At[i,i]*J) U_i = u_n + dt*sum_{j<i}(A[i,j] G_j + At[i,j] J U_j)
    with all batch columns as right-hand sides; stages with At[i,i] = 0 are plain
    assignments.

    Args:
        ode: Partitioned right-hand side
        tab: Coefficient pair
        u_n: State, vector or d x m block
        dt: Step size
        solver: Shifted-system solver bound to ode.j
        ctr: Work counters
        step: Step index used in error reports

    Returns:
        (u_next, StageRecord)
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    u_n = np.asarray(u_n, dtype=np.float64)

    def solve(alpha, rhs):
        return solver.solve(alpha, rhs, counter=ctr)

    return _advance(ode, tab, u_n, dt, ctr, solve, step)


def erk_step(
    ode: PartitionedODE,
    tab: ButcherTableauPair,
    u_n: np.ndarray,
    dt: float,
    ctr: NfeCounter,
    step: int = 0,
) -> Tuple[np.ndarray, StageRecord]:
    """Classical explicit Runge-Kutta step on f = G + J u."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if np.any(np.diag(tab.At) != 0.0) or np.any(np.diag(tab.A) != 0.0):
        raise ValueError(f"Tableau '{tab.name}' is not explicit")

    def no_solve(alpha, rhs):
        raise AssertionError("explicit tableau requested a linear solve")

    return _advance(ode, tab, np.asarray(u_n, dtype=np.float64), dt, ctr, no_solve, step)


class _NewtonJacobian(LinearOperator):
    """Finite-difference action of I - dt/2 * f'(v) on flattened states."""

    def __init__(self, ode, v, f_v, dt, eps, ctr):
        n = v.size
        super().__init__(dtype=np.float64, shape=(n, n))
        self.ode, self.v, self.f_v, self.dt, self.eps, self.ctr = ode, v, f_v, dt, eps, ctr
        self.v_norm = np.linalg.norm(v)

    def _matvec(self, w):
        w = np.asarray(w).ravel()
        w_norm = np.linalg.norm(w)
        if w_norm == 0.0:
            return np.zeros_like(w)
        h = self.eps * (1.0 + self.v_norm) / w_norm
        f_pert = self.ode.rhs(self.v + h * w.reshape(self.v.shape))
        self.ctr.forward_g_evals += 1
        self.ctr.forward_j_applies += 1
        return w - 0.5 * self.dt * ((f_pert - self.f_v) / h).ravel()


def crank_nicolson_step(
    ode: PartitionedODE,
    u_n: np.ndarray,
    dt: float,
    newton_cfg: Optional[NewtonConfig],
    ctr: NfeCounter,
    step: int = 0,
) -> np.ndarray:
    """
    Solve v = u_n + dt/2 (f(u_n) + f(v)) by Jacobian-free Newton-Krylov.

    Converged when ||r(v)|| <= rtol * (1 + ||u_n||). Inner GMRES failures are
    tolerated (the best iterate is used); the outer iteration is not.

    Raises:
        NewtonDivergenceError: no convergence within max_iter, or a non-finite residual
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    cfg = newton_cfg or NewtonConfig()
    u_n = np.asarray(u_n, dtype=np.float64)

    f_n = ode.rhs(u_n)
    ctr.forward_g_evals += 1
    ctr.forward_j_applies += 1
    target = cfg.rtol * (1.0 + np.linalg.norm(u_n))

    v = u_n.copy()
    history: List[float] = []
    for it in range(cfg.max_iter + 1):
        f_v = ode.rhs(v)
        ctr.forward_g_evals += 1
        ctr.forward_j_applies += 1
        r = v - u_n - 0.5 * dt * (f_n + f_v)
        r_norm = float(np.linalg.norm(r))
        history.append(r_norm)

        if not np.isfinite(r_norm) or r_norm > Config.BLOWUP_LIMIT:
            default_logger.error(f"Crank-Nicolson step {step}: residual blow-up at Newton iteration {it}")
            raise NewtonDivergenceError(history, "non-finite residual")
        if r_norm <= target:
            default_logger.debug(f"Crank-Nicolson step {step}: converged in {it + 1} Newton iterations")
            return v
        if it == cfg.max_iter:
            break

        jac = _NewtonJacobian(ode, v, f_v, dt, cfg.fd_eps, ctr)
        delta, its = gmres(jac, -r.ravel(), tol=cfg.krylov_tol, maxit=cfg.krylov_maxit,
                           restart=cfg.restart, raise_on_failure=False)
        ctr.krylov_iters += its
        v = v + delta.reshape(v.shape)

    default_logger.error(f"Crank-Nicolson step {step}: Newton did not converge in {cfg.max_iter} iterations")
    raise NewtonDivergenceError(history, "iteration limit reached")


def resolve_solver(ode: PartitionedODE, solver: Union[LinearSolver, SolverConfig, None]) -> LinearSolver:
    """Reuse a LinearSolver bound to ode.j, or build one from a config."""
    if isinstance(solver, LinearSolver):
        if solver.J is not ode.j:
            raise ValueError("LinearSolver is bound to a different implicit operator")
        return solver
    return LinearSolver(ode.j, solver or SolverConfig())


def step_once(
    ode: PartitionedODE,
    scheme: SchemeId,
    u: np.ndarray,
    dt: float,
    solver: LinearSolver,
    ctr: NfeCounter,
    newton_cfg: Optional[NewtonConfig] = None,
    step: int = 0,
) -> Tuple[np.ndarray, Optional[StageRecord]]:
    """Dispatch one step of any scheme; Crank-Nicolson yields no stage record."""
    if scheme is SchemeId.CRANK_NICOLSON:
        return crank_nicolson_step(ode, u, dt, newton_cfg, ctr, step), None
    tab = get_tableau(scheme)
    if scheme.is_explicit:
        return erk_step(ode, tab, u, dt, ctr, step)
    return imex_step(ode, tab, u, dt, solver, ctr, step)


def integrate(
    ode: PartitionedODE,
    scheme: Union[SchemeId, str],
    u_0: np.ndarray,
    dt: float,
    n_steps: int,
    solver: Union[LinearSolver, SolverConfig, None] = None,
    ctr: Optional[NfeCounter] = None,
    newton_cfg: Optional[NewtonConfig] = None,
    store_stages: bool = True,
) -> StageTrajectory:
    """
    Apply ``n_steps`` steps of a scheme from u_0.

    Args:
        ode: Partitioned right-hand side
        scheme: SchemeId or its spelling
        u_0: Initial state, vector or d x m block
        dt: Step size
        n_steps: Number of steps (0 gives a trajectory holding only u_0)
        solver: LinearSolver to reuse (keeps its factorization cache) or a SolverConfig
        ctr: Work counters, created when omitted
        newton_cfg: Crank-Nicolson settings
        store_stages: Keep per-step stage records for the adjoint sweep

    Returns:
        StageTrajectory
    """
    if n_steps < 0:
        raise ValueError(f"n_steps must be >= 0, got {n_steps}")
    scheme = scheme if isinstance(scheme, SchemeId) else SchemeId.parse(scheme)
    ctr = ctr if ctr is not None else NfeCounter()
    linear = resolve_solver(ode, solver)

    u = np.array(u_0, dtype=np.float64)
    check_state(u, 0)
    traj = StageTrajectory(u=[u], stages=[], dt=float(dt), scheme=scheme)
    for n in range(n_steps):
        try:
            u, record = step_once(ode, scheme, u, dt, linear, ctr, newton_cfg, step=n)
        except ImexOdeError as e:
            default_logger.error(f"{scheme.value} integration failed at step {n}: {e}")
            raise
        traj.u.append(u)
        traj.stages.append(record if store_stages else None)
    return traj


def rollout(
    ode: PartitionedODE,
    scheme: Union[SchemeId, str],
    u_0: np.ndarray,
    dt: float,
    n_steps: int,
    every: int = 1,
    solver: Union[LinearSolver, SolverConfig, None] = None,
    ctr: Optional[NfeCounter] = None,
    newton_cfg: Optional[NewtonConfig] = None,
) -> np.ndarray:
    """
    Forward-only integration keeping a snapshot every ``every`` steps.

    Returns:
        Array of shape (n_steps // every + 1, *u_0.shape); snapshot 0 is u_0
    """
    if every < 1:
        raise ValueError(f"every must be >= 1, got {every}")
    if n_steps < 0:
        raise ValueError(f"n_steps must be >= 0, got {n_steps}")
    scheme = scheme if isinstance(scheme, SchemeId) else SchemeId.parse(scheme)
    ctr = ctr if ctr is not None else NfeCounter()
    linear = resolve_solver(ode, solver)

    u = np.array(u_0, dtype=np.float64)
    check_state(u, 0)
    snapshots = [u.copy()]
    for n in range(n_steps):
        u, _ = step_once(ode, scheme, u, dt, linear, ctr, newton_cfg, step=n)
        if (n + 1) % every == 0:
            snapshots.append(u.copy())
    return np.stack(snapshots)


# --- linear stability ----------------------------------------------------------

def operator_spectrum(J: ImplicitOperator) -> np.ndarray:
    """Eigenvalues of J; circulant stencils give theirs in closed form."""
    eigenvalues = getattr(J, "eigenvalues", None)
    if callable(eigenvalues):
        return np.asarray(eigenvalues(), dtype=np.complex128)
    return np.linalg.eigvals(J.to_dense())


def linear_amplification(scheme: Union[SchemeId, str], z: np.ndarray) -> np.ndarray:
    """|R(z)| of the scheme for the linear part; IMEX pairs treat it with their implicit half."""
    scheme = scheme if isinstance(scheme, SchemeId) else SchemeId.parse(scheme)
    z = np.atleast_1d(np.asarray(z, dtype=np.complex128))
    if scheme is SchemeId.CRANK_NICOLSON:
        return np.abs((1.0 + 0.5 * z) / (1.0 - 0.5 * z))
    tab = get_tableau(scheme)
    implicit = not scheme.is_explicit
    return np.array([abs(tableau_stability_function(tab, complex(zk), implicit)) for zk in z])


def check_linear_stability(ode: PartitionedODE, scheme: Union[SchemeId, str], dt: float) -> float:
    """
    Refuse step sizes that amplify a decaying mode of J.

    Growing modes (Re lambda > 0) are left alone since the exact flow amplifies
    them too.

    Returns:
        Largest amplification over the decaying modes

    Raises:
        UnstableStepError: some decaying mode is amplified by more than 1
    """
    scheme = scheme if isinstance(scheme, SchemeId) else SchemeId.parse(scheme)
    lam = operator_spectrum(ode.j)
    decaying = lam[lam.real <= 0.0]
    if decaying.size == 0:
        return 0.0
    amp = linear_amplification(scheme, dt * decaying)
    worst = int(np.argmax(amp))
    if amp[worst] > 1.0 + 1e-9:
        default_logger.error(
            f"{scheme.value} at dt={dt:g} amplifies mode lambda={decaying[worst].real:.4g} by {amp[worst]:.3e}"
        )
        raise UnstableStepError(scheme.value, dt, float(amp[worst]), complex(decaying[worst]))
    return float(amp[worst])


# --- temporal convergence --------------------------------------------------------

@dataclass
class ConvergenceResult:
    """Errors of one scheme at a sequence of step sizes against a fine reference."""

    scheme: SchemeId
    dts: List[float]
    errors: List[float]

    @property
    def slope(self) -> float:
        """Least-squares slope of log(error) against log(dt)."""
        dts = np.asarray(self.dts)
        errors = np.asarray(self.errors)
        mask = errors > 0
        if mask.sum() < 2:
            return float("nan")
        return float(np.polyfit(np.log(dts[mask]), np.log(errors[mask]), 1)[0])


def convergence_study(
    ode: PartitionedODE,
    u_0: np.ndarray,
    schemes: Sequence[Union[SchemeId, str]],
    dt: float,
    t_final: float,
    levels: int = 2,
    refine: int = 64,
    newton_cfg: Optional[NewtonConfig] = None,
) -> Dict[SchemeId, ConvergenceResult]:
    """
    Final-time error of each scheme at dt, dt/2, ... against its own run at dt/refine.

    The reference uses the same scheme at the finest step divided by ``refine``,
    so the measured slope reflects that scheme's order alone.
    """
    if levels < 2:
        raise ValueError(f"Need at least 2 step sizes, got {levels}")
    n_base = int(round(t_final / dt))
    if n_base < 1 or abs(n_base * dt - t_final) > 1e-9:
        raise ValueError(f"t_final={t_final:g} is not a multiple of dt={dt:g}")
    newton_cfg = newton_cfg or NewtonConfig(rtol=1e-13)

    results: Dict[SchemeId, ConvergenceResult] = {}
    for name in schemes:
        scheme = name if isinstance(name, SchemeId) else SchemeId.parse(name)
        solver = LinearSolver(ode.j)
        n_ref = n_base * 2 ** (levels - 1) * refine
        reference = integrate(ode, scheme, u_0, t_final / n_ref, n_ref, solver=solver,
                              newton_cfg=newton_cfg, store_stages=False).final
        dts, errors = [], []
        for level in range(levels):
            n = n_base * 2 ** level
            final = integrate(ode, scheme, u_0, t_final / n, n, solver=solver,
                              newton_cfg=newton_cfg, store_stages=False).final
            dts.append(t_final / n)
            errors.append(float(np.linalg.norm(final - reference)))
        results[scheme] = ConvergenceResult(scheme, dts, errors)
        default_logger.info(f"Convergence {scheme.value}: slope {results[scheme].slope:.3f}")
    return results
