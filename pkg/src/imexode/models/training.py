"""Loss, optimizer and the mini-batch training loop."""

import time
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..utils.errors import ConfigError, DimensionMismatchError, ImexOdeError, NonFiniteGradientError
from ..utils.logging import default_logger
from ..utils.metrics import MetricsRow, MetricsWriter
from .adjoint import backward_sweep
from .datagen import Dataset
from .integrator import NewtonConfig, NfeCounter, check_linear_stability, integrate
from .linalg import ImplicitOperator, LinearSolver, SolverConfig
from .netcore import ExplicitField, PartitionedODE, make_burgers_diffusion, make_ks_stencil
from .tableaux import SchemeId


class AdamConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr: float = Field(default=1e-3, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)


@dataclass
class AdamState:
    """First and second moment estimates and the step count."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, cfg: AdamConfig) -> np.ndarray:
    """
    One bias-corrected Adam update.

    Args:
        params: Current parameters (not modified)
        grad: Gradient of the loss
        state: Moments; updated in place
        cfg: Optimizer settings

    Returns:
        Updated parameter vector

    Raises:
        NonFiniteGradientError: first NaN/Inf entry of ``grad``
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise DimensionMismatchError(
            f"Adam shapes disagree: params {params.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        default_logger.error(f"Non-finite gradient entry at index {int(bad[0])}")
        raise NonFiniteGradientError(int(bad[0]))

    state.t += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = state.m / (1.0 - cfg.beta1 ** state.t)
    v_hat = state.v / (1.0 - cfg.beta2 ** state.t)
    return params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def mse_loss(
    pred: np.ndarray,
    target: np.ndarray,
    indices: Optional[Sequence[int]] = None,
) -> Tuple[float, List[Tuple[int, np.ndarray]]]:
    """
    Mean squared error over K observed states and its per-state gradients.

    Args:
        pred: Predictions of shape (K, d, m) (or (K, d))
        target: Same shape as ``pred``
        indices: Step index of each observation, default 0..K-1

    Returns:
        (loss, [(index, dloss/dpred[k]) ...])
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionMismatchError(f"Prediction shape {pred.shape} != target shape {target.shape}")
    indices = list(range(pred.shape[0])) if indices is None else list(indices)
    if len(indices) != pred.shape[0]:
        raise DimensionMismatchError(f"{len(indices)} indices for {pred.shape[0]} observations")

    diff = pred - target
    loss = float(np.mean(diff * diff))
    scale = 2.0 / diff.size
    return loss, [(index, scale * diff[k]) for k, index in enumerate(indices)]


class TrainConfig(BaseModel):
    """Settings of one training run."""

    model_config = ConfigDict(frozen=True)

    scheme: SchemeId = SchemeId.IMEX_RK3
    dt: float = Field(gt=0)
    steps_per_sample: int = Field(default=1, ge=1)
    batch_size: int = Field(default=16, ge=1)
    epochs: int = Field(default=10, ge=0)
    lr: float = Field(default=1e-3, ge=0)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = Field(default=0, ge=0)
    max_pairs: Optional[int] = Field(default=None, ge=1)
    solver: SolverConfig = SolverConfig()
    newton: NewtonConfig = NewtonConfig()

    def adam(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, beta1=self.adam_beta1, beta2=self.adam_beta2, eps=self.adam_eps)

    def check_dataset(self, dataset: Dataset) -> None:
        """steps_per_sample * dt must reproduce the dataset's sampling interval."""
        covered = self.steps_per_sample * self.dt
        if abs(covered - dataset.dt_sample) > 1e-9:
            raise ConfigError(
                f"steps_per_sample * dt = {covered:g} does not match the dataset sampling interval "
                f"{dataset.dt_sample:g}"
            )


def steps_for(dt: float, sample_interval: float) -> int:
    """Number of steps of size dt covering one sampling interval."""
    steps = int(round(sample_interval / dt))
    if steps < 1 or abs(steps * dt - sample_interval) > 1e-9:
        raise ConfigError(f"Sampling interval {sample_interval:g} is not a multiple of dt={dt:g}")
    return steps


def build_implicit(preset: Dict[str, Any]) -> ImplicitOperator:
    """Fixed linear operator of an experiment preset."""
    if preset["kind"] == "ks":
        return make_ks_stencil(preset["grid"], preset["length"])
    if preset["kind"] == "burgers":
        return make_burgers_diffusion(preset["grid"], preset["length"], preset["nu"])
    raise ConfigError(f"Unknown experiment kind '{preset['kind']}'")


def build_ode(preset: Dict[str, Any], g: ExplicitField) -> PartitionedODE:
    return PartitionedODE(g=g, j=build_implicit(preset))


def make_pairs(
    dataset: Dataset,
    split: str = "train",
    max_pairs: Optional[int] = None,
    seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Consecutive snapshot pairs of one split, as d x n_pairs input and target blocks.

    With ``max_pairs`` a Philox-drawn subset of that size is kept, in original order.
    """
    trajs = dataset.split_data(split)
    if trajs.shape[0] == 0 or dataset.n_times < 2:
        d = dataset.grid
        return np.zeros((d, 0)), np.zeros((d, 0))
    inputs = trajs[:, :-1, :].reshape(-1, dataset.grid).T
    targets = trajs[:, 1:, :].reshape(-1, dataset.grid).T
    if max_pairs is not None and max_pairs < inputs.shape[1]:
        rng = np.random.Generator(np.random.Philox(seed))
        keep = np.sort(rng.choice(inputs.shape[1], size=max_pairs, replace=False))
        inputs, targets = inputs[:, keep], targets[:, keep]
    return np.ascontiguousarray(inputs), np.ascontiguousarray(targets)


def evaluate(
    ode: PartitionedODE,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    solver: Optional[LinearSolver] = None,
    ctr: Optional[NfeCounter] = None,
) -> float:
    """Forward-only mean squared one-sample prediction error; counts go to ``ctr`` only."""
    if inputs.shape[1] == 0:
        return float("nan")
    ctr = ctr if ctr is not None else NfeCounter()
    solver = solver if solver is not None else LinearSolver(ode.j, cfg.solver)
    total = 0.0
    for start in range(0, inputs.shape[1], cfg.batch_size):
        block = slice(start, start + cfg.batch_size)
        final = integrate(ode, cfg.scheme, inputs[:, block], cfg.dt, cfg.steps_per_sample,
                          solver=solver, ctr=ctr, newton_cfg=cfg.newton, store_stages=False).final
        total += float(np.sum((final - targets[:, block]) ** 2))
    return total / targets.size


def train(
    ode: PartitionedODE,
    dataset: Dataset,
    cfg: TrainConfig,
    writer: Optional[MetricsWriter] = None,
    logger=None,
    counter: Optional[NfeCounter] = None,
) -> Tuple[ExplicitField, List[MetricsRow]]:
    """
    Fit the explicit part of ``ode`` to consecutive snapshot pairs.

    Each mini-batch integrates ``steps_per_sample`` steps from the inputs,
    scores the final state against the targets, runs the backward sweep and
    applies one Adam update. J is fixed, so one LinearSolver (and its
    factorization cache) serves the whole run. Explicit schemes are refused
    up front when dt lies outside their stability region for J.

    Returns:
        (trained explicit part, one MetricsRow per epoch)
    """
    log = logger or default_logger
    cfg.check_dataset(dataset)

    inputs, targets = make_pairs(dataset, "train", cfg.max_pairs, cfg.seed)
    test_inputs, test_targets = make_pairs(dataset, "test", cfg.max_pairs, cfg.seed)
    n_pairs = inputs.shape[1]
    if n_pairs == 0:
        raise ConfigError("Dataset has no training pairs")

    if cfg.scheme.is_explicit:
        check_linear_stability(ode, cfg.scheme, cfg.dt)

    ctr = counter if counter is not None else NfeCounter()
    solver = LinearSolver(ode.j, cfg.solver, ctr)
    adam_cfg = cfg.adam()
    state = AdamState.zeros(ode.param_count)
    params = ode.params
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    rows: List[MetricsRow] = []

    log.info(
        f"Training {cfg.scheme.value}: {n_pairs} pairs, batch {cfg.batch_size}, dt={cfg.dt:g} x "
        f"{cfg.steps_per_sample}, {ode.param_count} parameters"
    )
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        before = ctr.snapshot()
        order = rng.permutation(n_pairs)
        loss_sum = 0.0

        for batch, start in enumerate(range(0, n_pairs, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                traj = integrate(ode, cfg.scheme, inputs[:, idx], cfg.dt, cfg.steps_per_sample,
                                 solver=solver, ctr=ctr, newton_cfg=cfg.newton)
                loss, seeds = mse_loss(traj.final[None], targets[:, idx][None], [cfg.steps_per_sample])
                grad_p, _ = backward_sweep(ode, traj, seeds, solver=solver, ctr=ctr, newton_cfg=cfg.newton)
                params[:] = adam_step(params, grad_p, state, adam_cfg)
            except ImexOdeError as e:
                log.error(f"Epoch {epoch}, batch {batch}: {e}")
                raise
            loss_sum += loss * idx.size

        train_loss = loss_sum / n_pairs
        test_loss = None
        if test_inputs.shape[1] > 0:
            test_loss = evaluate(ode, test_inputs, test_targets, cfg, solver=solver, ctr=NfeCounter())
        delta = ctr.since(before)
        row = MetricsRow(
            epoch=epoch,
            wall_time_s=time.perf_counter() - started,
            train_loss=train_loss,
            test_loss=test_loss,
            nfe_fwd=delta.forward_g_evals,
            nfe_bwd=delta.backward_vjp_evals,
            lu_count=ctr.lu_factorizations,
        )
        rows.append(row)
        if writer is not None:
            writer.record(row)
        test_text = "-" if test_loss is None else f"{test_loss:.6e}"
        log.info(
            f"Epoch {epoch}/{cfg.epochs}: train {train_loss:.6e} test {test_text} "
            f"nfe {row.nfe_fwd}+{row.nfe_bwd} lu {row.lu_count}"
        )

    return ode.g, rows
