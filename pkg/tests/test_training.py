"""Test suite for the optimizer, loss and training loop."""

import numpy as np
import pytest

from src.imexode.models.datagen import Dataset, generate_burgers, generate_ks, synthetic_dataset
from src.imexode.models.integrator import NfeCounter, rollout
from src.imexode.models.netcore import PartitionedODE, init_weights, make_ks_stencil
from src.imexode.models.tableaux import SchemeId
from src.imexode.models.training import (
    AdamConfig,
    AdamState,
    TrainConfig,
    adam_step,
    build_ode,
    evaluate,
    make_pairs,
    mse_loss,
    steps_for,
    train,
)
from src.imexode.utils.config import Config
from src.imexode.utils.errors import (
    ConfigError,
    DimensionMismatchError,
    NonFiniteGradientError,
    UnstableStepError,
)
from src.imexode.utils.metrics import MetricsWriter, read_metrics, row_tuple


def ks_ode(d=16, seed=0, width=32):
    return PartitionedODE(g=init_weights([d, width, d], 0.1, seed), j=make_ks_stencil(d, 22.0))


def recovery_dataset(d=8, n_traj=3, n_times=6, dt=0.2):
    """Trajectories of a known network, so a student network of the same shape can fit them."""
    truth = PartitionedODE(g=init_weights([d, 16, d], 0.3, seed=99), j=make_ks_stencil(d, 22.0))
    rng = np.random.Generator(np.random.Philox(5))
    u0 = 0.5 * rng.normal(size=(d, n_traj))
    snapshots = rollout(truth, SchemeId.IMEX_RK3, u0, dt, n_times - 1)
    return Dataset(grid=d, length=22.0, dt_sample=dt, data=np.transpose(snapshots, (2, 0, 1)), n_train=2)


class TestAdam:
    """Test cases for the Adam update."""

    def test_first_step_moves_by_lr(self):
        """Test that the bias-corrected first step is lr * sign(grad)."""
        params = np.array([1.0, -2.0, 0.5])
        grad = np.array([3.0, -0.1, 1e-3])
        state = AdamState.zeros(3)
        out = adam_step(params, grad, state, AdamConfig(lr=0.01))
        np.testing.assert_allclose(out, params - 0.01 * np.sign(grad), rtol=1e-4)
        assert state.t == 1
        np.testing.assert_allclose(state.m, 0.1 * grad)

    def test_params_not_modified(self):
        """Test that the input vector is left alone."""
        params = np.ones(4)
        adam_step(params, np.ones(4), AdamState.zeros(4), AdamConfig())
        np.testing.assert_array_equal(params, np.ones(4))

    def test_non_finite_gradient(self):
        """Test that the first NaN entry is reported."""
        grad = np.array([0.0, 1.0, np.nan, np.inf])
        with pytest.raises(NonFiniteGradientError) as exc:
            adam_step(np.zeros(4), grad, AdamState.zeros(4), AdamConfig())
        assert exc.value.index == 2
        assert exc.value.exit_code == 4

    def test_shape_mismatch(self):
        """Test that the gradient must match the parameters."""
        with pytest.raises(DimensionMismatchError):
            adam_step(np.zeros(3), np.zeros(4), AdamState.zeros(3), AdamConfig())


class TestMseLoss:
    """Test cases for the observation loss."""

    def test_value_and_gradients(self):
        """Test the loss value and per-observation gradients."""
        pred = np.array([[1.0, 2.0], [0.0, 0.0]])
        target = np.zeros((2, 2))
        loss, seeds = mse_loss(pred, target, [3, 5])
        assert loss == pytest.approx(5.0 / 4)
        assert [index for index, _ in seeds] == [3, 5]
        np.testing.assert_allclose(seeds[0][1], [0.5, 1.0])
        np.testing.assert_allclose(seeds[1][1], [0.0, 0.0])

    def test_default_indices(self):
        """Test that observations default to consecutive indices."""
        _, seeds = mse_loss(np.ones((3, 2)), np.zeros((3, 2)))
        assert [index for index, _ in seeds] == [0, 1, 2]

    def test_shape_errors(self):
        """Test mismatched shapes and index counts."""
        with pytest.raises(DimensionMismatchError):
            mse_loss(np.ones((2, 3)), np.ones((2, 2)))
        with pytest.raises(DimensionMismatchError):
            mse_loss(np.ones((2, 3)), np.ones((2, 3)), [0])


class TestTrainConfig:
    """Test cases for run settings and step bookkeeping."""

    def test_check_dataset(self):
        """Test that the covered interval must equal the sampling interval."""
        ds = synthetic_dataset(8, 22.0, 0.2, 4)
        TrainConfig(dt=0.1, steps_per_sample=2).check_dataset(ds)
        with pytest.raises(ConfigError):
            TrainConfig(dt=0.1).check_dataset(ds)

    def test_steps_for(self):
        """Test whole and fractional step counts."""
        assert steps_for(0.05, 0.1) == 2
        assert steps_for(0.2, 0.2) == 1
        with pytest.raises(ConfigError):
            steps_for(0.03, 0.1)

    def test_rejects_non_positive_dt(self):
        """Test field validation."""
        with pytest.raises(ValueError):
            TrainConfig(dt=0.0)

    def test_build_ode_from_preset(self):
        """Test that presets pick the implicit operator."""
        preset = Config.get_experiment("burgers512")
        preset["grid"] = 16
        ode = build_ode(preset, init_weights([16, 8, 16], 0.1, 0))
        assert ode.dim == 16
        assert ode.j.is_symmetric


class TestPairs:
    """Test cases for snapshot pairing."""

    def test_pairs_follow_trajectories(self):
        """Test that pairs never straddle two trajectories."""
        data = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4)
        ds = Dataset(grid=4, length=1.0, dt_sample=0.1, data=data, n_train=2)
        inputs, targets = make_pairs(ds)
        assert inputs.shape == targets.shape == (4, 4)
        np.testing.assert_array_equal(inputs[:, 1], data[0, 1])
        np.testing.assert_array_equal(targets[:, 1], data[0, 2])
        np.testing.assert_array_equal(inputs[:, 2], data[1, 0])

    def test_max_pairs_subset(self):
        """Test that a capped subset keeps the original order and is seeded."""
        ds = synthetic_dataset(8, 22.0, 0.2, 20)
        full, _ = make_pairs(ds)
        a, _ = make_pairs(ds, max_pairs=5, seed=3)
        b, _ = make_pairs(ds, max_pairs=5, seed=3)
        assert a.shape == (8, 5)
        np.testing.assert_array_equal(a, b)
        columns = [int(np.flatnonzero(np.all(full == a[:, [k]], axis=0))[0]) for k in range(5)]
        assert columns == sorted(columns)

    def test_empty_test_split(self):
        """Test that a train-only dataset yields no test pairs and a NaN score."""
        ds = synthetic_dataset(8, 22.0, 0.2, 4)
        inputs, targets = make_pairs(ds, "test")
        assert inputs.shape == (8, 0)
        assert np.isnan(evaluate(ks_ode(8), inputs, targets, TrainConfig(dt=0.2)))


class TestTrain:
    """Test cases for the training loop."""

    def test_rows_and_counts(self):
        """Test per-epoch rows, stage-level counts and one shared factorization."""
        ode = ks_ode()
        ds = synthetic_dataset(16, 22.0, 0.2, 8)
        cfg = TrainConfig(scheme=SchemeId.IMEX_RK3, dt=0.2, batch_size=4, epochs=2, lr=1e-3)
        _, rows = train(ode, ds, cfg)
        assert [row.epoch for row in rows] == [1, 2]
        for row in rows:
            assert row.nfe_fwd == 4 * 2
            assert row.nfe_bwd == 4 * 2
            assert row.test_loss is None
            assert np.isfinite(row.train_loss)
        assert rows[-1].lu_count == 1

    def test_shared_counter(self):
        """Test that a caller-owned counter collects forward, recompute and backward work."""
        ctr = NfeCounter()
        ds = synthetic_dataset(16, 22.0, 0.2, 4)
        train(ks_ode(), ds, TrainConfig(scheme=SchemeId.IMEX_RK2, dt=0.2, batch_size=4, epochs=3), counter=ctr)
        assert ctr.forward_g_evals == 2 * 3
        assert ctr.recompute_g_evals == 2 * 3
        assert ctr.backward_vjp_evals == 2 * 3
        assert ctr.forward_nfe == 2 * ctr.backward_vjp_evals

    def test_deterministic(self):
        """Test that a fixed seed reproduces parameters and metrics."""
        ds = synthetic_dataset(16, 22.0, 0.2, 8)
        cfg = TrainConfig(dt=0.2, batch_size=3, epochs=2, seed=4)
        a, rows_a = train(ks_ode(seed=1), ds, cfg)
        b, rows_b = train(ks_ode(seed=1), ds, cfg)
        np.testing.assert_array_equal(a.params, b.params)
        assert [row_tuple(r) for r in rows_a] == [row_tuple(r) for r in rows_b]

    def test_writer_receives_rows(self, tmp_path):
        """Test that every epoch is written and reads back."""
        path = tmp_path / "metrics.csv"
        ds = synthetic_dataset(16, 22.0, 0.2, 4)
        with MetricsWriter(str(path), provenance=["scheme=imex-rk3"]) as writer:
            _, rows = train(ks_ode(), ds, TrainConfig(dt=0.2, batch_size=2, epochs=3), writer=writer)
        back = read_metrics(str(path))
        assert [row_tuple(r) for r in back] == [row_tuple(r) for r in rows]
        assert path.read_text().startswith("# scheme=imex-rk3")

    def test_zero_epochs(self):
        """Test that zero epochs leave the model untouched."""
        ode = ks_ode()
        before = ode.params.copy()
        _, rows = train(ode, synthetic_dataset(16, 22.0, 0.2, 4), TrainConfig(dt=0.2, epochs=0))
        assert rows == []
        np.testing.assert_array_equal(ode.params, before)

    def test_explicit_scheme_refused_when_unstable(self):
        """Test that ERK4 at the KS-64 step size is stopped before training."""
        ode = PartitionedODE(g=init_weights([64, 8, 64], 0.01, 0), j=make_ks_stencil(64, 22.0))
        ds = synthetic_dataset(64, 22.0, 0.2, 4)
        before = ode.params.copy()
        with pytest.raises(UnstableStepError) as exc:
            train(ode, ds, TrainConfig(scheme=SchemeId.ERK4, dt=0.2, epochs=1))
        assert exc.value.exit_code == 4
        assert exc.value.amplification > 1e6
        np.testing.assert_array_equal(ode.params, before)

    def test_explicit_scheme_allowed_when_stable(self):
        """Test that explicit training proceeds inside the stability region."""
        ds = synthetic_dataset(16, 22.0, 0.2, 4)
        _, rows = train(ks_ode(), ds, TrainConfig(scheme=SchemeId.ERK4, dt=0.2, batch_size=4, epochs=1))
        assert rows[0].nfe_fwd == 4
        assert rows[0].lu_count == 0

    def test_dataset_interval_mismatch(self):
        """Test that dt must tile the sampling interval."""
        with pytest.raises(ConfigError):
            train(ks_ode(), synthetic_dataset(16, 22.0, 0.2, 4), TrainConfig(dt=0.15))

    def test_loss_decreases(self):
        """Test that fitting trajectories of a network of the same shape reduces the loss."""
        ds = recovery_dataset()
        ode = PartitionedODE(g=init_weights([8, 16, 8], 0.1, seed=3), j=make_ks_stencil(8, 22.0))
        cfg = TrainConfig(dt=0.2, batch_size=5, epochs=40, lr=1e-2)
        _, rows = train(ode, ds, cfg)
        assert rows[-1].train_loss < rows[0].train_loss
        assert rows[-1].test_loss is not None

    def test_single_small_step_does_not_increase_loss(self):
        """Test that one full-batch Adam step at lr=1e-5 lowers the training loss."""
        ds = recovery_dataset()
        ode = PartitionedODE(g=init_weights([8, 16, 8], 0.1, seed=3), j=make_ks_stencil(8, 22.0))
        inputs, targets = make_pairs(ds)
        cfg = TrainConfig(dt=0.2, batch_size=inputs.shape[1], epochs=1, lr=1e-5)
        before = evaluate(ode, inputs, targets, cfg)
        _, rows = train(ode, ds, cfg)
        after = evaluate(ode, inputs, targets, cfg)
        assert rows[0].train_loss == pytest.approx(before)
        assert after < before

    @pytest.mark.slow
    def test_ks64_loss_drops_tenfold(self):
        """Test a tenfold drop on post-transient KS-64 data with IMEX-RK3 at dt=0.2."""
        ds = generate_ks(64, transient=200.0, span=40.0)
        preset = Config.get_experiment("ks64")
        ode = build_ode(preset, init_weights([64, 64, 64, 64], preset["sigma"], seed=0))
        cfg = TrainConfig(scheme=SchemeId.IMEX_RK3, dt=0.2, epochs=200)
        _, rows = train(ode, ds, cfg)
        assert len(rows) == 200
        assert rows[-1].train_loss * 10.0 <= rows[0].train_loss

    @pytest.mark.slow
    def test_burgers512_loss_drops_tenfold(self):
        """Test a tenfold drop on the 512 grid with a narrow network and two steps per sample."""
        ds = generate_burgers(d=512, n_traj=4, t_final=1.0)
        preset = Config.get_experiment("burgers512")
        ode = build_ode(preset, init_weights([512, 128, 128, 512], preset["sigma"], seed=0))
        cfg = TrainConfig(scheme=SchemeId.IMEX_RK3, dt=0.05, steps_per_sample=2, batch_size=8,
                          epochs=150, lr=2e-3)
        _, rows = train(ode, ds, cfg)
        assert rows[-1].train_loss * 10.0 <= rows[0].train_loss
        assert rows[-1].lu_count == 1

    @pytest.mark.slow
    def test_burgers_desk_run(self):
        """Test a desk-scale Burgers run with two steps per sample."""
        ds = generate_burgers(d=32, n_traj=5, t_final=1.0)
        preset = Config.get_experiment("burgers512")
        preset["grid"] = 32
        ode = build_ode(preset, init_weights([32, 64, 64, 32], 0.1, seed=0))
        cfg = TrainConfig(dt=0.05, steps_per_sample=2, batch_size=8, epochs=15, lr=3e-3)
        _, rows = train(ode, ds, cfg)
        assert rows[-1].train_loss < rows[0].train_loss
        assert rows[-1].lu_count == 1
