import numpy as np
import pytest

from timeshoot import ConfigError, NfeLedger, SolverSpec, StaleSolutionError, TimeGrid
from timeshoot.field import ControlledField, MechanicalPlant, Mlp, ScalarRateField
from timeshoot.problems import LimitCycleLoss, LimitCycleTask
from timeshoot.shooting import init_shooting, matching_residual, sequential_fine_nodes
from timeshoot.tracking import (
    OptimizerState,
    TrainConfig,
    apply_update,
    run_control_training,
    tracking_scaling_experiment,
    train_step,
)

FINE = SolverSpec("dopri5", rtol=1e-9, atol=1e-9)


class TerminalLoss:
    """loss = z_N (scalar state); node grads all zero except the last."""

    def evaluate(self, B):
        grads = np.zeros_like(B)
        grads[-1] = 1.0
        return float(np.sum(B[-1])), grads, np.zeros(1)


def converged_scalar_state(field, grid, z0):
    state = init_shooting(field, z0, grid, "fine_rollout", FINE)
    state.last_residual_inf = matching_residual(field, state, FINE).norm_inf
    return state


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=1e-3, epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=1e-3, optimizer="lbfgs")
    TrainConfig(learning_rate=0.0)  # zero step stays legal: must be a no-op


def test_adam_and_gd_updates():
    cfg = TrainConfig(learning_rate=0.1, optimizer="gd")
    theta = np.array([1.0, -1.0])
    grad = np.array([0.5, 0.5])
    assert np.allclose(apply_update(theta, grad, cfg, OptimizerState.fresh(2)), [0.95, -1.05])
    cfg_a = TrainConfig(learning_rate=0.1, optimizer="adam")
    opt = OptimizerState.fresh(2)
    out = apply_update(theta, grad, cfg_a, opt)
    # first Adam step moves by ~lr in the gradient direction
    assert np.allclose(out, theta - 0.1 * np.sign(grad), atol=1e-6)
    assert opt.step == 1


def test_zero_learning_rate_is_idempotent():
    field = ScalarRateField(-1.0)
    grid = TimeGrid.uniform(0.0, 1.0, 6)
    z0 = np.array([1.0])
    state = converged_scalar_state(field, grid, z0)
    theta_before = field.get_params().copy()
    B_before = state.B.copy()
    cfg = TrainConfig(learning_rate=0.0, optimizer="gd")
    opt = None
    for _ in range(3):
        state, info, opt = train_step(field, state, TerminalLoss(), cfg, FINE, opt)
    assert np.array_equal(field.get_params(), theta_before)
    assert np.max(np.abs(state.B - B_before)) < 1e-8  # solver noise only
    assert info["warm_residual"] < 1e-8


def test_linear_in_theta_one_newton_restores_convergence():
    # gamma is affine in the state for dz = theta z, so a single Newton
    # iteration after any parameter step lands back on the (new) root
    field = ScalarRateField(-1.0)
    grid = TimeGrid.uniform(0.0, 1.0, 5)
    z0 = np.array([1.0])
    state = converged_scalar_state(field, grid, z0)
    cfg = TrainConfig(learning_rate=0.5, optimizer="gd")  # huge step on purpose
    state, info, _ = train_step(field, state, TerminalLoss(), cfg, FINE)
    fresh = sequential_fine_nodes(field, z0, grid, FINE)
    assert np.max(np.abs(state.B - fresh)) < 1e-7
    res = matching_residual(field, state, FINE)
    assert res.norm_inf < 1e-7


def test_divergence_guard_raises():
    field = ScalarRateField(-1.0)
    grid = TimeGrid.uniform(0.0, 1.0, 5)
    state = converged_scalar_state(field, grid, np.array([1.0]))
    cfg = TrainConfig(learning_rate=10.0, optimizer="gd")
    with pytest.raises(StaleSolutionError):
        train_step(field, state, TerminalLoss(), cfg, FINE, guard_threshold=1e-12)


def test_train_step_requires_convergedish_state():
    field = ScalarRateField(-1.0)
    grid = TimeGrid.uniform(0.0, 1.0, 5)
    state = init_shooting(field, np.array([1.0]), grid, "broadcast")
    state.last_residual_inf = 1.0  # way above grad_residual_tol
    cfg = TrainConfig(learning_rate=1e-3)
    with pytest.raises(StaleSolutionError):
        train_step(field, state, TerminalLoss(), cfg, FINE)


def control_setup(nb=8, N=20, seed=3):
    rng = np.random.default_rng(seed)
    ctrl = Mlp.init([2, 8, 1], ["tanh", "identity"], seed=seed)
    field = ControlledField(MechanicalPlant(), ctrl)
    z0 = rng.uniform(-2, 2, size=(nb, 2))
    task = LimitCycleTask(
        z0_batch=z0, curve="circle", control_weight=0.01, horizon=(0.0, 2.0), n_intervals=N
    )
    return field, LimitCycleLoss(task, ctrl), z0, task.grid()


def test_nfe_per_epoch_constant():
    field, loss, z0, grid = control_setup()
    cfg = TrainConfig(learning_rate=1e-4, optimizer="adam", epochs=5)
    _, trace, _ = run_control_training(
        field, loss, z0, grid, cfg, SolverSpec("rk4", step_count=2), reference_spec=None
    )
    totals = {r.total_nfe for r in trace.records}
    spans = {r.span_nfe for r in trace.records}
    assert totals == {20 * 8}
    assert spans == {8}


def test_control_training_tracks_reference():
    field, loss, z0, grid = control_setup()
    cfg = TrainConfig(learning_rate=1e-4, optimizer="adam", epochs=10)
    state, trace, ledger = run_control_training(
        field, loss, z0, grid, cfg, SolverSpec("rk4", step_count=2)
    )
    assert all(np.isfinite(r.smape) for r in trace.records)
    assert max(r.smape for r in trace.records) < 0.05
    assert all(r.residual_inf < 1e-3 for r in trace.records)
    assert trace.records[-1].loss < trace.records[0].loss


def test_scaling_experiment_validation():
    field, loss, z0, grid = control_setup(nb=2, N=5)
    with pytest.raises(ConfigError):
        tracking_scaling_experiment(field, loss, z0, grid, [1e-3, 5e-4], 2)
    with pytest.raises(ConfigError):
        tracking_scaling_experiment(field, loss, z0, grid, [1e-3, 9e-4, 8e-4], 2)


def test_scaling_experiment_quadratic_law_small():
    # desk-size check of the eta^2 law; the acceptance suite runs the full
    # pinned configuration
    rng = np.random.default_rng(0)
    ctrl = Mlp.init([2, 16, 1], ["tanh", "identity"], seed=42)
    field = ControlledField(MechanicalPlant(), ctrl)
    z0 = rng.uniform(-2, 2, size=(4, 2))
    task = LimitCycleTask(z0_batch=z0, curve="circle", horizon=(0.0, 2.0), n_intervals=20)
    loss = LimitCycleLoss(task, ctrl)
    rows, slope = tracking_scaling_experiment(
        field, loss, z0, task.grid(), [1e-3, 5e-4, 2.5e-4], epochs_per_eta=6
    )
    assert 1.5 <= slope <= 2.5
    ratios = [rows[i][1] / rows[i + 1][1] for i in range(len(rows) - 1)]
    assert all(2.5 <= r <= 6.0 for r in ratios)
    # parameters restored after the sweep
    assert field.get_params().shape == (ctrl.n_params,)
