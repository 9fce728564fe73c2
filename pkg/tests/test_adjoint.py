import numpy as np
import pytest
from scipy.interpolate import CubicSpline as SciSpline

from timeshoot import ConfigError, SolverSpec, StaleSolutionError, TimeGrid
from timeshoot.adjoint import (
    GradientReport,
    finite_difference_grad,
    fit_natural_cubic,
    implicit_gradient,
    interpolated_adjoint_grad,
)
from timeshoot.field import (
    ControlledField,
    MechanicalPlant,
    Mlp,
    ScalarRateField,
    VanDerPol,
    VectorFieldHandle,
)
from timeshoot.sensitivity import batch_flow_with_sensitivity
from timeshoot.shooting import init_shooting, msl_solve, sequential_fine_nodes

from zoo import rel_err, rel_l2

FINE = SolverSpec("dopri5", rtol=1e-8, atol=1e-8)


class ConstantRateField(VectorFieldHandle):
    """dz = theta (constant source with a single trainable parameter)."""

    dim = 1
    param_count = 1

    def __init__(self, theta=0.5):
        self.theta = float(theta)

    def eval(self, t, z):
        return np.full_like(z, self.theta)

    def jac_z(self, t, z):
        return np.zeros(z.shape + (1,))

    def vjp_params(self, t, z, w):
        return np.array([float(np.sum(w))])

    def get_params(self):
        return np.array([self.theta])

    def set_params(self, theta):
        self.theta = float(np.asarray(theta).reshape(()))


def solved_scalar(N=20, theta=-1.0, tol=1e-12):
    field = ScalarRateField(theta)
    grid = TimeGrid.uniform(0.0, 1.0, N)
    state, _, _ = msl_solve(
        field, np.array([1.0]), grid, "newton_fw", FINE, max_iters=N + 2, residual_tol=tol
    )
    return field, grid, state


# ---------------------------------------------------------------- spline


def test_spline_reproduces_linear_data():
    x = np.linspace(0, 3, 7)
    y = (2.0 * x - 1.0)[:, None]
    sp = fit_natural_cubic(x, y)
    for t in np.linspace(0, 3, 40):
        assert sp(t)[0] == pytest.approx(2.0 * t - 1.0, abs=1e-12)
        assert sp.derivative(t, 2)[0] == pytest.approx(0.0, abs=1e-12)


def test_spline_three_node_frozen_oracle():
    # independent tridiagonal-solver oracle value at the midpoint
    sp = fit_natural_cubic([0.0, 1.0, 2.0], np.array([[0.0], [1.0], [0.0]]))
    assert sp(0.5)[0] == pytest.approx(0.6875, abs=1e-14)


def test_spline_knot_values_exact():
    rng = np.random.default_rng(3)
    x = np.sort(rng.uniform(0, 1, 8))
    y = rng.normal(size=(8, 3))
    sp = fit_natural_cubic(x, y)
    for xi, yi in zip(x, y):
        assert np.max(np.abs(sp(xi) - yi)) < 1e-12


def test_spline_c2_continuity_and_natural_boundary():
    # evaluate the adjacent polynomial pieces at (floating-point) the knot
    # itself: value, slope and curvature must agree across the joint
    rng = np.random.default_rng(5)
    x = np.linspace(0, 2, 9)
    y = rng.normal(size=(9, 2))
    sp = fit_natural_cubic(x, y)
    for xi in x[1:-1]:
        lo, hi = np.nextafter(xi, -np.inf), np.nextafter(xi, np.inf)
        assert np.max(np.abs(sp(lo) - sp(hi))) < 1e-10
        for order in (1, 2):
            left = sp.derivative(lo, order)
            right = sp.derivative(hi, order)
            assert np.max(np.abs(left - right)) < 1e-10
    assert np.max(np.abs(sp.derivative(x[0], 2))) < 1e-12
    assert np.max(np.abs(sp.derivative(x[-1], 2))) < 1e-12


def test_spline_matches_scipy_natural():
    rng = np.random.default_rng(11)
    x = np.sort(np.concatenate([[0.0, 4.0], rng.uniform(0, 4, 6)]))
    y = np.cos(x)[:, None]
    mine = fit_natural_cubic(x, y)
    ref = SciSpline(x, y, bc_type="natural", axis=0)
    for t in np.linspace(0, 4, 101):
        assert np.max(np.abs(mine(t) - ref(t))) < 1e-12


def test_spline_validation():
    with pytest.raises(ConfigError):
        fit_natural_cubic([0.0, 1.0], np.zeros((2, 1)))
    with pytest.raises(ConfigError):
        fit_natural_cubic([0.0, 1.0, 1.0], np.zeros((3, 1)))


def test_spline_error_drops_16x_with_node_doubling():
    # h^4 convergence on a smooth trajectory, measured on a fixed interior
    # window: the natural boundary condition leaves O(h^2) layers that decay
    # geometrically with interval count, so a fixed physical margin kills them
    field = VanDerPol(1.0)
    ref_spec = SolverSpec("dopri5", rtol=1e-11, atol=1e-11)
    dense_grid = TimeGrid.uniform(0.0, 4.0, 512)
    ref_nodes = sequential_fine_nodes(field, np.array([2.0, 0.0]), dense_grid, ref_spec)
    dense_t = dense_grid.boundaries
    window = (dense_t > 0.6) & (dense_t < 3.4)

    def spline_err(n_nodes):
        grid = TimeGrid.uniform(0.0, 4.0, n_nodes)
        nodes = sequential_fine_nodes(field, np.array([2.0, 0.0]), grid, ref_spec)
        sp = fit_natural_cubic(grid.boundaries, nodes)
        return max(
            float(np.max(np.abs(sp(t) - r)))
            for t, r in zip(dense_t[window], ref_nodes[window])
        )

    e32, e64, e128 = spline_err(32), spline_err(64), spline_err(128)
    assert 8.0 < e32 / e64 < 40.0
    assert 8.0 < e64 / e128 < 40.0


# ------------------------------------------------------- adjoint route


def test_adjoint_scalar_rate_closed_form():
    field, grid, state = solved_scalar(N=20)
    grads = np.zeros_like(state.B)
    grads[-1] = 1.0
    rep = interpolated_adjoint_grad(field, state, grads)
    truth = np.exp(-1.0)  # d e^{theta T} / d theta at theta = -1, T = 1
    assert rep.grad[0] == pytest.approx(truth, rel=1e-4)
    assert rep.method == "interpolated_adjoint"
    assert rep.grad.shape == (field.param_count,)


def test_adjoint_zero_cost_grads_zero_gradient():
    field, grid, state = solved_scalar(N=8)
    rep = interpolated_adjoint_grad(field, state, np.zeros_like(state.B))
    assert np.all(rep.grad == 0.0)


def test_adjoint_parameter_free_field_still_integrates():
    field = VanDerPol(1.0)
    grid = TimeGrid.uniform(0.0, 1.0, 8)
    state, _, _ = msl_solve(
        field, np.array([2.0, 0.0]), grid, "newton_fw", FINE, max_iters=10, residual_tol=1e-10
    )
    grads = np.zeros_like(state.B)
    grads[-1] = np.array([1.0, 0.0])
    rep = interpolated_adjoint_grad(field, state, grads)
    assert rep.grad.size == 0
    lam = rep.diagnostics["terminal_costate"].costate
    assert np.any(lam != 0.0)  # costate was propagated


def test_adjoint_rejects_unconverged_state():
    field = ScalarRateField(-1.0)
    grid = TimeGrid.uniform(0.0, 1.0, 5)
    state = init_shooting(field, np.array([1.0]), grid, "broadcast")
    grads = np.zeros_like(state.B)
    with pytest.raises(StaleSolutionError):
        interpolated_adjoint_grad(field, state, grads)
    state.last_residual_inf = 0.5
    with pytest.raises(StaleSolutionError):
        interpolated_adjoint_grad(field, state, grads)


def test_adjoint_rejects_bad_grad_shape():
    field, grid, state = solved_scalar(N=5)
    with pytest.raises(ConfigError):
        interpolated_adjoint_grad(field, state, np.zeros((2, 1)))


def test_adjoint_jump_only_cost_start_node_invariance():
    # with cost only at node m the costate is identically zero above t_m, so
    # starting the sweep at t_m changes nothing
    field, grid, state = solved_scalar(N=12)
    m = 7
    grads = np.zeros_like(state.B)
    grads[m] = 1.0
    full = interpolated_adjoint_grad(field, state, grads)
    trimmed = interpolated_adjoint_grad(field, state, grads, start_node=m)
    assert np.array_equal(full.grad, trimmed.grad)
    assert full.grad[0] != 0.0


# ------------------------------------------------------ implicit route


def test_implicit_nilpotent_series_structure():
    # N=2: (I-R)^{-1} = I + R + R^2; row 2 picks up J_1 and J_1 J_0
    field = VanDerPol(1.0)
    grid = TimeGrid.uniform(0.0, 1.0, 2)
    state, _, _ = msl_solve(
        field, np.array([2.0, 0.0]), grid, "newton_fw", FINE, max_iters=5, residual_tol=1e-10
    )
    sens = batch_flow_with_sensitivity(
        field, [state.B[0], state.B[1]], grid.spans(), FINE
    ).sensitivities
    n_z, N = 2, 2
    R = np.zeros(((N + 1) * n_z, (N + 1) * n_z))
    for n in range(N):
        R[(n + 1) * n_z : (n + 2) * n_z, n * n_z : (n + 1) * n_z] = sens[n]
    # nilpotency: R^{N+1} vanishes exactly
    assert np.all(np.linalg.matrix_power(R, N + 1) == 0.0)
    inv = np.linalg.inv(np.eye((N + 1) * n_z) - R)
    series = np.eye((N + 1) * n_z) + R + R @ R
    assert rel_err(inv, series) < 1e-12
    # row 2 block content
    assert np.allclose(series[2 * n_z :, n_z : 2 * n_z], sens[1])
    assert np.allclose(series[2 * n_z :, :n_z], sens[1] @ sens[0])


def test_implicit_zero_cotangent_zero_grad():
    field, grid, state = solved_scalar(N=6)
    rep = implicit_gradient(field, state, FINE, np.zeros_like(state.B))
    assert np.all(rep.grad == 0.0)


def test_implicit_matches_adjoint_scalar():
    field, grid, state = solved_scalar(N=20)
    grads = np.zeros_like(state.B)
    grads[-1] = 1.0
    a = interpolated_adjoint_grad(field, state, grads).grad
    b = implicit_gradient(field, state, FINE, grads).grad
    assert rel_l2(a, b) < 1e-4


def test_implicit_matches_adjoint_small_instance():
    # N=6: agreement is bounded by the natural-spline interpolation error of
    # the adjoint route (the implicit route is exact to solver tolerance)
    field, grid, state = solved_scalar(N=6)
    grads = np.zeros_like(state.B)
    grads[-1] = 1.0
    a = interpolated_adjoint_grad(field, state, grads).grad
    b = implicit_gradient(field, state, FINE, grads).grad
    assert rel_l2(a, b) < 1e-3
    truth = np.exp(-1.0)
    assert b[0] == pytest.approx(truth, rel=1e-8)


def test_implicit_rejects_unconverged():
    field = ScalarRateField(-1.0)
    grid = TimeGrid.uniform(0.0, 1.0, 4)
    state = init_shooting(field, np.array([1.0]), grid, "broadcast")
    with pytest.raises(StaleSolutionError):
        implicit_gradient(field, state, FINE, np.zeros_like(state.B))


# ------------------------------------------- finite-difference oracle


def test_fd_quadratic_loss_near_exact():
    field = ConstantRateField(0.5)
    grid = TimeGrid.uniform(0.0, 1.0, 4)
    z0 = np.array([0.2])

    def loss(B):
        return float(B[-1, 0] ** 2)  # (z0 + theta T)^2, quadratic in theta

    rep = finite_difference_grad(field, z0, grid, loss, FINE, step=1e-4)
    analytic = 2.0 * (0.2 + 0.5 * 1.0) * 1.0
    assert abs(rep.grad[0] - analytic) <= 1e-7
    assert field.get_params()[0] == 0.5  # parameters restored


def test_fd_constant_loss_zero_gradient():
    field = ConstantRateField(0.3)
    grid = TimeGrid.uniform(0.0, 1.0, 3)
    rep = finite_difference_grad(field, np.array([1.0]), grid, lambda B: 7.0, FINE)
    assert np.all(rep.grad == 0.0)


def test_fd_step_validation():
    field = ConstantRateField(0.3)
    grid = TimeGrid.uniform(0.0, 1.0, 3)
    with pytest.raises(ConfigError):
        finite_difference_grad(field, np.array([1.0]), grid, lambda B: 0.0, FINE, step=0.0)


def test_gradient_triangle_controlled_field():
    # adjoint vs finite differences on a Van der Pol style controlled system
    ctrl = Mlp.init([2, 4, 1], ["tanh", "identity"], seed=19)
    field = ControlledField(MechanicalPlant(), ctrl)
    grid = TimeGrid.uniform(0.0, 1.0, 20)
    z0 = np.array([1.0, 0.5])
    state, _, _ = msl_solve(
        field, z0, grid, "newton_fw", FINE, max_iters=25, residual_tol=1e-10
    )
    # smooth node-decomposed loss: sum of |b|^2 over interior+terminal nodes
    grads = np.zeros_like(state.B)
    grads[1:] = 2.0 * state.B[1:]

    def loss(B):
        return float(np.sum(B[1:] ** 2))

    adj = interpolated_adjoint_grad(field, state, grads).grad
    imp = implicit_gradient(field, state, FINE, grads).grad
    fd = finite_difference_grad(field, z0, grid, loss, FINE, step=1e-5).grad
    assert rel_l2(adj, fd) < 1e-3
    assert rel_l2(adj, imp) < 1e-4


def test_gradient_report_fields():
    field, grid, state = solved_scalar(N=5)
    rep = interpolated_adjoint_grad(field, state, np.zeros_like(state.B))
    assert isinstance(rep, GradientReport)
    assert rep.diagnostics["spline_knot_error"] < 1e-12
    assert rep.diagnostics["residual_inf"] == state.last_residual_inf
