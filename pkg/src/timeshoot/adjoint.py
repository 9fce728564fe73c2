"""Gradients of losses evaluated at converged shooting parameters.

Three routes are provided and cross-checked in the test suite:

* interpolated adjoint: the costate runs backward against a natural cubic
  spline through the shooting parameters (the forward ODE is never re-solved),
  picking up per-node cost gradients as jump conditions;
* implicit differentiation: the nilpotent block structure of the matching
  Jacobian turns the inverse into a finite series of block-shift products,
  followed by per-sub-interval cotangent accumulation;
* central finite differences over the parameters (the slow oracle).

The costate convention is dlambda/dt = -(df/dz)^T lambda (the transposed
product), and the accumulator returns the gradient of the loss directly, so
the descent direction is its negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ConfigError, StaleSolutionError
from .ledger import NfeLedger
from .odecore import SolverSpec, integrate_fn
from .sensitivity import batch_flow_with_sensitivity
from .shooting import ShootingState, sequential_fine_nodes

DEFAULT_BACKWARD = SolverSpec("dopri5", rtol=1e-7, atol=1e-7)


class CubicSpline:
    """Natural cubic interpolant: second derivative zero at both ends.

    Values may carry trailing batch/state axes; evaluation returns that
    trailing shape.  Queries outside the knot range use the boundary cubics.
    """

    def __init__(self, knots, values, second_derivs):
        self.knots = knots
        self.values = values
        self.second_derivs = second_derivs

    def _locate(self, t):
        i = int(np.searchsorted(self.knots, t, side="right")) - 1
        return min(max(i, 0), len(self.knots) - 2)

    def __call__(self, t):
        i = self._locate(t)
        x, y, M = self.knots, self.values, self.second_derivs
        h = x[i + 1] - x[i]
        a, b = (x[i + 1] - t) / h, (t - x[i]) / h
        return (
            a * y[i]
            + b * y[i + 1]
            + ((a**3 - a) * M[i] + (b**3 - b) * M[i + 1]) * h * h / 6.0
        )

    def derivative(self, t, order: int = 1):
        i = self._locate(t)
        x, y, M = self.knots, self.values, self.second_derivs
        h = x[i + 1] - x[i]
        a, b = (x[i + 1] - t) / h, (t - x[i]) / h
        if order == 1:
            return (
                (y[i + 1] - y[i]) / h
                + ((3 * b * b - 1) * M[i + 1] - (3 * a * a - 1) * M[i]) * h / 6.0
            )
        if order == 2:
            return a * M[i] + b * M[i + 1]
        raise ConfigError("only first and second derivatives are available")


def fit_natural_cubic(times, values) -> CubicSpline:
    """Fit a natural cubic spline through (times[i], values[i]).

    ``values`` has shape (n_nodes, ...); the tridiagonal system for the
    second derivatives is solved once, vectorized over trailing axes."""
    x = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if x.ndim != 1 or len(x) != len(y):
        raise ConfigError("times and values must align on the first axis")
    if len(x) < 3:
        raise ConfigError("need at least 3 nodes for a cubic spline")
    if not np.all(np.diff(x) > 0):
        raise ConfigError("node times must be strictly increasing (no duplicates)")

    m = len(x)
    h = np.diff(x)
    M = np.zeros_like(y)
    if m > 2:
        # Thomas algorithm on the interior equations
        tail = y.shape[1:]
        rhs = np.zeros((m - 2,) + tail)
        for i in range(1, m - 1):
            rhs[i - 1] = 6.0 * (
                (y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]
            )
        diag = np.array([2.0 * (h[i - 1] + h[i]) for i in range(1, m - 1)])
        off = h[1 : m - 2]
        d = diag.copy()
        for i in range(1, m - 2):
            w = off[i - 1] / d[i - 1]
            d[i] = d[i] - w * off[i - 1]
            rhs[i] = rhs[i] - w * rhs[i - 1]
        sol = np.zeros_like(rhs)
        sol[-1] = rhs[-1] / d[-1]
        for i in range(m - 4, -1, -1):
            sol[i] = (rhs[i] - off[i] * sol[i + 1]) / d[i]
        M[1 : m - 1] = sol
    return CubicSpline(x, y, M)


@dataclass
class AdjointState:
    """Backward-pass carrier: costate vector and accumulated parameter grad."""

    costate: np.ndarray
    mu: np.ndarray


@dataclass
class GradientReport:
    grad: np.ndarray
    method: str
    diagnostics: dict = dc_field(default_factory=dict)


def _require_converged(state: ShootingState, residual_tol: float):
    if state.last_residual_inf is None:
        raise StaleSolutionError("state carries no residual; solve before taking gradients")
    if state.last_residual_inf > residual_tol:
        raise StaleSolutionError(
            f"state residual {state.last_residual_inf:.3e} exceeds {residual_tol:.3e}; "
            "the gradient would be biased"
        )


def _as_grad_array(node_cost_grads, B):
    g = np.asarray(node_cost_grads, dtype=float)
    if g.shape != B.shape:
        raise ConfigError(
            f"node cost gradients shape {g.shape} must match shooting parameters {B.shape}"
        )
    return g


def interpolated_adjoint_grad(
    field,
    state: ShootingState,
    node_cost_grads,
    spec_backward: SolverSpec = DEFAULT_BACKWARD,
    residual_tol: float = 1e-5,
    start_node: int | None = None,
    ledger: NfeLedger | None = None,
) -> GradientReport:
    """Backward costate sweep against the spline of the shooting parameters.

    The costate starts at the terminal node's cost gradient, integrates
    backward one sub-interval at a time reading z(t) from the spline, and
    jumps by the node cost gradient at each interior node.  ``start_node``
    trims the sweep (the stretch above the last nonzero cost gradient carries
    an identically zero costate, so trimming leaves the result unchanged)."""
    _require_converged(state, residual_tol)
    B = state.B
    grads = _as_grad_array(node_cost_grads, B)
    N = state.n_intervals
    start = N if start_node is None else int(start_node)
    if not 1 <= start <= N:
        raise ConfigError("start_node must lie in [1, N]")
    bounds = state.grid.boundaries
    spline = fit_natural_cubic(bounds, B)
    knot_err = max(
        float(np.max(np.abs(spline(bounds[n]) - B[n]))) for n in range(N + 1)
    )

    n_theta = field.param_count
    lam = grads[start].astype(float).copy()
    mu = np.zeros(n_theta)
    lam_size = lam.size

    for n in range(start - 1, -1, -1):
        t_lo, t_hi = bounds[n], bounds[n + 1]
        h = t_hi - t_lo

        def dyn(tau, y, t_hi=t_hi):
            t = t_hi - tau
            z = spline(t)
            lam_now = y[:lam_size].reshape(lam.shape)
            dlam, dmu = field.vjp_both(t, z, lam_now)
            return np.concatenate([dlam.ravel(), dmu])

        y0 = np.concatenate([lam.ravel(), mu])
        _, ys, neval = integrate_fn(dyn, y0, (0.0, h), spec_backward)
        if ledger is not None:
            ledger.tick(jvp=2 * neval)
        lam = ys[-1][:lam_size].reshape(lam.shape)
        mu = ys[-1][lam_size:]
        if n > 0:
            lam = lam + grads[n]

    return GradientReport(
        grad=mu,
        method="interpolated_adjoint",
        diagnostics={
            "residual_inf": state.last_residual_inf,
            "spline_knot_error": knot_err,
            "terminal_costate": AdjointState(costate=lam, mu=mu),
        },
    )


def implicit_gradient(
    field,
    state: ShootingState,
    spec: SolverSpec,
    loss_grad_B,
    residual_tol: float = 1e-5,
    ledger: NfeLedger | None = None,
    pool=None,
) -> GradientReport:
    """Implicit-function gradient through the matching condition.

    The transposed inverse of (I - block-shift of flow sensitivities) is a
    finite series because the shift operator is nilpotent; it is applied as
    repeated block products, never assembled.  Each resulting per-node
    cotangent is pushed onto the parameters by a backward solve over its
    sub-interval."""
    _require_converged(state, residual_tol)
    B = state.B
    w = _as_grad_array(loss_grad_B, B)
    N = state.n_intervals
    bounds = state.grid.boundaries

    sens = batch_flow_with_sensitivity(
        field, [B[n] for n in range(N)], state.grid.spans(), spec, ledger=ledger, pool=pool
    ).sensitivities

    # v^T = w^T (I + R + R^2 + ...): acc starts at w and shifts down one
    # block row per term; the series dies after at most N applications.
    v = w.copy()
    acc = w.copy()
    for _ in range(N):
        nxt = np.zeros_like(acc)
        for m in range(N):
            nxt[m] = np.einsum("...ji,...j->...i", sens[m], acc[m + 1])
        acc = nxt
        if not np.any(acc):
            break
        v += acc

    n_theta = field.param_count
    mu_total = np.zeros(n_theta)
    for n in range(N):
        cot = v[n + 1]
        if not np.any(cot):
            continue
        t_lo, t_hi = bounds[n], bounds[n + 1]
        z_end = B[n + 1].astype(float)
        lam_size = cot.size
        z_size = z_end.size

        def dyn(tau, y, t_hi=t_hi, shape=z_end.shape):
            t = t_hi - tau
            z = y[:z_size].reshape(shape)
            lam_now = y[z_size : z_size + lam_size].reshape(shape)
            dz = -field.eval(t, z)
            dlam, dmu = field.vjp_both(t, z, lam_now)
            return np.concatenate([dz.ravel(), dlam.ravel(), dmu])

        y0 = np.concatenate([z_end.ravel(), cot.ravel(), np.zeros(n_theta)])
        _, ys, neval = integrate_fn(dyn, y0, (0.0, t_hi - t_lo), spec)
        if ledger is not None:
            ledger.tick(nfe=neval, jvp=2 * neval)
        mu_total += ys[-1][z_size + lam_size :]

    return GradientReport(
        grad=mu_total,
        method="implicit",
        diagnostics={"residual_inf": state.last_residual_inf},
    )


def finite_difference_grad(
    field,
    z0,
    grid,
    loss_fn,
    spec: SolverSpec,
    step: float = 1e-4,
    ledger: NfeLedger | None = None,
) -> GradientReport:
    """Central differences over every parameter; forward solves are
    sequential fine integrations of the grid nodes."""
    if step <= 0:
        raise ConfigError("finite-difference step must be positive")
    theta0 = field.get_params().copy()
    grad = np.zeros_like(theta0)
    try:
        for i in range(theta0.size):
            th = theta0.copy()
            th[i] += step
            field.set_params(th)
            up = float(loss_fn(sequential_fine_nodes(field, z0, grid, spec, ledger=ledger)))
            th[i] -= 2 * step
            field.set_params(th)
            dn = float(loss_fn(sequential_fine_nodes(field, z0, grid, spec, ledger=ledger)))
            grad[i] = (up - dn) / (2 * step)
    finally:
        field.set_params(theta0)
    return GradientReport(grad=grad, method="finite_difference", diagnostics={"step": step})
