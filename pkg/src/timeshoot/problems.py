"""Benchmark problem definitions: desired curves, node-decomposed losses,
the SMAPE tracking metric, and the bundled linear boundary-control system.

Losses report three pieces: the scalar value, per-node cost gradients (the
jump terms consumed by the adjoint), and the direct parameter gradient of
any cost term that touches the controller explicitly (control effort), which
is added on top of whichever dynamic-path gradient route is used.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from importlib import resources

import numpy as np

from .errors import ConfigError
from .field import LinearPlant, Mlp, load_matrix_csv
from .odecore import TimeGrid

CURVES = ("circle", "circus")


def curve_value(curve: str, q, p, alpha: float = 1.0, k: float = 1.0):
    """Signed distance-like level value of the desired closed curve."""
    q, p = np.asarray(q, dtype=float), np.asarray(p, dtype=float)
    if curve == "circle":
        return q * q + p * p - 1.0
    if curve == "circus":
        r1 = np.sqrt((q - alpha) ** 2 + p * p)
        r2 = np.sqrt((q + alpha) ** 2 + p * p)
        return r1 * r2 - k
    raise ConfigError(f"unknown curve {curve!r}")


def curve_grad(curve: str, q, p, alpha: float = 1.0, k: float = 1.0):
    """(d/dq, d/dp) of :func:`curve_value`."""
    q, p = np.asarray(q, dtype=float), np.asarray(p, dtype=float)
    if curve == "circle":
        return 2.0 * q, 2.0 * p
    if curve == "circus":
        eps = 1e-300
        r1 = np.sqrt((q - alpha) ** 2 + p * p) + eps
        r2 = np.sqrt((q + alpha) ** 2 + p * p) + eps
        dq = r2 * (q - alpha) / r1 + r1 * (q + alpha) / r2
        dp = p * (r2 / r1 + r1 / r2)
        return dq, dp
    raise ConfigError(f"unknown curve {curve!r}")


@dataclass
class LimitCycleTask:
    """Stabilize trajectories of the 1-dof mechanical system onto a curve."""

    z0_batch: np.ndarray
    curve: str = "circle"
    curve_alpha: float = 1.0
    curve_k: float = 1.0
    control_weight: float = 0.0
    horizon: tuple = (0.0, 10.0)
    n_intervals: int = 100

    def __post_init__(self):
        self.z0_batch = np.atleast_2d(np.asarray(self.z0_batch, dtype=float))
        if self.curve not in CURVES:
            raise ConfigError(f"unknown curve {self.curve!r}")
        if self.control_weight < 0:
            raise ConfigError("control weight must be >= 0")

    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.horizon[0], self.horizon[1], self.n_intervals)


class LimitCycleLoss:
    """Curve distance plus control effort, averaged as 1/(2 N |Z0|).

    Nodes 1..N enter the sum (node 0 is the pinned initial condition);
    absolute values use sign subgradients with sign(0) = 0.
    """

    def __init__(self, task: LimitCycleTask, controller: Mlp | None = None):
        if task.control_weight > 0 and controller is None:
            raise ConfigError("control effort term needs the controller")
        self.task = task
        self.controller = controller

    def evaluate(self, B: np.ndarray):
        """Returns (value, node_cost_grads, direct_param_grad)."""
        task = self.task
        N = B.shape[0] - 1
        nb = B[0].reshape(-1, B.shape[-1]).shape[0]
        scale = 1.0 / (2.0 * N * nb)
        node_grads = np.zeros_like(B)
        n_theta = self.controller.n_params if self.controller is not None else 0
        direct = np.zeros(n_theta)
        value = 0.0
        for n in range(1, N + 1):
            z = B[n]
            q, p = z[..., 0], z[..., 1]
            s = curve_value(task.curve, q, p, task.curve_alpha, task.curve_k)
            value += float(np.sum(np.abs(s)))
            sgn = np.sign(s)
            dq, dp = curve_grad(task.curve, q, p, task.curve_alpha, task.curve_k)
            node_grads[n, ..., 0] = sgn * dq
            node_grads[n, ..., 1] = sgn * dp
            if task.control_weight > 0:
                u, cache = self.controller.forward_cache(z)
                value += task.control_weight * float(np.sum(np.abs(u)))
                dz, dtheta = self.controller.vjp(cache, np.sign(u))
                node_grads[n] += task.control_weight * dz
                direct += task.control_weight * dtheta
        return scale * value, scale * node_grads, scale * direct


def limit_cycle_loss(task: LimitCycleTask, state, controller: Mlp | None = None):
    """Loss value and the per-node jump gradients for a solved state."""
    value, node_grads, _ = LimitCycleLoss(task, controller).evaluate(state.B)
    return value, node_grads


def smape(reference, test) -> float:
    """Symmetric mean absolute percentage error, elementwise in [0, 2]."""
    x = np.asarray(reference, dtype=float)
    y = np.asarray(test, dtype=float)
    if x.shape != y.shape:
        raise ConfigError(f"trajectory shapes differ: {x.shape} vs {y.shape}")
    return float(np.mean(2.0 * np.abs(x - y) / (np.abs(x) + np.abs(y) + 1e-12)))


@dataclass
class LinearControlTask:
    """Pre-assembled linear plant dz = A z + B u with partitioned strain
    blocks entering the stabilization loss."""

    A: np.ndarray
    B_in: np.ndarray
    sigma_r: np.ndarray = dc_field(default=None)
    sigma_t: np.ndarray = dc_field(default=None)
    control_weight: float = 0.0

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ConfigError(f"A must be square, got {self.A.shape}")
        if self.B_in.ndim != 2 or self.B_in.shape[0] != n:
            raise ConfigError(
                f"B rows ({self.B_in.shape[0]}) must match A dimension ({n})"
            )
        quarter = n // 4
        if self.sigma_r is None:
            self.sigma_r = np.arange(2 * quarter, 3 * quarter)
        if self.sigma_t is None:
            self.sigma_t = np.arange(3 * quarter, n)
        self.sigma_r = np.asarray(self.sigma_r, dtype=int)
        self.sigma_t = np.asarray(self.sigma_t, dtype=int)
        both = np.concatenate([self.sigma_r, self.sigma_t])
        if both.size and (both.min() < 0 or both.max() >= n):
            raise ConfigError("partition indices out of range")
        if len(np.intersect1d(self.sigma_r, self.sigma_t)):
            raise ConfigError("partition blocks must be disjoint")

    @property
    def n_z(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B_in.shape[1]

    def plant(self) -> LinearPlant:
        return LinearPlant(self.A, self.B_in)


class BeamStabilizationLoss:
    """Strain-block norms plus control effort, averaged as 1/N over nodes 1..N."""

    def __init__(self, task: LinearControlTask, controller: Mlp | None = None):
        if task.control_weight > 0 and controller is None:
            raise ConfigError("control effort term needs the controller")
        self.task = task
        self.controller = controller

    def evaluate(self, B: np.ndarray):
        task = self.task
        N = B.shape[0] - 1
        scale = 1.0 / N
        node_grads = np.zeros_like(B)
        n_theta = self.controller.n_params if self.controller is not None else 0
        direct = np.zeros(n_theta)
        value = 0.0
        for n in range(1, N + 1):
            z = B[n]
            for idx in (task.sigma_r, task.sigma_t):
                block = z[..., idx]
                nrm = np.linalg.norm(block, axis=-1)
                value += float(np.sum(nrm))
                safe = np.where(nrm > 0, nrm, 1.0)
                node_grads[n, ..., idx] += block / safe[..., None]
            if task.control_weight > 0:
                u, cache = self.controller.forward_cache(z)
                value += task.control_weight * float(np.sum(np.abs(u)))
                dz, dtheta = self.controller.vjp(cache, np.sign(u))
                node_grads[n] += task.control_weight * dz
                direct += task.control_weight * dtheta
        return scale * value, scale * node_grads, scale * direct


def load_linear_system(
    path_A,
    path_B,
    sigma_r=None,
    sigma_t=None,
    control_weight: float = 0.0,
) -> LinearControlTask:
    """Load a pre-assembled (A, B) pair from matrix CSV files."""
    A = load_matrix_csv(path_A)
    B = load_matrix_csv(path_B)
    return LinearControlTask(
        A=A, B_in=B, sigma_r=sigma_r, sigma_t=sigma_t, control_weight=control_weight
    )


def load_bundled_linear_system(control_weight: float = 0.0) -> LinearControlTask:
    """The 20-dimensional sample system shipped with the package."""
    pkg = resources.files("timeshoot") / "data"
    return load_linear_system(
        str(pkg / "beam_A.csv"), str(pkg / "beam_B.csv"), control_weight=control_weight
    )
