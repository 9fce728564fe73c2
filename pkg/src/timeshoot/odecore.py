"""Explicit Runge-Kutta integrators over time grids, with evaluation accounting.

Fixed-step ``euler`` and ``rk4`` take ``step_count`` equal steps per span.
``dopri5`` is the standard Dormand-Prince 5(4) embedded pair with PI step
control and the classical starting-step heuristic.  States are plain numpy
arrays; a trailing axis of size ``n_z`` with arbitrary leading batch axes is
supported throughout (adaptive error control is then taken over the whole
batch, which keeps the step sequence shared).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalBlowup, StiffnessFailure
from .ledger import NfeLedger

FIXED_STEP_METHODS = {"euler": 1, "rk4": 4}
METHODS = ("euler", "rk4", "dopri5")

# Dormand-Prince 5(4) tableau.  Seven stages, no FSAL reuse: every stage is
# evaluated each step so raw evaluation counts match the ledger formulas.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = (
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
)
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# b5 - b4: coefficients of the embedded local error estimate
_DP_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)

_SAFETY = 0.9
_BETA = 0.04
_ERR_EXP = 0.2 - 0.75 * _BETA
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_MAX_STEPS = 1_000_000


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing sub-interval boundaries t_0 < t_1 < ... < t_N."""

    boundaries: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.ndim != 1 or b.size < 2:
            raise ConfigError("time grid needs at least two boundary times")
        if not np.all(np.diff(b) > 0):
            raise ConfigError("time grid boundaries must be strictly increasing")
        object.__setattr__(self, "boundaries", b)

    @classmethod
    def uniform(cls, t0: float, tN: float, n_intervals: int) -> "TimeGrid":
        if n_intervals < 1:
            raise ConfigError("need at least one sub-interval")
        if not tN > t0:
            raise ConfigError("tN must exceed t0")
        return cls(np.linspace(t0, tN, n_intervals + 1))

    @property
    def t0(self) -> float:
        return float(self.boundaries[0])

    @property
    def tN(self) -> float:
        return float(self.boundaries[-1])

    @property
    def n_intervals(self) -> int:
        return len(self.boundaries) - 1

    def spans(self) -> list[tuple[float, float]]:
        b = self.boundaries
        return [(float(b[i]), float(b[i + 1])) for i in range(len(b) - 1)]


@dataclass(frozen=True)
class SolverSpec:
    """Integrator selection: fixed-step methods use ``step_count`` equal steps
    per span, ``dopri5`` controls local error to rtol*|z| + atol."""

    method: str = "dopri5"
    step_count: int = 1
    rtol: float = 1e-7
    atol: float = 1e-7

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}, pick one of {METHODS}")
        if self.method in FIXED_STEP_METHODS and self.step_count < 1:
            raise ConfigError("step_count must be >= 1 for fixed-step methods")
        if self.method == "dopri5" and (self.rtol <= 0 or self.atol <= 0):
            raise ConfigError("rtol and atol must be positive for dopri5")

    @property
    def is_fixed_step(self) -> bool:
        return self.method in FIXED_STEP_METHODS

    @property
    def stages(self) -> int:
        return FIXED_STEP_METHODS.get(self.method, 7)


@dataclass
class Trajectory:
    """Ordered (time, state) samples; the last state is the flow endpoint."""

    times: np.ndarray
    states: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


class WorkerPool:
    """Maps work items over an optional thread pool, preserving order.

    Each item runs through the identical single-element code path regardless
    of thread count, so fixed-step results are bitwise reproducible."""

    def __init__(self, threads: int = 1):
        self.threads = max(1, int(threads))

    def map(self, fn, items):
        items = list(items)
        if self.threads <= 1 or len(items) <= 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=self.threads) as ex:
            return list(ex.map(fn, items))


def _check_finite(y, t):
    if not np.all(np.isfinite(y)):
        raise NumericalBlowup(f"non-finite state at t={t:.9g}", t=t)


def step_fixed(field, t, z, h, method="rk4", ledger: NfeLedger | None = None):
    """One explicit step of ``euler`` or ``rk4`` from (t, z) with step h > 0."""
    if h <= 0:
        raise ConfigError("step size must be positive")
    f = field.eval
    z = np.asarray(z, dtype=float)
    if method == "euler":
        out = z + h * f(t, z)
        nfe = 1
    elif method == "rk4":
        k1 = f(t, z)
        k2 = f(t + 0.5 * h, z + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, z + 0.5 * h * k2)
        k4 = f(t + h, z + h * k3)
        out = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        nfe = 4
    else:
        raise ConfigError(f"step_fixed supports fixed-step methods, not {method!r}")
    if ledger is not None:
        ledger.tick(nfe=nfe)
    _check_finite(out, t + h)
    return out


def _fixed_path(f, z0, t_a, t_b, spec):
    m = spec.step_count
    h = (t_b - t_a) / m
    times = t_a + h * np.arange(m + 1)
    times[-1] = t_b
    states = np.empty((m + 1,) + z0.shape)
    states[0] = z0
    z = z0
    stages = FIXED_STEP_METHODS[spec.method]
    for i in range(m):
        t = times[i]
        if spec.method == "euler":
            z = z + h * f(t, z)
        else:
            k1 = f(t, z)
            k2 = f(t + 0.5 * h, z + 0.5 * h * k1)
            k3 = f(t + 0.5 * h, z + 0.5 * h * k2)
            k4 = f(t + h, z + h * k3)
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_finite(z, times[i + 1])
        states[i + 1] = z
    return times, states, stages * m


def _err_norm(e, y0, y1, rtol, atol, err_len):
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    r = (e / scale).ravel()
    if err_len is not None:
        r = r[:err_len]
    return float(np.sqrt(np.mean(r * r)))


def _initial_step(f, t0, z0, f0, t_b, rtol, atol, err_len):
    # Classical starting-step heuristic (one extra probe evaluation).
    scale = atol + rtol * np.abs(z0)
    r0 = (z0 / scale).ravel()
    r1 = (f0 / scale).ravel()
    if err_len is not None:
        r0, r1 = r0[:err_len], r1[:err_len]
    d0 = float(np.sqrt(np.mean(r0 * r0)))
    d1 = float(np.sqrt(np.mean(r1 * r1)))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, t_b - t0)
    f1 = f(t0 + h0, z0 + h0 * f0)
    r2 = ((f1 - f0) / scale).ravel()
    if err_len is not None:
        r2 = r2[:err_len]
    d2 = float(np.sqrt(np.mean(r2 * r2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1, t_b - t0)


def _dopri5_path(f, z0, t_a, t_b, rtol, atol, err_len):
    t = t_a
    y = z0
    f0 = f(t, y)
    nfe = 1
    h = _initial_step(f, t_a, z0, f0, t_b, rtol, atol, err_len)
    nfe += 1
    times = [t_a]
    states = [z0]
    err_old = 1e-4
    k = [None] * 7
    for _ in range(_MAX_STEPS):
        if t >= t_b:
            break
        # snap the final step so roundoff cannot leave a sliver below t_b
        final_step = h >= t_b - t
        if final_step:
            h = t_b - t
        if h < 16.0 * np.finfo(float).eps * max(1.0, abs(t)):
            raise StiffnessFailure(
                f"dopri5 step size underflow at t={t:.9g} (h={h:.3e})"
            )
        k[0] = f(t, y)
        for s in range(1, 7):
            ys = y + h * sum(a * k[j] for j, a in enumerate(_DP_A[s - 1]))
            k[s] = f(t + _DP_C[s] * h, ys)
        nfe += 7
        y_new = y + h * sum(b * k[j] for j, b in enumerate(_DP_B5) if b != 0.0)
        e = h * sum(c * k[j] for j, c in enumerate(_DP_E) if c != 0.0)
        if not np.all(np.isfinite(y_new)):
            raise NumericalBlowup(f"non-finite state at t={t + h:.9g}", t=t + h)
        err = _err_norm(e, y, y_new, rtol, atol, err_len)
        if not math.isfinite(err):
            raise NumericalBlowup(f"non-finite error estimate at t={t + h:.9g}", t=t + h)
        if err <= 1.0:
            t = t_b if final_step else t + h
            y = y_new
            times.append(t)
            states.append(y)
            fac = (max(err, 1e-10)) ** (-_ERR_EXP) * err_old ** _BETA
            err_old = max(err, 1e-4)
        else:
            fac = (max(err, 1e-10)) ** (-_ERR_EXP)
        h = h * min(_MAX_FACTOR, max(_MIN_FACTOR, _SAFETY * fac))
    else:
        raise StiffnessFailure(f"dopri5 exceeded {_MAX_STEPS} steps")
    return np.array(times), np.stack(states), nfe


def integrate_fn(f, z0, span, spec: SolverSpec, err_len: int | None = None):
    """Integrate a raw callable f(t, z) over span=(t_a, t_b).

    Returns (times, states, neval).  ``err_len`` restricts the adaptive error
    norm to the first ``err_len`` flattened components (used by augmented
    sensitivity systems whose step control follows the state block only)."""
    t_a, t_b = float(span[0]), float(span[1])
    if not t_b > t_a:
        raise ConfigError("integration span must satisfy t_a < t_b")
    z0 = np.asarray(z0, dtype=float)
    if spec.is_fixed_step:
        return _fixed_path(f, z0, t_a, t_b, spec)
    return _dopri5_path(f, z0, t_a, t_b, spec.rtol, spec.atol, err_len)


def integrate(field, z0, span, spec: SolverSpec, ledger: NfeLedger | None = None):
    """Solve the IVP for ``field`` from z0 over span, returning a Trajectory."""
    times, states, nfe = integrate_fn(field.eval, z0, span, spec)
    if ledger is not None:
        ledger.tick(nfe=nfe)
    return Trajectory(times, states)


def integrate_batch(
    field,
    z0_list,
    spans,
    spec: SolverSpec,
    ledger: NfeLedger | None = None,
    pool: WorkerPool | None = None,
) -> list[Trajectory]:
    """Integrate several IVPs that may run concurrently.

    Element-wise identical to mapping :func:`integrate`; the ledger span
    grows by the cost of a single element (the max, for adaptive methods)."""
    z0_list = list(z0_list)
    spans = list(spans)
    if len(z0_list) != len(spans):
        raise ConfigError("z0_list and spans must have equal length")

    def run(item):
        i, (z0, span) = item
        try:
            return integrate_fn(field.eval, z0, span, spec)
        except Exception as e:
            raise type(e)(f"element {i}: {e}") from e

    results = (pool or WorkerPool()).map(run, enumerate(zip(z0_list, spans)))
    if ledger is not None:
        ledger.absorb_parallel([NfeLedger(total_nfe=r[2], span_nfe=r[2]) for r in results])
    return [Trajectory(t, s) for t, s, _ in results]
