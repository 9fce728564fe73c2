"""Multiple-shooting core: matching residual, direct Newton and parareal
iterations, the dense Newton reference, and the outer solve loop.

The shooting parameters B = (b_0, ..., b_N) live on a time grid; b_0 is
pinned to the initial condition.  Each iteration integrates the active
sub-intervals in one concurrent batch, sweeps the update forward in n, and
advances the frozen prefix by one row (finite-step convergence: after k
iterations the first k+1 rows equal the sequential fine solution).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, SizeGuardError
from .ledger import NfeLedger
from .odecore import SolverSpec, TimeGrid, WorkerPool, integrate, integrate_batch
from .sensitivity import batch_flow_with_sensitivity, sequential_jvp_correction

DEFAULT_FINE = SolverSpec("dopri5", rtol=1e-8, atol=1e-8)
DEFAULT_COARSE = SolverSpec("rk4", step_count=1)

METHODS = ("newton_fw", "newton_jvp", "parareal", "dense_ref")


@dataclass
class ShootingState:
    grid: TimeGrid
    B: np.ndarray
    active_from: int = 1
    iteration: int = 0
    last_residual_inf: float | None = None

    @property
    def n_intervals(self) -> int:
        return self.grid.n_intervals


@dataclass
class MatchResidual:
    g: np.ndarray
    norm_inf: float


def init_shooting(
    field,
    z0,
    grid: TimeGrid,
    strategy: str = "fine_rollout",
    spec: SolverSpec | None = None,
    ledger: NfeLedger | None = None,
) -> ShootingState:
    """Build initial shooting parameters.

    ``broadcast`` copies z0 to every node; ``fine_rollout`` chains the given
    adaptive solver sequentially; ``coarse_rollout`` chains the given
    fixed-step solver (default: one rk4 step per sub-interval)."""
    z0 = np.asarray(z0, dtype=float)
    N = grid.n_intervals
    B = np.empty((N + 1,) + z0.shape)
    B[0] = z0
    if strategy == "broadcast":
        B[1:] = z0
    elif strategy in ("fine_rollout", "coarse_rollout"):
        if spec is None:
            spec = DEFAULT_FINE if strategy == "fine_rollout" else DEFAULT_COARSE
        z = z0
        for n, span in enumerate(grid.spans()):
            z = integrate(field, z, span, spec, ledger=ledger).final
            B[n + 1] = z
    else:
        raise ConfigError(f"unknown init strategy {strategy!r}")
    return ShootingState(grid=grid, B=B, active_from=1, iteration=0)


def sequential_fine_nodes(
    field,
    z0,
    grid: TimeGrid,
    spec: SolverSpec = DEFAULT_FINE,
    ledger: NfeLedger | None = None,
) -> np.ndarray:
    """Reference path: chain one solver sequentially across all grid nodes."""
    z0 = np.asarray(z0, dtype=float)
    B = np.empty((grid.n_intervals + 1,) + z0.shape)
    B[0] = z0
    z = z0
    for n, span in enumerate(grid.spans()):
        z = integrate(field, z, span, spec, ledger=ledger).final
        B[n + 1] = z
    return B


def matching_residual(
    field,
    state: ShootingState,
    spec: SolverSpec,
    ledger: NfeLedger | None = None,
    pool: WorkerPool | None = None,
) -> MatchResidual:
    """g_n = b_n - flow(b_{n-1}) for n >= 1, with flows batched; g_0 = 0."""
    B = state.B
    N = state.n_intervals
    trajs = integrate_batch(
        field, [B[n] for n in range(N)], state.grid.spans(), spec, ledger=ledger, pool=pool
    )
    g = np.zeros_like(B)
    for n in range(N):
        g[n + 1] = B[n + 1] - trajs[n].final
    return MatchResidual(g=g, norm_inf=float(np.max(np.abs(g))))


def _active_residual_inf(B, flows, first):
    # Residual rows first+1..N; frozen rows vanish by finite-step convergence.
    worst = 0.0
    for i, phi in enumerate(flows):
        worst = max(worst, float(np.max(np.abs(B[first + 1 + i] - phi))))
    return worst


def newton_direct_iteration(
    field,
    state: ShootingState,
    spec: SolverSpec,
    mode: str = "fw_sensitivity",
    ledger: NfeLedger | None = None,
    pool: WorkerPool | None = None,
) -> ShootingState:
    """One direct Newton sweep: new b_{n+1} = flow(b_n) + Dflow(b_n) (new b_n - b_n).

    ``fw_sensitivity`` batches flows and sensitivities concurrently;
    ``sequential_jvp`` batches flows only and computes each correction as a
    tangent solve during the sweep."""
    if mode not in ("fw_sensitivity", "sequential_jvp"):
        raise ConfigError(f"unknown newton mode {mode!r}")
    N = state.n_intervals
    first = state.active_from - 1
    if first >= N:
        return replace(state, B=state.B.copy())
    B = state.B
    spans = state.grid.spans()[first:]
    sources = [B[n] for n in range(first, N)]
    if mode == "fw_sensitivity":
        res = batch_flow_with_sensitivity(field, sources, spans, spec, ledger=ledger, pool=pool)
        flows, sens = res.flows, res.sensitivities
    else:
        trajs = integrate_batch(field, sources, spans, spec, ledger=ledger, pool=pool)
        flows, sens = [tr.final for tr in trajs], None

    res_inf = _active_residual_inf(B, flows, first)
    newB = B.copy()
    for i, n in enumerate(range(first, N)):
        delta = newB[n] - B[n]
        if not np.any(delta):
            corr = 0.0
        elif sens is not None:
            corr = (sens[i] @ delta[..., None])[..., 0]
        else:
            corr = sequential_jvp_correction(field, B[n], spans[i], spec, delta, ledger=ledger)
        newB[n + 1] = flows[i] + corr
    return ShootingState(
        grid=state.grid,
        B=newB,
        active_from=state.active_from + 1,
        iteration=state.iteration + 1,
        last_residual_inf=res_inf,
    )


def parareal_iteration(
    field,
    state: ShootingState,
    fine_spec: SolverSpec,
    coarse_spec: SolverSpec = DEFAULT_COARSE,
    ledger: NfeLedger | None = None,
    pool: WorkerPool | None = None,
) -> ShootingState:
    """One parareal sweep: new b_{n+1} = flow(b_n) + coarse(new b_n) - coarse(b_n).

    Fine flows and the coarse solves at the old parameters are batched; the
    coarse solves at the updated parameters run inside the sequential sweep."""
    if not coarse_spec.is_fixed_step:
        raise ConfigError("parareal coarse solver must be fixed-step")
    N = state.n_intervals
    first = state.active_from - 1
    if first >= N:
        return replace(state, B=state.B.copy())
    B = state.B
    spans = state.grid.spans()[first:]
    sources = [B[n] for n in range(first, N)]
    trajs = integrate_batch(field, sources, spans, fine_spec, ledger=ledger, pool=pool)
    flows = [tr.final for tr in trajs]
    res_inf = _active_residual_inf(B, flows, first)
    coarse_old = integrate_batch(field, sources, spans, coarse_spec, ledger=ledger, pool=pool)

    newB = B.copy()
    for i, n in enumerate(range(first, N)):
        if np.array_equal(newB[n], B[n]):
            newB[n + 1] = flows[i]
            continue
        psi_new = integrate(field, newB[n], spans[i], coarse_spec, ledger=ledger).final
        newB[n + 1] = flows[i] + psi_new - coarse_old[i].final
    return ShootingState(
        grid=state.grid,
        B=newB,
        active_from=state.active_from + 1,
        iteration=state.iteration + 1,
        last_residual_inf=res_inf,
    )


def newton_dense_reference(
    field,
    state: ShootingState,
    spec: SolverSpec,
    alpha: float = 1.0,
    ledger: NfeLedger | None = None,
    pool: WorkerPool | None = None,
    size_guard: int = 2000,
) -> ShootingState:
    """Assemble the block Jacobian I - Dgamma and take a damped Newton step.

    Oracle path: at alpha=1 this is algebraically identical to the direct
    sweep.  Guarded against large dense assemblies; unbatched states only."""
    B = state.B
    if B.ndim != 2:
        raise ConfigError("dense reference supports unbatched states only")
    if alpha == 0.0:
        return state
    N = state.n_intervals
    first = state.active_from - 1
    if first >= N:
        return replace(state, B=state.B.copy())
    n_z = B.shape[-1]
    m = N - first
    rows = m * n_z
    if rows > size_guard:
        raise SizeGuardError(f"dense Newton needs {rows} rows > guard {size_guard}")
    spans = state.grid.spans()[first:]
    sources = [B[n] for n in range(first, N)]
    res = batch_flow_with_sensitivity(field, sources, spans, spec, ledger=ledger, pool=pool)
    flows, sens = res.flows, res.sensitivities
    res_inf = _active_residual_inf(B, flows, first)

    M = np.eye(rows)
    for i in range(1, m):
        r, c = i * n_z, (i - 1) * n_z
        M[r : r + n_z, c : c + n_z] = -sens[i]
    rhs = np.concatenate([flows[i] - B[first + 1 + i] for i in range(m)])
    delta = np.linalg.solve(M, rhs).reshape(m, n_z)

    newB = B.copy()
    newB[first + 1 :] += alpha * delta
    return ShootingState(
        grid=state.grid,
        B=newB,
        active_from=state.active_from + (1 if alpha == 1.0 else 0),
        iteration=state.iteration + 1,
        last_residual_inf=res_inf,
    )


def msl_solve(
    field,
    z0,
    grid: TimeGrid,
    method: str = "newton_fw",
    fine_spec: SolverSpec = DEFAULT_FINE,
    coarse_spec: SolverSpec = DEFAULT_COARSE,
    max_iters: int = 50,
    residual_tol: float = 1e-8,
    init_strategy: str = "fine_rollout",
    init_spec: SolverSpec | None = None,
    count_init: bool = True,
    ledger: NfeLedger | None = None,
    pool: WorkerPool | None = None,
    state: ShootingState | None = None,
):
    """Iterate the chosen method until the matching residual drops below
    ``residual_tol`` or ``max_iters`` is reached (the active window empties
    after N iterations, so termination is guaranteed either way).

    Returns (state, ledger, rows).  Each summary row is (iteration,
    residual_inf, total_nfe, span_nfe, wall_ms) where residual_inf is the
    matching residual of the iterate *entering* that iteration; a final row
    reports the converged residual of the returned state."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}, pick one of {METHODS}")
    if max_iters < 1:
        raise ConfigError("max_iters must be >= 1")
    ledger = ledger if ledger is not None else NfeLedger()
    if state is None:
        state = init_shooting(
            field, z0, grid, init_strategy, init_spec, ledger=ledger if count_init else None
        )
    rows = []
    for _ in range(max_iters):
        if state.active_from > grid.n_intervals:
            break
        t_start = time.perf_counter()
        if method == "newton_fw":
            state = newton_direct_iteration(field, state, fine_spec, "fw_sensitivity", ledger, pool)
        elif method == "newton_jvp":
            state = newton_direct_iteration(field, state, fine_spec, "sequential_jvp", ledger, pool)
        elif method == "parareal":
            state = parareal_iteration(field, state, fine_spec, coarse_spec, ledger, pool)
        else:
            state = newton_dense_reference(field, state, fine_spec, 1.0, ledger, pool)
        wall_ms = (time.perf_counter() - t_start) * 1e3
        rows.append(
            (state.iteration, state.last_residual_inf, ledger.total_nfe, ledger.span_nfe, wall_ms)
        )
        if state.last_residual_inf is not None and state.last_residual_inf <= residual_tol:
            break
    final = matching_residual(field, state, fine_spec, ledger=ledger, pool=pool)
    state.last_residual_inf = final.norm_inf
    rows.append((state.iteration, final.norm_inf, ledger.total_nfe, ledger.span_nfe, 0.0))
    return state, ledger, rows
