"""Sub-interval flows together with exact flow Jacobians.

The flow sensitivity v(t) = d(flow)/d(initial state) obeys the variational
system dv/dt = (df/dz) v with v = identity at the span start.  It is
integrated jointly with the state so each stage shares one field evaluation
between both blocks; with ``dopri5`` the step control watches the state
components only (pass ``v_in_error=True`` to include v).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalBlowup
from .ledger import NfeLedger
from .odecore import SolverSpec, WorkerPool, integrate_fn


@dataclass
class SensitivityResult:
    flows: list[np.ndarray]
    sensitivities: list[np.ndarray]


def _identity_like(b):
    n = b.shape[-1]
    return np.broadcast_to(np.eye(n), b.shape + (n,)).copy()


def flow_with_sensitivity(
    field,
    b,
    span,
    spec: SolverSpec,
    ledger: NfeLedger | None = None,
    v_in_error: bool = False,
    jvp_columns: bool = False,
):
    """Returns (flow, sensitivity) at the end of span, starting from b.

    ``jvp_columns`` realizes the Jacobian-matrix product as n_z separate
    Jacobian-vector products (same numbers, different ledger bucket)."""
    b = np.asarray(b, dtype=float)
    n = b.shape[-1]
    z_size = b.size
    V0 = _identity_like(b)
    t_a, t_b = float(span[0]), float(span[1])
    if t_b == t_a:
        return b.copy(), V0

    def aug(t, y):
        z = y[:z_size].reshape(b.shape)
        V = y[z_size:].reshape(b.shape + (n,))
        if jvp_columns:
            dz = field.eval(t, z)
            cols = [field.jvp_z(t, z, V[..., j]) for j in range(n)]
            dV = np.stack(cols, axis=-1)
        else:
            dz, J = field.eval_with_jac(t, z)
            dV = J @ V
        return np.concatenate([dz.ravel(), dV.ravel()])

    y0 = np.concatenate([b.ravel(), V0.ravel()])
    err_len = None if v_in_error else z_size
    try:
        _, ys, neval = integrate_fn(aug, y0, span, spec, err_len=err_len)
    except NumericalBlowup as e:
        raise NumericalBlowup(f"sensitivity dynamics: {e}", t=e.t) from e
    if ledger is not None:
        if jvp_columns:
            ledger.tick(nfe=neval, jvp=neval * n)
        else:
            ledger.tick(nfe=neval, jmp=neval)
    yT = ys[-1]
    return yT[:z_size].reshape(b.shape), yT[z_size:].reshape(b.shape + (n,))


def batch_flow_with_sensitivity(
    field,
    B_active,
    spans,
    spec: SolverSpec,
    ledger: NfeLedger | None = None,
    pool: WorkerPool | None = None,
    jvp_columns: bool = False,
    v_in_error: bool = False,
) -> SensitivityResult:
    """Flows and sensitivities for several sub-intervals; elements may run
    concurrently, so the ledger span grows by one element only."""
    items = list(zip(B_active, spans))
    if not items:
        raise ValueError("active list must be nonempty")

    def run(item):
        i, (b, span) = item
        part = NfeLedger()
        try:
            phi, v = flow_with_sensitivity(
                field,
                b,
                span,
                spec,
                ledger=part,
                v_in_error=v_in_error,
                jvp_columns=jvp_columns,
            )
        except Exception as e:
            raise type(e)(f"element {i}: {e}") from e
        return phi, v, part

    results = (pool or WorkerPool()).map(run, enumerate(items))
    if ledger is not None:
        ledger.absorb_parallel([r[2] for r in results])
    return SensitivityResult([r[0] for r in results], [r[1] for r in results])


def sequential_jvp_correction(
    field,
    b,
    span,
    spec: SolverSpec,
    direction,
    ledger: NfeLedger | None = None,
):
    """Sensitivity-times-vector without forming the matrix: integrates the
    state jointly with a single tangent vector seeded at ``direction``."""
    b = np.asarray(b, dtype=float)
    direction = np.broadcast_to(np.asarray(direction, dtype=float), b.shape).copy()
    z_size = b.size
    t_a, t_b = float(span[0]), float(span[1])
    if t_b == t_a:
        return direction

    def aug(t, y):
        z = y[:z_size].reshape(b.shape)
        v = y[z_size:].reshape(b.shape)
        dz = field.eval(t, z)
        dv = field.jvp_z(t, z, v)
        return np.concatenate([dz.ravel(), dv.ravel()])

    y0 = np.concatenate([b.ravel(), direction.ravel()])
    try:
        _, ys, neval = integrate_fn(aug, y0, span, spec, err_len=z_size)
    except NumericalBlowup as e:
        raise NumericalBlowup(f"sensitivity dynamics: {e}", t=e.t) from e
    if ledger is not None:
        ledger.tick(nfe=neval, jvp=neval)
    return ys[-1][z_size:].reshape(b.shape)
