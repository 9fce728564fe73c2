"""Command-line front end.

Subcommands: ``solve``, ``gradcheck``, ``control``, ``track-scaling``,
``bench``, ``selftest``.  Problems and solver settings come from TOML presets
(--config accepts a filesystem path or the name of a bundled preset); every
CSV artifact starts with a comment line carrying a hash of the effective
configuration, so outputs are reproducible byte-for-byte given (config, seed).

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 check failure (gradcheck / selftest).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .adjoint import finite_difference_grad, implicit_gradient, interpolated_adjoint_grad
from .errors import ConfigError, StaleSolutionError, TimeshootError
from .field import (
    ControlledField,
    LinearField,
    Mlp,
    RayleighDuffing,
    ScalarRateField,
    VanDerPol,
)
from .ledger import NfeLedger
from .odecore import SolverSpec, TimeGrid, WorkerPool
from .problems import (
    BeamStabilizationLoss,
    LimitCycleLoss,
    LimitCycleTask,
    load_bundled_linear_system,
    load_linear_system,
    smape,
)
from .shooting import init_shooting, matching_residual, msl_solve, sequential_fine_nodes
from .tracking import (
    TrainConfig,
    neural_ode_epoch,
    run_control_training,
    tracking_scaling_experiment,
)

METHOD_NAMES = {
    "newton-fw": "newton_fw",
    "newton-jvp": "newton_jvp",
    "parareal": "parareal",
    "dense-ref": "dense_ref",
}

REFERENCE = SolverSpec("dopri5", rtol=1e-8, atol=1e-8)


# ----------------------------------------------------------- configuration


def load_config(path_or_name: str) -> dict:
    p = Path(path_or_name)
    if p.exists():
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    candidate = resources.files("timeshoot") / "presets" / f"{path_or_name}.toml"
    if candidate.is_file():
        return tomllib.loads(candidate.read_text())
    raise ConfigError(f"config not found: {path_or_name!r} (no file, no bundled preset)")


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_csv(path: Path, header, rows, tag: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={tag}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def spec_from(doc: dict, default: SolverSpec) -> SolverSpec:
    if not doc:
        return default
    return SolverSpec(
        method=doc.get("method", default.method),
        step_count=int(doc.get("step_count", default.step_count)),
        rtol=float(doc.get("rtol", default.rtol)),
        atol=float(doc.get("atol", default.atol)),
    )


class Problem:
    """Everything a subcommand needs, assembled from one config document."""

    def __init__(self, cfg: dict, seed: int):
        self.cfg = cfg
        self.seed = seed
        p = cfg.get("problem", {})
        self.kind = p.get("kind", "vanderpol")
        self.horizon = tuple(p.get("horizon", (0.0, 1.0)))
        self.n_intervals = int(p.get("n_intervals", 8))
        self.grid = TimeGrid.uniform(self.horizon[0], self.horizon[1], self.n_intervals)
        rng = np.random.default_rng(seed)
        self.controller = None
        self.task = None
        self.loss = None

        ctrl_cfg = cfg.get("controller")
        if self.kind == "vanderpol":
            self.field = VanDerPol(float(p.get("alpha", 1.0)))
            self.z0 = np.asarray(p.get("z0", [2.0, 0.0]), dtype=float)
        elif self.kind == "rayleigh_duffing":
            self.field = RayleighDuffing(float(p.get("alpha", 1.0)))
            self.z0 = np.asarray(p.get("z0", [1.0, 0.0]), dtype=float)
        elif self.kind == "linear":
            self.field = LinearField(np.asarray(p["A"], dtype=float))
            self.z0 = np.asarray(p.get("z0", np.ones(self.field.dim)), dtype=float)
        elif self.kind == "scalar_rate":
            self.field = ScalarRateField(float(p.get("theta", -1.0)))
            self.z0 = np.asarray(p.get("z0", [1.0]), dtype=float)
        elif self.kind == "limit_cycle":
            if ctrl_cfg is None:
                raise ConfigError("limit_cycle problems need a [controller] block")
            self.controller = Mlp.init(ctrl_cfg["widths"], ctrl_cfg["activations"], seed=seed)
            from .field import MechanicalPlant

            self.field = ControlledField(MechanicalPlant(), self.controller)
            lo, hi = p.get("box", (-2.0, 2.0))
            nb = int(p.get("batch", 8))
            self.z0 = rng.uniform(lo, hi, size=(nb, 2))
            self.task = LimitCycleTask(
                z0_batch=self.z0,
                curve=p.get("curve", "circle"),
                curve_alpha=float(p.get("curve_alpha", 1.0)),
                curve_k=float(p.get("curve_k", 1.0)),
                control_weight=float(p.get("control_weight", 0.0)),
                horizon=self.horizon,
                n_intervals=self.n_intervals,
            )
            self.loss = LimitCycleLoss(self.task, self.controller)
        elif self.kind == "beam":
            if "matrix_a" in p or "matrix_b" in p:
                task = load_linear_system(
                    p["matrix_a"], p["matrix_b"], control_weight=float(p.get("control_weight", 0.0))
                )
            else:
                task = load_bundled_linear_system(float(p.get("control_weight", 0.0)))
            self.task = task
            if ctrl_cfg is not None:
                self.controller = Mlp.init(ctrl_cfg["widths"], ctrl_cfg["activations"], seed=seed)
                self.field = ControlledField(task.plant(), self.controller)
            else:
                from .field import PlantField

                self.field = PlantField(task.plant())
            if "z0" in p:
                self.z0 = np.asarray(p["z0"], dtype=float)
            elif task.n_z % 4 == 0:
                # bent-at-rest start: velocity blocks excited, strain blocks zero
                m = task.n_z // 4
                x = np.linspace(1.0 / m, 1.0, m)
                self.z0 = np.concatenate(
                    [np.sin(np.pi * x), np.sin(3 * np.pi * x), np.zeros(m), np.zeros(m)]
                )
            else:
                self.z0 = np.sin(np.pi * np.linspace(0.1, 1.0, task.n_z))
            self.loss = BeamStabilizationLoss(task, self.controller)
        else:
            raise ConfigError(f"unknown problem kind {self.kind!r}")

        solver = cfg.get("solver", {})
        self.method = METHOD_NAMES.get(solver.get("method", "newton-fw"))
        if self.method is None:
            raise ConfigError(f"unknown solver method {solver.get('method')!r}")
        self.fine = spec_from(solver.get("fine"), SolverSpec("dopri5", rtol=1e-8, atol=1e-8))
        self.coarse = spec_from(solver.get("coarse"), SolverSpec("rk4", step_count=1))
        self.init = solver.get("init", "fine_rollout")
        self.max_iters = int(solver.get("max_iters", 2 * self.n_intervals))
        self.residual_tol = float(solver.get("residual_tol", 1e-8))


def resolve_threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("TIMESHOOT_THREADS")
    return max(1, int(env)) if env else 1


def effective_config(cfg: dict, args, method: str | None) -> dict:
    doc = dict(cfg)
    doc["_seed"] = args.seed
    if method:
        doc["_method"] = method
    return doc


# ------------------------------------------------------------- subcommands


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    prob = Problem(cfg, args.seed)
    method = METHOD_NAMES[args.method] if args.method else prob.method
    tag = config_hash(effective_config(cfg, args, method))
    pool = WorkerPool(resolve_threads(args))
    out = Path(args.out)
    ledger = NfeLedger()

    if prob.max_iters == 0:
        state = init_shooting(prob.field, prob.z0, prob.grid, prob.init, prob.fine, ledger)
        res = matching_residual(prob.field, state, prob.fine, ledger, pool)
        state.last_residual_inf = res.norm_inf
        rows = [(0, res.norm_inf, ledger.total_nfe, ledger.span_nfe, 0.0)]
    else:
        state, ledger, rows = msl_solve(
            prob.field,
            prob.z0,
            prob.grid,
            method,
            prob.fine,
            prob.coarse,
            max_iters=prob.max_iters,
            residual_tol=prob.residual_tol,
            init_strategy=prob.init,
            ledger=ledger,
            pool=pool,
        )

    ref = sequential_fine_nodes(prob.field, prob.z0, prob.grid, REFERENCE)
    scale = max(float(np.max(np.abs(ref))), 1e-300)
    max_rel_err = float(np.max(np.abs(state.B - ref))) / scale
    smape_val = smape(ref, state.B)

    write_csv(
        out / "solve_summary.csv",
        ("iteration", "residual_inf", "total_nfe", "span_nfe", "wall_ms"),
        rows,
        tag,
    )
    node_rows = []
    for n, t in enumerate(prob.grid.boundaries):
        flat = np.ravel(state.B[n])
        node_rows.append((n, float(t), *[float(v) for v in flat]))
    state_cols = [f"state_{i}" for i in range(len(node_rows[0]) - 2)]
    write_csv(out / "B_final.csv", ("node", "time", *state_cols), node_rows, tag)
    print(
        f"solve method={method} iterations={state.iteration} "
        f"residual_inf={state.last_residual_inf:.3e} max_rel_err={max_rel_err:.3e} "
        f"smape={smape_val:.3e} total_nfe={ledger.total_nfe} span_nfe={ledger.span_nfe}"
    )
    return 0


def terminal_loss_pack(B):
    grads = np.zeros_like(B)
    grads[-1] = 1.0
    return float(np.sum(B[-1])), grads, np.zeros(0)


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    prob = Problem(cfg, args.seed)
    tag = config_hash(effective_config(cfg, args, prob.method))
    pool = WorkerPool(resolve_threads(args))
    gc = cfg.get("gradcheck", {})
    fd_step = float(gc.get("fd_step", 1e-4))
    out = Path(args.out)
    ledger = NfeLedger()

    if gc.get("force_unconverged", False):
        state = init_shooting(prob.field, prob.z0, prob.grid, "broadcast")
        state.last_residual_inf = float("inf")
    else:
        state, ledger, _ = msl_solve(
            prob.field,
            prob.z0,
            prob.grid,
            prob.method,
            prob.fine,
            prob.coarse,
            max_iters=prob.max_iters,
            residual_tol=prob.residual_tol,
            init_strategy=prob.init,
            ledger=ledger,
            pool=pool,
        )

    loss_kind = gc.get("loss", "terminal")
    if loss_kind == "terminal":
        value, node_grads, direct = terminal_loss_pack(state.B)

        def loss_fn(B):
            return float(np.sum(B[-1]))

    elif loss_kind == "limit_cycle":
        if prob.loss is None:
            raise ConfigError("limit_cycle gradcheck needs a limit_cycle problem")
        value, node_grads, direct = prob.loss.evaluate(state.B)

        def loss_fn(B):
            return prob.loss.evaluate(B)[0]

    else:
        raise ConfigError(f"unknown gradcheck loss {loss_kind!r}")

    if direct.size == 0:
        direct = np.zeros(prob.field.param_count)

    adj = interpolated_adjoint_grad(prob.field, state, node_grads, ledger=ledger).grad + direct
    imp = implicit_gradient(prob.field, state, prob.fine, node_grads, ledger=ledger, pool=pool).grad + direct
    fd = finite_difference_grad(prob.field, prob.z0, prob.grid, loss_fn, prob.fine, fd_step).grad

    def rel(a, b):
        denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
        return float(np.linalg.norm(a - b) / denom)

    err_adj_fd = rel(adj, fd)
    err_imp_fd = rel(imp, fd)
    err_adj_imp = rel(adj, imp)
    ok = err_adj_fd <= 1e-3 and err_imp_fd <= 1e-3 and err_adj_imp <= 1e-4
    rows = [
        ("interpolated_adjoint", float(np.linalg.norm(adj)), float(np.max(np.abs(adj))), err_adj_fd),
        ("implicit", float(np.linalg.norm(imp)), float(np.max(np.abs(imp))), err_imp_fd),
        ("finite_difference", float(np.linalg.norm(fd)), float(np.max(np.abs(fd))), 0.0),
    ]
    write_csv(
        out / "gradcheck.csv",
        ("method", "grad_norm", "max_component", "fd_relative_error"),
        rows,
        tag,
    )
    print(
        f"gradcheck loss={loss_kind} adj_vs_fd={err_adj_fd:.3e} imp_vs_fd={err_imp_fd:.3e} "
        f"adj_vs_imp={err_adj_imp:.3e} -> {'PASS' if ok else 'FAIL'}"
    )
    return 0 if ok else 4


def cmd_control(args) -> int:
    cfg = load_config(args.config)
    prob = Problem(cfg, args.seed)
    if prob.loss is None or prob.controller is None:
        raise ConfigError("control needs a problem with a controller and a loss")
    tag = config_hash(effective_config(cfg, args, prob.method))
    pool = WorkerPool(resolve_threads(args))
    out = Path(args.out)
    tr = cfg.get("training", {})
    train_cfg = TrainConfig(
        learning_rate=float(tr.get("learning_rate", 1e-4)),
        optimizer=tr.get("optimizer", "adam"),
        epochs=int(tr.get("epochs", 100)),
        newton_iters_per_step=int(tr.get("newton_iters_per_step", 1)),
        seed=args.seed,
    )
    ledger = NfeLedger()
    state, trace, ledger = run_control_training(
        prob.field, prob.loss, prob.z0, prob.grid, train_cfg, prob.fine, ledger=ledger, pool=pool
    )
    write_csv(out / "tracking_trace.csv", trace.HEADER, trace.rows(), tag)
    (out / "final_controller.json").write_text(prob.controller.to_json())

    # sequential baseline epochs for the NFE comparison
    baseline_spec = SolverSpec(
        tr.get("baseline", "dopri5"),
        rtol=float(tr.get("baseline_rtol", 1e-5)),
        atol=float(tr.get("baseline_atol", 1e-5)),
        step_count=int(tr.get("baseline_steps", prob.n_intervals)),
    )
    base_nfes = []
    for _ in range(int(tr.get("baseline_epochs", 3))):
        base_led = NfeLedger()
        neural_ode_epoch(prob.field, prob.loss, prob.z0, prob.grid, baseline_spec, ledger=base_led)
        base_nfes.append(base_led.total_nfe)
    baseline_nfe = float(np.mean(base_nfes))
    msl_span = trace.records[-1].span_nfe
    msl_total = trace.records[-1].total_nfe
    ratio_span = baseline_nfe / max(msl_span, 1)
    ratio_total = baseline_nfe / max(msl_total, 1)
    write_csv(
        out / "nfe_comparison.csv",
        ("baseline_nfe_per_epoch", "msl_span_nfe_per_epoch", "msl_total_nfe_per_epoch", "ratio_vs_span", "ratio_vs_total"),
        [(baseline_nfe, msl_span, msl_total, ratio_span, ratio_total)],
        tag,
    )
    max_smape = max(r.smape for r in trace.records)
    print(
        f"control epochs={train_cfg.epochs} final_loss={trace.records[-1].loss:.5f} "
        f"max_smape={max_smape:.4f} span_nfe_per_epoch={msl_span} "
        f"baseline_nfe_per_epoch={baseline_nfe:.0f} ratio_vs_span={ratio_span:.1f}"
    )
    return 0


def cmd_track_scaling(args) -> int:
    cfg = load_config(args.config)
    prob = Problem(cfg, args.seed)
    if prob.loss is None:
        raise ConfigError("track-scaling needs a problem with a loss")
    tag = config_hash(effective_config(cfg, args, None))
    sc = cfg.get("scaling", {})
    etas = [float(e) for e in sc.get("etas", (1e-3, 5e-4, 2.5e-4))]
    epochs = int(sc.get("epochs_per_eta", 10))
    pool = WorkerPool(resolve_threads(args))
    rows, slope = tracking_scaling_experiment(
        prob.field, prob.loss, prob.z0, prob.grid, etas, epochs, prob.fine, pool=pool
    )
    out = Path(args.out)
    write_csv(out / "tracking_scaling.csv", ("eta", "mean_tracking_error"), rows, tag)
    ratios = [rows[i][1] / rows[i + 1][1] for i in range(len(rows) - 1)]
    print(
        "track-scaling slope=%.3f ratios=%s" % (slope, ",".join(f"{r:.2f}" for r in ratios))
    )
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    tag = config_hash(effective_config(cfg, args, args.method))
    bench = cfg.get("bench", {})
    n_values = [int(n) for n in bench.get("n_values", (100,))]
    thread_values = [int(t) for t in bench.get("thread_values", (1, 8))]
    iters = int(bench.get("iters", 2))
    method = METHOD_NAMES[args.method] if args.method else "newton_fw"
    out = Path(args.out)

    rows = []
    speedup = {}
    for n in n_values:
        cfg_n = json.loads(json.dumps(cfg))
        cfg_n.setdefault("problem", {})["n_intervals"] = n
        outputs = {}
        for threads in thread_values:
            prob = Problem(cfg_n, args.seed)
            pool = WorkerPool(threads)
            ledger = NfeLedger()
            t0 = time.perf_counter()
            state, ledger, _ = msl_solve(
                prob.field,
                prob.z0,
                prob.grid,
                method,
                prob.fine,
                prob.coarse,
                max_iters=iters,
                residual_tol=0.0,
                init_strategy=prob.init,
                init_spec=prob.coarse if prob.init == "coarse_rollout" else None,
                ledger=ledger,
                pool=pool,
            )
            wall_ms = (time.perf_counter() - t0) * 1e3
            outputs[threads] = state.B
            rows.append((method, n, threads, ledger.total_nfe, ledger.span_nfe, wall_ms))
        first = thread_values[0]
        for threads in thread_values[1:]:
            if prob.fine.is_fixed_step and not np.array_equal(outputs[first], outputs[threads]):
                raise TimeshootError(
                    f"fixed-step results differ between {first} and {threads} threads"
                )
        base = next(r[5] for r in rows if r[1] == n and r[2] == first)
        best = min(r[5] for r in rows if r[1] == n and r[2] != first) if len(thread_values) > 1 else base
        speedup[n] = base / best if best > 0 else float("nan")

    write_csv(
        out / "bench.csv",
        ("method", "N", "threads", "total_nfe", "span_nfe", "wall_ms"),
        rows,
        tag,
    )
    print(
        "bench method=%s determinism=ok speedups=%s"
        % (method, ",".join(f"N{n}:{s:.2f}x" for n, s in speedup.items()))
    )
    return 0


def cmd_selftest(args) -> int:
    """Compact end-to-end checks; exit 4 on the first failure."""
    failures = []

    def check(name, ok):
        print(f"selftest {name}: {'PASS' if ok else 'FAIL'}")
        if not ok:
            failures.append(name)

    from .field import make_builtin
    from .odecore import integrate, step_fixed

    class _Growth:
        def eval(self, t, z):
            return z

    h = 0.1
    taylor = 1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24
    out = step_fixed(_Growth(), 0.0, np.array([1.0]), h, "rk4")
    check("rk4_taylor", abs(out[0] - taylor) < 1e-14)

    spec = SolverSpec("dopri5", rtol=1e-8, atol=1e-8)
    field = make_builtin("linear", np.array([[0.0, 1.0], [-1.0, 0.0]]))
    tr = integrate(field, np.array([1.0, 0.0]), (0.0, 2 * np.pi), spec)
    check("rotation_period", float(np.max(np.abs(tr.final - [1.0, 0.0]))) < 1e-6)

    vdp = make_builtin("vanderpol", 1.0)
    grid = TimeGrid.uniform(0.0, 1.0, 4)
    state, _, _ = msl_solve(
        vdp, np.array([2.0, 0.0]), grid, "newton_fw", spec,
        max_iters=8, residual_tol=1e-9, init_strategy="broadcast",
    )
    ref = sequential_fine_nodes(vdp, np.array([2.0, 0.0]), grid, spec)
    check("newton_vs_sequential", float(np.max(np.abs(state.B - ref))) < 1e-6)

    from .shooting import parareal_iteration

    conv = init_shooting(vdp, np.array([2.0, 0.0]), grid, "fine_rollout", spec)
    after = parareal_iteration(vdp, conv, spec, SolverSpec("rk4", step_count=1))
    check("parareal_fixed_point", np.array_equal(after.B, conv.B))

    sfield = ScalarRateField(-1.0)
    sgrid = TimeGrid.uniform(0.0, 1.0, 20)
    sstate, _, _ = msl_solve(
        sfield, np.array([1.0]), sgrid, "newton_fw", spec, max_iters=25, residual_tol=1e-10
    )
    g = np.zeros_like(sstate.B)
    g[-1] = 1.0
    adj = interpolated_adjoint_grad(sfield, sstate, g).grad[0]
    check("adjoint_closed_form", abs(adj - np.exp(-1.0)) / np.exp(-1.0) < 1e-4)

    check("smape_algebra", abs(smape(np.ones((5, 1)), 3 * np.ones((5, 1))) - 1.0) < 1e-12)

    if failures:
        print(f"selftest FAILED: {', '.join(failures)}")
        return 4
    print("selftest OK")
    return 0


# ------------------------------------------------------------------ driver


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="timeshoot",
        description="Time-parallel multiple-shooting solves, gradients, and benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("solve", cmd_solve),
        ("gradcheck", cmd_gradcheck),
        ("control", cmd_control),
        ("track-scaling", cmd_track_scaling),
        ("bench", cmd_bench),
        ("selftest", cmd_selftest),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", default="vanderpol_solve", help="path or bundled preset name")
        p.add_argument("--out", default="out", help="output directory (created if absent)")
        p.add_argument("--threads", type=int, default=None, help="worker threads (env TIMESHOOT_THREADS)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--method", choices=sorted(METHOD_NAMES), default=None)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error kind=config msg={e}", file=sys.stderr)
        return 2
    except StaleSolutionError as e:
        print(f"error kind=stale_solution msg={e}", file=sys.stderr)
        return 3
    except TimeshootError as e:
        print(f"error kind={type(e).__name__} msg={e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
