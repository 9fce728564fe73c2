import numpy as np
import pytest

from timeshoot import (
    ConfigError,
    NfeLedger,
    NumericalBlowup,
    SolverSpec,
    StiffnessFailure,
    TimeGrid,
    WorkerPool,
    integrate,
    integrate_batch,
    step_fixed,
)
from timeshoot.field import VanDerPol, make_builtin

from zoo import ConstantField, Decay, ZeroField, rel_err


class Growth:
    dim = 1

    def eval(self, t, z):
        return z


def test_time_grid_uniform_spacing():
    grid = TimeGrid.uniform(0.0, 10.0, 100)
    assert grid.t0 == 0.0 and grid.tN == 10.0 and grid.n_intervals == 100
    widths = np.diff(grid.boundaries)
    assert np.allclose(widths, 0.1, rtol=0, atol=np.finfo(float).eps * 16)


def test_time_grid_rejects_nonmonotone():
    with pytest.raises(ConfigError):
        TimeGrid(np.array([0.0, 1.0, 1.0]))
    with pytest.raises(ConfigError):
        TimeGrid.uniform(1.0, 0.0, 4)


def test_solver_spec_validation():
    with pytest.raises(ConfigError):
        SolverSpec("rk4", step_count=0)
    with pytest.raises(ConfigError):
        SolverSpec("dopri5", rtol=0.0)
    with pytest.raises(ConfigError):
        SolverSpec("rk88")


def test_rk4_step_matches_degree4_taylor():
    h = 0.1
    out = step_fixed(Growth(), 0.0, np.array([1.0]), h, "rk4")
    taylor = 1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24
    assert out[0] == pytest.approx(taylor, abs=0, rel=1e-15)


def test_rk4_step_taylor_property_random_rates():
    # on dz = a z one rk4 step is exactly the degree-4 Taylor polynomial of e^{ah}
    rng = np.random.default_rng(7)

    class Lin:
        def __init__(self, a):
            self.a = a

        def eval(self, t, z):
            return self.a * z

    for _ in range(20):
        a, h, z = rng.uniform(-2, 2), rng.uniform(0.01, 0.5), rng.uniform(0.1, 3)
        out = step_fixed(Lin(a), 0.0, np.array([z]), h, "rk4")
        ah = a * h
        expect = z * (1 + ah + ah**2 / 2 + ah**3 / 6 + ah**4 / 24)
        assert out[0] == pytest.approx(expect, rel=1e-14)


def test_zero_and_constant_fields():
    assert step_fixed(ZeroField(), 0.0, np.array([3.0]), 0.7, "rk4")[0] == 3.0
    assert step_fixed(ZeroField(), 0.0, np.array([3.0]), 0.7, "euler")[0] == 3.0
    out = step_fixed(ConstantField([1.0]), 0.0, np.array([0.0]), 0.5, "euler")
    assert out[0] == 0.5


def test_step_ledger_counts_stages():
    led = NfeLedger()
    step_fixed(Decay(), 0.0, np.array([1.0]), 0.1, "rk4", ledger=led)
    assert led.total_nfe == 4 and led.span_nfe == 4
    step_fixed(Decay(), 0.0, np.array([1.0]), 0.1, "euler", ledger=led)
    assert led.total_nfe == 5


def test_dopri5_decay_hits_closed_form():
    spec = SolverSpec("dopri5", rtol=1e-8, atol=1e-8)
    tr = integrate(Decay(), np.array([1.0]), (0.0, 1.0), spec)
    assert tr.final[0] == pytest.approx(0.3678794412, abs=1e-7)


def test_dopri5_full_rotation_returns_to_start():
    spec = SolverSpec("dopri5", rtol=1e-8, atol=1e-8)
    field = make_builtin("linear", np.array([[0.0, 1.0], [-1.0, 0.0]]))
    tr = integrate(field, np.array([1.0, 0.0]), (0.0, 2 * np.pi), spec)
    assert np.max(np.abs(tr.final - np.array([1.0, 0.0]))) < 1e-6


def test_rk4_agrees_with_dopri5_on_vanderpol():
    field = VanDerPol(1.0)
    z0 = np.array([2.0, 0.0])
    a = integrate(field, z0, (0.0, 1.0), SolverSpec("rk4", step_count=10)).final
    b = integrate(field, z0, (0.0, 1.0), SolverSpec("dopri5", rtol=1e-8, atol=1e-8)).final
    assert rel_err(a, b) < 1e-4


def test_rk4_global_order_is_four():
    field = VanDerPol(1.0)
    z0 = np.array([2.0, 0.0])
    ref = integrate(field, z0, (0.0, 1.0), SolverSpec("dopri5", rtol=1e-12, atol=1e-12)).final
    steps = np.array([10, 20, 40, 80])
    errs = []
    for m in steps:
        out = integrate(field, z0, (0.0, 1.0), SolverSpec("rk4", step_count=int(m))).final
        errs.append(np.max(np.abs(out - ref)))
    slope = np.polyfit(np.log(1.0 / steps), np.log(errs), 1)[0]
    assert abs(slope - 4.0) < 0.3


def test_integrate_rejects_bad_span():
    with pytest.raises(ConfigError):
        integrate(Decay(), np.array([1.0]), (1.0, 0.0), SolverSpec("rk4"))


def test_blowup_names_time():
    class Quadratic:
        def eval(self, t, z):
            return z * z

    with pytest.raises(NumericalBlowup) as exc, np.errstate(over="ignore"):
        integrate(Quadratic(), np.array([1.0]), (0.0, 12.0), SolverSpec("euler", step_count=12))
    assert exc.value.t is not None


def test_step_size_underflow_raises_stiffness():
    class Jump:
        def eval(self, t, z):
            return np.where(t >= 0.5, 1e150, 0.0) * np.ones_like(z)

    with pytest.raises(StiffnessFailure):
        integrate(Jump(), np.array([0.0]), (0.0, 1.0), SolverSpec("dopri5", rtol=1e-6, atol=1e-6))


def test_batch_matches_map_bitwise_fixed_step():
    field = VanDerPol(1.0)
    spec = SolverSpec("rk4", step_count=7)
    z0s = [np.array([2.0, 0.0]), np.array([0.5, -1.0]), np.array([2.0, 0.0])]
    spans = [(0.0, 1.0), (0.0, 0.5), (0.0, 1.0)]
    batch = integrate_batch(field, z0s, spans, spec)
    singles = [integrate(field, z, s, spec) for z, s in zip(z0s, spans)]
    for tr_b, tr_s in zip(batch, singles):
        assert np.array_equal(tr_b.states, tr_s.states)
    # identical elements produce identical trajectories
    assert np.array_equal(batch[0].states, batch[2].states)


def test_batch_matches_map_across_thread_counts():
    field = VanDerPol(1.0)
    spec = SolverSpec("rk4", step_count=5)
    z0s = [np.array([2.0, 0.0]) + 0.01 * k for k in range(16)]
    spans = [(0.0, 1.0)] * 16
    serial = integrate_batch(field, z0s, spans, spec, pool=WorkerPool(1))
    threaded = integrate_batch(field, z0s, spans, spec, pool=WorkerPool(8))
    for a, b in zip(serial, threaded):
        assert np.array_equal(a.states, b.states)


def test_batch_ledger_span_and_total():
    # N=100 sub-intervals, rk4 with 2 steps: span += 8, total += 800
    field = Decay()
    led = NfeLedger()
    grid = TimeGrid.uniform(0.0, 10.0, 100)
    z0s = [np.array([1.0])] * 100
    integrate_batch(field, z0s, grid.spans(), SolverSpec("rk4", step_count=2), ledger=led)
    assert led.span_nfe == 8
    assert led.total_nfe == 800


def test_batch_linearity_closed_form():
    spec = SolverSpec("dopri5", rtol=1e-9, atol=1e-9)
    z0s = [np.array([v]) for v in (1.0, 2.0, 3.0)]
    out = integrate_batch(Decay(), z0s, [(0.0, 1.0)] * 3, spec)
    for v, tr in zip((1.0, 2.0, 3.0), out):
        assert tr.final[0] == pytest.approx(v * np.exp(-1.0), rel=1e-8)


def test_batch_error_carries_element_index():
    class Quadratic:
        def eval(self, t, z):
            return z * z

    z0s = [np.array([0.0]), np.array([1.0])]
    with pytest.raises(NumericalBlowup, match="element 1"), np.errstate(over="ignore"):
        integrate_batch(
            Quadratic(), z0s, [(0.0, 12.0)] * 2, SolverSpec("euler", step_count=12)
        )


def test_batch_length_mismatch():
    with pytest.raises(ConfigError):
        integrate_batch(Decay(), [np.array([1.0])], [(0, 1), (1, 2)], SolverSpec("rk4"))
