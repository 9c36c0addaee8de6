import csv

import numpy as np
import pytest

from taskph import (
    AnalyticDerivatives, ConstantTask, ForcePulse, IdaPbcParams, PlanarChain, Scenario, TorqueWindow,
    integrate,
)
from taskph.errors import ConfigError
from taskph.sim import PulseExperiment, energy_drift, run_pulse_experiment, trace_columns, with_dt

from conftest import Q_A, Q_B


def pendulum_scenario(**kw):
    chain = PlanarChain([1.0], [1.0])
    base = dict(model=chain, task=ConstantTask([[1.0]]), q0=[2.0], qdot0=[0.0], dt=1e-3, duration=10.0,
                log_every=0.01, derivatives=AnalyticDerivatives())
    base.update(kw)
    return Scenario(**base)


def pulse_scenario(planar3, task3, **kw):
    base = dict(model=planar3, task=task3, q0=Q_A + [0.05, -0.05, 0.05], qdot0=[0.1, 0.0, -0.1], dt=1e-3,
                duration=0.5, log_every=0.01, controller=IdaPbcParams.preset(Q_A, 2),
                forces=[ForcePulse(0.1, 0.15, (10.0, 0.0))], derivatives=AnalyticDerivatives())
    base.update(kw)
    return Scenario(**base)


def test_pendulum_energy_conservation():
    tr = integrate(pendulum_scenario(backend="canonical"))
    assert tr.ok
    drift, H0 = energy_drift(tr)
    assert H0 == pytest.approx(9.81 * np.sin(2.0))
    assert drift <= 1e-8 * abs(H0)
    # released past the top, it swings through the bottom at 3 pi / 2
    assert tr.column("q0").max() > 3 * np.pi / 2


def test_open_loop_power_accounting(planar3, task3):
    sc = Scenario(planar3, task3, Q_A, np.zeros(3), dt=1e-3, duration=0.5, log_every=0.01,
                  torques=[TorqueWindow(0.1, 0.1, (2.0, -1.0, 0.5))], backend="canonical")
    tr = integrate(sc)
    assert tr.ok
    drift, _ = energy_drift(tr)
    injected = tr.column("injected_energy")[-1]
    assert abs(injected) > 1e-2
    assert drift <= 1e-8 * abs(injected)
    assert np.all(tr.column("power_residual") <= 1e-8)


def test_closed_loop_pulse_power_accounting(planar3, task3):
    tr = integrate(pulse_scenario(planar3, task3))
    assert tr.ok
    t, H = tr.column("t"), tr.column("Hbarbar")
    drift, H0 = energy_drift(tr)
    assert drift <= 1e-8 * max(H0, tr.column("injected_energy")[-1])
    outside = (t[1:] <= 0.1 + 1e-12) | (t[:-1] >= 0.25 - 1e-12)
    assert np.diff(H)[outside].max() <= 1e-6 * H0 * 0.01
    assert np.all(tr.column("power_residual") <= 1e-8)
    assert tr.column("injected_energy")[-1] > 0
    assert np.all(tr.column("K_t") >= 0) and np.all(tr.column("K_nu") >= 0)
    assert np.all(tr.column("kinetic_residual") <= 1e-9)
    assert np.all(tr.column("skew_residual") <= 1e-12)


def test_backends_agree(planar3, task3):
    a = integrate(pulse_scenario(planar3, task3))
    b = integrate(pulse_scenario(planar3, task3, backend="canonical"))
    assert np.abs(a.block("q", 3) - b.block("q", 3)).max() <= 1e-6
    assert np.abs(a.column("Hbarbar") - b.column("Hbarbar")).max() <= 1e-6


def test_fourth_order_convergence(planar3, task3):
    sc = pulse_scenario(planar3, task3, forces=[], duration=0.4, log_every=0.04)

    def gap(dt):
        a = integrate(with_dt(sc, dt))
        b = integrate(with_dt(replace_backend(sc), dt))
        return np.abs(a.block("q", 3) - b.block("q", 3)).max()

    coarse, fine = gap(0.02), gap(0.01)
    assert coarse / fine >= 8.0


def replace_backend(sc):
    from dataclasses import replace
    return replace(sc, backend="canonical")


def test_determinism(planar3, task3, tmp_path):
    sc = pulse_scenario(planar3, task3, duration=0.2, forces=[ForcePulse(0.05, 0.1, (10.0, 0.0))])
    integrate(sc).write_csv(tmp_path / "a.csv")
    integrate(sc).write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_csv_round_trip(planar3, task3, tmp_path):
    tr = integrate(pulse_scenario(planar3, task3, duration=0.05, forces=[]))
    tr.write_csv(tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == trace_columns(3, 2, True)
    assert rows[-1][-1] == "ok"
    last = [float(v) for v in rows[-1][:-1]]
    assert last == list(tr.rows[-1][:-1])
    assert len(rows) == 1 + 6


def test_trace_column_order():
    cols = trace_columns(3, 2, True)
    assert cols[:7] == ["t", "q0", "q1", "q2", "qdot0", "qdot1", "qdot2"]
    assert cols.index("x0") < cols.index("err_norm") < cols.index("eta0") < cols.index("nu0")
    assert cols.index("K_t") < cols.index("Hbar") < cols.index("Hbarbar") < cols.index("status")
    assert "x0" not in trace_columns(3, 2, False)


def test_log_cadence():
    tr = integrate(pendulum_scenario(duration=0.1, log_every=0.025))
    np.testing.assert_allclose(tr.column("t"), [0.0, 0.025, 0.05, 0.075, 0.1])


def test_singularity_aborts_with_marker(planar3, task3):
    # a huge rank tolerance makes every configuration count as singular after the first motion
    sc = Scenario(planar3, task3, [0.3, 0.2, 0.1], np.zeros(3), dt=1e-3, duration=1.0,
                  torques=[TorqueWindow(0.0, 1.0, (0.0, -5.0, -5.0))], rank_tol=0.05, backend="canonical")
    tr = integrate(sc)
    assert tr.status == "singularity"
    assert tr.rows[-1][-1] == "abort:TaskSingularityError"
    assert np.isnan(tr.rows[-1][1])
    assert "t=" in tr.error
    assert len(tr.column("t")) >= 1


def test_blow_up_aborts(planar3, task3):
    sc = Scenario(planar3, task3, Q_A, np.zeros(3), dt=1e-3, duration=0.1,
                  torques=[TorqueWindow(0.0, 0.1, (1e300, -1e300, 1e300))], backend="canonical")
    with np.errstate(all="ignore"):
        tr = integrate(sc)
    assert tr.status in ("abort", "singularity")
    assert tr.rows[-1][-1].startswith("abort:")


def test_force_pulse_and_torque_window_values():
    p = ForcePulse(0.1, 0.15, (10.0, 0.0))
    dt = 1e-3
    assert p.value(0.0995, 0.0995, dt) is not None
    assert p.value(0.099, 0.099, dt) is None
    assert p.value(0.249, 0.2495, dt) is not None
    assert p.value(0.25, 0.25, dt) is None
    ramp = ForcePulse(0.0, 1.0, (2.0,), ramp=True)
    np.testing.assert_allclose(ramp.value(0.5, 0.5, dt), [1.0])
    w = TorqueWindow(0.0, 0.01, (1.0,))
    np.testing.assert_array_equal(w.value(0.0, dt), [1.0])
    assert w.value(0.01, dt) is None
    # total impulse of the pulse at 1 ms steps is exact
    steps = sum(p.value(k * dt, k * dt, dt) is not None for k in range(1000))
    assert steps == 150


@pytest.mark.parametrize("kwargs", [
    {"dt": 0.0},
    {"duration": -1.0},
    {"integrator": "euler"},
    {"backend": "lagrange"},
    {"forces": [ForcePulse(0.1, 0.2, (1.0, 0.0)), ForcePulse(0.2, 0.1, (1.0, 0.0))]},
    {"forces": [ForcePulse(0.4, 0.2, (1.0, 0.0))]},
    {"forces": [ForcePulse(0.1, 0.1, (1.0, 0.0, 0.0))]},
    {"torques": [TorqueWindow(0.1, 0.1, (1.0,))]},
])
def test_invalid_scenarios(planar3, task3, kwargs):
    with pytest.raises(ConfigError):
        Scenario(planar3, task3, Q_A, np.zeros(3), **{"duration": 0.5, **kwargs})


def test_pulse_experiment_short(planar3, task3):
    exp = PulseExperiment(planar3, task3, (Q_A, Q_B), duration=0.5, dt=2e-3, log_every=0.01,
                          derivatives=AnalyticDerivatives())
    scenarios, traces, summary = run_pulse_experiment(exp)
    assert [s.name for s in scenarios] == ["qstar0_W7", "qstar0_W30", "qstar1_W7", "qstar1_W30"]
    assert all(t.ok for t in traces)
    assert exp.pulse_force() == (10.0, 0.0)
    for soft, stiff in (summary[:2], summary[2:]):
        assert stiff[3] < soft[3]
