import numpy as np
import pytest

from taskph import (
    AnalyticDerivatives, ConstantInertiaModel, ConstantTask, ForcePulse, FunctionTask, IdaPbcController,
    IdaPbcParams, PhState, Scenario, TaskSpacePH, integrate,
)
from taskph.control import ShapedPotential
from taskph.errors import AssignmentViolationError, UnsupportedOperationError
from taskph.impedance import (
    companion_eigenvalues, impedance_terms, linearize, static_deflection, static_equilibrium,
    task_subspace_eigenvalues,
)

from conftest import Q_A


def planar_controller(planar3, task3, stiffness=7.0, routing="simulation", W=None):
    system = TaskSpacePH(planar3, task3, derivatives=AnalyticDerivatives()).anchored(Q_A)
    params = IdaPbcParams.preset(Q_A, 2, stiffness=stiffness if W is None else W, routing=routing)
    return IdaPbcController(params, system)


def test_isotropic_stiffness():
    model = ConstantInertiaModel(np.eye(3))
    task = ConstantTask([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    system = TaskSpacePH(model, task)
    lin = linearize(IdaPbcController(IdaPbcParams.preset(np.zeros(3), 2, stiffness=5.0), system))
    np.testing.assert_allclose(lin.K_tilde, 5.0 * np.eye(2), atol=1e-14)
    np.testing.assert_allclose(lin.Lambda_star, np.eye(2), atol=1e-14)
    np.testing.assert_allclose(lin.static_stiffness, 5.0 * np.eye(2), atol=1e-12)
    np.testing.assert_allclose(lin.coupling, 0.0, atol=1e-14)


def test_companion_eigenvalues_scalar():
    # x'' + 2 x' + 5 x = 0 has roots -1 +- 2i
    ev = np.sort_complex(companion_eigenvalues(np.eye(1), 2 * np.eye(1), 5 * np.eye(1)))
    np.testing.assert_allclose(ev, [-1 - 2j, -1 + 2j])


def test_stiffness_ordering(planar3, task3):
    soft = linearize(planar_controller(planar3, task3, 7.0)).K_tilde
    stiff = linearize(planar_controller(planar3, task3, 30.0)).K_tilde
    np.linalg.cholesky(stiff - soft)
    np.linalg.cholesky(soft)
    np.testing.assert_allclose(soft, soft.T)


@pytest.mark.parametrize("stiffness", [7.0, 30.0])
def test_companion_matches_linearized_closed_loop(planar3, task3, stiffness):
    check = task_subspace_eigenvalues(planar_controller(planar3, task3, stiffness))
    assert check.max_rel_error <= 0.02
    assert np.all(check.companion.real < 0)
    assert np.all(check.full.real < 0)


def test_linearization_with_finite_difference_hessian(planar3, task3):
    ctl = planar_controller(planar3, task3, 7.0)
    fd = IdaPbcController(ctl.params, ctl.system,
                          potential=ShapedPotential(lambda q: 3.5 * float((q - Q_A) @ (q - Q_A))))
    np.testing.assert_allclose(linearize(fd).K_tilde, linearize(ctl).K_tilde, rtol=1e-6)


def test_zero_terms_at_equilibrium(planar3, task3):
    ctl = planar_controller(planar3, task3, routing="impedance")
    terms = impedance_terms(ctl, PhState(Q_A, np.zeros(2), np.zeros(1)))
    for v in (terms.inertial, terms.damping, terms.stiffness, terms.residual):
        np.testing.assert_allclose(v, 0.0, atol=1e-12)


def test_pulse_response_impedance_residual(planar3, task3):
    ctl = planar_controller(planar3, task3, routing="impedance")
    F = np.array([10.0, 0.0])
    sc = Scenario(planar3, task3, Q_A, np.zeros(3), dt=1e-3, duration=0.6, log_every=0.01,
                  controller=ctl.params, forces=[ForcePulse(0.1, 0.15, tuple(F))],
                  derivatives=AnalyticDerivatives())
    tr = integrate(sc)
    assert tr.ok
    qs, qds, Fs = tr.block("q", 3), tr.block("qdot", 3), tr.block("F", 2)
    worst = 0.0
    for q, qd, f in zip(qs, qds, Fs):
        system = ctl.system.anchored(q)
        terms = impedance_terms(ctl.with_system(system), system.from_velocity(q, qd), f)
        worst = max(worst, np.abs(terms.residual).max())
    assert worst <= 1e-4 * np.linalg.norm(F)


def test_quasi_static_ramp(planar3, task3):
    ctl = planar_controller(planar3, task3, 30.0, routing="impedance")
    F = np.array([5.0, 3.0])
    sc = Scenario(planar3, task3, Q_A, np.zeros(3), dt=5e-3, duration=10.0, log_every=10.0,
                  controller=ctl.params, forces=[ForcePulse(0.0, 10.0, tuple(F), ramp=True)],
                  derivatives=AnalyticDerivatives())
    tr = integrate(sc)
    q, qd = tr.block("q", 3)[-1], tr.block("qdot", 3)[-1]
    system = ctl.system.anchored(q)
    terms = impedance_terms(ctl.with_system(system), system.from_velocity(q, qd), F)
    assert np.linalg.norm(terms.inertial + terms.damping) <= 0.05 * np.linalg.norm(terms.stiffness)


def test_first_order_kinematics(task3, rng):
    x_star = task3.forward(Q_A)
    J = task3.jacobian(Q_A)
    for _ in range(10):
        dq = rng.normal(size=3)
        dq *= 1e-4 / np.linalg.norm(dq)
        assert np.linalg.norm(task3.forward(Q_A + dq) - x_star - J @ dq) <= 1e-7


def test_static_deflection_with_mass_metric_shaping(planar3, task3):
    # W = w M(q*) has no task/null coupling, so K_tilde is the exact small-force stiffness
    ctl = planar_controller(planar3, task3, W=30.0 * planar3.mass_matrix(Q_A))
    lin = linearize(ctl)
    np.testing.assert_allclose(lin.coupling, 0.0, atol=1e-10)
    np.testing.assert_allclose(lin.K_tilde, lin.static_stiffness, rtol=1e-9)
    sd = static_deflection(ctl, [0.5, 0.3])
    assert sd.settled_speed < 1e-4
    assert sd.linear_error <= 0.05
    np.testing.assert_allclose(sd.dx_simulated, sd.dx_equilibrium, atol=1e-5)


def test_static_equilibrium_is_exact_for_identity_shaping(planar3, task3):
    # W = w I couples task and null space: only the Schur stiffness predicts the deflection
    ctl = planar_controller(planar3, task3, 30.0)
    F = np.array([0.05, 0.03])
    q = static_equilibrium(ctl, F)
    np.testing.assert_allclose(ctl.shaped_potential(q)[3], task3.jacobian(q).T @ F, atol=1e-12)
    dx = task3.forward(q) - task3.forward(Q_A)
    lin = linearize(ctl)
    assert np.linalg.norm(lin.static_stiffness @ dx - F) <= 0.05 * np.linalg.norm(F)
    assert np.abs(lin.coupling).max() > 1.0


def test_non_integrable_task_unsupported():
    model = ConstantInertiaModel(np.eye(2))
    task = FunctionTask(1, 2, jacobian=lambda q: np.array([[1.0, 0.0]]))
    ctl = IdaPbcController(IdaPbcParams.preset(np.zeros(2), 1), TaskSpacePH(model, task))
    with pytest.raises(UnsupportedOperationError):
        impedance_terms(ctl, PhState(np.zeros(2), np.zeros(1), np.zeros(1)))
    with pytest.raises(UnsupportedOperationError):
        static_deflection(ctl, [1.0])


def test_indefinite_hessian_rejected(planar3, task3):
    ctl = planar_controller(planar3, task3)
    ctl.potential = ShapedPotential(lambda q: float((q - Q_A) @ np.diag([1.0, -1.0, 1.0]) @ (q - Q_A)))
    with pytest.raises(AssignmentViolationError):
        linearize(ctl)
