"""Closed-loop task-port impedance: nonlinear terms and linearization at (q*, 0, 0)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import AssignmentViolationError, UnsupportedOperationError
from .model import central_jacobian
from .ph import PhState


def companion_eigenvalues(Lambda, D, K):
    """Eigenvalues of ``Lambda x'' + D x' + K x = 0`` in first-order form."""
    m = Lambda.shape[0]
    Li = np.linalg.inv(Lambda)
    A = np.block([[np.zeros((m, m)), np.eye(m)], [-Li @ K, -Li @ D]])
    return np.linalg.eigvals(A)


@dataclass(frozen=True)
class LinearizedImpedance:
    """Second-order task-port model ``Lambda_star dx'' + D_t dx' + K_tilde dx = F_ext``.

    ``static_stiffness`` is the exact small-force stiffness of the closed loop
    ``(J H^-1 J^T)^-1`` (``H`` the Hessian of ``Vbar``), which also accounts for
    the null-space deflection; it coincides with ``K_tilde`` when the shaping
    Hessian does not couple task and null space (``Jm_sharp^T H Z^T = 0``).
    """

    Lambda_star: np.ndarray
    D_t: np.ndarray
    K_tilde: np.ndarray
    eigenvalues: np.ndarray
    hessian: np.ndarray
    static_stiffness: np.ndarray
    coupling: np.ndarray


def linearize(controller, q_star=None):
    system = controller.system
    q_star = controller.params.q_star if q_star is None else np.asarray(q_star, dtype=float)
    dec = system.decompose(q_star)
    H = controller.potential.hessian(system.model, q_star)
    try:
        np.linalg.cholesky(0.5 * (H + H.T))
    except np.linalg.LinAlgError:
        raise AssignmentViolationError("Hessian of Vbar at q* is not positive definite") from None
    Jm = dec.Jm_sharp
    K_tilde = Jm.T @ H @ Jm
    K_tilde = 0.5 * (K_tilde + K_tilde.T)
    static = np.linalg.inv(dec.J @ np.linalg.solve(H, dec.J.T))
    D_t = controller.params.D_t
    return LinearizedImpedance(
        Lambda_star=dec.Lambda_t,
        D_t=D_t,
        K_tilde=K_tilde,
        eigenvalues=companion_eigenvalues(dec.Lambda_t, D_t, K_tilde),
        hessian=H,
        static_stiffness=0.5 * (static + static.T),
        coupling=Jm.T @ H @ dec.Z.T,
    )


def closed_loop_jacobian(controller, rel_step=1e-6):
    """Numerical Jacobian of the closed-loop vector field at ``(q*, 0, 0)``."""
    system = controller.system
    n, m = system.n, system.m

    def field(z):
        return controller.closed_loop_rhs(PhState.from_array(z, n, m))

    z_star = np.concatenate([controller.params.q_star, np.zeros(n)])
    return central_jacobian(field, z_star, rel_step, order=4)


@dataclass(frozen=True)
class EigenCheck:
    companion: np.ndarray
    task_subspace: np.ndarray
    full: np.ndarray
    max_rel_error: float


def match_eigenvalues(a, b):
    """Pair two spectra by minimum total distance; returns (a, b_matched, rel_errors)."""
    cost = np.abs(a[:, None] - b[None, :])
    rows, cols = linear_sum_assignment(cost)
    rel = np.abs(a[rows] - b[cols]) / np.maximum(np.abs(a[rows]), 1e-12)
    return a[rows], b[cols], rel


def task_subspace_eigenvalues(controller, rel_step=1e-6):
    """Compare companion eigenvalues with the linearized closed loop on the task chart.

    The (2n)-state linearization ``A`` in ``(q, pi_e)`` is restricted to the
    (dx, dx') chart through ``dq = Jm_sharp dx`` and ``dpi_e = (Lambda_t dx'; 0)``
    on input and ``dx' = J dq'``, ``dx'' = Lambda_t^-1 dpi'`` on output.
    """
    system = controller.system
    n, m = system.n, system.m
    dec = system.decompose(controller.params.q_star)
    A = closed_loop_jacobian(controller, rel_step)
    lin = linearize(controller)
    In = np.zeros((2 * n, 2 * m))
    In[:n, :m] = dec.Jm_sharp
    In[n:n + m, m:] = dec.Lambda_t
    Out = np.zeros((2 * m, 2 * n))
    Out[:m, :n] = dec.J
    Out[m:, n:n + m] = dec.Lambda_t_inv
    A_task = Out @ A @ In
    sub = np.linalg.eigvals(A_task)
    comp, matched, rel = match_eigenvalues(lin.eigenvalues, sub)
    return EigenCheck(companion=comp, task_subspace=matched, full=np.linalg.eigvals(A),
                      max_rel_error=float(rel.max()))


@dataclass(frozen=True)
class ImpedanceTerms:
    inertial: np.ndarray
    damping: np.ndarray
    stiffness: np.ndarray
    residual: np.ndarray


def impedance_terms(controller, s, F_ext=None, rel_step=1e-6):
    """Addends of the nonlinear task-port impedance along a closed-loop state.

    ``Lambda_t x'' + (Lambda_t' + D_t) x' + Jm_sharp^T d(Hbar + Vc)/dq = F_ext``
    holds when the routing leaves ``Gbar11 = Gbar12 = 0``. The acceleration
    comes from the joint-space Euler-Lagrange equations and ``Lambda_t'`` from a
    central difference along the flow, so the residual is an independent check.
    """
    system = controller.system
    task, model = system.task, system.model
    if not task.integrable:
        raise UnsupportedOperationError("impedance terms need an integrable task (forward map)")
    m = system.m
    F = np.zeros(m) if F_ext is None else np.asarray(F_ext, dtype=float)
    point = system.point(s)
    dec = point.dec
    q, qdot = s.q, point.qdot
    a = controller.action(point)
    tau = a.tau_joint + dec.J.T @ F
    qddot = model.forward_dynamics(q, qdot, tau)
    dJ = task.jacobian_derivatives(q)
    xdot = dec.J @ qdot
    xddot = np.einsum("kab,k,b->a", dJ, qdot, qdot) + dec.J @ qddot
    speed = np.linalg.norm(qdot)
    if speed > 0:
        eps = rel_step * (1.0 + np.linalg.norm(q)) / speed
        Lp = system.decompose(q + eps * qdot).Lambda_t
        Lm = system.decompose(q - eps * qdot).Lambda_t
        Lambda_dot = (Lp - Lm) / (2 * eps)
    else:
        Lambda_dot = np.zeros((m, m))
    grad = controller.shaped_gradient(point)[:system.n]
    inertial = dec.Lambda_t @ xddot
    damping = (Lambda_dot + controller.params.D_t) @ xdot
    stiffness = dec.Jm_sharp.T @ grad
    return ImpedanceTerms(inertial, damping, stiffness, inertial + damping + stiffness - F)


def static_equilibrium(controller, F_ext, tol=1e-12, max_iter=50):
    """Rest configuration under a constant task force: ``dVbar/dq(q) = J(q)^T F``."""
    system = controller.system
    F = np.asarray(F_ext, dtype=float)
    q = np.array(controller.params.q_star, dtype=float)

    def residual(x):
        return controller.shaped_potential(x)[3] - system.task.jacobian(x).T @ F

    for _ in range(max_iter):
        r = residual(q)
        if np.linalg.norm(r) < tol * (1.0 + np.linalg.norm(F)):
            break
        q = q - np.linalg.solve(central_jacobian(residual, q, 1e-6, order=2), r)
    return q


@dataclass(frozen=True)
class StaticDeflection:
    force: np.ndarray
    dx_simulated: np.ndarray
    dx_equilibrium: np.ndarray
    linear_error: float
    """``|K_tilde dx - F| / |F|`` with ``dx`` from simulation."""
    schur_error: float
    """Same with the exact small-force stiffness ``(J H^-1 J^T)^-1``."""
    settled_speed: float


def static_deflection(controller, F_ext, settle_time=12.0, dt=5e-3):
    """Apply a constant task force from rest at ``q*`` and compare the settled ``dx``."""
    from .sim import ForcePulse, Scenario, integrate

    system = controller.system
    if not system.task.integrable:
        raise UnsupportedOperationError("static deflection needs an integrable task (forward map)")
    F = np.asarray(F_ext, dtype=float)
    q_star = controller.params.q_star
    scenario = Scenario(
        model=system.model, task=system.task, q0=q_star, qdot0=np.zeros(system.n), dt=dt,
        duration=settle_time, log_every=settle_time, controller=controller.params,
        forces=[ForcePulse(0.0, settle_time, tuple(F))], derivatives=system.derivatives,
        rank_tol=system.rank_tol, name="static",
    )
    trace = integrate(scenario)
    if not trace.ok:
        raise UnsupportedOperationError(f"static deflection run aborted: {trace.error}")
    q_end = trace.block("q", system.n)[-1]
    speed = float(np.linalg.norm(trace.block("qdot", system.n)[-1]))
    x_star = system.task.forward(q_star)
    dx = system.task.forward(q_end) - x_star
    dx_eq = system.task.forward(static_equilibrium(controller, F)) - x_star
    lin = linearize(controller)
    scale = np.linalg.norm(F)
    return StaticDeflection(
        force=F, dx_simulated=dx, dx_equilibrium=dx_eq,
        linear_error=float(np.linalg.norm(lin.K_tilde @ dx - F) / scale),
        schur_error=float(np.linalg.norm(lin.static_stiffness @ dx - F) / scale),
        settled_speed=speed,
    )
