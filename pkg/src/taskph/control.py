"""IDA-PBC for task equilibrium assignment on the task-space pH model.

The closed loop keeps the kinetic energy of the open loop and replaces the
potential by ``Vbar = V + Vc``. The feedback has three addends:

    (sigma; tau_0) = -Jbar^-T dVc/dq + (Gbar - G)(eta; nu) - D (eta; nu)

energy shaping, energy routing and damping injection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AssignmentViolationError, ConfigError
from .model import as_vector, central_jacobian

ROUTING_PRESETS = {
    "simulation": ("copy", "copy", "copy"),
    "impedance": ("zero", "zero", "copy"),
    "zero": ("zero", "zero", "zero"),
}

DEFAULT_TASK_DAMPING = 9.0
DEFAULT_NULL_DAMPING = 6.0
SOFT_STIFFNESS = 7.0
STIFF_STIFFNESS = 30.0


def _square(value, size, name):
    """Scalar shorthand (``value * I``) or explicit matrix."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(size)
    if arr.shape != (size, size):
        raise ConfigError(f"expected a scalar or a {size}x{size} matrix, got shape {arr.shape}", field=name)
    return arr


def _routing_block(spec, shape, name, skew):
    if isinstance(spec, str):
        if spec not in ("copy", "zero"):
            raise ConfigError(f"routing block must be 'copy', 'zero' or a matrix, got {spec!r}", field=name)
        return spec
    arr = np.asarray(spec, dtype=float)
    if arr.shape != shape:
        raise ConfigError(f"routing block must have shape {shape}, got {arr.shape}", field=name)
    if skew and not np.allclose(arr, -arr.T, atol=1e-12):
        raise ConfigError("routing block must be skew-symmetric", field=name)
    return arr


@dataclass(frozen=True)
class IdaPbcParams:
    """Controller parameters.

    ``Gbar11``, ``Gbar12`` and ``Gbar22`` are each ``"copy"`` (use the open-loop
    block), ``"zero"`` or a constant matrix. ``W``, ``D_t`` and ``D_nu`` accept
    the scalar-times-identity shorthand.
    """

    q_star: np.ndarray
    W: np.ndarray
    D_t: np.ndarray
    D_nu: np.ndarray
    m: int
    x_star: np.ndarray | None = None
    Gbar11: object = "copy"
    Gbar12: object = "copy"
    Gbar22: object = "copy"

    def __post_init__(self):
        q_star = as_vector(self.q_star, name="q_star")
        n, m = q_star.size, int(self.m)
        if not 1 <= m <= n:
            raise ConfigError(f"task dimension {m} incompatible with {n} joints")
        r = n - m
        object.__setattr__(self, "q_star", q_star)
        object.__setattr__(self, "m", m)
        W = _square(self.W, n, "W")
        if not np.allclose(W, W.T, rtol=0, atol=1e-12 * (1 + np.abs(W).max())):
            raise ConfigError("W must be symmetric", field="W")
        try:
            np.linalg.cholesky(W)
        except np.linalg.LinAlgError:
            raise ConfigError("W must be positive definite", field="W") from None
        object.__setattr__(self, "W", W)
        for name, size in (("D_t", m), ("D_nu", r)):
            D = _square(getattr(self, name), size, name)
            if not np.allclose(D, D.T, atol=1e-12):
                raise ConfigError(f"{name} must be symmetric", field=name)
            if size and np.linalg.eigvalsh(D).min() < -1e-12:
                raise ConfigError(f"{name} must be positive semidefinite", field=name)
            object.__setattr__(self, name, D)
        if self.x_star is not None:
            object.__setattr__(self, "x_star", as_vector(self.x_star, m, "x_star"))
        object.__setattr__(self, "Gbar11", _routing_block(self.Gbar11, (m, m), "Gbar11", True))
        object.__setattr__(self, "Gbar12", _routing_block(self.Gbar12, (m, r), "Gbar12", False))
        object.__setattr__(self, "Gbar22", _routing_block(self.Gbar22, (r, r), "Gbar22", True))

    @classmethod
    def preset(cls, q_star, m, stiffness=SOFT_STIFFNESS, routing="simulation",
               D_t=DEFAULT_TASK_DAMPING, D_nu=DEFAULT_NULL_DAMPING, x_star=None):
        """Parameters from a named routing preset and scalar gains."""
        if routing not in ROUTING_PRESETS:
            raise ConfigError(f"unknown routing preset {routing!r}; choose from {sorted(ROUTING_PRESETS)}")
        g11, g12, g22 = ROUTING_PRESETS[routing]
        return cls(q_star=q_star, W=stiffness, D_t=D_t, D_nu=D_nu, m=m, x_star=x_star,
                   Gbar11=g11, Gbar12=g12, Gbar22=g22)

    @property
    def D(self):
        m = self.D_t.shape[0]
        r = self.D_nu.shape[0]
        D = np.zeros((m + r, m + r))
        D[:m, :m] = self.D_t
        D[m:, m:] = self.D_nu
        return D

    @property
    def copies_routing(self):
        return all(isinstance(b, str) and b == "copy" for b in (self.Gbar11, self.Gbar12, self.Gbar22))


class GravityCancellingWell:
    """``Vc = -V + 1/2 (q - q*)^T W (q - q*)``, hence ``Vbar`` is a quadratic well."""

    def __init__(self, q_star, W):
        self.q_star = np.asarray(q_star, dtype=float)
        self.W = np.asarray(W, dtype=float)

    def shaped(self, model, q):
        """``(Vc, dVc/dq, Vbar, dVbar/dq)``."""
        dq = q - self.q_star
        Vbar = 0.5 * dq @ self.W @ dq
        gradVbar = self.W @ dq
        return Vbar - model.potential(q), gradVbar - model.potential_gradient(q), Vbar, gradVbar

    def hessian(self, model, q):
        return self.W.copy()


class ShapedPotential:
    """Adapter for user potentials given as ``Vbar(q)`` (and optionally its gradient)."""

    def __init__(self, vbar, grad=None):
        self.vbar = vbar
        self.grad = grad

    def shaped(self, model, q):
        Vbar = float(self.vbar(q))
        if self.grad is not None:
            gradVbar = np.asarray(self.grad(q), dtype=float)
        else:
            gradVbar = central_jacobian(lambda x: np.array([self.vbar(x)]), q)[0]
        return Vbar - model.potential(q), gradVbar - model.potential_gradient(q), Vbar, gradVbar

    def hessian(self, model, q):
        H = central_jacobian(lambda x: self.shaped(model, x)[3], q)
        return 0.5 * (H + H.T)


@dataclass(frozen=True)
class ControlAction:
    sigma: np.ndarray
    tau_0: np.ndarray
    tau_joint: np.ndarray
    shaping: np.ndarray
    routing: np.ndarray
    damping: np.ndarray
    eta_e: np.ndarray = field(repr=False)

    @property
    def dissipated_power(self):
        return float(-self.eta_e @ self.damping)


class IdaPbcController:
    """IDA-PBC state feedback on a :class:`~taskph.ph.TaskSpacePH` system."""

    def __init__(self, params: IdaPbcParams, system, potential=None, assignment_tol=1e-8):
        if params.q_star.size != system.n or params.m != system.m:
            raise ConfigError("controller dimensions do not match the model/task")
        self.params = params
        self.system = system
        self.potential = potential or GravityCancellingWell(params.q_star, params.W)
        self._check_assignment(assignment_tol)

    def with_system(self, system):
        """Same controller on another chart (e.g. after re-anchoring the basis)."""
        ctl = object.__new__(IdaPbcController)
        ctl.params, ctl.system, ctl.potential = self.params, system, self.potential
        ctl.x_star = self.x_star
        return ctl

    def _check_assignment(self, tol):
        task, q_star = self.system.task, self.params.q_star
        x_star = self.params.x_star
        if task.integrable:
            fx = np.asarray(task.forward(q_star), dtype=float)
            if x_star is None:
                x_star = fx
            elif np.linalg.norm(fx - x_star) > 1e-9 * max(1.0, np.linalg.norm(x_star)):
                raise AssignmentViolationError(
                    f"task target not achieved at q_star: |f(q*) - x*| = {np.linalg.norm(fx - x_star):.3e}"
                )
        self.x_star = x_star
        _, _, _, grad = self.potential.shaped(self.system.model, q_star)
        scale = 1.0 + np.abs(self.system.model.potential_gradient(q_star)).max()
        if np.abs(grad).max() > tol * scale:
            raise AssignmentViolationError(f"dVbar/dq(q*) = {grad} is not zero")
        try:
            np.linalg.cholesky(self.hessian_bar())
        except np.linalg.LinAlgError:
            raise AssignmentViolationError("Hessian of Vbar at q* is not positive definite") from None

    def hessian_bar(self):
        return self.potential.hessian(self.system.model, self.params.q_star)

    def shaped_potential(self, q):
        """``(Vc, dVc/dq, Vbar, dVbar/dq)`` at ``q``."""
        return self.potential.shaped(self.system.model, as_vector(q, self.system.n, "q"))

    def routing_matrix(self, point):
        """Closed-loop interconnection ``Gbar`` at a state."""
        p = self.params
        m = point.dec.m
        S = point.structure if not p.copies_routing else None

        def pick(spec, block):
            if isinstance(spec, str):
                if spec == "copy":
                    return getattr(S, block)
                return np.zeros_like(getattr(S, block))
            return spec

        if S is None:
            return None
        G11 = pick(p.Gbar11, "G11")
        G12 = pick(p.Gbar12, "G12")
        G22 = pick(p.Gbar22, "G22")
        Gbar = np.zeros((point.dec.n, point.dec.n))
        Gbar[:m, :m] = G11
        Gbar[:m, m:] = G12
        Gbar[m:, :m] = -G12.T
        Gbar[m:, m:] = G22
        return Gbar

    def action(self, point):
        """Feedback evaluated at a :class:`~taskph.ph.PhPoint`."""
        dec = point.dec
        _, gradVc, _, _ = self.shaped_potential(point.state.q)
        eta_e = point.eta_e
        shaping = -dec.Jbar_inv_T @ gradVc
        Gbar = self.routing_matrix(point)
        if Gbar is None:
            routing = np.zeros_like(shaping)
        else:
            routing = (Gbar - point.structure.G) @ eta_e
        damping = -self.params.D @ eta_e
        u = shaping + routing + damping
        m = dec.m
        return ControlAction(
            sigma=u[:m], tau_0=u[m:], tau_joint=dec.Jbar.T @ u,
            shaping=shaping, routing=routing, damping=damping, eta_e=eta_e,
        )

    def control_law(self, s):
        """``(sigma, tau_0, tau_joint, diagnostics)`` for a transformed state."""
        a = self.action(self.system.point(s))
        diagnostics = {"shaping": a.shaping, "routing": a.routing, "damping": a.damping}
        return a.sigma, a.tau_0, a.tau_joint, diagnostics

    def closed_loop_rhs(self, s, F_ext=None, point=None):
        """Closed-loop state derivative; ``F_ext`` enters the task momentum channel."""
        point = point or self.system.point(s)
        a = self.action(point)
        sigma = a.sigma if F_ext is None else a.sigma + np.asarray(F_ext, dtype=float)
        return point.rhs(sigma, a.tau_0)

    def shaped_gradient(self, point):
        """Gradient of the closed-loop Hamiltonian ``Hbar + Vc``."""
        _, gradVc, _, _ = self.shaped_potential(point.state.q)
        g = point.gradients
        return np.concatenate([g.dq + gradVc, g.dpi, g.dpinu])

    def target_rhs(self, s, F_ext=None, point=None):
        """The same derivative assembled from the target structure ``Jd - R``."""
        point = point or self.system.point(s)
        dec = point.dec
        n, m = dec.n, dec.m
        Jd = point.structure.Jz.copy()
        Gbar = self.routing_matrix(point)
        if Gbar is not None:
            Jd[n:, n:] = Gbar
        grad = self.shaped_gradient(point)
        zdot = Jd @ grad
        zdot[n:] -= self.params.D @ grad[n:]
        zdot[n:] += point.damping_force()
        if F_ext is not None:
            zdot[n:n + m] += F_ext
        return zdot

    def shaped_hamiltonian(self, s, point=None):
        point = point or self.system.point(s)
        _, _, Vbar, _ = self.shaped_potential(point.state.q)
        K_t, K_nu = point.kinetic
        return K_t + K_nu + Vbar

    def matching_residual(self, s, F_ext=None):
        """Unactuated rows of (open loop with feedback) minus target dynamics."""
        point = self.system.point(s)
        n = self.system.n
        return self.closed_loop_rhs(s, F_ext, point)[:n] - self.target_rhs(s, F_ext, point)[:n]

    def power_terms(self, s, F_ext=None, point=None):
        """Closed-loop power split: ``(shaped Hamiltonian rate, injected, dissipated, routing)``."""
        point = point or self.system.point(s)
        a = self.action(point)
        eta_e = point.eta_e
        zdot = self.closed_loop_rhs(s, F_ext, point)
        rate = self.shaped_gradient(point) @ zdot
        injected = 0.0 if F_ext is None else float(point.eta @ F_ext)
        dissipated = a.dissipated_power + float(point.qdot @ (self.system.model.joint_damping * point.qdot))
        return float(rate), injected, dissipated, float(eta_e @ a.routing)


def solve_ik(task, x_target, q0, tol=1e-13, max_iter=200, damping=1e-8):
    """Damped Newton inverse kinematics for an integrable task.

    Convenience helper for picking ``q_star`` values; not part of the
    controller's correctness surface.
    """
    q = np.array(q0, dtype=float)
    x_target = np.asarray(x_target, dtype=float)
    for _ in range(max_iter):
        err = x_target - task.forward(q)
        if np.linalg.norm(err) < tol:
            return q
        J = task.jacobian(q)
        step = J.T @ np.linalg.solve(J @ J.T + damping * np.eye(task.m), err)
        q = q + step
    if np.linalg.norm(x_target - task.forward(q)) > 1e-9:
        raise AssignmentViolationError("inverse kinematics did not converge")
    return q
