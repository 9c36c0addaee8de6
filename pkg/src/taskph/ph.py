"""Task-space port-Hamiltonian model of a redundant manipulator.

The coordinate change ``(q, p) -> (q, pi, pi_nu)`` with ``(pi; pi_nu) = Jbar^-T p``
turns the canonical dynamics into

    d/dt (q, pi, pi_nu) = Jz dH/dz + (0, sigma, 0) + (0, 0, tau_0)

with ``Jz`` skew-symmetric. The configuration derivatives that enter ``Jz`` and
``dH/dq`` come from a pluggable provider (:class:`FiniteDifferences` or
:class:`AnalyticDerivatives`).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_sylvester

from .decomposition import DEFAULT_RANK_TOL, decompose
from .errors import StencilSingularityError, TaskSingularityError, UnsupportedOperationError
from .model import as_vector, central_jacobian


@dataclass(frozen=True)
class CanonicalState:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))


@dataclass(frozen=True)
class PhState:
    """Transformed state ``z = (q, pi, pi_nu)``."""

    q: np.ndarray
    pi: np.ndarray
    pi_nu: np.ndarray

    def __post_init__(self):
        for name in ("q", "pi", "pi_nu"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def pi_e(self):
        return np.concatenate([self.pi, self.pi_nu])

    def as_array(self):
        return np.concatenate([self.q, self.pi, self.pi_nu])

    @classmethod
    def from_array(cls, z, n, m):
        z = np.asarray(z, dtype=float)
        return cls(q=z[:n], pi=z[n:n + m], pi_nu=z[n + m:2 * n])


class FiniteDifferences:
    """Central differences on the contracted vector maps.

    Differentiates ``q -> Jbar^-T(q) p`` (giving ``A_t`` and ``A_n``) and
    ``q -> 1/2 pi_e^T Lambda_bar^-1(q) pi_e`` in one shared stencil, with
    step ``rel_step * (1 + |q_k|)``.
    """

    def __init__(self, rel_step=1e-6, order=2):
        self.rel_step = rel_step
        self.order = order

    def __repr__(self):
        return f"FiniteDifferences(rel_step={self.rel_step}, order={self.order})"

    def __call__(self, system, dec, pi_e):
        m, n = dec.m, dec.n
        p = dec.Jbar.T @ pi_e
        pi, pi_nu = pi_e[:m], pi_e[m:]
        reference = system.reference if system.reference is not None else dec.Z

        def contracted(q):
            try:
                d = decompose(system.model, system.task, q, reference, system.rank_tol)
            except TaskSingularityError as exc:
                raise StencilSingularityError(exc.sigma_min, exc.sigma_max, q) from exc
            K = 0.5 * pi @ d.Lambda_t_inv @ pi
            if n > m:
                K += 0.5 * pi_nu @ np.linalg.solve(d.Lambda_nu, pi_nu)
            return np.concatenate([d.Jm_sharp.T @ p, d.Z @ p, [K]])

        D = central_jacobian(contracted, dec.q, self.rel_step, self.order)
        return D[:n], D[n]


class AnalyticDerivatives:
    """Exact configuration derivatives from ``dM/dq`` and ``dJ/dq``.

    Uses first-order perturbation formulas for the inverse, the pseudoinverse
    and the kernel projector. The basis gauge is fixed by the Procrustes
    condition ``reference @ Z.T`` symmetric, which yields a Sylvester equation
    for the in-kernel rotation rate (trivial when ``n - m = 1``).
    """

    def __repr__(self):
        return "AnalyticDerivatives()"

    def __call__(self, system, dec, pi_e):
        m, n = dec.m, dec.n
        r = n - m
        if system.task.null_basis is not None and r > 1:
            raise UnsupportedOperationError(
                "analytic derivatives need an SVD-aligned basis when n - m > 1"
            )
        q = dec.q
        dM = system.model.mass_matrix_derivatives(q)          # (k, n, n)
        dJ = system.task.jacobian_derivatives(q)              # (k, m, n)
        J, M, Z, Lt = dec.J, dec.M, dec.Z, dec.Lambda_t
        Minv = np.linalg.inv(M)
        Minv_JT = Minv @ J.T
        dMinv = -np.einsum("ab,kbc,cd->kad", Minv, dM, Minv)
        dA = (
            np.einsum("kab,bc->kac", dJ, Minv_JT)
            + np.einsum("ab,kbc,dc->kad", J, dMinv, J)
            + np.einsum("ab,kcb->kac", Minv_JT.T, dJ)
        )
        dJm = (
            np.einsum("kab,cb,cd->kad", dMinv, J, Lt)
            + np.einsum("ab,kcb,cd->kad", Minv, dJ, Lt)
            - np.einsum("ab,kbc,cd->kad", dec.Jm_sharp, dA, Lt)
        )
        p = dec.Jbar.T @ pi_e
        pi, pi_nu = pi_e[:m], pi_e[m:]
        A_t = np.einsum("kab,a->bk", dJm, p)
        dK = 0.5 * np.einsum("a,kab,b->k", pi, dA, pi)
        if r == 0:
            return A_t, dK
        Jpinv = J.T @ np.linalg.inv(J @ J.T)
        Pi = Z.T @ Z
        X = np.einsum("ab,kbc,cd->kad", Jpinv, dJ, Pi)
        dPi = -X - np.transpose(X, (0, 2, 1))
        dZ = np.einsum("ab,kbc->kac", Z, dPi)
        if r > 1:
            ref = system.reference if system.reference is not None else Z
            S = ref @ Z.T
            for k in range(n):
                E = ref @ dPi[k] @ Z.T
                Omega = solve_sylvester(S, S, E - E.T)
                dZ[k] += Omega @ Z
        A_n = np.einsum("kab,b->ak", dZ, p)
        dLnu = (
            np.einsum("kab,bc,dc->kad", dZ, M, Z)
            + np.einsum("ab,kbc,dc->kad", Z, dM, Z)
            + np.einsum("ab,bc,kdc->kad", Z, M, dZ)
        )
        nu = np.linalg.solve(dec.Lambda_nu, pi_nu)
        dK -= 0.5 * np.einsum("a,kab,b->k", nu, dLnu, nu)
        return np.vstack([A_t, A_n]), dK


@dataclass(frozen=True)
class StructureMatrix:
    """Interconnection matrix ``Jz`` and its momentum blocks."""

    A_t: np.ndarray
    A_n: np.ndarray
    G11: np.ndarray
    G12: np.ndarray
    G22: np.ndarray
    Jz: np.ndarray

    @property
    def G(self):
        """Full momentum block ``[[G11, G12], [-G12^T, G22]]``."""
        return np.block([[self.G11, self.G12], [-self.G12.T, self.G22]])


@dataclass(frozen=True)
class HamiltonianGradients:
    H: float
    dq: np.ndarray
    dpi: np.ndarray
    dpinu: np.ndarray

    @property
    def dz(self):
        return np.concatenate([self.dq, self.dpi, self.dpinu])


class PhPoint:
    """Everything the transformed model needs at one state, computed once."""

    def __init__(self, system, state, dec):
        self.system = system
        self.state = state
        self.dec = dec

    @cached_property
    def _derivatives(self):
        return self.system.derivatives(self.system, self.dec, self.state.pi_e)

    @cached_property
    def kinetic(self):
        """(K_t, K_nu) evaluated on momenta."""
        d, s = self.dec, self.state
        K_t = 0.5 * s.pi @ d.Lambda_t_inv @ s.pi
        K_nu = 0.5 * s.pi_nu @ self.nu if d.n > d.m else 0.0
        return float(K_t), float(K_nu)

    @cached_property
    def eta(self):
        return self.dec.Lambda_t_inv @ self.state.pi

    @cached_property
    def nu(self):
        if self.dec.n == self.dec.m:
            return np.zeros(0)
        return np.linalg.solve(self.dec.Lambda_nu, self.state.pi_nu)

    @property
    def eta_e(self):
        return np.concatenate([self.eta, self.nu])

    @cached_property
    def qdot(self):
        return self.dec.Jbar_inv @ self.eta_e

    @cached_property
    def potential(self):
        return self.system.model.potential(self.state.q)

    @cached_property
    def gradients(self):
        K_t, K_nu = self.kinetic
        _, dK = self._derivatives
        dV = self.system.model.potential_gradient(self.state.q)
        return HamiltonianGradients(
            H=K_t + K_nu + self.potential, dq=dV + dK, dpi=self.eta, dpinu=self.nu
        )

    @cached_property
    def structure(self):
        d = self.dec
        m, n = d.m, d.n
        B, _ = self._derivatives
        A_t, A_n = B[:m], B[m:]
        Jm, Z = d.Jm_sharp, d.Z
        X11 = A_t @ Jm
        X12 = A_t @ Z.T
        X22 = A_n @ Z.T
        G11 = X11 - X11.T
        G12 = X12 - Jm.T @ A_n.T
        G22 = X22 - X22.T
        Jz = np.zeros((2 * n, 2 * n))
        Jz[:n, n:] = d.Jbar_inv
        Jz[n:, :n] = -d.Jbar_inv_T
        Jz[n:n + m, n:n + m] = G11
        Jz[n:n + m, n + m:] = G12
        Jz[n + m:, n:n + m] = -G12.T
        Jz[n + m:, n + m:] = G22
        return StructureMatrix(A_t=A_t, A_n=A_n, G11=G11, G12=G12, G22=G22, Jz=Jz)

    def damping_force(self):
        """Joint viscous friction mapped to the momentum channels."""
        d = self.system.model.joint_damping
        if not np.any(d):
            return np.zeros(self.dec.n)
        return -self.dec.Jbar_inv_T @ (d * self.qdot)

    def rhs(self, sigma=None, tau_0=None):
        """State derivative of the transformed dynamics as a flat vector."""
        d = self.dec
        m, n = d.m, d.n
        zdot = self.structure.Jz @ self.gradients.dz
        if sigma is not None:
            zdot[n:n + m] += sigma
        if tau_0 is not None:
            zdot[n + m:] += tau_0
        zdot[n:] += self.damping_force()
        return zdot


class TaskSpacePH:
    """Transformed port-Hamiltonian model for a (model, task) pair.

    ``reference`` fixes the null-space basis (see :meth:`anchored`); a
    simulation context owns its own instance and must not share it across
    concurrent integrations with different anchors.
    """

    def __init__(self, model, task, reference=None, derivatives=None,
                 rank_tol=DEFAULT_RANK_TOL, identity_n=False):
        if task.n != model.n:
            raise ValueError(f"task acts on {task.n} joints but the model has {model.n}")
        self.model = model
        self.task = task
        self.reference = None if reference is None else np.asarray(reference, dtype=float)
        self.derivatives = derivatives if derivatives is not None else FiniteDifferences()
        self.rank_tol = rank_tol
        self.identity_n = identity_n

    @property
    def n(self):
        return self.model.n

    @property
    def m(self):
        return self.task.m

    def anchored(self, q):
        """Copy whose null-space basis is aligned to the SVD basis at ``q``."""
        reference = None
        if self.task.null_basis is None and self.n > self.m:
            reference = decompose(self.model, self.task, q, None, self.rank_tol).Z
        return TaskSpacePH(self.model, self.task, reference, self.derivatives,
                           self.rank_tol, self.identity_n)

    def decompose(self, q):
        return decompose(self.model, self.task, q, self.reference, self.rank_tol, self.identity_n)

    def point(self, s: PhState, dec=None):
        return PhPoint(self, s, dec if dec is not None else self.decompose(s.q))

    def to_ph_state(self, q, p, dec=None):
        q = as_vector(q, self.n, "q")
        p = as_vector(p, self.n, "p")
        dec = dec if dec is not None else self.decompose(q)
        pi_e = np.linalg.solve(dec.Jbar.T, p)
        return PhState(q=q, pi=pi_e[:self.m], pi_nu=pi_e[self.m:])

    def from_velocity(self, q, qdot, dec=None):
        q = as_vector(q, self.n, "q")
        dec = dec if dec is not None else self.decompose(q)
        return self.to_ph_state(q, dec.M @ as_vector(qdot, self.n, "qdot"), dec)

    def to_canonical(self, s: PhState, dec=None):
        dec = dec if dec is not None else self.decompose(s.q)
        return CanonicalState(q=np.array(s.q, dtype=float), p=dec.Jbar.T @ s.pi_e)

    def hamiltonian_and_gradients(self, s: PhState):
        """``(H, dH/dq, dH/dpi, dH/dpi_nu)``; the momentum gradients are eta and nu."""
        g = self.point(s).gradients
        return g.H, g.dq, g.dpi, g.dpinu

    def hamiltonian(self, s: PhState):
        d = self.decompose(s.q)
        H = 0.5 * s.pi @ d.Lambda_t_inv @ s.pi + self.model.potential(s.q)
        if self.n > self.m:
            H += 0.5 * s.pi_nu @ np.linalg.solve(d.Lambda_nu, s.pi_nu)
        return float(H)

    def structure_matrix(self, s: PhState):
        return self.point(s).structure

    def rhs(self, s: PhState, sigma=None, tau_0=None):
        """``(qdot, pidot, pinudot)`` of the transformed dynamics."""
        zdot = self.point(s).rhs(sigma, tau_0)
        n, m = self.n, self.m
        return zdot[:n], zdot[n:n + m], zdot[n + m:]

    def phi(self, q, p):
        """Coordinate change as a flat map (q, p) -> (q, pi_e)."""
        return self.to_ph_state(q, p).as_array()


def canonical_rhs(model, s: CanonicalState, tau=None, route="hamiltonian", dM=None):
    """Canonical port-Hamiltonian dynamics ``qdot = M^-1 p``, ``pdot = -dH/dq + tau``.

    ``route="hamiltonian"`` uses ``dH/dq = dV/dq - 1/2 qdot^T (dM/dq) qdot``;
    ``route="lagrangian"`` rearranges the Euler-Lagrange form,
    ``pdot = tau - h - dV/dq + Mdot qdot``. Both need ``dM/dq`` from the model.
    """
    q = as_vector(s.q, model.n, "q")
    p = as_vector(s.p, model.n, "p")
    tau = np.zeros(model.n) if tau is None else as_vector(tau, model.n, "tau")
    M = model.mass_matrix(q)
    qdot = np.linalg.solve(M, p)
    if dM is None:
        dM = model.mass_matrix_derivatives(q)
    if route == "hamiltonian":
        dHdq = model.potential_gradient(q) - 0.5 * np.einsum("a,kab,b->k", qdot, dM, qdot)
        pdot = -dHdq + tau
    elif route == "lagrangian":
        Mdot = np.einsum("kab,k->ab", dM, qdot)
        pdot = tau - model.bias(q, qdot) - model.potential_gradient(q) + Mdot @ qdot
    else:
        raise ValueError(f"unknown route {route!r}")
    return qdot, pdot - model.joint_damping * qdot


def canonical_hamiltonian(model, s: CanonicalState):
    M = model.mass_matrix(s.q)
    return float(0.5 * s.p @ np.linalg.solve(M, s.p) + model.potential(s.q))
