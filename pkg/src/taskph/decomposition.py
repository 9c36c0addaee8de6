"""Metric-weighted task/null-space maps at a configuration.

All maps follow from the mass matrix ``M`` (the kinetic-energy metric) and the
task Jacobian ``J``:

* ``Jm_sharp = M^-1 J^T (J M^-1 J^T)^-1``, the dynamically consistent pseudoinverse
* ``Lambda_t = (J M^-1 J^T)^-1``, the task-space inertia
* ``Z``, orthonormal rows spanning Ker(J), and ``N = (Z M Z^T)^-1 Z M``
* ``Jbar = [J; N]`` with inverse ``[Jm_sharp, Z^T]``
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import BasisAlignmentError, ModelError, TaskSingularityError
from .model import as_vector

DEFAULT_RANK_TOL = 1e-6
MIN_OVERLAP = 1e-3


def align_basis(Z, reference):
    """Rotate the rows of ``Z`` to best match ``reference`` (orthogonal Procrustes).

    Both arguments have orthonormal rows spanning (n-m)-dimensional subspaces.
    Returns the aligned basis and the smallest singular value of
    ``reference @ Z.T`` (1 for identical subspaces, 0 when some reference
    direction is orthogonal to the new subspace).
    """
    C = reference @ Z.T
    U, s, Vt = np.linalg.svd(C)
    return (U @ Vt) @ Z, float(s.min())


def null_space_basis(J, reference=None, sv=None):
    """Orthonormal rows spanning Ker(J), from the SVD of ``J``.

    With a ``reference`` the result is the Procrustes alignment of the SVD basis
    against it, which is a smooth function of ``J`` for a fixed reference.
    """
    m, n = J.shape
    if sv is None:
        sv = np.linalg.svd(J)
    Vt = sv[2]
    Z = Vt[m:]
    overlap = 1.0
    if reference is not None and n > m:
        Z, overlap = align_basis(Z, reference)
    return Z, overlap


@dataclass(frozen=True, eq=False)
class TaskDecomposition:
    """Every per-configuration map of the task/null-space split."""

    q: np.ndarray
    M: np.ndarray
    J: np.ndarray
    Jm_sharp: np.ndarray
    Lambda_t: np.ndarray
    Lambda_t_inv: np.ndarray
    Z: np.ndarray
    N: np.ndarray
    Lambda_nu: np.ndarray
    singular_values: np.ndarray
    overlap: float = 1.0

    @property
    def n(self):
        return self.J.shape[1]

    @property
    def m(self):
        return self.J.shape[0]

    @cached_property
    def Jbar(self):
        return np.vstack([self.J, self.N])

    @cached_property
    def Jbar_inv(self):
        return np.hstack([self.Jm_sharp, self.Z.T])

    @cached_property
    def Jbar_inv_T(self):
        """Input map ``Jbar^-T = [Jm_sharp^T; Z]`` (covector -> (sigma, tau_0))."""
        return np.vstack([self.Jm_sharp.T, self.Z])

    @cached_property
    def Lambda_bar(self):
        """(Jbar M^-1 Jbar^T)^-1 formed explicitly, for block-diagonality checks."""
        Minv_JbarT = np.linalg.solve(self.M, self.Jbar.T)
        return np.linalg.inv(self.Jbar @ Minv_JbarT)

    @cached_property
    def P(self):
        """Velocity projector onto Ker^perp(J)."""
        return self.Jm_sharp @ self.J

    @cached_property
    def Lambda_nu_inv(self):
        return np.linalg.inv(self.Lambda_nu)

    @property
    def condition(self):
        return float(self.singular_values[0] / self.singular_values[-1])


def decompose(model, task, q, reference=None, rank_tol=DEFAULT_RANK_TOL, identity_n=False):
    """Evaluate all task/null-space maps at ``q``.

    ``reference`` fixes the null-space basis gauge (see :func:`null_space_basis`);
    tasks that ship a closed-form basis ignore it. ``identity_n`` replaces
    ``N`` by ``Z`` (metric-free) and exists only as a negative control.
    """
    q = as_vector(q, model.n, "q")
    M = model.mass_matrix(q)
    J = np.asarray(task.jacobian(q), dtype=float)
    m, n = J.shape
    sv = np.linalg.svd(J)
    s = sv[1]
    if s[-1] <= rank_tol * s[0]:
        raise TaskSingularityError(s[-1], s[0], q)
    try:
        chol = cho_factor(M, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise ModelError("mass matrix is not positive definite") from exc
    if task.null_basis is not None:
        Z = np.asarray(task.null_basis(q), dtype=float).reshape(n - m, n)
        overlap = 1.0
    else:
        Z, overlap = null_space_basis(J, reference, sv)
        if overlap < MIN_OVERLAP:
            raise BasisAlignmentError(overlap)
    Minv_JT = cho_solve(chol, J.T, check_finite=False)
    Lambda_t_inv = J @ Minv_JT
    Lambda_t_inv = 0.5 * (Lambda_t_inv + Lambda_t_inv.T)
    Lambda_t = np.linalg.inv(Lambda_t_inv)
    Lambda_t = 0.5 * (Lambda_t + Lambda_t.T)
    Jm_sharp = Minv_JT @ Lambda_t
    ZM = Z @ M
    Lambda_nu = ZM @ Z.T
    Lambda_nu = 0.5 * (Lambda_nu + Lambda_nu.T)
    if identity_n:
        N = Z.copy()
    else:
        N = np.linalg.solve(Lambda_nu, ZM) if n > m else np.zeros((0, n))
    return TaskDecomposition(
        q=q, M=M, J=J, Jm_sharp=Jm_sharp, Lambda_t=Lambda_t, Lambda_t_inv=Lambda_t_inv, Z=Z, N=N,
        Lambda_nu=Lambda_nu, singular_values=s, overlap=overlap,
    )


def split_velocity(dec: TaskDecomposition, qdot):
    """Split joint velocity into task and null-space parts.

    Returns ``(v, nu_full, eta, nu)``: ``v = P qdot`` lies in Ker^perp(J),
    ``nu_full = qdot - v`` in Ker(J), ``eta = J qdot`` and ``nu = N qdot``
    (so that ``nu_full = Z^T nu``).
    """
    qdot = as_vector(qdot, dec.n, "qdot")
    eta = dec.J @ qdot
    v = dec.Jm_sharp @ eta
    return v, qdot - v, eta, dec.N @ qdot


def split_force(dec: TaskDecomposition, tau):
    """Split a generalized force into Im(J^T) and Ker(J M^-1) parts.

    Returns ``(tau_F, tau_0_full, sigma, tau_0)`` with ``sigma = Jm_sharp^T tau``,
    ``tau_F = J^T sigma``, ``tau_0 = Z tau`` and ``tau_0_full = N^T tau_0``.
    """
    tau = as_vector(tau, dec.n, "tau")
    sigma = dec.Jm_sharp.T @ tau
    tau_F = dec.J.T @ sigma
    return tau_F, tau - tau_F, sigma, dec.Z @ tau


def kinetic_energy_split(dec: TaskDecomposition, qdot):
    """Task and null-space kinetic energies ``(K_t, K_nu)``."""
    v, nu_full, eta, nu = split_velocity(dec, qdot)
    K_t = 0.5 * eta @ dec.Lambda_t @ eta
    K_nu = 0.5 * nu @ dec.Lambda_nu @ nu
    return max(float(K_t), 0.0), max(float(K_nu), 0.0)
