"""Manipulator models: closed-form planar point-mass chains and a generic serial chain.

Every model exposes the quantities of the Euler-Lagrange form

    M(q) qdd + h(q, qd) + dV/dq(q) = tau

with gravity folded into the potential ``V`` and excluded from ``h``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, ModelError

GRAVITY = (0.0, -9.81, 0.0)


def as_vector(x, size=None, name="argument"):
    """Return ``x`` as a finite float vector, raising InvalidArgumentError otherwise."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if size is not None and arr.shape[0] != size:
        raise InvalidArgumentError(f"{name} must have length {size}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def central_jacobian(fun, x, rel_step=1e-3, order=4):
    """Finite-difference Jacobian of an array-valued ``fun`` w.r.t. vector ``x``.

    The returned array has shape ``fun(x).shape + (len(x),)``.
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        h = rel_step * (1.0 + abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        if order == 2:
            d = (np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h)
        elif order == 4:
            d = (
                8 * (np.asarray(fun(x + e)) - np.asarray(fun(x - e)))
                - (np.asarray(fun(x + 2 * e)) - np.asarray(fun(x - 2 * e)))
            ) / (12 * h)
        else:
            raise ValueError(f"unsupported difference order {order}")
        cols.append(d)
    return np.stack(cols, axis=-1)


class ManipulatorModel:
    """Interface of a fully actuated manipulator.

    Subclasses implement :meth:`mass_matrix`, :meth:`bias`, :meth:`potential`
    and :meth:`potential_gradient`. Instances are treated as immutable.
    """

    n: int
    gravity: np.ndarray
    joint_damping: np.ndarray

    def mass_matrix(self, q):
        raise NotImplementedError

    def bias(self, q, qdot):
        """Coriolis/centrifugal vector h(q, qdot), gravity excluded."""
        raise NotImplementedError

    def potential(self, q):
        raise NotImplementedError

    def potential_gradient(self, q):
        raise NotImplementedError

    def mass_matrix_derivatives(self, q):
        """Array ``dM`` of shape (n, n, n) with ``dM[k] = dM/dq_k``.

        The generic fallback differentiates :meth:`mass_matrix` with a
        fourth-order central stencil; closed-form models override it.
        """
        q = as_vector(q, self.n, "q")
        return np.moveaxis(central_jacobian(self.mass_matrix, q), -1, 0)

    def bias_and_gravity(self, q, qdot):
        q = as_vector(q, self.n, "q")
        qdot = as_vector(qdot, self.n, "qdot")
        return self.bias(q, qdot), self.potential_gradient(q), self.potential(q)

    def forward_dynamics(self, q, qdot, tau):
        """Joint acceleration from the Euler-Lagrange equation (damping included)."""
        h, dV, _ = self.bias_and_gravity(q, qdot)
        rhs = np.asarray(tau, dtype=float) - h - dV - self.joint_damping * qdot
        return np.linalg.solve(self.mass_matrix(q), rhs)

    def energy(self, q, qdot):
        M = self.mass_matrix(q)
        return 0.5 * qdot @ M @ qdot + self.potential(q)


def _check_damping(d, n):
    if d is None:
        return np.zeros(n)
    d = as_vector(d, n, "joint_damping")
    if np.any(d < 0):
        raise ModelError("joint_damping entries must be nonnegative")
    return d


class PlanarChain(ManipulatorModel):
    """Planar serial chain of revolute joints with point masses at the link tips.

    The chain moves in the x-y plane; joint angles are relative and measured
    from the previous link (the first from the +x axis). All dynamics terms are
    closed form in the absolute link angles ``phi = cumsum(q)``.
    """

    def __init__(self, lengths, masses, gravity=GRAVITY, joint_damping=None):
        self.lengths = as_vector(lengths, name="lengths")
        self.masses = as_vector(masses, self.lengths.size, "masses")
        self.n = self.lengths.size
        if self.n < 1:
            raise ModelError("a chain needs at least one joint")
        if np.any(self.masses <= 0):
            raise ModelError("link masses must be positive")
        if np.any(self.lengths <= 0):
            raise ModelError("link lengths must be positive")
        self.gravity = as_vector(gravity, 3, "gravity")
        self.joint_damping = _check_damping(joint_damping, self.n)
        # tail[a] = mass carried beyond joint a; C[a, b] = l_a l_b tail[max(a, b)]
        tail = np.cumsum(self.masses[::-1])[::-1]
        self._tail = tail
        idx = np.arange(self.n)
        self._C = np.outer(self.lengths, self.lengths) * tail[np.maximum.outer(idx, idx)]
        self._T = np.triu(np.ones((self.n, self.n)))  # T[j, a] = [a >= j]

    def __repr__(self):
        return f"PlanarChain(lengths={self.lengths.tolist()}, masses={self.masses.tolist()})"

    def _angles(self, q):
        return np.cumsum(as_vector(q, self.n, "q"))

    def mass_matrix(self, q):
        phi = self._angles(q)
        K = self._C * np.cos(np.subtract.outer(phi, phi))
        M = self._T @ K @ self._T.T
        return 0.5 * (M + M.T)

    def mass_matrix_derivatives(self, q):
        phi = self._angles(q)
        S = self._C * np.sin(np.subtract.outer(phi, phi))
        idx = np.arange(self.n)
        dM = np.empty((self.n, self.n, self.n))
        for k in range(self.n):
            after = (idx >= k).astype(float)
            mask = np.subtract.outer(after, after)
            dM[k] = self._T @ (-S * mask) @ self._T.T
        return dM

    def bias(self, q, qdot):
        phi = self._angles(q)
        phidot = np.cumsum(as_vector(qdot, self.n, "qdot"))
        S = self._C * np.sin(np.subtract.outer(phi, phi))
        return self._T @ (S @ phidot**2)

    def potential(self, q):
        phi = self._angles(q)
        gx, gy = self.gravity[:2]
        w = self.lengths * self._tail
        return float(-np.sum(w * (gx * np.cos(phi) + gy * np.sin(phi))))

    def potential_gradient(self, q):
        phi = self._angles(q)
        gx, gy = self.gravity[:2]
        w = self.lengths * self._tail
        return -self._T @ (w * (-gx * np.sin(phi) + gy * np.cos(phi)))

    def tip_positions(self, q):
        """(n, 2) array with the planar position of every point mass."""
        phi = self._angles(q)
        seg = self.lengths[:, None] * np.column_stack([np.cos(phi), np.sin(phi)])
        return np.cumsum(seg, axis=0)

    def to_serial_chain(self):
        """Equivalent :class:`SerialChain` (used to cross-check the generic algorithms)."""
        links = []
        for i in range(self.n):
            offset = (0.0, 0.0, 0.0) if i == 0 else (self.lengths[i - 1], 0.0, 0.0)
            links.append(
                Link(
                    mass=self.masses[i],
                    com=(self.lengths[i], 0.0, 0.0),
                    inertia=np.zeros((3, 3)),
                    axis=(0.0, 0.0, 1.0),
                    offset=offset,
                )
            )
        return SerialChain(
            links,
            tip=(self.lengths[-1], 0.0, 0.0),
            gravity=self.gravity,
            joint_damping=self.joint_damping,
        )


class ConstantInertiaModel(ManipulatorModel):
    """Toy model with a constant mass matrix and a quadratic potential ``1/2 q^T K q``.

    With ``K = 0`` there are no forces at all; useful as a zero-curvature oracle.
    """

    def __init__(self, inertia, spring=None, joint_damping=None):
        M = np.atleast_2d(np.asarray(inertia, dtype=float))
        if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
            raise ModelError("inertia must be a symmetric square matrix")
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            raise ModelError("inertia must be positive definite") from None
        self.n = M.shape[0]
        self.M = M
        self.K = np.zeros_like(M) if spring is None else np.asarray(spring, dtype=float).reshape(M.shape)
        self.gravity = np.zeros(3)
        self.joint_damping = _check_damping(joint_damping, self.n)

    def __repr__(self):
        return f"ConstantInertiaModel(n={self.n})"

    def mass_matrix(self, q):
        as_vector(q, self.n, "q")
        return self.M.copy()

    def mass_matrix_derivatives(self, q):
        return np.zeros((self.n, self.n, self.n))

    def bias(self, q, qdot):
        as_vector(qdot, self.n, "qdot")
        return np.zeros(self.n)

    def potential(self, q):
        q = as_vector(q, self.n, "q")
        return float(0.5 * q @ self.K @ q)

    def potential_gradient(self, q):
        return self.K @ as_vector(q, self.n, "q")


def _rotation(axis, angle):
    """Rodrigues rotation about a unit axis."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def _rpy(rpy):
    r, p, y = rpy
    return _rotation((0.0, 0.0, 1.0), y) @ _rotation((0.0, 1.0, 0.0), p) @ _rotation((1.0, 0.0, 0.0), r)


@dataclass(frozen=True)
class Link:
    """One revolute joint and the rigid link it drives.

    ``offset`` and ``rpy`` place the joint frame in the previous joint frame
    (URDF ``origin`` convention); ``axis`` is the rotation axis in the joint
    frame; ``com`` and ``inertia`` (about the COM) are in the joint frame.
    """

    mass: float
    com: tuple = (0.0, 0.0, 0.0)
    inertia: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    axis: tuple = (0.0, 0.0, 1.0)
    offset: tuple = (0.0, 0.0, 0.0)
    rpy: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "mass", float(self.mass))
        object.__setattr__(self, "com", as_vector(self.com, 3, "com"))
        object.__setattr__(self, "offset", as_vector(self.offset, 3, "offset"))
        object.__setattr__(self, "rpy", as_vector(self.rpy, 3, "rpy"))
        axis = as_vector(self.axis, 3, "axis")
        norm = np.linalg.norm(axis)
        if norm == 0:
            raise ModelError("joint axis must be nonzero")
        object.__setattr__(self, "axis", axis / norm)
        inertia = np.asarray(self.inertia, dtype=float)
        if inertia.shape == (3,):
            inertia = np.diag(inertia)
        elif inertia.shape == (6,):  # ixx, iyy, izz, ixy, ixz, iyz
            ixx, iyy, izz, ixy, ixz, iyz = inertia
            inertia = np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])
        if inertia.shape != (3, 3) or not np.all(np.isfinite(inertia)):
            raise ModelError("inertia must be a finite 3x3 matrix, 3 principal or 6 unique entries")
        if not np.allclose(inertia, inertia.T, atol=1e-12):
            raise ModelError("inertia tensor must be symmetric")
        if np.linalg.eigvalsh(inertia).min() < -1e-12:
            raise ModelError("inertia tensor must be positive semidefinite")
        object.__setattr__(self, "inertia", inertia)
        if not self.mass > 0:
            raise ModelError("link mass must be positive")


class SerialChain(ManipulatorModel):
    """Generic N-DOF revolute serial chain.

    The mass matrix uses the composite-rigid-body algorithm and the bias and
    gravity terms the recursive Newton-Euler algorithm, both in world frame.
    """

    def __init__(self, links, tip=(0.0, 0.0, 0.0), gravity=GRAVITY, joint_damping=None):
        self.links = tuple(links)
        self.n = len(self.links)
        if self.n < 1:
            raise ModelError("a chain needs at least one link")
        self.tip = as_vector(tip, 3, "tip")
        self.gravity = as_vector(gravity, 3, "gravity")
        self.joint_damping = _check_damping(joint_damping, self.n)
        self._fixed = [_rpy(link.rpy) for link in self.links]

    def __repr__(self):
        return f"SerialChain(n={self.n})"

    def kinematics(self, q):
        """World-frame joint origins, rotations, axes and link COMs."""
        q = as_vector(q, self.n, "q")
        R = np.eye(3)
        o = np.zeros(3)
        origins, rots, axes, coms = [], [], [], []
        for i, link in enumerate(self.links):
            o = o + R @ link.offset
            R = R @ self._fixed[i]
            axes.append(R @ link.axis)
            R = R @ _rotation(link.axis, q[i])
            origins.append(o)
            rots.append(R)
            coms.append(o + R @ link.com)
        return np.array(origins), np.array(rots), np.array(axes), np.array(coms)

    def tip_position(self, q):
        o, R, _, _ = self.kinematics(q)
        return o[-1] + R[-1] @ self.tip

    def tip_jacobian(self, q):
        """3 x n linear velocity Jacobian of the tip point."""
        o, R, a, _ = self.kinematics(q)
        p = o[-1] + R[-1] @ self.tip
        return np.cross(a, p - o).T

    def mass_matrix(self, q):
        o, R, a, c = self.kinematics(q)
        n = self.n
        M = np.zeros((n, n))
        # composite body i..n-1: mass, COM, rotational inertia about its COM (world)
        mc = 0.0
        first = np.zeros(3)
        Ic = np.zeros((3, 3))
        for i in range(n - 1, -1, -1):
            link = self.links[i]
            Ii = R[i] @ link.inertia @ R[i].T
            m_new = mc + link.mass
            c_new = (mc * first + link.mass * c[i]) / m_new
            Ic = _shift_inertia(Ic, mc, first - c_new) + _shift_inertia(Ii, link.mass, c[i] - c_new)
            mc, first = m_new, c_new
            # wrench about o[i] required for unit acceleration of joint i (from rest)
            r = first - o[i]
            force = mc * _cross(a[i], r)
            moment = Ic @ a[i] + _cross(r, force)
            col = a[:i + 1] @ moment + np.einsum("jk,jk->j", a[:i + 1], np.cross(o[i] - o[:i + 1], force))
            M[:i + 1, i] = col
            M[i, :i + 1] = col
        return M

    def mass_matrix_derivatives(self, q):
        """Exact ``dM/dq_k`` from ``M = sum_b m_b Jv_b^T Jv_b + Jw_b^T I_b Jw_b``.

        Joint ``k`` rotates every Jacobian column ``j >= k`` of body ``b`` about
        ``a_k`` and moves only the COM lever of the columns ``j < k``.
        """
        o, R, a, c = self.kinematics(q)
        n = self.n
        dM = np.zeros((n, n, n))
        for b, link in enumerate(self.links):
            k1 = b + 1
            Ib = R[b] @ link.inertia @ R[b].T
            Jw = a[:k1]
            Jv = np.cross(Jw, c[b] - o[:k1])
            for k in range(k1):
                ak = a[k]
                upper = np.arange(k1) >= k
                dJw = np.where(upper[:, None], np.cross(ak, Jw), 0.0)
                moved = _cross(ak, c[b] - o[k])
                dJv = np.where(upper[:, None], np.cross(ak, Jv), np.cross(Jw, moved))
                S = _skew(ak)
                dI = S @ Ib - Ib @ S
                lin = link.mass * dJv @ Jv.T
                rot = dJw @ Ib @ Jw.T
                dM[k, :k1, :k1] += lin + lin.T + rot + rot.T + Jw @ dI @ Jw.T
        return dM

    def _rnea(self, q, qdot, qddot, gravity):
        o, R, a, c = self.kinematics(q)
        n = self.n
        w = np.zeros(3)
        wd = np.zeros(3)
        acc_o = -np.asarray(gravity, dtype=float)
        prev_o = np.zeros(3)
        forces, moments = [], []
        for i, link in enumerate(self.links):
            r = o[i] - prev_o
            acc_o = acc_o + _cross(wd, r) + _cross(w, _cross(w, r))
            wd = wd + a[i] * qddot[i] + _cross(w, a[i] * qdot[i])
            w = w + a[i] * qdot[i]
            rc = c[i] - o[i]
            acc_c = acc_o + _cross(wd, rc) + _cross(w, _cross(w, rc))
            Ii = R[i] @ link.inertia @ R[i].T
            forces.append(link.mass * acc_c)
            moments.append(Ii @ wd + _cross(w, Ii @ w))
            prev_o = o[i]
        tau = np.zeros(n)
        f_next = np.zeros(3)
        n_next = np.zeros(3)
        for i in range(n - 1, -1, -1):
            nxt = o[i + 1] - o[i] if i + 1 < n else np.zeros(3)
            f = forces[i] + f_next
            m = moments[i] + _cross(c[i] - o[i], forces[i]) + n_next + _cross(nxt, f_next)
            tau[i] = a[i] @ m
            f_next, n_next = f, m
        return tau

    def inverse_dynamics(self, q, qdot, qddot):
        return self._rnea(q, qdot, qddot, self.gravity)

    def bias(self, q, qdot):
        z = np.zeros(self.n)
        return self._rnea(q, as_vector(qdot, self.n, "qdot"), z, np.zeros(3))

    def potential_gradient(self, q):
        z = np.zeros(self.n)
        return self._rnea(q, z, z, self.gravity)

    def potential(self, q):
        _, _, _, c = self.kinematics(q)
        masses = np.array([link.mass for link in self.links])
        return float(-np.sum(masses * (c @ self.gravity)))


def _cross(u, v):
    # np.cross has a large per-call overhead for single 3-vectors
    return np.array([u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]])


def _skew(u):
    return np.array([[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]])


def _shift_inertia(I, m, d):
    """Parallel-axis shift of inertia ``I`` (about its COM) by displacement ``d``."""
    return I + m * (d @ d * np.eye(3) - np.outer(d, d))
