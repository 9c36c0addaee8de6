"""Differential tasks eta = J(q) qdot, optionally with a forward map x = f(q)."""

from __future__ import annotations

import numpy as np

from .errors import ModelError
from .model import PlanarChain, SerialChain, as_vector, central_jacobian


class TaskMap:
    """A differential task of dimension ``m`` on an ``n``-joint model.

    ``forward`` is ``None`` for non-integrable tasks. ``null_basis`` is
    ``None`` unless the task ships a smooth closed-form kernel basis.
    """

    forward = None
    null_basis = None

    def __init__(self, m, n):
        if not 1 <= m <= n:
            raise ModelError(f"task dimension must satisfy 1 <= m <= n, got m={m}, n={n}")
        self.m = int(m)
        self.n = int(n)

    def jacobian(self, q):
        raise NotImplementedError

    def jacobian_derivatives(self, q):
        """Array ``dJ`` of shape (n, m, n) with ``dJ[k] = dJ/dq_k``."""
        q = as_vector(q, self.n, "q")
        return np.moveaxis(central_jacobian(self.jacobian, q), -1, 0)

    @property
    def integrable(self):
        return self.forward is not None


class ConstantTask(TaskMap):
    """Configuration-independent task matrix (toy and oracle cases)."""

    def __init__(self, matrix):
        A = np.atleast_2d(np.asarray(matrix, dtype=float))
        super().__init__(A.shape[0], A.shape[1])
        self.matrix = A
        self.forward = lambda q: self.matrix @ as_vector(q, self.n, "q")

    def jacobian(self, q):
        as_vector(q, self.n, "q")
        return self.matrix.copy()

    def jacobian_derivatives(self, q):
        return np.zeros((self.n, self.m, self.n))


class FunctionTask(TaskMap):
    """Task from user callables; the Jacobian defaults to differentiating ``forward``."""

    def __init__(self, m, n, jacobian=None, forward=None):
        super().__init__(m, n)
        if jacobian is None and forward is None:
            raise ModelError("FunctionTask needs a jacobian or a forward map")
        self._jacobian = jacobian
        if forward is not None:
            self.forward = forward

    def jacobian(self, q):
        q = as_vector(q, self.n, "q")
        if self._jacobian is not None:
            return np.asarray(self._jacobian(q), dtype=float)
        return central_jacobian(self.forward, q)


def cofactor_null_vector(J):
    """Unit kernel vector of an m x (m+1) matrix from signed maximal minors.

    Unlike an SVD vector it is a smooth function of ``J`` wherever the rank is
    full, so it serves as a reference basis along trajectories.
    """
    m, n = J.shape
    if n != m + 1:
        raise ValueError("cofactor null vector needs exactly one redundant direction")
    z = np.array([(-1) ** k * np.linalg.det(np.delete(J, k, axis=1)) for k in range(n)])
    return (z / np.linalg.norm(z))[None, :]


class PlanarPositionTask(TaskMap):
    """End-effector (x, y) position of a :class:`PlanarChain` in closed form."""

    def __init__(self, chain: PlanarChain, analytic_null=False):
        super().__init__(2, chain.n)
        self.chain = chain
        if analytic_null:
            if chain.n != 3:
                raise ModelError("the analytic null-space basis is provided for 3-link chains only")
            self.null_basis = lambda q: cofactor_null_vector(self.jacobian(q))

    def forward(self, q):
        return self.chain.tip_positions(q)[-1]

    def jacobian(self, q):
        phi = self.chain._angles(q)
        lx = -self.chain.lengths * np.sin(phi)
        ly = self.chain.lengths * np.cos(phi)
        # column j sums segments a >= j
        return np.vstack([np.cumsum(lx[::-1])[::-1], np.cumsum(ly[::-1])[::-1]])

    def jacobian_derivatives(self, q):
        phi = self.chain._angles(q)
        cx = -self.chain.lengths * np.cos(phi)
        cy = -self.chain.lengths * np.sin(phi)
        n = self.n
        dJ = np.empty((n, 2, n))
        for k in range(n):
            for j in range(n):
                s = max(j, k)
                dJ[k, 0, j] = cx[s:].sum()
                dJ[k, 1, j] = cy[s:].sum()
        return dJ


class ChainPositionTask(TaskMap):
    """Tip position of a :class:`SerialChain`, restricted to selected axes."""

    def __init__(self, chain: SerialChain, components=(0, 1, 2)):
        components = tuple(int(c) for c in components)
        if not components or any(c not in (0, 1, 2) for c in components) or len(set(components)) != len(components):
            raise ModelError(f"components must be distinct axes among 0, 1, 2; got {components}")
        super().__init__(len(components), chain.n)
        self.chain = chain
        self.components = components

    def forward(self, q):
        return self.chain.tip_position(q)[list(self.components)]

    def jacobian(self, q):
        return self.chain.tip_jacobian(q)[list(self.components)]

    def jacobian_derivatives(self, q):
        # column j is a_j x (p - o_j); joint k rotates it when k <= j and moves p otherwise
        o, R, a, _ = self.chain.kinematics(q)
        Jc = np.cross(a, o[-1] + R[-1] @ self.chain.tip - o)          # (n, 3), row j = column j
        n = self.n
        dJ = np.empty((n, 3, n))
        for k in range(n):
            upper = np.cross(a[k], Jc)                                   # k <= j
            lower = np.cross(a, Jc[k])                                   # k > j
            cols = np.where((np.arange(n) >= k)[:, None], upper, lower)
            dJ[k] = cols.T
        return dJ[:, list(self.components), :]
