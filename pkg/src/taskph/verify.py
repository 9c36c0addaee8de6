"""Structural invariants of the task/null-space split and the transformed pH model.

:func:`residuals` evaluates every check at one state; :func:`verify_structure`
samples random nonsingular states and tabulates the residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decomposition import kinetic_energy_split, split_force, split_velocity
from .errors import BasisAlignmentError, TaskSingularityError
from .model import central_jacobian
from .ph import PhState

ALGEBRAIC = 1e-9

# column -> (tolerance, derivative-limited?)
TOLERANCES = {
    "J_Jm_identity": (ALGEBRAIC, False),
    "J_Zt": (ALGEBRAIC, False),
    "Jbar_inverse": (ALGEBRAIC, False),
    "Lambda_bar_offdiag": (ALGEBRAIC, False),
    "P_idempotent": (ALGEBRAIC, False),
    "M_orthogonality": (ALGEBRAIC, False),
    "force_annihilator": (ALGEBRAIC, False),
    "energy_split": (ALGEBRAIC, False),
    "power_split": (ALGEBRAIC, False),
    "roundtrip": (1e-10, False),
    "kinetic_invariance": (ALGEBRAIC, False),
    "outputs": (ALGEBRAIC, False),
    "G11_skew": (1e-8, True),
    "G22_skew": (1e-8, True),
    "Jz_skew": (1e-8, True),
    "autonomous_power": (1e-10, True),
    "power_balance": (1e-8, True),
    "dHdq_fd": (1e-5, True),
    "transformation_law": (1e-4, True),
}


def _rel(a, scale):
    return float(a / scale) if scale > 0 else float(a)


def residuals(system, q, qdot, tau, sigma, tau_0, transformation_law=True):
    """All invariant residuals at one state, keyed like :data:`TOLERANCES`."""
    system = system.anchored(q)
    dec = system.decompose(q)
    m, n = dec.m, dec.n
    M, J, Z = dec.M, dec.J, dec.Z
    out = {}
    out["J_Jm_identity"] = float(np.abs(J @ dec.Jm_sharp - np.eye(m)).max())
    out["J_Zt"] = _rel(np.abs(J @ Z.T).max() if n > m else 0.0, np.linalg.norm(J, 2) * max(np.linalg.norm(Z, 2), 1.0))
    out["Jbar_inverse"] = float(np.abs(dec.Jbar @ dec.Jbar_inv - np.eye(n)).max())
    Lb = dec.Lambda_bar
    out["Lambda_bar_offdiag"] = _rel(np.linalg.norm(Lb[:m, m:]) + np.linalg.norm(Lb[m:, :m]), np.linalg.norm(Lb))
    P = dec.P
    out["P_idempotent"] = float(np.abs(P @ P - P).max())

    v, nu_full, eta, nu = split_velocity(dec, qdot)
    norm_M = np.linalg.norm(M, 2)
    out["M_orthogonality"] = _rel(abs(v @ M @ nu_full), qdot @ qdot * norm_M)
    tau_F, tau_0_full, sig, t0 = split_force(dec, tau)
    out["force_annihilator"] = _rel(np.linalg.norm(J @ np.linalg.solve(M, tau_0_full)),
                                    np.linalg.norm(tau_0_full) * np.linalg.norm(J, 2) / np.linalg.eigvalsh(M)[0])
    K = 0.5 * qdot @ M @ qdot
    K_t, K_nu = kinetic_energy_split(dec, qdot)
    out["energy_split"] = _rel(abs(K_t + K_nu - K), K)
    out["power_split"] = _rel(abs(tau @ qdot - sig @ eta - t0 @ nu), np.linalg.norm(tau) * np.linalg.norm(qdot))

    p = M @ qdot
    s = system.to_ph_state(q, p, dec)
    back = system.to_canonical(s, dec).p
    out["roundtrip"] = _rel(np.linalg.norm(back - p), np.linalg.norm(p))
    point = system.point(s, dec)
    H, grads = point.gradients.H, point.gradients
    out["kinetic_invariance"] = _rel(abs(H - point.potential - 0.5 * p @ np.linalg.solve(M, p)), K)
    out["outputs"] = _rel(np.linalg.norm(np.concatenate([grads.dpi - eta, grads.dpinu - nu])),
                          np.linalg.norm(qdot) * np.linalg.norm(J, 2) + np.linalg.norm(nu))

    S = point.structure
    Jz = S.Jz
    scale = 1.0 + np.abs(Jz).max()
    out["G11_skew"] = float(np.abs(S.G11 + S.G11.T).max() / scale)
    out["G22_skew"] = float(np.abs(S.G22 + S.G22.T).max() / scale) if n > m else 0.0
    out["Jz_skew"] = float(np.abs(Jz + Jz.T).max() / scale)
    dz = grads.dz
    out["autonomous_power"] = _rel(abs(dz @ Jz @ dz), dz @ dz)
    zdot = point.rhs(sigma, tau_0)
    supplied = sigma @ eta + tau_0 @ nu
    out["power_balance"] = _rel(abs(dz @ zdot - supplied),
                                np.linalg.norm(dz) * np.linalg.norm(zdot) + abs(supplied))

    def H_of_q(x):
        return np.array([system.hamiltonian(PhState(x, s.pi, s.pi_nu))])

    fd = central_jacobian(H_of_q, q, 1e-4, order=4)[0]
    out["dHdq_fd"] = _rel(np.linalg.norm(fd - grads.dq), np.linalg.norm(grads.dq))

    if transformation_law:
        F = central_jacobian(lambda y: system.phi(y[:n], y[n:]), np.concatenate([q, p]), 1e-3, order=4)
        J0 = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
        out["transformation_law"] = _rel(np.abs(Jz - F @ J0 @ F.T).max(), np.abs(Jz).max())
    else:
        out["transformation_law"] = 0.0
    return out


@dataclass
class VerifyReport:
    columns: list
    rows: list
    failures: dict
    skipped: int

    @property
    def ok(self):
        return not self.failures

    def max_residuals(self):
        arr = np.array([r[1:] for r in self.rows], dtype=float)
        return dict(zip(self.columns[1:], arr.max(axis=0))) if len(arr) else {}


def sample_states(system, samples, seed=0, q_low=-np.pi, q_high=np.pi, qdot_scale=1.0,
                  max_condition=1e3, max_tries=None):
    """Random states with ``cond(J) <= max_condition`` (rejection sampling)."""
    rng = np.random.default_rng(seed)
    n, m = system.n, system.m
    out, skipped = [], 0
    limit = max_tries or 50 * samples
    while len(out) < samples and skipped + len(out) < limit:
        q = rng.uniform(q_low, q_high, n)
        try:
            dec = system.decompose(q)
        except (TaskSingularityError, BasisAlignmentError):
            skipped += 1
            continue
        if dec.condition > max_condition:
            skipped += 1
            continue
        out.append((q, qdot_scale * rng.standard_normal(n), rng.standard_normal(n),
                    rng.standard_normal(m), rng.standard_normal(n - m)))
    return out, skipped


def verify_structure(system, samples=500, seed=0, transformation_law=True, **sampling):
    states, skipped = sample_states(system, samples, seed, **sampling)
    columns = ["sample"] + list(TOLERANCES)
    rows, failures = [], {}
    for i, (q, qdot, tau, sigma, tau_0) in enumerate(states):
        res = residuals(system, q, qdot, tau, sigma, tau_0, transformation_law)
        rows.append([i] + [res[c] for c in TOLERANCES])
        for c, (tol, _) in TOLERANCES.items():
            if not res[c] <= tol:
                failures[c] = max(failures.get(c, 0.0), res[c])
    return VerifyReport(columns, rows, failures, skipped)
