"""Fixed-step integration of canonical, transformed and closed-loop dynamics.

Traces carry the energy bookkeeping of the task/null-space split. Energy
injected through the ports and energy dissipated by damping are integrated as
two extra states with the same Runge-Kutta scheme, so the global energy
account closes to integrator accuracy.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import eigh

from .control import IdaPbcController, IdaPbcParams
from .decomposition import DEFAULT_RANK_TOL
from .errors import BasisAlignmentError, ConfigError, InvalidArgumentError, TaskSingularityError
from .ph import CanonicalState, FiniteDifferences, PhState, TaskSpacePH, canonical_rhs

log = logging.getLogger(__name__)

RECHART_OVERLAP = 0.5
# classic RK4 is stable on the negative real axis for |lambda| dt < 2.785
RK4_REAL_STABILITY = 2.785


@dataclass(frozen=True)
class ForcePulse:
    """External task force active on ``[start, start + duration)``.

    With ``ramp`` the force grows linearly from zero to ``force`` over the window.
    """

    start: float
    duration: float
    force: tuple
    ramp: bool = False

    def value(self, t_step, t_stage, dt):
        mid = t_step + 0.5 * dt
        if not self.start <= mid < self.start + self.duration:
            return None
        F = np.asarray(self.force, dtype=float)
        if self.ramp:
            return F * min(max((t_stage - self.start) / self.duration, 0.0), 1.0)
        return F


@dataclass(frozen=True)
class TorqueWindow:
    """Constant joint torque applied on ``[start, start + duration)`` (open loop)."""

    start: float
    duration: float
    torque: tuple

    def value(self, t_step, dt):
        mid = t_step + 0.5 * dt
        if self.start <= mid < self.start + self.duration:
            return np.asarray(self.torque, dtype=float)
        return None


@dataclass
class Scenario:
    model: object
    task: object
    q0: np.ndarray
    qdot0: np.ndarray
    dt: float = 1e-3
    duration: float = 1.0
    log_every: float | None = None
    controller: IdaPbcParams | None = None
    forces: list = field(default_factory=list)
    torques: list = field(default_factory=list)
    integrator: str = "rk4"
    backend: str = "transformed"
    derivatives: object = None
    rank_tol: float = DEFAULT_RANK_TOL
    name: str = "run"

    def __post_init__(self):
        self.q0 = np.asarray(self.q0, dtype=float)
        self.qdot0 = np.asarray(self.qdot0, dtype=float)
        if not self.dt > 0:
            raise ConfigError("dt must be positive", field="integrator.dt")
        if not self.duration > 0:
            raise ConfigError("duration must be positive", field="integrator.duration")
        if self.integrator != "rk4":
            raise ConfigError(f"unknown integrator {self.integrator!r} (only 'rk4')", field="integrator.name")
        if self.backend not in ("transformed", "canonical"):
            raise ConfigError(f"unknown backend {self.backend!r}", field="integrator.backend")
        for name, items in (("forces", self.forces), ("torques", self.torques)):
            spans = sorted((w.start, w.start + w.duration) for w in items)
            for (a0, a1), (b0, _) in zip(spans, spans[1:]):
                if b0 < a1 - 1e-12:
                    raise ConfigError(f"{name} windows overlap", field=name)
            for w in items:
                if w.start < 0 or w.duration <= 0 or w.start + w.duration > self.duration + 1e-12:
                    raise ConfigError(f"{name} window outside [0, duration]", field=name)
        for w in self.forces:
            if len(w.force) != self.task.m:
                raise ConfigError(f"force must have {self.task.m} components", field="forces")
        for w in self.torques:
            if len(w.torque) != self.model.n:
                raise ConfigError(f"torque must have {self.model.n} components", field="torques")
        if self.log_every is None:
            self.log_every = self.dt

    @property
    def steps(self):
        return int(round(self.duration / self.dt))

    @property
    def log_stride(self):
        return max(1, int(round(self.log_every / self.dt)))


def trace_columns(n, m, integrable):
    cols = ["t"]
    cols += [f"q{i}" for i in range(n)] + [f"qdot{i}" for i in range(n)]
    if integrable:
        cols += [f"x{i}" for i in range(m)] + ["err_norm"]
    cols += [f"eta{i}" for i in range(m)] + [f"nu{i}" for i in range(n - m)]
    cols += [f"pi{i}" for i in range(m)] + [f"pi_nu{i}" for i in range(n - m)]
    cols += [f"F{i}" for i in range(m)]
    cols += ["K_t", "K_nu", "V", "Hbar", "Hbarbar", "power_task", "power_null", "dissipation",
             "injected_energy", "dissipated_energy", "kinetic_residual", "skew_residual",
             "power_residual", "status"]
    return cols


@dataclass
class Trace:
    columns: list
    rows: list
    status: str = "ok"
    error: str | None = None
    recharts: int = 0

    def column(self, name):
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows if r[-1] == "ok"], dtype=float)

    def block(self, prefix, count):
        return np.column_stack([self.column(f"{prefix}{i}") for i in range(count)]) if count else None

    @property
    def ok(self):
        return self.status == "ok"

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([v if isinstance(v, str) else f"{v:.17g}" for v in row])


class Simulation:
    """One integration context: owns the anchored system and controller."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        derivatives = scenario.derivatives or FiniteDifferences()
        base = TaskSpacePH(scenario.model, scenario.task, derivatives=derivatives,
                           rank_tol=scenario.rank_tol)
        self.system = base.anchored(scenario.q0)
        self.controller = None
        if scenario.controller is not None:
            self.controller = IdaPbcController(scenario.controller, self.system)
            self.check_step(scenario.q0)
        self.n, self.m = scenario.model.n, scenario.task.m
        self.recharts = 0

    def damping_rate(self, q):
        """Fastest damping-injection decay rate at ``q``: max eig of ``Lambda^-1 D`` per block."""
        dec = self.system.decompose(q)
        p = self.controller.params
        rates = [0.0]
        for D, Lam in ((p.D_t, dec.Lambda_t), (p.D_nu, dec.Lambda_nu)):
            if D.size:
                rates.append(float(eigh(D, Lam, eigvals_only=True).max()))
        return max(rates)

    def check_step(self, q):
        rate = self.damping_rate(q)
        if rate * self.sc.dt > RK4_REAL_STABILITY:
            log.warning("%s: damping mode at %.0f 1/s needs dt < %.2e for RK4 stability (dt = %g)",
                        self.sc.name, rate, RK4_REAL_STABILITY / rate, self.sc.dt)

    # --- forcing ------------------------------------------------------------
    def force(self, t_step, t_stage):
        for pulse in self.sc.forces:
            F = pulse.value(t_step, t_stage, self.sc.dt)
            if F is not None:
                return F
        return np.zeros(self.m)

    def torque(self, t_step):
        for win in self.sc.torques:
            tau = win.value(t_step, self.sc.dt)
            if tau is not None:
                return tau
        return np.zeros(self.n)

    # --- right-hand sides ---------------------------------------------------
    def _powers(self, point, action, F, tau):
        """Injected and dissipated power at a state."""
        qdot = point.qdot
        friction = float(qdot @ (self.sc.model.joint_damping * qdot))
        injected = float(point.eta @ F)
        if action is None:
            injected += float(tau @ qdot)
            return injected, friction
        return injected, action.dissipated_power + friction

    def rhs_transformed(self, t_step, t_stage, y):
        n, m = self.n, self.m
        s = PhState.from_array(y[:2 * n], n, m)
        point = self.system.point(s)
        F = self.force(t_step, t_stage)
        if self.controller is not None:
            action = self.controller.action(point)
            zdot = point.rhs(action.sigma + F, action.tau_0)
            tau = None
        else:
            action = None
            tau = self.torque(t_step)
            u = point.dec.Jbar_inv_T @ tau
            zdot = point.rhs(u[:m] + F, u[m:])
        p_in, p_out = self._powers(point, action, F, tau)
        return np.concatenate([zdot, [p_in, p_out]])

    def rhs_canonical(self, t_step, t_stage, y):
        n = self.n
        q, p = y[:n], y[n:2 * n]
        F = self.force(t_step, t_stage)
        dec = self.system.decompose(q)
        point = self.system.point(self.system.to_ph_state(q, p, dec), dec)
        if self.controller is not None:
            action = self.controller.action(point)
            tau = action.tau_joint
        else:
            action = None
            tau = self.torque(t_step)
        qdot, pdot = canonical_rhs(self.sc.model, CanonicalState(q, p), tau + dec.J.T @ F)
        p_in, p_out = self._powers(point, action, F, None if action is not None else tau)
        return np.concatenate([qdot, pdot, [p_in, p_out]])

    # --- state handling -----------------------------------------------------
    def initial_state(self):
        q0, qd0 = self.sc.q0, self.sc.qdot0
        if self.sc.backend == "transformed":
            z = self.system.from_velocity(q0, qd0).as_array()
        else:
            z = np.concatenate([q0, self.sc.model.mass_matrix(q0) @ qd0])
        return np.concatenate([z, [0.0, 0.0]])

    def ph_state(self, y):
        n, m = self.n, self.m
        if self.sc.backend == "transformed":
            return PhState.from_array(y[:2 * n], n, m)
        return self.system.to_ph_state(y[:n], y[n:2 * n])

    def maybe_rechart(self, y):
        """Re-anchor the null-space basis when it drifts away from its reference."""
        if self.system.reference is None:
            return y
        n = self.n
        q = y[:n]
        dec = self.system.decompose(q)
        if dec.overlap >= RECHART_OVERLAP:
            return y
        s = PhState.from_array(y[:2 * n], n, self.m)
        p = self.system.to_canonical(s, dec).p if self.sc.backend == "transformed" else None
        self.system = self.system.anchored(q)
        if self.controller is not None:
            self.controller = self.controller.with_system(self.system)
        self.recharts += 1
        log.debug("re-anchored null-space basis at t-step (overlap %.3f)", dec.overlap)
        if p is None:
            return y
        z = self.system.to_ph_state(q, p).as_array()
        return np.concatenate([z, y[2 * n:]])

    def row(self, t, t_step, y, H0, columns):
        n, m = self.n, self.m
        s = self.ph_state(y)
        point = self.system.point(s)
        dec = point.dec
        task, model = self.sc.task, self.sc.model
        F = self.force(t_step, t)
        qdot = point.qdot
        eta, nu = point.eta, point.nu
        K_t, K_nu = point.kinetic
        V = point.potential
        Hbar = K_t + K_nu + V
        if self.controller is not None:
            action = self.controller.action(point)
            sigma, tau_0 = action.sigma + F, action.tau_0
            Hbb = self.controller.shaped_hamiltonian(s, point)
            grad = self.controller.shaped_gradient(point)
            dissipation = action.dissipated_power
            expected = float(eta @ F) - dissipation
        else:
            tau = self.torque(t_step)
            u = dec.Jbar_inv_T @ tau
            sigma, tau_0 = u[:m] + F, u[m:]
            Hbb = math.nan
            grad = point.gradients.dz
            dissipation = 0.0
            expected = float(sigma @ eta + tau_0 @ nu)
        friction = float(qdot @ (model.joint_damping * qdot))
        dissipation += friction
        expected -= friction
        zdot = point.rhs(sigma, tau_0)
        rate = float(grad @ zdot)
        scale = 1.0 + abs(H0) + np.abs(grad).max() * np.abs(zdot).max()
        Jz = point.structure.Jz
        skew = float(np.abs(Jz + Jz.T).max() / max(1.0, np.abs(Jz).max()))
        K = 0.5 * qdot @ dec.M @ qdot
        values = [t, *s.q, *qdot]
        if task.integrable:
            x = np.asarray(task.forward(s.q), dtype=float)
            x_ref = self.controller.x_star if self.controller is not None else np.asarray(task.forward(self.sc.q0))
            values += [*x, float(np.linalg.norm(x - x_ref))]
        values += [*eta, *nu, *s.pi, *s.pi_nu, *F]
        values += [K_t, K_nu, V, Hbar, Hbb, float(sigma @ eta), float(tau_0 @ nu), dissipation,
                   y[2 * n], y[2 * n + 1], abs(K_t + K_nu - K) / (1.0 + K), skew,
                   abs(rate - expected) / scale, "ok"]
        assert len(values) == len(columns)
        return values

    def run(self):
        sc = self.sc
        n, m = self.n, self.m
        columns = trace_columns(n, m, sc.task.integrable)
        rhs = self.rhs_transformed if sc.backend == "transformed" else self.rhs_canonical
        y = self.initial_state()
        s0 = self.ph_state(y)
        H0 = (self.controller.shaped_hamiltonian(s0) if self.controller is not None
              else self.system.hamiltonian(s0))
        dt = sc.dt
        rows = [self.row(0.0, 0.0, y, H0, columns)]
        status, error = "ok", None
        for k in range(sc.steps):
            t = k * dt
            try:
                k1 = rhs(t, t, y)
                k2 = rhs(t, t + 0.5 * dt, y + 0.5 * dt * k1)
                k3 = rhs(t, t + 0.5 * dt, y + 0.5 * dt * k2)
                k4 = rhs(t, t + dt, y + dt * k3)
                y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
                if not np.all(np.isfinite(y)):
                    raise FloatingPointError("non-finite state (blow-up)")
                y = self.maybe_rechart(y)
                if (k + 1) % sc.log_stride == 0 or k + 1 == sc.steps:
                    rows.append(self.row((k + 1) * dt, (k + 1) * dt, y, H0, columns))
            except (TaskSingularityError, BasisAlignmentError, FloatingPointError, InvalidArgumentError,
                    np.linalg.LinAlgError) as exc:
                # non-finite Runge-Kutta stages surface as InvalidArgumentError from the model
                status = "singularity" if isinstance(exc, TaskSingularityError) else "abort"
                error = f"t={t:.6g}: {exc}"
                log.warning("integration of %s aborted: %s", sc.name, error)
                marker = [math.nan] * (len(columns) - 1) + [f"abort:{type(exc).__name__}"]
                marker[0] = t
                rows.append(marker)
                break
        return Trace(columns=columns, rows=rows, status=status, error=error, recharts=self.recharts)


def integrate(scenario: Scenario) -> Trace:
    """Integrate a scenario with fixed-step classic RK4 and return its trace."""
    return Simulation(scenario).run()


def energy_drift(trace, closed_loop=None):
    """Max |H(t) - H(0) - injected + dissipated| over the trace, and H(0)."""
    closed = closed_loop if closed_loop is not None else not np.all(np.isnan(trace.column("Hbarbar")))
    H = trace.column("Hbarbar" if closed else "Hbar")
    account = H - H[0] - trace.column("injected_energy") + trace.column("dissipated_energy")
    return float(np.abs(account).max()), float(H[0])


# --- pulse grid experiment ---------------------------------------------------------

SUMMARY_COLUMNS = [
    "run", "q_star_index", "stiffness", "peak_err", "settling_time", "final_err", "injected_energy",
    "dissipated_energy", "energy_account_rel", "max_Hbarbar_increase_after_pulse",
    "max_K_t", "max_K_nu", "status",
]


@dataclass(frozen=True)
class PulseExperiment:
    """2 x 2 grid: two ``q_star`` for one task target, soft and stiff shaping."""

    model: object
    task: object
    q_stars: tuple
    stiffnesses: tuple = (7.0, 30.0)
    force: tuple | None = None
    force_magnitude: float = 10.0
    pulse_start: float = 0.1
    pulse_duration: float = 0.15
    duration: float = 3.0
    dt: float = 1e-3
    log_every: float = 0.01
    D_t: float = 9.0
    D_nu: float = 6.0
    routing: str = "simulation"
    backend: str = "transformed"
    derivatives: object = None
    workers: int = 1

    def pulse_force(self):
        if self.force is not None:
            return tuple(float(f) for f in self.force)
        F = [0.0] * self.task.m
        F[0] = self.force_magnitude
        return tuple(F)

    def scenarios(self):
        out = []
        for i, q_star in enumerate(self.q_stars):
            for w in self.stiffnesses:
                params = IdaPbcParams.preset(q_star, self.task.m, stiffness=w, routing=self.routing,
                                             D_t=self.D_t, D_nu=self.D_nu)
                out.append(Scenario(
                    model=self.model, task=self.task, q0=np.asarray(q_star, dtype=float),
                    qdot0=np.zeros(self.model.n), dt=self.dt, duration=self.duration,
                    log_every=self.log_every, controller=params,
                    forces=[ForcePulse(self.pulse_start, self.pulse_duration, self.pulse_force())],
                    backend=self.backend, derivatives=self.derivatives,
                    name=f"qstar{i}_W{w:g}",
                ))
        return out


def summarize(name, index, stiffness, trace, pulse_end, pulse_start):
    t = trace.column("t")
    err = trace.column("err_norm")
    Hbb = trace.column("Hbarbar")
    drift, _ = energy_drift(trace, closed_loop=True)
    injected = trace.column("injected_energy")[-1]
    dissipated = trace.column("dissipated_energy")[-1]
    peak = float(err.max())
    above = np.nonzero(err > 0.05 * peak)[0]
    settling = float(t[above[-1]] - pulse_start) if above.size and above[-1] + 1 < t.size else math.nan
    after = t >= pulse_end - 1e-12
    increase = float(np.max(np.diff(Hbb[after]), initial=-np.inf))
    scale = max(abs(injected), abs(dissipated), 1e-300)
    return [name, index, stiffness, peak, settling, float(err[-1]), injected, dissipated, drift / scale,
            increase, float(trace.column("K_t").max()), float(trace.column("K_nu").max()), trace.status]


def _run(scenario):
    return integrate(scenario)


def run_pulse_experiment(exp: PulseExperiment):
    """Run the grid; returns (scenarios, traces, summary rows)."""
    scenarios = exp.scenarios()
    if exp.workers > 1:
        with ProcessPoolExecutor(max_workers=exp.workers) as pool:
            traces = list(pool.map(_run, scenarios))
    else:
        traces = [integrate(s) for s in scenarios]
    summary = []
    per_q = len(exp.stiffnesses)
    for k, (sc, tr) in enumerate(zip(scenarios, traces)):
        summary.append(summarize(sc.name, k // per_q, exp.stiffnesses[k % per_q], tr,
                                 exp.pulse_start + exp.pulse_duration, exp.pulse_start))
    return scenarios, traces, summary


def write_summary(path, summary):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for row in summary:
            w.writerow([v if isinstance(v, str) else f"{v:.17g}" for v in row])


def with_dt(scenario: Scenario, dt, log_every=None):
    return replace(scenario, dt=dt, log_every=log_every if log_every is not None else scenario.log_every)
