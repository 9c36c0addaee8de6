"""Command-line entry point.

Exit codes: 0 ok, 2 config error, 3 numerical abort, 4 invariant failure.
Diagnostics go to stderr; stdout stays empty unless ``--verbose`` asks for progress.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    build_derivatives, build_experiment, build_model, build_params, build_scenario, build_task,
    load_scenario_config, plain, rank_tol,
)
from .control import IdaPbcController
from .errors import (
    AssignmentViolationError, ConfigError, InvalidArgumentError, ModelError, TaskPHError,
    TaskSingularityError, UnsupportedOperationError,
)
from .impedance import linearize, static_deflection, task_subspace_eigenvalues
from .ph import TaskSpacePH
from .sim import SUMMARY_COLUMNS, energy_drift, integrate, run_pulse_experiment, write_summary
from .verify import TOLERANCES, verify_structure

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4

log = logging.getLogger("taskph")


def _write_metadata(out, args, cfg, status, wall, extra=None):
    meta = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_path": str(args.config),
        "overrides": list(args.override or []),
        "config": plain(cfg) if cfg is not None else None,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_time_s": wall,
        "exit_code": status,
    }
    if extra:
        meta.update(extra)
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, default=float) + "\n")


def _progress(args, msg):
    if args.verbose:
        print(msg, flush=True)


def cmd_simulate(args, cfg, out):
    scenario = build_scenario(cfg, name=Path(args.config).stem)
    trace = integrate(scenario)
    trace.write_csv(out / "trace.csv")
    extra = {"status": trace.status, "error": trace.error, "recharts": trace.recharts,
             "rows": len(trace.rows)}
    if len(trace.rows) > 1 or trace.ok:
        drift, H0 = energy_drift(trace)
        extra.update(energy_account_error=drift, H0=H0)
        log.info("energy account error %.3e (H0 = %.6g)", drift, H0)
    _progress(args, f"simulate: {len(trace.rows)} rows -> {out / 'trace.csv'}")
    if not trace.ok:
        log.error("integration aborted: %s", trace.error)
        return EXIT_NUMERIC, extra
    return EXIT_OK, extra


def cmd_verify_structure(args, cfg, out):
    model = build_model(cfg)
    task = build_task(cfg, model)
    sec = cfg.get("verify", {})
    samples = args.samples if args.samples is not None else sec.get("samples", 500)
    seed = args.seed if args.seed is not None else sec.get("seed", 0)
    identity_n = args.debug_identity_n or sec.get("identity_n", False)
    system = TaskSpacePH(model, task, derivatives=build_derivatives(cfg), rank_tol=rank_tol(cfg),
                         identity_n=identity_n)
    sampling = {k: sec[k] for k in ("q_low", "q_high", "qdot_scale", "max_condition") if k in sec}
    report = verify_structure(system, samples, seed, sec.get("transformation_law", True), **sampling)
    with open(out / "residuals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(report.columns)
        for row in report.rows:
            w.writerow([row[0]] + [f"{v:.17g}" for v in row[1:]])
    maxima = report.max_residuals()
    lines = [f"{'invariant':<22}{'max residual':>14}{'tolerance':>12}  status"]
    for name, (tol, _) in TOLERANCES.items():
        value = maxima.get(name, float("nan"))
        lines.append(f"{name:<22}{value:>14.3e}{tol:>12.0e}  {'ok' if value <= tol else 'FAIL'}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        log.info(line)
    extra = {"samples": len(report.rows), "rejected": report.skipped, "seed": seed,
             "identity_n": identity_n, "max_residuals": maxima, "failures": report.failures}
    _progress(args, f"verify-structure: {len(report.rows)} states, {len(report.failures)} failing invariants")
    if len(report.rows) < samples:
        log.error("only %d of %d nonsingular states found", len(report.rows), samples)
        return EXIT_NUMERIC, extra
    if not report.ok:
        log.error("invariants out of tolerance: %s", ", ".join(sorted(report.failures)))
        return EXIT_INVARIANT, extra
    return EXIT_OK, extra


def cmd_pulse_experiment(args, cfg, out):
    exp = build_experiment(cfg, workers=args.workers)
    scenarios, traces, summary = run_pulse_experiment(exp)
    for sc, tr in zip(scenarios, traces):
        tr.write_csv(out / f"trace_{sc.name}.csv")
    write_summary(out / "summary.csv", summary)
    status = EXIT_OK
    if any(not tr.ok for tr in traces):
        log.error("at least one run aborted")
        status = EXIT_NUMERIC
    checks = experiment_checks(summary)
    for name, ok in checks.items():
        log.info("%-40s %s", name, "ok" if ok else "FAIL")
    if status == EXIT_OK and not all(checks.values()):
        status = EXIT_INVARIANT
    _progress(args, f"paper-experiment: {len(traces)} traces + summary in {out}")
    return status, {"checks": checks}


def experiment_checks(summary, drift_tol=1e-7, account_tol=1e-5):
    """Qualitative claims of the protocol evaluated on the summary rows."""
    col = {name: i for i, name in enumerate(SUMMARY_COLUMNS)}
    by_q = {}
    for row in summary:
        by_q.setdefault(row[col["q_star_index"]], []).append(row)
    checks = {}
    for k, rows in sorted(by_q.items()):
        rows = sorted(rows, key=lambda r: r[col["stiffness"]])
        checks[f"q*{k}: stiff peak < soft peak"] = rows[-1][col["peak_err"]] < rows[0][col["peak_err"]]
    increase = col["max_Hbarbar_increase_after_pulse"]
    checks["Hbarbar non-increasing after pulse"] = all(r[increase] <= drift_tol for r in summary)
    checks["energy account"] = all(r[col["energy_account_rel"]] <= account_tol for r in summary)
    return checks


def cmd_analyze_impedance(args, cfg, out):
    model = build_model(cfg)
    task = build_task(cfg, model)
    params = build_params(cfg, model, task)
    if params is None:
        raise ConfigError("analyze-impedance needs a controller section", field="controller")
    system = TaskSpacePH(model, task, derivatives=build_derivatives(cfg), rank_tol=rank_tol(cfg)).anchored(params.q_star)
    controller = IdaPbcController(params, system)
    lin = linearize(controller)
    eig = task_subspace_eigenvalues(controller)
    rows = []
    for name in ("Lambda_star", "D_t", "K_tilde", "static_stiffness", "hessian", "coupling"):
        M = np.atleast_2d(getattr(lin, name))
        rows += [[name, i, j, f"{M[i, j]:.17g}"] for i in range(M.shape[0]) for j in range(M.shape[1])]
    with open(out / "impedance.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "row", "col", "value"])
        w.writerows(rows)
    with open(out / "eigenvalues.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "real", "imag"])
        for kind, vals in (("companion", eig.companion), ("task_subspace", eig.task_subspace), ("full", eig.full)):
            w.writerows([[kind, f"{v.real:.17g}", f"{v.imag:.17g}"] for v in vals])
    report = [
        f"Lambda_t(q*) =\n{np.array2string(lin.Lambda_star, precision=6)}",
        f"D_t =\n{np.array2string(lin.D_t, precision=6)}",
        f"K_tilde =\n{np.array2string(lin.K_tilde, precision=6)}",
        f"exact small-force stiffness (J H^-1 J^T)^-1 =\n{np.array2string(lin.static_stiffness, precision=6)}",
        f"task/null coupling of the shaping Hessian: {np.abs(lin.coupling).max():.3e}",
        f"companion eigenvalues: {np.array2string(np.sort_complex(eig.companion), precision=6)}",
        f"full closed-loop eigenvalues: {np.array2string(np.sort_complex(eig.full), precision=6)}",
        f"companion vs task-subspace max rel. error: {eig.max_rel_error:.3e}",
    ]
    extra = {"eigen_rel_error": eig.max_rel_error}
    status = EXIT_OK if eig.max_rel_error <= 0.02 else EXIT_INVARIANT
    sec = cfg.get("impedance", {})
    if "static_force" in sec:
        sd = static_deflection(controller, sec["static_force"], sec.get("settle_time", 12.0))
        report.append(f"static deflection: dx = {sd.dx_simulated}, |K_tilde dx - F|/|F| = {sd.linear_error:.3e}, "
                      f"with exact stiffness {sd.schur_error:.3e}")
        extra.update(static_linear_error=sd.linear_error, static_schur_error=sd.schur_error)
        if sd.linear_error > 0.05:
            log.warning("K_tilde misses the static deflection by %.1f%%", 100 * sd.linear_error)
            status = EXIT_INVARIANT
    (out / "report.txt").write_text("\n\n".join(report) + "\n")
    for line in report:
        log.info(line)
    _progress(args, f"analyze-impedance: report in {out}")
    return status, extra


COMMANDS = {
    "simulate": cmd_simulate,
    "verify-structure": cmd_verify_structure,
    "paper-experiment": cmd_pulse_experiment,
    "analyze-impedance": cmd_analyze_impedance,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="taskph", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="scenario YAML file")
        p.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. integrator.dt=5e-4 (repeatable)")
        p.add_argument("--verbose", "-v", action="store_true")
        if name == "verify-structure":
            p.add_argument("--samples", type=int, default=None)
            p.add_argument("--seed", type=int, default=None)
            p.add_argument("--debug-identity-n", action="store_true",
                           help="negative control: replace N by Z (breaks block-diagonality)")
        if name == "paper-experiment":
            p.add_argument("--workers", type=int, default=None)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(args.out or Path("runs") / args.command)
    cfg = None
    start = time.perf_counter()
    extra = {}
    try:
        cfg = load_scenario_config(args.config, args.override)
        out.mkdir(parents=True, exist_ok=True)
        status, extra = COMMANDS[args.command](args, cfg, out)
    except (ConfigError, AssignmentViolationError, ModelError, InvalidArgumentError) as exc:
        log.error("config error: %s", exc)
        status = EXIT_CONFIG
    except (TaskSingularityError, UnsupportedOperationError, np.linalg.LinAlgError) as exc:
        log.error("numerical abort: %s", exc)
        status = EXIT_NUMERIC
    except TaskPHError as exc:
        log.error("%s", exc)
        status = EXIT_NUMERIC
    if out.is_dir():
        _write_metadata(out, args, cfg, status, time.perf_counter() - start, extra)
    return status


if __name__ == "__main__":
    sys.exit(main())
