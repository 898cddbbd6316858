"""Command-line driver: offline basis construction, online runs, comparison, validation.

Exit codes: 0 success, 1 configuration error (including a missing basis),
2 solver failure, 3 validation failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .coupling import (Coupler, CouplingMode, CouplingSettings, MissingBasisError,
                       gradient_check)
from .linalg import SingularMatrixError
from .mesh import MeshError, generate_bfs_mesh, generate_rect_mesh
from .optim import LBFGSSettings
from .rom import (BasisFileError, ReducedModel, SnapshotSet, build_basis, lifting_fields,
                  load_basis, problem_fingerprint, sample_parameters, save_basis)
from .solvers import DDProblem, FlowProblem, Mu, NewtonError, NewtonSettings, StateSolution

log = logging.getLogger("ddcouple")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VALIDATION = 0, 1, 2, 3

METRIC_COLUMNS = ["mode", "step", "time", "iterations", "evaluations", "J", "grad_norm",
                  "err_u1", "err_u2", "err_p1", "err_p2"]
EXTRA_COLUMNS = ["J_objective", "J_initial", "J_zero", "status", "line_search_failures",
                 "newton_iterations", "max_divergence", "gradient", "wall_time"]
BASIS_FILE = "basis.bin"


class SolverFailure(RuntimeError):
    pass


# -- construction helpers --------------------------------------------------------------

def build_problem(cfg: RunConfig) -> DDProblem:
    return DDProblem(generate_bfs_mesh(cfg.h, cfg.x_interface))


def coupling_settings(cfg: RunConfig) -> CouplingSettings:
    return CouplingSettings(
        gradient=cfg.gradient,
        newton=NewtonSettings(atol=cfg.newton_atol, rtol=cfg.newton_rtol,
                              maxiter=cfg.newton_maxiter),
        lbfgs=LBFGSSettings(memory=cfg.memory, gtol=cfg.gtol, ftol=cfg.ftol, maxiter=cfg.maxiter,
                            c1=cfg.c1, c2=cfg.c2, max_linesearch=cfg.max_linesearch))


def load_coupler(cfg: RunConfig, out: Path, problem: DDProblem | None = None,
                 require: bool = False) -> Coupler:
    problem = problem or build_problem(cfg)
    path = out / BASIS_FILE
    if not path.exists():
        if require:
            raise MissingBasisError(f"no reduced basis at {path}; run "
                                    f"'ddcouple offline --out {out}' first")
        return Coupler(problem, settings=coupling_settings(cfg))
    basis, models = load_basis(path, expected_fingerprint=problem_fingerprint(problem))
    return Coupler(problem, basis, models, settings=coupling_settings(cfg))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# -- offline ----------------------------------------------------------------------------

_WORKER = {}


def _worker_init(cfg: RunConfig):
    _WORKER["coupler"] = Coupler(build_problem(cfg), settings=coupling_settings(cfg))


def _worker_run(args):
    k, mu, dt, n = args
    try:
        return k, _WORKER["coupler"].run_transient(CouplingMode.FFF, mu, dt, n), None
    except (NewtonError, SingularMatrixError, np.linalg.LinAlgError) as exc:
        return k, None, str(exc)


def run_offline(cfg: RunConfig, out: Path, workers: int = 1) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    coupler = Coupler(problem, settings=coupling_settings(cfg))
    training = sample_parameters(cfg.n_train, cfg.seed, cfg.parameter_box)
    lifts = lifting_fields(problem)
    jobs = [(k, mu, cfg.dt, cfg.n_steps) for k, mu in enumerate(training)]
    tic = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(cfg,)) as pool:
            results = list(pool.map(_worker_run, jobs))
    else:
        _WORKER["coupler"] = coupler
        results = [_worker_run(j) for j in jobs]
    dims = [problem.sub[0].nu_dofs, problem.sub[0].np_dofs, problem.sub[1].nu_dofs,
            problem.sub[1].np_dofs, problem.n_control]
    snaps = SnapshotSet.empty(dims)
    log_rows, failures = [], []
    for k, run, err in sorted(results, key=lambda r: r[0]):
        mu = training[k]
        if run is not None and run.error:
            err = run.error
        if err is not None:
            failures.append(k)
            log.warning("training parameter %d (U=%.4f, nu=%.4f) failed: %s", k, mu.U, mu.nu, err)
            log_rows.append([k, mu.U, mu.nu, 0, "failed", "", "", err])
            continue
        snaps.append_run(mu, run, lifts)
        its = [r.iterations for r in run.reports]
        log_rows.append([k, mu.U, mu.nu, len(run.reports), "ok", float(np.mean(its)),
                         max(r.J for r in run.reports), ""])
    with open(out / "offline_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "U", "nu", "steps", "status", "mean_iterations", "max_final_J",
                    "message"])
        for row in log_rows:
            w.writerow([fmt(v) for v in row])
    if len(failures) > cfg.max_fail_fraction * len(training):
        raise SolverFailure(f"{len(failures)} of {len(training)} training runs failed")
    meta = {"seed": cfg.seed, "training": [list(m) for m in training], "dt": cfg.dt,
            "n_steps": cfg.n_steps, "h": cfg.h, "x_interface": cfg.x_interface,
            "failed": failures}
    basis = build_basis(problem, snaps, cfg.mode_counts, lifts=lifts, meta=meta)
    models = tuple(ReducedModel.from_fem(fem, sb) for fem, sb in zip(problem.sub, basis.sub))
    save_basis(out / BASIS_FILE, basis, models)
    np.savez(out / "snapshots.npz", u1=snaps.u1, p1=snaps.p1, u2=snaps.u2, p2=snaps.p2,
             g=snaps.g, J=snaps.J, time=snaps.times, index=np.array(snaps.index),
             mus=np.array([list(m) for m in snaps.mus]))
    files = [BASIS_FILE, BASIS_FILE + ".json", "offline_log.csv"]
    manifest = {"fingerprint": basis.fingerprint, "mode_counts": basis.mode_counts(),
                "seed": cfg.seed, "training": meta["training"], "failed": failures,
                "snapshots": snaps.n_columns,
                "files": {f: sha256_file(out / f) for f in files}}
    (out / "offline_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("offline stage finished in %.1f s", time.perf_counter() - tic)
    return manifest


# -- online and compare -------------------------------------------------------------------

def monolithic_reference(problem: DDProblem, mu: Mu, dt: float, n_steps: int,
                         settings: NewtonSettings) -> list:
    states = []
    u = np.zeros(problem.mono.nu_dofs)
    for n in range(1, n_steps + 1):
        st = problem.monolithic_step(u, mu, dt, t=n * dt, settings=settings)
        states.append(st)
        u = st.u
    return states


def metrics_rows(problem: DDProblem, result, mono: list) -> list[dict]:
    rows = []
    arch = result.archive
    for k, rep in enumerate(result.reports):
        err = problem.relative_errors(mono[k], arch["u1"][k], arch["p1"][k],
                                      arch["u2"][k], arch["p2"][k])
        rows.append({
            "mode": result.mode.value, "step": rep.step, "time": rep.time,
            "iterations": rep.iterations, "evaluations": rep.evaluations,
            "J": rep.J_interface, "grad_norm": rep.grad_norm,
            "err_u1": err["u1"], "err_u2": err["u2"], "err_p1": err["p1"], "err_p2": err["p2"],
            "J_objective": rep.J, "J_initial": rep.J_initial, "J_zero": rep.J_zero_interface,
            "status": rep.status, "line_search_failures": rep.line_search_failures,
            "newton_iterations": rep.newton_iterations, "max_divergence": rep.max_divergence,
            "gradient": result.gradient, "wall_time": rep.wall_time,
        })
    return rows


def write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS + EXTRA_COLUMNS)
        for r in rows:
            w.writerow([fmt(r[c]) for c in METRIC_COLUMNS + EXTRA_COLUMNS])


def write_trace(path: Path, results: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "step", "iteration", "J"])
        for res in results:
            for rep in res.reports:
                for it, J in enumerate(rep.trace):
                    w.writerow([res.mode.value, rep.step, it, fmt(J)])


def _archive(path: Path, results: list, mono: list) -> None:
    data = {"mono_u": np.array([s.u for s in mono]), "mono_p": np.array([s.p for s in mono])}
    for res in results:
        for k, v in res.archive.items():
            data[f"{res.mode.value}_{k}"] = v
    np.savez(path, **data)


def run_modes(cfg: RunConfig, out: Path, modes: list, stem: str):
    """Monolithic reference plus the requested couplings; writes CSV, trace and archive."""
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    need = any(CouplingMode(m).needs_basis for m in modes)
    coupler = load_coupler(cfg, out, problem, require=need)
    mu = Mu(cfg.test_U, cfg.test_nu)
    mono = monolithic_reference(problem, mu, cfg.dt, cfg.n_steps, coupler.settings.newton)
    rows, results, errors = [], [], []
    for mode in modes:
        tic = time.perf_counter()
        res = coupler.run_transient(mode, mu, cfg.dt, cfg.n_steps)
        log.info("%s: %d steps in %.1f s", mode, len(res.reports), time.perf_counter() - tic)
        results.append(res)
        rows += metrics_rows(problem, res, mono)
        if res.error:
            errors.append(f"{mode}: {res.error}")
    write_metrics(out / f"{stem}.csv", rows)
    write_trace(out / f"{stem}_trace.csv", results)
    _archive(out / f"{stem}.npz", results, mono)
    return rows, results, errors


def run_online(cfg: RunConfig, out: Path, mode: str):
    return run_modes(cfg, out, [mode], f"online_{mode}")


def run_compare(cfg: RunConfig, out: Path):
    from .plotting import plot_metrics

    rows, results, errors = run_modes(cfg, out, [m.value for m in CouplingMode], "compare")
    plot_metrics(out / "compare.csv", out)
    return rows, results, errors


# -- validate -----------------------------------------------------------------------------

def poiseuille_check(h: float = 0.25, lx: float = 4.0, ly: float = 1.0, U: float = 1.0,
                     nu: float = 1.0) -> float:
    """Max nodal error of the steady channel solution against the exact parabola."""
    fem = FlowProblem(generate_rect_mesh(lx, ly, h))
    st = fem.solve_state(Mu(U, nu), None, np.zeros(fem.nu_dofs))
    y = fem.dofmap.node_coords[:, 1]
    exact = np.zeros(fem.nu_dofs)
    exact[0::2] = 4.0 * U * y * (ly - y) / ly ** 2
    return float(np.abs(st.u - exact).max())


def run_validate(cfg: RunConfig, out: Path, n_checks: int = 3) -> list:
    checks = []
    err = poiseuille_check()
    checks.append(("poiseuille max nodal error", err, err <= 1e-8))
    problem = build_problem(cfg)
    coupler = load_coupler(cfg, out, problem)
    modes = [CouplingMode.FFF] + ([m for m in CouplingMode if m.needs_basis]
                                  if coupler.basis is not None else [])
    if coupler.basis is None:
        log.warning("no basis in %s: only FFF gradients are checked", out)
    rng = np.random.default_rng(cfg.seed)
    mu = Mu(cfg.test_U, cfg.test_nu)
    for mode in modes:
        res = coupler.run_transient(mode, mu, cfg.dt, n_checks)
        prev = coupler.initial_states(mode)
        for k in range(len(res.reports)):
            z = res.archive["z"][k]
            g = z + 0.02 * max(np.sqrt(np.mean(z ** 2)), 1e-3) * rng.standard_normal(z.shape)
            d = rng.standard_normal(z.shape)
            t = (k + 1) * cfg.dt
            chk = gradient_check(coupler, mode, g, d, mu, prev, cfg.dt, t, step=k + 1)
            checks.append((f"{mode.value} step {k + 1} gradient rel. error", chk.rel_error,
                           chk.rel_error <= 1e-5))
            st = coupler.evaluate_objective(mode, z, mu, prev, cfg.dt, t, gradient=False).states
            prev = tuple(s.u if isinstance(s, StateSolution) else s for s in st)
    if coupler.basis is not None:
        for i, (fem, sb) in enumerate(zip(problem.sub, coupler.basis.sub), start=1):
            gram = sb.Z.T @ (fem.ops.X @ sb.Z)
            e = float(np.abs(gram - np.eye(gram.shape[0])).max())
            checks.append((f"velocity basis {i} orthonormality", e, e <= 1e-10))
    return checks


# -- entry point ----------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddcouple", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["offline", "online", "compare", "validate"])
    p.add_argument("--config", help="config file, or a preset name (desk, paper)")
    p.add_argument("--mode", choices=[m.value for m in CouplingMode])
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="seed for training-set sampling")
    p.add_argument("--workers", type=int, help="parallel offline runs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.workers is not None:
            changes["workers"] = args.workers
        if args.mode is not None:
            changes["mode"] = args.mode
        if args.out is not None:
            changes["out"] = args.out
        cfg = cfg.replace(**changes)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    try:
        if args.command == "offline":
            manifest = run_offline(cfg, out, cfg.workers)
            print(f"basis written to {out / BASIS_FILE} "
                  f"({manifest['snapshots']} snapshots, modes {manifest['mode_counts']})")
            if manifest["failed"]:
                print(f"{len(manifest['failed'])} training runs failed and were skipped",
                      file=sys.stderr)
            return EXIT_OK
        if args.command in ("online", "compare"):
            if args.command == "online":
                rows, _, errors = run_online(cfg, out, cfg.mode)
                print(f"metrics written to {out / f'online_{cfg.mode}.csv'} ({len(rows)} rows)")
            else:
                rows, _, errors = run_compare(cfg, out)
                print(f"comparison written to {out / 'compare.csv'} ({len(rows)} rows)")
            for e in errors:
                print(f"solver failure: {e}", file=sys.stderr)
            return EXIT_SOLVER if errors else EXIT_OK
        checks = run_validate(cfg, out)
        for name, value, ok in checks:
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {value:.3e}")
        return EXIT_OK if all(ok for _, _, ok in checks) else EXIT_VALIDATION
    except (ConfigError, MissingBasisError, BasisFileError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverFailure, NewtonError, SingularMatrixError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
