"""Command line entry point: design, verify and condition checks.

Exit status is 0 on success/pass, 2 on a quantitative failure and 1 on
any error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import logging
import shutil
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conditions import check_conditions
from .config import DesignConfig, load_config, parse_config
from .cost import cost_matrix
from .errors import ConfigError, MetalensError
from .geometry import build_measure, read_grid_csv, write_grid_csv
from .optics import (
    MAX_LOSS,
    Design,
    GridVectorField,
    ScatteredVectorField,
    pushforward,
    sample_rays,
    trace_many,
    verify_energy,
)
from .phase import integrate_phase, recover_phase_single, recover_phases_double, regrid_nearest
from .transport import solve_exact, solve_sinkhorn

log = logging.getLogger("metalens_ot")

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2
MANIFEST = "manifest.txt"
EXTRA_SECTIONS = ("artifacts", "result")


def _fmt(v: float) -> str:
    return repr(float(v))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_samples(path: Path, points, grads) -> None:
    rows = "\n".join(",".join(_fmt(v) for v in row) for row in np.column_stack([points, grads]))
    path.write_text(f"# phase_samples surface=S2 count={len(points)}\n{rows}\n")


def _read_samples(path: Path):
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    return data[:, :2], data[:, 2:4]


def _localise_inputs(cfg: DesignConfig, out: Path) -> None:
    """Copy CSV inputs next to the design so the manifest is self-contained."""
    for section, spec in (("source", cfg.rho0), ("target", cfg.rho1), ("surface_f", cfg.f), ("surface_g", cfg.g)):
        if spec is None or spec.kind != "csv":
            continue
        name = f"input_{section}.csv"
        shutil.copyfile(spec.params["path"], out / name)
        spec.params["path"] = out / name
        cfg.echo[section]["path"] = name


@dataclass
class DesignResult:
    files: list[str]
    report: str


def solve_transport(cfg: DesignConfig, C, mu, nu):
    m, n = C.shape
    use_exact = cfg.method == "exact" or (cfg.method == "auto" and max(m, n) <= cfg.exact_cap)
    if use_exact:
        return "exact", solve_exact(C, mu.masses, nu.masses, cap=max(m, n))
    return "sinkhorn", solve_sinkhorn(C, mu.masses, nu.masses, epsilon=cfg.epsilon,
                                      max_iter=cfg.max_iter, marginal_tol=cfg.marginal_tol)


def build_design(cfg: DesignConfig, s1_grad, s2_points=None, s2_grad=None) -> Design:
    f, g = cfg.surfaces()
    s2 = ScatteredVectorField(s2_points, s2_grad) if cfg.mode == "double" else None
    return Design(cfg.mode, cfg.field, f, cfg.output_plane(), cfg.n1, cfg.n2,
                  GridVectorField(cfg.source, s1_grad), g=g if cfg.mode == "double" else None,
                  n3=cfg.n3, s2=s2, scale=cfg.source.diameter)


def run_design(cfg: DesignConfig, out: Path, dump_plan: bool = False) -> DesignResult:
    out.mkdir(parents=True, exist_ok=True)
    _localise_inputs(cfg, out)
    model = cfg.model()
    mu = build_measure(cfg.source, cfg.rho0.evaluate(cfg.source))
    nu = build_measure(cfg.target, cfg.rho1.evaluate(cfg.target))
    conditions = check_conditions(model, mu.points, nu.points, cfg.alpha, cfg.alpha1, cfg.alpha2)

    C = cost_matrix(model, mu.points, nu.points)
    solver, sol = solve_transport(cfg, C, mu, nu)
    log.info("%s transport: cost %.6g, diffuse fraction %.3f", solver, sol.total_cost, sol.diffuse_fraction)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if cfg.mode == "single":
            s1 = recover_phase_single(model, sol, targets="barycentric")
            s2 = None
        else:
            s1, s2 = recover_phases_double(model, sol, targets="barycentric")
        J = None if model.phi.is_identity else model.phi.jacobian(s1.sample_points)
        integrate_phase(s1, model.f, cfg.source, jacobian=J)
        if s2 is not None:
            integrate_phase(s2, model.g, cfg.target)

    files = []

    def emit(name):
        files.append(name)
        return out / name

    s1_grid_grad, _ = regrid_nearest(s1.sample_points, s1.grad2, cfg.source)
    write_grid_csv(emit("phase_s1.csv"), "phase", cfg.source, s1.scalar, "surface=S1")
    write_grid_csv(emit("phase_s1_grad.csv"), "phase_grad", cfg.source, s1_grid_grad, "surface=S1")
    if s2 is not None:
        s2_grid_grad, _ = regrid_nearest(s2.sample_points, s2.grad2, cfg.target)
        write_grid_csv(emit("phase_s2.csv"), "phase", cfg.target, s2.scalar, "surface=S2")
        write_grid_csv(emit("phase_s2_grad.csv"), "phase_grad", cfg.target, s2_grid_grad, "surface=S2")
        _write_samples(emit("phase_s2_samples.csv"), s2.points, s2.grad2)

    pot = ["# potentials", "side,index,x1,x2,value"]
    pot += [f"source,{i},{_fmt(p[0])},{_fmt(p[1])},{_fmt(v)}"
            for i, (p, v) in enumerate(zip(mu.points, sol.potential_psi))]
    pot += [f"target,{j},{_fmt(p[0])},{_fmt(p[1])},{_fmt(v)}"
            for j, (p, v) in enumerate(zip(nu.points, sol.potential_psi_c))]
    emit("potentials.csv").write_text("\n".join(pot) + "\n")
    if dump_plan:
        I, Jc = np.nonzero(sol.plan)
        lines = ["# plan", "i,j,mass"] + [f"{i},{j},{_fmt(sol.plan[i, j])}" for i, j in zip(I, Jc)]
        emit("plan.csv").write_text("\n".join(lines) + "\n")

    # round trip at nodes whose plan row is concentrated
    design = build_design(cfg, s1_grid_grad, *((s2.points, s2.grad2) if s2 is not None else ()))
    keep = ~sol.diffuse
    h = max(cfg.target.hx, cfg.target.hy)
    within = float("nan")
    exit_angle = float("nan")
    if np.any(keep):
        tr = trace_many(design, mu.points[keep])
        err = np.linalg.norm(tr.landing - sol.targets()[keep], axis=1)
        within = float(np.mean(np.where(tr.ok, err, np.inf) <= 2 * h))
        if cfg.mode == "double" and np.any(tr.ok):
            exit_angle = float(np.max(np.arccos(np.clip(tr.direction[tr.ok, 2], -1.0, 1.0))))

    result = {
        "solver": solver,
        "total_cost": _fmt(sol.total_cost),
        "duality_gap": _fmt(sol.duality_gap),
        "marginal_error": _fmt(sol.marginal_error),
        "diffuse_fraction": _fmt(sol.diffuse_fraction),
        "roundtrip_within_2h": _fmt(within),
        "curl_max_s1": _fmt(np.abs(s1.curl_residual).max()),
        "output_plane": _fmt(design.beta),
        "conditions": "pass" if conditions.passed else "inconclusive",
    }
    if s2 is not None:
        result["curl_max_s2"] = _fmt(np.abs(s2.curl_residual).max())
        result["regrid_distance_s2"] = _fmt(s2.regrid_distance)
        result["exit_angle_max"] = _fmt(exit_angle)

    report = "\n".join(f"{k} = {v}" for k, v in result.items()) + "\n\n" + conditions.format()
    emit("design_report.txt").write_text(report)

    artifacts = {name: _sha256(out / name) for name in files}
    for name in sorted(p.name for p in out.glob("input_*.csv")):
        artifacts[name] = _sha256(out / name)
    (out / MANIFEST).write_text(cfg.to_text({"result": result, "artifacts": artifacts}))
    return DesignResult(files + [MANIFEST], report)


def load_manifest(out: Path) -> tuple[DesignConfig, dict[str, str]]:
    path = out / MANIFEST
    try:
        text = path.read_text()
    except OSError:
        raise ConfigError(f"no design manifest at {path}") from None
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    if not parser.has_section("artifacts"):
        raise ConfigError(f"{path}: missing [artifacts] section")
    artifacts = dict(parser["artifacts"])
    for name, digest in artifacts.items():
        f = out / name
        if not f.is_file():
            raise ConfigError(f"{path}: artifact {name} is missing")
        if _sha256(f) != digest:
            raise ConfigError(f"{path}: artifact {name} does not match its recorded hash")
    return parse_config(text, out, ignore=EXTRA_SECTIONS), artifacts


@dataclass
class VerifyResult:
    passed: bool
    report: str


def run_verify(out: Path, seed: int | None = None) -> VerifyResult:
    cfg, _ = load_manifest(out)
    grid, s1_grad = read_grid_csv(out / "phase_s1_grad.csv", "phase_grad", columns=2)
    if grid != cfg.source:
        raise ConfigError("phase_s1_grad.csv grid differs from the manifest source grid")
    s2 = _read_samples(out / "phase_s2_samples.csv") if cfg.mode == "double" else ()
    design = build_design(cfg, s1_grad, *s2)
    mu = build_measure(cfg.source, cfg.rho0.evaluate(cfg.source))
    nu = build_measure(cfg.target, cfg.rho1.evaluate(cfg.target))
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    rays = sample_rays(mu, cfg.ray_count, rng)
    push = pushforward(design, rays, cfg.target, max_loss=1.0)
    lines = []
    if push.measure is None:
        passed = False
        lines.append(f"l1=1 linf_cell=nan lost_mass={push.lost_mass:.6g} rays={push.rays} verdict=FAIL")
    else:
        rep = verify_energy(push.measure, nu, cfg.l1_tol, push.lost_mass, push.rays)
        passed = rep.passed and push.lost_mass <= MAX_LOSS
        line = rep.format()
        if rep.passed and not passed:
            line = line.replace("verdict=PASS", "verdict=FAIL")
        lines.append(line)
    if cfg.mode == "double":
        tr = trace_many(design, rays.points)
        angle = np.arccos(np.clip(tr.direction[tr.ok, 2], -1.0, 1.0))
        lines.append(f"exit_angle_max={float(angle.max(initial=0.0)):.6g}")
    report = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(report)
    return VerifyResult(passed, report)


def run_check(cfg: DesignConfig):
    model = cfg.model()
    mu = build_measure(cfg.source, cfg.rho0.evaluate(cfg.source))
    nu = build_measure(cfg.target, cfg.rho1.evaluate(cfg.target))
    return check_conditions(model, mu.points, nu.points, cfg.alpha, cfg.alpha1, cfg.alpha2)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metalens-ot", description="Metalens phase design by optimal transport.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("design-single", "design-double"):
        s = sub.add_parser(name, help=f"{name.split('-')[1]}-metasurface design")
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--out", required=True, type=Path)
        s.add_argument("--seed", type=int, help="override [design] seed")
        s.add_argument("--dump-plan", action="store_true", help="also write plan.csv")
    v = sub.add_parser("verify", help="trace rays through a saved design")
    v.add_argument("--out", required=True, type=Path, help="design directory holding manifest.txt")
    v.add_argument("--seed", type=int, help="override the manifest seed")
    c = sub.add_parser("check-conditions", help="twist and C3 sufficient conditions")
    c.add_argument("--config", required=True, type=Path)
    c.add_argument("--out", type=Path, help="also write conditions.txt here")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command.startswith("design-"):
            cfg = load_config(args.config)
            mode = args.command.split("-")[1]
            if cfg.mode != mode:
                raise ConfigError(f"[design] field 'mode' is {cfg.mode!r} but the command is {args.command}")
            if args.seed is not None:
                cfg.seed = args.seed
                cfg.echo["design"]["seed"] = str(args.seed)
            res = run_design(cfg, args.out, args.dump_plan)
            sys.stdout.write(res.report)
            return EXIT_OK
        if args.command == "verify":
            res = run_verify(args.out, args.seed)
            sys.stdout.write(res.report)
            return EXIT_OK if res.passed else EXIT_FAIL
        report = run_check(load_config(args.config))
        text = report.format()
        if args.out is not None:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "conditions.txt").write_text(text)
        sys.stdout.write(text)
        return EXIT_OK if report.passed else EXIT_FAIL
    except MetalensError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
