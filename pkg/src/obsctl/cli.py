"""``obsctl``: run obstacle solves, control problems, convergence studies and
oracle checks from a JSON config, writing every artifact to one directory.

Exit codes: 0 fully certified, 2 solved with warnings, 1 error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import instances
from .control import (
    CERTIFICATE_TOL,
    DEFAULT_SCHEDULE,
    eval_Jinf,
    eval_Jp,
    minimize_Jinf,
    minimize_Jinf_1d_direct,
    minimize_Jp,
)
from .experiments import run_convergence_study
from .grid import (
    INF,
    BoundaryData,
    GridError,
    GridFunction,
    ObstacleInstance,
    make_grid,
    write_csv,
)
from .obstacle import (
    CertificateFailure,
    InfeasibleObstacle,
    NonConvergence,
    brute_force_obstacle,
    lcm_1d,
    solve_obstacle,
)
from .operators import normalized_p_residual, inf_laplacian_residual

log = logging.getLogger("obsctl")

COMMANDS = ("solve-obstacle", "optimal-control", "converge", "oracle-check")
EXIT_OK, EXIT_ERROR, EXIT_WARN = 0, 1, 2
COMPLEMENTARITY_TOL = 1e-6
ORACLE_TOL = 5e-4
ORACLE_JINF_TOL = 1e-2
RANDOM_OBSTACLES = 5


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


@dataclass
class RunConfig:
    command: str
    instance: ObstacleInstance
    instance_id: str
    p: float = 2.0
    p_schedule: tuple[float, ...] = DEFAULT_SCHEDULE
    tolerances: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: Path = Path("obsctl-out")
    echo: dict = field(default_factory=dict)


def _number(value, pointer: str, allow_inf: bool = False) -> float:
    if allow_inf and value in ("inf", "INF", "Infinity"):
        return INF
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(pointer, f"expected a number, got {value!r}")
    return float(value)


def _exponent(value, pointer: str) -> float:
    p = _number(value, pointer, allow_inf=True)
    if not p > 1.0:
        raise ConfigError(pointer, f"exponent must be > 1 or 'inf', got {value!r}")
    return p


def _nodal(value, grid, pointer: str, size: int, default=None) -> np.ndarray:
    if value is None:
        if default is None:
            raise ConfigError(pointer, "missing")
        value = default
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return np.full(size, float(value))
    if not isinstance(value, list):
        raise ConfigError(pointer, "expected a number or an array")
    arr = np.asarray(value, dtype=np.float64).ravel() if all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ) else None
    if arr is None:
        raise ConfigError(pointer, "array entries must be numbers")
    if arr.size != size:
        raise ConfigError(pointer, f"expected {size} values for this grid, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(pointer, "values must be finite")
    return arr


def _inline_instance(raw: dict) -> ObstacleInstance:
    g = raw.get("grid")
    if not isinstance(g, dict):
        raise ConfigError("/instance/grid", "expected an object with 'nodes' and 'extent'")
    nodes, extent = g.get("nodes"), g.get("extent")
    if not isinstance(nodes, list) or not nodes:
        raise ConfigError("/instance/grid/nodes", "expected a list of node counts")
    if not isinstance(extent, list) or len(extent) != len(nodes):
        raise ConfigError("/instance/grid/extent", "expected one extent per axis")
    try:
        grid = make_grid(len(nodes), nodes, extent)
    except (GridError, TypeError) as exc:
        raise ConfigError("/instance/grid", str(exc)) from None
    nb = int(grid.boundary_mask.sum())
    obstacle = _nodal(raw.get("obstacle"), grid, "/instance/obstacle", grid.n_nodes)
    boundary = _nodal(raw.get("boundary"), grid, "/instance/boundary", nb, default=0.0)
    profile = raw.get("profile")
    z = None if profile is None else GridFunction(grid, _nodal(profile, grid, "/instance/profile", grid.n_nodes))
    return ObstacleInstance(grid, GridFunction(grid, obstacle), BoundaryData(grid, boundary), z)


def _instance(raw) -> tuple[ObstacleInstance, str]:
    if isinstance(raw, dict) and "builtin" in raw:
        raw = raw["builtin"]
        pointer = "/instance/builtin"
    else:
        pointer = "/instance"
    if isinstance(raw, str):
        if raw not in instances.BUILTINS:
            raise ConfigError(pointer, f"unknown built-in {raw!r}; known: {', '.join(sorted(instances.BUILTINS))}")
        return instances.builtin(raw), raw
    if isinstance(raw, dict):
        return _inline_instance(raw), str(raw.get("id", "inline"))
    raise ConfigError("/instance", "expected a built-in name or an inline instance object")


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Validate a JSON config; ``overrides`` (command-line flags) win."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    raw = {**raw, **{k: v for k, v in (overrides or {}).items() if v is not None}}

    command = raw.get("command")
    if command not in COMMANDS:
        raise ConfigError("/command", f"expected one of {', '.join(COMMANDS)}, got {command!r}")
    if "instance" not in raw:
        raise ConfigError("/instance", "missing")
    inst, inst_id = _instance(raw["instance"])

    p = _exponent(raw.get("p", 2.0), "/p")
    schedule = raw.get("p_schedule", list(DEFAULT_SCHEDULE))
    if not isinstance(schedule, list) or not schedule:
        raise ConfigError("/p_schedule", "expected a nonempty list")
    sched = []
    for k, v in enumerate(schedule):
        q = _exponent(v, f"/p_schedule/{k}")
        if q == INF:
            raise ConfigError(f"/p_schedule/{k}", "schedule entries must be finite")
        if sched and q <= sched[-1]:
            raise ConfigError(f"/p_schedule/{k}", "schedule must be strictly increasing")
        sched.append(q)

    tolerances = raw.get("tolerances", {})
    if not isinstance(tolerances, dict):
        raise ConfigError("/tolerances", "expected an object")
    tols = {}
    for key, v in tolerances.items():
        if key not in ("obstacle", "certificate"):
            raise ConfigError(f"/tolerances/{key}", "unknown tolerance (use 'obstacle' or 'certificate')")
        t = _number(v, f"/tolerances/{key}")
        if not t > 0:
            raise ConfigError(f"/tolerances/{key}", f"tolerance must be positive, got {v!r}")
        tols[key] = t

    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("/seed", f"expected an integer, got {seed!r}")
    out = raw.get("output_dir", "obsctl-out")
    if not isinstance(out, str) or not out:
        raise ConfigError("/output_dir", "expected a path string")

    echo = {**raw, "p": "inf" if p == INF else p, "p_schedule": sched, "seed": seed,
            "tolerances": tols, "output_dir": out}
    return RunConfig(command, inst.with_p(p), inst_id, p, tuple(sched), tols, seed, Path(out), echo)


# -- commands ----------------------------------------------------------------

class _Artifacts:
    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []
        root.mkdir(parents=True, exist_ok=True)

    def csv(self, name: str, u: GridFunction):
        write_csv(u, self.root / name)
        self.files.append(name)

    def json(self, name: str, payload):
        with open(self.root / name, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        self.files.append(name)

    def other(self, name: str):
        self.files.append(name)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def _json_float(x: float):
    return "inf" if x == INF else x


def _obstacle_checks(inst: ObstacleInstance, state: GridFunction) -> dict:
    grid = inst.grid
    interior = grid.interior_indices
    u, psi = state.values, inst.obstacle.values
    if inst.p == INF:
        r = inf_laplacian_residual(state).values
    else:
        r = normalized_p_residual(state, inst.p).values
    comp = np.minimum(r[interior], u[interior] - psi[interior])
    return {
        "min_u_minus_psi": float(np.min(u - psi)),
        "boundary_exact": bool(np.array_equal(u[grid.boundary_mask], inst.boundary.values)),
        "max_complementarity": float(np.max(np.abs(comp))) if comp.size else 0.0,
    }


def _cmd_solve_obstacle(cfg: RunConfig, out: _Artifacts) -> int:
    inst = cfg.instance
    kwargs = {"tol": cfg.tolerances["obstacle"]} if "obstacle" in cfg.tolerances else {}
    out.csv("obstacle.csv", inst.obstacle)
    try:
        sol = solve_obstacle(inst, **kwargs)
    except NonConvergence as exc:
        if exc.solution is not None:
            out.csv("state.csv", exc.solution.state)
            out.json("state.json", {"p": _json_float(cfg.p), **exc.solution.report.to_json()})
        raise
    checks = _obstacle_checks(inst, sol.state)
    out.csv("state.csv", sol.state)
    out.json("state.json", {
        "p": _json_float(cfg.p),
        **sol.report.to_json(),
        "contact_nodes": int(sol.contact_set.sum()),
        "checks": checks,
    })
    ok = (checks["min_u_minus_psi"] >= -1e-10 and checks["boundary_exact"]
          and checks["max_complementarity"] <= COMPLEMENTARITY_TOL)
    return EXIT_OK if ok else EXIT_WARN


def _require_profile(inst: ObstacleInstance) -> GridFunction:
    if inst.profile is None:
        raise ValueError("this command needs an instance with a 'profile' (target z)")
    return inst.profile


def _cmd_optimal_control(cfg: RunConfig, out: _Artifacts) -> int:
    inst = cfg.instance
    z = _require_profile(inst)
    cert_tol = cfg.tolerances.get("certificate", CERTIFICATE_TOL)
    # the instance obstacle is the baseline control; infeasible data stops here
    if cfg.p == INF:
        baseline = eval_Jinf(inst.obstacle, z, inst.boundary)
    else:
        baseline = eval_Jp(inst.obstacle, z, cfg.p, inst.boundary)
    try:
        if cfg.p == INF:
            sol = minimize_Jinf(z, inst.boundary, cfg.p_schedule, certificate_tol=cert_tol)
        else:
            sol = minimize_Jp(z, inst.boundary, cfg.p, certificate_tol=cert_tol)
        error = None
    except CertificateFailure as exc:
        sol, error = exc.solution, exc
    out.csv("control.csv", sol.control)
    out.csv("state.csv", sol.state)
    payload = {**sol.to_json(), "report": sol.report.to_json(), "baseline_objective": baseline,
               "certificate_tol": cert_tol,
               "trace": [{"p": r.p, "objective": r.objective, "converged": r.converged} for r in sol.trace]}
    if cfg.p == INF and inst.grid.dimension == 1:
        payload["direct_objective"] = minimize_Jinf_1d_direct(z, inst.boundary).objective
    out.json("control.json", payload)
    if error is not None:
        raise error
    return EXIT_OK if sol.report.converged else EXIT_WARN


def _cmd_converge(cfg: RunConfig, out: _Artifacts) -> int:
    _require_profile(cfg.instance)
    cert_tol = cfg.tolerances.get("certificate", CERTIFICATE_TOL)
    stages: list = []
    table = run_convergence_study(cfg.instance, cfg.p_schedule, cfg.instance_id, cert_tol, stages)
    table.to_csv(out.root / "convergence.csv")
    out.other("convergence.csv")
    out.json("convergence.json", {**table.summary(), "warnings": table.warnings, "notes": table.notes})
    for sol in stages:
        out.csv(f"control_p{sol.p:g}.csv", sol.control)
    for w in table.warnings:
        log.warning(w)
    for n in table.notes:
        log.info(n)
    return EXIT_OK if table.all_certified and not table.warnings else EXIT_WARN


def _random_concave_breaking(grid, rng) -> GridFunction:
    x = grid.axes()[0]
    bumps = rng.uniform(-0.5, 1.0, 3)
    centers = rng.uniform(0.1, 0.9, 3)
    widths = rng.uniform(0.05, 0.3, 3)
    vals = np.max(bumps[:, None] * np.exp(-((x[None, :] - centers[:, None]) / widths[:, None]) ** 2), axis=0)
    vals[[0, -1]] = np.minimum(vals[[0, -1]], 0.0)
    return GridFunction(grid, vals)


def _cmd_oracle_check(cfg: RunConfig, out: _Artifacts) -> int:
    inst = cfg.instance
    grid = inst.grid
    checks = []

    def record(name, error, tol):
        checks.append({"check": name, "error": error, "tol": tol, "pass": bool(error <= tol)})

    if grid.dimension == 1:
        rng = np.random.default_rng(cfg.seed)
        cases = [("instance", inst.obstacle)] + [
            (f"random{k}", _random_concave_breaking(grid, rng)) for k in range(RANDOM_OBSTACLES)
        ]
        zero = BoundaryData.constant(grid, 0.0)
        for label, psi in cases:
            g = inst.boundary if label == "instance" else zero
            exact = lcm_1d(psi, g)
            for p in (2.0, 4.0, 8.0, INF):
                u = solve_obstacle(ObstacleInstance(grid, psi, g, None, p)).state
                record(f"{label} p={p:g} vs least concave majorant",
                       float(np.max(np.abs(u.values - exact.values))), ORACLE_TOL)
        if inst.profile is not None:
            a = minimize_Jinf(inst.profile, inst.boundary, cfg.p_schedule).objective
            b = minimize_Jinf_1d_direct(inst.profile, inst.boundary).objective
            record("J_inf continuation vs direct bisection", abs(a - b), ORACLE_JINF_TOL)
    if grid.n_nodes <= 64 and cfg.p != INF:
        u = solve_obstacle(inst).state
        ref = brute_force_obstacle(inst, seed=cfg.seed)
        record(f"p={cfg.p:g} vs brute force", float(np.max(np.abs(u.values - ref.values))), ORACLE_TOL)
    for p in (cfg.p,) if cfg.p in (2.0, INF) else (cfg.p, INF):
        state = solve_obstacle(inst.with_p(p)).state
        c = _obstacle_checks(inst.with_p(p), state)
        record(f"p={p:g} complementarity", c["max_complementarity"], COMPLEMENTARITY_TOL)
        record(f"p={p:g} feasibility", max(0.0, -c["min_u_minus_psi"]), 1e-10)
        again = solve_obstacle(inst.with_obstacle(state).with_p(p)).state
        record(f"p={p:g} idempotence", float(np.max(np.abs(again.values - state.values))), 2e-8)
    out.json("oracle.json", {"instance": cfg.instance_id, "checks": checks})
    failed = [c["check"] for c in checks if not c["pass"]]
    for name in failed:
        log.warning("oracle check failed: %s", name)
    return EXIT_OK if not failed else EXIT_WARN


HANDLERS = {
    "solve-obstacle": _cmd_solve_obstacle,
    "optimal-control": _cmd_optimal_control,
    "converge": _cmd_converge,
    "oracle-check": _cmd_oracle_check,
}


def run(config: RunConfig) -> int:
    """Execute one command; always leaves a manifest in the output directory."""
    out = _Artifacts(config.output_dir)
    message = ""
    try:
        code = HANDLERS[config.command](config, out)
    except InfeasibleObstacle as exc:
        code, message = EXIT_ERROR, f"InfeasibleObstacle: {exc}"
    except (NonConvergence, CertificateFailure, ValueError, OSError) as exc:
        code, message = EXIT_ERROR, f"{type(exc).__name__}: {exc}"
    if message:
        log.error(message)
    manifest = {
        "command": config.command,
        "config": config.echo,
        "exit_code": code,
        "message": message,
        "files": sorted(out.files),
    }
    with open(out.root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="obsctl", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--p", help="exponent (a number > 1 or 'inf'); overrides the config")
    ap.add_argument("--out", help="output directory; overrides the config")
    ap.add_argument("--seed", type=int, help="random seed; overrides the config")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    p = None
    if args.p is not None:
        try:
            p = float(args.p)
        except ValueError:
            print(f"obsctl: --p must be a number or 'inf', got {args.p!r}", file=sys.stderr)
            return EXIT_ERROR
        if not math.isfinite(p):
            p = "inf" if p > 0 else p
    try:
        text = Path(args.config).read_text(encoding="utf-8")
        cfg = parse_config(text, {"command": args.command, "p": p, "output_dir": args.out, "seed": args.seed})
    except (OSError, ConfigError) as exc:
        print(f"obsctl: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
