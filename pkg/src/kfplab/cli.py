"""Command line front end: ``kfplab COMMAND --config PATH [--out DIR] [--seed N] [--grid NXxNV]``.

Commands: solve, viscosity, verify, perron, oracle, crosscheck, report.
Exit codes: 0 every executed check passed, 1 a check failed, 2 configuration
error, 3 solver or other module failure.  Every run writes ``manifest.json``
(config hash, package versions, seeds) next to its outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from dataclasses import dataclass, field
from importlib import metadata, resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .checks import (
    Verdict,
    audit_energy,
    audit_green,
    check_comparison,
    check_eps_max_principle,
    check_weak_max_principle,
    estimate_poincare_constant,
)
from .coefficients import CoefficientField
from .errors import ConfigError, KFPError
from .fdm import TraceFunction, write_field_csv
from .geometry import ProductDomain
from .krylov import SolverSettings, solve_sparse
from .presets import PRESETS, preset
from .viscosity import ProblemSpec, run_viscosity_sequence, solve_direct, solve_regularized

COMMANDS = ("solve", "viscosity", "verify", "perron", "oracle", "crosscheck", "report")
EXIT_PASS, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
DEFAULT_PROBES = [[0.5, 0.25], [0.25, -0.5], [0.75, 0.5], [0.5, -0.25], [0.3, 0.6]]


def load_schema() -> dict:
    text = resources.files("kfplab").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


def _key_path(error: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in error.absolute_path) or "<root>"


def validate_config(cfg) -> None:
    """Check ``cfg`` against the shipped schema.

    Raises
    ------
    ConfigError
        Naming the offending key (``missing key: domain`` for an absent domain).
    """
    if not isinstance(cfg, dict):
        raise ConfigError("configuration must be a JSON object")
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (len(e.absolute_path), e.validator != "required"))
    if errors:
        err = errors[0]
        if err.validator == "required":
            missing = [k for k in err.validator_value if k not in err.instance]
            prefix = _key_path(err)
            name = missing[0] if prefix == "<root>" else f"{prefix}.{missing[0]}"
            raise ConfigError(f"missing key: {name}")
        if err.validator == "additionalProperties":
            raise ConfigError(f"unknown key at {_key_path(err)}: {err.message}")
        raise ConfigError(f"invalid value for key {_key_path(err)}: {err.message}")
    if "preset" in cfg and "coefficients" in cfg:
        raise ConfigError("invalid value for key preset: give either preset or coefficients, not both")
    if "preset" not in cfg and "coefficients" not in cfg:
        raise ConfigError("missing key: preset (or coefficients)")
    if "preset" in cfg and cfg["preset"] not in PRESETS:
        raise ConfigError(f"invalid value for key preset: unknown preset {cfg['preset']!r}")


def parse_grid(text: str) -> tuple[int, int]:
    try:
        nx, nv = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"invalid value for key grid: expected NXxNV, got {text!r}") from None
    if nx < 4 or nv < 4:
        raise ConfigError("invalid value for key grid: both counts must be at least 4")
    return nx, nv


def _intervals(spec) -> tuple:
    if len(spec) == 2 and all(isinstance(t, (int, float)) for t in spec):
        return (tuple(spec),)
    return tuple(tuple(t) for t in spec)


@dataclass
class RunConfig:
    """Validated configuration with command-line overrides applied."""

    raw: dict
    domain: ProductDomain
    coeffs: CoefficientField
    nx: int = 64
    nv: int = 64
    eps: float = 0.0
    solver: SolverSettings = field(default_factory=lambda: SolverSettings("direct"))
    viscosity: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    perron: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)
    out: Path = Path("out")
    seed: int = 0

    @classmethod
    def from_dict(cls, cfg: dict, out=None, seed=None, grid=None) -> "RunConfig":
        validate_config(cfg)
        try:
            domain = ProductDomain(_intervals(cfg["domain"]["x"]), _intervals(cfg["domain"]["v"]))
        except (ValueError, KFPError) as exc:
            raise ConfigError(f"invalid value for key domain: {exc}") from None
        if "preset" in cfg:
            coeffs = preset(cfg["preset"])
        else:
            kw = dict(cfg["coefficients"])
            kw.setdefault("n", domain.n)
            try:
                coeffs = CoefficientField.from_expressions(name="config", **kw)
            except (ValueError, KFPError) as exc:
                raise ConfigError(f"invalid value for key coefficients: {exc}") from None
        if coeffs.n != domain.n:
            raise ConfigError("invalid value for key coefficients.n: does not match the domain dimension")
        nx, nv = cfg.get("grid", {}).get("nx", 64), cfg.get("grid", {}).get("nv", 64)
        if grid is not None:
            nx, nv = parse_grid(grid) if isinstance(grid, str) else grid
        solver_kw = dict(cfg.get("solver", {}))
        solver_kw.setdefault("method", "direct")
        try:
            settings = SolverSettings(**solver_kw)
        except ValueError as exc:
            raise ConfigError(f"invalid value for key solver: {exc}") from None
        oracle = dict(cfg.get("oracle", {}))
        verify = dict(cfg.get("verify", {}))
        base_seed = int(oracle.get("seed", verify.get("seed", 0)))
        if seed is not None:
            base_seed = int(seed)
        oracle["seed"] = base_seed
        verify["seed"] = base_seed
        return cls(
            raw=cfg,
            domain=domain,
            coeffs=coeffs,
            nx=int(nx),
            nv=int(nv),
            eps=float(cfg.get("eps", 0.0)),
            solver=settings,
            viscosity=dict(cfg.get("viscosity", {})),
            oracle=oracle,
            perron=dict(cfg.get("perron", {})),
            verify=verify,
            out=Path(out if out is not None else cfg.get("output", "out")),
            seed=base_seed,
        )

    def problem(self) -> ProblemSpec:
        return ProblemSpec(self.domain, self.coeffs, self.nx, self.nv, self.solver)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


def write_manifest(rc: RunConfig, command: str, argv: list | None) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv or []),
        "config_hash": rc.config_hash(),
        "config": rc.raw,
        "grid": [rc.nx, rc.nv],
        "seeds": {"oracle": rc.oracle.get("seed"), "verify": rc.verify.get("seed")},
        "versions": {
            "kfplab": __version__,
            "python": platform.python_version(),
            **{name: metadata.version(name) for name in ("numpy", "scipy", "numba", "llvmlite", "jsonschema")},
        },
    }
    path = rc.out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    return str(o)


def write_trace_csv(path: Path, trace: TraceFunction) -> None:
    g = trace.grid
    (xlo, xhi), = g.domain.x_intervals
    rows = np.concatenate(
        [np.column_stack([np.full(g.nv, xlo), g.v, trace.left]), np.column_stack([np.full(g.nv, xhi), g.v, trace.right])]
    )
    np.savetxt(path, rows, delimiter=",", header="x,v,trace", comments="", fmt="%.17g")


# ---------------------------------------------------------------------------
# commands


def cmd_solve(rc: RunConfig) -> dict:
    spec = rc.problem()
    u, tr = solve_regularized(spec, rc.eps) if rc.eps > 0 else solve_direct(spec)
    write_field_csv(rc.out / "u.csv", u)
    write_trace_csv(rc.out / "trace.csv", tr)
    summary = {
        "eps": rc.eps,
        "grid": [rc.nx, rc.nv],
        "min": float(u.values.min()),
        "max": float(u.values.max()),
        "files": ["u.csv", "trace.csv"],
        "checks": [],
    }
    _write_json(rc.out / "solve.json", summary)
    return summary


def cmd_viscosity(rc: RunConfig) -> dict:
    spec = rc.problem()
    kw = rc.viscosity
    u, gamma, report = run_viscosity_sequence(
        spec, k_max=int(kw.get("k_max", 64)), stop_tol=kw.get("stop_tol"), cross_check=bool(kw.get("cross_check", True))
    )
    write_field_csv(rc.out / "u.csv", u)
    write_trace_csv(rc.out / "trace.csv", gamma)
    out = report.to_dict()
    checks = []
    if report.direct_check_passed is not None:
        checks.append(
            Verdict("viscosity_vs_direct", report.direct_distance, 10.0 * report.stop_tol, 0.0, {"stopped_at": report.stopped_at}).to_dict()
        )
    out["checks"] = checks
    _write_json(rc.out / "viscosity.json", out)
    return out


def _green_tests(grid, count: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(grid.shape) for _ in range(count)]


def cmd_verify(rc: RunConfig) -> dict:
    spec = rc.problem()
    grid = spec.grid
    op0 = spec.operator(0.0)
    u0, t0 = op0.split(solve_sparse(op0, rc.solver).x)
    verdicts = []
    f_zero = not np.any(op0.data.f)
    if f_zero:
        verdicts.append(check_weak_max_principle(u0, t0, op0.data))
    eps = float(rc.verify.get("eps", 1e-2))
    op_e = spec.operator(eps)
    u_e, t_e = op_e.split(solve_sparse(op_e, rc.solver).x)
    if f_zero:
        verdicts.append(check_eps_max_principle(op_e, u_e, t_e))
    high = ProblemSpec(rc.domain, rc.coeffs, rc.nx, rc.nv, rc.solver, data=op0.data.shifted(1.0))
    verdicts.append(check_comparison(spec, high))
    phis = _green_tests(grid, int(rc.verify.get("green_tests", 20)), int(rc.verify["seed"]))
    verdicts.append(audit_green(op0, u0, t0, phis))
    verdicts.append(audit_green(op_e, u_e, t_e, phis))
    c_p = estimate_poincare_constant(rc.domain, max(rc.nv, 8))
    if not (np.any(op0.data.g1_lo) or np.any(op0.data.g1_hi)):
        lam = float(spec.report.lambda_est)
        verdicts.append(audit_energy(op_e, u_e, t_e, lam, c_p))
    out = {"C_P": c_p, "eps": eps, "verdicts": [v.to_dict() for v in verdicts]}
    out["checks"] = out["verdicts"]
    _write_json(rc.out / "verify.json", out)
    for v in verdicts:
        print(v.line())
    return out


def _single_datum(coeffs: CoefficientField):
    s = coeffs.sources
    if "g1" in s and "g2" in s and s["g1"].text != s["g2"].text:
        raise ConfigError("invalid value for key coefficients: perron needs g1 and g2 to be the same datum g")
    return lambda x, v: coeffs.data_v(np.asarray(x)[None], np.asarray(v)[None])


def cmd_perron(rc: RunConfig) -> dict:
    from .perron import ball_mask, box_mask, perron_iterate, resolutivity_gap
    from .fdm import build_grid

    g = _single_datum(rc.coeffs)
    kind = rc.perron.get("mask", "box")
    if kind == "ball":
        mask = ball_mask(rc.nx, rc.nv, float(rc.perron.get("radius", 1.0)))
    else:
        mask = box_mask(build_grid(rc.domain, rc.nx, rc.nv))
    kw = dict(max_sweeps=int(rc.perron.get("max_sweeps", 5000)), tol=float(rc.perron.get("tol", 1e-7)))
    up = perron_iterate(mask, g, rc.coeffs, "upper", **kw)
    lo = perron_iterate(mask, g, rc.coeffs, "lower", **kw)
    write_field_csv(rc.out / "upper.csv", up.field)
    write_field_csv(rc.out / "lower.csv", lo.field)
    gap = resolutivity_gap(up, lo)
    low_side = float(np.nanmax(lo.field.values - up.field.values))
    checks = [
        Verdict("perron_ordering", low_side, 0.0, 1e-8).to_dict(),
        Verdict("perron_monotone_sweeps", float(up.monotone_violations + lo.monotone_violations), 0.0, 0.0).to_dict(),
    ]
    out = {
        "mask": kind,
        "boundary": up.mode,
        "gap": gap,
        "sweeps": {"upper": up.sweeps, "lower": lo.sweeps},
        "history": {"upper": up.history, "lower": lo.history},
        "checks": checks,
    }
    _write_json(rc.out / "perron.json", out)
    return out


def _path_config(rc: RunConfig):
    from .oracle import PathConfig

    o = rc.oracle
    try:
        return PathConfig(
            dt=float(o.get("dt", 1e-4)),
            n_paths=int(o.get("n_paths", 200_000)),
            max_steps=int(o.get("max_steps", 10_000_000)),
            seed=int(o["seed"]),
            batch=int(o.get("batch", 50_000)),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid value for key oracle: {exc}") from None


def cmd_oracle(rc: RunConfig) -> dict:
    from .oracle import estimate_solution

    cfg = _path_config(rc)
    probes = rc.oracle.get("probes", DEFAULT_PROBES[:1])
    estimates = [estimate_solution(p, (rc.coeffs, rc.domain), cfg).to_dict() for p in probes]
    out = {"oracle": {"estimates": estimates}, "checks": []}
    _write_json(rc.out / "oracle.json", out)
    return out


def cmd_crosscheck(rc: RunConfig) -> dict:
    from .oracle import estimate_solution

    cfg = _path_config(rc)
    u, _ = solve_direct(rc.problem())
    h = u.grid.h
    rows, checks = [], []
    for p in rc.oracle.get("probes", DEFAULT_PROBES):
        est = estimate_solution(p, (rc.coeffs, rc.domain), cfg)
        pde = float(u.at(p[0], p[1]))
        budget = 3.0 * est.stderr + 3.0 * h
        diff = abs(pde - est.mean)
        rows.append({"point": list(p), "pde": pde, "mc": est.mean, "stderr": est.stderr, "diff": diff, "budget": budget, "histogram": est.histogram})
        checks.append(Verdict("pde_vs_mc", diff, budget, 0.0, {"point": list(p)}).to_dict())
        print(f"{'PASS' if diff <= budget else 'FAIL'} {tuple(p)}: pde={pde:.6f} mc={est.mean:.6f} |diff|={diff:.2e} budget={budget:.2e}")
    out = {"h": h, "table": rows, "checks": checks}
    _write_json(rc.out / "crosscheck.json", out)
    return out


def cmd_report(rc: RunConfig) -> dict:
    merged = {}
    for name in ("solve", "viscosity", "verify", "perron", "oracle", "crosscheck"):
        path = rc.out / f"{name}.json"
        if path.exists():
            merged[name] = json.loads(path.read_text())
    checks = [c for part in merged.values() for c in part.get("checks", [])]
    out = {"sections": sorted(merged), "report": merged, "checks": checks}
    _write_json(rc.out / "report.json", out)
    return out


HANDLERS = {
    "solve": cmd_solve,
    "viscosity": cmd_viscosity,
    "verify": cmd_verify,
    "perron": cmd_perron,
    "oracle": cmd_oracle,
    "crosscheck": cmd_crosscheck,
    "report": cmd_report,
}


def run(command: str, config_path, out=None, seed=None, grid=None, argv=None) -> int:
    """Execute one command; returns the exit code."""
    try:
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
        try:
            cfg = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        rc = RunConfig.from_dict(cfg, out=out, seed=seed, grid=grid)
        rc.out.mkdir(parents=True, exist_ok=True)
        write_manifest(rc, command, argv)
        result = HANDLERS[command](rc)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KFPError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    failed = [c for c in result.get("checks", []) if not c.get("passed", False)]
    return EXIT_CHECK if failed else EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kfplab", description="Kinetic Fokker-Planck boundary value laboratory")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    p.add_argument("--grid", default=None, help="grid override, e.g. 64x64")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, out=args.out, seed=args.seed, grid=args.grid, argv=argv)


if __name__ == "__main__":
    sys.exit(main())
