"""Command-line front end.

Subcommands: ``solve`` (march a configuration and persist the snapshot),
``regions`` (classify a level and export CSV, gnuplot script, and SVG),
``terminal-check`` (compare the solved value with the near-maturity
expansion along a time ladder), ``verify-mc`` (cross-check one state
against a Monte Carlo strategy valuation), ``converge`` (resolution or
penalty ladder report), ``presets`` (list the shipped experiment configs).

Exit codes: 0 success, 1 invalid configuration or arguments, 2 solver
failure, 3 a check requested with ``--check`` failed.  The default output
directory comes from ``QVIPORT_OUTDIR`` (falling back to the working
directory).  All artifacts are deterministic: re-running a command with
identical inputs reproduces every file byte for byte.
"""

from __future__ import annotations

import argparse
import concurrent.futures as _futures
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from .analytic import AsymptoteQuery, RiccatiExplosionError, terminal_asymptote
from .config import ConfigError, PRESETS, RunConfig, preset, preset_names
from .grid import TransformedGrid
from .market import Position
from .mc import McEstimate, StrategySpec, simulate_strategy
from .operators import AssemblyError, assemble_level
from .problem import BoundaryKind
from .regions import classify_regions, export_fields, write_plot_script
from .snapshot import SnapshotError, load_solution, save_solution
from .solver import NewtonError, SolverParams, StudyRow, m_matrix_check, solve_qvi
from .utility import UtilityValidationError

__all__ = ["main"]


class CheckFailure(RuntimeError):
    """A --check assertion did not hold."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _outdir(args) -> str:
    out = args.outdir or os.environ.get("QVIPORT_OUTDIR") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _load_config(args) -> RunConfig:
    if getattr(args, "preset", None) and getattr(args, "config", None):
        raise ConfigError("pass either --preset or --config, not both")
    if getattr(args, "preset", None):
        return preset(args.preset)
    if getattr(args, "config", None):
        return RunConfig.from_yaml(args.config)
    raise ConfigError("one of --preset or --config is required")


def _solve_from_config(cfg: RunConfig, extra_taus=()):
    problem = cfg.to_problem()
    grid = cfg.to_grid()
    params = cfg.to_solver_params()
    if extra_taus:
        taus = sorted(set(params.store_taus) | {float(t) for t in extra_taus})
        params = replace(params, store_taus=tuple(taus))
    return problem, grid, params, solve_qvi(problem, grid, params)


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _float_list(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated float list, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_solve(args) -> int:
    cfg = _load_config(args)
    problem, grid, params, sol = _solve_from_config(cfg)
    out = _outdir(args)
    snap = os.path.join(out, f"{cfg.experiment}.qvz")
    save_solution(sol, snap)
    _write_json(
        os.path.join(out, f"{cfg.experiment}.config.json"),
        {"config": json.loads(cfg.canonical_json()), "sha256": cfg.content_hash()},
    )
    d = sol.diagnostics
    print(
        f"{cfg.experiment}: solved {grid.nz}x{grid.nv}x{grid.nn} over "
        f"{grid.tau_levels.size} levels in {d.wall_time:.2f}s "
        f"(max newton iters {max(d.newton_iters) if d.newton_iters else 0}, "
        f"damping events {d.damping_count})"
    )
    print(f"wrote {snap}")
    if args.check:
        sysm = assemble_level(problem, grid, sol.final_tau, grid.dt, damping=params.damping)
        report = m_matrix_check(sysm)
        if not report.passed:
            raise CheckFailure(
                f"matrix class audit failed: {report.n_positive_offdiag} positive "
                f"off-diagonal entries, {report.n_dominance_fail} dominance failures"
            )
        res = sol.residuals(sol.final_tau)
        tol = sol.resolved_qvi_tol()
        triple = np.minimum(
            np.where(res["interior"], res["pde"], np.inf),
            np.minimum(
                np.where(res["sell_applicable"], res["sell"], np.inf),
                np.where(res["buy_applicable"], res["buy"], np.inf),
            ),
        )
        triple = triple[np.isfinite(triple)]
        worst = float(np.abs(triple).max()) if triple.size else 0.0
        if worst > tol:
            raise CheckFailure(
                f"complementarity violated: min-residual magnitude {worst:.3e} "
                f"exceeds tolerance {tol:.3e}"
            )
        print(f"checks passed (matrix class ok, complementarity within {tol:.2e})")
    return 0


def _cmd_regions(args) -> int:
    cfg = _load_config(args)
    if args.snapshot:
        sol = load_solution(args.snapshot)
    else:
        _, _, _, sol = _solve_from_config(cfg, extra_taus=[args.tau] if args.tau else ())
    tau = args.tau if args.tau is not None else sol.final_tau
    rmap = classify_regions(sol, tau=tau, tol=args.tol)
    out = _outdir(args)
    csv_path = os.path.join(out, f"{cfg.experiment}-regions.csv")
    export_fields(
        rmap,
        csv_path,
        metadata={"experiment": cfg.experiment, "config_sha256": cfg.content_hash()},
    )
    script = write_plot_script(csv_path, title=f"{cfg.experiment} action regions")
    from .plots import render_region_map

    nu_index = 0
    if rmap.is_3d and args.nu is not None:
        nu_index = int(np.argmin(np.abs(rmap.nu_nodes - args.nu)))
    svg = render_region_map(
        rmap,
        os.path.join(out, f"{cfg.experiment}-regions.svg"),
        nu_index=nu_index,
        title=f"{cfg.experiment} (T-t={rmap.tau:g})",
    )
    frac = rmap.fractions(nu_index)
    print(
        f"{cfg.experiment}: tau={rmap.tau:g} fractions "
        + " ".join(f"{k}={v:.4f}" for k, v in sorted(frac.items()))
    )
    for path in (csv_path, csv_path + ".meta.json", script, svg):
        print(f"wrote {path}")
    if args.check:
        res = sol.residuals(rmap.tau)
        triple = np.minimum(
            np.where(res["interior"], res["pde"], np.inf),
            np.minimum(
                np.where(res["sell_applicable"], res["sell"], np.inf),
                np.where(res["buy_applicable"], res["buy"], np.inf),
            ),
        )
        triple = triple[np.isfinite(triple)]
        worst = float(np.abs(triple).max()) if triple.size else 0.0
        if worst > rmap.tol:
            raise CheckFailure(
                f"complementarity violated at a node: {worst:.3e} > {rmap.tol:.3e}"
            )
        print(f"checks passed (complementarity within {rmap.tol:.2e})")
    return 0


def _terminal_rows(cfg, sol, y, taus, z_range, n_z, nu=None) -> list[dict]:
    problem = sol.problem
    costs = problem.costs
    zs = np.linspace(z_range[0], z_range[1], n_z)
    c = (1.0 - costs.theta1) if y >= 0 else (1.0 + costs.theta2)
    sigma_hat = problem.model.sigma
    rows = []
    for tau in taus:
        sq = math.sqrt(tau)
        w_vals = sol.interp_value(tau, zs, np.full_like(zs, y * sq), nu)
        for z, wv in zip(zs, np.atleast_1d(w_vals)):
            x = float(z - c * y)
            ref = terminal_asymptote(
                AsymptoteQuery(
                    t=problem.horizon - tau,
                    x=x,
                    y=y,
                    costs=costs,
                    sigma_hat=sigma_hat,
                    T=problem.horizon,
                    utility=problem.utility,
                )
            )
            rows.append(
                {
                    "tau": float(tau),
                    "z": float(z),
                    "y": float(y),
                    "W": float(wv),
                    "expansion": float(ref),
                    "difference": float(wv - ref),
                }
            )
    return rows


def _cmd_terminal_check(args) -> int:
    cfg = _load_config(args)
    block = cfg.terminal_check_block or {}
    y = args.y if args.y is not None else block.get("y")
    if y is None:
        raise ConfigError("terminal-check needs --y or a terminal_check block in the config")
    taus = _float_list(args.tau) if args.tau else list(block.get("taus", []))
    if not taus:
        raise ConfigError("terminal-check needs --tau or terminal_check.taus")
    z_range = block.get("z_range", [0.2, 0.8])
    n_z = args.n_z or block.get("n_z", 61)
    nu = args.nu if args.nu is not None else block.get("nu")

    _, _, _, sol = _solve_from_config(cfg, extra_taus=taus)
    if sol.problem.model.is_gmr and nu is None:
        raise ConfigError("terminal-check on the gmr model needs --nu")
    rows = _terminal_rows(cfg, sol, float(y), sorted(taus, reverse=True), z_range, int(n_z), nu)

    out = _outdir(args)
    csv_path = os.path.join(out, f"{cfg.experiment}-terminal.csv")
    with open(csv_path, "w", newline="\n") as fh:
        fh.write("tau,z,y,W,expansion,difference\n")
        for r in rows:
            fh.write(
                ",".join(
                    repr(r[k]) for k in ("tau", "z", "y", "W", "expansion", "difference")
                )
                + "\n"
            )
    from .plots import render_terminal_ladder

    svg = render_terminal_ladder(
        rows,
        os.path.join(out, f"{cfg.experiment}-terminal.svg"),
        title=f"{cfg.experiment} near-maturity check (y={y:g})",
    )
    ladder = []
    for tau in sorted({r["tau"] for r in rows}, reverse=True):
        worst = max(abs(r["difference"]) for r in rows if r["tau"] == tau)
        ladder.append((tau, worst))
        print(f"tau={tau:g}: max |difference| = {worst:.6f}")
    for path in (csv_path, svg):
        print(f"wrote {path}")
    if args.check:
        diffs = [w for _, w in ladder]
        if any(b >= a for a, b in zip(diffs, diffs[1:])):
            raise CheckFailure(f"max |difference| ladder is not strictly decreasing: {diffs}")
        print("checks passed (difference ladder strictly decreasing)")
    return 0


def _cmd_verify_mc(args) -> int:
    cfg = _load_config(args)
    problem, grid, params, sol = _solve_from_config(cfg)
    tau = args.tau if args.tau is not None else sol.final_tau
    y = args.y
    z = args.z
    c = (1.0 - problem.costs.theta1) * y if y >= 0 else (1.0 + problem.costs.theta2) * y
    x = z - c
    target = args.target
    if target is None:
        jumps = problem.utility.jump_points
        if not jumps:
            raise ConfigError("--target is required for a utility without a jump")
        target = jumps[-1][0]
    nu = args.nu
    if problem.model.is_gmr:
        # held-position rollouts start at the long-run volatility state
        if nu is None:
            nu = problem.model.nu_bar
        elif abs(nu - problem.model.nu_bar) > 1e-12:
            raise ConfigError("--nu must equal the long-run level for verify-mc")

    pde_value = float(sol.interp_value(tau, z, y * math.sqrt(tau), nu))
    spec = StrategySpec(
        kind="pi_star",
        position=Position(x, y),
        paths=args.paths,
        seed=args.seed,
        dt=args.dt,
        target=target,
    )
    est = simulate_strategy(spec, replace(problem, horizon=tau))
    lower = est.mean - 3.0 * est.std_error - args.slack
    report = {
        "experiment": cfg.experiment,
        "config_sha256": cfg.content_hash(),
        "state": {"tau": tau, "z": z, "y": y, "x": x, "nu": nu},
        "pde_value": pde_value,
        "mc": est.to_json_dict(),
        "strategy_lower_bound": lower,
        "passes_lower_bound": bool(pde_value >= lower),
    }
    out = _outdir(args)
    path = os.path.join(out, f"{cfg.experiment}-mc.json")
    _write_json(path, report)
    print(
        f"{cfg.experiment}: W={pde_value:.6f}  mc={est.mean:.6f} (se {est.std_error:.2g}) "
        f"lower bound {lower:.6f} -> {'ok' if report['passes_lower_bound'] else 'VIOLATED'}"
    )
    if est.warning:
        print(f"note: {est.warning}")
    print(f"wrote {path}")
    if args.check and not report["passes_lower_bound"]:
        raise CheckFailure(
            f"solved value {pde_value:.6f} sits below the strategy bound {lower:.6f}"
        )
    return 0


_CONVERGE_DEFAULT_TOL = {"penalty": 1e-4, "space": 1e-2, "vmax": 1e-3}


def _converge_ladder(cfg: RunConfig, mode: str, levels: int):
    base = cfg.grid_block
    if mode == "penalty":
        base_pen = cfg.to_solver_params().resolved_penalty(cfg.to_grid().dt)
        return [base_pen * 2.0**i for i in range(levels)]
    grids = []
    for i in range(levels):
        tree = cfg.as_tree()
        gz = tree["grid"]["z"]
        gv = tree["grid"]["v"]
        if mode == "space":
            gz["n"] = (gz["n"] - 1) * 2**i + 1
            gv["n"] = (gv["n"] - 1) * 2**i + 1
        elif mode == "vmax":
            gv["max"] = gv["max"] * 2.0**i
            gv["n"] = (gv["n"] - 1) * 2**i + 1
        grids.append(RunConfig.from_dict(tree).to_grid())
    return grids


def _cmd_converge(args) -> int:
    cfg = _load_config(args)
    problem = cfg.to_problem()
    params = cfg.to_solver_params()
    probes = []
    for pt in args.probe:
        vals = _float_list(pt)
        if len(vals) != 2:
            raise ConfigError(f"--probe expects 'z,y', got {pt!r}")
        probes.append((vals[0], vals[1] * math.sqrt(problem.horizon)))
    if not probes:
        zs = (0.3, 0.5, 0.7)
        probes = [(z, 0.5 * math.sqrt(problem.horizon)) for z in zs]
        probes += [(z, -0.5 * math.sqrt(problem.horizon)) for z in zs if problem.short_sale]
    if problem.model.is_gmr:
        nu0 = args.nu if args.nu is not None else problem.model.nu_bar
        probes = [(z, v, nu0) for z, v in probes]

    ladder = _converge_ladder(cfg, args.mode, args.levels)
    rows: list[StudyRow]
    if args.mode == "penalty":
        from .solver import convergence_study

        rows = convergence_study(
            problem, probes, penalties=ladder, base_grid=cfg.to_grid(), params=params
        )
    else:
        jobs = max(1, args.jobs)
        sols = [None] * len(ladder)
        if jobs == 1:
            for i, g in enumerate(ladder):
                sols[i] = solve_qvi(problem, g, params)
        else:
            with _futures.ThreadPoolExecutor(max_workers=jobs) as pool:
                futs = {pool.submit(solve_qvi, problem, g, params): i for i, g in enumerate(ladder)}
                for fut in _futures.as_completed(futs):
                    sols[futs[fut]] = fut.result()
        rows = []
        prev_vals = None
        prev_diff = None
        for g, sol in zip(ladder, sols):
            vals = tuple(float(sol.interp_value(sol.final_tau, *pt)) for pt in probes)
            diff = None
            ratio = None
            if prev_vals is not None:
                diff = max(abs(a - b) for a, b in zip(vals, prev_vals))
                if prev_diff not in (None, 0.0) and diff > 0.0:
                    ratio = prev_diff / diff
            label = f"n_z={g.nz},n_v={g.nv}" if args.mode == "space" else f"v_max={g.v_nodes[-1]:g}"
            rows.append(StudyRow(label=label, parameter=float(g.nz * g.nv * g.nn),
                                 values=vals, diff=diff, ratio=ratio))
            prev_vals = vals
            prev_diff = diff if diff is not None else prev_diff

    out = _outdir(args)
    csv_path = os.path.join(out, f"{cfg.experiment}-converge-{args.mode}.csv")
    with open(csv_path, "w", newline="\n") as fh:
        fh.write("label,parameter,diff,ratio\n")
        for r in rows:
            fh.write(
                f"{r.label},{repr(r.parameter)},"
                f"{'' if r.diff is None else repr(r.diff)},"
                f"{'' if r.ratio is None else repr(r.ratio)}\n"
            )
    from .plots import render_convergence

    svg = render_convergence(
        rows, os.path.join(out, f"{cfg.experiment}-converge-{args.mode}.svg"),
        title=f"{cfg.experiment} {args.mode} ladder",
    )
    for r in rows:
        print(
            f"{r.label}: diff={'-' if r.diff is None else f'{r.diff:.3e}'}"
            f" ratio={'-' if r.ratio is None else f'{r.ratio:.2f}'}"
        )
    for path in (csv_path, svg):
        print(f"wrote {path}")
    if args.check:
        tol = args.tol if args.tol is not None else _CONVERGE_DEFAULT_TOL[args.mode]
        last = rows[-1].diff
        if last is None or last >= tol:
            raise CheckFailure(
                f"last ladder difference {last} is not below the {args.mode} tolerance {tol}"
            )
        print(f"checks passed (final difference {last:.3e} < {tol})")
    return 0


def _cmd_presets(args) -> int:
    entries = []
    for name in preset_names():
        tree = PRESETS[name]
        prob = tree["problem"]
        util = prob["utility"]["kind"]
        model = prob["model"]["kind"]
        digest = (
            f"{model}, {util}, T={prob['horizon']:g}, "
            f"theta=({prob['costs']['theta1']:g},{prob['costs']['theta2']:g})"
        )
        if not prob.get("short_sale", True):
            digest += ", no shorting"
        if "terminal_check" in tree:
            digest += f", terminal check y={tree['terminal_check']['y']:g}"
        entries.append({"name": name, "summary": digest})
    if args.json:
        print(json.dumps(entries, indent=2, sort_keys=True))
    else:
        width = max(len(e["name"]) for e in entries)
        for e in entries:
            print(f"{e['name']:<{width}}  {e['summary']}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="qviport", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_check=True):
        p.add_argument("--preset", help="name of a shipped experiment preset")
        p.add_argument("--config", help="path to a YAML configuration")
        p.add_argument("--outdir", help="output directory (default $QVIPORT_OUTDIR or .)")
        p.add_argument("--jobs", type=int, default=1, help="worker cap for parallel ladders")
        if with_check:
            p.add_argument("--check", action="store_true",
                           help="exit 3 when the built-in invariant check fails")

    p = sub.add_parser("solve", help="solve a configuration and write a snapshot")
    common(p)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("regions", help="classify trade regions and export CSV + plots")
    common(p)
    p.add_argument("--tau", type=float, help="time-to-maturity level (default: final)")
    p.add_argument("--tol", type=float, help="classification tolerance override")
    p.add_argument("--nu", type=float, help="state slice to render (gmr only)")
    p.add_argument("--snapshot", help="reuse a saved snapshot instead of solving")
    p.set_defaults(func=_cmd_regions)

    p = sub.add_parser("terminal-check", help="value minus near-maturity expansion ladder")
    common(p)
    p.add_argument("--y", type=float, help="fixed stock position for the sweep")
    p.add_argument("--tau", help="comma-separated ladder, e.g. 0.02,0.01,0.005")
    p.add_argument("--n-z", type=int, help="number of wealth sample points")
    p.add_argument("--nu", type=float, help="state value (gmr only)")
    p.set_defaults(func=_cmd_terminal_check)

    p = sub.add_parser("verify-mc", help="compare the solved value with a strategy simulation")
    common(p)
    p.add_argument("--z", type=float, required=True, help="liquidation wealth of the state")
    p.add_argument("--y", type=float, required=True, help="stock position of the state")
    p.add_argument("--tau", type=float, help="time-to-maturity (default: final level)")
    p.add_argument("--nu", type=float, help="state value (gmr only)")
    p.add_argument("--target", type=float, help="barrier target (default: utility jump)")
    p.add_argument("--paths", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=20260814)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--slack", type=float, default=0.01,
                   help="additive slack on the Monte Carlo lower bound")
    p.set_defaults(func=_cmd_verify_mc)

    p = sub.add_parser("converge", help="refinement ladder report")
    common(p)
    p.add_argument("--mode", choices=("penalty", "space", "vmax"), default="space")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--probe", action="append", default=[],
                   help="probe point 'z,y' (repeatable)")
    p.add_argument("--nu", type=float, help="probe state value (gmr only)")
    p.add_argument("--tol", type=float, help="threshold for --check (mode-specific default)")
    p.set_defaults(func=_cmd_converge)

    p = sub.add_parser("presets", help="list shipped experiment configurations")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_presets)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, UtilityValidationError, SnapshotError, KeyError, OSError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 1
    except (NewtonError, AssemblyError, RiccatiExplosionError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
