"""Byte-stable persistence for solved problems.

A snapshot is a zip archive holding one ``header.json`` (problem, grid
metadata, solver parameters, diagnostics) followed by raw ``.npy`` blocks
for the node arrays and each stored level.  Entries are stored uncompressed
in a fixed order with a frozen timestamp, so saving the same solution twice
produces identical bytes.  Custom-boundary problems carry a callable and
cannot be serialized.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from .grid import TransformedGrid
from .market import CostSpec, MarketModel
from .problem import BoundaryKind, ProblemSpec
from .solver import SolveDiagnostics, Solution, SolverParams, StoredLevel
from .utility import Branch, Utility

__all__ = ["SnapshotError", "save_solution", "load_solution", "FORMAT"]

FORMAT = "qviport-snapshot/1"
_STAMP = (1980, 1, 1, 0, 0, 0)


class SnapshotError(RuntimeError):
    """Archive is missing, malformed, or from an unsupported format."""


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _read_npy(zf: zipfile.ZipFile, name: str) -> np.ndarray:
    try:
        payload = zf.read(name)
    except KeyError as exc:
        raise SnapshotError(f"snapshot is missing array block {name!r}") from exc
    return np.lib.format.read_array(io.BytesIO(payload), allow_pickle=False)


def _utility_dict(u: Utility) -> dict:
    return {
        "starts": list(u.starts),
        "branches": [
            {
                "const": b.const,
                "coeff": b.coeff,
                "exponent": b.exponent,
                "shift": b.shift,
                "reflected": b.reflected,
            }
            for b in u.branches
        ],
        "growth": list(u.growth),
        "name": u.name,
    }


def _utility_from(d: dict) -> Utility:
    return Utility(
        starts=tuple(d["starts"]),
        branches=tuple(Branch(**b) for b in d["branches"]),
        growth=tuple(d["growth"]),
        name=d["name"],
    )


def _problem_dict(p: ProblemSpec) -> dict:
    m = p.model
    return {
        "model": {
            "kind": m.kind,
            "r": m.r,
            "sigma": m.sigma,
            "eta": m.eta,
            "kappa": m.kappa,
            "nu_bar": m.nu_bar,
            "zeta": m.zeta,
            "rho": m.rho,
        },
        "costs": {"theta1": p.costs.theta1, "theta2": p.costs.theta2},
        "utility": _utility_dict(p.utility),
        "floor": p.floor,
        "horizon": p.horizon,
        "boundary": p.boundary,
        "short_sale": p.short_sale,
    }


def _problem_from(d: dict) -> ProblemSpec:
    return ProblemSpec(
        model=MarketModel(**d["model"]),
        costs=CostSpec(**d["costs"]),
        utility=_utility_from(d["utility"]),
        floor=d["floor"],
        horizon=d["horizon"],
        boundary=d["boundary"],
        short_sale=d["short_sale"],
    )


def _params_dict(p: SolverParams) -> dict:
    return {
        "penalty": p.penalty,
        "newton_tol": p.newton_tol,
        "newton_max_iter": p.newton_max_iter,
        "qvi_tol": p.qvi_tol,
        "damping": p.damping,
        "store_taus": list(p.store_taus),
        "direct_limit": p.direct_limit,
        "krylov_tol": p.krylov_tol,
        "envelope_flush": p.envelope_flush,
        "flush_audit": p.flush_audit,
    }


def _params_from(d: dict) -> SolverParams:
    d = dict(d)
    d["store_taus"] = tuple(d["store_taus"])
    return SolverParams(**d)


def _diag_dict(d: SolveDiagnostics) -> dict:
    return {
        "newton_iters": list(d.newton_iters),
        "shortcut_levels": d.shortcut_levels,
        "damping_count": d.damping_count,
        "damping_total": d.damping_total,
        "damping_max_relative": d.damping_max_relative,
        "damping_events": [list(e) for e in d.damping_events],
        "max_constraint_violation": d.max_constraint_violation,
        "flush_deviation": d.flush_deviation,
        "wall_time": d.wall_time,
    }


def _diag_from(d: dict) -> SolveDiagnostics:
    out = SolveDiagnostics(
        newton_iters=list(d["newton_iters"]),
        shortcut_levels=d["shortcut_levels"],
        damping_count=d["damping_count"],
        damping_total=d["damping_total"],
        damping_max_relative=d["damping_max_relative"],
        damping_events=[tuple(e) for e in d["damping_events"]],
        max_constraint_violation=d["max_constraint_violation"],
        wall_time=d["wall_time"],
    )
    out.flush_deviation = d.get("flush_deviation", 0.0)
    return out


def save_solution(sol: Solution, path: str) -> None:
    """Write ``sol`` to ``path`` as a deterministic archive."""
    if sol.problem.boundary == BoundaryKind.CUSTOM:
        raise SnapshotError("custom-boundary problems hold a callable and cannot be saved")

    taus = sorted(sol.levels)
    header = {
        "format": FORMAT,
        "problem": _problem_dict(sol.problem),
        "params": _params_dict(sol.params),
        "diagnostics": _diag_dict(sol.diagnostics),
        "grid": {"is_3d": sol.grid.is_3d},
        "levels": [
            {"tau": t, "dt": sol.levels[t].dt}
            for t in taus
        ],
    }

    blocks: list[tuple[str, np.ndarray]] = [
        ("grid/z_nodes.npy", sol.grid.z_nodes),
        ("grid/v_nodes.npy", sol.grid.v_nodes),
        ("grid/tau_levels.npy", sol.grid.tau_levels),
    ]
    if sol.grid.is_3d:
        blocks.append(("grid/nu_nodes.npy", sol.grid.nu_nodes))
    for i, t in enumerate(taus):
        lv = sol.levels[t]
        blocks += [
            (f"levels/{i}/w.npy", lv.w),
            (f"levels/{i}/w_prev.npy", lv.w_prev),
            (f"levels/{i}/sell_active.npy", lv.sell_active),
            (f"levels/{i}/buy_active.npy", lv.buy_active),
        ]

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=_STAMP)
        zf.writestr(info, json.dumps(header, sort_keys=True, separators=(",", ":")))
        for name, arr in blocks:
            info = zipfile.ZipInfo(name, date_time=_STAMP)
            zf.writestr(info, _npy_bytes(arr))


def load_solution(path: str) -> Solution:
    """Rebuild a :class:`qviport.solver.Solution` from an archive."""
    with zipfile.ZipFile(path, "r") as zf:
        try:
            header = json.loads(zf.read("header.json"))
        except KeyError as exc:
            raise SnapshotError("archive has no header.json") from exc
        if header.get("format") != FORMAT:
            raise SnapshotError(
                f"unsupported snapshot format {header.get('format')!r}; expected {FORMAT!r}"
            )
        problem = _problem_from(header["problem"])
        params = _params_from(header["params"])
        diag = _diag_from(header["diagnostics"])
        nu = _read_npy(zf, "grid/nu_nodes.npy") if header["grid"]["is_3d"] else None
        grid = TransformedGrid(
            z_nodes=_read_npy(zf, "grid/z_nodes.npy"),
            v_nodes=_read_npy(zf, "grid/v_nodes.npy"),
            tau_levels=_read_npy(zf, "grid/tau_levels.npy"),
            nu_nodes=nu,
        )
        levels = {}
        for i, meta in enumerate(header["levels"]):
            levels[float(meta["tau"])] = StoredLevel(
                tau=float(meta["tau"]),
                w=_read_npy(zf, f"levels/{i}/w.npy"),
                w_prev=_read_npy(zf, f"levels/{i}/w_prev.npy"),
                dt=float(meta["dt"]),
                sell_active=_read_npy(zf, f"levels/{i}/sell_active.npy"),
                buy_active=_read_npy(zf, f"levels/{i}/buy_active.npy"),
            )
    return Solution(problem=problem, grid=grid, params=params, levels=levels, diagnostics=diag)
