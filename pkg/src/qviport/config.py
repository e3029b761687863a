"""Declarative run configuration and the shipped experiment presets.

A run is described by a nested key tree (usually YAML) with four blocks:
``problem`` (market model, costs, utility, floor, horizon, boundary),
``grid`` (wealth/stock/state axes and the time ladder), ``solver``
(numerical knobs), and ``outputs`` (retained levels, output directory).
Unknown keys anywhere in the tree are rejected with the full dotted path,
so presets cannot silently drift.  ``canonical_json`` provides a stable
serialization whose SHA-256 identifies the configuration in reports.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import yaml

from .grid import TransformedGrid, refined_z_nodes, stretched_v_nodes, tau_ladder, uniform_nodes
from .market import CostSpec, MarketModel
from .problem import BoundaryKind, ProblemSpec
from .solver import SolverParams
from .utility import make_utility

__all__ = ["ConfigError", "RunConfig", "PRESETS", "preset", "preset_names"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


_MODEL_KEYS = {
    "kind": str,
    "r": (int, float),
    "sigma": (int, float),
    "eta": (int, float),
    "kappa": (int, float),
    "nu_bar": (int, float),
    "zeta": (int, float),
    "rho": (int, float),
}
_MODEL_DEFAULTS = {"r": 0.0, "eta": 0.0, "kappa": 0.0, "nu_bar": 0.0, "zeta": 0.0, "rho": 0.0}
_COST_KEYS = {"theta1": (int, float), "theta2": (int, float)}
_PROBLEM_KEYS = {"model", "costs", "utility", "floor", "horizon", "boundary", "short_sale"}
_GRID_Z_KEYS = {"max": (int, float), "n": int, "refine": list, "refine_ratio": int}
_GRID_V_KEYS = {"max": (int, float), "n": int, "stretch": (int, float), "include": list}
_GRID_NU_KEYS = {"min": (int, float), "max": (int, float), "n": int}
_SOLVER_KEYS = {
    "penalty": (int, float, type(None)),
    "newton_tol": (int, float),
    "newton_max_iter": int,
    "qvi_tol": (int, float, type(None)),
    "damping": str,
    "direct_limit": int,
    "krylov_tol": (int, float),
    "envelope_flush": bool,
    "flush_audit": (int, float),
}
_OUTPUT_KEYS = {"store_taus": list, "outdir": (str, type(None))}
_TC_KEYS = {"y": (int, float), "taus": list, "z_range": list, "n_z": int, "nu": (int, float)}
_TOP_KEYS = {"experiment", "problem", "grid", "solver", "outputs", "terminal_check"}


def _reject_unknown(block: dict, allowed, path: str):
    extra = sorted(set(block) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key {path}.{extra[0]!r}")


def _typed(block: dict, schema: dict, path: str) -> dict:
    _reject_unknown(block, schema, path)
    out = {}
    for key, val in block.items():
        want = schema[key]
        if want is int:
            ok = isinstance(val, int) and not isinstance(val, bool)
        elif want is bool:
            ok = isinstance(val, bool)
        else:
            ok = isinstance(val, want) and not (
                isinstance(val, bool) and float in (want if isinstance(want, tuple) else (want,))
            )
        if not ok:
            raise ConfigError(f"{path}.{key} has the wrong type ({type(val).__name__})")
        out[key] = val
    return out


def _require(block: dict, key: str, path: str):
    if key not in block:
        raise ConfigError(f"missing required key {path}.{key}")
    return block[key]


@dataclass(frozen=True)
class RunConfig:
    """Validated run description.  Construct with :meth:`from_dict` or
    :meth:`from_yaml`; the raw resolved tree is kept for hashing."""

    experiment: str
    problem_block: dict
    grid_block: dict
    solver_block: dict
    outputs_block: dict
    terminal_check_block: dict | None = None

    # ---- construction ----

    @classmethod
    def from_dict(cls, tree: dict) -> "RunConfig":
        if not isinstance(tree, dict):
            raise ConfigError("configuration root must be a mapping")
        _reject_unknown(tree, _TOP_KEYS, "root")
        experiment = tree.get("experiment", "adhoc")
        if not isinstance(experiment, str) or not experiment:
            raise ConfigError("root.experiment must be a nonempty string")

        prob = _require(tree, "problem", "root")
        if not isinstance(prob, dict):
            raise ConfigError("root.problem must be a mapping")
        _reject_unknown(prob, _PROBLEM_KEYS, "problem")
        model = _typed(dict(_require(prob, "model", "problem")), _MODEL_KEYS, "problem.model")
        if "kind" not in model:
            raise ConfigError("missing required key problem.model.kind")
        model = {**_MODEL_DEFAULTS, **model}
        costs = _typed(dict(_require(prob, "costs", "problem")), _COST_KEYS, "problem.costs")
        for key in _COST_KEYS:
            _require(costs, key, "problem.costs")
        util = dict(_require(prob, "utility", "problem"))
        if "kind" not in util:
            raise ConfigError("missing required key problem.utility.kind")
        floor = prob.get("floor", 0.0)
        horizon = _require(prob, "horizon", "problem")
        boundary = prob.get("boundary", BoundaryKind.GOAL)
        short_sale = prob.get("short_sale", True)
        if not isinstance(short_sale, bool):
            raise ConfigError("problem.short_sale must be a boolean")
        prob_resolved = {
            "model": model,
            "costs": costs,
            "utility": util,
            "floor": floor,
            "horizon": horizon,
            "boundary": boundary,
            "short_sale": short_sale,
        }

        gr = _require(tree, "grid", "root")
        if not isinstance(gr, dict):
            raise ConfigError("root.grid must be a mapping")
        _reject_unknown(gr, {"z", "v", "nu", "steps"}, "grid")
        z = _typed(dict(_require(gr, "z", "grid")), _GRID_Z_KEYS, "grid.z")
        _require(z, "max", "grid.z")
        _require(z, "n", "grid.z")
        z.setdefault("refine", [])
        z.setdefault("refine_ratio", 8)
        v = _typed(dict(_require(gr, "v", "grid")), _GRID_V_KEYS, "grid.v")
        _require(v, "max", "grid.v")
        _require(v, "n", "grid.v")
        v.setdefault("stretch", 4.0)
        v.setdefault("include", [])
        steps = _require(gr, "steps", "grid")
        if not isinstance(steps, int) or steps < 1:
            raise ConfigError("grid.steps must be a positive integer")
        grid_resolved = {"z": z, "v": v, "steps": steps}
        if "nu" in gr:
            nu = _typed(dict(gr["nu"]), _GRID_NU_KEYS, "grid.nu")
            for key in _GRID_NU_KEYS:
                _require(nu, key, "grid.nu")
            grid_resolved["nu"] = nu
        if model["kind"] == "gmr" and "nu" not in grid_resolved:
            raise ConfigError("grid.nu is required for the gmr model")
        if model["kind"] != "gmr" and "nu" in grid_resolved:
            raise ConfigError("grid.nu only applies to the gmr model")

        solver = _typed(dict(tree.get("solver", {})), _SOLVER_KEYS, "solver")

        out = dict(tree.get("outputs", {}))
        _reject_unknown(out, _OUTPUT_KEYS, "outputs")
        out.setdefault("store_taus", [horizon])
        out.setdefault("outdir", None)
        if not isinstance(out["store_taus"], list) or not out["store_taus"]:
            raise ConfigError("outputs.store_taus must be a nonempty list")

        tc = None
        if "terminal_check" in tree:
            tc = _typed(dict(tree["terminal_check"]), _TC_KEYS, "terminal_check")
            _require(tc, "y", "terminal_check")
            tc.setdefault("taus", list(out["store_taus"]))
            tc.setdefault("z_range", [0.2, 0.8])
            tc.setdefault("n_z", 61)

        cfg = cls(
            experiment=experiment,
            problem_block=prob_resolved,
            grid_block=grid_resolved,
            solver_block=solver,
            outputs_block=out,
            terminal_check_block=tc,
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            tree = yaml.safe_load(fh)
        if tree is None:
            raise ConfigError(f"configuration file {path} is empty")
        return cls.from_dict(tree)

    # ---- materialization ----

    def to_problem(self) -> ProblemSpec:
        p = self.problem_block
        try:
            model = MarketModel(**p["model"])
            costs = CostSpec(**p["costs"])
            util_args = dict(p["utility"])
            kind = util_args.pop("kind")
            util_args.setdefault("floor", p["floor"])
            utility = make_utility(kind, **util_args)
            return ProblemSpec(
                model=model,
                costs=costs,
                utility=utility,
                floor=p["floor"],
                horizon=p["horizon"],
                boundary=p["boundary"],
                short_sale=p["short_sale"],
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"problem block is invalid: {exc}") from exc

    def to_grid(self) -> TransformedGrid:
        g = self.grid_block
        p = self.problem_block
        try:
            z_nodes = refined_z_nodes(
                p["floor"],
                g["z"]["max"],
                g["z"]["n"],
                refine_points=tuple(g["z"]["refine"]),
                ratio=g["z"]["refine_ratio"],
            )
            v_nodes = stretched_v_nodes(
                g["v"]["max"],
                g["v"]["n"],
                stretch=g["v"]["stretch"],
                include=tuple(g["v"]["include"]),
                short_sale=p["short_sale"],
            )
            nu_nodes = None
            if "nu" in g:
                nu_nodes = uniform_nodes(g["nu"]["min"], g["nu"]["max"], g["nu"]["n"])
            return TransformedGrid(
                z_nodes=z_nodes,
                v_nodes=v_nodes,
                tau_levels=tau_ladder(p["horizon"], g["steps"]),
                nu_nodes=nu_nodes,
            )
        except ValueError as exc:
            raise ConfigError(f"grid block is invalid: {exc}") from exc

    def to_solver_params(self) -> SolverParams:
        try:
            return SolverParams(
                store_taus=tuple(float(t) for t in self.outputs_block["store_taus"]),
                **self.solver_block,
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"solver block is invalid: {exc}") from exc

    def validate(self) -> None:
        """Materialize every block so all module preconditions run."""
        problem = self.to_problem()
        grid = self.to_grid()
        self.to_solver_params()
        for tau in self.outputs_block["store_taus"]:
            if not isinstance(tau, (int, float)) or not (0.0 < tau <= problem.horizon + 1e-12):
                raise ConfigError(f"outputs.store_taus entry {tau!r} outside (0, horizon]")
            grid.level_index(float(tau))
        tc = self.terminal_check_block
        if tc is not None:
            lo, hi = tc["z_range"]
            if not (problem.floor <= lo < hi):
                raise ConfigError("terminal_check.z_range must be increasing and above the floor")
            for tau in tc["taus"]:
                grid.level_index(float(tau))
            if problem.model.is_gmr and "nu" not in tc:
                raise ConfigError("terminal_check.nu is required for the gmr model")

    # ---- identity ----

    def as_tree(self) -> dict:
        tree = {
            "experiment": self.experiment,
            "problem": self.problem_block,
            "grid": self.grid_block,
            "solver": self.solver_block,
            "outputs": self.outputs_block,
        }
        if self.terminal_check_block is not None:
            tree["terminal_check"] = self.terminal_check_block
        return copy.deepcopy(tree)

    def canonical_json(self) -> str:
        return json.dumps(self.as_tree(), sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


# ---------------------------------------------------------------------------
# shipped presets
# ---------------------------------------------------------------------------


def _gbm(eta: float, sigma: float = 0.3) -> dict:
    return {"kind": "gbm", "r": 0.0, "sigma": sigma, "eta": eta}


def _goal_region(name, eta, tau, theta, steps=None, nz=161, nv=121, vmax=6.0):
    steps = steps if steps is not None else max(8, int(round(tau / 0.00125)))
    return {
        "experiment": name,
        "problem": {
            "model": _gbm(eta),
            "costs": {"theta1": theta, "theta2": theta},
            "utility": {"kind": "goal_reaching", "z_bar": 1.0},
            "floor": 0.0,
            "horizon": tau,
            "boundary": "goal",
        },
        "grid": {
            "z": {"max": 1.0, "n": nz},
            "v": {"max": vmax, "n": nv, "include": [0.001, 5.0]},
            "steps": steps,
        },
        "outputs": {"store_taus": [tau]},
    }


def _aspiration_region(name, eta, tau, c1=0.0, steps=None):
    steps = steps if steps is not None else max(8, int(round(tau / 0.00125)))
    return {
        "experiment": name,
        "problem": {
            "model": _gbm(eta),
            "costs": {"theta1": 1e-3, "theta2": 1e-3},
            "utility": {"kind": "aspiration", "p": 0.5, "c1": c1, "c2": 1.5, "z_bar": 1.0},
            "floor": 0.0,
            "horizon": tau,
            "boundary": "power_far_field",
        },
        "grid": {
            "z": {"max": 2.0, "n": 201},
            "v": {"max": 6.0, "n": 121, "include": [0.001, 5.0]},
            "steps": steps,
        },
        "outputs": {"store_taus": [tau]},
    }


def _terminal_goal(name, y, theta, short_sale, taus):
    vmax = 4.0
    incl = sorted({round(abs(y) * math.sqrt(t), 12) for t in taus})
    return {
        "experiment": name,
        "problem": {
            "model": _gbm(0.04),
            "costs": {"theta1": theta, "theta2": theta},
            "utility": {"kind": "goal_reaching", "z_bar": 1.0},
            "floor": 0.0,
            "horizon": max(taus),
            "boundary": "goal",
            "short_sale": short_sale,
        },
        "grid": {
            "z": {"max": 1.0, "n": 161},
            "v": {"max": vmax, "n": 101, "include": incl},
            "steps": int(round(max(taus) / 0.000625)),
        },
        "outputs": {"store_taus": sorted(taus)},
        "terminal_check": {"y": y, "taus": sorted(taus, reverse=True), "z_range": [0.2, 0.8]},
    }


_TC_TAUS = [0.02, 0.01, 0.005, 0.0025]

PRESETS: dict[str, dict] = {}

for _i, _tau in enumerate((0.01, 0.05, 0.1)):
    _row = ("top", "mid", "bottom")[_i]
    PRESETS[f"fig1-{_row}left"] = _goal_region(f"fig1-{_row}left", 0.0, _tau, 1e-3)
    PRESETS[f"fig1-{_row}right"] = _goal_region(f"fig1-{_row}right", 0.04, _tau, 1e-3)

PRESETS["fig2-left"] = _goal_region("fig2-left", 0.04, 0.01, 2e-3)
PRESETS["fig2-right"] = _goal_region("fig2-right", 0.04, 0.1, 2e-3)

PRESETS["fig3-left"] = _aspiration_region("fig3-left", 0.0, 0.01)
PRESETS["fig3-right"] = _aspiration_region("fig3-right", 0.0, 0.1)

for _pos, _tau in (("topleft", 0.01), ("topright", 0.05), ("bottomleft", 0.1), ("bottomright", 0.2)):
    PRESETS[f"fig4-{_pos}"] = _aspiration_region(f"fig4-{_pos}", 0.04, _tau)

PRESETS["fig5"] = _goal_region("fig5", 0.04, 0.02, 1e-2, nv=71)
PRESETS["fig5"]["problem"]["short_sale"] = False

PRESETS["fig6"] = {
    "experiment": "fig6",
    "problem": {
        "model": {
            "kind": "gmr",
            "r": 0.0,
            "sigma": 0.3,
            "kappa": 0.27,
            "nu_bar": 0.1333,
            "zeta": 0.065,
            "rho": -0.93,
        },
        "costs": {"theta1": 1e-3, "theta2": 1e-3},
        "utility": {"kind": "goal_reaching", "z_bar": 1.0},
        "floor": 0.0,
        "horizon": 0.1,
        "boundary": "goal",
    },
    "grid": {
        "z": {"max": 1.0, "n": 121},
        "v": {"max": 5.0, "n": 61, "include": [0.001]},
        "nu": {"min": -1.0 / 3.0, "max": 1.0 / 3.0, "n": 21},
        "steps": 20,
    },
    "outputs": {"store_taus": [0.1]},
}

PRESETS["figSS"] = {
    "experiment": "figSS",
    "problem": {
        "model": _gbm(0.04),
        "costs": {"theta1": 1e-3, "theta2": 1e-3},
        "utility": {"kind": "s_shaped", "lam": 2.25, "p": 0.5, "z0": 1.0},
        "floor": 0.0,
        "horizon": 0.01,
        "boundary": "power_far_field",
    },
    "grid": {
        "z": {"max": 3.0, "n": 241},
        "v": {"max": 6.0, "n": 121, "include": [0.001, 5.0]},
        "steps": 8,
    },
    "outputs": {"store_taus": [0.01]},
}

PRESETS["aspiration-jump"] = _aspiration_region("aspiration-jump", 0.04, 0.01, c1=1.0)

PRESETS["fig7"] = _terminal_goal("fig7", 20.0, 1e-2, False, _TC_TAUS)
PRESETS["fig8"] = _terminal_goal("fig8", 20.0, 1e-2, True, _TC_TAUS)
PRESETS["fig8-short"] = _terminal_goal("fig8-short", -20.0, 1e-2, True, _TC_TAUS)

PRESETS["fig9"] = {
    "experiment": "fig9",
    "problem": {
        "model": {
            "kind": "gmr",
            "r": 0.0,
            "sigma": 0.3,
            "kappa": 0.27,
            "nu_bar": 0.1333,
            "zeta": 0.065,
            "rho": -0.93,
        },
        "costs": {"theta1": 1e-3, "theta2": 1e-3},
        "utility": {"kind": "goal_reaching", "z_bar": 1.0},
        "floor": 0.0,
        "horizon": 0.02,
        "boundary": "goal",
    },
    "grid": {
        "z": {"max": 1.0, "n": 81},
        "v": {"max": 2.0, "n": 41, "include": [math.sqrt(t) for t in _TC_TAUS]},
        "nu": {"min": -1.0 / 3.0, "max": 1.0 / 3.0, "n": 15},
        "steps": 16,
    },
    "outputs": {"store_taus": sorted(_TC_TAUS)},
    "terminal_check": {"y": 1.0, "taus": _TC_TAUS, "z_range": [0.2, 0.8], "nu": 0.1333},
}

PRESETS["fig10"] = {
    "experiment": "fig10",
    "problem": {
        "model": _gbm(0.04),
        "costs": {"theta1": 1e-3, "theta2": 1e-3},
        "utility": {"kind": "aspiration", "p": 0.5, "c1": 0.0, "c2": 1.5, "z_bar": 1.0},
        "floor": 0.0,
        "horizon": 0.02,
        "boundary": "power_far_field",
    },
    "grid": {
        "z": {"max": 2.0, "n": 161},
        "v": {"max": 2.0, "n": 81, "include": sorted({round(5.0 * math.sqrt(t), 12) for t in _TC_TAUS})},
        "steps": 32,
    },
    "outputs": {"store_taus": sorted(_TC_TAUS)},
    "terminal_check": {"y": 5.0, "taus": _TC_TAUS, "z_range": [0.2, 0.8]},
}

PRESETS["fig10-short"] = copy.deepcopy(PRESETS["fig10"])
PRESETS["fig10-short"]["experiment"] = "fig10-short"
PRESETS["fig10-short"]["terminal_check"]["y"] = -5.0


def preset_names() -> list[str]:
    return sorted(PRESETS)


def preset(name: str) -> RunConfig:
    """Load a shipped preset as a validated :class:`RunConfig`."""
    try:
        tree = PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}"
        ) from None
    return RunConfig.from_dict(copy.deepcopy(tree))
