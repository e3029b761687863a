"""Classification of solved fields into sell, buy, and no-trade regions.

At a solved level every interior node carries three residuals: the marching
residual and the two one-sided gradient-constraint residuals.  The minimum
of the triple is (up to the penalty tolerance) zero, and which member
attains it tells the action at that node.  Classification follows that rule
directly rather than re-deriving free boundaries: no-trade when the
marching residual is inside tolerance, otherwise the smaller gradient
residual wins, with an explicit AMBIGUOUS label when the two gradient
residuals are indistinguishable near zero.

Exports are plain CSV plus a JSON metadata sidecar and a gnuplot-compatible
plot script; identical inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .analytic import browne_target
from .solver import Solution

__all__ = [
    "RegionMap",
    "REGION_NAMES",
    "classify_regions",
    "compare_frictionless",
    "export_fields",
    "write_plot_script",
]

NR, SR, BR, AMBIGUOUS, EDGE = 0, 1, 2, 3, -1
REGION_NAMES = {NR: "NR", SR: "SR", BR: "BR", AMBIGUOUS: "AMBIGUOUS", EDGE: "EDGE"}


@dataclass
class RegionMap:
    """Per-node labels and raw residual triple for one time level.

    ``labels`` covers the full lattice with EDGE marking boundary rows that
    carry no classification.  Boundary curves are in share units y = v /
    sqrt(tau), one value per z column, NaN where the interface is absent.
    """

    tau: float
    t: float
    z_nodes: np.ndarray
    v_nodes: np.ndarray
    nu_nodes: np.ndarray | None
    labels: np.ndarray
    w: np.ndarray
    r_pde: np.ndarray
    r_sell: np.ndarray
    r_buy: np.ndarray
    tol: float
    utility_name: str = ""
    horizon: float = 0.0
    boundary_curves: dict = field(default_factory=dict)

    @property
    def is_3d(self) -> bool:
        return self.nu_nodes is not None

    def interior_mask(self) -> np.ndarray:
        return self.labels != EDGE

    def fractions(self, nu_index: int = 0) -> dict:
        """Share of interior nodes per label at one volatility slice."""
        lab = self.labels[:, :, nu_index]
        inside = lab != EDGE
        total = int(inside.sum())
        return {
            REGION_NAMES[code]: int((lab[inside] == code).sum()) / total
            for code in (NR, SR, BR, AMBIGUOUS)
        }

    def label_at(self, z: float, y: float, nu: float | None = None) -> str:
        """Label of the lattice node nearest to the queried state."""
        iz = int(np.argmin(np.abs(self.z_nodes - z)))
        jv = int(np.argmin(np.abs(self.v_nodes - y * math.sqrt(self.tau))))
        kn = 0
        if self.is_3d:
            if nu is None:
                raise ValueError("nu required for a stochastic-volatility map")
            kn = int(np.argmin(np.abs(self.nu_nodes - nu)))
        return REGION_NAMES[int(self.labels[iz, jv, kn])]


def _extract_curves(labels, r_pde, r_sell, r_buy, z_nodes, v_nodes, tau, jv0):
    """Interface curves per z column in share units.

    ``buy_upper`` is the first BR-to-other transition scanning upward from
    v = 0, ``sell_lower`` the first SR-to-other transition scanning down;
    the crossing location interpolates the zero of the residual difference
    between the two labels meeting at the interface.
    """
    nz, nv = labels.shape
    sqt = math.sqrt(tau)
    buy_upper = np.full(nz, np.nan)
    sell_lower = np.full(nz, np.nan)
    sell_upper = np.full(nz, np.nan)

    def resid_of(code, iz, jv):
        if code == SR:
            return r_sell[iz, jv]
        if code == BR:
            return r_buy[iz, jv]
        return r_pde[iz, jv]

    def crossing(iz, j_in, j_out, code_in, code_out):
        f_in = resid_of(code_in, iz, j_in) - resid_of(code_out, iz, j_in)
        f_out = resid_of(code_in, iz, j_out) - resid_of(code_out, iz, j_out)
        if f_out == f_in:
            frac = 0.5
        else:
            frac = np.clip(f_in / (f_in - f_out), 0.0, 1.0)
        return v_nodes[j_in] + frac * (v_nodes[j_out] - v_nodes[j_in])

    for iz in range(nz):
        col = labels[iz]
        j = jv0
        if col[j] != BR and j + 1 < nv and col[j + 1] == BR:
            j = j + 1
        if col[j] == BR:
            while j + 1 < nv and col[j + 1] == BR:
                j += 1
            if j + 1 < nv and col[j + 1] != EDGE:
                buy_upper[iz] = crossing(iz, j, j + 1, BR, int(col[j + 1])) / sqt
        j = jv0
        if col[j] != SR and j - 1 >= 0 and col[j - 1] == SR:
            j = j - 1
        if col[j] == SR:
            while j - 1 >= 0 and col[j - 1] == SR:
                j -= 1
            if j - 1 >= 0 and col[j - 1] != EDGE:
                sell_lower[iz] = crossing(iz, j, j - 1, SR, int(col[j - 1])) / sqt
        sr_top = np.flatnonzero(col == SR)
        if sr_top.size:
            j = int(sr_top[-1])
            if j + 1 < nv and col[j + 1] != EDGE:
                sell_upper[iz] = crossing(iz, j, j + 1, SR, int(col[j + 1])) / sqt
    return {"buy_upper": buy_upper, "sell_lower": sell_lower, "sell_upper": sell_upper}


def classify_regions(solution: Solution, tau: float | None = None, tol: float | None = None) -> RegionMap:
    """Label every interior node of a stored level.

    Rule: no-trade when the marching residual is within ``tol``; otherwise
    the smaller gradient residual decides, except that gradient residuals
    within ``tol`` of each other and of zero give AMBIGUOUS.
    """
    tau = tau if tau is not None else solution.final_tau
    lev = solution.level(tau)
    tol = tol if tol is not None else solution.resolved_qvi_tol(tau)
    res = solution.residuals(tau)
    g = solution.grid
    shape = (g.nz, g.nv, g.nn)
    r_pde = res["pde"].reshape(shape)
    r_sell = res["sell"].reshape(shape)
    r_buy = res["buy"].reshape(shape)
    interior = res["interior"].reshape(shape)
    sell_app = res["sell_applicable"].reshape(shape)
    buy_app = res["buy_applicable"].reshape(shape)

    big = np.inf
    rs = np.where(sell_app, r_sell, big)
    rb = np.where(buy_app, r_buy, big)
    labels = np.full(shape, EDGE, dtype=np.int8)
    nr = interior & (r_pde <= tol)
    with np.errstate(invalid="ignore"):
        # inf - inf on rows outside the domain is discarded by the masks
        gap_small = np.abs(rs - rb) <= tol
    amb = interior & ~nr & gap_small & (rs <= tol) & (rb <= tol)
    sell = interior & ~nr & ~amb & (rs < rb)
    buy = interior & ~nr & ~amb & (rs >= rb)
    labels[nr] = NR
    labels[amb] = AMBIGUOUS
    labels[sell] = SR
    labels[buy] = BR

    jv0 = g.v_zero_index
    curves = {}
    for kn in range(g.nn):
        curves[kn] = _extract_curves(
            labels[:, :, kn], r_pde[:, :, kn], r_sell[:, :, kn], r_buy[:, :, kn],
            g.z_nodes, g.v_nodes, tau, jv0,
        )

    return RegionMap(
        tau=float(tau),
        t=float(solution.problem.horizon - tau),
        z_nodes=g.z_nodes,
        v_nodes=g.v_nodes,
        nu_nodes=g.nu_nodes if g.is_3d else None,
        labels=labels,
        w=lev.w.reshape(shape),
        r_pde=r_pde,
        r_sell=np.where(sell_app, r_sell, 0.0),
        r_buy=np.where(buy_app, r_buy, 0.0),
        tol=float(tol),
        utility_name=solution.problem.utility.name,
        horizon=float(solution.problem.horizon),
        boundary_curves=curves if g.is_3d else curves[0],
    )


def compare_frictionless(region_map: RegionMap, sigma: float, tau: float | None = None) -> list:
    """Per-z table of extracted trade boundaries against the frictionless
    goal-reaching target position.

    Rows: (z, buy_upper_y, sell_lower_y, target_y, buy_exceeds_target).
    Only meaningful for goal-reaching runs; anything else is rejected.
    """
    if not region_map.utility_name.startswith("goal"):
        raise ValueError("frictionless boundary comparison supports goal-reaching runs only")
    tau = tau if tau is not None else region_map.tau
    curves = region_map.boundary_curves if not region_map.is_3d else region_map.boundary_curves[0]
    rows = []
    for iz, z in enumerate(region_map.z_nodes):
        if not (0.0 < z < 1.0):
            continue
        target = browne_target(float(z), sigma, tau)
        bu = float(curves["buy_upper"][iz])
        sl = float(curves["sell_lower"][iz])
        exceeds = bool(bu > target) if not math.isnan(bu) else False
        rows.append((float(z), bu, sl, target, exceeds))
    return rows


def _fmt(x) -> str:
    return repr(float(x))


def export_fields(obj, path, format: str = "csv", metadata: dict | None = None, tol: float | None = None) -> str:
    """Write one level's interior nodes as CSV with a JSON sidecar.

    Accepts a Solution (classified at its final level) or a RegionMap.
    Column order is fixed; share position y is v / sqrt(tau).  A run with
    identical inputs reproduces the files byte for byte.
    """
    if format != "csv":
        raise ValueError(f"unsupported export format: {format!r}")
    if isinstance(obj, Solution):
        rmap = classify_regions(obj, tol=tol)
    else:
        rmap = obj
    sqt = math.sqrt(rmap.tau)
    lines = []
    if rmap.is_3d:
        header = "t,z,v,nu,y,W,residual_pde,residual_sell,residual_buy,label"
    else:
        header = "t,z,v,y,W,residual_pde,residual_sell,residual_buy,label"
    lines.append(header)
    nz, nv, nn = rmap.labels.shape
    for iz in range(nz):
        for jv in range(nv):
            for kn in range(nn):
                code = int(rmap.labels[iz, jv, kn])
                if code == EDGE:
                    continue
                v = rmap.v_nodes[jv]
                cells = [
                    _fmt(rmap.t),
                    _fmt(rmap.z_nodes[iz]),
                    _fmt(v),
                ]
                if rmap.is_3d:
                    cells.append(_fmt(rmap.nu_nodes[kn]))
                cells += [
                    _fmt(v / sqt),
                    _fmt(rmap.w[iz, jv, kn]),
                    _fmt(rmap.r_pde[iz, jv, kn]),
                    _fmt(rmap.r_sell[iz, jv, kn]),
                    _fmt(rmap.r_buy[iz, jv, kn]),
                    REGION_NAMES[code],
                ]
                lines.append(",".join(cells))
    payload = "\n".join(lines) + "\n"
    with open(path, "w", newline="\n") as fh:
        fh.write(payload)

    meta = {
        "format_version": 1,
        "kind": "region_export",
        "tau": rmap.tau,
        "t": rmap.t,
        "tolerance": rmap.tol,
        "utility": rmap.utility_name,
        "grid": {"nz": nz, "nv": nv, "nn": nn},
        "rows": len(lines) - 1,
        "csv_sha256": hashlib.sha256(payload.encode()).hexdigest(),
        "fractions": rmap.fractions(),
    }
    if metadata:
        meta.update(metadata)
    sidecar = str(path) + ".meta.json"
    with open(sidecar, "w", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return str(path)


def write_plot_script(csv_path, script_path=None, title: str = "action regions") -> str:
    """Emit a gnuplot script that renders the exported CSV: one point set
    per label over the (z, y) plane plus the extracted interfaces."""
    csv_path = str(csv_path)
    script_path = script_path or csv_path + ".gp"
    label_col = 10 if _csv_has_nu(csv_path) else 9
    z_col, y_col = (2, 5) if label_col == 10 else (2, 4)
    colors = {"SR": "goldenrod", "NR": "royalblue", "BR": "sea-green", "AMBIGUOUS": "gray50"}
    plot_parts = [
        f"'{csv_path}' using (strcol({label_col}) eq \"{name}\" ? column({z_col}) : NaN):{y_col} "
        f"title '{name}' with points pt 5 ps 0.35 lc rgb '{color}'"
        for name, color in colors.items()
    ]
    body = (
        "# gnuplot script generated alongside the CSV export\n"
        "set datafile separator comma\n"
        f"set title '{title}'\n"
        "set xlabel 'z'\n"
        "set ylabel 'y'\n"
        "set key outside\n"
        "plot \\\n    " + ", \\\n    ".join(plot_parts) + "\n"
    )
    with open(script_path, "w", newline="\n") as fh:
        fh.write(body)
    return str(script_path)


def _csv_has_nu(csv_path: str) -> bool:
    with open(csv_path) as fh:
        header = fh.readline()
    return ",nu," in header
