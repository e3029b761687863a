"""Assembly of the implicit marching system in compressed coordinates.

For a level at time-to-maturity tau the generator acting on W(z, v[, nu]) is

    L W = g (W_vv + 2 b W_zv + b^2 W_zz)
        + 0.5 zeta^2 W_nunu + rho sigma zeta v b W_znu + rho sigma zeta v W_vnu
        + eta (1+theta) v / sqrt(tau) W_z + (eta - 1/(2 tau)) v W_v
        + kappa (nu_bar - nu) W_nu,

with g = 0.5 sigma^2 v^2 and b = (1+theta)/sqrt(tau); theta is -theta1 on
the long side (v > 0) and +theta2 on the short side.  The marching matrix is
A = I/dt - L with second derivatives central, first derivatives upwinded,
and every mixed derivative split into the two one-sided corner products with
the matching sign.  A corner product can only take as much weight as the
already-assembled axis entries allow without flipping their sign; whatever
cannot be placed is dropped and recorded as a damping event, so the emitted
matrix is an M-matrix by construction.

Gradient-constraint residual operators (sell / buy directions) use the
one-sided differences pointing along the respective trade, which keeps the
penalized Newton matrix inside the same M-matrix class for any active set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .analytic import riccati_abc
from .grid import TransformedGrid
from .problem import BoundaryKind, ProblemSpec

__all__ = [
    "AssemblyError",
    "DampingLog",
    "LevelSystem",
    "StencilRow",
    "BoundaryData",
    "assemble_level",
    "boundary_and_terminal_data",
    "operator_stencil",
]


class AssemblyError(RuntimeError):
    """Raised when a valid marching matrix cannot be produced."""


@dataclass
class DampingLog:
    """Cross-term weight that could not be represented monotonically."""

    count: int = 0
    total_deficit: float = 0.0
    max_relative: float = 0.0
    sample: list[tuple[str, int, float, float]] = field(default_factory=list)

    def record(self, term: str, flat_idx: np.ndarray, deficit: np.ndarray, wanted: np.ndarray):
        hit = deficit > 1e-14 * np.maximum(wanted, 1e-300)
        n = int(np.count_nonzero(hit))
        if n == 0:
            return
        self.count += n
        self.total_deficit += float(deficit[hit].sum())
        rel = deficit[hit] / np.maximum(wanted[hit], 1e-300)
        self.max_relative = max(self.max_relative, float(rel.max()))
        take = min(5, n)
        order = np.argsort(rel)[::-1][:take]
        idxs = flat_idx[hit][order]
        for i, r, w in zip(idxs, rel[order], wanted[hit][order]):
            if len(self.sample) < 32:
                self.sample.append((term, int(i), float(r), float(w)))


@dataclass
class LevelSystem:
    """One assembled time level: marching matrix, constraint operators,
    node masks, Dirichlet data, and the damping record."""

    tau: float
    dt: float
    A: sparse.csr_matrix
    sell_op: sparse.csr_matrix
    buy_op: sparse.csr_matrix
    interior: np.ndarray
    sell_applicable: np.ndarray
    buy_applicable: np.ndarray
    dirichlet: np.ndarray
    dirichlet_values: np.ndarray
    damping: DampingLog
    coeffs: dict | None = None

    def rhs(self, w_prev: np.ndarray) -> np.ndarray:
        out = np.where(self.interior, w_prev / self.dt, 0.0)
        out[self.dirichlet] = self.dirichlet_values[self.dirichlet]
        return out


@dataclass
class StencilRow:
    """Inspectable single row of the assembled level."""

    node: tuple
    tau: float
    coefficients: dict
    entries: list
    sell_entries: list
    buy_entries: list
    m_ok: bool


@dataclass
class BoundaryData:
    """Terminal seed plus level-dependent Dirichlet values."""

    seed: np.ndarray
    dirichlet: np.ndarray
    values_at: "callable"


def _theta_of_v(v: np.ndarray, costs) -> np.ndarray:
    # the long-side branch also covers v == 0; no second-order term survives there
    return np.where(v < 0.0, costs.theta2, -costs.theta1)


def _spacings(nodes: np.ndarray):
    d = np.diff(nodes)
    h_m = np.concatenate([[np.nan], d])
    h_p = np.concatenate([d, [np.nan]])
    return h_m, h_p


def _boundary_value_grid(problem: ProblemSpec, grid: TransformedGrid, tau: float) -> np.ndarray:
    """Full-lattice array holding Dirichlet values where defined (zeros
    elsewhere); the mask itself is produced by the assembly."""
    nz, nv, nn = grid.nz, grid.nv, grid.nn
    z = grid.z_nodes
    out = np.zeros((nz, nv, nn))
    u = problem.utility

    if problem.boundary == BoundaryKind.CUSTOM:
        zz = z[:, None, None]
        vv = grid.v_nodes[None, :, None]
        if grid.is_3d:
            uu = grid.nu_nodes[None, None, :]
            out[:] = problem.custom_dirichlet(tau, zz, vv, uu)
        else:
            out[:] = problem.custom_dirichlet(tau, zz, vv)
        return out

    out[0, :, :] = u.value(z[0])
    if problem.boundary == BoundaryKind.GOAL:
        zbar = problem.goal_level
        lo = u.value(z[0])
        hi = u.value(zbar)
        envelope = lo + (hi - lo) * np.clip((z - z[0]) / (zbar - z[0]), 0.0, 1.0)
        out[-1, :, :] = u.value(z[-1])
        out[:, 0, :] = envelope[:, None]
        out[:, -1, :] = envelope[:, None]
        if not problem.short_sale:
            out[:, 0, :] = 0.0  # v = 0 row is interior when shorting is off
        return out

    # POWER_FAR_FIELD: top-branch frictionless value at z_max
    top = u.branches[-1]
    if top.reflected:
        raise AssemblyError("top utility branch must be non-reflected for the far-field value")
    zmax = z[-1]
    base = max(zmax - top.shift, 0.0)
    if top.coeff == 0.0:
        out[-1, :, :] = top.const
        return out
    pexp = top.exponent
    if grid.is_3d:
        if not (0.0 < pexp < 1.0):
            raise AssemblyError("far-field factor needs a power exponent in (0, 1)")
        a, b, c = riccati_abc(problem.model, pexp, tau, step_hint=problem.horizon / 2000.0)
        nu = grid.nu_nodes
        factor = np.exp(a * nu * nu + b * nu + c)
        out[-1, :, :] = top.const + top.coeff * base**pexp * factor[None, :]
    else:
        eta = problem.model.eta
        if eta == 0.0:
            factor = 1.0
        else:
            if not (0.0 < pexp < 1.0):
                raise AssemblyError("far-field factor needs a power exponent in (0, 1)")
            factor = math.exp(pexp * eta * eta * tau / (2.0 * (1.0 - pexp) * problem.model.sigma**2))
        out[-1, :, :] = top.const + top.coeff * base**pexp * factor
    return out


def boundary_and_terminal_data(problem: ProblemSpec, grid: TransformedGrid) -> BoundaryData:
    """Terminal seed W = U(z) on every stock row, plus the Dirichlet-value
    callable used by the march (evaluated at each new level)."""
    nz, nv, nn = grid.nz, grid.nv, grid.nn
    seed = np.repeat(problem.utility.values(grid.z_nodes)[:, None], nv * nn, axis=1)
    seed = seed.reshape(nz, nv, nn).ravel()

    dirichlet = np.zeros((nz, nv, nn), dtype=bool)
    dirichlet[0, :, :] = True
    dirichlet[-1, :, :] = True
    if problem.boundary in (BoundaryKind.GOAL, BoundaryKind.CUSTOM):
        dirichlet[:, -1, :] = True
        if problem.short_sale:
            dirichlet[:, 0, :] = True

    def values_at(tau: float) -> np.ndarray:
        return _boundary_value_grid(problem, grid, tau).ravel()

    return BoundaryData(seed=seed, dirichlet=dirichlet.ravel(), values_at=values_at)


def assemble_level(
    problem: ProblemSpec,
    grid: TransformedGrid,
    tau: float,
    dt: float,
    keep_coeffs: bool = False,
    damping: str = "authorized",
) -> LevelSystem:
    """Build the implicit system for one level.

    ``damping`` policy: "authorized" drops unrepresentable cross weight and
    logs it; "strict" raises :class:`AssemblyError` instead; "off" keeps the
    plain symmetric split even where it breaks the matrix class.
    """
    if damping not in ("authorized", "strict", "off"):
        raise ValueError("damping must be 'authorized', 'strict', or 'off'")
    if not (tau > 0.0 and dt > 0.0):
        raise ValueError("tau and dt must be positive")
    model, costs = problem.model, problem.costs
    nz, nv, nn = grid.nz, grid.nv, grid.nn
    n = nz * nv * nn
    shape3 = (nz, nv, nn)
    sq = math.sqrt(tau)

    hz_m, hz_p = _spacings(grid.z_nodes)
    hv_m, hv_p = _spacings(grid.v_nodes)
    HZ_M = hz_m[:, None, None]
    HZ_P = hz_p[:, None, None]
    HV_M = hv_m[None, :, None]
    HV_P = hv_p[None, :, None]

    v = grid.v_nodes[None, :, None]
    theta = _theta_of_v(v, costs)
    sigma = model.sigma
    gamma = 0.5 * sigma * sigma * v * v
    beta = (1.0 + theta) / sq

    if grid.is_3d:
        nu = grid.nu_nodes[None, None, :]
        eta = sigma * nu
        hn_m, hn_p = _spacings(grid.nu_nodes)
        HN_M = hn_m[None, None, :]
        HN_P = hn_p[None, None, :]
        dnn = np.full(shape3, 0.5 * model.zeta**2)
        czn = model.rho * sigma * model.zeta * v * beta
        cvn = model.rho * sigma * model.zeta * v * np.ones(shape3)
        bn = model.kappa * (model.nu_bar - nu) * np.ones(shape3)
        nu_edge = np.zeros(shape3, dtype=bool)
        nu_edge[:, :, 0] = True
        nu_edge[:, :, -1] = True
        dnn[nu_edge] = 0.0
        czn = np.where(nu_edge, 0.0, czn)
        cvn = np.where(nu_edge, 0.0, cvn)
    else:
        eta = model.eta

    dzz = gamma * beta * beta * np.ones(shape3)
    dvv = gamma * np.ones(shape3)
    czv = 2.0 * gamma * beta * np.ones(shape3)
    bz = eta * (1.0 + theta) * v / sq * np.ones(shape3)
    bv = (eta - 0.5 / tau) * v * np.ones(shape3)

    data = boundary_and_terminal_data(problem, grid)
    dirichlet = data.dirichlet.reshape(shape3)
    interior = ~dirichlet
    if problem.boundary == BoundaryKind.POWER_FAR_FIELD:
        neumann = np.zeros(shape3, dtype=bool)
        if problem.short_sale:
            neumann[:, 0, :] = True  # without shorting, v = 0 stays interior
        neumann[:, -1, :] = True
        neumann &= interior
        interior = interior & ~neumann
    else:
        neumann = np.zeros(shape3, dtype=bool)

    # neighbor offsets in the flat C-order layout
    oz, ov, on = nv * nn, nn, 1
    off_keys = {"z+": oz, "z-": -oz, "v+": ov, "v-": -ov}
    if grid.is_3d:
        off_keys.update({"n+": on, "n-": -on})

    OFF = {k: np.zeros(shape3) for k in off_keys}

    def accumulate(key, w):
        # sanitize per term: a NaN from a missing neighbor spacing must not
        # poison weight already accumulated from other terms
        OFF[key] += np.where(np.isfinite(w), w, 0.0)

    def add_second(d, h_m, h_p, key_m, key_p):
        denom = h_m + h_p
        accumulate(key_m, 2.0 * d / (h_m * denom))
        accumulate(key_p, 2.0 * d / (h_p * denom))

    def add_first(b, h_m, h_p, key_m, key_p):
        pos = b > 0.0
        accumulate(key_p, np.where(pos, b / h_p, 0.0))
        accumulate(key_m, np.where(~pos, -b / h_m, 0.0))

    with np.errstate(invalid="ignore", divide="ignore"):
        add_second(dzz, HZ_M, HZ_P, "z-", "z+")
        add_second(dvv, HV_M, HV_P, "v-", "v+")
        add_first(bz, HZ_M, HZ_P, "z-", "z+")
        add_first(bv, HV_M, HV_P, "v-", "v+")
        if grid.is_3d:
            add_second(dnn, HN_M, HN_P, "n-", "n+")
            add_first(bn, HN_M, HN_P, "n-", "n+")

    for k in OFF:
        OFF[k] = np.where(np.isfinite(OFF[k]), OFF[k], 0.0)
        OFF[k][~interior] = 0.0

    diag_L = -sum(OFF.values())
    corner: dict[tuple[int, int], np.ndarray] = {}
    log = DampingLog()
    flat_index = np.arange(n).reshape(shape3)

    def place_cross(term, c, key1_pair, key2_pair, h1_m, h1_p, h2_m, h2_p):
        """Split c * d2/(d1 d2) into the two corner products matching
        sign(c); weight beyond the axis budgets is dropped and logged."""
        nonlocal diag_L
        k1m, k1p = key1_pair
        k2m, k2p = key2_pair
        cpos = np.where(interior, np.maximum(c, 0.0), 0.0)
        cneg = np.where(interior, np.maximum(-c, 0.0), 0.0)

        def alloc(cabs, corners):
            nonlocal diag_L
            # corners: ((keyA1, keyA2, hA1, hA2, offA), (keyB1, keyB2, hB1, hB2, offB))
            (a1, a2, ha1, ha2, offa), (b1, b2, hb1, hb2, offb) = corners
            wanted_a = 0.5 * cabs / (ha1 * ha2)
            wanted_b = 0.5 * cabs / (hb1 * hb2)
            cap_a = np.minimum(OFF[a1], OFF[a2])
            cap_b = np.minimum(OFF[b1], OFF[b2])
            qa = np.minimum(wanted_a, cap_a)
            qb = np.minimum(wanted_b, cap_b)
            if damping != "off":
                leftover = cabs - qa * ha1 * ha2 - qb * hb1 * hb2
                extra_a = np.minimum(cap_a - qa, leftover / (ha1 * ha2))
                qa = qa + np.maximum(extra_a, 0.0)
                leftover = leftover - np.maximum(extra_a, 0.0) * ha1 * ha2
                extra_b = np.minimum(cap_b - qb, np.maximum(leftover, 0.0) / (hb1 * hb2))
                qb = qb + np.maximum(extra_b, 0.0)
                leftover = leftover - np.maximum(extra_b, 0.0) * hb1 * hb2
            else:
                qa, qb = wanted_a, wanted_b
                leftover = np.zeros_like(cabs)
            qa = np.where(np.isfinite(qa), qa, 0.0)
            qb = np.where(np.isfinite(qb), qb, 0.0)
            leftover = np.where(np.isfinite(leftover), np.maximum(leftover, 0.0), 0.0)
            for (kk1, kk2, q, offc) in ((a1, a2, qa, offa), (b1, b2, qb, offb)):
                OFF[kk1] -= q
                OFF[kk2] -= q
                key = offc
                if key not in corner:
                    corner[key] = np.zeros(shape3)
                corner[key] += q
                diag_L += q
            if damping != "off":
                np.maximum(OFF[a1], 0.0, out=OFF[a1])
                np.maximum(OFF[a2], 0.0, out=OFF[a2])
                np.maximum(OFF[b1], 0.0, out=OFF[b1])
                np.maximum(OFF[b2], 0.0, out=OFF[b2])
            return leftover

        o1 = off_keys[key1_pair[1]]
        o2 = off_keys[key2_pair[1]]
        with np.errstate(invalid="ignore", divide="ignore"):
            left_pos = alloc(
                cpos,
                (
                    (k1p, k2p, h1_p, h2_p, o1 + o2),
                    (k1m, k2m, h1_m, h2_m, -o1 - o2),
                ),
            )
            left_neg = alloc(
                cneg,
                (
                    (k1p, k2m, h1_p, h2_m, o1 - o2),
                    (k1m, k2p, h1_m, h2_p, -o1 + o2),
                ),
            )
        deficit = (left_pos + left_neg).ravel()
        wanted = np.abs(np.where(interior, c, 0.0)).ravel()
        if damping == "strict" and np.any(deficit > 1e-14 * np.maximum(wanted, 1e-300)):
            bad = int(np.argmax(deficit))
            raise AssemblyError(
                f"cross term {term} cannot be represented monotonically at node "
                f"{np.unravel_index(bad, shape3)} (deficit {deficit[bad]:.3g}); "
                "damping is not authorized"
            )
        if damping == "authorized":
            log.record(term, np.arange(n), deficit, wanted)

    place_cross("zv", czv, ("z-", "z+"), ("v-", "v+"), HZ_M, HZ_P, HV_M, HV_P)
    if grid.is_3d:
        place_cross("zn", czn, ("z-", "z+"), ("n-", "n+"), HZ_M, HZ_P, HN_M, HN_P)
        place_cross("vn", cvn, ("v-", "v+"), ("n-", "n+"), HV_M, HV_P, HN_M, HN_P)

    # ---- emit A = I/dt - L ----
    rows, cols, vals = [], [], []
    flat = flat_index.ravel()
    interior_f = interior.ravel()

    diag_A = np.where(interior_f, 1.0 / dt - diag_L.ravel(), 1.0)
    rows.append(flat)
    cols.append(flat)
    vals.append(diag_A)

    for key, offset in off_keys.items():
        w = OFF[key].ravel()
        m = interior_f & (w != 0.0)
        if np.any(m):
            rows.append(flat[m])
            cols.append(flat[m] + offset)
            vals.append(-w[m])
    for offset, w in corner.items():
        wf = w.ravel()
        m = interior_f & (wf != 0.0)
        if np.any(m):
            rows.append(flat[m])
            cols.append(flat[m] + offset)
            vals.append(-wf[m])

    neumann_f = neumann.ravel()
    if np.any(neumann_f):
        jv0_rows = flat_index[:, 0, :].ravel()
        jv0_rows = jv0_rows[neumann_f[jv0_rows]]
        rows.append(jv0_rows)
        cols.append(jv0_rows + ov)
        vals.append(np.full(jv0_rows.size, -1.0))
        jvl_rows = flat_index[:, -1, :].ravel()
        jvl_rows = jvl_rows[neumann_f[jvl_rows]]
        rows.append(jvl_rows)
        cols.append(jvl_rows - ov)
        vals.append(np.full(jvl_rows.size, -1.0))

    A = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()

    # ---- constraint residual operators ----
    cth = costs.round_trip
    v3 = v * np.ones(shape3)
    sell_app = interior.copy()
    buy_app = interior.copy()
    if not problem.short_sale:
        sell_app &= v3 > 0.0

    sr, sc, sv = [], [], []
    pos_side = (v3 > 0.0) & sell_app
    other = (v3 <= 0.0) & sell_app
    with np.errstate(invalid="ignore", divide="ignore"):
        inv_hv_m = np.where(np.isfinite(1.0 / HV_M), 1.0 / HV_M, 0.0) * np.ones(shape3)
        inv_hz_m = np.where(np.isfinite(1.0 / HZ_M), 1.0 / HZ_M, 0.0) * np.ones(shape3)
        inv_hv_p = np.where(np.isfinite(1.0 / HV_P), 1.0 / HV_P, 0.0) * np.ones(shape3)
    m = pos_side.ravel()
    if np.any(m):
        sr += [flat[m], flat[m]]
        sc += [flat[m], flat[m] - ov]
        sv += [inv_hv_m.ravel()[m], -inv_hv_m.ravel()[m]]
    m = other.ravel()
    if np.any(m):
        dz = cth * inv_hz_m.ravel()[m]
        dv = sq * inv_hv_m.ravel()[m]
        sr += [flat[m], flat[m], flat[m], flat[m]]
        sc += [flat[m], flat[m] - oz, flat[m], flat[m] - ov]
        sv += [dz, -dz, dv, -dv]
    sell_op = sparse.coo_matrix(
        (np.concatenate(sv), (np.concatenate(sr), np.concatenate(sc))), shape=(n, n)
    ).tocsr() if sv else sparse.csr_matrix((n, n))

    br_, bc_, bv_ = [], [], []
    nonneg = (v3 >= 0.0) & buy_app
    neg = (v3 < 0.0) & buy_app
    m = nonneg.ravel()
    if np.any(m):
        dz = cth * inv_hz_m.ravel()[m]
        dv = sq * inv_hv_p.ravel()[m]
        br_ += [flat[m], flat[m], flat[m], flat[m]]
        bc_ += [flat[m], flat[m] - oz, flat[m], flat[m] + ov]
        bv_ += [dz, -dz, dv, -dv]
    m = neg.ravel()
    if np.any(m):
        br_ += [flat[m], flat[m]]
        bc_ += [flat[m], flat[m] + ov]
        bv_ += [inv_hv_p.ravel()[m], -inv_hv_p.ravel()[m]]
    buy_op = sparse.coo_matrix(
        (np.concatenate(bv_), (np.concatenate(br_), np.concatenate(bc_))), shape=(n, n)
    ).tocsr() if bv_ else sparse.csr_matrix((n, n))

    coeffs = None
    if keep_coeffs:
        coeffs = {
            "w_zz": dzz,
            "w_zv": czv,
            "w_vv": dvv,
            "w_z": bz,
            "w_v": bv,
        }
        if grid.is_3d:
            coeffs.update({"w_nunu": dnn, "w_znu": czn, "w_vnu": cvn, "w_nu": bn})

    return LevelSystem(
        tau=tau,
        dt=dt,
        A=A,
        sell_op=sell_op,
        buy_op=buy_op,
        interior=interior_f,
        sell_applicable=sell_app.ravel(),
        buy_applicable=buy_app.ravel(),
        dirichlet=data.dirichlet,
        dirichlet_values=data.values_at(tau),
        damping=log,
        coeffs=coeffs,
    )


def operator_stencil(
    problem: ProblemSpec,
    grid: TransformedGrid,
    tau: float,
    dt: float,
    node: tuple,
) -> StencilRow:
    """Assemble the level and extract one row with its analytic coefficients
    and the constraint-operator rows at the same node."""
    sysm = assemble_level(problem, grid, tau, dt, keep_coeffs=True)
    if grid.is_3d:
        iz, jv, kn = node
    else:
        iz, jv = node[0], node[1]
        kn = 0
    i = (iz * grid.nv + jv) * grid.nn + kn

    def row_entries(mat):
        row = mat.getrow(i).tocoo()
        out = []
        for j, val in zip(row.col, row.data):
            kn_j = j % grid.nn
            jv_j = (j // grid.nn) % grid.nv
            iz_j = j // (grid.nn * grid.nv)
            key = (iz_j, jv_j, kn_j) if grid.is_3d else (iz_j, jv_j)
            out.append((key, float(val)))
        return sorted(out)

    coeffs = {k: float(arr[iz, jv, kn]) for k, arr in sysm.coeffs.items()}
    entries = row_entries(sysm.A)
    diag = dict(entries).get((iz, jv, kn) if grid.is_3d else (iz, jv), 0.0)
    off_sum = sum(abs(val) for key, val in entries) - abs(diag)
    m_ok = diag > 0.0 and all(
        val <= 1e-12 * abs(diag)
        for key, val in entries
        if key != ((iz, jv, kn) if grid.is_3d else (iz, jv))
    ) and diag + 1e-9 * abs(diag) >= off_sum
    return StencilRow(
        node=(iz, jv, kn) if grid.is_3d else (iz, jv),
        tau=tau,
        coefficients=coeffs,
        entries=entries,
        sell_entries=row_entries(sysm.sell_op),
        buy_entries=row_entries(sysm.buy_op),
        m_ok=bool(m_ok),
    )
