"""Backward march for the penalized variational system.

Each level solves

    (A + penalty * active-set constraint rows) w = w_prev / dt + boundary data

where A comes from :func:`qviport.operators.assemble_level` and the active
sets are updated by a non-smooth Newton iteration: a constraint row enters
the set when its one-sided residual is strictly negative.  Sets are warm
started from the previous level, and a level whose warm start already
satisfies every residual is accepted without a linear solve.

Matrices are M-matrices by construction, so the march is unconditionally
stable and preserves the discrete comparison principle; systems are solved
directly up to a size cap and by preconditioned Krylov iteration above it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .grid import TransformedGrid, transform_point
from .operators import (
    AssemblyError,
    DampingLog,
    LevelSystem,
    assemble_level,
    boundary_and_terminal_data,
)
from .problem import ProblemSpec

__all__ = [
    "NewtonError",
    "SolverParams",
    "SolveDiagnostics",
    "Solution",
    "MMatrixReport",
    "solve_qvi",
    "m_matrix_check",
    "convergence_study",
    "StudyRow",
]


class NewtonError(RuntimeError):
    """Active-set iteration failed to settle within the iteration cap."""


@dataclass(frozen=True)
class SolverParams:
    """Numerical knobs for the march.

    ``penalty`` defaults to 1e6 / dt so the constraint violation admitted by
    the penalization is three orders below the time-step truncation error.
    ``qvi_tol`` is the residual slack used when classifying regions later;
    when None it is derived from the Newton tolerance at solve time.
    ``envelope_flush`` clips each accepted level to the discrete comparison
    envelope spanned by the previous level and the boundary data, restoring
    bounds (such as nonnegativity) that exact arithmetic would give; any
    excursion beyond ``flush_audit`` times the value scale aborts instead of
    being masked.
    ``direct_limit`` caps direct factorization for three-dimensional levels,
    whose fill-in grows quickly; larger systems switch to the slice-block
    iteration.  Two-dimensional levels stay banded and are always factored
    directly.
    """

    penalty: float | None = None
    newton_tol: float = 1e-8
    newton_max_iter: int = 200
    qvi_tol: float | None = None
    damping: str = "authorized"
    store_taus: tuple = ()
    direct_limit: int = 20_000
    krylov_tol: float = 1e-10
    envelope_flush: bool = True
    flush_audit: float = 1e-6

    def resolved_penalty(self, dt: float) -> float:
        return self.penalty if self.penalty is not None else 1e6 / dt


@dataclass
class SolveDiagnostics:
    newton_iters: list = field(default_factory=list)
    shortcut_levels: int = 0
    damping_count: int = 0
    damping_total: float = 0.0
    damping_max_relative: float = 0.0
    damping_events: list = field(default_factory=list)
    max_constraint_violation: float = 0.0
    flush_deviation: float = 0.0
    wall_time: float = 0.0

    def absorb(self, log: DampingLog):
        self.damping_count += log.count
        self.damping_total += log.total_deficit
        self.damping_max_relative = max(self.damping_max_relative, log.max_relative)
        room = 64 - len(self.damping_events)
        if room > 0:
            self.damping_events.extend(log.sample[:room])


@dataclass
class MMatrixReport:
    shape: tuple
    passed: bool
    n_nonpositive_diag: int
    n_positive_offdiag: int
    n_dominance_fail: int
    worst_offdiag: float
    worst_dominance_gap: float


@dataclass
class StoredLevel:
    tau: float
    w: np.ndarray
    w_prev: np.ndarray
    dt: float
    sell_active: np.ndarray
    buy_active: np.ndarray


@dataclass
class Solution:
    """March output: the final level, any requested intermediate levels,
    and enough per-level state to reconstruct the three residuals."""

    problem: ProblemSpec
    grid: TransformedGrid
    params: SolverParams
    levels: dict
    diagnostics: SolveDiagnostics

    @property
    def w_final(self) -> np.ndarray:
        tau = max(self.levels)
        return self.levels[tau].w

    @property
    def final_tau(self) -> float:
        return max(self.levels)

    def level(self, tau: float) -> StoredLevel:
        for key in self.levels:
            if abs(key - tau) <= 1e-9 * max(1.0, abs(tau)):
                return self.levels[key]
        raise KeyError(f"tau {tau} was not stored; pass it in SolverParams.store_taus")

    def field(self, tau: float | None = None) -> np.ndarray:
        lev = self.level(tau) if tau is not None else self.levels[max(self.levels)]
        return lev.w.reshape(self.grid.nz, self.grid.nv, self.grid.nn)

    def interp_value(self, tau: float, z, v, nu=None) -> np.ndarray:
        """Multilinear interpolation of a stored level."""
        w = self.field(tau)
        g = self.grid
        z = np.asarray(z, dtype=float)
        v = np.asarray(v, dtype=float)
        out_shape = np.broadcast(z, v).shape
        zf = np.broadcast_to(z, out_shape).ravel()
        vf = np.broadcast_to(v, out_shape).ravel()

        def locate(nodes, q):
            i = np.clip(np.searchsorted(nodes, q) - 1, 0, nodes.size - 2)
            t = (q - nodes[i]) / (nodes[i + 1] - nodes[i])
            return i, np.clip(t, 0.0, 1.0)

        iz, tz = locate(g.z_nodes, zf)
        jv, tv = locate(g.v_nodes, vf)
        if g.is_3d:
            if nu is None:
                raise ValueError("nu is required for a stochastic-volatility solve")
            nf = np.broadcast_to(np.asarray(nu, dtype=float), out_shape).ravel()
            kn, tn = locate(g.nu_nodes, nf)
            vals = 0.0
            for dz_ in (0, 1):
                for dv_ in (0, 1):
                    for dn_ in (0, 1):
                        wz = tz if dz_ else 1.0 - tz
                        wv = tv if dv_ else 1.0 - tv
                        wn = tn if dn_ else 1.0 - tn
                        vals = vals + wz * wv * wn * w[iz + dz_, jv + dv_, kn + dn_]
        else:
            w2 = w[:, :, 0]
            vals = (
                (1 - tz) * (1 - tv) * w2[iz, jv]
                + tz * (1 - tv) * w2[iz + 1, jv]
                + (1 - tz) * tv * w2[iz, jv + 1]
                + tz * tv * w2[iz + 1, jv + 1]
            )
        vals = np.asarray(vals).reshape(out_shape)
        return vals if out_shape else float(vals)

    def value_at_state(self, t: float, x: float, y: float, nu: float | None = None) -> float:
        """Value in original coordinates; (T - t) must be a stored level."""
        z, v = transform_point(t, x, y, self.problem.costs, self.problem.horizon)
        return float(self.interp_value(self.problem.horizon - t, z, v, nu))

    def residuals(self, tau: float) -> dict:
        """Marching, sell, and buy residuals of a stored level (zero on
        rows where the respective equation does not apply)."""
        lev = self.level(tau)
        sysm = assemble_level(self.problem, self.grid, lev.tau, lev.dt, damping=self.params.damping)
        r_pde = sysm.A @ lev.w - sysm.rhs(lev.w_prev)
        r_pde[~sysm.interior] = 0.0
        r_sell = sysm.sell_op @ lev.w
        r_sell[~sysm.sell_applicable] = 0.0
        r_buy = sysm.buy_op @ lev.w
        r_buy[~sysm.buy_applicable] = 0.0
        return {
            "pde": r_pde,
            "sell": r_sell,
            "buy": r_buy,
            "sell_applicable": sysm.sell_applicable,
            "buy_applicable": sysm.buy_applicable,
            "interior": sysm.interior,
        }

    def resolved_qvi_tol(self, tau: float | None = None) -> float:
        if self.params.qvi_tol is not None:
            return self.params.qvi_tol
        tau = tau if tau is not None else self.final_tau
        lev = self.level(tau)
        res = self.residuals(tau)
        lam = self.params.resolved_penalty(lev.dt)
        floor_ = 10.0 * self.params.newton_tol / lev.dt
        pde_scale = 10.0 * float(np.abs(res["pde"]).max()) / lam if lam > 0 else 0.0
        return max(floor_, pde_scale, 1e-12)


def m_matrix_check(matrix, tol: float = 1e-12) -> MMatrixReport:
    """Sign and dominance audit: positive diagonal, non-positive
    off-diagonal entries, weak diagonal dominance on every row."""
    if isinstance(matrix, LevelSystem):
        matrix = matrix.A
    a = sparse.csr_matrix(matrix)
    n = a.shape[0]
    diag = a.diagonal()
    bad_diag = int(np.count_nonzero(diag <= 0.0))
    off = sparse.csr_matrix(a - sparse.diags(diag))
    off.eliminate_zeros()
    scale = np.maximum(np.abs(diag), 1.0)
    if off.nnz:
        row_of = np.repeat(np.arange(n), np.diff(off.indptr))
        pos_mask = off.data > tol * scale[row_of]
        n_pos = int(np.count_nonzero(pos_mask))
        worst_off = float(off.data.max()) if off.nnz else 0.0
        abs_row_sum = np.zeros(n)
        np.add.at(abs_row_sum, row_of, np.abs(off.data))
    else:
        n_pos = 0
        worst_off = 0.0
        abs_row_sum = np.zeros(n)
    gap = diag - abs_row_sum
    dom_fail = int(np.count_nonzero(gap < -tol * scale))
    return MMatrixReport(
        shape=a.shape,
        passed=bad_diag == 0 and n_pos == 0 and dom_fail == 0,
        n_nonpositive_diag=bad_diag,
        n_positive_offdiag=n_pos,
        n_dominance_fail=dom_fail,
        worst_offdiag=worst_off,
        worst_dominance_gap=float(gap.min()) if n else 0.0,
    )


def _penalized_matrix(sysm: LevelSystem, lam: float, sell_a: np.ndarray, buy_a: np.ndarray):
    mat = sysm.A
    if sell_a.any():
        mat = mat + lam * sparse.diags(sell_a.astype(float)) @ sysm.sell_op
    if buy_a.any():
        mat = mat + lam * sparse.diags(buy_a.astype(float)) @ sysm.buy_op
    return mat.tocsc()

def _semismooth_residual(sysm, w, rhs, lam):
    rs = sysm.sell_op @ w
    rb = sysm.buy_op @ w
    rs = np.where(sysm.sell_applicable, rs, 0.0)
    rb = np.where(sysm.buy_applicable, rb, 0.0)
    g = sysm.A @ w - rhs + lam * np.minimum(rs, 0.0) + lam * np.minimum(rb, 0.0)
    return g, rs, rb


class _LevelSolver:
    """Linear-solve strategy for one level.

    Below the size cap every system is factored directly with one step of
    iterative refinement.  Above it (three-dimensional solves) the system is
    solved by block-Jacobi Richardson iteration over the volatility-state
    slices: trades never move the state, so the penalty terms and every
    stiff 1/tau-scaled coefficient sit inside the per-slice two-dimensional
    blocks, which are factored exactly, while the coupling between slices
    (state diffusion, reversion drift, correlation cross terms) is weak.
    The splitting is regular for this matrix class, so the iteration
    contracts whenever the block factors match the current matrix; slices
    touched by an active-set change are refactored before the next solve.
    """

    def __init__(self, params: SolverParams, n: int, nn: int = 1):
        self.params = params
        self.direct = nn < 2 or n <= params.direct_limit
        self.n = n
        self.nn = nn
        self._lus = None
        self._dirty = None
        if not self.direct and n % nn:
            raise AssemblyError("slice-block iteration needs equal-size state slices")

    def _refresh(self, mat: sparse.csc_matrix, slices):
        csr = mat.tocsr()
        if self._lus is None:
            self._lus = [None] * self.nn
            slices = range(self.nn)
        for k in slices:
            self._lus[k] = spla.splu(csr[k::self.nn, k::self.nn].tocsc())
        self._dirty = set()

    def _apply_blocks(self, r: np.ndarray) -> np.ndarray:
        out = np.empty_like(r)
        for k, lu in enumerate(self._lus):
            out[k::self.nn] = lu.solve(r[k::self.nn])
        return out

    def note_changes(self, changed: np.ndarray):
        if self.direct or not changed.any():
            return
        dirty = set(np.unique(np.flatnonzero(changed) % self.nn).tolist())
        self._dirty = dirty if self._dirty is None else (self._dirty | dirty)

    def solve(self, mat: sparse.csc_matrix, rhs: np.ndarray, x0=None) -> np.ndarray:
        if self.direct:
            lu = spla.splu(mat)
            x = lu.solve(rhs)
            # one refinement step keeps the algebraic error well below the
            # discrete comparison envelope used by the post-solve flush
            x += lu.solve(rhs - mat @ x)
            return x
        if self._lus is None or self._dirty:
            self._refresh(mat, sorted(self._dirty or ()))
        x = np.zeros_like(rhs) if x0 is None else x0.copy()
        scale = float(np.abs(rhs).max()) or 1.0
        # the defect of the huge penalized rows carries cancellation noise
        # proportional to the row magnitude; converging below that floor is
        # not possible in this arithmetic
        amp = float((abs(mat) @ np.abs(x)).max()) if x0 is not None else scale
        noise_floor = 64.0 * np.finfo(float).eps * max(amp, scale)
        target = max(self.params.krylov_tol * scale, noise_floor)
        best = math.inf
        refreshed = False
        for _ in range(60):
            defect = rhs - mat @ x
            dn = float(np.abs(defect).max())
            if dn <= target:
                return x
            if dn > 4.0 * best:
                # contraction lost: the factors no longer match the matrix
                if refreshed:
                    break
                self._refresh(mat, range(self.nn))
                refreshed = True
            best = min(best, dn)
            x = x + self._apply_blocks(defect)
        raise NewtonError(
            f"linear solve stalled at defect {best:.3e} "
            f"(target {target:.3e}) on the slice-block iteration"
        )


def solve_qvi(problem: ProblemSpec, grid: TransformedGrid, params: SolverParams | None = None) -> Solution:
    """March the penalized system from the terminal payoff to the full
    horizon, storing the final level and every level listed in
    ``params.store_taus``."""
    params = params or SolverParams()
    t0 = time.perf_counter()
    data = boundary_and_terminal_data(problem, grid)
    w = data.seed.copy()
    n = w.size
    diag = SolveDiagnostics()
    store = {float(t) for t in params.store_taus}
    levels: dict[float, StoredLevel] = {}
    dt = grid.dt
    sell_active = np.zeros(n, dtype=bool)
    buy_active = np.zeros(n, dtype=bool)

    for tau in grid.tau_levels:
        sysm = assemble_level(problem, grid, tau, dt, damping=params.damping)
        diag.absorb(sysm.damping)
        lam = params.resolved_penalty(dt)
        rhs = sysm.rhs(w)
        w_prev = w

        g0, rs, rb = _semismooth_residual(sysm, w, rhs, lam)
        if float(np.abs(dt * g0).max()) <= params.newton_tol and np.allclose(
            w[sysm.dirichlet], sysm.dirichlet_values[sysm.dirichlet], rtol=0.0, atol=params.newton_tol
        ):
            diag.shortcut_levels += 1
            diag.newton_iters.append(0)
            sell_active = sysm.sell_applicable & (rs < 0.0)
            buy_active = sysm.buy_applicable & (rb < 0.0)
        else:
            lin = _LevelSolver(params, n, grid.nn)
            sell_active &= sysm.sell_applicable
            buy_active &= sysm.buy_applicable
            converged = False
            stationary_runs = 0
            for it in range(1, params.newton_max_iter + 1):
                mat = _penalized_matrix(sysm, lam, sell_active, buy_active)
                w_new = lin.solve(mat, rhs, x0=w)
                g, rs, rb = _semismooth_residual(sysm, w_new, rhs, lam)
                new_sell = sysm.sell_applicable & (rs < 0.0)
                new_buy = sysm.buy_applicable & (rb < 0.0)
                same = bool(np.array_equal(new_sell, sell_active) and np.array_equal(new_buy, buy_active))
                lin.note_changes((new_sell ^ sell_active) | (new_buy ^ buy_active))
                sell_active, buy_active = new_sell, new_buy
                scale = max(1.0, float(np.abs(w_new).max()))
                change = float(np.abs(w_new - w).max())
                w = w_new
                # a node sitting exactly on the free boundary may re-enter
                # and leave the set forever on sign noise while the iterate
                # no longer moves; the penalized rows are satisfied either
                # way, so stationarity across two consecutive set updates is
                # the meaningful exit
                stationary_runs = (
                    stationary_runs + 1
                    if change <= max(params.newton_tol, 1.0 / (lam * dt)) * scale
                    else 0
                )
                if same and float(np.abs(dt * g).max()) <= params.newton_tol:
                    converged = True
                elif stationary_runs >= 2:
                    converged = True
                if converged:
                    diag.newton_iters.append(it)
                    break
            if not converged:
                raise NewtonError(
                    f"active sets did not settle at tau={tau:.6g} within "
                    f"{params.newton_max_iter} iterations"
                )
        viol = max(
            -float(np.minimum(rs, 0.0).min(initial=0.0)),
            -float(np.minimum(rb, 0.0).min(initial=0.0)),
        )
        diag.max_constraint_violation = max(diag.max_constraint_violation, viol)

        if params.envelope_flush:
            # the exact discrete solution is a weighted average of the
            # previous level and the boundary data (M-matrix rows sum to
            # 1/dt), so values outside that envelope are algebraic noise;
            # clip them back and fail loudly if the excursion is too large
            # to be noise
            bd = sysm.dirichlet_values[sysm.dirichlet]
            lo = float(w_prev.min())
            hi = float(w_prev.max())
            if bd.size:
                lo = min(lo, float(bd.min()))
                hi = max(hi, float(bd.max()))
            dev = max(lo - float(w.min()), float(w.max()) - hi, 0.0)
            if dev > 0.0:
                scale = max(1.0, abs(lo), abs(hi))
                if dev > params.flush_audit * scale:
                    raise NewtonError(
                        f"solution left the comparison envelope by {dev:.3e} "
                        f"at tau={tau:.6g}; this exceeds algebraic noise"
                    )
                diag.flush_deviation = max(diag.flush_deviation, dev)
                w = np.clip(w, lo, hi)

        keep = any(abs(tau - t) <= 1e-9 * max(1.0, t) for t in store) or abs(
            tau - grid.tau_levels[-1]
        ) <= 1e-12
        if keep:
            levels[float(tau)] = StoredLevel(
                tau=float(tau),
                w=w.copy(),
                w_prev=w_prev.copy(),
                dt=dt,
                sell_active=sell_active.copy(),
                buy_active=buy_active.copy(),
            )

    diag.wall_time = time.perf_counter() - t0
    return Solution(problem=problem, grid=grid, params=params, levels=levels, diagnostics=diag)


@dataclass
class StudyRow:
    label: str
    parameter: float
    values: tuple
    diff: float | None
    ratio: float | None


def convergence_study(
    problem: ProblemSpec,
    probes: list,
    grids: list | None = None,
    penalties: list | None = None,
    base_grid: TransformedGrid | None = None,
    params: SolverParams | None = None,
) -> list:
    """Refinement table: solve along a ladder of grids or penalties and
    report probe values, successive sup-differences, and their ratios.

    Probes are (z, v) pairs (or (z, v, nu) triples) evaluated at the final
    level of each solve.
    """
    params = params or SolverParams()
    runs = []
    if (grids is None) == (penalties is None):
        raise ValueError("pass exactly one of grids or penalties")
    if grids is not None:
        for g in grids:
            sol = solve_qvi(problem, g, params)
            runs.append(("n_z=%d,n_v=%d" % (g.nz, g.nv), float(g.nz * g.nv * g.nn), sol))
    else:
        if base_grid is None:
            raise ValueError("penalty ladder needs base_grid")
        for lam in penalties:
            p = replace(params, penalty=float(lam))
            sol = solve_qvi(problem, base_grid, p)
            runs.append((f"penalty={lam:.3g}", float(lam), sol))

    rows: list[StudyRow] = []
    prev_vals = None
    prev_diff = None
    for label, parameter, sol in runs:
        tau = sol.final_tau
        vals = []
        for pt in probes:
            if len(pt) == 3:
                vals.append(float(sol.interp_value(tau, pt[0], pt[1], pt[2])))
            else:
                vals.append(float(sol.interp_value(tau, pt[0], pt[1])))
        vals = tuple(vals)
        diff = None
        ratio = None
        if prev_vals is not None:
            diff = max(abs(a - b) for a, b in zip(vals, prev_vals))
            if prev_diff not in (None, 0.0) and diff > 0.0:
                ratio = prev_diff / diff
        rows.append(StudyRow(label=label, parameter=parameter, values=vals, diff=diff, ratio=ratio))
        prev_vals = vals
        prev_diff = diff if diff is not None else prev_diff
    return rows
