"""Brute-force clearing oracles on a shared quantity lattice.

The welfare oracle enumerates each prosumer's feasible grid and runs an exact
dynamic program over aggregate-trade lattice states with trade-balance
filtering, so the reported optimum is exact for the discretized economy.  The
dual oracle minimizes the same economy's dual over prices.  Non-convexity is
measured as the largest gap between a value function and its concave envelope
on the grid, which is what bounds the duality gap of the aggregate problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial._qhull import QhullError

from .errors import FeasibilityError, OracleBudgetError
from .market import MarketInstance, as_price_vector
from .prosumers import ProsumerModel

__all__ = [
    "PrimalResult",
    "DualOracleResult",
    "Theorem1Report",
    "solve_balanced_max",
    "primal_oracle",
    "dual_oracle",
    "grid_best_responses",
    "nonconvexity",
    "check_theorem1",
]

TRANSITION_BUDGET = 5e8


@dataclass(frozen=True)
class PrimalResult:
    value: float
    allocation: np.ndarray  # (n, m), rows are the chosen grid packages


@dataclass(frozen=True)
class DualOracleResult:
    value: float
    prices: np.ndarray
    mode: str  # "grid" | "subgradient"
    tolerance: float


@dataclass(frozen=True)
class Theorem1Report:
    primal: float
    dual: float
    gap: float
    bound: float
    tolerance: float
    holds: bool
    nonconvexities: tuple
    rho_dual: float
    rho_dual_is_absolute: bool


# -- exact balanced welfare maximization -------------------------------------------


def _lattice_step(point_sets) -> float:
    """Common lattice step: the coarsest h that all coordinates are multiples of."""
    vals = np.abs(np.concatenate([pts.ravel() for pts, _ in point_sets]))
    vals = vals[vals > 1e-12]
    if len(vals) == 0:
        return 1.0
    for h in (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125):
        scaled = vals / h
        if np.allclose(scaled, np.round(scaled), atol=1e-9):
            return h
    raise OracleBudgetError("grid points do not share a usable lattice")


def solve_balanced_max(point_sets, budget: float = TRANSITION_BUDGET):
    """Maximize the summed score over one point per participant, subject to
    the points summing to zero componentwise.

    ``point_sets`` is a list of (points (N_i, m), scores (N_i,)).  Returns
    (best total score, chosen index per participant).  Exact integer-lattice
    dynamic program with suffix-reachability pruning.
    """
    h = _lattice_step(point_sets)
    ints = [np.round(pts / h).astype(np.int64) for pts, _ in point_sets]
    scores = [np.asarray(s, dtype=float) for _, s in point_sets]
    n = len(ints)
    m = ints[0].shape[1]

    suffix_lo = np.zeros((n + 1, m), dtype=np.int64)
    suffix_hi = np.zeros((n + 1, m), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        suffix_lo[i] = suffix_lo[i + 1] + ints[i].min(axis=0)
        suffix_hi[i] = suffix_hi[i + 1] + ints[i].max(axis=0)

    states = np.zeros((1, m), dtype=np.int64)
    values = np.zeros(1)
    stage_states, stage_values = [], []
    transitions = 0
    for i in range(n):
        transitions += len(states) * len(ints[i])
        if transitions > budget:
            raise OracleBudgetError(
                f"balanced-max dynamic program exceeds {budget:.3g} transitions"
            )
        cand = states[:, None, :] + ints[i][None, :, :]
        cand_vals = values[:, None] + scores[i][None, :]
        cand = cand.reshape(-1, m)
        cand_vals = cand_vals.ravel()
        # keep states that can still return to zero via the remaining sets
        lo, hi = -suffix_hi[i + 1], -suffix_lo[i + 1]
        keep = np.all((cand >= lo) & (cand <= hi), axis=1)
        cand = cand[keep]
        cand_vals = cand_vals[keep]
        if len(cand) == 0:
            raise FeasibilityError("no balanced combination of grid points exists")
        # deduplicate states, keeping the best value for each
        span = hi - lo + 1
        keys = np.zeros(len(cand), dtype=np.int64)
        for j in range(m):
            keys = keys * span[j] + (cand[:, j] - lo[j])
        uniq, inverse = np.unique(keys, return_inverse=True)
        best = np.full(len(uniq), -np.inf)
        np.maximum.at(best, inverse, cand_vals)
        # decode the unique keys back into lattice states
        states = np.zeros((len(uniq), m), dtype=np.int64)
        rem = uniq.copy()
        for j in range(m - 1, -1, -1):
            states[:, j] = rem % span[j] + lo[j]
            rem //= span[j]
        values = best
        stage_states.append((uniq, lo.copy(), span.copy()))
        stage_values.append(values)

    key0 = 0
    idx = np.searchsorted(stage_states[-1][0], key0)
    uniq = stage_states[-1][0]
    if idx >= len(uniq) or uniq[idx] != key0:
        raise FeasibilityError("no balanced combination of grid points exists")
    total = float(stage_values[-1][idx])

    # backtrack deterministically (smallest point index on ties)
    chosen = [0] * n
    target = np.zeros(m, dtype=np.int64)
    target_val = total
    for i in range(n - 1, -1, -1):
        if i == 0:
            prev_keys = None
        else:
            prev_keys, prev_lo, prev_span = stage_states[i - 1]
            prev_vals = stage_values[i - 1]
        found = False
        for k in range(len(ints[i])):
            prev_state = target - ints[i][k]
            if i == 0:
                if np.any(prev_state != 0):
                    continue
                prev_val = 0.0
            else:
                lo_ok = np.all(prev_state - prev_lo >= 0) and np.all(
                    prev_state - prev_lo < prev_span
                )
                if not lo_ok:
                    continue
                key = 0
                for j in range(m):
                    key = key * prev_span[j] + (prev_state[j] - prev_lo[j])
                pos = np.searchsorted(prev_keys, key)
                if pos >= len(prev_keys) or prev_keys[pos] != key:
                    continue
                prev_val = float(prev_vals[pos])
            if abs(prev_val + scores[i][k] - target_val) <= 1e-9 * max(1.0, abs(target_val)):
                chosen[i] = k
                target = target - ints[i][k]
                target_val = prev_val
                found = True
                break
        if not found:
            raise OracleBudgetError("backtracking lost the optimal trajectory")
    return total, chosen


def _prosumer_grids(instance: MarketInstance, budget: float = 1e7):
    grids = []
    for p in instance.prosumers:
        pts = p.feasible_set.grid_points(budget)
        if len(pts) == 0:
            raise FeasibilityError("a prosumer has no feasible grid points")
        grids.append((pts, p.value_batch(pts)))
    return grids


def primal_oracle(instance: MarketInstance, budget: float = TRANSITION_BUDGET) -> PrimalResult:
    """Exact welfare optimum of the grid-discretized economy under trade balance."""
    grids = _prosumer_grids(instance)
    total, chosen = solve_balanced_max(grids, budget)
    alloc = np.stack([grids[i][0][k] for i, k in enumerate(chosen)])
    return PrimalResult(value=total, allocation=alloc)


# -- dual oracle --------------------------------------------------------------------


def _grid_dual_batch(grids, price_batch: np.ndarray) -> np.ndarray:
    """Dual of the grid economy at each price vector in the batch."""
    out = np.zeros(price_batch.shape[0])
    for pts, vals in grids:
        out += (vals[None, :] - price_batch @ pts.T).max(axis=1)
    return out


def grid_best_responses(instance: MarketInstance, prices) -> np.ndarray:
    """Each prosumer's best grid package at the prices (first index on ties,
    i.e. the lexicographically smallest since grids are lexsorted)."""
    prices = as_price_vector(prices, instance.num_products)
    rows = []
    for p in instance.prosumers:
        pts = p.feasible_set.grid_points()
        util = p.value_batch(pts) - pts @ prices
        rows.append(pts[int(np.argmax(util))])
    return np.stack(rows)


def dual_oracle(
    instance: MarketInstance,
    mode: str = "auto",
    grid_resolution: int = 21,
    refinements: int = 4,
    subgrad_iterations: int = 2000,
) -> DualOracleResult:
    """Minimize the grid economy's dual over prices.

    Grid mode (m <= 3) scans a price lattice over a widened external band and
    refines around the incumbent; subgradient mode runs a long diminishing-step
    descent with best-value tracking.
    """
    m = instance.num_products
    if mode == "auto":
        mode = "grid" if m <= 3 else "subgradient"
    grids = _prosumer_grids(instance)

    if mode == "grid":
        margin = 0.5 * (instance.external_buy_price - instance.external_sell_price) + 1.0
        lo = instance.external_sell_price - margin
        hi = instance.external_buy_price + margin
        best_val, best_price = np.inf, (lo + hi) / 2.0
        width = hi - lo
        center = (lo + hi) / 2.0
        for _ in range(refinements):
            axes = [
                np.linspace(center[j] - width[j] / 2, center[j] + width[j] / 2, grid_resolution)
                for j in range(m)
            ]
            mesh = np.meshgrid(*axes, indexing="ij")
            batch = np.stack([a.ravel() for a in mesh], axis=1)
            vals = _grid_dual_batch(grids, batch)
            k = int(np.argmin(vals))
            if vals[k] < best_val:
                best_val, best_price = float(vals[k]), batch[k]
            center = best_price
            width = width * (2.0 / (grid_resolution - 1))
        resolution = float(np.max(width) / (grid_resolution - 1))
        return DualOracleResult(best_val, best_price, "grid", resolution)

    prices = (instance.external_sell_price + instance.external_buy_price) / 2.0
    best_val, best_price = np.inf, prices.copy()
    scale = float(np.mean(instance.external_buy_price - instance.external_sell_price)) / 4.0
    for t in range(1, subgrad_iterations + 1):
        g = 0.0
        subgrad = np.zeros(m)
        for pts, vals in grids:
            util = vals - pts @ prices
            k = int(np.argmax(util))
            g += float(util[k])
            subgrad -= pts[k]
        if g < best_val:
            best_val, best_price = g, prices.copy()
        norm = float(np.linalg.norm(subgrad))
        if norm == 0.0:
            break
        prices = prices - (scale / np.sqrt(t)) * subgrad / norm
    return DualOracleResult(best_val, best_price, "subgradient", scale / np.sqrt(subgrad_iterations))


# -- non-convexity and the duality-gap bound ------------------------------------------


def _upper_envelope_1d(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    order = np.argsort(x)
    xs, vs = x[order], v[order]
    hull = []  # indices into sorted arrays forming the upper concave chain
    for i in range(len(xs)):
        while len(hull) >= 2:
            i0, i1 = hull[-2], hull[-1]
            cross = (xs[i1] - xs[i0]) * (vs[i] - vs[i0]) - (xs[i] - xs[i0]) * (
                vs[i1] - vs[i0]
            )
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    env_sorted = np.interp(xs, xs[hull], vs[hull])
    env = np.empty_like(env_sorted)
    env[order] = env_sorted
    return env


def concave_envelope_on_grid(pts: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Concave envelope values at the grid points (upper hull of the graph)."""
    pts = np.asarray(pts, dtype=float)
    vals = np.asarray(vals, dtype=float)
    # restrict to the coordinates that actually vary
    varying = np.flatnonzero(pts.max(axis=0) - pts.min(axis=0) > 1e-12)
    if len(varying) == 0:
        return vals.copy()
    active = pts[:, varying]
    # affine values have a trivial envelope and break the hull construction
    design = np.column_stack([active, np.ones(len(active))])
    coef, *_ = np.linalg.lstsq(design, vals, rcond=None)
    if np.max(np.abs(design @ coef - vals)) <= 1e-9:
        return vals.copy()
    if len(varying) == 1:
        return _upper_envelope_1d(active[:, 0], vals)
    lifted = np.column_stack([active, vals])
    try:
        hull = ConvexHull(lifted)
    except QhullError:
        hull = ConvexHull(lifted, qhull_options="QJ")
    env = np.full(len(vals), np.inf)
    for eq in hull.equations:
        normal, offset = eq[:-1], eq[-1]
        nz = normal[-1]
        if nz > 1e-12:  # upper facet: v <= (-offset - n_x . x) / n_z
            plane = (-offset - active @ normal[:-1]) / nz
            env = np.minimum(env, plane)
    return np.maximum(env, vals)


def nonconvexity(model: ProsumerModel, budget: float = 1e5) -> float:
    """Largest gap between the value function and its concave envelope on the grid."""
    pts = model.feasible_set.grid_points(budget)
    vals = model.value_batch(pts)
    env = concave_envelope_on_grid(pts, vals)
    return float(np.max(env - vals))


def _grid_lipschitz(pts: np.ndarray, vals: np.ndarray, h: float) -> float:
    """Max slope estimate along each axis from adjacent grid points."""
    best = 0.0
    m = pts.shape[1]
    for axis in range(m):
        order = np.lexsort([pts[:, axis]] + [pts[:, j] for j in range(m) if j != axis])
        p, v = pts[order], vals[order]
        dp = np.diff(p, axis=0)
        dv = np.abs(np.diff(v))
        same_line = np.all(
            np.abs(np.delete(dp, axis, axis=1)) < 1e-12, axis=1
        ) & (np.abs(dp[:, axis] - h) < 1e-9)
        if np.any(same_line):
            best = max(best, float((dv[same_line] / h).max()))
    return best


def check_theorem1(instance: MarketInstance, budget: float = TRANSITION_BUDGET) -> Theorem1Report:
    """Compare the duality gap against the largest per-prosumer non-convexity.

    The tolerance is 1e-4 plus a grid-resolution allowance covering the
    discretization of both optima: (m + 1) grid cells at the steepest local
    value slope among the prosumers.
    """
    primal = primal_oracle(instance, budget)
    dual = dual_oracle(instance)
    ncvx = tuple(nonconvexity(p) for p in instance.prosumers)
    bound = max(ncvx)
    m = instance.num_products

    grid_term = 0.0
    for p in instance.prosumers:
        pts = p.feasible_set.grid_points()
        vals = p.value_batch(pts)
        h = p.feasible_set.grid_step
        slope = _grid_lipschitz(pts, vals, h)
        grid_term = max(grid_term, (m + 1) * h * slope * m)
    tolerance = 1e-4 + grid_term

    gap = dual.value - primal.value
    holds = gap <= bound + tolerance
    if primal.value > 1e-9:
        rho_dual, absolute = gap / primal.value, False
    else:
        rho_dual, absolute = gap, True
    return Theorem1Report(
        primal=primal.value,
        dual=dual.value,
        gap=gap,
        bound=bound,
        tolerance=tolerance,
        holds=holds,
        nonconvexities=ncvx,
        rho_dual=rho_dual,
        rho_dual_is_absolute=absolute,
    )
