"""Feasible trade sets: boxes, two-sided linear constraints, on/off patterns.

A feasible set is a box, optionally cut by constraints ``lo <= <a, x> <= hi``,
and optionally restricted to a union of on/off activation profiles (an "off"
coordinate is pinned to zero).  ``grid_step`` fixes the resolution used by the
enumeration oracles; it does not discretize the set itself.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import EnumerationBudgetError, FeasibilityError, ModelDefinitionError

__all__ = ["FeasibleSet", "LinearConstraint"]

CONSTRAINT_TOL = 1e-9


@dataclass(frozen=True)
class LinearConstraint:
    """Two-sided linear constraint lo <= <a, x> <= hi."""

    a: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        a.setflags(write=False)
        object.__setattr__(self, "a", a)
        if self.lo > self.hi:
            raise ModelDefinitionError("linear constraint has lo > hi")


@dataclass(frozen=True)
class FeasibleSet:
    """Box + linear constraints + optional activation patterns.

    Args:
        box_lower, box_upper: componentwise bounds, length m.
        linear_constraints: iterable of LinearConstraint (or (a, lo, hi) tuples).
        binary_patterns: optional allowed on/off profiles; an off coordinate
            is fixed at 0, an on coordinate keeps its box range.
        grid_step: resolution for the enumeration oracle, > 0.
    """

    box_lower: np.ndarray
    box_upper: np.ndarray
    linear_constraints: tuple = ()
    binary_patterns: tuple | None = None
    grid_step: float = 0.25

    def __post_init__(self):
        lo = np.asarray(self.box_lower, dtype=float)
        hi = np.asarray(self.box_upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ModelDefinitionError("box bounds must be equal-length vectors")
        if np.any(lo > hi):
            raise ModelDefinitionError("box_lower must not exceed box_upper")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ModelDefinitionError("box bounds must be finite")
        if self.grid_step <= 0:
            raise ModelDefinitionError("grid_step must be positive")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "box_lower", lo)
        object.__setattr__(self, "box_upper", hi)
        cons = tuple(
            c if isinstance(c, LinearConstraint) else LinearConstraint(*c)
            for c in self.linear_constraints
        )
        for c in cons:
            if c.a.shape != lo.shape:
                raise ModelDefinitionError("constraint vector has wrong length")
        object.__setattr__(self, "linear_constraints", cons)
        if self.binary_patterns is not None:
            pats = tuple(np.asarray(p, dtype=bool) for p in self.binary_patterns)
            for p in pats:
                p.setflags(write=False)
                if p.shape != lo.shape:
                    raise ModelDefinitionError("pattern has wrong length")
            if not pats:
                raise ModelDefinitionError("binary_patterns must not be empty if given")
            object.__setattr__(self, "binary_patterns", pats)
        object.__setattr__(self, "_cache", {})

    @property
    def dimension(self) -> int:
        return self.box_lower.shape[0]

    # -- membership ---------------------------------------------------------

    def _box_ok(self, x: np.ndarray, tol: float) -> bool:
        return bool(
            np.all(x >= self.box_lower - tol) and np.all(x <= self.box_upper + tol)
        )

    def _linear_ok(self, x: np.ndarray, tol: float) -> bool:
        for c in self.linear_constraints:
            v = float(c.a @ x)
            if v < c.lo - tol or v > c.hi + tol:
                return False
        return True

    def _pattern_ok(self, x: np.ndarray, tol: float) -> bool:
        if self.binary_patterns is None:
            return True
        for p in self.binary_patterns:
            if np.all(np.abs(x[~p]) <= tol):
                return True
        return False

    def contains(self, x, tol: float = CONSTRAINT_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != self.box_lower.shape:
            return False
        return self._box_ok(x, tol) and self._linear_ok(x, tol) and self._pattern_ok(x, tol)

    def require(self, x, tol: float = CONSTRAINT_TOL, who: str = "package") -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.contains(x, tol):
            raise FeasibilityError(f"{who} violates the feasible set")
        return x

    # -- grid enumeration ----------------------------------------------------

    def _axis_values(self, j: int, on: bool = True) -> np.ndarray:
        if not on:
            return np.array([0.0])
        lo, hi = self.box_lower[j], self.box_upper[j]
        count = int(np.floor((hi - lo) / self.grid_step + 1e-9)) + 1
        return lo + self.grid_step * np.arange(count)

    def grid_size_estimate(self) -> float:
        """Upper bound on raw grid points before constraint filtering."""
        if self.binary_patterns is None:
            patterns = [np.ones(self.dimension, dtype=bool)]
        else:
            patterns = list(self.binary_patterns)
        total = 0.0
        for p in patterns:
            count = 1.0
            for j in range(self.dimension):
                count *= len(self._axis_values(j, bool(p[j])))
            total += count
        return total

    def grid_points(self, budget: float = 1e7) -> np.ndarray:
        """All grid points of the box satisfying constraints and patterns.

        Points are spaced grid_step apart starting at box_lower; ordering is
        lexicographic (last coordinate fastest), deduplicated across patterns.
        """
        cache = self._cache
        key = ("grid", budget)
        if key in cache:
            return cache[key]
        if self.grid_size_estimate() > budget:
            raise EnumerationBudgetError(
                f"grid of ~{self.grid_size_estimate():.3g} points exceeds budget {budget:.3g}"
            )
        if self.binary_patterns is None:
            patterns = [np.ones(self.dimension, dtype=bool)]
        else:
            patterns = list(self.binary_patterns)
        chunks = []
        for p in patterns:
            axes = [self._axis_values(j, bool(p[j])) for j in range(self.dimension)]
            mesh = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([a.ravel() for a in mesh], axis=1)
            if pts.size == 0:
                continue
            mask = np.ones(len(pts), dtype=bool)
            for c in self.linear_constraints:
                v = pts @ c.a
                mask &= (v >= c.lo - CONSTRAINT_TOL) & (v <= c.hi + CONSTRAINT_TOL)
            # zero coordinates of a pattern must still respect the box
            if not (self._box_ok(np.where(p, self.box_lower, 0.0), CONSTRAINT_TOL)):
                zero_ok = np.all(
                    (0.0 >= self.box_lower[~p] - CONSTRAINT_TOL)
                    & (0.0 <= self.box_upper[~p] + CONSTRAINT_TOL)
                )
                if not zero_ok:
                    mask[:] = False
            chunks.append(pts[mask])
        if not chunks:
            return np.zeros((0, self.dimension))
        pts = np.vstack(chunks)
        if len(patterns) > 1 and len(pts):
            pts = np.unique(pts, axis=0)
        else:
            order = np.lexsort(pts.T[::-1])
            pts = pts[order]
        pts.setflags(write=False)
        cache[key] = pts
        return pts

    # -- linear programming helpers -------------------------------------------

    def _two_sided_rows(self):
        if not self.linear_constraints:
            return None, None
        a = np.stack([c.a for c in self.linear_constraints])
        a_ub = np.vstack([a, -a])
        b_ub = np.concatenate(
            [
                np.array([c.hi for c in self.linear_constraints]),
                np.array([-c.lo for c in self.linear_constraints]),
            ]
        )
        return a_ub, b_ub

    def _lp(self, cost: np.ndarray, pattern=None) -> tuple[float, np.ndarray] | None:
        """Minimize <cost, x> over the box/linear part (one pattern); None if infeasible."""
        lo = self.box_lower.copy()
        hi = self.box_upper.copy()
        if pattern is not None:
            lo = np.where(pattern, lo, 0.0)
            hi = np.where(pattern, hi, 0.0)
            if np.any(lo > hi):
                return None
        a_ub, b_ub = self._two_sided_rows()
        res = linprog(
            cost, A_ub=a_ub, b_ub=b_ub, bounds=list(zip(lo, hi)), method="highs"
        )
        if not res.success:
            return None
        return float(res.fun), np.asarray(res.x)

    def coordinate_range(self, j: int) -> tuple[float, float]:
        """(min, max) of x_j over the feasible set."""
        cache = self._cache
        key = ("range", j)
        if key in cache:
            return cache[key]
        if not self.linear_constraints and self.binary_patterns is None:
            out = (float(self.box_lower[j]), float(self.box_upper[j]))
            cache[key] = out
            return out
        cost = np.zeros(self.dimension)
        cost[j] = 1.0
        patterns = self.binary_patterns or (np.ones(self.dimension, dtype=bool),)
        lo_vals, hi_vals = [], []
        for p in patterns:
            low = self._lp(cost, p)
            high = self._lp(-cost, p)
            if low is None or high is None:
                continue
            lo_vals.append(low[0])
            hi_vals.append(-high[0])
        if not lo_vals:
            raise ModelDefinitionError("feasible set is empty")
        out = (min(lo_vals), max(hi_vals))
        cache[key] = out
        return out

    def max_abs_per_product(self) -> np.ndarray:
        """Largest feasible |x_j| for each product j."""
        cache = self._cache
        if "max_abs" not in cache:
            out = np.zeros(self.dimension)
            for j in range(self.dimension):
                lo, hi = self.coordinate_range(j)
                out[j] = max(abs(lo), abs(hi))
            out.setflags(write=False)
            cache["max_abs"] = out
        return cache["max_abs"]

    def lexicographic_minimum(self) -> np.ndarray:
        """Lexicographically smallest feasible point (sequential coordinate LPs)."""
        cache = self._cache
        if "lexmin" in cache:
            return cache["lexmin"]
        patterns = self.binary_patterns or (np.ones(self.dimension, dtype=bool),)
        best = None
        for p in patterns:
            pt = self._lexmin_one(p)
            if pt is None:
                continue
            if best is None or tuple(np.round(pt, 12)) < tuple(np.round(best, 12)):
                best = pt
        if best is None:
            raise ModelDefinitionError("feasible set is empty")
        best.setflags(write=False)
        cache["lexmin"] = best
        return best

    def _lexmin_one(self, pattern) -> np.ndarray | None:
        lo = np.where(pattern, self.box_lower, 0.0).copy()
        hi = np.where(pattern, self.box_upper, 0.0).copy()
        if np.any(lo > hi):
            return None
        a_ub, b_ub = self._two_sided_rows()
        fixed = lo.copy()
        for j in range(self.dimension):
            cost = np.zeros(self.dimension)
            cost[j] = 1.0
            bounds = list(zip(lo, hi))
            res = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
            if not res.success:
                return None
            fixed[j] = float(res.x[j])
            lo[j] = fixed[j]
            hi[j] = fixed[j]
        return fixed

    # -- serialization ---------------------------------------------------------

    def to_config(self) -> dict:
        cfg = {
            "box_lower": self.box_lower.tolist(),
            "box_upper": self.box_upper.tolist(),
            "grid_step": self.grid_step,
        }
        if self.linear_constraints:
            cfg["linear_constraints"] = [
                {"a": c.a.tolist(), "lo": c.lo, "hi": c.hi}
                for c in self.linear_constraints
            ]
        if self.binary_patterns is not None:
            cfg["binary_patterns"] = [
                [int(v) for v in p] for p in self.binary_patterns
            ]
        return cfg

    @classmethod
    def from_config(cls, cfg: dict) -> "FeasibleSet":
        cons = tuple(
            LinearConstraint(np.asarray(c["a"], dtype=float), c["lo"], c["hi"])
            for c in cfg.get("linear_constraints", [])
        )
        pats = cfg.get("binary_patterns")
        return cls(
            box_lower=np.asarray(cfg["box_lower"], dtype=float),
            box_upper=np.asarray(cfg["box_upper"], dtype=float),
            linear_constraints=cons,
            binary_patterns=tuple(np.asarray(p, dtype=bool) for p in pats)
            if pats is not None
            else None,
            grid_step=float(cfg["grid_step"]),
        )
