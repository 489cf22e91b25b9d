"""Internal numeric helpers for the prosumer catalog's exact best responses."""

from __future__ import annotations

import numpy as np
from scipy.optimize import LinearConstraint as _ScipyLinear
from scipy.optimize import minimize

from .errors import ModelDefinitionError
from .feasible import FeasibleSet

__all__ = ["maximize_concave_quadratic"]


def maximize_concave_quadratic(
    lin: np.ndarray,
    quad: np.ndarray | None,
    fs: FeasibleSet,
    box_lower: np.ndarray | None = None,
    box_upper: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Maximize ``<lin, x> + x^T quad x`` over the set's box/linear part.

    ``quad`` must be symmetric negative semidefinite (or None for a linear
    objective).  Optional box overrides restrict the search to a sub-box,
    e.g. a single orthant.  Returns (argmax, value).
    """
    lo = fs.box_lower if box_lower is None else np.asarray(box_lower, dtype=float)
    hi = fs.box_upper if box_upper is None else np.asarray(box_upper, dtype=float)
    if np.any(lo > hi):
        raise ModelDefinitionError("empty sub-box in quadratic solve")
    m = lo.shape[0]
    lin = np.asarray(lin, dtype=float)
    q = None if quad is None else np.asarray(quad, dtype=float)

    def neg_obj(x):
        val = lin @ x
        if q is not None:
            val += x @ (q @ x)
        return -val

    def neg_grad(x):
        g = lin.copy()
        if q is not None:
            g += 2.0 * (q @ x)
        return -g

    constraints = []
    if fs.linear_constraints:
        a = np.stack([c.a for c in fs.linear_constraints])
        c_lo = np.array([c.lo for c in fs.linear_constraints])
        c_hi = np.array([c.hi for c in fs.linear_constraints])
        constraints.append(_ScipyLinear(a, c_lo, c_hi))

    x0 = np.clip((lo + hi) / 2.0, lo, hi)
    bounds = list(zip(lo, hi))
    res = minimize(
        neg_obj,
        x0,
        jac=neg_grad,
        bounds=bounds,
        constraints=constraints,
        method="SLSQP",
        options={"ftol": 1e-14, "maxiter": 500},
    )
    best = None
    if res.success and _within(res.x, lo, hi, fs):
        best = np.clip(res.x, lo, hi)
    # SLSQP occasionally stalls on flat objectives; trust-constr is slower
    # but dependable, so retry before giving up.
    if best is None or not np.isfinite(neg_obj(best)):
        hess = -2.0 * q if q is not None else np.zeros((m, m))
        res = minimize(
            neg_obj,
            x0,
            jac=neg_grad,
            hess=lambda x: hess,
            bounds=bounds,
            constraints=constraints,
            method="trust-constr",
            options={"gtol": 1e-12, "xtol": 1e-14, "maxiter": 2000},
        )
        best = np.clip(res.x, lo, hi)
    return best, -neg_obj(best)


def _within(x, lo, hi, fs: FeasibleSet, tol: float = 1e-8) -> bool:
    if np.any(x < lo - tol) or np.any(x > hi + tol):
        return False
    for c in fs.linear_constraints:
        v = float(c.a @ x)
        if v < c.lo - tol or v > c.hi + tol:
            return False
    return True
