"""ML-aided price update: line-search the step size on the estimated dual.

Given the learned value estimates, the dual surrogate at candidate prices is
the sum of the prosumers' estimated maximal utilities.  The update moves
along the true subgradient direction from the current elicited responses and
picks the step that minimizes the surrogate inside a band whose endpoints
shrink like 1/t and 1/sqrt(t), so the resulting step sequence inherits the
usual divergent-sum / square-summable guarantees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .market import as_price_vector
from .valuenet import ValueNetParams, forward_batch, maximize_utility

__all__ = ["StepBounds", "estimated_dual", "optimize_step_size", "mlcce_price_update"]

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class StepBounds:
    """Step-size band constants and the iteration they apply to."""

    eta_lo: float = 0.01
    eta_hi: float = 1.0
    iteration: int = 1

    def __post_init__(self):
        if not (0 < self.eta_lo <= self.eta_hi):
            raise ConfigError("need 0 < eta_lo <= eta_hi")
        if self.iteration < 1:
            raise ConfigError("iteration must be >= 1")

    def interval(self) -> tuple[float, float]:
        """Search interval [eta_lo / t, eta_hi / sqrt(t)] at iteration t."""
        return self.eta_lo / self.iteration, self.eta_hi / math.sqrt(self.iteration)

    def at(self, iteration: int) -> "StepBounds":
        return StepBounds(self.eta_lo, self.eta_hi, iteration)


def estimated_dual(nets, feasible_sets, prices, mode: str = "auto") -> float:
    """Dual surrogate: sum over prosumers of max estimated value minus payment."""
    prices = as_price_vector(prices)
    total = 0.0
    for params, fs in zip(nets, feasible_sets):
        total += maximize_utility(params, prices, fs, mode=mode).objective
    return total


def _surrogate_pieces(nets, feasible_sets, prices, direction):
    """Per-prosumer affine pieces of eta -> max_k (u0 + eta * d) along the ray
    prices - eta * direction, evaluated on the feasible grids."""
    pieces = []
    for params, fs in zip(nets, feasible_sets):
        pts = fs.grid_points()
        u0 = forward_batch(params, pts) - pts @ prices
        d = pts @ direction
        pieces.append((u0, d))
    return pieces


def optimize_step_size(
    prices,
    subgrad,
    nets,
    feasible_sets,
    bounds: StepBounds,
    mode: str = "grid",
    width_factor: float = 1e-4,
) -> float:
    """Step minimizing the estimated dual along the subgradient direction.

    Golden-section search (the surrogate is convex in the step) down to an
    interval width of ``width_factor * (eta_hi - eta_lo)``; ties and constant
    surrogates resolve to the lower endpoint.
    """
    prices = as_price_vector(prices)
    subgrad = np.asarray(subgrad, dtype=float)
    a, b = bounds.interval()
    if a > b:
        raise ConfigError("empty step-size interval")
    if not np.any(subgrad):
        return a

    if mode == "grid":
        pieces = _surrogate_pieces(nets, feasible_sets, prices, subgrad)

        def phi(eta: float) -> float:
            return float(sum((u0 + eta * d).max() for u0, d in pieces))

    else:

        def phi(eta: float) -> float:
            return estimated_dual(nets, feasible_sets, prices - eta * subgrad, mode=mode)

    tol = max(width_factor * (bounds.eta_hi - bounds.eta_lo), 1e-12)
    candidates = [(phi(a), a), (phi(b), b)]
    lo, hi = a, b
    c = hi - GOLDEN * (hi - lo)
    d = lo + GOLDEN * (hi - lo)
    fc, fd = phi(c), phi(d)
    candidates += [(fc, c), (fd, d)]
    while hi - lo > tol:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - GOLDEN * (hi - lo)
            fc = phi(c)
            candidates.append((fc, c))
        else:
            lo, c, fc = c, d, fd
            d = lo + GOLDEN * (hi - lo)
            fd = phi(d)
            candidates.append((fd, d))
    mid = (lo + hi) / 2.0
    candidates.append((phi(mid), mid))
    # best value first, smaller step on ties
    candidates.sort(key=lambda t: (t[0], t[1]))
    return float(candidates[0][1])


def mlcce_price_update(
    prices, responses, nets, feasible_sets, bounds: StepBounds, mode: str = "grid"
) -> np.ndarray:
    """New prices: one optimized subgradient step on the estimated dual."""
    prices = as_price_vector(prices)
    responses = np.asarray(responses, dtype=float)
    subgrad = -responses.sum(axis=0)
    eta = optimize_step_size(prices, subgrad, nets, feasible_sets, bounds, mode=mode)
    return prices - eta * subgrad
