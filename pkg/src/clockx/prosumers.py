"""Simulated prosumer catalog: value functions and exact best responses.

Each model owns a feasible set over the market's m products and answers two
questions: the value of a feasible package, and the package it prefers at
posted linear prices (the exact maximizer of value minus payment, ties broken
by the lexicographically smallest package).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FeasibilityError, ModelDefinitionError
from .feasible import FeasibleSet, LinearConstraint
from .market import as_package, as_price_vector
from .solvers import maximize_concave_quadratic

__all__ = [
    "ProsumerModel",
    "ElectricVehicle",
    "Battery",
    "Consumer",
    "WindProducer",
    "SwitchableDevice",
    "HeatPump",
    "enumerate_feasible",
    "model_from_config",
]

TIE_TOL = 1e-9


class ProsumerModel:
    """Base prosumer: subclasses provide value_batch and a best-response core."""

    kind: str = "abstract"
    feasible_set: FeasibleSet

    # -- values ------------------------------------------------------------

    def value(self, x) -> float:
        """Value of a feasible package; raises FeasibilityError otherwise."""
        x = as_package(x, self.feasible_set.dimension)
        if not self.feasible_set.contains(x):
            raise FeasibilityError(f"package is infeasible for this {self.kind}")
        return float(self.value_batch(x[None, :])[0])

    def value_batch(self, pts: np.ndarray) -> np.ndarray:
        """Values at an (N, m) array of points, feasibility unchecked."""
        raise NotImplementedError

    def utility(self, x, prices) -> float:
        x = as_package(x, self.feasible_set.dimension)
        prices = as_price_vector(prices, self.feasible_set.dimension)
        return float(self.value_batch(x[None, :])[0] - prices @ x)

    # -- best response -------------------------------------------------------

    def best_response(self, prices) -> np.ndarray:
        """Exact utility maximizer at the given prices.

        If the utility is flat enough that the lexicographically smallest
        feasible point ties the optimum (within 1e-9), that point is returned,
        making tie-breaking deterministic.
        """
        prices = as_price_vector(prices, self.feasible_set.dimension)
        x = np.asarray(self._best_response_core(prices), dtype=float)
        xlex = self.feasible_set.lexicographic_minimum()
        if not np.array_equal(xlex, x):
            u_x = self.value_batch(x[None, :])[0] - prices @ x
            u_lex = self.value_batch(xlex[None, :])[0] - prices @ xlex
            if u_lex >= u_x - TIE_TOL:
                x = xlex.copy()
        return x + 0.0  # drop negative zeros for stable traces

    def _best_response_core(self, prices: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- serialization ---------------------------------------------------------

    def to_config(self) -> dict:
        raise NotImplementedError


def _pick_lex_smaller(candidates: list[tuple[np.ndarray, float]]) -> np.ndarray:
    """Best-utility candidate; near-ties resolved lexicographically."""
    best_u = max(u for _, u in candidates)
    tied = [x for x, u in candidates if u >= best_u - TIE_TOL]
    tied.sort(key=lambda x: tuple(np.round(x, 12)))
    return tied[0]


def _external_trade_value(pts: np.ndarray, buy: np.ndarray, sell: np.ndarray) -> np.ndarray:
    """Worth of packages against the external market: buys at the buy price,
    sells at the sell price (componentwise positive/negative parts)."""
    return np.maximum(pts, 0.0) @ buy + np.minimum(pts, 0.0) @ sell


@dataclass(frozen=True)
class ElectricVehicle(ProsumerModel):
    """EV trading energy and offering flexibility over two time slots.

    The package holds two energy products and two flexibility products
    (indices given by ``energy_products`` / ``flex_products``; all other
    coordinates are pinned to zero).  State of charge follows
    ``s_j = s_{j-1} + x_{e_j}``; offered flexibility must keep the state
    within [0, capacity] for either activation direction.  Value is the
    external-market worth of the package minus weighted squared deviations of
    the per-slot state of charge from its target.
    """

    num_products: int
    initial_soc: float
    capacity: float
    target_soc: tuple[float, float]
    deviation_weight: tuple[float, float]
    external_buy: np.ndarray
    external_sell: np.ndarray
    energy_products: tuple[int, int] = (0, 1)
    flex_products: tuple[int, int] = (2, 3)
    grid_step: float = 0.25

    kind = "ev"
    feasible_set: FeasibleSet = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (0.0 <= self.initial_soc <= self.capacity):
            raise ModelDefinitionError("initial SoC must lie in [0, capacity]")
        if any(w < 0 for w in self.deviation_weight):
            raise ModelDefinitionError("deviation weights must be nonnegative")
        m = self.num_products
        buy = as_price_vector(self.external_buy, m)
        sell = as_price_vector(self.external_sell, m)
        object.__setattr__(self, "external_buy", buy)
        object.__setattr__(self, "external_sell", sell)
        e1, e2 = self.energy_products
        f1, f2 = self.flex_products
        lo = np.zeros(m)
        hi = np.zeros(m)
        lo[[e1, e2]] = -self.capacity
        hi[[e1, e2]] = self.capacity
        lo[[f1, f2]] = -self.capacity
        cons = []
        span = (-self.initial_soc, self.capacity - self.initial_soc)
        for flex_sign in (1.0, -1.0):
            a = np.zeros(m)
            a[e1] = 1.0
            a[f1] = flex_sign
            cons.append(LinearConstraint(a, *span))
            a = np.zeros(m)
            a[[e1, e2]] = 1.0
            a[[f1, f2]] = flex_sign
            cons.append(LinearConstraint(a, *span))
        object.__setattr__(
            self,
            "feasible_set",
            FeasibleSet(lo, hi, tuple(cons), grid_step=self.grid_step),
        )

    def _soc(self, pts: np.ndarray) -> np.ndarray:
        e1, e2 = self.energy_products
        s1 = self.initial_soc + pts[:, e1]
        s2 = s1 + pts[:, e2]
        return np.stack([s1, s2], axis=1)

    def value_batch(self, pts: np.ndarray) -> np.ndarray:
        trade = _external_trade_value(pts, self.external_buy, self.external_sell)
        soc = self._soc(pts)
        dev = soc - np.asarray(self.target_soc)
        penalty = dev**2 @ np.asarray(self.deviation_weight)
        return trade - penalty

    def _best_response_core(self, prices: np.ndarray) -> np.ndarray:
        # The external-trade term kinks upward at zero in each energy
        # coordinate (buy price above sell price), so the utility is not
        # concave there; solve one concave QP per energy-sign orthant.
        m = self.num_products
        e1, e2 = self.energy_products
        f1, f2 = self.flex_products
        phi = np.asarray(self.deviation_weight)
        rows = np.zeros((2, m))
        rows[0, e1] = 1.0
        rows[1, [e1, e2]] = 1.0
        offsets = self.initial_soc - np.asarray(self.target_soc)
        quad = -(rows.T * phi) @ rows
        lin_pen = -2.0 * (phi * offsets) @ rows
        candidates = []
        fs = self.feasible_set
        for sign1 in (-1.0, 1.0):
            for sign2 in (-1.0, 1.0):
                lo = fs.box_lower.copy()
                hi = fs.box_upper.copy()
                for idx, sign in ((e1, sign1), (e2, sign2)):
                    if sign > 0:
                        lo[idx] = 0.0
                    else:
                        hi[idx] = 0.0
                slopes = np.where(
                    np.arange(m) == e1,
                    self.external_buy if sign1 > 0 else self.external_sell,
                    np.where(
                        np.arange(m) == e2,
                        self.external_buy if sign2 > 0 else self.external_sell,
                        self.external_sell,  # flex coords are sell-only
                    ),
                )
                lin = slopes + lin_pen - prices
                x, _ = maximize_concave_quadratic(lin, quad, fs, lo, hi)
                u = float(self.value_batch(x[None, :])[0] - prices @ x)
                candidates.append((x, u))
        return _pick_lex_smaller(candidates)

    def to_config(self) -> dict:
        return {
            "type": self.kind,
            "num_products": self.num_products,
            "initial_soc": self.initial_soc,
            "capacity": self.capacity,
            "target_soc": list(self.target_soc),
            "deviation_weight": list(self.deviation_weight),
            "external_buy": self.external_buy.tolist(),
            "external_sell": self.external_sell.tolist(),
            "energy_products": list(self.energy_products),
            "flex_products": list(self.flex_products),
            "grid_step": self.grid_step,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ElectricVehicle":
        return cls(
            num_products=int(cfg["num_products"]),
            initial_soc=float(cfg["initial_soc"]),
            capacity=float(cfg["capacity"]),
            target_soc=tuple(cfg["target_soc"]),
            deviation_weight=tuple(cfg["deviation_weight"]),
            external_buy=np.asarray(cfg["external_buy"], dtype=float),
            external_sell=np.asarray(cfg["external_sell"], dtype=float),
            energy_products=tuple(cfg["energy_products"]),
            flex_products=tuple(cfg["flex_products"]),
            grid_step=float(cfg["grid_step"]),
        )


@dataclass(frozen=True)
class Battery(ProsumerModel):
    """Storage arbitraging hourly products under a state-of-charge recursion.

    Buying charges, selling discharges; the state must stay within
    [0, capacity].  Terminal stored energy is worth ``terminal_value`` per
    unit and每 cycling is penalized quadratically via ``degradation``.
    """

    initial_soc: float
    capacity: float
    power_limit: float
    terminal_value: float
    degradation: float
    num_products: int
    grid_step: float = 0.25

    kind = "battery"
    feasible_set: FeasibleSet = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (0.0 <= self.initial_soc <= self.capacity):
            raise ModelDefinitionError("initial SoC must lie in [0, capacity]")
        if self.degradation <= 0:
            raise ModelDefinitionError("degradation must be positive")
        m = self.num_products
        lo = np.full(m, -self.power_limit)
        hi = np.full(m, self.power_limit)
        cons = []
        for j in range(m):
            a = np.zeros(m)
            a[: j + 1] = 1.0
            cons.append(
                LinearConstraint(a, -self.initial_soc, self.capacity - self.initial_soc)
            )
        object.__setattr__(
            self,
            "feasible_set",
            FeasibleSet(lo, hi, tuple(cons), grid_step=self.grid_step),
        )

    def value_batch(self, pts: np.ndarray) -> np.ndarray:
        return self.terminal_value * pts.sum(axis=1) - self.degradation * (pts**2).sum(
            axis=1
        )

    def _best_response_core(self, prices: np.ndarray) -> np.ndarray:
        lin = self.terminal_value - prices
        quad = -self.degradation * np.eye(self.num_products)
        x, _ = maximize_concave_quadratic(lin, quad, self.feasible_set)
        return x

    def to_config(self) -> dict:
        return {
            "type": self.kind,
            "initial_soc": self.initial_soc,
            "capacity": self.capacity,
            "power_limit": self.power_limit,
            "terminal_value": self.terminal_value,
            "degradation": self.degradation,
            "num_products": self.num_products,
            "grid_step": self.grid_step,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "Battery":
        return cls(
            initial_soc=float(cfg["initial_soc"]),
            capacity=float(cfg["capacity"]),
            power_limit=float(cfg["power_limit"]),
            terminal_value=float(cfg["terminal_value"]),
            degradation=float(cfg["degradation"]),
            num_products=int(cfg["num_products"]),
            grid_step=float(cfg["grid_step"]),
        )


@dataclass(frozen=True)
class Consumer(ProsumerModel):
    """Buyer with per-product piecewise-linear utility and satiation.

    Marginal value is ``marginal_high`` up to ``demand`` units, then
    ``marginal_low`` up to ``max_quantity``; products with zero
    ``max_quantity`` are not traded.
    """

    demand: np.ndarray
    marginal_high: np.ndarray
    marginal_low: np.ndarray
    max_quantity: np.ndarray
    grid_step: float = 0.25

    kind = "consumer"
    feasible_set: FeasibleSet = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        d = np.asarray(self.demand, dtype=float)
        a = np.asarray(self.marginal_high, dtype=float)
        b = np.asarray(self.marginal_low, dtype=float)
        u = np.asarray(self.max_quantity, dtype=float)
        if np.any(b < 0) or np.any(a < b):
            raise ModelDefinitionError("need 0 <= marginal_low <= marginal_high")
        if np.any(d < 0) or np.any(u < d):
            raise ModelDefinitionError("need 0 <= demand <= max_quantity")
        for name, arr in (("demand", d), ("marginal_high", a), ("marginal_low", b), ("max_quantity", u)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(
            self,
            "feasible_set",
            FeasibleSet(np.zeros(u.shape[0]), u, grid_step=self.grid_step),
        )

    def value_batch(self, pts: np.ndarray) -> np.ndarray:
        base = np.minimum(pts, self.demand) @ self.marginal_high
        extra = np.maximum(pts - self.demand, 0.0) @ self.marginal_low
        return base + extra

    def _best_response_core(self, prices: np.ndarray) -> np.ndarray:
        # Per product: take the first segment iff its marginal strictly beats
        # the price, the second likewise; ties stop early (lexicographic rule).
        x = np.where(self.marginal_high > prices, self.demand, 0.0)
        x = np.where(self.marginal_low > prices, self.max_quantity, x)
        return x

    def to_config(self) -> dict:
        return {
            "type": self.kind,
            "demand": self.demand.tolist(),
            "marginal_high": self.marginal_high.tolist(),
            "marginal_low": self.marginal_low.tolist(),
            "max_quantity": self.max_quantity.tolist(),
            "grid_step": self.grid_step,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "Consumer":
        return cls(
            demand=np.asarray(cfg["demand"], dtype=float),
            marginal_high=np.asarray(cfg["marginal_high"], dtype=float),
            marginal_low=np.asarray(cfg["marginal_low"], dtype=float),
            max_quantity=np.asarray(cfg["max_quantity"], dtype=float),
            grid_step=float(cfg["grid_step"]),
        )


@dataclass(frozen=True)
class WindProducer(ProsumerModel):
    """Zero-marginal-cost producer with a must-sell floor per product.

    Sells between ``min_sell_fraction * availability`` and the full
    availability; value is identically zero (curtailment is free).
    """

    availability: np.ndarray
    min_sell_fraction: float = 0.0
    grid_step: float = 0.25

    kind = "wind"
    feasible_set: FeasibleSet = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.availability, dtype=float)
        if np.any(w < 0):
            raise ModelDefinitionError("availability must be nonnegative")
        if not (0.0 <= self.min_sell_fraction < 1.0):
            raise ModelDefinitionError("min_sell_fraction must be in [0, 1)")
        w.setflags(write=False)
        object.__setattr__(self, "availability", w)
        object.__setattr__(
            self,
            "feasible_set",
            FeasibleSet(-w, -self.min_sell_fraction * w, grid_step=self.grid_step),
        )

    def value_batch(self, pts: np.ndarray) -> np.ndarray:
        return np.zeros(pts.shape[0])

    def _best_response_core(self, prices: np.ndarray) -> np.ndarray:
        return np.where(prices >= 0.0, -self.availability, -self.min_sell_fraction * self.availability)

    def to_config(self) -> dict:
        return {
            "type": self.kind,
            "availability": self.availability.tolist(),
            "min_sell_fraction": self.min_sell_fraction,
            "grid_step": self.grid_step,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "WindProducer":
        return cls(
            availability=np.asarray(cfg["availability"], dtype=float),
            min_sell_fraction=float(cfg["min_sell_fraction"]),
            grid_step=float(cfg["grid_step"]),
        )


@dataclass(frozen=True)
class SwitchableDevice(ProsumerModel):
    """Device that wants a fixed-power block in one contiguous slot window.

    Value is the best over candidate windows of (benefit minus a start-time
    penalty minus a quadratic deviation from the window's target profile):
    non-concave, handled by enumerating windows with a concave subproblem
    each.
    """

    num_products: int
    window_length: int
    block_power: float
    power_max: float
    benefit: float
    preferred_start: int
    start_penalty: float
    curvature: float
    grid_step: float = 0.25

    kind = "switchable"
    feasible_set: FeasibleSet = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (1 <= self.window_length <= self.num_products):
            raise ModelDefinitionError("window_length out of range")
        if self.block_power > self.power_max:
            raise ModelDefinitionError("block_power must fit under power_max")
        if self.curvature <= 0:
            raise ModelDefinitionError("curvature must be positive")
        object.__setattr__(
            self,
            "feasible_set",
            FeasibleSet(
                np.zeros(self.num_products),
                np.full(self.num_products, self.power_max),
                grid_step=self.grid_step,
            ),
        )

    def _targets(self) -> np.ndarray:
        m, L = self.num_products, self.window_length
        starts = np.arange(m - L + 1)
        targets = np.zeros((len(starts), m))
        for idx, s in enumerate(starts):
            targets[idx, s : s + L] = self.block_power
        return targets

    def _window_consts(self) -> np.ndarray:
        starts = np.arange(self.num_products - self.window_length + 1)
        return self.benefit - self.start_penalty * np.abs(starts - self.preferred_start)

    def value_batch(self, pts: np.ndarray) -> np.ndarray:
        targets = self._targets()
        consts = self._window_consts()
        # (windows, N): per-window concave score, take the best window
        dev = pts[None, :, :] - targets[:, None, :]
        scores = consts[:, None] - self.curvature * (dev**2).sum(axis=2)
        return scores.max(axis=0)

    def _best_response_core(self, prices: np.ndarray) -> np.ndarray:
        targets = self._targets()
        consts = self._window_consts()
        candidates = []
        for t, const in zip(targets, consts):
            x = np.clip(
                t - prices / (2.0 * self.curvature),
                self.feasible_set.box_lower,
                self.feasible_set.box_upper,
            )
            u = const - self.curvature * float(((x - t) ** 2).sum()) - float(prices @ x)
            candidates.append((x, u))
        return _pick_lex_smaller(candidates)

    def to_config(self) -> dict:
        return {
            "type": self.kind,
            "num_products": self.num_products,
            "window_length": self.window_length,
            "block_power": self.block_power,
            "power_max": self.power_max,
            "benefit": self.benefit,
            "preferred_start": self.preferred_start,
            "start_penalty": self.start_penalty,
            "curvature": self.curvature,
            "grid_step": self.grid_step,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "SwitchableDevice":
        return cls(
            num_products=int(cfg["num_products"]),
            window_length=int(cfg["window_length"]),
            block_power=float(cfg["block_power"]),
            power_max=float(cfg["power_max"]),
            benefit=float(cfg["benefit"]),
            preferred_start=int(cfg["preferred_start"]),
            start_penalty=float(cfg["start_penalty"]),
            curvature=float(cfg["curvature"]),
            grid_step=float(cfg["grid_step"]),
        )


@dataclass(frozen=True)
class HeatPump(ProsumerModel):
    """Heating load with a minimum-energy comfort constraint.

    Must draw at least ``min_total_energy`` over the comfort window; utility
    increases toward a reference profile at or above the power box, with
    per-slot quadratic discomfort weights.
    """

    reference: np.ndarray
    discomfort: np.ndarray
    power_max: float
    min_total_energy: float
    window: np.ndarray | None = None
    grid_step: float = 0.25

    kind = "heatpump"
    feasible_set: FeasibleSet = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        r = np.asarray(self.reference, dtype=float)
        q = np.asarray(self.discomfort, dtype=float)
        if np.any(q <= 0):
            raise ModelDefinitionError("discomfort weights must be positive")
        m = r.shape[0]
        mask = (
            np.ones(m, dtype=bool)
            if self.window is None
            else np.asarray(self.window, dtype=bool)
        )
        if self.min_total_energy > self.power_max * mask.sum() + 1e-12:
            raise ModelDefinitionError("comfort constraint exceeds the power box")
        for name, arr in (("reference", r), ("discomfort", q), ("window", mask)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        cons = (
            LinearConstraint(
                mask.astype(float), self.min_total_energy, self.power_max * mask.sum()
            ),
        )
        object.__setattr__(
            self,
            "feasible_set",
            FeasibleSet(
                np.zeros(m), np.full(m, self.power_max), cons, grid_step=self.grid_step
            ),
        )

    def value_batch(self, pts: np.ndarray) -> np.ndarray:
        # comfort value anchored so that v(0) = 0
        return (self.discomfort * (self.reference**2 - (pts - self.reference) ** 2)).sum(
            axis=1
        )

    def _best_response_core(self, prices: np.ndarray) -> np.ndarray:
        lin = 2.0 * self.discomfort * self.reference - prices
        quad = -np.diag(self.discomfort)
        x, _ = maximize_concave_quadratic(lin, quad, self.feasible_set)
        return x

    def to_config(self) -> dict:
        return {
            "type": self.kind,
            "reference": self.reference.tolist(),
            "discomfort": self.discomfort.tolist(),
            "power_max": self.power_max,
            "min_total_energy": self.min_total_energy,
            "window": [int(v) for v in self.window],
            "grid_step": self.grid_step,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "HeatPump":
        return cls(
            reference=np.asarray(cfg["reference"], dtype=float),
            discomfort=np.asarray(cfg["discomfort"], dtype=float),
            power_max=float(cfg["power_max"]),
            min_total_energy=float(cfg["min_total_energy"]),
            window=np.asarray(cfg["window"], dtype=bool),
            grid_step=float(cfg["grid_step"]),
        )


_KINDS = {
    cls.kind: cls
    for cls in (ElectricVehicle, Battery, Consumer, WindProducer, SwitchableDevice, HeatPump)
}


def model_from_config(cfg: dict) -> ProsumerModel:
    """Rebuild a catalog model from its JSON dictionary (``type`` keyed)."""
    kind = cfg.get("type")
    if kind not in _KINDS:
        raise ModelDefinitionError(f"unknown prosumer type {kind!r}")
    return _KINDS[kind].from_config(cfg)


def enumerate_feasible(model: ProsumerModel, budget: float = 1e7) -> np.ndarray:
    """Feasibility-filtered grid of the model's set at its grid_step."""
    return model.feasible_set.grid_points(budget)
