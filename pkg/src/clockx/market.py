"""Core market data model: instances, packages, allocations and their metrics.

Packages are plain float arrays of length ``m`` (one entry per product,
positive = buy, negative = sell).  An allocation is an ``(n, m)`` array whose
row ``i`` is prosumer ``i``'s package.  All reductions over prosumers run in
ascending prosumer-index order so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateProductError, DimensionError, FeasibilityError

__all__ = [
    "MarketInstance",
    "as_package",
    "as_price_vector",
    "as_allocation",
    "imbalance",
    "imbalance_index",
    "social_welfare",
]


def as_package(x, m: int | None = None) -> np.ndarray:
    """Validate and return a package as a float64 vector.

    Raises DimensionError on length mismatch and ValueError on non-finite
    entries.
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise DimensionError(f"package must be a vector, got shape {arr.shape}")
    if m is not None and arr.shape[0] != m:
        raise DimensionError(f"package has length {arr.shape[0]}, expected {m}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("package entries must be finite")
    return arr


def as_price_vector(prices, m: int | None = None) -> np.ndarray:
    """Validate and return a price vector as a float64 vector."""
    arr = np.asarray(prices, dtype=float)
    if arr.ndim != 1:
        raise DimensionError(f"prices must be a vector, got shape {arr.shape}")
    if m is not None and arr.shape[0] != m:
        raise DimensionError(f"price vector has length {arr.shape[0]}, expected {m}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("prices must be finite")
    return arr


def as_allocation(packages, n: int | None = None, m: int | None = None) -> np.ndarray:
    """Stack per-prosumer packages into an (n, m) float64 array."""
    arr = np.asarray(packages, dtype=float)
    if arr.ndim != 2:
        raise DimensionError(f"allocation must be 2-D, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise DimensionError(f"allocation has {arr.shape[0]} rows, expected {n}")
    if m is not None and arr.shape[1] != m:
        raise DimensionError(f"allocation row length {arr.shape[1]}, expected {m}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("allocation entries must be finite")
    return arr


@dataclass(frozen=True)
class MarketInstance:
    """A market: products, external price band, and the prosumer roster.

    Args:
        external_sell_price: length-m prices at which prosumers can sell to
            external entities (lower band edge).
        external_buy_price: length-m prices at which prosumers can buy from
            external entities (upper band edge).
        prosumers: the participating prosumer models, fixed order.
        product_labels: optional display names, length m.
    """

    external_sell_price: np.ndarray
    external_buy_price: np.ndarray
    prosumers: tuple
    product_labels: tuple = ()

    def __post_init__(self):
        low = as_price_vector(self.external_sell_price)
        high = as_price_vector(self.external_buy_price, low.shape[0])
        low.setflags(write=False)
        high.setflags(write=False)
        object.__setattr__(self, "external_sell_price", low)
        object.__setattr__(self, "external_buy_price", high)
        object.__setattr__(self, "prosumers", tuple(self.prosumers))
        if low.shape[0] < 1:
            raise ValueError("need at least one product")
        if len(self.prosumers) < 1:
            raise ValueError("need at least one prosumer")
        if np.any(low > high):
            raise ValueError("external sell price must not exceed buy price")
        labels = tuple(self.product_labels) or tuple(
            f"product_{j}" for j in range(low.shape[0])
        )
        if len(labels) != low.shape[0]:
            raise DimensionError("product_labels length must equal product count")
        object.__setattr__(self, "product_labels", labels)
        for i, p in enumerate(self.prosumers):
            if p.feasible_set.dimension != low.shape[0]:
                raise DimensionError(
                    f"prosumer {i} has dimension {p.feasible_set.dimension}, "
                    f"market has {low.shape[0]} products"
                )
        object.__setattr__(self, "_max_trade_cache", {})

    @property
    def num_products(self) -> int:
        return self.external_sell_price.shape[0]

    @property
    def num_prosumers(self) -> int:
        return len(self.prosumers)

    def max_trade_volumes(self) -> np.ndarray:
        """Per-product maximum feasible one-sided volume, sum over prosumers.

        Entry j is the sum over prosumers of the largest |x_j| each one can
        feasibly trade.  Cached after the first call.
        """
        cache = self._max_trade_cache
        if "xbar" not in cache:
            total = np.zeros(self.num_products)
            for p in self.prosumers:
                total += p.feasible_set.max_abs_per_product()
            cache["xbar"] = total
        return cache["xbar"]


def imbalance(allocation) -> np.ndarray:
    """Aggregate trade per product: the componentwise sum of all packages."""
    alloc = as_allocation(allocation)
    total = np.zeros(alloc.shape[1])
    for row in alloc:  # fixed ascending order for reproducibility
        total = total + row
    return total


def imbalance_index(allocation, instance: MarketInstance) -> float:
    """Mean over products of |aggregate trade| relative to maximum volume.

    Returns a value in [0, 1]: 0 for a perfectly balanced allocation, 1 when
    every product is at its maximal one-sided imbalance.
    """
    alloc = as_allocation(allocation, instance.num_prosumers, instance.num_products)
    xbar = instance.max_trade_volumes()
    if np.any(xbar <= 0):
        j = int(np.argmax(xbar <= 0))
        raise DegenerateProductError(
            f"no prosumer can trade product {j}; imbalance index undefined"
        )
    delta = imbalance(alloc)
    return float(np.mean(np.abs(delta) / xbar))


def social_welfare(allocation, instance: MarketInstance) -> float:
    """Sum of prosumer values over the allocation (ascending prosumer order)."""
    alloc = as_allocation(allocation, instance.num_prosumers, instance.num_products)
    total = 0.0
    for i, model in enumerate(instance.prosumers):
        if not model.feasible_set.contains(alloc[i]):
            raise FeasibilityError(f"package of prosumer {i} is infeasible")
        total += model.value(alloc[i])
    return total
