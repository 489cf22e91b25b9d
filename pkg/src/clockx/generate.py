"""Seeded market-instance generation and the clockx/1 instance file format.

All quantity-like parameters are quantized to a common base lattice so the
brute-force clearing oracles can filter trade balance exactly.  Prosumer
parameter ranges are documented on the per-kind builder functions; they are
illustrative presets chosen for reproducible behaviour, not calibrated to any
particular dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .market import MarketInstance
from .prosumers import (
    Battery,
    Consumer,
    ElectricVehicle,
    HeatPump,
    ProsumerModel,
    SwitchableDevice,
    WindProducer,
    model_from_config,
)

__all__ = [
    "InstanceConfig",
    "generate_instance",
    "energy_flex_instance",
    "save_instance",
    "load_instance",
    "instance_to_dict",
    "instance_from_dict",
]

INSTANCE_SCHEMA = "clockx/1"

# share of each kind in the default mixed catalog
MIXED_SHARES = {
    "consumer": 0.30,
    "battery": 0.20,
    "heatpump": 0.20,
    "wind": 0.20,
    "switchable": 0.10,
}
# piecewise-linear kinds only: keeps the grid clearing oracle tight
CONCAVE_SHARES = {"consumer": 0.60, "wind": 0.40}


@dataclass(frozen=True)
class InstanceConfig:
    """Generator settings: product count, roster composition, price bands."""

    num_products: int
    num_prosumers: int
    catalog: str = "mixed"
    counts: dict | None = None
    sell_price_range: tuple[float, float] = (5.0, 15.0)
    buy_margin_range: tuple[float, float] = (15.0, 30.0)
    grid_base: float = 0.25
    max_grid_points: float = 5e4

    def __post_init__(self):
        if self.num_products < 1:
            raise ConfigError("need at least one product")
        if self.num_prosumers < 1:
            raise ConfigError("need at least one prosumer")
        if self.catalog not in ("mixed", "concave"):
            raise ConfigError(f"unknown catalog {self.catalog!r}")
        if self.grid_base <= 0:
            raise ConfigError("grid_base must be positive")

    def kind_counts(self) -> dict:
        if self.counts is not None:
            counts = dict(self.counts)
            if sum(counts.values()) != self.num_prosumers:
                raise ConfigError("explicit counts must sum to num_prosumers")
            return counts
        shares = MIXED_SHARES if self.catalog == "mixed" else CONCAVE_SHARES
        return _largest_remainder(shares, self.num_prosumers)

    def to_dict(self) -> dict:
        return {
            "num_products": self.num_products,
            "num_prosumers": self.num_prosumers,
            "catalog": self.catalog,
            "counts": self.counts,
            "sell_price_range": list(self.sell_price_range),
            "buy_margin_range": list(self.buy_margin_range),
            "grid_base": self.grid_base,
            "max_grid_points": self.max_grid_points,
        }

    @classmethod
    def from_dict(cls, cfg: dict) -> "InstanceConfig":
        return cls(
            num_products=int(cfg["num_products"]),
            num_prosumers=int(cfg["num_prosumers"]),
            catalog=cfg.get("catalog", "mixed"),
            counts=cfg.get("counts"),
            sell_price_range=tuple(cfg.get("sell_price_range", (5.0, 15.0))),
            buy_margin_range=tuple(cfg.get("buy_margin_range", (15.0, 30.0))),
            grid_base=float(cfg.get("grid_base", 0.25)),
            max_grid_points=float(cfg.get("max_grid_points", 5e4)),
        )


def _largest_remainder(shares: dict, n: int) -> dict:
    kinds = sorted(shares)
    raw = {k: shares[k] * n for k in kinds}
    counts = {k: int(np.floor(raw[k])) for k in kinds}
    leftover = n - sum(counts.values())
    by_frac = sorted(kinds, key=lambda k: (raw[k] - counts[k], k), reverse=True)
    for k in by_frac[:leftover]:
        counts[k] += 1
    # balance needs at least one buyer and one seller
    if n >= 2 and counts.get("consumer", 0) == 0:
        donor = max(counts, key=lambda k: (counts[k], k))
        counts[donor] -= 1
        counts["consumer"] = counts.get("consumer", 0) + 1
    if n >= 2 and counts.get("wind", 0) == 0:
        donor = max(counts, key=lambda k: (counts[k], k))
        counts[donor] -= 1
        counts["wind"] = counts.get("wind", 0) + 1
    return {k: v for k, v in counts.items() if v > 0}


def _quantize(value, step: float, minimum: float | None = None):
    q = np.round(np.asarray(value, dtype=float) / step) * step
    if minimum is not None:
        q = np.maximum(q, minimum)
    return q if q.ndim else float(q)


def _pick_grid_step(box_lo, box_hi, base: float, budget: float) -> float:
    """Smallest power-of-two multiple of the base step fitting the budget."""
    step = base
    for _ in range(8):
        count = np.prod(np.floor((box_hi - box_lo) / step + 1e-9) + 1)
        if count <= budget:
            return step
        step *= 2.0
    return step


def _make_battery(m, rng, h, mean_price, budget) -> Battery:
    """Ranges: capacity U[1,2], power U[0.25,0.75], start at half charge,
    terminal value U[0.9,1.1] x mean price, degradation U[4,10]."""
    capacity = _quantize(rng.uniform(1.0, 2.0), 2 * h, 2 * h)
    power = _quantize(rng.uniform(0.25, 0.75), h, h)
    step = _pick_grid_step(np.full(m, -power), np.full(m, power), h, budget)
    return Battery(
        initial_soc=capacity / 2.0,
        capacity=capacity,
        power_limit=power,
        terminal_value=float(rng.uniform(0.9, 1.1) * mean_price),
        degradation=float(rng.uniform(4.0, 10.0)),
        num_products=m,
        grid_step=step,
    )


def _make_consumer(m, rng, h, buy_prices, sell_prices, budget) -> Consumer:
    """Ranges: demand U[0,1], headroom U[0,0.5], high marginal
    U[0.9,1.5] x external buy price, low marginal U[0.6,1.0] x sell price."""
    demand = _quantize(rng.uniform(0.0, 1.0, m), h)
    extra = _quantize(rng.uniform(0.0, 0.5, m), h)
    max_q = demand + extra
    a = rng.uniform(0.9, 1.5, m) * buy_prices
    b = np.minimum(rng.uniform(0.6, 1.0, m) * sell_prices, a)
    step = _pick_grid_step(np.zeros(m), max_q, h, budget)
    return Consumer(
        demand=demand,
        marginal_high=np.round(a, 4),
        marginal_low=np.round(b, 4),
        max_quantity=max_q,
        grid_step=step,
    )


def _make_wind(m, rng, h, budget) -> WindProducer:
    """Ranges: availability U[0.5,1.5] per slot (multiples of 2x base step),
    must sell at least half of it."""
    w = _quantize(rng.uniform(0.5, 1.5, m), 2 * h)
    step = _pick_grid_step(-w, -0.5 * w, h, budget)
    return WindProducer(availability=w, min_sell_fraction=0.5, grid_step=step)


def _make_switchable(m, rng, h, mean_price, budget) -> SwitchableDevice:
    """Ranges: window 1..min(3, m-1), block power U[0.5,1], headroom U[0,0.5],
    curvature U[4,10]; the start penalty is kept below the curvature gap
    between neighbouring windows so several windows stay competitive."""
    window = int(rng.integers(1, max(1, min(3, m - 1)) + 1))
    block = _quantize(rng.uniform(0.5, 1.0), h, h)
    power_max = block + _quantize(rng.uniform(0.0, 0.5), h)
    energy = window * block
    curvature = float(rng.uniform(4.0, 10.0))
    step = _pick_grid_step(np.zeros(m), np.full(m, power_max), h, budget)
    return SwitchableDevice(
        num_products=m,
        window_length=window,
        block_power=block,
        power_max=power_max,
        benefit=float(np.round(rng.uniform(1.2, 2.0) * mean_price * energy, 4)),
        preferred_start=int(rng.integers(0, m - window + 1)),
        start_penalty=float(np.round(rng.uniform(0.1, 0.5) * curvature * block**2, 4)),
        curvature=curvature,
        grid_step=step,
    )


def _make_heatpump(m, rng, h, budget) -> HeatPump:
    """Ranges: power U[0.5,1], reference U[1.0,1.3] x power (keeps value
    monotone on the box), discomfort U[8,20], comfort minimum U[0.25,0.5] x
    total power."""
    power = _quantize(rng.uniform(0.5, 1.0), h, h)
    reference = rng.uniform(1.0, 1.3, m) * power
    emin = _quantize(rng.uniform(0.25, 0.5) * power * m, h, h)
    step = _pick_grid_step(np.zeros(m), np.full(m, power), h, budget)
    return HeatPump(
        reference=np.round(reference, 4),
        discomfort=np.round(rng.uniform(8.0, 20.0, m), 4),
        power_max=power,
        min_total_energy=emin,
        grid_step=step,
    )


def generate_instance(config: InstanceConfig, seed: int) -> MarketInstance:
    """Deterministically draw a market instance from (config, seed)."""
    counts = config.kind_counts()
    m = config.num_products
    h = config.grid_base
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(config.num_prosumers + 1)
    rng0 = np.random.default_rng(children[0])

    sell = np.round(rng0.uniform(*config.sell_price_range, m), 4)
    buy = np.round(sell + rng0.uniform(*config.buy_margin_range, m), 4)
    mean_price = float((sell.mean() + buy.mean()) / 2.0)

    prosumers: list[ProsumerModel] = []
    idx = 1
    for kind in sorted(counts):
        for _ in range(counts[kind]):
            rng = np.random.default_rng(children[idx])
            idx += 1
            if kind == "battery":
                prosumers.append(_make_battery(m, rng, h, mean_price, config.max_grid_points))
            elif kind == "consumer":
                prosumers.append(_make_consumer(m, rng, h, buy, sell, config.max_grid_points))
            elif kind == "wind":
                prosumers.append(_make_wind(m, rng, h, config.max_grid_points))
            elif kind == "switchable":
                prosumers.append(_make_switchable(m, rng, h, mean_price, config.max_grid_points))
            elif kind == "heatpump":
                prosumers.append(_make_heatpump(m, rng, h, config.max_grid_points))
            else:
                raise ConfigError(f"catalog cannot generate kind {kind!r}")

    prosumers = _ensure_balance_possible(prosumers)
    labels = tuple(f"energy_h{j}" for j in range(m))
    return MarketInstance(
        external_sell_price=sell,
        external_buy_price=buy,
        prosumers=tuple(prosumers),
        product_labels=labels,
    )


def _ensure_balance_possible(prosumers: list[ProsumerModel]) -> list[ProsumerModel]:
    """If must-sell floors exceed total absorption on any product, relax all
    wind floors to zero (deterministic, keeps the lattice)."""
    m = prosumers[0].feasible_set.dimension
    hi_total = np.zeros(m)
    for p in prosumers:
        for j in range(m):
            hi_total[j] += p.feasible_set.coordinate_range(j)[1]
    if np.all(hi_total >= 0):
        return prosumers
    out = []
    for p in prosumers:
        if isinstance(p, WindProducer) and p.min_sell_fraction > 0:
            out.append(
                WindProducer(
                    availability=p.availability,
                    min_sell_fraction=0.0,
                    grid_step=p.grid_step,
                )
            )
        else:
            out.append(p)
    return out


def energy_flex_instance(seed: int, grid_base: float = 0.5) -> MarketInstance:
    """Six-participant market over [energy x 2 slots, flexibility x 2 slots].

    Roster: one wind producer and one consumer trading energy only, two EVs
    trading energy and selling flexibility, and two grid operators buying
    flexibility only.  Quantities sit on the common lattice so the exact grid
    clearing oracle applies.
    """
    h = grid_base
    ss = np.random.SeedSequence(seed)
    c = ss.spawn(8)
    rng0 = np.random.default_rng(c[0])

    sell = np.round(
        np.concatenate([rng0.uniform(5.0, 10.0, 2), rng0.uniform(2.0, 5.0, 2)]), 4
    )
    buy = np.round(
        sell + np.concatenate([rng0.uniform(15.0, 25.0, 2), rng0.uniform(8.0, 15.0, 2)]),
        4,
    )

    rng = np.random.default_rng(c[1])
    wind = WindProducer(
        availability=np.array([_quantize(rng.uniform(1.0, 2.0), 2 * h, 2 * h),
                               _quantize(rng.uniform(1.0, 2.0), 2 * h, 2 * h),
                               0.0, 0.0]),
        min_sell_fraction=0.5,
        grid_step=h,
    )

    rng = np.random.default_rng(c[2])
    demand = np.array([_quantize(rng.uniform(0.5, 1.5), h, h),
                       _quantize(rng.uniform(0.5, 1.5), h, h), 0.0, 0.0])
    consumer = Consumer(
        demand=demand,
        marginal_high=np.round(rng.uniform(1.0, 1.4, 4) * buy, 4),
        marginal_low=np.round(rng.uniform(0.7, 1.0, 4) * sell, 4),
        max_quantity=demand + np.array([h, h, 0.0, 0.0]),
        grid_step=h,
    )

    evs = []
    for k in (3, 4):
        rng = np.random.default_rng(c[k])
        cap = _quantize(rng.uniform(2.0, 3.0), 2 * h, 2 * h)
        s0 = _quantize(rng.uniform(0.3, 0.7) * cap, h, h)
        target = np.clip(s0 + rng.uniform(-0.5, 1.0, 2), 0.2 * cap, cap)
        evs.append(
            ElectricVehicle(
                num_products=4,
                initial_soc=float(s0),
                capacity=float(cap),
                target_soc=(float(np.round(target[0], 4)), float(np.round(target[1], 4))),
                deviation_weight=(
                    float(np.round(rng.uniform(5.0, 15.0), 4)),
                    float(np.round(rng.uniform(5.0, 15.0), 4)),
                ),
                external_buy=buy,
                external_sell=sell,
                energy_products=(0, 1),
                flex_products=(2, 3),
                grid_step=h,
            )
        )

    operators = []
    for k in (5, 6):
        rng = np.random.default_rng(c[k])
        need = np.array([0.0, 0.0,
                         _quantize(rng.uniform(0.5, 1.0), h, h),
                         _quantize(rng.uniform(0.5, 1.0), h, h)])
        operators.append(
            Consumer(
                demand=need,
                marginal_high=np.round(rng.uniform(1.0, 1.5, 4) * buy, 4),
                marginal_low=np.round(rng.uniform(0.6, 0.9, 4) * sell, 4),
                max_quantity=need + np.array([0.0, 0.0, h, h]),
                grid_step=h,
            )
        )

    return MarketInstance(
        external_sell_price=sell,
        external_buy_price=buy,
        prosumers=(wind, consumer, evs[0], evs[1], operators[0], operators[1]),
        product_labels=("energy_h1", "energy_h2", "flex_h1", "flex_h2"),
    )


# -- instance file format ------------------------------------------------------


def instance_to_dict(inst: MarketInstance, prosumer_seeds=None) -> dict:
    entries = []
    for i, p in enumerate(inst.prosumers):
        entry = p.to_config()
        entry["seed"] = int(prosumer_seeds[i]) if prosumer_seeds is not None else i
        entries.append(entry)
    return {
        "schema": INSTANCE_SCHEMA,
        "m": inst.num_products,
        "n": inst.num_prosumers,
        "lambda_low": inst.external_sell_price.tolist(),
        "lambda_high": inst.external_buy_price.tolist(),
        "product_labels": list(inst.product_labels),
        "prosumers": entries,
    }


def instance_from_dict(doc: dict) -> MarketInstance:
    if doc.get("schema") != INSTANCE_SCHEMA:
        raise ConfigError(f"unsupported instance schema {doc.get('schema')!r}")
    prosumers = tuple(model_from_config(entry) for entry in doc["prosumers"])
    inst = MarketInstance(
        external_sell_price=np.asarray(doc["lambda_low"], dtype=float),
        external_buy_price=np.asarray(doc["lambda_high"], dtype=float),
        prosumers=prosumers,
        product_labels=tuple(doc.get("product_labels", ())),
    )
    if inst.num_products != doc["m"] or inst.num_prosumers != doc["n"]:
        raise ConfigError("instance file m/n fields disagree with contents")
    return inst


def save_instance(inst: MarketInstance, path, prosumer_seeds=None) -> None:
    doc = instance_to_dict(inst, prosumer_seeds)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_instance(path) -> MarketInstance:
    return instance_from_dict(json.loads(Path(path).read_text()))
