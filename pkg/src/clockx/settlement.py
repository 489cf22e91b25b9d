"""Post-clearing settlement: external balancing, revenue deficit, trade fee.

Residual imbalances are bought or sold at the external prices; the operator's
per-product revenue deficit is socialized through a unit fee on traded
volume, restoring exact budget balance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market import MarketInstance, as_allocation, as_price_vector, imbalance

__all__ = ["SettlementReport", "settle"]


@dataclass(frozen=True)
class SettlementReport:
    """Cash flows of one settlement.

    ``payments_before_fee[i]`` is what prosumer i pays for its package at the
    clearing prices (negative = receives); fees are nonnegative whenever the
    clearing prices lie inside the external band.  ``operator_net_cash`` is
    zero up to rounding: local payments plus fees minus external balancing.
    """

    clearing_prices: np.ndarray
    imbalance: np.ndarray
    revenue_deficit: np.ndarray
    unit_fee: np.ndarray
    payments_before_fee: np.ndarray
    fees: np.ndarray
    payments_after_fee: np.ndarray
    operator_net_cash: float
    unsocializable: np.ndarray


def settle(allocation, clearing_prices, instance: MarketInstance) -> SettlementReport:
    """Settle an allocation at the given clearing prices.

    Excess demand per product is procured externally at the buy price, excess
    supply sold at the sell price; the resulting deficit is charged back in
    proportion to each prosumer's traded volume.
    """
    alloc = as_allocation(allocation, instance.num_prosumers, instance.num_products)
    prices = as_price_vector(clearing_prices, instance.num_products)
    delta = imbalance(alloc)
    pos = np.maximum(delta, 0.0)
    neg = np.minimum(delta, 0.0)
    deficit = (instance.external_buy_price - prices) * pos + (
        instance.external_sell_price - prices
    ) * neg

    volume = np.abs(alloc).sum(axis=0)
    traded = volume > 0.0
    unit_fee = np.where(traded, deficit / np.where(traded, volume, 1.0), 0.0)
    unsocializable = (~traded) & (np.abs(deficit) > 0.0)

    payments = alloc @ prices
    fees = np.abs(alloc) @ unit_fee
    external_outflow = float(
        instance.external_buy_price @ pos + instance.external_sell_price @ neg
    )
    net = float(payments.sum() + fees.sum() - external_outflow)
    return SettlementReport(
        clearing_prices=prices,
        imbalance=delta,
        revenue_deficit=deficit,
        unit_fee=unit_fee,
        payments_before_fee=payments,
        fees=fees,
        payments_after_fee=payments + fees,
        operator_net_cash=net,
        unsocializable=unsocializable,
    )
