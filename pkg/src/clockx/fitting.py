"""Learning prosumer value estimates from elicited (price, package) pairs.

Training minimizes the suboptimality loss: the summed utility shortfall of
the reported packages against the model's own preferred packages at the same
prices.  It is zero exactly when the current estimate rationalizes every
report.  Each epoch re-solves the preferred packages at the current
parameters, then takes one gradient step treating them as constants
(envelope rule), followed by projection back onto the parameter constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .feasible import FeasibleSet
from .valuenet import (
    CUTOFF_MIN,
    ValueNetParams,
    forward_batch,
    grad_params,
    maximize_utility,
)

__all__ = ["QueryDataset", "TrainConfig", "suboptimality_loss", "train"]


@dataclass
class QueryDataset:
    """Recorded package queries of one prosumer: (price, reported package)."""

    prosumer_id: int
    prices: list = field(default_factory=list)
    packages: list = field(default_factory=list)

    def append(self, price, package) -> None:
        price = np.asarray(price, dtype=float)
        package = np.asarray(package, dtype=float)
        if self.prices and price.shape != self.prices[0].shape:
            raise ConfigError("record length disagrees with the dataset")
        if price.shape != package.shape:
            raise ConfigError("price and package lengths disagree")
        self.prices.append(price)
        self.packages.append(package)

    def __len__(self) -> int:
        return len(self.prices)

    def price_matrix(self) -> np.ndarray:
        return np.stack(self.prices)

    def package_matrix(self) -> np.ndarray:
        return np.stack(self.packages)


@dataclass(frozen=True)
class TrainConfig:
    """Epoch count, learning rates (one shared or one per epoch), optimizer.

    Rates are dimensionless: gradients are normalized by the output scale and
    the dataset size before stepping, so one setting works across prosumers.
    """

    epochs: int = 30
    learning_rate: float | tuple = 0.02
    optimizer: str = "adam"
    init_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        rates = self.rates()
        if np.any(np.asarray(rates) <= 0):
            raise ConfigError("learning rates must be positive")

    def rates(self) -> np.ndarray:
        if np.isscalar(self.learning_rate):
            return np.full(max(self.epochs, 1), float(self.learning_rate))
        rates = np.asarray(self.learning_rate, dtype=float)
        if rates.shape[0] < self.epochs:
            raise ConfigError("need one learning rate per epoch")
        return rates


def _preferred_packages(
    params: ValueNetParams, data: QueryDataset, fs: FeasibleSet, mode: str
) -> np.ndarray:
    """Model-preferred package per recorded price.

    In grid mode the candidate set is the feasible grid plus the reported
    packages themselves, so the returned maximizers always dominate the
    reports and the loss stays nonnegative.
    """
    lam = data.price_matrix()
    reported = data.package_matrix()
    if mode == "grid":
        pts = np.vstack([fs.grid_points(), reported])
        util = forward_batch(params, pts)[:, None] - pts @ lam.T
        return pts[np.argmax(util, axis=0)]
    return np.stack(
        [maximize_utility(params, lam[k], fs, mode=mode).x for k in range(len(data))]
    )


def suboptimality_loss(
    params: ValueNetParams,
    data: QueryDataset,
    fs: FeasibleSet,
    mode: str = "auto",
) -> float:
    """Summed utility shortfall of the reports vs the model's own maximizers.

    Nonnegative by maximizer dominance; zero iff every report already
    maximizes estimated value minus payment at its recorded prices.
    """
    if len(data) == 0:
        return 0.0
    preferred = _preferred_packages(params, data, fs, mode)
    return _loss_given(params, data, preferred)


def _loss_given(params, data: QueryDataset, preferred: np.ndarray) -> float:
    lam = data.price_matrix()
    reported = data.package_matrix()
    u_pref = forward_batch(params, preferred) - np.einsum("km,km->k", lam, preferred)
    u_rep = forward_batch(params, reported) - np.einsum("km,km->k", lam, reported)
    return float(np.sum(u_pref - u_rep))


class _GroupedArrays:
    """Flat view over the trainable parameter groups of a value net."""

    KEYS = ("hidden_weights", "hidden_biases", "cutoffs", "output_weight", "output_bias")

    @staticmethod
    def from_params(params: ValueNetParams) -> list:
        return [
            list(params.hidden_weights),
            list(params.hidden_biases),
            list(params.cutoffs),
            [params.output_weight],
            [np.atleast_1d(np.asarray(params.output_bias, dtype=float))],
        ]

    @staticmethod
    def zeros_like(groups: list) -> list:
        return [[np.zeros_like(a) for a in group] for group in groups]

    @staticmethod
    def write_back(params: ValueNetParams, groups: list) -> None:
        params.hidden_weights = tuple(np.maximum(a, 0.0) for a in groups[0])
        params.hidden_biases = tuple(groups[1])
        params.cutoffs = tuple(np.maximum(a, CUTOFF_MIN) for a in groups[2])
        params.output_weight = np.maximum(groups[3][0], 0.0)
        params.output_bias = float(groups[4][0][0])


def _gradient_groups(params: ValueNetParams, preferred: np.ndarray, reported: np.ndarray) -> list:
    """Loss gradient in group layout; preferred packages held fixed, so the
    price terms drop out."""
    groups = None
    for k in range(preferred.shape[0]):
        g_pos = grad_params(params, preferred[k])
        g_neg = grad_params(params, reported[k])
        delta = [
            [p - q for p, q in zip(g_pos.hidden_weights, g_neg.hidden_weights)],
            [p - q for p, q in zip(g_pos.hidden_biases, g_neg.hidden_biases)],
            [p - q for p, q in zip(g_pos.cutoffs, g_neg.cutoffs)],
            [g_pos.output_weight - g_neg.output_weight],
            [np.atleast_1d(g_pos.output_bias - g_neg.output_bias)],
        ]
        if groups is None:
            groups = delta
        else:
            for gi, di in zip(groups, delta):
                for a, d in zip(gi, di):
                    a += d
    return groups


def train(
    data: QueryDataset,
    fs: FeasibleSet,
    cfg: TrainConfig,
    theta0: ValueNetParams,
    mode: str = "grid",
) -> tuple[ValueNetParams, np.ndarray]:
    """Run the epoch loop and return (final parameters, per-epoch losses).

    Deterministic in (data, cfg, theta0).  Raises DivergenceError with the
    last finite epoch if the loss leaves the finite range.
    """
    if len(data) < 1:
        raise ConfigError("need at least one recorded query")
    params = theta0.copy()
    rates = cfg.rates()
    losses = np.zeros(cfg.epochs)
    reported = data.package_matrix()
    norm = params.output_scale * max(len(data), 1)
    groups = _GroupedArrays.from_params(params)
    mom = _GroupedArrays.zeros_like(groups)
    vel = _GroupedArrays.zeros_like(groups)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for epoch in range(cfg.epochs):
        preferred = _preferred_packages(params, data, fs, mode)
        loss = _loss_given(params, data, preferred)
        if not np.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss at epoch {epoch}", last_finite_epoch=epoch - 1
            )
        losses[epoch] = loss
        grad = _gradient_groups(params, preferred, reported)
        lr = rates[epoch]
        if cfg.optimizer == "adam":
            tstep = epoch + 1
            for gi, mi, vi, di in zip(groups, mom, vel, grad):
                for a, mo, ve, d in zip(gi, mi, vi, di):
                    d = d / norm
                    mo *= beta1
                    mo += (1 - beta1) * d
                    ve *= beta2
                    ve += (1 - beta2) * d * d
                    mhat = mo / (1 - beta1**tstep)
                    vhat = ve / (1 - beta2**tstep)
                    a -= lr * mhat / (np.sqrt(vhat) + eps)
        else:
            for gi, di in zip(groups, grad):
                for a, d in zip(gi, di):
                    a -= lr * d / norm
        _GroupedArrays.write_back(params, groups)
        groups = _GroupedArrays.from_params(params)
    return params, losses
