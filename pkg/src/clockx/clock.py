"""Clock phase: announce prices, collect package queries, update prices.

Prices start at the midpoint of the external band.  Early iterations use the
plain subgradient update with a power-law step schedule; from the warm-start
iteration on, the ML-aided update trains one value estimate per prosumer on
all queries collected so far and line-searches the step size on the estimated
dual.  A failed ML update falls back to the plain step for that iteration and
is recorded in the trace.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .adaptive import StepBounds, mlcce_price_update
from .errors import ConfigError
from .fitting import QueryDataset, TrainConfig, train
from .market import MarketInstance, as_price_vector, imbalance, imbalance_index
from .valuenet import ValueNetParams, init_value_net

__all__ = [
    "ClockConfig",
    "IterationRecord",
    "ClockTrace",
    "initial_prices",
    "step_size",
    "schedule_is_robbins_monro",
    "cce_price_update",
    "dual_value",
    "elicit_responses",
    "run_clock",
    "trace_to_csv",
    "write_run_metadata",
]


@dataclass(frozen=True)
class ClockConfig:
    """Clock-phase settings.

    ``updater`` is "CCE" (plain subgradient throughout) or "MLCCE" (ML-aided
    updates from iteration ``warm_start`` on).  The schedule is
    ``step_scale / t**step_exponent`` with the exponent in (0.5, 1].
    """

    max_iterations: int = 40
    warm_start: int = 5
    step_scale: float = 0.5
    step_exponent: float = 0.6
    updater: str = "CCE"
    stop_at_imbalance: float | None = None
    net_widths: tuple = (8, 8)
    train: TrainConfig = field(default_factory=TrainConfig)
    cold_start_epochs: int = 300
    step_bounds: StepBounds = field(default_factory=StepBounds)
    warm_start_params: bool = True
    net_seed: int = 0

    def __post_init__(self):
        if not (1 <= self.warm_start <= self.max_iterations):
            raise ConfigError("need 1 <= warm_start <= max_iterations")
        if not (0.5 < self.step_exponent <= 1.0):
            raise ConfigError("step exponent must lie in (0.5, 1]")
        if self.step_scale <= 0:
            raise ConfigError("step scale must be positive")
        if self.updater not in ("CCE", "MLCCE"):
            raise ConfigError(f"unknown updater {self.updater!r}")

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "warm_start": self.warm_start,
            "step_scale": self.step_scale,
            "step_exponent": self.step_exponent,
            "updater": self.updater,
            "stop_at_imbalance": self.stop_at_imbalance,
            "net_widths": list(self.net_widths),
            "train": {
                "epochs": self.train.epochs,
                "learning_rate": self.train.learning_rate
                if np.isscalar(self.train.learning_rate)
                else list(self.train.learning_rate),
                "optimizer": self.train.optimizer,
                "init_seed": self.train.init_seed,
            },
            "step_bounds": {
                "eta_lo": self.step_bounds.eta_lo,
                "eta_hi": self.step_bounds.eta_hi,
            },
            "warm_start_params": self.warm_start_params,
            "net_seed": self.net_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClockConfig":
        train_cfg = d.get("train", {})
        bounds = d.get("step_bounds", {})
        lr = train_cfg.get("learning_rate", 0.01)
        return cls(
            max_iterations=int(d.get("max_iterations", 40)),
            warm_start=int(d.get("warm_start", 5)),
            step_scale=float(d.get("step_scale", 0.5)),
            step_exponent=float(d.get("step_exponent", 0.6)),
            updater=d.get("updater", "CCE"),
            stop_at_imbalance=d.get("stop_at_imbalance"),
            net_widths=tuple(d.get("net_widths", (8, 8))),
            train=TrainConfig(
                epochs=int(train_cfg.get("epochs", 30)),
                learning_rate=lr if np.isscalar(lr) else tuple(lr),
                optimizer=train_cfg.get("optimizer", "adam"),
                init_seed=int(train_cfg.get("init_seed", 0)),
            ),
            step_bounds=StepBounds(
                eta_lo=float(bounds.get("eta_lo", 0.01)),
                eta_hi=float(bounds.get("eta_hi", 1.0)),
            ),
            warm_start_params=bool(d.get("warm_start_params", True)),
            net_seed=int(d.get("net_seed", 0)),
        )


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    prices: np.ndarray
    packages: np.ndarray
    rho_imb: float
    eta: float
    updater: str  # "cce" | "mlcce" | "mlcce_fallback"


@dataclass
class ClockTrace:
    """Per-iteration history plus the best (lowest-imbalance) iterate."""

    records: list
    best_iteration: int
    best_imbalance: float

    def prices_at(self, t: int) -> np.ndarray:
        return self.records[t].prices

    def best_packages(self) -> np.ndarray:
        return self.records[self.best_iteration].packages

    def best_prices(self) -> np.ndarray:
        return self.records[self.best_iteration].prices

    def rho_series(self) -> np.ndarray:
        return np.array([r.rho_imb for r in self.records])

    def running_best(self) -> np.ndarray:
        return np.minimum.accumulate(self.rho_series())


def initial_prices(instance: MarketInstance) -> np.ndarray:
    """Componentwise midpoint of the external sell/buy prices."""
    return (instance.external_sell_price + instance.external_buy_price) / 2.0


def step_size(t: int, scale: float, exponent: float) -> float:
    """Power-law schedule scale / t**exponent, defined for t >= 1."""
    if t < 1:
        raise ConfigError("step schedule is defined for t >= 1")
    return scale / t**exponent


def schedule_is_robbins_monro(exponent: float) -> bool:
    """p-series criterion: sum of steps diverges, sum of squares converges."""
    return 0.5 < exponent <= 1.0


def cce_price_update(prices, responses, eta: float) -> np.ndarray:
    """Plain subgradient step: prices move with the aggregate response."""
    prices = as_price_vector(prices)
    return prices + eta * imbalance(responses)


def elicit_responses(instance: MarketInstance, prices, n_jobs: int = 1) -> np.ndarray:
    """Query every prosumer's preferred package at the posted prices."""
    prices = as_price_vector(prices, instance.num_products)
    if n_jobs == 1:
        rows = [p.best_response(prices) for p in instance.prosumers]
    else:
        rows = Parallel(n_jobs=n_jobs)(
            delayed(_query_one)(p, prices) for p in instance.prosumers
        )
    return np.stack(rows)


def _query_one(model, prices):
    return model.best_response(prices)


def dual_value(prices, instance: MarketInstance, n_jobs: int = 1):
    """Lagrange dual at the prices: (value, subgradient).

    The value sums each prosumer's maximal utility; the subgradient is the
    negated aggregate preferred package.
    """
    responses = elicit_responses(instance, prices, n_jobs)
    prices = as_price_vector(prices, instance.num_products)
    g = 0.0
    for i, model in enumerate(instance.prosumers):
        g += float(model.value_batch(responses[i][None, :])[0] - prices @ responses[i])
    return g, -imbalance(responses)


def run_clock(
    instance: MarketInstance,
    cfg: ClockConfig,
    n_jobs: int = 1,
    diagnostics_dir=None,
) -> ClockTrace:
    """Run the clock phase and return the trace with the best iterate.

    Deterministic for a fixed config regardless of ``n_jobs``: responses are
    reduced in ascending prosumer order and training is seeded per prosumer.
    """
    prices = initial_prices(instance)
    n = instance.num_prosumers
    datasets = [QueryDataset(prosumer_id=i) for i in range(n)]
    nets: list[ValueNetParams | None] = [None] * n
    records: list[IterationRecord] = []
    best_rho = np.inf
    best_t = 0
    diag = Path(diagnostics_dir) if diagnostics_dir is not None else None
    if diag is not None:
        diag.mkdir(parents=True, exist_ok=True)

    for t in range(cfg.max_iterations):
        responses = elicit_responses(instance, prices, n_jobs)
        rho = imbalance_index(responses, instance)
        for i in range(n):
            datasets[i].append(prices, responses[i])
        if rho < best_rho:
            best_rho = rho
            best_t = t

        eta = step_size(max(t, 1), cfg.step_scale, cfg.step_exponent)
        updater = "cce"
        new_prices = None
        if cfg.updater == "MLCCE" and t >= cfg.warm_start:
            try:
                _train_all(instance, cfg, datasets, nets, t, diag, n_jobs)
                bounds = cfg.step_bounds.at(t)
                fss = [p.feasible_set for p in instance.prosumers]
                new_prices = mlcce_price_update(prices, responses, nets, fss, bounds)
                eta = _implied_step(prices, new_prices, responses)
                updater = "mlcce"
            except Exception:
                new_prices = None
                updater = "mlcce_fallback"
                eta = step_size(max(t, 1), cfg.step_scale, cfg.step_exponent)
        if new_prices is None:
            new_prices = cce_price_update(prices, responses, eta)

        records.append(
            IterationRecord(t, prices.copy(), responses, rho, eta, updater)
        )
        prices = new_prices
        if cfg.stop_at_imbalance is not None and rho < cfg.stop_at_imbalance:
            break
    return ClockTrace(records=records, best_iteration=best_t, best_imbalance=best_rho)


def _implied_step(prices, new_prices, responses) -> float:
    delta = imbalance(responses)
    norm = float(delta @ delta)
    if norm == 0.0:
        return 0.0
    return float((new_prices - prices) @ delta / norm)


def _train_all(instance, cfg, datasets, nets, t, diag, n_jobs) -> None:
    jobs = []
    for i, model in enumerate(instance.prosumers):
        theta0 = nets[i]
        train_cfg = cfg.train
        if theta0 is None or not cfg.warm_start_params:
            theta0 = init_value_net(
                model.feasible_set,
                instance.external_buy_price,
                instance.external_sell_price,
                widths=cfg.net_widths,
                seed=cfg.net_seed * 100003 + i,
            )
            # a fresh net needs a longer budget than a warm-started one
            train_cfg = TrainConfig(
                epochs=max(cfg.cold_start_epochs, cfg.train.epochs),
                learning_rate=cfg.train.learning_rate,
                optimizer=cfg.train.optimizer,
                init_seed=cfg.train.init_seed,
            )
        jobs.append((datasets[i], model.feasible_set, train_cfg, theta0))
    if n_jobs == 1:
        results = [train(*job) for job in jobs]
    else:
        results = Parallel(n_jobs=n_jobs)(delayed(train)(*job) for job in jobs)
    for i, (theta, losses) in enumerate(results):
        nets[i] = theta
        if diag is not None:
            path = diag / f"train_curve_p{i:03d}_t{t:03d}.csv"
            lines = ["epoch,loss"] + [f"{e},{val!r}" for e, val in enumerate(losses)]
            path.write_text("\n".join(lines) + "\n")


def trace_to_csv(trace: ClockTrace, path) -> None:
    """Write the per-iteration trace: iteration, rho_imb, prices, step."""
    m = trace.records[0].prices.shape[0]
    header = ["iteration", "rho_imb"] + [f"price_{j}" for j in range(m)] + ["eta"]
    lines = [",".join(header)]
    for r in trace.records:
        cells = [str(r.iteration), repr(float(r.rho_imb))]
        cells += [repr(float(v)) for v in r.prices]
        cells.append(repr(float(r.eta)))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_run_metadata(path, cfg: ClockConfig, seed: int, wall_time_s: float, extra=None) -> None:
    doc = {
        "config": cfg.to_dict(),
        "seed": seed,
        "wall_time_s": wall_time_s,
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
