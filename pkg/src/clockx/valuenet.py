"""Monotone bounded-ReLU value estimator and its exact utility maximizer.

The network keeps all hidden and output weights nonnegative and clips every
hidden unit to [0, cutoff], which makes the estimated value monotone
nondecreasing in the package.  Affine input/output maps extend the domain and
range to negative quantities without touching that structure.  Utility
maximization over a feasible set is solved exactly as a small mixed-integer
program over unit activation states (branch and bound on the two indicator
binaries per unit, LP relaxations at the nodes), or by grid enumeration when
the activation-pattern count exceeds the budget.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import Bounds, LinearConstraint as _MilpLinear, milp

from .errors import FeasibilityError, ModelDefinitionError
from .feasible import FeasibleSet

__all__ = [
    "ValueNetParams",
    "ParamGradients",
    "UtilityMaxResult",
    "forward",
    "forward_batch",
    "grad_params",
    "maximize_utility",
    "init_value_net",
    "save_checkpoint",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)

CUTOFF_MIN = 1e-3
CHECKPOINT_SCHEMA = "clockx/valuenet/1"
# exact search only while 3^units (activation states) stays below this
PATTERN_BUDGET = 3**10


@dataclass
class ValueNetParams:
    """Weights, biases and cutoffs of the monotone value network.

    ``hidden_weights[k]`` has shape (n_k, n_{k-1}) with n_0 = m.  The input
    map sends the feasible box to [0, 1]^m; the output map rescales the final
    linear unit to the prosumer's value range.
    """

    hidden_weights: tuple
    hidden_biases: tuple
    cutoffs: tuple
    output_weight: np.ndarray
    output_bias: float
    input_shift: np.ndarray
    input_scale: np.ndarray
    output_scale: float = 1.0
    output_offset: float = 0.0

    def __post_init__(self):
        self.hidden_weights = tuple(np.asarray(w, dtype=float) for w in self.hidden_weights)
        self.hidden_biases = tuple(np.asarray(b, dtype=float) for b in self.hidden_biases)
        self.cutoffs = tuple(np.asarray(t, dtype=float) for t in self.cutoffs)
        self.output_weight = np.asarray(self.output_weight, dtype=float)
        self.input_shift = np.asarray(self.input_shift, dtype=float)
        self.input_scale = np.asarray(self.input_scale, dtype=float)
        self.validate()

    def validate(self):
        if len(self.hidden_weights) != len(self.hidden_biases) or len(
            self.hidden_weights
        ) != len(self.cutoffs):
            raise ModelDefinitionError("layer structure arrays disagree")
        prev = self.input_shift.shape[0]
        for w, b, t in zip(self.hidden_weights, self.hidden_biases, self.cutoffs):
            if w.shape != (b.shape[0], prev) or t.shape != b.shape:
                raise ModelDefinitionError("layer shapes disagree")
            if np.any(w < 0):
                raise ModelDefinitionError("hidden weights must be nonnegative")
            if np.any(t < CUTOFF_MIN):
                raise ModelDefinitionError(f"cutoffs must be >= {CUTOFF_MIN}")
            prev = b.shape[0]
        if self.output_weight.shape != (prev,):
            raise ModelDefinitionError("output weight shape disagrees")
        if np.any(self.output_weight < 0):
            raise ModelDefinitionError("output weights must be nonnegative")
        if np.any(self.input_scale <= 0):
            raise ModelDefinitionError("input scale must be positive")
        if self.output_scale <= 0:
            raise ModelDefinitionError("output scale must be positive")

    @property
    def num_inputs(self) -> int:
        return self.input_shift.shape[0]

    @property
    def layer_widths(self) -> tuple:
        return tuple(b.shape[0] for b in self.hidden_biases)

    @property
    def num_hidden_units(self) -> int:
        return int(sum(self.layer_widths))

    def copy(self) -> "ValueNetParams":
        return ValueNetParams(
            tuple(w.copy() for w in self.hidden_weights),
            tuple(b.copy() for b in self.hidden_biases),
            tuple(t.copy() for t in self.cutoffs),
            self.output_weight.copy(),
            self.output_bias,
            self.input_shift.copy(),
            self.input_scale.copy(),
            self.output_scale,
            self.output_offset,
        )

    def to_dict(self) -> dict:
        return {
            "hidden_weights": [w.tolist() for w in self.hidden_weights],
            "hidden_biases": [b.tolist() for b in self.hidden_biases],
            "cutoffs": [t.tolist() for t in self.cutoffs],
            "output_weight": self.output_weight.tolist(),
            "output_bias": self.output_bias,
            "input_shift": self.input_shift.tolist(),
            "input_scale": self.input_scale.tolist(),
            "output_scale": self.output_scale,
            "output_offset": self.output_offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValueNetParams":
        return cls(
            hidden_weights=tuple(np.asarray(w, dtype=float) for w in d["hidden_weights"]),
            hidden_biases=tuple(np.asarray(b, dtype=float) for b in d["hidden_biases"]),
            cutoffs=tuple(np.asarray(t, dtype=float) for t in d["cutoffs"]),
            output_weight=np.asarray(d["output_weight"], dtype=float),
            output_bias=float(d["output_bias"]),
            input_shift=np.asarray(d["input_shift"], dtype=float),
            input_scale=np.asarray(d["input_scale"], dtype=float),
            output_scale=float(d["output_scale"]),
            output_offset=float(d["output_offset"]),
        )


@dataclass
class ParamGradients:
    """Gradient of the network output with respect to every parameter."""

    hidden_weights: tuple
    hidden_biases: tuple
    cutoffs: tuple
    output_weight: np.ndarray
    output_bias: float


@dataclass
class UtilityMaxResult:
    """Outcome of utility maximization: argmax, value, and activation states."""

    x: np.ndarray
    objective: float
    alpha: tuple | None
    beta: tuple | None
    status: str  # "exact" | "enumerated"


# -- evaluation -----------------------------------------------------------------


def _normalize(params: ValueNetParams, pts: np.ndarray) -> np.ndarray:
    z = (pts - params.input_shift) * params.input_scale
    if np.any(z < -1e-9) or np.any(z > 1.0 + 1e-9):
        logger.warning("input outside the network's normalized domain; clipping")
        z = np.clip(z, 0.0, 1.0)
    return z


def forward_batch(params: ValueNetParams, pts: np.ndarray) -> np.ndarray:
    """Estimated values at an (N, m) array of packages."""
    h = _normalize(params, np.asarray(pts, dtype=float))
    for w, b, t in zip(params.hidden_weights, params.hidden_biases, params.cutoffs):
        h = np.clip(h @ w.T + b, 0.0, t)
    raw = h @ params.output_weight + params.output_bias
    return params.output_scale * raw + params.output_offset


def forward(params: ValueNetParams, x) -> float:
    return float(forward_batch(params, np.asarray(x, dtype=float)[None, :])[0])


def grad_params(params: ValueNetParams, x) -> ParamGradients:
    """Analytic gradient of the estimated value at x w.r.t. all parameters.

    Clip kinks use the zero subgradient; a saturated unit passes gradient to
    its cutoff instead of its weights.
    """
    z = _normalize(params, np.asarray(x, dtype=float)[None, :])[0]
    acts = [z]
    pre = []
    h = z
    for w, b, t in zip(params.hidden_weights, params.hidden_biases, params.cutoffs):
        s = w @ h + b
        pre.append(s)
        h = np.clip(s, 0.0, t)
        acts.append(h)

    g_out_w = params.output_scale * acts[-1]
    g_out_b = params.output_scale
    gamma = params.output_scale * params.output_weight  # d value / d y_K

    g_w, g_b, g_t = [], [], []
    for k in range(len(params.hidden_weights) - 1, -1, -1):
        s, t = pre[k], params.cutoffs[k]
        linear = (s > 0.0) & (s < t)
        saturated = s > t
        ds = gamma * linear
        g_w.append(np.outer(ds, acts[k]))
        g_b.append(ds.copy())
        g_t.append(gamma * saturated)
        gamma = params.hidden_weights[k].T @ ds
    return ParamGradients(
        hidden_weights=tuple(reversed(g_w)),
        hidden_biases=tuple(reversed(g_b)),
        cutoffs=tuple(reversed(g_t)),
        output_weight=g_out_w,
        output_bias=g_out_b,
    )


# -- big-M interval propagation ---------------------------------------------------


def activation_intervals(params: ValueNetParams) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer (s_lo, s_hi) pre-activation ranges from forward intervals."""
    y_lo = np.zeros(params.num_inputs)
    y_hi = np.ones(params.num_inputs)
    out = []
    for w, b, t in zip(params.hidden_weights, params.hidden_biases, params.cutoffs):
        s_lo = w @ y_lo + b
        s_hi = w @ y_hi + b
        out.append((s_lo, s_hi))
        y_lo = np.clip(s_lo, 0.0, t)
        y_hi = np.clip(s_hi, 0.0, t)
    return out


def unit_big_m(params: ValueNetParams) -> list[np.ndarray]:
    """Per-unit big-M constants covering the pre-activation range."""
    out = []
    for (s_lo, s_hi), t in zip(activation_intervals(params), params.cutoffs):
        out.append(np.maximum.reduce([np.abs(s_lo), np.abs(s_hi), t]) + 1.0)
    return out


# -- utility maximization ----------------------------------------------------------


def maximize_utility(
    params: ValueNetParams,
    prices,
    fs: FeasibleSet,
    mode: str = "auto",
    pattern_budget: float = PATTERN_BUDGET,
    grid_budget: float = 1e7,
) -> UtilityMaxResult:
    """Exact maximizer of estimated value minus payment over the feasible set.

    ``mode``: "exact" forces the mixed-integer search, "grid" forces
    enumeration over the set's grid (status "enumerated"), "auto" picks the
    exact route while the activation-pattern count 3^units fits the budget.
    """
    prices = np.asarray(prices, dtype=float)
    if mode not in ("auto", "exact", "grid"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "auto":
        mode = "exact" if 3.0**params.num_hidden_units <= pattern_budget else "grid"
    if mode == "grid":
        pts = fs.grid_points(grid_budget)
        if len(pts) == 0:
            raise FeasibilityError("feasible set has no grid points")
        util = forward_batch(params, pts) - pts @ prices
        order = np.argmax(util)
        return UtilityMaxResult(pts[order].copy(), float(util[order]), None, None, "enumerated")
    return _maximize_exact(params, prices, fs)


def _maximize_exact(params: ValueNetParams, prices, fs: FeasibleSet) -> UtilityMaxResult:
    patterns = fs.binary_patterns or (np.ones(fs.dimension, dtype=bool),)
    best = None
    for pat in patterns:
        res = _milp_one_pattern(params, prices, fs, pat)
        if res is None:
            continue
        if best is None or res.objective > best.objective + 1e-12:
            best = res
    if best is None:
        raise FeasibilityError("feasible set is empty")
    return best


def _milp_one_pattern(params, prices, fs, pattern) -> UtilityMaxResult | None:
    m = fs.dimension
    widths = params.layer_widths
    total = params.num_hidden_units
    n_var = m + 3 * total  # x, then y, then alpha, then beta
    y0 = m
    a0 = m + total
    b0 = m + 2 * total

    big_m = unit_big_m(params)
    rows, lb, ub = [], [], []

    def add(row, lo, hi):
        rows.append(row)
        lb.append(lo)
        ub.append(hi)

    offset = 0
    for k, width in enumerate(widths):
        w = params.hidden_weights[k]
        b = params.hidden_biases[k]
        t = params.cutoffs[k]
        mk = big_m[k]
        for j in range(width):
            # s_{k,j} as affine coefficients over the variable vector
            s_row = np.zeros(n_var)
            s_const = b[j]
            if k == 0:
                s_row[:m] = w[j] * params.input_scale
                s_const -= float(w[j] @ (params.input_scale * params.input_shift))
            else:
                prev_offset = offset - widths[k - 1]
                s_row[y0 + prev_offset : y0 + offset] = w[j]
            u = offset + j
            # y <= alpha * t
            row = np.zeros(n_var)
            row[y0 + u] = 1.0
            row[a0 + u] = -t[j]
            add(row, -np.inf, 0.0)
            # y <= s + M (1 - alpha)
            row = -s_row.copy()
            row[y0 + u] += 1.0
            row[a0 + u] += mk[j]
            add(row, -np.inf, mk[j] + s_const)
            # y >= beta * t
            row = np.zeros(n_var)
            row[y0 + u] = 1.0
            row[b0 + u] = -t[j]
            add(row, 0.0, np.inf)
            # y >= s + (t - M) beta
            row = -s_row.copy()
            row[y0 + u] += 1.0
            row[b0 + u] -= t[j] - mk[j]
            add(row, s_const, np.inf)
        offset += width

    for c in fs.linear_constraints:
        row = np.zeros(n_var)
        row[:m] = c.a
        add(row, c.lo, c.hi)

    x_lo = np.where(pattern, fs.box_lower, 0.0)
    x_hi = np.where(pattern, fs.box_upper, 0.0)
    if np.any(x_lo > x_hi):
        return None
    var_lo = np.concatenate([x_lo, np.zeros(total), np.zeros(2 * total)])
    var_hi = np.concatenate(
        [x_hi, np.concatenate(params.cutoffs), np.ones(2 * total)]
    )

    cost = np.zeros(n_var)
    cost[:m] = prices  # minimize <prices, x> - scale * w_out . y_K
    last_offset = total - widths[-1]
    cost[y0 + last_offset : y0 + total] = -params.output_scale * params.output_weight
    integrality = np.concatenate(
        [np.zeros(m + total), np.ones(2 * total)]
    )

    res = milp(
        cost,
        constraints=_MilpLinear(np.stack(rows), np.asarray(lb), np.asarray(ub))
        if rows
        else None,
        bounds=Bounds(var_lo, var_hi),
        integrality=integrality,
    )
    if res.status != 0:
        return None
    x = np.asarray(res.x[:m])
    objective = float(forward_batch(params, x[None, :])[0] - prices @ x)
    alpha_flat = np.round(res.x[a0 : a0 + total]).astype(int)
    beta_flat = np.round(res.x[b0 : b0 + total]).astype(int)
    alphas, betas = [], []
    pos = 0
    for width in widths:
        alphas.append(alpha_flat[pos : pos + width])
        betas.append(beta_flat[pos : pos + width])
        pos += width
    return UtilityMaxResult(x, objective, tuple(alphas), tuple(betas), "exact")


# -- initialization and checkpoints -------------------------------------------------


def init_value_net(
    fs: FeasibleSet,
    external_buy,
    external_sell,
    widths=(8, 8),
    seed: int = 0,
) -> ValueNetParams:
    """Fresh parameters scaled to the prosumer's likely value range.

    Weights start at a jittered 1/fan_in ramp so the initial estimate rises
    roughly linearly across the box with marginals on the price scale; the
    input map is taken from the box, the output map from a value-range
    estimate at the external prices.
    """
    rng = np.random.default_rng(seed)
    m = fs.dimension
    span = np.maximum(fs.box_upper - fs.box_lower, 1e-9)
    buy = np.asarray(external_buy, dtype=float)
    sell = np.asarray(external_sell, dtype=float)
    hi_est = float(buy @ np.maximum(fs.box_upper, 0.0))
    lo_est = float(sell @ np.minimum(fs.box_lower, 0.0))
    scale = max(hi_est - lo_est, 1.0)

    weights, biases, cutoffs = [], [], []
    prev = m
    for width in widths:
        base = np.full((width, prev), 1.0 / prev)
        weights.append(base + rng.uniform(0.0, 0.5 / prev, size=(width, prev)))
        biases.append(np.zeros(width))
        cutoffs.append(np.ones(width))
        prev = width
    return ValueNetParams(
        hidden_weights=tuple(weights),
        hidden_biases=tuple(biases),
        cutoffs=tuple(cutoffs),
        output_weight=np.full(prev, 1.0 / prev)
        + rng.uniform(0.0, 0.5 / prev, size=prev),
        output_bias=0.0,
        input_shift=fs.box_lower.copy(),
        input_scale=1.0 / span,
        output_scale=scale,
        output_offset=lo_est,
    )


def save_checkpoint(nets: list[ValueNetParams], path) -> None:
    doc = {"schema": CHECKPOINT_SCHEMA, "networks": [p.to_dict() for p in nets]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_checkpoint(path) -> list[ValueNetParams]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ModelDefinitionError(f"unsupported checkpoint schema {doc.get('schema')!r}")
    return [ValueNetParams.from_dict(d) for d in doc["networks"]]
