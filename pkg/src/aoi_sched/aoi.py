"""AoI dynamics, the geometric AoI cost, and the closed-form Whittle index.

The decoupled single-sensor problem charges f(delta) = beta * alpha^delta
per step plus a Lagrangian price W per transmission attempt; its optimal
policy transmits exactly when the AoI reaches a threshold. This module
carries the closed forms derived from that structure (threshold value
function, average cost, Whittle index, stationary AoI distribution) plus an
independent value-iteration oracle for the index.

All operations require alpha * (1 - p) < 1: with a faster divergence rate
than the channel can offset, the geometric series behind every closed form
diverges (and the estimation error is unstable anyway).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import OracleError, StabilityError

# switch scalar power evaluation to the log scale for very old states to
# dodge intermediate overflow in diagnostics
_LOG_SCALE_DELTA = 200


@dataclass(frozen=True)
class AoiFunction:
    """Geometric AoI cost beta * alpha^delta with channel success rate p."""

    alpha: float
    beta: float
    p: float

    def __post_init__(self) -> None:
        if not (self.alpha > 1.0):
            raise ValueError(f"alpha={self.alpha} must exceed 1")
        if not (self.beta > 0.0):
            raise ValueError(f"beta={self.beta} must be positive")
        if not (0.0 < self.p <= 1.0):
            raise ValueError(f"p={self.p} outside (0, 1]")

    @property
    def stable(self) -> bool:
        return self.alpha * (1.0 - self.p) < 1.0


@dataclass(frozen=True)
class ThresholdPolicy:
    """Transmit exactly when the AoI is at or above ``delta_th``."""

    delta_th: int

    def __post_init__(self) -> None:
        if self.delta_th < 1:
            raise ValueError("delta_th must be a positive integer")


def aoi_step(delta: int, gamma: int) -> int:
    """One AoI transition: reset to 1 on a delivery, otherwise age by one."""
    if delta < 1:
        raise ValueError("delta must be a positive integer")
    return 1 if gamma else delta + 1


def _pow(alpha: float, delta: float) -> float:
    if delta > _LOG_SCALE_DELTA:
        try:
            return math.exp(delta * math.log(alpha))
        except OverflowError:
            return math.inf
    return alpha**delta


def f_value(fn: AoiFunction, delta: int) -> float:
    """Evaluate the AoI cost beta * alpha^delta."""
    if delta < 1:
        raise ValueError("delta must be a positive integer")
    return fn.beta * _pow(fn.alpha, delta)


def _require_stable(fn: AoiFunction) -> None:
    if not fn.stable:
        raise StabilityError(
            f"alpha*(1-p) = {fn.alpha * (1.0 - fn.p):.6g} >= 1; "
            "index/value formulas diverge"
        )


def whittle_index(fn: AoiFunction, delta: int) -> float:
    """Closed-form Whittle index of the AoI-cost sensor at AoI ``delta``.

    Strictly increasing in delta (the indexability property); may be
    negative at small delta for weak channels, which is harmless because
    scheduling only compares indexes.
    """
    if delta < 1:
        raise ValueError("delta must be a positive integer")
    _require_stable(fn)
    a, b, p = fn.alpha, fn.beta, fn.p
    bracket = p * delta / (1.0 + a * p - a) - 1.0 / (a - 1.0)
    return b * p * _pow(a, delta + 1) * bracket + b * p * a / (a - 1.0)


def whittle_index_table(fn: AoiFunction, max_delta: int) -> np.ndarray:
    """whittle_index for delta = 1..max_delta; index 0 unused (zero)."""
    _require_stable(fn)
    a, b, p = fn.alpha, fn.beta, fn.p
    d = np.arange(max_delta + 1, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        bracket = p * d / (1.0 + a * p - a) - 1.0 / (a - 1.0)
        tab = b * p * np.power(a, d + 1.0) * bracket + b * p * a / (a - 1.0)
    tab[0] = 0.0
    return tab


def threshold_average_cost(fn: AoiFunction, tp: ThresholdPolicy, lagrange_w: float) -> float:
    """Long-run average of f(delta) + W * u under a threshold policy.

    Equals the stationary-distribution average sum_d psi(d) f(d) plus W
    times the attempt rate. The middle term carries alpha - 1, not its
    negation: that sign is forced by V(1) = 0 together with the value
    function's below-threshold branch, and is the one that makes adjacent
    thresholds tie exactly at the Whittle index.
    """
    _require_stable(fn)
    a, b, p = fn.alpha, fn.beta, fn.p
    dth = tp.delta_th
    num = (
        lagrange_w
        + p * b * (_pow(a, dth) - a) / (a - 1.0)
        + p * b * _pow(a, dth) / (1.0 - a + p * a)
    )
    return num / (1.0 + p * dth - p)


def threshold_value_function(
    fn: AoiFunction, tp: ThresholdPolicy, lagrange_w: float, delta: int
) -> float:
    """Relative value of AoI ``delta`` under a threshold policy, with V(1) = 0.

    Piecewise: linear-plus-geometric below the threshold, geometric above;
    the two branches are stitched at the threshold so the policy-evaluation
    Bellman equation holds at every state.
    """
    if delta < 1:
        raise ValueError("delta must be a positive integer")
    _require_stable(fn)
    a, b, p = fn.alpha, fn.beta, fn.p
    dth = tp.delta_th
    theta = threshold_average_cost(fn, tp, lagrange_w)

    def v_active(d: int) -> float:
        return b * _pow(a, d) / (1.0 - a + p * a) + (lagrange_w - theta) / p

    if delta >= dth:
        return v_active(delta)
    v_res = v_active(dth) - dth * theta
    return b * (_pow(a, dth) - _pow(a, delta)) / (a - 1.0) + delta * theta + v_res


def threshold_transmission_rate(p: float, tp: ThresholdPolicy) -> float:
    """Long-run attempt frequency of a threshold policy: 1 / (dth*p + 1 - p)."""
    if not (0.0 < p <= 1.0):
        raise ValueError(f"p={p} outside (0, 1]")
    return 1.0 / (tp.delta_th * p + 1.0 - p)


def stationary_aoi_distribution(
    p: float, tp: ThresholdPolicy, delta_cap: int
) -> tuple[np.ndarray, float]:
    """Stationary AoI law of a threshold policy, truncated at ``delta_cap``.

    Returns (psi, tail): psi[d] is the mass at AoI d for d = 1..delta_cap
    (psi[0] unused) and ``tail`` is the analytic mass beyond the cap, so
    psi.sum() + tail == 1 exactly.
    """
    if not (0.0 < p <= 1.0):
        raise ValueError(f"p={p} outside (0, 1]")
    dth = tp.delta_th
    if delta_cap < dth:
        raise ValueError("delta_cap must be at least the threshold")
    denom = dth * p + 1.0 - p
    psi = np.zeros(delta_cap + 1)
    d = np.arange(1, delta_cap + 1)
    below = d < dth
    psi[1:][below] = p / denom
    psi[1:][~below] = p * (1.0 - p) ** (d[~below] - dth) / denom
    tail = (1.0 - p) ** (delta_cap + 1 - dth) / denom
    return psi, tail


def write_distribution_csv(path: str, psi: np.ndarray) -> None:
    """Dump a (delta, mass) table for plotting."""
    with open(path, "w") as fh:
        fh.write("delta,mass\n")
        for d in range(1, len(psi)):
            fh.write(f"{d},{float(psi[d])!r}\n")


# ---------------------------------------------------------------------------
# numeric Whittle index oracle (bisection over relative value iteration)
# ---------------------------------------------------------------------------


def _rvi_values(
    costs: np.ndarray,
    p: float,
    w: float,
    v0: np.ndarray | None,
    span_tol: float,
    max_sweeps: int,
) -> np.ndarray:
    """Relative values of the truncated two-action AoI chain at price ``w``.

    States are AoI 1..K (cost vector indexed from 0); passive ages by one,
    active resets with probability p; the top state self-loops. Iterates the
    damped Bellman operator (1 - tau) V + tau T V, which has the same bias
    fixed point but converges even when the induced chain is periodic
    (e.g. a threshold policy at p = 1). Values are normalized to v[0] = 0.

    Geometric costs span many orders of magnitude, so the stop criterion
    measures every state's update relative to that state's own cost scale;
    an absolute criterion would declare victory while the cheap states
    (the ones the index probe reads) are still relaxing.
    """
    tau = 0.9
    k = costs.shape[0]
    nxt = np.minimum(np.arange(1, k + 1), k - 1)
    inv_scale = 1.0 / np.maximum(costs + abs(w), np.finfo(float).tiny)
    v = np.zeros(k) if v0 is None else v0.copy()
    for _ in range(max_sweeps):
        vnext = v[nxt]
        active = costs + w + p * v[0] + (1.0 - p) * vnext
        passive = costs + vnext
        vnew = (1.0 - tau) * v + tau * np.minimum(active, passive)
        vnew -= vnew[0]
        if float(np.max(np.abs(vnew - v) * inv_scale)) < span_tol:
            return vnew
        v = vnew
    raise OracleError("relative value iteration did not converge")


def numeric_whittle_index(
    costs: np.ndarray,
    p: float,
    delta: int,
    bracket_hint: float | None = None,
    span_tol: float = 1e-10,
    rel_tol: float = 1e-8,
    max_sweeps: int = 100_000,
) -> float:
    """Whittle index at state ``delta`` for an arbitrary per-AoI cost table.

    Finds, by bisection, the price at which the active and passive actions
    tie in the truncated average-cost chain. Costs are normalized by their
    largest entry before iterating (the index scales linearly with costs)
    so the span criterion is meaningful at any cost magnitude. Independent
    of any closed form except for the optional bracket hint.
    """
    costs = np.asarray(costs, dtype=float)
    k = costs.shape[0]
    if delta < 1 or delta >= k:
        raise ValueError(f"delta={delta} must satisfy 1 <= delta < {k}")
    if not (0.0 < p <= 1.0):
        raise ValueError(f"p={p} outside (0, 1]")
    if not np.all(np.isfinite(costs)):
        raise OracleError("cost table overflows float64; reduce delta_max")
    scale = float(np.max(np.abs(costs)))
    if scale <= 0.0:
        raise OracleError("cost table is identically zero")
    costs = costs / scale

    v: np.ndarray | None = None

    def advantage(w: float) -> float:
        # active-minus-passive value at `delta`; positive means idling wins
        nonlocal v
        v = _rvi_values(costs, p, w, v, span_tol, max_sweeps)
        return w - p * (v[delta] - v[0])

    # seed the bracket at the probed state's own cost scale; a price far
    # above it pushes the tie threshold toward the cap, where the induced
    # cycle is long and value iteration mixes slowly
    ref = float(costs[delta - 1])
    hint = ref if bracket_hint is None else abs(bracket_hint) / scale
    lo, hi = -hint - ref, 10.0 * hint + ref
    for _ in range(200):
        if advantage(lo) < 0.0:
            break
        lo = 2.0 * lo - ref
    else:
        raise OracleError("failed to bracket the index from below")
    for _ in range(200):
        if advantage(hi) > 0.0:
            break
        hi = 2.0 * hi + ref
    else:
        raise OracleError("failed to bracket the index from above")
    for _ in range(300):
        if hi - lo <= rel_tol * max(abs(lo), abs(hi)) or hi - lo <= 1e-14 * ref:
            break
        mid = 0.5 * (lo + hi)
        if advantage(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi) * scale


def whittle_index_numeric(
    fn: AoiFunction, delta: int, delta_max: int = 400, **kwargs
) -> float:
    """Value-iteration oracle for ``whittle_index`` on the AoI-cost chain."""
    _require_stable(fn)
    d = np.arange(1, delta_max + 1, dtype=float)
    costs = fn.beta * np.power(fn.alpha, d)
    if not np.all(np.isfinite(costs)):
        raise OracleError("AoI cost table overflows float64; reduce delta_max")
    hint = whittle_index(fn, delta)
    return numeric_whittle_index(costs, fn.p, delta, bracket_hint=hint, **kwargs)
