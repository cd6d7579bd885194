"""Scheduling policies behind one uniform decision interface.

Every policy consumes the current per-sensor AoI vector and returns the set
of sensors granted channel access this step (at most the budget M; exactly
M for the index policies, since costs increase with AoI and idling a slot
never helps). Ties are always broken toward the lowest sensor index so
decision sequences are deterministic and testable.

Batch variants operate on a (runs, N) AoI matrix and return a boolean
schedule mask; the Monte Carlo engine is vectorized across independent
runs through this interface.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass

import numpy as np

from .aoi import AoiFunction, numeric_whittle_index, whittle_index_table
from .errors import FeasibilityError, ResourceBudgetError, StabilityError
from .plants import (
    CharParams,
    PlantModel,
    SteadyStateFilter,
    characteristic_params,
    error_trace_table,
    steady_state_filter,
)

POLICY_KINDS = (
    "lightweight",
    "aoi-greedy",
    "voi-greedy",
    "aoi-whittle",
    "voi-whittle",
    "round-robin",
    "randomized",
    "dp",
)


@dataclass(frozen=True)
class SensorState:
    """Per-sensor scheduling state: AoI plus (optionally) the error trace."""

    delta: int
    err_trace: float | None = None


@dataclass(frozen=True)
class Decision:
    """Indices scheduled this step; cardinality never exceeds the budget."""

    scheduled: tuple[int, ...]

    def __contains__(self, i: int) -> bool:
        return i in self.scheduled


def _as_deltas(states) -> np.ndarray:
    out = np.asarray(
        [s.delta if isinstance(s, SensorState) else int(s) for s in states],
        dtype=np.int64,
    )
    if np.any(out < 1):
        raise ValueError("AoI values must be positive integers")
    return out


def _top_m_mask(scores: np.ndarray, m: int) -> np.ndarray:
    """Boolean mask of the m largest scores per row, lowest index on ties."""
    order = np.argsort(-scores, axis=1, kind="stable")
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :m], True, axis=1)
    return mask


class Policy:
    """Uniform decision interface; subclasses fill in ``decide_batch``."""

    name = "policy"

    def __init__(self, n: int, m: int):
        if not (1 <= m <= n):
            raise ValueError(f"budget m={m} outside 1..{n}")
        self.n = n
        self.m = m
        self.rng: np.random.Generator | None = None

    def decide_batch(self, deltas: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decide(self, states) -> Decision:
        deltas = _as_deltas(states)
        mask = self.decide_batch(deltas[None, :])[0]
        return Decision(scheduled=tuple(int(i) for i in np.flatnonzero(mask)))

    def reset(self) -> None:
        """Clear per-trajectory decision state (cursors); caches persist."""

    def clone(self) -> "Policy":
        """Shallow copy for a parallel worker; shares immutable tables."""
        dup = copy.copy(self)
        dup.reset()
        return dup


class _ScoreTablePolicy(Policy):
    """Top-M selection by a per-sensor score looked up from an AoI table."""

    def __init__(self, n: int, m: int):
        super().__init__(n, m)
        self._tables: np.ndarray | None = None  # (n, cap+1)

    def _build_tables(self, max_delta: int) -> np.ndarray:
        raise NotImplementedError

    def _scores(self, deltas: np.ndarray) -> np.ndarray:
        dmax = int(deltas.max())
        if self._tables is None or self._tables.shape[1] <= dmax:
            self._tables = self._build_tables(max(64, 2 * dmax))
        return self._tables.T[deltas, np.arange(self.n)[None, :]]

    def decide_batch(self, deltas: np.ndarray) -> np.ndarray:
        return _top_m_mask(self._scores(deltas), self.m)


class LightweightPolicy(_ScoreTablePolicy):
    """Schedule the M sensors with the largest closed-form Whittle indexes.

    Only the scalar characteristic parameters and channel rates enter the
    score, so one decision costs a table lookup plus an O(N log N) sort.
    """

    name = "lightweight"

    def __init__(self, char_params: list[CharParams], probs, m: int):
        super().__init__(len(char_params), m)
        self.fns = [
            AoiFunction(cp.alpha, cp.beta, float(p))
            for cp, p in zip(char_params, probs)
        ]
        for i, fn in enumerate(self.fns):
            if not fn.stable:
                raise StabilityError(
                    f"sensor {i}: alpha*(1-p) = {fn.alpha * (1 - fn.p):.4g} >= 1"
                )

    def _build_tables(self, max_delta: int) -> np.ndarray:
        return np.vstack([whittle_index_table(fn, max_delta) for fn in self.fns])


class AoiGreedyPolicy(Policy):
    """Schedule the M oldest sensors."""

    name = "aoi-greedy"

    def __init__(self, n: int, m: int):
        super().__init__(n, m)

    def decide_batch(self, deltas: np.ndarray) -> np.ndarray:
        return _top_m_mask(deltas.astype(float), self.m)


class VoiGreedyPolicy(_ScoreTablePolicy):
    """Schedule by expected one-step trace reduction p * (Tr P(d+1) - Tr P(1))."""

    name = "voi-greedy"

    def __init__(self, plants: list[PlantModel], filters: list[SteadyStateFilter], m: int):
        super().__init__(len(plants), m)
        self.plants = plants
        self.filters = filters

    def _build_tables(self, max_delta: int) -> np.ndarray:
        rows = []
        for pl, ss in zip(self.plants, self.filters):
            tr = error_trace_table(pl, ss, max_delta + 1)
            rows.append(pl.p * (tr[2 : max_delta + 2] - tr[1]))
        # row index d-1 holds the score at AoI d; prepend unused slot 0
        tabs = np.vstack(rows)
        return np.hstack([np.zeros((self.n, 1)), tabs])


class AoiWhittlePolicy(Policy):
    """Whittle index for the plain (linear) AoI cost: p*d*(d + 2/p - 1)/2."""

    name = "aoi-whittle"

    def __init__(self, probs, m: int):
        probs = np.asarray(probs, dtype=float)
        super().__init__(probs.shape[0], m)
        self.probs = probs

    def decide_batch(self, deltas: np.ndarray) -> np.ndarray:
        d = deltas.astype(float)
        p = self.probs[None, :]
        return _top_m_mask(0.5 * p * d * (d + 2.0 / p - 1.0), self.m)


class VoiWhittlePolicy(Policy):
    """Numeric Whittle index on the trace-of-covariance cost.

    No closed form exists for this cost, so each (sensor, AoI) index comes
    from the bisection / value-iteration oracle. Indexes are cached up to
    ``delta_cap`` and extrapolated geometrically beyond it, which preserves
    the ordering because the index grows monotonically with AoI.
    """

    name = "voi-whittle"

    def __init__(
        self,
        plants: list[PlantModel],
        filters: list[SteadyStateFilter],
        m: int,
        delta_cap: int = 40,
        tail: int = 200,
        use_cache: bool = True,
    ):
        super().__init__(len(plants), m)
        self.delta_cap = delta_cap
        self.use_cache = use_cache
        self.probs = np.array([pl.p for pl in plants])
        self._costs = [
            error_trace_table(pl, ss, delta_cap + tail)[1:]
            for pl, ss in zip(plants, filters)
        ]
        self._cache = np.full((self.n, delta_cap + 1), np.nan)

    def _index(self, i: int, delta: int) -> float:
        cap = self.delta_cap
        if delta <= cap:
            if self.use_cache and np.isfinite(self._cache[i, delta]):
                return float(self._cache[i, delta])
            costs = self._costs[i]
            hint = self.probs[i] * costs[min(delta, len(costs) - 1)]
            w = numeric_whittle_index(costs, self.probs[i], delta, bracket_hint=hint)
            if self.use_cache:
                self._cache[i, delta] = w
            return w
        w_hi = self._index(i, cap)
        w_lo = self._index(i, cap - 1)
        ratio = w_hi / w_lo if w_lo > 0 and w_hi > w_lo else 2.0
        return w_hi * ratio ** (delta - cap)

    def decide_batch(self, deltas: np.ndarray) -> np.ndarray:
        scores = np.empty(deltas.shape)
        for i in range(self.n):
            for d in np.unique(deltas[:, i]):
                scores[deltas[:, i] == d, i] = self._index(i, int(d))
        return _top_m_mask(scores, self.m)


class RoundRobinPolicy(Policy):
    """Cycle through the sensors M at a time."""

    name = "round-robin"

    def __init__(self, n: int, m: int, cursor: int = 0):
        super().__init__(n, m)
        self.cursor = cursor % n

    def reset(self) -> None:
        self.cursor = 0

    def decide_batch(self, deltas: np.ndarray) -> np.ndarray:
        idx = (self.cursor + np.arange(self.m)) % self.n
        self.cursor = (self.cursor + self.m) % self.n
        mask = np.zeros((deltas.shape[0], self.n), dtype=bool)
        mask[:, idx] = True
        return mask


class RandomizedStationaryPolicy(Policy):
    """Schedule sensor i with fixed marginal probability q_i each step.

    Realized by systematic sampling over the cumulative marginals: one
    uniform draw places ceil(sum q) unit-spaced points, and sensor i is
    selected when a point lands in its q_i-wide slice. Inclusion marginals
    are exactly q and the drawn subset never exceeds ceil(sum q) <= M.
    """

    name = "randomized"

    def __init__(self, q, m: int, rng: np.random.Generator | None = None):
        q = np.asarray(q, dtype=float)
        super().__init__(q.shape[0], m)
        if np.any(q <= 0.0) or np.any(q > 1.0):
            raise FeasibilityError("marginals must lie in (0, 1]")
        if float(q.sum()) > m + 1e-9:
            raise FeasibilityError(f"sum of marginals {q.sum():.6g} exceeds budget {m}")
        self.q = q
        self.cum = np.cumsum(q)
        self.total = float(self.cum[-1])
        self.rng = rng

    def decide_batch(self, deltas: np.ndarray) -> np.ndarray:
        if self.rng is None:
            raise RuntimeError("randomized policy needs an rng before deciding")
        b = deltas.shape[0]
        u = self.rng.random(b)
        kmax = int(np.ceil(self.total))
        pts = u[:, None] + np.arange(kmax)[None, :]
        valid = pts < self.total
        idx = np.searchsorted(self.cum, pts, side="right")
        mask = np.zeros((b, self.n), dtype=bool)
        rows = np.broadcast_to(np.arange(b)[:, None], pts.shape)
        mask[rows[valid], idx[valid]] = True
        return mask


# ---------------------------------------------------------------------------
# joint-chain dynamic programming (small instances only)
# ---------------------------------------------------------------------------


@dataclass
class DpSolution:
    """Optimal stationary policy of the truncated joint AoI chain."""

    action_table: np.ndarray  # flat state -> index into subsets
    subsets: list[tuple[int, ...]]
    average_cost: float
    delta_cap: int
    n: int
    span: float
    sweeps: int


def _expected_next(
    v: np.ndarray, subset: tuple[int, ...], probs: np.ndarray, cap: int
) -> np.ndarray:
    """E[V(next state)] for one action; per-sensor transitions factorize."""
    inc_idx = np.minimum(np.arange(1, cap + 1), cap - 1)
    zero_idx = np.zeros(cap, dtype=np.intp)
    w = v
    for i in range(v.ndim):
        inc = np.take(w, inc_idx, axis=i)
        if i in subset:
            w = probs[i] * np.take(w, zero_idx, axis=i) + (1.0 - probs[i]) * inc
        else:
            w = inc
    return w


def _joint_cost_tensor(cost_tables: list[np.ndarray], cap: int) -> np.ndarray:
    n = len(cost_tables)
    cost = np.zeros((cap,) * n)
    for i, tab in enumerate(cost_tables):
        shape = [1] * n
        shape[i] = cap
        cost = cost + tab[1 : cap + 1].reshape(shape)
    return cost


def _check_budget(cap: int, n: int, state_budget: int) -> None:
    if cap**n > state_budget:
        raise ResourceBudgetError(
            f"joint state space {cap}^{n} exceeds budget {state_budget}"
        )


def joint_value_iteration(
    cost_tables: list[np.ndarray],
    probs,
    m: int,
    delta_cap: int,
    action_table: np.ndarray | None = None,
    tol: float = 1e-9,
    max_sweeps: int = 100_000,
    state_budget: int = 2_000_000,
) -> DpSolution:
    """Relative value iteration on the joint AoI chain.

    With ``action_table`` given, evaluates that fixed policy; otherwise
    optimizes over all schedule-exactly-M subsets. AoI saturates at
    ``delta_cap``. Stops when the span seminorm of the value update falls
    below ``tol``; the average cost is then bracketed within ``tol``.
    """
    probs = np.asarray(probs, dtype=float)
    n = len(cost_tables)
    cap = delta_cap
    _check_budget(cap, n, state_budget)
    subsets = list(itertools.combinations(range(n), m))
    cost = _joint_cost_tensor(cost_tables, cap)
    v = np.zeros((cap,) * n)
    tau = 0.9  # damped updates converge on (near-)periodic induced chains
    if action_table is not None:
        sel_masks = [
            (action_table == ai).reshape(v.shape) for ai in range(len(subsets))
        ]
    for sweep in range(1, max_sweeps + 1):
        if action_table is None:
            best = None
            best_arg = None
            for ai, subset in enumerate(subsets):
                q = cost + _expected_next(v, subset, probs, cap)
                if best is None:
                    best, best_arg = q, np.zeros(q.shape, dtype=np.int16)
                else:
                    better = q < best  # strict: ties keep the earliest subset
                    np.copyto(best, q, where=better)
                    best_arg[better] = ai
            tv = best
        else:
            tv = np.empty_like(v)
            for ai, subset in enumerate(subsets):
                if not sel_masks[ai].any():
                    continue
                q = cost + _expected_next(v, subset, probs, cap)
                tv[sel_masks[ai]] = q[sel_masks[ai]]
            best_arg = action_table.reshape(v.shape)
        gain = tv - v
        span = float(gain.max() - gain.min())
        theta = 0.5 * float(gain.max() + gain.min())
        v = (1.0 - tau) * v + tau * tv
        v -= v.flat[0]
        if span < tol:
            return DpSolution(
                action_table=np.ascontiguousarray(best_arg).ravel(),
                subsets=subsets,
                average_cost=theta,
                delta_cap=cap,
                n=n,
                span=span,
                sweeps=sweep,
            )
    raise RuntimeError(f"joint value iteration did not converge in {max_sweeps} sweeps")


def _cost_tables_for(
    plants: list[PlantModel],
    filters: list[SteadyStateFilter],
    delta_cap: int,
    cost: str,
) -> list[np.ndarray]:
    if cost == "aoi-function":
        tabs = []
        for pl, ss in zip(plants, filters):
            cp = characteristic_params(pl, ss)
            d = np.arange(delta_cap + 1, dtype=float)
            tab = cp.beta * np.power(cp.alpha, d)
            tab[0] = 0.0
            tabs.append(tab)
        return tabs
    if cost == "trace":
        return [error_trace_table(pl, ss, delta_cap) for pl, ss in zip(plants, filters)]
    raise ValueError(f"unknown dp cost {cost!r}")


def dp_optimal_policy(
    plants: list[PlantModel],
    m: int,
    delta_cap: int = 25,
    cost: str = "aoi-function",
    filters: list[SteadyStateFilter] | None = None,
    tol: float = 1e-9,
    state_budget: int = 2_000_000,
) -> DpSolution:
    """Optimal scheduler of the truncated joint chain plus its average cost."""
    if filters is None:
        filters = [steady_state_filter(pl) for pl in plants]
    tables = _cost_tables_for(plants, filters, delta_cap, cost)
    probs = [pl.p for pl in plants]
    return joint_value_iteration(
        tables, probs, m, delta_cap, tol=tol, state_budget=state_budget
    )


def policy_action_table(
    policy: Policy, n: int, delta_cap: int, subsets: list[tuple[int, ...]]
) -> np.ndarray:
    """Evaluate a policy on every joint state and encode its chosen subsets."""
    grids = np.indices((delta_cap,) * n).reshape(n, -1).T + 1
    mask = policy.decide_batch(grids.astype(np.int64))
    bits = mask @ (1 << np.arange(n))
    lut = np.full(1 << n, -1, dtype=np.int16)
    for ai, s in enumerate(subsets):
        lut[sum(1 << i for i in s)] = ai
    out = lut[bits]
    if np.any(out < 0):
        raise ValueError("policy returned a subset outside the schedule-M catalogue")
    return out


def evaluate_policy_average_cost(
    policy: Policy,
    plants: list[PlantModel],
    m: int,
    delta_cap: int = 25,
    cost: str = "aoi-function",
    filters: list[SteadyStateFilter] | None = None,
    tol: float = 1e-9,
    state_budget: int = 2_000_000,
) -> float:
    """Exact long-run average cost of a policy on the same truncated chain.

    Shares the DP's state space and cost tables, so optimal-policy costs
    from :func:`dp_optimal_policy` are directly comparable (and provably no
    larger, up to the value-iteration tolerance).
    """
    if filters is None:
        filters = [steady_state_filter(pl) for pl in plants]
    n = len(plants)
    subsets = list(itertools.combinations(range(n), m))
    table = policy_action_table(policy, n, delta_cap, subsets)
    tables = _cost_tables_for(plants, filters, delta_cap, cost)
    probs = [pl.p for pl in plants]
    sol = joint_value_iteration(
        tables, probs, m, delta_cap, action_table=table, tol=tol,
        state_budget=state_budget,
    )
    return sol.average_cost


class DpTablePolicy(Policy):
    """Table lookup into a solved joint-chain policy (AoI clipped at the cap)."""

    name = "dp"

    def __init__(self, solution: DpSolution):
        super().__init__(solution.n, len(solution.subsets[0]))
        self.solution = solution
        self._masks = np.zeros((len(solution.subsets), solution.n), dtype=bool)
        for ai, subset in enumerate(solution.subsets):
            self._masks[ai, list(subset)] = True

    def decide_batch(self, deltas: np.ndarray) -> np.ndarray:
        cap = self.solution.delta_cap
        clipped = np.minimum(deltas, cap) - 1
        flat = np.ravel_multi_index(clipped.T, (cap,) * self.n)
        return self._masks[self.solution.action_table[flat]]


# ---------------------------------------------------------------------------
# functional entry points mirroring the policy catalogue
# ---------------------------------------------------------------------------


def lightweight_schedule(states, char_params, probs, m: int) -> Decision:
    return LightweightPolicy(char_params, probs, m).decide(states)


def aoi_greedy_schedule(states, m: int) -> Decision:
    return AoiGreedyPolicy(len(states), m).decide(states)


def voi_greedy_schedule(states, plants, filters, m: int) -> Decision:
    return VoiGreedyPolicy(plants, filters, m).decide(states)


def aoi_whittle_schedule(states, probs, m: int) -> Decision:
    return AoiWhittlePolicy(probs, m).decide(states)


def voi_whittle_schedule(states, plants, filters, m: int, delta_cap: int = 40) -> Decision:
    return VoiWhittlePolicy(plants, filters, m, delta_cap=delta_cap).decide(states)


def randomized_stationary_schedule(q, m: int, rng: np.random.Generator) -> Decision:
    pol = RandomizedStationaryPolicy(q, m, rng=rng)
    mask = pol.decide_batch(np.ones((1, pol.n), dtype=np.int64))[0]
    return Decision(scheduled=tuple(int(i) for i in np.flatnonzero(mask)))


def round_robin_schedule(cursor: int, n: int, m: int) -> tuple[Decision, int]:
    pol = RoundRobinPolicy(n, m, cursor=cursor)
    mask = pol.decide_batch(np.ones((1, n), dtype=np.int64))[0]
    return (
        Decision(scheduled=tuple(int(i) for i in np.flatnonzero(mask))),
        pol.cursor,
    )


# ---------------------------------------------------------------------------
# policy specification (CLI surface)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicySpec:
    """Tagged scheduler choice plus its tuning knobs."""

    kind: str
    q: tuple[float, ...] | None = None  # randomized marginals; None -> optimized
    delta_cap: int = 25  # dp truncation
    voi_delta_cap: int = 40  # voi-whittle index cache cutoff
    dp_cost: str = "aoi-function"
    use_cache: bool = True
    tie_break: str = "lowest-index"

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.tie_break != "lowest-index":
            raise ValueError("only the lowest-index tie break is supported")

    def make(
        self,
        plants: list[PlantModel],
        filters: list[SteadyStateFilter],
        char_params: list[CharParams],
        m: int,
    ) -> Policy:
        probs = [pl.p for pl in plants]
        if self.kind == "lightweight":
            return LightweightPolicy(char_params, probs, m)
        if self.kind == "aoi-greedy":
            return AoiGreedyPolicy(len(plants), m)
        if self.kind == "voi-greedy":
            return VoiGreedyPolicy(plants, filters, m)
        if self.kind == "aoi-whittle":
            return AoiWhittlePolicy(probs, m)
        if self.kind == "voi-whittle":
            return VoiWhittlePolicy(
                plants, filters, m, delta_cap=self.voi_delta_cap,
                use_cache=self.use_cache,
            )
        if self.kind == "round-robin":
            return RoundRobinPolicy(len(plants), m)
        if self.kind == "randomized":
            q = self.q
            if q is None:
                from .bounds import optimize_randomized_q

                alphas = [cp.alpha for cp in char_params]
                betas = [cp.beta for cp in char_params]
                q, _ = optimize_randomized_q(alphas, betas, probs, m)
            return RandomizedStationaryPolicy(np.asarray(q), m)
        if self.kind == "dp":
            sol = dp_optimal_policy(
                plants, m, delta_cap=self.delta_cap, cost=self.dp_cost,
                filters=filters,
            )
            return DpTablePolicy(sol)
        raise ValueError(f"unknown policy kind {self.kind!r}")


def parse_policy(text: str) -> PolicySpec:
    """Parse a CLI policy string, e.g. ``lightweight`` or ``dp:cap=20``."""
    kind, _, rest = text.partition(":")
    kind = kind.strip().lower()
    kwargs: dict = {}
    if rest:
        for item in rest.split(","):
            key, _, val = item.partition("=")
            key = key.strip()
            if key == "cap":
                kwargs["delta_cap"] = int(val)
            elif key == "voi-cap":
                kwargs["voi_delta_cap"] = int(val)
            elif key == "cost":
                kwargs["dp_cost"] = val.strip()
            elif key == "q":
                kwargs["q"] = tuple(float(x) for x in val.split("+"))
            elif key == "cache":
                kwargs["use_cache"] = val.strip().lower() not in ("0", "false", "no")
            else:
                raise ValueError(f"unknown policy option {key!r}")
    return PolicySpec(kind=kind, **kwargs)
