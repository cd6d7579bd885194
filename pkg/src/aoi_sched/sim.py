"""Seeded Monte Carlo engine: covariance/trajectory simulation and sweeps.

Runs are independent replications of the scheduled estimation system. The
engine is vectorized across runs in fixed-size blocks; each block owns
counter-based RNG streams keyed by (seed, block index), so results are
bit-identical for a given seed regardless of the thread count, and blocks
are reduced in fixed order.

Two simulation levels are provided. The covariance simulation drives only
the AoI chain and reads per-step costs from AoI-indexed tables (the AoI
cost function, or the trace of the remote prediction-error covariance).
The trajectory simulation additionally propagates noise realizations
through the plant, the local filter and the remote estimator, in error
coordinates (an exact linear change of variables that avoids the
overflow/cancellation of absolute states under unstable dynamics), and
reports the empirical squared estimation error. The two agree in the mean,
which is the cross-validation the test suite leans on.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .plants import (
    PlantModel,
    SteadyStateFilter,
    characteristic_params,
    prediction_trace_table,
    steady_state_filter,
)
from .policies import AoiGreedyPolicy, PolicySpec

METRICS = ("aoi-function", "trace", "squared-error")

DIVERGENCE_LIMIT = 1e12
_HIST_BINS = 128  # AoI histogram bins; the last one absorbs everything older


@dataclass(frozen=True)
class SimConfig:
    """Replication layout and metric of one Monte Carlo experiment."""

    horizon: int = 1000
    runs: int = 10_000
    seed: int = 0
    metric: str = "aoi-function"
    warmup: int | None = None  # None -> 10% of the horizon
    threads: int = 1
    run_block: int = 2048
    policy: PolicySpec | None = None

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.runs < 1:
            raise ValueError("horizon and runs must be at least 1")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        w = self.warmup if self.warmup is not None else self.horizon // 10
        if not (0 <= w < self.horizon):
            raise ValueError("warmup must leave at least one measured step")

    @property
    def warmup_steps(self) -> int:
        return self.warmup if self.warmup is not None else self.horizon // 10


@dataclass
class SimReport:
    """Aggregated outcome of one (ensemble, policy, config) experiment."""

    policy: str
    metric: str
    mean_J: float
    ci95: float
    per_sensor_attempt_rate: list[float]
    per_sensor_success_rate: list[float]
    aoi_histogram: list[int]
    wall_time_per_decision: float
    diverged_runs: int
    runs: int
    horizon: int
    warmup: int
    seed: int

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["schema_version"] = 1
        return d

    def stat_dict(self) -> dict:
        """Deterministic fields only: everything except wall-clock timing."""
        d = self.to_dict()
        d.pop("wall_time_per_decision")
        return d


def _philox(seed: int, tag: int) -> np.random.Generator:
    key = np.array([seed & (2**64 - 1), tag & (2**64 - 1)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _setup(plants: list[PlantModel]):
    filters = [steady_state_filter(pl) for pl in plants]
    cps = [characteristic_params(pl, ss) for pl, ss in zip(plants, filters)]
    return filters, cps


def _metric_tables(
    plants: list[PlantModel], filters: list[SteadyStateFilter], cps, metric: str,
    max_delta: int,
) -> np.ndarray:
    """Per-sensor cost lookup tables indexed by AoI, shape (max_delta+1, N)."""
    n = len(plants)
    tabs = np.zeros((max_delta + 1, n))
    if metric == "aoi-function":
        d = np.arange(max_delta + 1, dtype=float)
        with np.errstate(over="ignore"):
            for i, cp in enumerate(cps):
                tabs[:, i] = cp.beta * np.power(cp.alpha, d)
    elif metric == "trace":
        with np.errstate(over="ignore"):
            for i, (pl, ss) in enumerate(zip(plants, filters)):
                tabs[:, i] = prediction_trace_table(pl, ss, max_delta)
    else:
        raise ValueError(f"metric {metric!r} has no covariance-level table")
    tabs[0, :] = 0.0
    return tabs


@dataclass
class _BlockStats:
    run_means: np.ndarray
    diverged: np.ndarray
    attempts: np.ndarray
    successes: np.ndarray
    histogram: np.ndarray
    decision_time: float
    decisions: int


def _aggregate(
    blocks: list[_BlockStats], policy_name, config, measured_steps
) -> SimReport:
    means = np.concatenate([b.run_means for b in blocks])
    diverged = np.concatenate([b.diverged for b in blocks])
    attempts = np.sum([b.attempts for b in blocks], axis=0)
    successes = np.sum([b.successes for b in blocks], axis=0)
    hist = np.sum([b.histogram for b in blocks], axis=0)
    time_total = sum(b.decision_time for b in blocks)
    decisions = sum(b.decisions for b in blocks)
    ok = ~diverged
    if ok.any():
        mean_j = float(np.mean(means[ok]))
        sd = float(np.std(means[ok], ddof=1)) if ok.sum() > 1 else 0.0
        ci = 1.96 * sd / math.sqrt(ok.sum())
    else:
        mean_j, ci = math.inf, math.nan
    denom = measured_steps * config.runs
    with np.errstate(invalid="ignore", divide="ignore"):
        success_rate = np.where(attempts > 0, successes / np.maximum(attempts, 1), 0.0)
    return SimReport(
        policy=policy_name,
        metric=config.metric,
        mean_J=mean_j,
        ci95=ci,
        per_sensor_attempt_rate=(attempts / denom).tolist(),
        per_sensor_success_rate=success_rate.tolist(),
        aoi_histogram=hist.tolist(),
        wall_time_per_decision=time_total / max(decisions, 1),
        diverged_runs=int(diverged.sum()),
        runs=config.runs,
        horizon=config.horizon,
        warmup=config.warmup_steps,
        seed=config.seed,
    )


def _block_sizes(runs: int, block: int) -> list[int]:
    sizes = [block] * (runs // block)
    if runs % block:
        sizes.append(runs % block)
    return sizes


def run_covariance_sim(
    plants: list[PlantModel],
    policy_spec: PolicySpec | None,
    m: int,
    config: SimConfig,
) -> SimReport:
    """Simulate the AoI chain and read costs from covariance tables.

    Per step: the policy schedules up to M sensors on the current AoI
    vector, scheduled deliveries succeed i.i.d. with probability p_i, AoI
    resets on delivery and ages otherwise, and the post-update cost is
    accumulated after warmup. Runs whose instantaneous cost ever exceeds
    1e12 (or overflows) are reported as diverged and excluded from the
    mean rather than crashing or poisoning it.
    """
    spec = policy_spec or config.policy
    if spec is None:
        raise ValueError("no policy specified")
    filters, cps = _setup(plants)
    n = len(plants)
    probs = np.array([pl.p for pl in plants])
    tabs = _metric_tables(plants, filters, cps, config.metric, config.horizon + 1)
    proto = spec.make(plants, filters, cps, m)
    warm = config.warmup_steps
    measured = config.horizon - warm
    sensor_cols = np.arange(n)[None, :]

    def one_block(args) -> _BlockStats:
        bi, b = args
        policy = proto.clone()
        policy.rng = _philox(config.seed, 2 * bi + 1)
        ch = _philox(config.seed, 2 * bi)
        deltas = np.ones((b, n), dtype=np.int64)
        cost_acc = np.zeros(b)
        diverged = np.zeros(b, dtype=bool)
        attempts = np.zeros(n, dtype=np.int64)
        successes = np.zeros(n, dtype=np.int64)
        hist = np.zeros(_HIST_BINS + 1, dtype=np.int64)
        t_policy = 0.0
        for t in range(1, config.horizon + 1):
            t0 = time.perf_counter()
            mask = policy.decide_batch(deltas)
            t_policy += time.perf_counter() - t0
            gamma = mask & (ch.random((b, n)) < probs[None, :])
            deltas = np.where(gamma, 1, deltas + 1)
            if t > warm:
                attempts += mask.sum(axis=0)
                successes += gamma.sum(axis=0)
                step_cost = tabs[deltas, sensor_cols].sum(axis=1)
                diverged |= ~np.isfinite(step_cost) | (step_cost > DIVERGENCE_LIMIT)
                cost_acc += np.where(np.isfinite(step_cost), step_cost, 0.0)
                hist += np.bincount(
                    np.minimum(deltas, _HIST_BINS).ravel(), minlength=_HIST_BINS + 1
                )
        return _BlockStats(
            run_means=cost_acc / measured,
            diverged=diverged,
            attempts=attempts,
            successes=successes,
            histogram=hist,
            decision_time=t_policy,
            decisions=b * config.horizon,
        )

    jobs = list(enumerate(_block_sizes(config.runs, config.run_block)))
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            blocks = list(pool.map(one_block, jobs))
    else:
        blocks = [one_block(j) for j in jobs]
    return _aggregate(blocks, proto.name, config, measured)


def run_trajectory_sim(
    plants: list[PlantModel],
    policy_spec: PolicySpec | None,
    m: int,
    config: SimConfig,
) -> SimReport:
    """Full-noise simulation of plant, local filter and remote estimator.

    Propagates the local posterior error e and the remote error d exactly:

        e' = (I - K C)(A e + w) - K v
        d' = A e + w          on a delivery (the remote adopts the one-step
                               prediction of the last local posterior)
        d' = A d + w          otherwise

    and reports the empirical squared error ||d||^2 summed over sensors.
    The local filter runs at its converged gain throughout, matching the
    steady-state assumption of the covariance model.
    """
    spec = policy_spec or config.policy
    if spec is None:
        raise ValueError("no policy specified")
    cfg = config if config.metric == "squared-error" else replace(
        config, metric="squared-error"
    )
    filters, cps = _setup(plants)
    n = len(plants)
    probs = np.array([pl.p for pl in plants])
    proto = spec.make(plants, filters, cps, m)
    warm = cfg.warmup_steps
    measured = cfg.horizon - warm
    chol_q = [np.linalg.cholesky(pl.Q) for pl in plants]
    chol_r = [np.linalg.cholesky(pl.R) for pl in plants]
    chol_p = [np.linalg.cholesky(ss.posterior_cov) for ss in filters]

    def one_block(args) -> _BlockStats:
        bi, b = args
        policy = proto.clone()
        policy.rng = _philox(cfg.seed, 3 * bi + 1)
        ch = _philox(cfg.seed, 3 * bi)
        noise = _philox(cfg.seed, 3 * bi + 2)
        e_loc = [noise.standard_normal((b, pl.n)) @ chol_p[i].T
                 for i, pl in enumerate(plants)]
        d_rem = [noise.standard_normal((b, pl.n)) @ chol_p[i].T
                 for i, pl in enumerate(plants)]
        deltas = np.ones((b, n), dtype=np.int64)
        cost_acc = np.zeros(b)
        diverged = np.zeros(b, dtype=bool)
        attempts = np.zeros(n, dtype=np.int64)
        successes = np.zeros(n, dtype=np.int64)
        hist = np.zeros(_HIST_BINS + 1, dtype=np.int64)
        t_policy = 0.0
        for t in range(1, cfg.horizon + 1):
            t0 = time.perf_counter()
            mask = policy.decide_batch(deltas)
            t_policy += time.perf_counter() - t0
            gamma = mask & (ch.random((b, n)) < probs[None, :])
            step_cost = np.zeros(b)
            for i, pl in enumerate(plants):
                w = noise.standard_normal((b, pl.n)) @ chol_q[i].T
                v = noise.standard_normal((b, pl.m)) @ chol_r[i].T
                pred = e_loc[i] @ pl.A.T + w
                on_success = pred
                d_rem[i] = np.where(
                    gamma[:, i : i + 1], on_success, d_rem[i] @ pl.A.T + w
                )
                e_loc[i] = pred - (pred @ pl.C.T + v) @ filters[i].gain.T
                step_cost += np.einsum("ij,ij->i", d_rem[i], d_rem[i])
            deltas = np.where(gamma, 1, deltas + 1)
            if t > warm:
                attempts += mask.sum(axis=0)
                successes += gamma.sum(axis=0)
                diverged |= ~np.isfinite(step_cost) | (step_cost > DIVERGENCE_LIMIT)
                cost_acc += np.where(np.isfinite(step_cost), step_cost, 0.0)
                hist += np.bincount(
                    np.minimum(deltas, _HIST_BINS).ravel(), minlength=_HIST_BINS + 1
                )
        return _BlockStats(
            run_means=cost_acc / measured,
            diverged=diverged,
            attempts=attempts,
            successes=successes,
            histogram=hist,
            decision_time=t_policy,
            decisions=b * cfg.horizon,
        )

    jobs = list(enumerate(_block_sizes(cfg.runs, cfg.run_block)))
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            blocks = list(pool.map(one_block, jobs))
    else:
        blocks = [one_block(j) for j in jobs]
    return _aggregate(blocks, proto.name, cfg, measured)


# ---------------------------------------------------------------------------
# decision timing
# ---------------------------------------------------------------------------


def measure_decision_time(
    plants: list[PlantModel],
    policy_specs: list[PolicySpec],
    n_list: list[int],
    m_of_n=lambda n: max(1, n // 2),
    decisions: int = 10_000,
    time_budget_s: float = 2.0,
    seed: int = 0,
) -> list[dict]:
    """Median per-decision wall time for each (policy, N).

    Decisions are timed one at a time on a pool of warm AoI states (the
    deployed call pattern, not the vectorized batch path). Policies slower
    than the per-cell time budget are measured on fewer decisions; the
    count actually timed is reported alongside the median.
    """
    rows: list[dict] = []
    for n in n_list:
        ens = [plants[i % len(plants)] for i in range(n)]
        filters, cps = _setup(ens)
        probs = np.array([pl.p for pl in ens])
        m = m_of_n(n)
        # warm state pool from a short greedy-scheduled chain
        rng = _philox(seed, 7)
        deltas = np.ones((128, n), dtype=np.int64)
        warm_pol = AoiGreedyPolicy(n, m)
        for _ in range(256):
            mask = warm_pol.decide_batch(deltas)
            gamma = mask & (rng.random((128, n)) < probs[None, :])
            deltas = np.where(gamma, 1, deltas + 1)
        pool = deltas
        for spec in policy_specs:
            policy = spec.make(ens, filters, cps, m)
            policy.rng = _philox(seed, 11)
            policy.decide_batch(pool[:1])  # warm tables/caches once
            batch = 16
            samples: list[float] = []
            done = 0
            start = time.perf_counter()
            while done < decisions and time.perf_counter() - start < time_budget_s:
                t0 = time.perf_counter()
                for k in range(batch):
                    policy.decide_batch(pool[(done + k) % 128 : (done + k) % 128 + 1])
                samples.append((time.perf_counter() - t0) / batch)
                done += batch
            rows.append(
                {
                    "policy": spec.kind,
                    "n": n,
                    "m": m,
                    "median_s": float(np.median(samples)),
                    "decisions": done,
                }
            )
    return rows


# ---------------------------------------------------------------------------
# experiment sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    sweep: str
    sweep_value: float
    report: SimReport
    time_per_decision_ns: float = field(init=False)

    def __post_init__(self) -> None:
        self.time_per_decision_ns = self.report.wall_time_per_decision * 1e9


def _cycle(plants: list[PlantModel], n: int) -> list[PlantModel]:
    return [plants[i % len(plants)] for i in range(n)]


def run_sweep(
    kind: str,
    values,
    plants: list[PlantModel],
    policy_specs: list[PolicySpec],
    config: SimConfig,
    m: int | None = None,
    ratio: float = 2.0,
    trajectory: bool = False,
) -> list[SweepRow]:
    """One SimReport per (sweep point, policy).

    Kinds: ``scale`` grows N at fixed N/M ratio; ``heterogeneity`` varies
    the fraction of distinct plants in the ensemble; ``channel`` forces a
    common success probability p on every sensor.
    """
    rows: list[SweepRow] = []
    runner = run_trajectory_sim if trajectory else run_covariance_sim
    for value in values:
        if kind == "scale":
            n = int(value)
            ens = _cycle(plants, n)
            mm = max(1, int(round(n / ratio)))
        elif kind == "heterogeneity":
            n = len(plants)
            distinct = max(1, int(round(float(value) * n)))
            ens = [plants[i % distinct] for i in range(n)]
            mm = m if m is not None else max(1, int(round(n / ratio)))
        elif kind == "channel":
            p = float(value)
            ens = [replace(pl, p=p) for pl in plants]
            mm = m if m is not None else max(1, int(round(len(ens) / ratio)))
        else:
            raise ValueError(f"unknown sweep kind {kind!r}")
        for spec in policy_specs:
            rep = runner(ens, spec, mm, config)
            rows.append(SweepRow(sweep=kind, sweep_value=float(value), report=rep))
    return rows


def write_sweep_csv(path: str, rows: list[SweepRow]) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write("sweep_value,policy,mean_J,ci95,time_per_decision_ns,diverged_runs\n")
        for r in rows:
            fh.write(
                f"{r.sweep_value!r},{r.report.policy},{r.report.mean_J!r},"
                f"{r.report.ci95!r},{r.time_per_decision_ns!r},"
                f"{r.report.diverged_runs}\n"
            )
    os.replace(tmp, path)


def write_sweep_json(path: str, rows: list[SweepRow]) -> None:
    doc = {
        "schema_version": 1,
        "rows": [
            {
                "sweep": r.sweep,
                "sweep_value": r.sweep_value,
                "time_per_decision_ns": r.time_per_decision_ns,
                **r.report.to_dict(),
            }
            for r in rows
        ],
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    os.replace(tmp, path)
