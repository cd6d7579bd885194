"""AoI cost function, Whittle index (closed form and oracle), threshold forms."""

import numpy as np
import pytest

from aoi_sched import (
    AoiFunction,
    StabilityError,
    ThresholdPolicy,
    aoi_step,
    f_value,
    stationary_aoi_distribution,
    threshold_average_cost,
    threshold_transmission_rate,
    threshold_value_function,
    whittle_index,
    whittle_index_numeric,
    whittle_index_table,
)


def test_aoi_step():
    assert aoi_step(5, 1) == 1
    assert aoi_step(5, 0) == 6
    assert aoi_step(1, 1) == 1
    with pytest.raises(ValueError):
        aoi_step(0, 1)


def test_f_value():
    assert f_value(AoiFunction(2.0, 3.0, 1.0), 2) == pytest.approx(12.0)
    assert f_value(AoiFunction(1.44, 1.0, 0.9), 1) == pytest.approx(1.44)


def test_f_geometric_growth():
    fn = AoiFunction(1.37, 2.1, 0.8)
    for d in (1, 5, 17, 300):
        assert f_value(fn, d + 1) / f_value(fn, d) == pytest.approx(fn.alpha, rel=1e-9)


def test_aoi_function_validation():
    with pytest.raises(ValueError):
        AoiFunction(1.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        AoiFunction(1.5, -1.0, 0.5)
    with pytest.raises(ValueError):
        AoiFunction(1.5, 1.0, 0.0)


class TestWhittleIndex:
    def test_hand_values(self):
        assert whittle_index(AoiFunction(2.0, 1.0, 1.0), 1) == pytest.approx(2.0)
        # first bracket vanishes: 0.5/0.25 - 1/0.5 = 0
        assert whittle_index(AoiFunction(1.5, 2.0, 0.5), 1) == pytest.approx(3.0)
        assert whittle_index(AoiFunction(1.5, 2.0, 0.5), 2) == pytest.approx(9.75)

    def test_monotone_in_aoi(self):
        rng = np.random.default_rng(10)
        done = 0
        while done < 100:
            alpha = rng.uniform(1.02, 2.5)
            p = rng.uniform(0.3, 1.0)
            if alpha * (1 - p) >= 0.98:
                continue
            fn = AoiFunction(alpha, rng.uniform(0.05, 10.0), p)
            w = [whittle_index(fn, d) for d in range(1, 31)]
            assert all(w[i + 1] > w[i] for i in range(len(w) - 1))
            done += 1

    def test_linear_in_beta(self):
        fn1 = AoiFunction(1.6, 1.0, 0.7)
        fn3 = AoiFunction(1.6, 3.0, 0.7)
        for d in (1, 4, 9):
            assert whittle_index(fn3, d) == pytest.approx(
                3.0 * whittle_index(fn1, d), rel=1e-12
            )

    def test_unstable_rejected(self):
        with pytest.raises(StabilityError):
            whittle_index(AoiFunction(2.0, 1.0, 0.4), 1)

    def test_table_matches_scalar(self):
        fn = AoiFunction(1.44, 0.8, 0.9)
        tab = whittle_index_table(fn, 20)
        for d in range(1, 21):
            assert tab[d] == pytest.approx(whittle_index(fn, d), rel=1e-12)


class TestWhittleOracle:
    def test_deterministic_channel(self):
        fn = AoiFunction(2.0, 1.0, 1.0)
        assert whittle_index_numeric(fn, 1, 200) == pytest.approx(2.0, rel=1e-6)

    def test_half_channel(self):
        fn = AoiFunction(1.5, 2.0, 0.5)
        assert whittle_index_numeric(fn, 1, 400) == pytest.approx(3.0, rel=1e-6)

    def test_small_grid(self):
        rng = np.random.default_rng(11)
        done = 0
        while done < 10:
            alpha = rng.uniform(1.05, 2.0)
            p = rng.uniform(0.5, 1.0)
            if alpha * (1 - p) >= 0.95:
                continue
            fn = AoiFunction(alpha, rng.uniform(0.2, 5.0), p)
            d = int(rng.integers(1, 11))
            cf = whittle_index(fn, d)
            assert whittle_index_numeric(fn, d, 400) == pytest.approx(cf, rel=1e-5)
            done += 1


class TestThresholdAverageCost:
    def test_always_transmit_deterministic(self):
        fn = AoiFunction(2.0, 1.0, 1.0)
        theta = threshold_average_cost(fn, ThresholdPolicy(1), 0.0)
        assert theta == pytest.approx(2.0)

    def test_matches_stationary_distribution(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            alpha = rng.uniform(1.05, 1.8)
            p = rng.uniform(0.5, 1.0)
            if alpha * (1 - p) >= 0.9:
                continue
            fn = AoiFunction(alpha, rng.uniform(0.2, 3.0), p)
            dth = int(rng.integers(1, 8))
            w = rng.uniform(-1.0, 5.0)
            cap = 300
            psi, tail = stationary_aoi_distribution(p, ThresholdPolicy(dth), cap)
            d = np.arange(1, cap + 1, dtype=float)
            oracle = float(np.sum(psi[1:] * fn.beta * fn.alpha**d))
            oracle += w * threshold_transmission_rate(p, ThresholdPolicy(dth))
            # remaining mass decays like (alpha (1-p))^k; negligible here
            assert tail * fn.beta * fn.alpha**cap < 1e-6
            got = threshold_average_cost(fn, ThresholdPolicy(dth), w)
            assert got == pytest.approx(oracle, rel=1e-8)

    def test_tie_at_whittle_index(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            alpha = rng.uniform(1.05, 2.0)
            p = rng.uniform(0.4, 1.0)
            if alpha * (1 - p) >= 0.95:
                continue
            fn = AoiFunction(alpha, rng.uniform(0.1, 5.0), p)
            d = int(rng.integers(1, 12))
            w = whittle_index(fn, d)
            t1 = threshold_average_cost(fn, ThresholdPolicy(d), w)
            t2 = threshold_average_cost(fn, ThresholdPolicy(d + 1), w)
            assert t2 == pytest.approx(t1, rel=1e-9)


class TestThresholdValueFunction:
    @pytest.mark.parametrize("alpha,beta,p,dth", [
        (1.44, 1.0, 0.9, 3),
        (1.8, 0.5, 0.75, 5),
        (2.0, 1.0, 1.0, 1),
        (1.2, 2.0, 0.6, 8),
    ])
    def test_normalization_monotonicity_bellman(self, alpha, beta, p, dth):
        fn = AoiFunction(alpha, beta, p)
        tp = ThresholdPolicy(dth)
        w = whittle_index(fn, dth)
        v = [threshold_value_function(fn, tp, w, d) for d in range(1, 52)]
        assert abs(v[0]) < 1e-10
        assert all(v[i + 1] > v[i] for i in range(len(v) - 1))
        theta = threshold_average_cost(fn, tp, w)
        for d in range(1, 50):
            lhs = v[d - 1] + theta
            cost = beta * alpha**d
            q_idle = cost + v[d]
            q_send = cost + w + p * v[0] + (1 - p) * v[d]
            assert lhs == pytest.approx(min(q_idle, q_send), rel=1e-8, abs=1e-8)


class TestStationaryDistribution:
    def test_deterministic_reset(self):
        psi, tail = stationary_aoi_distribution(1.0, ThresholdPolicy(1), 10)
        assert psi[1] == pytest.approx(1.0)
        assert np.all(psi[2:] == 0.0)
        assert tail == 0.0

    def test_hand_values(self):
        psi, _ = stationary_aoi_distribution(0.5, ThresholdPolicy(2), 6)
        assert psi[1] == pytest.approx(1 / 3)
        assert psi[2] == pytest.approx(1 / 3)
        assert psi[3] == pytest.approx(1 / 6)
        assert psi[4] == pytest.approx(1 / 12)

    def test_normalizes_with_tail(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            p = rng.uniform(0.05, 1.0)
            dth = int(rng.integers(1, 20))
            cap = dth + int(rng.integers(0, 40))
            psi, tail = stationary_aoi_distribution(p, ThresholdPolicy(dth), cap)
            assert psi[1:].sum() + tail == pytest.approx(1.0, abs=1e-10)


class TestTransmissionRate:
    def test_always(self):
        assert threshold_transmission_rate(1.0, ThresholdPolicy(1)) == 1.0

    def test_hand_value(self):
        assert threshold_transmission_rate(0.5, ThresholdPolicy(2)) == pytest.approx(2 / 3)

    def test_empirical_frequency(self):
        # vectorized threshold-policy chains: 1000 chains x 1100 steps
        p, dth = 0.7, 3
        rng = np.random.default_rng(15)
        chains, steps, warm = 1000, 1100, 100
        delta = np.ones(chains, dtype=np.int64)
        attempts = 0
        for t in range(steps):
            send = delta >= dth
            ok = send & (rng.random(chains) < p)
            if t >= warm:
                attempts += int(send.sum())
            delta = np.where(ok, 1, delta + 1)
        rate = attempts / (chains * (steps - warm))
        expect = threshold_transmission_rate(p, ThresholdPolicy(dth))
        assert rate == pytest.approx(expect, abs=0.003)
