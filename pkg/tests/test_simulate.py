import math

import numpy as np
import pytest
import scipy.integrate
import scipy.stats

from icepp import hawkes as H
from icepp import simulate as S
from icepp.errors import ConfigError, ContractError, ExplosionError
from icepp.likelihood import IntensityParams

from test_hawkes import poisson_instance, single_mark_hawkes


class TestOgataThinning:
    def test_poisson_mean_count(self):
        inst = poisson_instance(2.0)
        cfg = S.SimulationConfig(window_end=100.0, seed=100)
        counts = [len(S.simulate_sequence(inst, cfg, stream_index=i)) for i in range(300)]
        se = math.sqrt(200.0) / math.sqrt(len(counts))
        assert abs(np.mean(counts) - 200.0) <= 3.0 * se

    def test_poisson_gaps_are_exponential(self):
        inst = poisson_instance(2.0)
        cfg = S.SimulationConfig(window_end=100.0, seed=101)
        gaps = np.concatenate(
            [S.simulate_sequence(inst, cfg, stream_index=i).gaps() for i in range(50)]
        )
        assert len(gaps) > 5000
        stat = scipy.stats.kstest(gaps, "expon", args=(0.0, 0.5))
        assert stat.pvalue > 0.01

    def test_hawkes_branching_ratio_mean_count(self):
        # stationary rate mu / (1 - w/b) = 1 / 0.5 = 2 events per unit time
        inst = single_mark_hawkes(1.0, 0.5, 1.0)
        cfg = S.SimulationConfig(window_end=200.0, seed=102)
        counts = [len(S.simulate_sequence(inst, cfg, stream_index=i)) for i in range(10)]
        assert abs(np.mean(counts) - 400.0) / 400.0 <= 0.05

    def test_sequences_satisfy_invariants(self):
        prior = H.PriorConfig(num_marks_range=(1, 3), seed=103)
        cfg = S.SimulationConfig(window_end=20.0, seed=103)
        for i in range(20):
            inst = H.sample_instance(prior, i)
            seq = S.simulate_sequence(inst, cfg, stream_index=i)
            assert seq.num_marks == inst.num_marks  # EventSequence validated on build

    def test_inhomogeneous_poisson_interval_counts(self):
        # base 1 + sin(2*pi*t/period) with period 2*pi, never negative
        inst = H.HawkesInstance(
            1,
            [
                H.BaseIntensitySpec(
                    "sinusoidal",
                    {"level": 1.0, "amplitude": 1.0, "period": 2 * math.pi, "phase": 0.0},
                )
            ],
            [[H.KernelSpec("exp_decay", {"weight": 0.0, "rate": 1.0})]],
            np.zeros((1, 1), dtype=int),
        )
        T_end = 2 * math.pi
        cfg = S.SimulationConfig(window_end=T_end, seed=104)
        edges = np.linspace(0.0, T_end, 5)
        reps = 1000
        counts = np.zeros((reps, 4))
        for i in range(reps):
            t = S.simulate_sequence(inst, cfg, stream_index=i).times
            counts[i] = np.histogram(t, bins=edges)[0]
        for j in range(4):
            expected = scipy.integrate.quad(
                lambda t: 1.0 + math.sin(t), edges[j], edges[j + 1]
            )[0]
            se = math.sqrt(expected / reps)
            assert abs(counts[:, j].mean() - expected) <= 3.0 * se

    def test_zero_intensity_fast_forwards(self):
        inst = poisson_instance(0.0)
        seq = S.simulate_sequence(inst, S.SimulationConfig(window_end=10.0, seed=1))
        assert len(seq) == 0

    def test_explosion_error(self):
        # branching ratio 1.5: supercritical, must hit the cap
        inst = single_mark_hawkes(1.0, 3.0, 2.0)
        cfg = S.SimulationConfig(window_end=1000.0, max_events=500, seed=105)
        with pytest.raises(ExplosionError):
            S.simulate_sequence(inst, cfg)

    def test_inhibition_reduces_counts(self):
        excl = single_mark_hawkes(1.0, 0.4, 1.0, sign=+1)
        inhib = single_mark_hawkes(1.0, 0.4, 1.0, sign=-1)
        cfg = S.SimulationConfig(window_end=100.0, seed=106)
        n_exc = np.mean([len(S.simulate_sequence(excl, cfg, stream_index=i)) for i in range(30)])
        n_inh = np.mean([len(S.simulate_sequence(inhib, cfg, stream_index=i)) for i in range(30)])
        assert n_inh < n_exc


class TestSimulateDataset:
    def test_empty(self):
        inst = poisson_instance(1.0)
        assert S.simulate_dataset(inst, 0, S.SimulationConfig(seed=1)) == []

    def test_determinism(self):
        inst = poisson_instance(1.0)
        cfg = S.SimulationConfig(window_end=30.0, seed=7)
        a = S.simulate_dataset(inst, 8, cfg)
        b = S.simulate_dataset(inst, 8, cfg)
        for x, y in zip(a, b):
            assert x.times.tobytes() == y.times.tobytes()
            assert x.marks.tobytes() == y.marks.tobytes()

    def test_threaded_equals_serial(self):
        inst = single_mark_hawkes(0.8, 0.3, 1.0)
        cfg = S.SimulationConfig(window_end=30.0, seed=8)
        serial = S.simulate_dataset(inst, 16, cfg, threads=1)
        threaded = S.simulate_dataset(inst, 16, cfg, threads=4)
        for x, y in zip(serial, threaded):
            assert x.times.tobytes() == y.times.tobytes()
            assert x.marks.tobytes() == y.marks.tobytes()

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            S.SimulationConfig(window_end=-1.0)
        with pytest.raises(ConfigError):
            S.SimulationConfig(max_events=0)


class TestSimulateFromEstimate:
    def test_constant_intensity_gaps_are_exponential(self):
        params = IntensityParams(0.0, [1.0], [1.0], [0.5])
        rng = np.random.default_rng(9)
        draws = [
            S.simulate_from_estimate(params, 0.0, 200.0, rng).time for _ in range(800)
        ]
        stat = scipy.stats.kstest(np.asarray(draws), "expon")
        assert stat.pvalue > 0.01

    def test_vectorized_and_scalar_agree_in_distribution(self):
        params = IntensityParams(0.0, [0.7, 0.3], [2.0, 0.1], [1.5, 0.4])
        times, marks = S.sample_next_event_times(
            params, 0.0, 500.0, 4000, np.random.default_rng(10)
        )
        rng = np.random.default_rng(11)
        scalar = np.array(
            [S.simulate_from_estimate(params, 0.0, 500.0, rng).time for _ in range(2000)]
        )
        assert not np.isnan(times).any()
        stat = scipy.stats.ks_2samp(times, scalar)
        assert stat.pvalue > 0.01
        assert set(np.unique(marks)) <= {0, 1}

    def test_null_intensity_gives_none(self):
        params = IntensityParams(0.0, [0.0], [0.0], [0.0])
        rng = np.random.default_rng(12)
        for _ in range(20):
            assert S.simulate_from_estimate(params, 0.0, 100.0, rng) is None

    def test_larger_mu_shortens_gap_under_common_randomness(self):
        for seed in range(25):
            d = []
            for mu in (0.5, 2.0):
                rng = np.random.default_rng(seed)
                ev = S.simulate_from_estimate(
                    IntensityParams(0.0, [mu], [mu], [1.0]), 0.0, 1000.0, rng
                )
                d.append(ev.time)
            assert d[1] < d[0]

    def test_horizon_censoring(self):
        params = IntensityParams(0.0, [0.01], [0.01], [1.0])
        rng = np.random.default_rng(13)
        out = [S.simulate_from_estimate(params, 0.0, 0.5, rng) for _ in range(200)]
        assert any(e is None for e in out)
        for e in out:
            if e is not None:
                assert 0.0 < e.time <= 0.5

    def test_anchor_offset_respected(self):
        params = IntensityParams(2.0, [1.0], [5.0], [1.0])
        rng = np.random.default_rng(14)
        ev = S.simulate_from_estimate(params, 3.0, 100.0, rng)
        assert ev.time > 3.0
        with pytest.raises(ContractError):
            S.simulate_from_estimate(params, 1.0, 100.0, rng)
