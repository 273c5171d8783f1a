import logging
import math

import numpy as np
import pytest

from icepp import hawkes as H
from icepp import likelihood as L
from icepp import model as M
from icepp import simulate as S
from icepp import tensor as T
from icepp.errors import ConfigError, ContractError

from fd import assert_grads_close, finite_diff_grad

TINY = M.ModelConfig(
    d_model=16,
    n_heads=2,
    n_layers_seq_encoder=1,
    n_layers_cross_encoder=1,
    n_layers_decoder=1,
    d_ff=16,
    max_marks=2,
    max_events=16,
)


def make_batch(seed=0, m=3, n_target=4, K=2, T_end=10.0):
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(m + 1):
        n = n_target if len(seqs) == m else int(rng.integers(2, 6))
        times = np.sort(rng.uniform(0.1, T_end - 0.1, n))
        seqs.append(H.EventSequence(times, rng.integers(0, K, n), T_end, K))
    return M.ContextBatch(context=seqs[:m], target=seqs[m])


class TestConfigAndWeights:
    def test_config_validation(self):
        with pytest.raises(ConfigError):
            M.ModelConfig(d_model=30, n_heads=4)
        with pytest.raises(ConfigError):
            M.ModelConfig(n_layers_decoder=0)

    def test_default_parameter_budget(self):
        w = M.ModelWeights.init(M.ModelConfig(), seed=0)
        assert w.num_params() <= 1_000_000

    def test_init_determinism_and_head_bias(self):
        a = M.ModelWeights.init(TINY, seed=3)
        b = M.ModelWeights.init(TINY, seed=3)
        for k in a.arrays:
            assert a.arrays[k].tobytes() == b.arrays[k].tobytes()
        want = math.log(math.expm1(1.0))
        np.testing.assert_allclose(a.arrays["head/b2"], want)

    def test_weights_shape_check(self):
        w = M.ModelWeights.init(TINY, seed=0)
        bad = dict(w.arrays)
        bad["head/w1"] = np.zeros((2, 2))
        with pytest.raises(ContractError):
            M.ModelWeights(TINY, bad)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        w = M.ModelWeights.init(TINY, seed=5)
        path = str(tmp_path / "ckpt")
        w.save(path)
        again = M.ModelWeights.load(path)
        for k in w.arrays:
            assert again.arrays[k].tobytes() == w.arrays[k].tobytes()
        batch = make_batch(seed=1)
        l1, _ = M.forward_nll(batch, w)
        l2, _ = M.forward_nll(batch, again)
        assert float(l1.data).hex() == float(l2.data).hex()

    def test_missing_checkpoint(self, tmp_path):
        from icepp.errors import DataError

        with pytest.raises(DataError):
            M.load_checkpoint(str(tmp_path / "nope"))


class TestContextBatch:
    def test_time_scale_is_mean_gap(self):
        seq = H.EventSequence([1.0, 3.0], [0, 0], 10.0, 1)
        batch = M.ContextBatch([seq], H.EventSequence([], [], 10.0, 1))
        assert batch.time_scale == pytest.approx(1.5)

    def test_empty_context_rejected(self):
        with pytest.raises(ContractError):
            M.ContextBatch([], H.EventSequence([], [], 10.0, 1))

    def test_mark_space_mismatch_rejected(self):
        a = H.EventSequence([1.0], [0], 10.0, 1)
        b = H.EventSequence([1.0], [0], 10.0, 2)
        with pytest.raises(ContractError):
            M.ContextBatch([a], b)

    def test_no_events_fallback_scale(self):
        batch = M.ContextBatch(
            [H.EventSequence([], [], 10.0, 1)], H.EventSequence([], [], 10.0, 1)
        )
        assert batch.time_scale == 1.0


class TestEmbedSequence:
    def test_empty_sequence_single_row(self):
        w = M.ModelWeights.init(TINY, seed=0)
        out = M.embed_sequence(
            H.EventSequence([], [], 10.0, 2), w.as_tensors(), 1.0, TINY
        )
        assert out.shape == (1, TINY.d_model)

    def test_shape_contract(self):
        cfg = M.ModelConfig()
        w = M.ModelWeights.init(cfg, seed=0)
        seq = H.EventSequence(np.linspace(1, 5, 5), np.zeros(5, dtype=int), 10.0, 1)
        out = M.embed_sequence(seq, w.as_tensors(), 1.0, cfg)
        assert out.shape == (6, 64)

    def test_mark_permutation_equivariance(self):
        w = M.ModelWeights.init(TINY, seed=1)
        perm = np.array([1, 0])
        permuted = dict(w.arrays)
        permuted["emb/mark"] = w.arrays["emb/mark"][perm]
        wp = M.ModelWeights(TINY, permuted)
        seq = H.EventSequence([1.0, 2.0, 3.0], [0, 1, 0], 10.0, 2)
        seq_relabeled = H.EventSequence([1.0, 2.0, 3.0], perm[[0, 1, 0]], 10.0, 2)
        a = M.embed_sequence(seq, w.as_tensors(), 1.0, TINY)
        b = M.embed_sequence(seq_relabeled, wp.as_tensors(), 1.0, TINY)
        np.testing.assert_array_equal(a.data, b.data)

    def test_overlong_sequence_truncates_with_warning(self, caplog):
        w = M.ModelWeights.init(TINY, seed=0)
        times = np.arange(1, 30, dtype=float)
        seq = H.EventSequence(times, np.zeros(29, dtype=int), 40.0, 2)
        with caplog.at_level(logging.WARNING, logger="icepp.model"):
            out = M.embed_sequence(seq, w.as_tensors(), 1.0, TINY)
        assert out.shape == (TINY.max_events + 1, TINY.d_model)
        assert any("truncated" in r.message for r in caplog.records)


class TestEncodeContext:
    def test_single_sequence_context(self):
        w = M.ModelWeights.init(TINY, seed=2)
        batch = make_batch(seed=2, m=1)
        out = M.encode_context(batch, w.as_tensors(), TINY)
        assert out.shape == (1, TINY.d_model)
        assert np.isfinite(out.data).all()

    def test_permuting_context_permutes_rows(self):
        w = M.ModelWeights.init(TINY, seed=3)
        batch = make_batch(seed=3, m=4)
        out = M.encode_context(batch, w.as_tensors(), TINY).data
        perm = [2, 0, 3, 1]
        shuffled = M.ContextBatch(
            [batch.context[i] for i in perm], batch.target, batch.time_scale
        )
        out_p = M.encode_context(shuffled, w.as_tensors(), TINY).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_duplicated_sequences_give_identical_rows(self):
        w = M.ModelWeights.init(TINY, seed=4)
        seq = H.EventSequence([1.0, 4.0], [0, 1], 10.0, 2)
        batch = M.ContextBatch([seq, seq, seq.prefix(1)], H.EventSequence([], [], 10.0, 2))
        out = M.encode_context(batch, w.as_tensors(), TINY).data
        np.testing.assert_allclose(out[0], out[1], atol=1e-12)


class TestDecodeHistory:
    def test_empty_history_cold_start(self):
        w = M.ModelWeights.init(TINY, seed=5)
        batch = make_batch(seed=5, m=2)
        ctx = M.encode_context(batch, w.as_tensors(), TINY)
        h = M.decode_history(
            H.EventSequence([], [], 10.0, 2), ctx, w.as_tensors(), 1.0, TINY
        )
        assert h.history_length == 0
        assert h.last_event_time == 0.0
        assert h.as_array().shape == (TINY.d_model,)

    def test_causal_mask_prefix_stability(self):
        w = M.ModelWeights.init(TINY, seed=6)
        batch = make_batch(seed=6, m=2, n_target=5)
        wt = w.as_tensors()
        ctx = M.encode_context(batch, wt, TINY)
        full = M._decode_positions(batch.target, ctx, wt, batch.time_scale, TINY).data
        for p in (0, 2, 4):
            part = M._decode_positions(
                batch.target.prefix(p), ctx, wt, batch.time_scale, TINY
            ).data
            np.testing.assert_allclose(part, full[: p + 1], atol=1e-12)

    def test_outputs_finite_for_random_histories(self):
        rng = np.random.default_rng(7)
        w = M.ModelWeights.init(TINY, seed=7)
        batch = make_batch(seed=7, m=2)
        wt = w.as_tensors()
        ctx = M.encode_context(batch, wt, TINY)
        for _ in range(100):
            n = int(rng.integers(0, 10))
            times = np.sort(rng.uniform(0.1, 9.9, n))
            hist = H.EventSequence(times, rng.integers(0, 2, n), 10.0, 2)
            h = M.decode_history(hist, ctx, wt, batch.time_scale, TINY)
            assert np.isfinite(h.as_array()).all()


class TestPredictIntensityParams:
    def _embedding(self, seed):
        w = M.ModelWeights.init(TINY, seed=seed)
        batch = make_batch(seed=seed, m=2)
        wt = w.as_tensors()
        ctx = M.encode_context(batch, wt, TINY)
        h = M.decode_history(batch.target, ctx, wt, batch.time_scale, TINY)
        return w, wt, h

    def test_strictly_positive_and_shaped(self):
        w, wt, h = self._embedding(8)
        params = M.predict_intensity_params(h, wt, TINY)
        for arr in (params.mu_hat, params.alpha_hat, params.beta_hat):
            assert arr.shape == (TINY.max_marks,)
            assert (arr > 0).all()

    def test_gradient_wrt_embedding(self):
        w, wt, h = self._embedding(9)
        h0 = h.vector.data.copy()

        def value(x):
            raw = M._head(T.Tensor.const(x), wt)
            mu, al, be = M._param_blocks(raw, TINY.max_marks)
            return float(mu.data.sum() + al.data.sum() + be.data.sum())

        tape = T.Tape()
        leaf = tape.leaf(h0)
        raw = M._head(leaf, wt)
        mu, al, be = M._param_blocks(raw, TINY.max_marks)
        loss = T.add(T.add(T.sum_all(mu), T.sum_all(al)), T.sum_all(be))
        grads = tape.backward(loss)
        assert_grads_close(grads[leaf.node], finite_diff_grad(value, h0.copy()), rel=1e-5)


class TestForwardNLL:
    def test_loss_finite_and_positive_on_sampled_batch(self):
        prior = H.PriorConfig(num_marks_range=(1, 2), seed=60)
        inst = H.sample_instance(prior, 0)
        seqs = S.simulate_dataset(inst, 4, S.SimulationConfig(window_end=20.0, seed=61))
        batch = M.ContextBatch(seqs[:3], seqs[3])
        w = M.ModelWeights.init(TINY, seed=10)
        loss, n = M.forward_nll(batch, w)
        assert np.isfinite(float(loss.data))
        assert float(loss.data) > 0.0
        assert n == len(seqs[3])

    def test_matches_numpy_likelihood_via_interval_params(self):
        w = M.ModelWeights.init(TINY, seed=11)
        batch = make_batch(seed=11, m=3, n_target=5)
        loss, _ = M.forward_nll(batch, w)
        s = batch.time_scale
        params_norm = M.interval_params(batch, w, denormalize=False)
        target_norm = H.EventSequence(
            batch.target.times / s,
            batch.target.marks,
            batch.target.window_end / s,
            batch.num_marks,
        )
        params_k = [
            L.IntensityParams(
                p.last_event_time,
                p.mu_hat[: batch.num_marks],
                p.alpha_hat[: batch.num_marks],
                p.beta_hat[: batch.num_marks],
            )
            for p in params_norm
        ]
        want = L.sequence_nll_model(target_norm, params_k)
        assert float(loss.data) == pytest.approx(want.total, abs=1e-10)

    def test_denormalized_nll_identity(self):
        # NLL_orig = NLL_norm + n * log(s)
        w = M.ModelWeights.init(TINY, seed=12)
        batch = make_batch(seed=12, m=2, n_target=4)
        s = batch.time_scale
        loss, n = M.forward_nll(batch, w)
        params_orig = M.interval_params(batch, w, denormalize=True)
        got = L.sequence_nll_model(batch.target, params_orig)
        assert got.total == pytest.approx(float(loss.data) + n * math.log(s), abs=1e-8)

    def test_end_to_end_gradient_matches_finite_differences(self):
        w = M.ModelWeights.init(TINY, seed=13)
        batch = make_batch(seed=13, m=2, n_target=3)

        tape = T.Tape()
        wt = w.as_tensors(tape)
        loss, _ = M._forward_nll_with(batch, wt, TINY)
        grads = tape.backward(loss)

        rng = np.random.default_rng(0)
        step = 1e-5
        checked = 0
        for name, leaf in wt.items():
            g = grads[leaf.node]
            arr = w.arrays[name]
            for idx in rng.choice(arr.size, size=min(3, arr.size), replace=False):
                orig = arr.flat[idx]
                arr.flat[idx] = orig + step
                fp = float(M.forward_nll(batch, w)[0].data)
                arr.flat[idx] = orig - step
                fm = float(M.forward_nll(batch, w)[0].data)
                arr.flat[idx] = orig
                fd = (fp - fm) / (2.0 * step)
                an = float(g.flat[idx])
                err = abs(fd - an)
                assert err <= 1e-4 * max(abs(fd), abs(an)) or err <= 1e-7, (
                    name,
                    int(idx),
                    fd,
                    an,
                )
                checked += 1
        assert checked > 50

    def test_context_permutation_invariance(self):
        w = M.ModelWeights.init(TINY, seed=14)
        batch = make_batch(seed=14, m=4)
        base, _ = M.forward_nll(batch, w)
        perm = M.ContextBatch(
            [batch.context[i] for i in (3, 1, 0, 2)], batch.target, batch.time_scale
        )
        other, _ = M.forward_nll(perm, w)
        assert abs(float(base.data) - float(other.data)) <= 1e-10
