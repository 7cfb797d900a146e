"""Initialization classes, schedule, Adam + restart, and the train loop."""

import numpy as np
import pytest

from mlrf.autodiff import ParamStore, Tensor
from mlrf.data import ParallelCorpus, Vocabulary, generate_synthetic, make_batches
from mlrf.data import SyntheticTaskSpec
from mlrf.fusion import FusionConfig
from mlrf.model import ModelConfig, Transformer
from mlrf.training import (
    AdamState,
    TrainConfig,
    adam_step,
    count_parameters,
    evaluate_teacher_forced,
    init_parameters,
    lr_schedule,
    restart_adam,
    train_epoch,
    train_step,
)
from tests.conftest import toy_config, toy_fusion, toy_model


class TestInitParameters:
    def test_layer_norms_start_at_identity(self):
        store = init_parameters(toy_config(), toy_fusion("both", "self_attention"), 0)
        for name, t in store.items():
            if "norm" in name and name.endswith(".gain"):
                np.testing.assert_array_equal(t.data, 1.0)
            if "norm" in name and name.endswith(".bias"):
                np.testing.assert_array_equal(t.data, 0.0)

    def test_word_embedding_spread(self):
        d = 256
        cfg = ModelConfig(
            n_layers=1, d_model=d, d_ff=4, n_heads=1,
            src_vocab=500, tgt_vocab=500, max_len=4,
        )
        store = init_parameters(cfg, FusionConfig(), 0)
        emb = store["src_embed.weight"].data
        assert emb.size >= 10**5
        assert abs(emb.std() - d**-0.5) / d**-0.5 < 0.05

    def test_layer_embedding_is_bounded_uniform(self):
        store = init_parameters(toy_config(), toy_fusion("decoder", "self_attention"), 0)
        table = store["fusion.layer_embed.weight"].data
        assert (np.abs(table) <= 0.1).all()
        assert np.abs(table).max() > 0.05  # actually spread out, not zeros

    def test_fan_in_bound_on_weights_and_biases(self):
        store = init_parameters(toy_config(), FusionConfig(), 0)
        w = store["encoder.layer0.ffn.w1"].data  # fan_in = 8
        b = store["encoder.layer0.ffn.b1"].data
        bound = 1 / np.sqrt(8)
        assert (np.abs(w) <= bound).all() and (np.abs(b) <= bound).all()
        w2 = store["encoder.layer0.ffn.w2"].data  # fan_in = 16
        assert (np.abs(w2) <= 1 / np.sqrt(16)).all()

    def test_equal_seeds_are_bit_identical(self):
        a = init_parameters(toy_config(), toy_fusion("both", "fnn"), 42)
        b = init_parameters(toy_config(), toy_fusion("both", "fnn"), 42)
        assert a.names() == b.names()
        for name, t in a.items():
            np.testing.assert_array_equal(t.data, b[name].data)

    def test_core_draws_unaffected_by_fusion(self):
        plain = init_parameters(toy_config(), FusionConfig(), 7)
        fused = init_parameters(toy_config(), toy_fusion("both", "self_attention"), 7)
        for name, t in plain.items():
            np.testing.assert_array_equal(t.data, fused[name].data)


class TestSchedule:
    def test_branches_meet_at_warmup(self):
        assert abs(lr_schedule(16000, 256) - 4.9411e-4) < 1e-7
        up = lr_schedule(16000, 256, 16000)
        down = 256**-0.5 * 16000**-0.5
        assert abs(up - down) < 1e-12

    def test_first_step(self):
        assert abs(lr_schedule(1, 256) - 3.0882e-8) < 1e-11

    def test_shape(self):
        rates = [lr_schedule(t, 256, warmup_steps=100) for t in range(1, 301)]
        assert all(a < b for a, b in zip(rates[:99], rates[1:100]))
        assert all(a > b for a, b in zip(rates[100:299], rates[101:300]))

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(0, 256)


def scalar_store(value: float) -> ParamStore:
    store = ParamStore()
    store.add("p", Tensor(np.array([value])))
    return store


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        store = scalar_store(1.5)
        store["p"].grad = np.zeros(1)
        state = AdamState(store)
        adam_step(store, state, lr=0.1)
        np.testing.assert_array_equal(store["p"].data, [1.5])

    def test_hand_computed_first_step(self):
        store = scalar_store(1.0)
        store["p"].grad = np.ones(1)
        state = AdamState(store)
        adam_step(store, state, lr=0.1)
        # bias correction makes m_hat/sqrt(v_hat) = 1 on step one
        np.testing.assert_allclose(store["p"].data, [0.9], atol=1e-6)

    def test_identical_runs_identical_trajectories(self):
        def run():
            store = scalar_store(1.0)
            state = AdamState(store)
            history = []
            rng = np.random.default_rng(5)
            for _ in range(10):
                store["p"].grad = rng.standard_normal(1)
                adam_step(store, state, lr=0.01)
                history.append(float(store["p"].data[0]))
            return history

        assert run() == run()

    def test_restart_zeroes_everything_once(self):
        store = scalar_store(1.0)
        state = AdamState(store)
        store["p"].grad = np.ones(1)
        adam_step(store, state, lr=0.1)
        assert state.t == 1 and state.m["p"][0] != 0
        restart_adam(state)
        assert state.t == 0
        np.testing.assert_array_equal(state.m["p"], 0.0)
        np.testing.assert_array_equal(state.v["p"], 0.0)
        assert state.restarted()
        with pytest.raises(RuntimeError):
            restart_adam(state)


def one_sample_batches():
    corpus = ParallelCorpus([(["s1", "s2", "s3"], ["s1", "s2", "s3"])])
    vocab = Vocabulary(f"s{i}" for i in range(5))
    return make_batches(corpus, vocab, vocab, batch_size=1), vocab


class TestTrainLoop:
    @pytest.mark.parametrize("side,kind", [
        ("none", "baseline"), ("decoder", "avg"), ("encoder", "fnn"),
        ("both", "self_attention"),
    ])
    def test_single_sample_overfit(self, side, kind):
        batches, vocab = one_sample_batches()
        cfg = ModelConfig(
            n_layers=2, d_model=8, d_ff=16, n_heads=2,
            src_vocab=len(vocab), tgt_vocab=len(vocab), max_len=8,
        )
        model = Transformer(cfg, toy_fusion(side, kind), seed=1)
        tcfg = TrainConfig(warmup_steps=40, seed=1)
        state = AdamState(model.params)
        losses = []
        for _ in range(50):
            losses.append(train_step(model, batches[0], state, tcfg).loss)
        assert losses[-1] < losses[0]
        assert losses[-1] < 0.5 * losses[0]

    def test_memorized_sample_scores_perfect_accuracy(self):
        batches, vocab = one_sample_batches()
        cfg = ModelConfig(
            n_layers=1, d_model=16, d_ff=32, n_heads=2,
            src_vocab=len(vocab), tgt_vocab=len(vocab), max_len=8,
        )
        model = Transformer(cfg, FusionConfig(), seed=2)
        tcfg = TrainConfig(warmup_steps=30, seed=2)
        state = AdamState(model.params)
        for _ in range(150):
            metrics = train_step(model, batches[0], state, tcfg)
        assert metrics.accuracy == 1.0
        assert evaluate_teacher_forced(model, batches)["accuracy"] == 1.0

    def test_loss_sequence_is_seed_deterministic(self):
        spec = SyntheticTaskSpec("copy", alphabet=6, min_len=2, max_len=4, count=8, seed=3)
        corpus = generate_synthetic(spec)
        vocab = Vocabulary(f"s{i}" for i in range(6))
        cfg = ModelConfig(
            n_layers=1, d_model=8, d_ff=16, n_heads=2,
            src_vocab=len(vocab), tgt_vocab=len(vocab), max_len=8, dropout=0.1,
        )

        def run():
            batches = make_batches(corpus, vocab, vocab, 4, shuffle_seed=9)
            model = Transformer(cfg, FusionConfig(), seed=4)
            model.reseed_dropout(99)
            state = AdamState(model.params)
            tcfg = TrainConfig(warmup_steps=40, seed=4)
            losses = []
            train_epoch(
                model, batches, state, tcfg,
                on_step=lambda m: losses.append(m.loss),
            )
            return losses

        assert run() == run()

    def test_empty_dataset_rejected(self):
        model = toy_model()
        with pytest.raises(ValueError):
            train_epoch(model, [], AdamState(model.params), TrainConfig())

    def test_restarted_phase_uses_fixed_lr(self):
        batches, vocab = one_sample_batches()
        cfg = ModelConfig(
            n_layers=1, d_model=8, d_ff=16, n_heads=1,
            src_vocab=len(vocab), tgt_vocab=len(vocab), max_len=8,
        )
        model = Transformer(cfg, FusionConfig(), seed=0)
        tcfg = TrainConfig(warmup_steps=40, restart_lr=5e-5, seed=0)
        state = AdamState(model.params)
        train_step(model, batches[0], state, tcfg)
        restart_adam(state)
        metrics = train_step(model, batches[0], state, tcfg)
        assert metrics.lr == 5e-5
        assert metrics.phase == "restarted"


class TestCounts:
    def test_count_is_sum_of_sizes(self):
        model = toy_model("decoder", "self_attention")
        assert count_parameters(model.params) == sum(
            t.size for _, t in model.params.items()
        )
