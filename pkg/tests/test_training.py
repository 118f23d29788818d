import json

import numpy as np
import pytest

from npc_lab import training
from npc_lab.correction import init_teacher
from npc_lab.data import NoiseSpec, generate_synthetic, inject_noise, split_dev
from npc_lab.detection import FlagSet
from npc_lab.encoder import encode_texts, init_params, load_checkpoint
from npc_lab.errors import ConfigurationError, NumericFailure
from npc_lab.training import (
    OptimizerState,
    TrainConfig,
    adam_step,
    build_vocab,
    clip_gradients,
    detect_epoch,
    mine_hard_negatives,
    run,
    train_epoch,
    warmup,
)


@pytest.fixture(scope="module")
def small():
    pairs, collection = generate_synthetic(4, 20, 80, seed=1)
    train, dev = split_dev(pairs, 0.2, seed=1)
    noisy = inject_noise(train, NoiseSpec(0.3, 2))
    return noisy, dev, collection, build_vocab(noisy, collection, dev)


def small_config(**kw):
    base = dict(batch_size=16, hidden=8, warmup_epochs=1, total_epochs=3, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(params):
    return {k: v.copy() for k, v in params.arrays().items()}


def same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.batch_size, c.warmup_epochs, c.total_epochs) == (2e-3, 64, 3, 15)
        assert (c.alpha, c.threshold, c.grad_clip, c.hard_negatives_per_query) == (0.999, 0.5, 5.0, 1)

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("bad", [{"method": "x"}, {"batch_size": 1}, {"warmup_epochs": 4, "total_epochs": 3}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)


class TestOptimizer:
    def test_first_adam_step_is_signed_lr(self):
        params = init_params(4, 2, seed=0)
        before = snapshot(params)
        grads = params.zeros_like()
        grads.embedding[1, 0] = 3.0
        grads.bias[1] = -0.5
        adam_step(params, grads, OptimizerState.zeros_for(params), TrainConfig(learning_rate=0.01))
        # with bias correction the first step is lr * g / (|g| + eps)
        assert params.embedding[1, 0] == pytest.approx(before["embedding"][1, 0] - 0.01, abs=1e-9)
        assert params.bias[1] == pytest.approx(before["bias"][1] + 0.01, abs=1e-9)
        assert params.embedding[0, 0] == before["embedding"][0, 0]

    def test_clip(self):
        grads = init_params(3, 2).zeros_like()
        grads.bias[:] = [3.0, 4.0]
        assert clip_gradients(grads, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(grads.bias, [0.6, 0.8])


class TestWarmup:
    def test_zero_epochs(self, small):
        pairs, _, _, vocab = small
        params = init_params(len(vocab), 8, seed=5)
        before = snapshot(params)
        warmup(params, OptimizerState.zeros_for(params), vocab, pairs, small_config(), epochs=0)
        assert same(before, params.arrays())

    def test_step_count(self, small):
        pairs, _, _, vocab = small
        cfg = small_config(batch_size=len(pairs) // 2)
        params = init_params(len(vocab), 8, seed=5)
        state = OptimizerState.zeros_for(params)
        warmup(params, state, vocab, pairs, cfg, epochs=1)
        assert state.step == 2

    def test_loss_decreases_on_clean_data(self):
        pairs, collection = generate_synthetic(4, 20, 80, seed=3)
        vocab = build_vocab(pairs, collection)
        cfg = small_config(hidden=16)
        params = init_params(len(vocab), 16, seed=5)
        _, trace = warmup(params, OptimizerState.zeros_for(params), vocab, pairs, cfg, epochs=6)
        assert trace[-1]["loss_mean"] < trace[0]["loss_mean"]


class TestHardNegatives:
    def test_k_zero(self, small):
        pairs, _, collection, vocab = small
        assert mine_hard_negatives(init_params(len(vocab), 8), vocab, pairs, collection, 0) == {}

    def test_matches_brute_force(self, small):
        pairs, _, collection, vocab = small
        params = init_params(len(vocab), 8, seed=2)
        store = mine_hard_negatives(params, vocab, pairs, collection, 3)
        doc_ids = list(collection)
        assert len(doc_ids) == 80
        d = encode_texts([collection[i] for i in doc_ids], vocab, params, True)
        for pair in pairs:
            q = encode_texts([pair.query_text], vocab, params, True)[0]
            ranked = sorted((i for i in doc_ids if i != pair.doc_id), key=lambda i: (-(d[doc_ids.index(i)] @ q), i))
            assert store[pair.pair_id] == ranked[:3]
            assert pair.doc_id not in store[pair.pair_id]


class TestTrainEpoch:
    def test_baseline_equals_all_ones(self, small):
        pairs, _, _, vocab = small
        cfg = small_config()
        outs = []
        for flags in (None, FlagSet.all_clean([p.pair_id for p in pairs])):
            params = init_params(len(vocab), 8, seed=5)
            _, stats = train_epoch(params, OptimizerState.zeros_for(params), None, vocab, pairs, flags, None, cfg, 0)
            outs.append((snapshot(params), stats.loss_sum))
        assert same(outs[0][0], outs[1][0]) and outs[0][1] == outs[1][1]

    def test_all_noisy_still_moves(self, small):
        pairs, _, _, vocab = small
        params = init_params(len(vocab), 8, seed=5)
        teacher = init_teacher(init_params(len(vocab), 8, seed=6), 0.999)
        flags = FlagSet({p.pair_id: 0 for p in pairs}, {})
        before = snapshot(params)
        teacher, stats = train_epoch(
            params, OptimizerState.zeros_for(params), teacher, vocab, pairs, flags, None, small_config(), 1
        )
        assert not same(before, params.arrays())
        assert teacher.step == stats.steps

    def test_bit_reproducible(self, small):
        pairs, _, _, vocab = small
        results = []
        for _ in range(2):
            params = init_params(len(vocab), 8, seed=5)
            train_epoch(params, OptimizerState.zeros_for(params), None, vocab, pairs, None, None, small_config(), 0)
            results.append(snapshot(params))
        assert same(*results)


class TestRun:
    def test_pure_warmup_is_baseline(self, small):
        pairs, dev, collection, _ = small
        a = run(small_config(method="npc", total_epochs=1), pairs, collection, dev)
        b = run(small_config(method="baseline", total_epochs=1), pairs, collection, dev)
        assert same(snapshot(a.params), snapshot(b.params))
        assert a.teacher is None and "flags" not in a.log[0]

    def test_log_and_step_counts(self, small):
        pairs, dev, collection, _ = small
        cfg = small_config(total_epochs=4)
        result = run(cfg, pairs, collection, dev)
        batches_per_epoch = len(pairs) // cfg.batch_size
        assert [r["phase"] for r in result.log] == ["warmup", "train", "train", "train"]
        assert [("flags" in r) for r in result.log] == [False, True, True, True]
        assert [r["flags"]["from_epoch"] for r in result.log[1:]] == [1, 2, 3]
        assert result.log[-1]["optimizer_steps"] == 4 * batches_per_epoch
        assert result.log[-1]["ema_steps"] == 3 * batches_per_epoch
        assert {"precision", "recall", "f1", "balanced_accuracy"} <= set(result.log[1]["detection"])

    def test_fixed_flags_reused(self, small):
        pairs, dev, collection, _ = small
        result = run(small_config(total_epochs=4, fixed_flags=True), pairs, collection, dev)
        first = result.flag_history[0]
        assert all(f is first for f in result.flag_history)
        assert [r["flags"]["from_epoch"] for r in result.log[1:]] == [1, 1, 1]
        assert "gmm" in result.log[1] and "gmm" not in result.log[2]

    def test_detection_precedes_training(self, small):
        pairs, dev, collection, _ = small
        cfg = small_config(total_epochs=2)
        before = run(small_config(total_epochs=1), pairs, collection, dev)
        _, fit, _ = detect_epoch(before.params, before.vocab, pairs, collection, cfg, 1)
        full = run(cfg, pairs, collection, dev)
        assert full.log[1]["gmm"] == json.loads(json.dumps(fit.to_dict()))

    def test_hard_negative_mode(self, small):
        pairs, dev, collection, _ = small
        result = run(small_config(negatives="hard", hard_negatives_per_query=2), pairs, collection, dev)
        assert result.log[-1]["train"]["steps"] > 0

    def test_deterministic_log(self, small, tmp_path):
        pairs, dev, collection, _ = small
        run(small_config(), pairs, collection, dev, out_dir=tmp_path / "a")
        run(small_config(), pairs, collection, dev, out_dir=tmp_path / "b")
        for name in ("metrics.jsonl", "last.ckpt", "best.ckpt", "last.teacher.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_interrupted_run_keeps_last_checkpoint(self, small, tmp_path, monkeypatch):
        pairs, dev, collection, _ = small
        real = training.train_epoch

        def failing(*args, **kwargs):
            if args[8] == 2:
                raise NumericFailure("boom")
            return real(*args, **kwargs)

        monkeypatch.setattr(training, "train_epoch", failing)
        with pytest.raises(NumericFailure, match="epoch 2"):
            run(small_config(total_epochs=4), pairs, collection, dev, out_dir=tmp_path)
        _, _, record = load_checkpoint(tmp_path / "last.ckpt")
        assert record["epoch"] == 1
        assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 2
        assert not [p for p in tmp_path.iterdir() if p.name.startswith(".tmp")]
