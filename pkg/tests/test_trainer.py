import math

import numpy as np
import pytest

from shortcut_forge import diffcore as dc
from shortcut_forge import encoders as enc
from shortcut_forge import synthcorpus as sc
from shortcut_forge import trainer as tr
from shortcut_forge.errors import ContractViolation

from oracles import auc_pair_counting, finite_difference_grads


def t64(data, rg=False):
    return dc.tensor(data, requires_grad=rg, dtype=np.float64)


@pytest.fixture(scope="module")
def smoke_corpus():
    cfg = sc.CorpusConfig(n_train=200, n_val=40, n_test=10, image_size=32, seed=17)
    return sc.generate_corpus(cfg)


class TestClipLoss:
    def test_single_pair_is_zero(self):
        a = t64([[1.0, 0.0]])
        b = t64([[0.0, 1.0]])
        t = t64([[1.0, 1.0]])
        assert tr.clip_loss(a, b, t, temperature=1.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_computed_two_sample_case(self):
        # a = b = t with orthogonal rows at temperature 1: each matching term
        # is log(1 + e^{-1}); three terms total
        x = t64([[1.0, 0.0], [0.0, 1.0]])
        loss = tr.clip_loss(x, x, x, temperature=1.0)
        each = math.log1p(math.exp(-1.0))
        assert loss.item() == pytest.approx(3 * each, rel=1e-6)
        assert loss.item() == pytest.approx(0.9398, abs=1e-4)

    def test_consistent_permutation_invariance(self):
        rng = np.random.default_rng(3)
        a, b, t = (t64(rng.normal(size=(5, 8))) for _ in range(3))
        base = tr.clip_loss(a, b, t, 0.07).item()
        perm = rng.permutation(5)
        pa, pb, pt = (t64(x.data[perm]) for x in (a, b, t))
        assert tr.clip_loss(pa, pb, pt, 0.07).item() == pytest.approx(base, rel=1e-9)

    def test_symmetric_in_augmentations(self):
        rng = np.random.default_rng(4)
        a, b, t = (t64(rng.normal(size=(4, 8))) for _ in range(3))
        ab = tr.clip_loss(a, b, t, 0.07).item()
        ba = tr.clip_loss(b, a, t, 0.07).item()
        assert ab == pytest.approx(ba, rel=1e-12)

    def test_empty_batch_rejected(self):
        z = t64(np.zeros((0, 8)))
        with pytest.raises(ContractViolation):
            tr.clip_loss(z, z, z, 0.07)

    def test_gradient_matches_finite_differences(self):
        # 3-sample, 8-dim toy, 64-bit
        rng = np.random.default_rng(7)
        arrays = [rng.normal(size=(3, 8)) for _ in range(3)]
        tau = 0.5

        def loss_np(arrs):
            def norm(x):
                return x / np.linalg.norm(x, axis=1, keepdims=True)

            def ce(s):
                sm = s - s.max(axis=1, keepdims=True)
                logp = sm - np.log(np.exp(sm).sum(axis=1, keepdims=True))
                return -np.trace(logp) / s.shape[0]

            def term(x, y):
                s = norm(x) @ norm(y).T / tau
                return 0.5 * (ce(s) + ce(s.T))

            a, b, t = arrs
            return float(term(a, t) + term(b, t) + term(a, b))

        expected = finite_difference_grads(loss_np, arrays, h=1e-4)
        params = [t64(a, rg=True) for a in arrays]
        got = dc.grad(lambda ps: tr.clip_loss(ps[0], ps[1], ps[2], tau), params)
        for g, e in zip(got, expected):
            np.testing.assert_allclose(g.data, e, rtol=1e-4, atol=1e-8)


class TestSupervisedLoss:
    def test_saturated_correct_logits(self):
        logits = t64(np.where(np.eye(4, 5)[:4] > 0, 60.0, -60.0))
        labels = np.eye(4, 5)[:4]
        assert tr.supervised_loss(logits, labels).item() < 1e-10

    def test_zero_logits(self):
        loss = tr.supervised_loss(t64(np.zeros((3, 5))), np.zeros((3, 5)))
        assert loss.item() == pytest.approx(5 * math.log(2.0), rel=1e-9)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=(6, 5))
        labels = (rng.uniform(size=(6, 5)) < 0.3).astype(float)
        total = 0.0
        for k in range(5):
            col = 0.0
            for i in range(6):
                p = 1.0 / (1.0 + math.exp(-logits[i, k]))
                col += -(labels[i, k] * math.log(p) + (1 - labels[i, k]) * math.log(1 - p))
            total += col / 6
        got = tr.supervised_loss(t64(logits), labels).item()
        assert got == pytest.approx(total, abs=1e-6)


class TestOptimizerStep:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = dc.tensor([1.0, -2.0], requires_grad=True)
        state = tr.OptimizerState.for_params([p])
        before = p.data.copy()
        tr.optimizer_step([p], [np.zeros(2, dtype=np.float32)], state, tr.TrainConfig())
        np.testing.assert_array_equal(p.data, before)
        assert state.step == 1

    def test_first_step_magnitude_equals_lr(self):
        for lr in (1e-4, 1e-3, 2.5e-2):
            p = dc.tensor([0.0], requires_grad=True, dtype=np.float64)
            state = tr.OptimizerState.for_params([p])
            cfg = tr.TrainConfig(learning_rate=lr)
            tr.optimizer_step([p], [np.ones(1)], state, cfg)
            assert abs(float(p.data[0])) == pytest.approx(lr, abs=1e-7)

    def test_lr_scaling_scales_first_step_exactly(self):
        def first_step(lr):
            p = dc.tensor([0.0], requires_grad=True, dtype=np.float64)
            state = tr.OptimizerState.for_params([p])
            tr.optimizer_step([p], [np.full(1, 0.37)], state, tr.TrainConfig(learning_rate=lr))
            return float(p.data[0])

        k = 7.0
        assert first_step(1e-3 * k) == pytest.approx(k * first_step(1e-3), rel=1e-12)

    def test_two_runs_bit_identical(self):
        def run():
            rng = np.random.default_rng(5)
            p = dc.tensor(rng.normal(size=(3, 3)), requires_grad=True)
            state = tr.OptimizerState.for_params([p])
            cfg = tr.TrainConfig(learning_rate=1e-2)
            for step in range(20):
                g = np.sin(p.data * (step + 1)).astype(np.float32)
                tr.optimizer_step([p], [g], state, cfg)
            return p.data.copy()

        assert np.array_equal(run(), run())

    def test_shape_mismatch_rejected(self):
        p = dc.tensor([1.0, 2.0], requires_grad=True)
        state = tr.OptimizerState.for_params([p])
        with pytest.raises(ContractViolation):
            tr.optimizer_step([p], [np.zeros(3, dtype=np.float32)], state, tr.TrainConfig())

    def test_sgd_step(self):
        p = dc.tensor([1.0], requires_grad=True, dtype=np.float64)
        state = tr.OptimizerState.for_params([p])
        cfg = tr.TrainConfig(learning_rate=0.1, optimizer="sgd")
        tr.optimizer_step([p], [np.full(1, 2.0)], state, cfg)
        assert float(p.data[0]) == pytest.approx(0.8, rel=1e-12)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ContractViolation):
            tr.TrainConfig(learning_rate=0.0)
        with pytest.raises(ContractViolation):
            tr.TrainConfig(batch_size=0)
        with pytest.raises(ContractViolation):
            tr.TrainConfig(temperature=0.0)
        with pytest.raises(ContractViolation):
            tr.TrainConfig(optimizer="adagrad")

    def test_round_trip(self):
        cfg = tr.TrainConfig(epochs=3, learning_rate=2e-3, seed=9)
        assert tr.TrainConfig.from_json(cfg.to_json()) == cfg


class TestTrainClip:
    def test_zero_epochs_returns_initial_params(self, smoke_corpus):
        cfg = tr.TrainConfig(epochs=0, seed=5)
        res = tr.train_clip(smoke_corpus, cfg, variant="shortcut")
        fresh = enc.init_dual_encoder(
            smoke_corpus.config.image_size, smoke_corpus.config.caption_vocab_size, seed=5
        )
        for (_, a), (_, b) in zip(enc.param_items(res.params), enc.param_items(fresh)):
            np.testing.assert_array_equal(a.data, b.data)
        assert res.best_epoch == 0 and res.log == []

    def test_smoke_training_halves_loss(self, smoke_corpus):
        cfg = tr.TrainConfig(epochs=30, learning_rate=3e-3, seed=5)
        res = tr.train_clip(smoke_corpus, cfg, variant="shortcut")
        assert res.log[-1][1] < 0.5 * res.log[0][1]

    def test_best_epoch_is_argmin_of_validation_curve(self, smoke_corpus):
        cfg = tr.TrainConfig(epochs=10, learning_rate=3e-3, seed=5)
        res = tr.train_clip(smoke_corpus, cfg, variant="shortcut")
        vals = [row[2] for row in res.log]
        assert res.best_epoch == int(np.argmin(vals)) + 1

    def test_rejects_test_split(self, smoke_corpus):
        with pytest.raises(ContractViolation):
            tr.train_clip(smoke_corpus, tr.TrainConfig(epochs=1), splits=("test", "val"))

    def test_writes_epoch_log(self, smoke_corpus, tmp_path):
        log = tmp_path / "loss.csv"
        tr.train_clip(smoke_corpus, tr.TrainConfig(epochs=3, seed=1), log_path=log)
        rows = log.read_text().strip().splitlines()
        assert rows[0] == "epoch,train_loss,val_loss,lr"
        assert len(rows) == 4


class TestTrainCnn:
    def test_zero_epochs_returns_initial_params(self, smoke_corpus):
        res = tr.train_cnn(smoke_corpus, tr.TrainConfig(epochs=0, seed=3))
        fresh = enc.init_classifier(smoke_corpus.config.image_size, seed=3)
        for (_, a), (_, b) in zip(enc.param_items(res.params), enc.param_items(fresh)):
            np.testing.assert_array_equal(a.data, b.data)

    def test_deterministic_across_reruns(self, smoke_corpus):
        cfg = tr.TrainConfig(epochs=3, learning_rate=1e-3, seed=8)
        a = tr.train_cnn(smoke_corpus, cfg, variant="shortcut")
        b = tr.train_cnn(smoke_corpus, cfg, variant="shortcut")
        assert a.log == b.log
        for (_, ta), (_, tb) in zip(enc.param_items(a.params), enc.param_items(b.params)):
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_shortcut_training_reaches_high_auc_on_consistent_samples(self):
        cfg = sc.CorpusConfig(n_train=500, n_val=50, n_test=10, image_size=32, seed=23)
        corpus = sc.generate_corpus(cfg)
        res = tr.train_cnn(
            corpus, tr.TrainConfig(epochs=50, learning_rate=3e-3, seed=5), variant="shortcut"
        )
        train = corpus.split("train").samples
        keep = [i for i, s in enumerate(train) if s.watermark.corrupted and s.watermark.correct]
        imgs = tr.split_images(corpus.split("train"), "shortcut")[keep]
        labels = tr.split_labels(corpus.split("train"))[keep]
        n, h, w = imgs.shape
        logits = enc.classifier_forward(dc.tensor(imgs.reshape(n, 1, h, w)), res.params).data
        aucs = [
            auc_pair_counting(logits[:, k].tolist(), labels[:, k].astype(int).tolist())
            for k in range(5)
        ]
        assert np.mean(aucs) > 0.95

    def test_rejects_test_split(self, smoke_corpus):
        with pytest.raises(ContractViolation):
            tr.train_cnn(smoke_corpus, tr.TrainConfig(epochs=1), splits=("train", "test"))


class TestFinetune:
    def test_zero_epochs_returns_converted_initial_params(self, smoke_corpus):
        pre = tr.train_clip(smoke_corpus, tr.TrainConfig(epochs=0, seed=4))
        res = tr.finetune(pre.params, smoke_corpus, tr.TrainConfig(epochs=0, seed=9))
        expected = enc.to_classifier(pre.params.image, head_init_seed=9)
        for (_, a), (_, b) in zip(enc.param_items(res.params), enc.param_items(expected)):
            np.testing.assert_array_equal(a.data, b.data)

    def test_classifier_checkpoint_continues_as_is(self, smoke_corpus):
        pre = tr.train_cnn(smoke_corpus, tr.TrainConfig(epochs=0, seed=4))
        res = tr.finetune(pre.params, smoke_corpus, tr.TrainConfig(epochs=0, seed=9))
        for (_, a), (_, b) in zip(enc.param_items(res.params), enc.param_items(pre.params)):
            np.testing.assert_array_equal(a.data, b.data)

    def test_freeze_trunk_flag(self, smoke_corpus):
        pre = tr.train_cnn(smoke_corpus, tr.TrainConfig(epochs=0, seed=4))
        res = tr.finetune(
            pre.params,
            smoke_corpus,
            tr.TrainConfig(epochs=2, learning_rate=1e-3, seed=9, freeze_trunk=True),
        )
        for (_, a), (_, b) in zip(
            enc.param_items(pre.params.trunk), enc.param_items(res.params.trunk)
        ):
            np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(res.params.head_w.data, pre.params.head_w.data)

    def test_trainable_trunk_moves_by_default(self, smoke_corpus):
        pre = tr.train_cnn(smoke_corpus, tr.TrainConfig(epochs=0, seed=4))
        res = tr.finetune(pre.params, smoke_corpus, tr.TrainConfig(epochs=2, learning_rate=1e-3, seed=9))
        moved = any(
            not np.array_equal(a.data, b.data)
            for (_, a), (_, b) in zip(
                enc.param_items(pre.params.trunk), enc.param_items(res.params.trunk)
            )
        )
        assert moved

    def test_rejects_non_model_checkpoint(self, smoke_corpus):
        with pytest.raises(ContractViolation):
            tr.finetune(object(), smoke_corpus, tr.TrainConfig(epochs=1))

    def test_rejects_corrupted_finetune_data(self, smoke_corpus):
        bad = sc.Split(name="finetune", samples=smoke_corpus.split("train").samples[:10])
        corpus = sc.Corpus(config=smoke_corpus.config, splits={**smoke_corpus.splits, "finetune": bad})
        pre = tr.train_cnn(smoke_corpus, tr.TrainConfig(epochs=0, seed=4))
        with pytest.raises(ContractViolation):
            tr.finetune(pre.params, corpus, tr.TrainConfig(epochs=1))


class TestAugmentations:
    def test_deterministic_given_stream(self):
        rng = np.random.default_rng(2)
        imgs = rng.uniform(size=(4, 32, 32)).astype(np.float32)
        a = tr.augment_images(imgs, np.random.default_rng(7))
        b = tr.augment_images(imgs, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_output_in_unit_range(self):
        rng = np.random.default_rng(3)
        imgs = rng.uniform(size=(8, 32, 32)).astype(np.float32)
        out = tr.augment_images(imgs, np.random.default_rng(1))
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.shape == imgs.shape
