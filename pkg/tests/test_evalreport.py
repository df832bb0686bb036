import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shortcut_forge import encoders as enc
from shortcut_forge import evalreport as ev
from shortcut_forge import synthcorpus as sc
from shortcut_forge import trainer as tr
from shortcut_forge.errors import ContractViolation, DegenerateClassError

from oracles import auc_pair_counting


class TestAuc:
    def test_perfect_separation(self):
        assert ev.auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_reversed_scores(self):
        assert ev.auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0

    def test_tied_example(self):
        assert ev.auc([1, 2, 2, 3], [0, 1, 0, 1]) == pytest.approx(0.875)
        assert auc_pair_counting([1, 2, 2, 3], [0, 1, 0, 1]) == pytest.approx(0.875)

    def test_single_class_rejected(self):
        with pytest.raises(DegenerateClassError):
            ev.auc([0.1, 0.2], [1, 1])
        with pytest.raises(DegenerateClassError):
            ev.auc([0.1, 0.2], [0, 0])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            ev.auc([0.1], [1, 0])

    def test_non_binary_labels_rejected(self):
        with pytest.raises(ContractViolation):
            ev.auc([0.1, 0.2], [1, 2])

    @settings(max_examples=120, deadline=None)
    @given(
        st.integers(min_value=0, max_value=100_000),
        st.integers(min_value=2, max_value=120),
        st.integers(min_value=1, max_value=6),
    )
    def test_matches_pair_counting_oracle_exactly(self, seed, n, levels):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # coarse score levels force plenty of ties
        scores = rng.integers(0, levels + 1, size=n).astype(float)
        assert ev.auc(scores, labels) == pytest.approx(
            auc_pair_counting(scores.tolist(), labels.tolist()), abs=1e-12
        )

    def test_complement_identity_for_tie_free_scores(self):
        rng = np.random.default_rng(7)
        scores = rng.permutation(40) / 40.0
        labels = rng.integers(0, 2, size=40)
        labels[0], labels[1] = 0, 1
        assert ev.auc(scores, labels) + ev.auc(-scores, labels) == pytest.approx(1.0)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(9)
        scores = rng.normal(size=60)
        labels = rng.integers(0, 2, size=60)
        labels[0], labels[1] = 0, 1
        base = ev.auc(scores, labels)
        assert ev.auc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert ev.auc(3 * scores + 11, labels) == pytest.approx(base, abs=1e-12)


@pytest.fixture(scope="module")
def tiny_corpus():
    cfg = sc.CorpusConfig(n_train=300, n_val=20, n_test=60, image_size=32, seed=31)
    return sc.generate_corpus(cfg)


class TestEvaluateModel:
    def test_label_oracle_stub_scores_auc_one(self, tiny_corpus):
        test = tiny_corpus.split("test").samples

        def stub(images, label):
            return np.array([float(s.labels[label]) for s in test])

        result = ev.evaluate_model(stub, tiny_corpus, "shortcut", model_id="stub")
        assert result.per_label_auc == [1.0] * 5
        assert result.average_auc == 1.0

    def test_real_variant_untouched_by_stamping_machinery(self, tiny_corpus):
        seen = []

        def stub(images, label):
            seen.append(images.copy())
            return np.arange(len(images), dtype=float)

        ev.evaluate_model(stub, tiny_corpus, "real", model_id="stub")
        raw = np.stack([s.image for s in tiny_corpus.split("test").samples])
        for imgs in seen:
            np.testing.assert_array_equal(imgs, raw)

    def test_classifier_checkpoint_evaluates(self, tiny_corpus):
        params = enc.init_classifier(32, seed=3)
        result = ev.evaluate_model(params, tiny_corpus, "real", model_id="clf")
        assert len(result.per_label_auc) == 5
        assert all(0.0 <= a <= 1.0 for a in result.per_label_auc)

    def test_dual_encoder_routes_to_zero_shot(self, tiny_corpus):
        params = enc.init_dual_encoder(32, tiny_corpus.config.caption_vocab_size, seed=3)
        result = ev.evaluate_model(params, tiny_corpus, "real", model_id="dual", anchor_captions=5)
        assert len(result.per_label_auc) == 5

    def test_idempotent_and_corpus_not_mutated(self, tiny_corpus):
        params = enc.init_classifier(32, seed=3)
        before = [s.image.copy() for s in tiny_corpus.split("test").samples[:5]]
        a = ev.evaluate_model(params, tiny_corpus, "adversarial", model_id="clf")
        b = ev.evaluate_model(params, tiny_corpus, "adversarial", model_id="clf")
        assert a.per_label_auc == b.per_label_auc
        for orig, s in zip(before, tiny_corpus.split("test").samples[:5]):
            np.testing.assert_array_equal(orig, s.image)

    def test_unknown_variant_rejected(self, tiny_corpus):
        with pytest.raises(ContractViolation):
            ev.evaluate_model(enc.init_classifier(32, seed=1), tiny_corpus, "clean", "x")

    def test_unknown_params_rejected(self, tiny_corpus):
        with pytest.raises(ContractViolation):
            ev.evaluate_model(42, tiny_corpus, "real", "x")


class TestEmitReport:
    def make_results(self):
        rng = np.random.default_rng(3)
        results = []
        for model in ("cnn-real", "clip-shortcut"):
            for variant in ev.VARIANTS:
                results.append(
                    ev.EvalResult(
                        model_id=model,
                        variant=variant,
                        per_label_auc=[float(x) for x in rng.uniform(size=5)],
                    )
                )
        return results

    def test_empty_results_rejected(self, tmp_path):
        with pytest.raises(ContractViolation):
            ev.emit_report([], {}, tmp_path)

    def test_single_result_csv_shape(self, tmp_path):
        res = ev.EvalResult("m", "real", [0.1, 0.2, 0.3, 0.4, 0.5])
        ev.emit_report([res], {"experiment": "t"}, tmp_path)
        lines = (tmp_path / "results.csv").read_text().strip().splitlines()
        assert lines[0] == "model_id,variant," + ",".join(sc.LABEL_NAMES) + ",average"
        assert len(lines) == 2
        cells = lines[1].split(",")
        assert len(cells) == 8
        assert cells[0] == "m" and cells[1] == "real"
        assert float(cells[-1]) == pytest.approx(0.3)

    def test_round_trip_preserves_aucs(self, tmp_path):
        results = self.make_results()
        ev.emit_report(results, {}, tmp_path)
        loaded = ev.read_results_csv(tmp_path / "results.csv")
        key = lambda r: (r.model_id, r.variant)
        for a, b in zip(sorted(results, key=key), sorted(loaded, key=key)):
            assert a.model_id == b.model_id and a.variant == b.variant
            np.testing.assert_allclose(a.per_label_auc, b.per_label_auc, atol=1e-6)

    def test_deterministic_ordering_and_rerun(self, tmp_path):
        results = self.make_results()
        ev.emit_report(results, {"k": "v"}, tmp_path / "a")
        ev.emit_report(list(reversed(results)), {"k": "v"}, tmp_path / "b")
        assert (tmp_path / "a/results.csv").read_bytes() == (tmp_path / "b/results.csv").read_bytes()
        assert (tmp_path / "a/report.md").read_bytes() == (tmp_path / "b/report.md").read_bytes()

    def test_markdown_has_three_variant_tables(self, tmp_path):
        ev.emit_report(self.make_results(), {}, tmp_path)
        md = (tmp_path / "report.md").read_text()
        for variant in ("Real", "Shortcut", "Adversarial"):
            assert f"## {variant} test AUCs" in md

    def test_average_is_mean_of_labels(self):
        res = ev.EvalResult("m", "real", [0.0, 0.25, 0.5, 0.75, 1.0])
        assert res.average_auc == pytest.approx(0.5)
