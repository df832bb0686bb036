import numpy as np
import pytest

from shortcut_forge import diffcore as dc
from shortcut_forge import encoders as enc
from shortcut_forge import synthcorpus as sc
from shortcut_forge.errors import ContractViolation


def make_image(seed=0, size=32, labels=(1, 0, 0, 1, 0)):
    cfg = sc.CorpusConfig(n_train=1, n_val=1, n_test=1, image_size=size, seed=seed)
    return sc.render_base_image(list(labels), sc.sample_stream(seed, 0, 1), cfg)


class TestImageEncoder:
    def test_deterministic(self):
        params = enc.init_image_encoder(32, seed=4)
        img = make_image(size=32)
        a = enc.image_encode(img, params)
        b = enc.image_encode(img, params)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (128,)

    def test_normalized_output_has_unit_norm(self):
        params = enc.init_image_encoder(32, seed=4)
        v = enc.image_encode(make_image(size=32), params, normalize=True)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-5)

    def test_glyph_slot_difference_moves_embedding(self):
        params = enc.init_image_encoder(64, seed=8)
        img = make_image(size=64)
        stamped = sc.apply_watermarks(img, {1})
        a = enc.image_encode(img, params)
        b = enc.image_encode(stamped, params)
        assert np.linalg.norm(a - b) > 0

    def test_size_mismatch_rejected(self):
        params = enc.init_image_encoder(64, seed=0)
        with pytest.raises(ContractViolation):
            enc.image_encode(np.zeros((32, 32)), params)

    def test_same_seed_same_params(self):
        a = enc.init_image_encoder(32, seed=9)
        b = enc.init_image_encoder(32, seed=9)
        for (na, ta), (nb, tb) in zip(enc.param_items(a), enc.param_items(b)):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_parameter_count_stable(self):
        a = enc.init_image_encoder(64, seed=1)
        b = enc.init_image_encoder(64, seed=2)
        assert enc.n_parameters(a) == enc.n_parameters(b)


class TestTextEncoder:
    def setup_method(self):
        self.params = enc.init_text_encoder(64, seed=3)

    def test_repeated_token_matches_single(self):
        one = enc.text_encode([5], self.params)
        many = enc.text_encode([5, 5, 5, 5], self.params)
        np.testing.assert_allclose(one, many, atol=1e-6)

    def test_order_invariance(self):
        a = enc.text_encode([2, 9, 30, 7], self.params)
        b = enc.text_encode([30, 7, 2, 9], self.params)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_disjoint_captions_differ(self):
        a = enc.text_encode([2, 3, 4], self.params)
        b = enc.text_encode([17, 18], self.params)
        assert np.linalg.norm(a - b) > 0

    def test_unknown_id_maps_to_reserved_row(self):
        a = enc.text_encode([999], self.params)
        b = enc.text_encode([0], self.params)
        np.testing.assert_array_equal(a, b)

    def test_empty_caption_rejected(self):
        with pytest.raises(ContractViolation):
            enc.text_encode([], self.params)

    def test_normalize_flag(self):
        v = enc.text_encode([4, 9], self.params, normalize=True)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-5)


class TestClassifier:
    def test_five_finite_logits_deterministic(self):
        params = enc.init_classifier(32, seed=5)
        img = make_image(size=32)
        a = enc.classify(img, params)
        b = enc.classify(img, params)
        assert a.shape == (5,)
        assert np.isfinite(a).all()
        np.testing.assert_array_equal(a, b)

    def test_zero_head_gives_zero_logits(self):
        params = enc.init_classifier(32, seed=5)
        params.head_w.data = np.zeros_like(params.head_w.data)
        params.head_b.data = np.zeros_like(params.head_b.data)
        logits = enc.classify(make_image(size=32), params)
        np.testing.assert_array_equal(logits, np.zeros(5))
        assert np.all(1.0 / (1.0 + np.exp(-logits)) == 0.5)

    def test_all_zero_trunk_is_degenerate(self):
        # the head reads a unit-normalized embedding, so a trunk that
        # collapses to the zero vector is an error, not a silent 0.5
        from shortcut_forge.errors import DegenerateEmbeddingError

        params = enc.init_classifier(32, seed=5)
        for _, t in enc.param_items(params):
            t.data = np.zeros_like(t.data)
        with pytest.raises(DegenerateEmbeddingError):
            enc.classify(make_image(size=32), params)

    def test_size_mismatch_rejected(self):
        params = enc.init_classifier(64, seed=5)
        with pytest.raises(ContractViolation):
            enc.classify(np.zeros((32, 32)), params)


class TestToClassifier:
    def test_trunk_copied_verbatim(self):
        encoder = enc.init_image_encoder(32, seed=11)
        clf = enc.to_classifier(encoder, head_init_seed=7)
        for (_, src), (_, dst) in zip(enc.param_items(encoder), enc.param_items(clf.trunk)):
            np.testing.assert_array_equal(src.data, dst.data)
            assert src is not dst  # a copy, not an alias

    def test_same_seed_same_head(self):
        encoder = enc.init_image_encoder(32, seed=11)
        a = enc.to_classifier(encoder, head_init_seed=7)
        b = enc.to_classifier(encoder, head_init_seed=7)
        np.testing.assert_array_equal(a.head_w.data, b.head_w.data)
        np.testing.assert_array_equal(a.head_b.data, b.head_b.data)

    def test_architecture_parity_with_scratch_classifier(self):
        converted = enc.to_classifier(enc.init_image_encoder(64, seed=1), head_init_seed=2)
        scratch = enc.init_classifier(64, seed=3)
        assert enc.architecture_descriptor(converted) == enc.architecture_descriptor(scratch)
        assert enc.shape_signature(converted) == enc.shape_signature(scratch)
        assert enc.n_parameters(converted) == enc.n_parameters(scratch)


class TestCheckpoints:
    @pytest.mark.parametrize(
        "build",
        [
            lambda: enc.init_image_encoder(32, seed=1),
            lambda: enc.init_text_encoder(64, seed=2),
            lambda: enc.init_dual_encoder(32, 64, seed=3),
            lambda: enc.init_classifier(32, seed=4),
        ],
    )
    def test_round_trip_bit_exact(self, tmp_path, build):
        params = build()
        path = tmp_path / "model.ckpt"
        enc.save_checkpoint(path, params)
        loaded = enc.load_checkpoint(path)
        assert enc.architecture_descriptor(loaded) == enc.architecture_descriptor(params)
        for (na, ta), (nb, tb) in zip(enc.param_items(params), enc.param_items(loaded)):
            assert na == nb
            assert ta.data.tobytes() == tb.data.tobytes()
        # saving the loaded params reproduces the file byte for byte
        path2 = tmp_path / "model2.ckpt"
        enc.save_checkpoint(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_header_readable_without_payload(self, tmp_path):
        params = enc.init_classifier(32, seed=4)
        path = tmp_path / "m.ckpt"
        enc.save_checkpoint(path, params)
        header = enc.read_checkpoint_header(path)
        assert header["kind"] == "classifier"
        assert header["descriptor"].startswith("classifier/v1:")

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ContractViolation):
            enc.load_checkpoint(path)

    def test_rejects_float64_params(self, tmp_path):
        params = enc.init_image_encoder(32, seed=1, dtype=np.float64)
        with pytest.raises(ContractViolation):
            enc.save_checkpoint(tmp_path / "m.ckpt", params)


def test_text_trunk_features_match_full_forward():
    params = enc.init_text_encoder(64, seed=6)
    captions = [[2, 3, 4], [17, 18, 30, 31], [1]]
    cached = enc.text_trunk_features(captions, params)
    full = enc.text_forward(captions, params).data
    via_proj = cached @ params.proj.data
    np.testing.assert_allclose(via_proj, full, atol=1e-5)


def test_image_forward_gradcheck_small():
    # full encoder graph against finite differences in float64
    from oracles import finite_difference_grads

    params = enc.init_image_encoder(32, seed=13, dtype=np.float64)
    img = make_image(seed=3, size=32).astype(np.float64)
    x = dc.tensor(img.reshape(1, 1, 32, 32), dtype=np.float64)
    tensors = [t for _, t in enc.param_items(params)]

    # central differences are only valid away from relu kinks; this seed
    # keeps every pre-activation at least 5x the step away from zero
    h_step = 1e-5
    probe = x
    for layer in params.convs:
        pre = dc.conv2d(probe, layer.weight, stride=2) + layer.bias
        assert np.abs(pre.data).min() > 5 * h_step
        probe = pre.relu()

    def loss_fn(ps):
        out = enc.image_forward(x, params)
        return (out * out).sum()

    got = dc.grad(loss_fn, tensors)

    arrays = [t.data for t in tensors]

    def loss_np(arrs):
        h = img.reshape(1, 1, 32, 32)
        idx = 0
        out = h
        for _ in range(4):
            w, b = arrs[idx], arrs[idx + 1]
            idx += 2
            n, c_in, hh, ww = out.shape
            c_out = w.shape[0]
            h_out = (hh - 3) // 2 + 1
            w_out = (ww - 3) // 2 + 1
            res = np.zeros((n, c_out, h_out, w_out))
            for di in range(3):
                for dj in range(3):
                    sub = out[:, :, di : di + 2 * h_out : 2, dj : dj + 2 * w_out : 2]
                    res += np.einsum("nchw,oc->nohw", sub, w[:, :, di, dj])
            out = np.maximum(res + b, 0)
        pooled = out.mean(axis=(2, 3))
        emb = pooled @ arrs[idx]
        return float((emb * emb).sum())

    expected = finite_difference_grads(loss_np, arrays, h=h_step)
    for g, e in zip(got, expected):
        np.testing.assert_allclose(g.data, e, rtol=1e-4, atol=1e-8)
