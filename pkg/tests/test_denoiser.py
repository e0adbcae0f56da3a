import numpy as np
import pytest

from texsplat.denoiser import (Denoiser, DenoiserConfig, PromptTokens,
                               RefEntry, ReferenceSet, TrainConfig,
                               init_params, load_weights, prompt_from_names,
                               save_weights, train_denoiser)
from texsplat.latent import encode_latent
from texsplat.textures import texture_image, token_vocabulary, training_corpus

SMALL = DenoiserConfig(latent_channels=2, channels=(6, 8, 10), attn_dim=5,
                       token_dim=4, temb_dim=6)


@pytest.fixture
def small_model():
    return Denoiser(init_params(SMALL, 3), SMALL)


def small_refs(rng, n=2):
    w = 1.0 / n
    return ReferenceSet(
        entries=tuple(RefEntry(rng.normal(size=(8, 8, 2)), w, "previous")
                      for _ in range(n)),
        lam=0.55)


class TestPredictNoise:
    def test_theta_without_refs_equals_theta_hat(self, small_model):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(8, 8, 2))
        tok = PromptTokens(rng.normal(size=(2, 4)))
        a = small_model.predict_noise(z, 5, tok, None, "theta")
        b = small_model.predict_noise(z, 5, tok, None, "theta-hat")
        assert np.array_equal(a, b)

    def test_theta_hat_ignores_refs(self, small_model):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(8, 8, 2))
        refs = small_refs(rng)
        a = small_model.predict_noise(z, 5, None, refs, "theta-hat")
        b = small_model.predict_noise(z, 5, None, None, "theta-hat")
        assert np.array_equal(a, b)

    def test_refs_change_theta_output(self, small_model):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(8, 8, 2))
        refs = small_refs(rng)
        a = small_model.predict_noise(z, 5, None, refs, "theta")
        b = small_model.predict_noise(z, 5, None, None, "theta")
        assert not np.array_equal(a, b)

    def test_determinism(self, small_model):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(8, 8, 2))
        tok = PromptTokens(rng.normal(size=(1, 4)))
        refs = small_refs(rng)
        a = small_model.predict_noise(z, 9, tok, refs, "theta")
        b = small_model.predict_noise(z, 9, tok, refs, "theta")
        assert np.array_equal(a, b)

    def test_random_weights_finite_output_scan(self):
        rng = np.random.default_rng(4)
        for trial in range(100):
            model = Denoiser(init_params(SMALL, trial), SMALL)
            z = rng.normal(size=(8, 8, 2)) * rng.uniform(0.1, 10)
            out = model.predict_noise(z, int(rng.integers(0, 50)))
            assert np.all(np.isfinite(out))

    def test_shape_validation(self, small_model):
        with pytest.raises(ValueError):
            small_model.predict_noise(np.zeros((7, 8, 2)), 1)
        with pytest.raises(ValueError):
            small_model.predict_noise(np.zeros((8, 8, 3)), 1)
        with pytest.raises(ValueError):
            small_model.predict_noise(np.zeros((8, 8, 2)), 1,
                                      PromptTokens(np.zeros((1, 9))))

    def test_nonfinite_latent_rejected(self, small_model):
        z = np.zeros((8, 8, 2))
        z[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            small_model.predict_noise(z, 1)

    def test_step_cache_soundness(self, small_model):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(8, 8, 2))
        tok = PromptTokens(rng.normal(size=(2, 4)))
        refs = small_refs(rng)
        prep = small_model.prepare_refs(refs)
        plain = [small_model.predict_noise(z, 4, None, None, "theta-hat"),
                 small_model.predict_noise(z, 4, tok, prep, "theta"),
                 small_model.predict_noise(z, 4, None, prep, "theta"),
                 small_model.predict_noise(z, 4, tok, None, "theta-hat")]
        sc = {}
        cached = [small_model.predict_noise(z, 4, None, None, "theta-hat", step_cache=sc),
                  small_model.predict_noise(z, 4, tok, prep, "theta", step_cache=sc),
                  small_model.predict_noise(z, 4, None, prep, "theta", step_cache=sc),
                  small_model.predict_noise(z, 4, tok, None, "theta-hat", step_cache=sc)]
        for a, b in zip(plain, cached):
            assert np.array_equal(a, b)


class TestGradients:
    def test_full_backward_vs_fd(self, small_model):
        rng = np.random.default_rng(6)
        z = rng.normal(size=(8, 8, 2))
        tokens = rng.normal(size=(2, 4))
        refs = small_refs(rng)

        def loss(tokens_):
            out, _ = small_model._forward(z, 7, tokens_, refs)
            return 0.5 * float(np.sum(out ** 2))

        out, cache = small_model._forward(z, 7, tokens, refs, with_cache=True)
        grads = small_model.zero_grads()
        _, dtok = small_model._backward(cache, out.copy(), grads)

        h = 1e-6
        for idx in np.ndindex(tokens.shape):
            tp, tm = tokens.copy(), tokens.copy()
            tp[idx] += h
            tm[idx] -= h
            fd = (loss(tp) - loss(tm)) / (2 * h)
            assert abs(dtok[idx] - fd) / max(abs(fd), 1e-7) < 1e-4

        for name in sorted(small_model.params):
            arr = small_model.params[name]
            for flat in (0, arr.size // 2, arr.size - 1):
                idx = np.unravel_index(flat, arr.shape)
                orig = arr[idx]
                arr[idx] = orig + h
                lp = loss(tokens)
                arr[idx] = orig - h
                lm = loss(tokens)
                arr[idx] = orig
                fd = (lp - lm) / (2 * h)
                rel = abs(grads[name][idx] - fd) / max(abs(fd), 1e-7)
                assert rel < 1e-4, f"{name}{idx}"


def tiny_corpus(size=16, variants=1):
    vocab = token_vocabulary()
    items = []
    rng = np.random.default_rng(0)
    for name in ("stripes-red", "checker-green", "blobs-blue", "solid-yellow"):
        pattern, color = name.split("-")
        for _ in range(variants):
            img = texture_image(pattern, color, size=size, rng=rng)
            items.append((encode_latent(img), np.atleast_2d(vocab[name]), name))
    return items


class TestTraining:
    def test_zero_steps_keeps_init(self):
        corpus = tiny_corpus()
        model, losses = train_denoiser(corpus, TrainConfig(steps=0), seed=11)
        ref = init_params(model.config, 11)
        assert all(np.array_equal(model.params[k], ref[k]) for k in ref)
        assert len(losses) == 1

    def test_loss_decreases(self):
        corpus = tiny_corpus()
        model, losses = train_denoiser(
            corpus, TrainConfig(steps=150, batch_size=2), seed=12)
        assert np.mean(losses[-20:]) < losses[0]

    def test_seed_reproducibility(self):
        corpus = tiny_corpus()
        cfgt = TrainConfig(steps=25, batch_size=2)
        a, _ = train_denoiser(corpus, cfgt, seed=13)
        b, _ = train_denoiser(corpus, cfgt, seed=13)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            train_denoiser([], TrainConfig(steps=1), seed=0)


class TestWeightsIO:
    def test_roundtrip(self, tmp_path, small_model):
        path = tmp_path / "w.bin"
        save_weights(path, small_model)
        back = load_weights(path)
        assert back.config == small_model.config
        assert all(np.array_equal(back.params[k], small_model.params[k])
                   for k in small_model.params)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTAWEIGHTFILE")
        with pytest.raises(ValueError):
            load_weights(path)

    def test_version_mismatch_fails_loudly(self, tmp_path, small_model):
        path = tmp_path / "w.bin"
        save_weights(path, small_model)
        data = bytearray(path.read_bytes())
        data[8] = 99  # version field
        path.write_bytes(bytes(data))
        with pytest.raises(ValueError):
            load_weights(path)


class TestPrompts:
    def test_prompt_from_names(self):
        p = prompt_from_names("checker-green stripes-red")
        assert p.tokens.shape == (2, 16)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            prompt_from_names("plaid-mauve")

    def test_reference_set_invariants(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            ReferenceSet(entries=(), lam=0.5)
        with pytest.raises(ValueError):
            ReferenceSet(entries=(RefEntry(rng.normal(size=(4, 4, 2)), 0.5, "reference"),),
                         lam=0.5)
        with pytest.raises(ValueError):
            ReferenceSet(entries=(RefEntry(rng.normal(size=(4, 4, 2)), 1.0, "reference"),),
                         lam=1.5)
