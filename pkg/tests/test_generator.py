import itertools

import numpy as np
import pytest

from discap.generator import (GeneratorModel, ImageBatch, attention, beam_decode, caption_logprob,
                              decode_batch, greedy_decode, sample_decode, step)
from discap.numerics import grad_check
from discap.synthworld import ImageFeature
from discap.textcore import BOS, EOS, PAD, Caption

V, D = 10, 4


def _model(variant, seed=0, V=V):
    return GeneratorModel.create(variant, V, D, np.random.default_rng(seed), embed=5, hidden=6, att=4)


def _image(seed=0, n_regions=3):
    rng = np.random.default_rng(100 + seed)
    regions = rng.standard_normal((n_regions, D))
    return ImageFeature(regions.mean(axis=0) + 0.01 * rng.standard_normal(D), regions)


def _batch(seeds):
    return ImageBatch.from_features([_image(s, 1 + s % 3) for s in seeds])


VARIANTS = ["fc", "attn"]


@pytest.mark.parametrize("variant", VARIANTS)
def test_step_deterministic_and_normalized(variant):
    m = _model(variant)
    imgs = _batch([0, 1])
    st = m.init_state(imgs)
    a, _ = step(m, st, [BOS, BOS], imgs)
    b, _ = step(m, st, [BOS, BOS], imgs)
    np.testing.assert_array_equal(a, b)
    p = np.exp(a - a.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
    assert np.all(p[:, BOS] == 0) and np.all(p[:, PAD] == 0)
    with pytest.raises(ValueError):
        step(m, st, [V, 0], imgs)


def test_fc_image_only_enters_through_state():
    m = _model("fc")
    imgs = _batch([0])
    st = m.init_state(imgs)
    zeroed = ImageBatch(np.zeros_like(imgs.global_), np.zeros_like(imgs.regions), imgs.rmask)
    a, _ = step(m, st, [BOS], imgs)
    b, _ = step(m, st, [BOS], zeroed)
    np.testing.assert_array_equal(a, b)


def test_attention_properties():
    m = _model("attn")
    h = np.random.default_rng(0).standard_normal(6)
    r = np.random.default_rng(1).standard_normal((1, D))
    w, ctx = attention(m, h, r)
    assert w.tolist() == [1.0]
    np.testing.assert_allclose(ctx, r[0])
    same = np.tile(r, (4, 1))
    w, _ = attention(m, h, same)
    np.testing.assert_allclose(w, 0.25)
    regions = np.random.default_rng(2).standard_normal((5, D))
    w, ctx = attention(m, h, regions)
    assert w.sum() == pytest.approx(1.0)
    perm = np.array([3, 0, 4, 1, 2])
    w2, ctx2 = attention(m, h, regions[perm])
    np.testing.assert_allclose(w2, w[perm], atol=1e-14)
    np.testing.assert_allclose(ctx2, ctx, atol=1e-12)
    with pytest.raises(ValueError):
        attention(m, h, np.zeros((0, D)))


@pytest.mark.parametrize("variant", VARIANTS)
def test_uniform_model_logprob(variant):
    m = _model(variant)
    m.params["out.W"][:] = 0
    m.params["out.b"][:] = 0
    cap = Caption((BOS, 5, 6, 7, EOS))
    total, per = caption_logprob(m, cap, _image())
    # BOS and PAD are never emitted, so V - 2 outcomes remain
    assert total == pytest.approx(4 * np.log(1 / (V - 2)), abs=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
def test_caption_logprob_replay(variant):
    m = _model(variant, seed=3)
    img = _image(2)
    cap = Caption((BOS, 4, 9, 5, EOS))
    total, per = caption_logprob(m, cap, img)
    imgs = ImageBatch.from_features([img])
    st = m.init_state(imgs)
    manual = 0.0
    for prev, nxt in zip(cap.ids[:-1], cap.ids[1:]):
        logits, st = step(m, st, [prev], imgs)
        lp = logits[0] - np.logaddexp.reduce(logits[0][np.isfinite(logits[0])])
        manual += lp[nxt]
    assert total == pytest.approx(manual, abs=1e-12)
    assert total <= 0


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mle_gradient(variant, seed):
    m = _model(variant, seed)
    imgs = _batch([seed, seed + 1, seed + 2])
    rng = np.random.default_rng(seed)
    caps = [Caption((BOS, *rng.integers(4, V, size=n).tolist(), EOS)) for n in (1, 3, 2)]
    w = np.array([1.0, 0.5, 2.0])
    m.params.zero_grad()
    m.sequence_logprobs(imgs, caps, w)
    analytic = {k: g.copy() for k, g in m.params.grads.items()}
    m.params.zero_grad()

    def loss_fn(_):
        lp, _mask = m.sequence_logprobs(imgs, caps)
        return float(-(w[:, None] * lp).sum())

    assert grad_check(loss_fn, m.params, analytic, frac=0.3, rng=rng) < 1e-4


@pytest.mark.parametrize("variant", VARIANTS)
def test_step_logprob_gradient(variant):
    m = _model(variant, 4)
    imgs = _batch([4])
    caps = [Caption((BOS, 6, EOS))]
    m.params.zero_grad()
    m.sequence_logprobs(imgs, caps, np.ones(1))
    analytic = {k: g.copy() for k, g in m.params.grads.items()}
    m.params.zero_grad()
    err = grad_check(lambda _: -float(m.sequence_logprobs(imgs, caps)[0].sum()), m.params, analytic, frac=0.5)
    assert err < 1e-4


@pytest.mark.parametrize("variant", VARIANTS)
def test_greedy_properties(variant):
    m = _model(variant, 5)
    img = _image(1)
    a, b = greedy_decode(m, img), greedy_decode(m, img)
    assert a.caption == b.caption and len(a.caption) <= 16
    assert a.total == pytest.approx(a.logprobs.sum())
    imgs = ImageBatch.from_features([img])
    logits, _ = step(m, m.init_state(imgs), [BOS], imgs)
    first = int(np.argmax(logits[0]))
    assert a.caption.ids[1] == first


@pytest.mark.parametrize("variant", VARIANTS)
def test_decode_replay_invariant(variant):
    m = _model(variant, 6)
    rng = np.random.default_rng(0)
    for s in range(4):
        img = _image(s, 1 + s % 3)
        for res in (greedy_decode(m, img), sample_decode(m, img, rng), beam_decode(m, img, 3)):
            assert caption_logprob(m, res.caption, img)[0] == pytest.approx(res.total, abs=1e-9)
            assert np.all(np.exp(res.logprobs) <= 1) and np.all(np.exp(res.logprobs) > 0)


def test_forced_eos_marks_truncation():
    m = _model("fc", 7)
    m.params["out.b"][EOS] = -50.0
    res = greedy_decode(m, _image(), max_len=5)
    assert len(res.caption) == 5 and res.caption.ids[-1] == EOS and res.caption.truncated
    lp, mask = m.sequence_logprobs(ImageBatch.from_features([_image()]), [res.caption], skip_forced=True)
    assert mask.sum() == 3


def test_sample_determinism_and_temperature_zero():
    m = _model("attn", 8)
    img = _image(3)
    a = sample_decode(m, img, np.random.default_rng(5))
    b = sample_decode(m, img, np.random.default_rng(5))
    assert a.caption == b.caption
    assert sample_decode(m, img, np.random.default_rng(5), temperature=0).caption == greedy_decode(m, img).caption


def test_sample_first_word_frequencies():
    m = _model("fc", 9)
    m.params["out.W"][:] = 0
    m.params["out.b"][:] = -np.inf
    m.params["out.b"][[4, 5, 6]] = [0.0, 1.0, -0.5]
    m.params["out.b"][EOS] = -1.0
    n = 10_000
    imgs = ImageBatch.from_features([_image()] * n)
    res = decode_batch(m, imgs, "sample", np.random.default_rng(0), max_len=3)
    first = np.array([r.caption.ids[1] for r in res])
    logits = np.array([-1.0, 0.0, 1.0, -0.5])
    probs = np.exp(logits) / np.exp(logits).sum()
    for word, p in zip([EOS, 4, 5, 6], probs):
        assert abs((first == word).mean() - p) < 0.02


@pytest.mark.parametrize("variant", VARIANTS)
def test_beam_one_is_greedy_and_beam_dominates(variant):
    m = _model(variant, 10)
    for s in range(5):
        img = _image(s)
        g = greedy_decode(m, img)
        assert beam_decode(m, img, 1).caption == g.caption
        assert beam_decode(m, img, 2).total >= g.total - 1e-12


def _exhaustive(m, img, max_len):
    best, best_ids = -np.inf, None
    words = [w for w in range(m.vocab_size) if w not in (BOS, PAD, EOS)]
    for L in range(0, max_len - 1):
        for body in itertools.product(words, repeat=L):
            cap = Caption((BOS, *body, EOS))
            lp = caption_logprob(m, cap, img)[0]
            if lp > best:
                best, best_ids = lp, cap.ids
    return best, best_ids


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("max_len", [3, 4])
def test_full_beam_equals_exhaustive_search(variant, max_len):
    Vs = 4 + 6
    for seed in range(3):
        m = _model(variant, 20 + seed, V=Vs)
        m.params["out.W"][:] *= 3  # sharpen so captions longer than one word compete
        img = _image(seed)
        best, ids = _exhaustive(m, img, max_len)
        res = beam_decode(m, img, beam=Vs, max_len=max_len)
        assert res.caption.ids == ids
        assert res.total == pytest.approx(best, abs=1e-12)


def test_beam_rejects_zero():
    with pytest.raises(ValueError):
        beam_decode(_model("fc"), _image(), 0)
