"""Conditional LSTM caption generators (FC and ATTN) and their decoders.

FC feeds the projected global feature as the input before BOS. ATTN feeds
``[word embedding, projected attention context]`` at every step, where the
context is an additive-attention average of the region features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import layers
from .numerics import ParamStore, init_params
from .textcore import BOS, EOS, MAX_LEN, PAD, Caption

# tokens the model never emits
_BANNED = (BOS, PAD)


@dataclass
class ImageBatch:
    global_: np.ndarray                 # (B, D)
    regions: np.ndarray                 # (B, R, D), zero padded
    rmask: np.ndarray                   # (B, R)

    @classmethod
    def from_features(cls, feats) -> "ImageBatch":
        feats = list(feats)
        D = feats[0].global_.shape[0]
        R = max(f.regions.shape[0] for f in feats)
        regions = np.zeros((len(feats), R, D))
        rmask = np.zeros((len(feats), R))
        for b, f in enumerate(feats):
            regions[b, :len(f.regions)] = f.regions
            rmask[b, :len(f.regions)] = 1.0
        return cls(np.stack([f.global_ for f in feats]), regions, rmask)

    def __len__(self):
        return self.global_.shape[0]

    def take(self, idx) -> "ImageBatch":
        return ImageBatch(self.global_[idx], self.regions[idx], self.rmask[idx])


@dataclass
class DecodeResult:
    caption: Caption
    logprobs: np.ndarray
    total: float
    mode: str


@dataclass
class GenState:
    h: np.ndarray
    c: np.ndarray
    rproj: Optional[np.ndarray] = None  # ATTN: regions @ att.Wr, fixed per image


class GeneratorModel:
    def __init__(self, variant: str, params: ParamStore, checkpoint_id: str = ""):
        if variant not in ("fc", "attn"):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.params = params
        self.checkpoint_id = checkpoint_id

    @classmethod
    def create(cls, variant: str, vocab_size: int, feat_dim: int, rng: np.random.Generator,
               embed: int = 64, hidden: int = 128, att: int = 64) -> "GeneratorModel":
        n_in = embed if variant == "fc" else 2 * embed
        spec = [
            ("emb", (vocab_size, embed), ("uniform", 0.1)),
            ("img.W", (feat_dim, embed), ("normal", feat_dim)),
            ("img.b", (embed,), ("zeros",)),
            ("lstm.W", (n_in + hidden, 4 * hidden), ("normal", n_in + hidden)),
            ("lstm.b", (4 * hidden,), ("zeros",)),
            ("out.W", (hidden, vocab_size), ("normal", hidden)),
            ("out.b", (vocab_size,), ("zeros",)),
        ]
        if variant == "attn":
            spec += [
                ("att.Wr", (feat_dim, att), ("normal", feat_dim)),
                ("att.Wh", (hidden, att), ("normal", hidden)),
                ("att.b", (att,), ("zeros",)),
                ("att.v", (att,), ("normal", att)),
            ]
        return cls(variant, init_params(spec, rng))

    @property
    def vocab_size(self) -> int:
        return self.params["emb"].shape[0]

    @property
    def hidden(self) -> int:
        return self.params["lstm.W"].shape[1] // 4

    # -- single steps ---------------------------------------------------------

    def _logits(self, h: np.ndarray) -> np.ndarray:
        logits = h @ self.params["out.W"] + self.params["out.b"]
        logits[:, _BANNED] = -np.inf
        return logits

    def _attend(self, h, rproj, images: ImageBatch):
        p = self.params
        hp = h @ p["att.Wh"] + p["att.b"]
        a = np.tanh(rproj + hp[:, None, :])
        e = a @ p["att.v"]
        e = np.where(images.rmask > 0, e, -np.inf)
        w = layers.softmax(e)
        ctx = np.einsum("br,brd->bd", w, images.regions)
        return w, ctx, (h, a, w)

    def init_state(self, images: ImageBatch) -> GenState:
        p = self.params
        B = len(images)
        h = np.zeros((B, self.hidden))
        c = np.zeros((B, self.hidden))
        if self.variant == "fc":
            x = images.global_ @ p["img.W"] + p["img.b"]
            h, c, _ = layers.lstm_forward(x, h, c, p["lstm.W"], p["lstm.b"])
            return GenState(h, c)
        return GenState(h, c, images.regions @ p["att.Wr"])

    def step(self, state: GenState, words: np.ndarray, images: ImageBatch):
        """One LSTM step on previous words; returns (logits, new state)."""
        p = self.params
        words = np.asarray(words)
        if np.any(words < 0) or np.any(words >= self.vocab_size):
            raise ValueError("invalid word id")
        x = p["emb"][words]
        if self.variant == "attn":
            _, ctx, _ = self._attend(state.h, state.rproj, images)
            x = np.concatenate([x, ctx @ p["img.W"] + p["img.b"]], axis=1)
        h, c, _ = layers.lstm_forward(x, state.h, state.c, p["lstm.W"], p["lstm.b"])
        return self._logits(h), GenState(h, c, state.rproj)

    # -- teacher-forced sequence pass -----------------------------------------

    def sequence_logprobs(self, images: ImageBatch, captions: Sequence[Caption],
                          weights: Optional[np.ndarray] = None, skip_forced: bool = False):
        """Per-token log-probabilities of ``captions`` (B, T) and the token mask.

        ``skip_forced`` masks out the forced EOS of truncated captions, which
        the model never chose. With ``weights``, also backpropagates ``sum_b weights[b] * -log p(c_b)``
        into ``params.grads`` and returns that weighted loss as a third value.
        """
        p = self.params
        B = len(captions)
        T = max(len(c.ids) for c in captions) - 1
        ids = np.full((B, T + 1), PAD, dtype=np.int64)
        mask = np.zeros((B, T))
        for b, cap in enumerate(captions):
            ids[b, :len(cap.ids)] = cap.ids
            mask[b, :len(cap.ids) - 1 - int(skip_forced and cap.truncated)] = 1.0
        H = self.hidden
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        img_cache = None
        rproj = None
        if self.variant == "fc":
            x0 = images.global_ @ p["img.W"] + p["img.b"]
            h, c, img_cache = layers.lstm_forward(x0, h, c, p["lstm.W"], p["lstm.b"])
        else:
            rproj = images.regions @ p["att.Wr"]
        caches = []
        logp_tok = np.zeros((B, T))
        probs = []
        for t in range(T):
            x = p["emb"][ids[:, t]]
            att = None
            if self.variant == "attn":
                _, ctx, att = self._attend(h, rproj, images)
                x = np.concatenate([x, ctx @ p["img.W"] + p["img.b"]], axis=1)
                att = (att, ctx)
            h, c, lc = layers.lstm_forward(x, h, c, p["lstm.W"], p["lstm.b"])
            lp = layers.log_softmax(self._logits(h))
            tgt = ids[:, t + 1]
            logp_tok[:, t] = np.where(mask[:, t] > 0, lp[np.arange(B), np.where(mask[:, t] > 0, tgt, EOS)], 0.0)
            caches.append((lc, att, h))
            probs.append(np.exp(lp))
        if weights is None:
            return logp_tok, mask
        weights = np.asarray(weights, dtype=np.float64)
        loss = float(-(weights[:, None] * logp_tok).sum())
        self._backward(images, ids, mask, weights, caches, probs, img_cache, rproj)
        return logp_tok, mask, loss

    def _backward(self, images, ids, mask, weights, caches, probs, img_cache, rproj):
        p, g = self.params, self.params.grads
        B, T = mask.shape
        H = self.hidden
        E = p["emb"].shape[1]
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        drproj = np.zeros_like(rproj) if rproj is not None else None
        for t in range(T - 1, -1, -1):
            lc, att, h = caches[t]
            dlogits = probs[t].copy()
            dlogits[np.arange(B), ids[:, t + 1] % self.vocab_size] -= 1.0
            dlogits *= (weights * mask[:, t])[:, None]
            g["out.W"] += h.T @ dlogits
            g["out.b"] += dlogits.sum(axis=0)
            dh = dh_next + dlogits @ p["out.W"].T
            dx, dh_prev, dc_next = layers.lstm_backward(dh, dc_next, lc, p["lstm.W"], g["lstm.W"], g["lstm.b"])
            np.add.at(g["emb"], ids[:, t], dx[:, :E])
            if self.variant == "attn":
                (h_prev, a, w), ctx = att
                dproj = dx[:, E:]
                g["img.W"] += ctx.T @ dproj
                g["img.b"] += dproj.sum(axis=0)
                dctx = dproj @ p["img.W"].T
                dw = np.einsum("bd,brd->br", dctx, images.regions)
                de = w * (dw - (w * dw).sum(axis=1, keepdims=True))
                g["att.v"] += np.einsum("br,bra->a", de, a)
                dpre = de[:, :, None] * p["att.v"][None, None, :] * (1.0 - a * a)
                drproj += dpre
                dhp = dpre.sum(axis=1)
                g["att.Wh"] += h_prev.T @ dhp
                g["att.b"] += dhp.sum(axis=0)
                dh_prev = dh_prev + dhp @ p["att.Wh"].T
            dh_next = dh_prev
        if self.variant == "fc":
            dx0, _, _ = layers.lstm_backward(dh_next, dc_next, img_cache, p["lstm.W"], g["lstm.W"], g["lstm.b"])
            g["img.W"] += images.global_.T @ dx0
            g["img.b"] += dx0.sum(axis=0)
        else:
            g["att.Wr"] += np.einsum("brd,bra->da", images.regions, drproj)


# -- module-level operations ------------------------------------------------------

def _as_batch(image) -> ImageBatch:
    return image if isinstance(image, ImageBatch) else ImageBatch.from_features([image])


def step(model: GeneratorModel, state: GenState, prev_word_id, image_ctx: ImageBatch):
    return model.step(state, np.atleast_1d(prev_word_id), image_ctx)


def attention(model: GeneratorModel, hidden: np.ndarray, regions: np.ndarray):
    """Attention weights and context for one hidden state over a region list."""
    regions = np.asarray(regions, dtype=np.float64)
    if regions.ndim != 2 or regions.shape[0] == 0:
        raise ValueError("attention needs at least one region")
    images = ImageBatch(regions.mean(axis=0)[None], regions[None], np.ones((1, regions.shape[0])))
    rproj = images.regions @ model.params["att.Wr"]
    w, ctx, _ = model._attend(np.atleast_2d(hidden), rproj, images)
    return w[0], ctx[0]


def caption_logprob(model: GeneratorModel, caption: Caption, image) -> tuple[float, np.ndarray]:
    logp, mask = model.sequence_logprobs(_as_batch(image), [caption])
    per_step = logp[0, : len(caption.ids) - 1]
    return float(per_step.sum()), per_step


def decode_batch(model: GeneratorModel, images: ImageBatch, mode: str = "greedy",
                 rng: Optional[np.random.Generator] = None, max_len: int = MAX_LEN,
                 temperature: float = 1.0) -> list[DecodeResult]:
    """Greedy or ancestral-sampling decode of every image in ``images``.

    Recorded log-probabilities are always under the model (temperature 1).
    EOS is forced at the last position; a caption whose EOS was forced
    (the model chose another token) comes back with ``truncated`` set.
    """
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    B = len(images)
    state = model.init_state(images)
    words = np.full(B, BOS, dtype=np.int64)
    out_ids = [[BOS] for _ in range(B)]
    out_lp = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    forced = np.zeros(B, dtype=bool)
    for t in range(1, max_len):
        logits, state = model.step(state, words, images)
        lp = layers.log_softmax(logits)
        if mode == "greedy" or temperature == 0:
            nxt = lp.argmax(axis=1)
        else:
            probs = layers.softmax(logits / temperature)
            u = rng.random(B)
            nxt = np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), model.vocab_size - 1)
        if t == max_len - 1:
            forced = ~done & (nxt != EOS)
            nxt = np.full(B, EOS, dtype=np.int64)
        for b in np.flatnonzero(~done):
            out_ids[b].append(int(nxt[b]))
            out_lp[b].append(float(lp[b, nxt[b]]))
        done |= nxt == EOS
        if done.all():
            break
        words = np.where(done, EOS, nxt)
    results = []
    for ids, lps, cut in zip(out_ids, out_lp, forced):
        arr = np.array(lps)
        results.append(DecodeResult(Caption(tuple(ids), tuple(lps), bool(cut)), arr, float(arr.sum()), mode))
    return results


def greedy_decode(model: GeneratorModel, image, max_len: int = MAX_LEN) -> DecodeResult:
    return decode_batch(model, _as_batch(image), "greedy", max_len=max_len)[0]


def sample_decode(model: GeneratorModel, image, rng: np.random.Generator, max_len: int = MAX_LEN,
                  temperature: float = 1.0) -> DecodeResult:
    return decode_batch(model, _as_batch(image), "sample", rng, max_len, temperature)[0]


def beam_decode(model: GeneratorModel, image, beam: int = 2, max_len: int = MAX_LEN) -> DecodeResult:
    """Length-synchronous beam search over total log-probability.

    Each step keeps the ``beam`` best expansions; those ending in EOS are set
    aside as finished. No length normalization. Stops when no live hypothesis
    can beat the best finished one.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    images = _as_batch(image)
    state = model.init_state(images)
    live = [(0.0, [BOS], [], False)]
    finished: list[tuple[float, list[int], list[float], bool]] = []
    for t in range(1, max_len):
        k = len(live)
        sub = images.take(np.zeros(k, dtype=np.int64))
        logits, state = model.step(state, np.array([hyp[1][-1] for hyp in live]), sub)
        lp = layers.log_softmax(logits)
        if t == max_len - 1:
            allowed = np.full_like(lp, -np.inf)
            allowed[:, EOS] = lp[:, EOS]
            lp_sel = allowed
        else:
            lp_sel = lp
        scores = np.array([hyp[0] for hyp in live])[:, None] + lp_sel
        flat = scores.reshape(-1)
        order = np.argsort(-flat, kind="stable")
        order = [i for i in order[:beam] if np.isfinite(flat[i])]
        new_live, keep_rows = [], []
        for i in order:
            row, w = divmod(int(i), model.vocab_size)
            score, ids, lps, _ = live[row]
            forced = t == max_len - 1 and int(lp[row].argmax()) != EOS
            hyp = (float(flat[i]), ids + [w], lps + [float(lp[row, w])], forced)
            if w == EOS:
                finished.append(hyp)
            else:
                new_live.append(hyp)
                keep_rows.append(row)
        if not new_live:
            break
        state = GenState(state.h[keep_rows], state.c[keep_rows],
                         None if state.rproj is None else state.rproj[keep_rows])
        live = new_live
        if finished and max(f[0] for f in finished) >= max(h[0] for h in live):
            break
    best = max(finished, key=lambda f: f[0])  # max() keeps the first of equal scores
    lps = np.array(best[2])
    return DecodeResult(Caption(tuple(best[1]), tuple(best[2]), best[3]), lps, float(lps.sum()), "beam")
