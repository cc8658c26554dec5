"""Visual-semantic embedding: linear image projection, GRU caption encoder,
cosine scores and the hard-negative bidirectional hinge loss."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import layers
from .numerics import NumericalError, OptState, ParamStore, init_params, lr_at, opt_step
from .textcore import PAD, Caption, Vocab, tokenize

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass
class RetrievalConfig:
    epochs: int = 15
    batch: int = 128
    lr: float = 5e-4
    seed: int = 0
    embed_dim: int = 64
    hidden: int = 128
    joint_dim: int = 128
    margin: float = 0.2
    update_bias: float = 2.0


class RetrievalModel:
    def __init__(self, params: ParamStore, margin: float = 0.2, config: Optional[RetrievalConfig] = None,
                 checkpoint_id: str = ""):
        self.params = params
        self.margin = margin
        self.config = config or RetrievalConfig(margin=margin)
        self.checkpoint_id = checkpoint_id
        self.degenerate = 0  # count of near-zero-norm embeddings seen by similarity()

    @classmethod
    def create(cls, vocab_size: int, feat_dim: int, config: Optional[RetrievalConfig] = None,
               rng: Optional[np.random.Generator] = None) -> "RetrievalModel":
        cfg = config or RetrievalConfig()
        rng = rng if rng is not None else np.random.default_rng([cfg.seed, 7])
        H, E, W = cfg.hidden, cfg.joint_dim, cfg.embed_dim
        params = init_params([
            ("emb", (vocab_size, W), ("uniform", 0.1)),
            ("gru.Wx", (W, 3 * H), ("normal", W)),
            ("gru.Wh", (H, 3 * H), ("normal", H)),
            ("gru.bx", (3 * H,), ("zeros",)),
            ("gru.bh", (3 * H,), ("zeros",)),
            ("W_c", (H, E), ("normal", H)),
            ("W_I", (feat_dim, E), ("normal", feat_dim)),
        ], rng)
        # update-gate bias so early content words survive the trailing context phrase
        params["gru.bx"][H:2 * H] = cfg.update_bias
        return cls(params, cfg.margin, cfg)

    @property
    def feat_dim(self) -> int:
        return self.params["W_I"].shape[0]

    # -- encoders ----------------------------------------------------------

    def encode_images(self, feats: np.ndarray) -> np.ndarray:
        feats = np.atleast_2d(feats)
        if feats.shape[1] != self.feat_dim:
            raise ValueError(f"feature dimension {feats.shape[1]} != {self.feat_dim}")
        return feats @ self.params["W_I"]

    def _caption_forward(self, captions: Sequence[Caption]):
        p = self.params
        ids, mask = pad_ids(captions)
        B, L = ids.shape
        h = np.zeros((B, p["gru.Wh"].shape[0]))
        caches = []
        for t in range(L):
            x = p["emb"][ids[:, t]]
            h, cache = layers.gru_forward(x, h, p["gru.Wx"], p["gru.Wh"], p["gru.bx"], p["gru.bh"], mask[:, t])
            caches.append(cache)
        return h @ p["W_c"], (ids, h, caches)

    def encode_captions(self, captions: Sequence[Caption]) -> np.ndarray:
        return self._caption_forward(captions)[0]

    def _caption_backward(self, dG: np.ndarray, state):
        p, g = self.params, self.params.grads
        ids, h_final, caches = state
        g["W_c"] += h_final.T @ dG
        dh = dG @ p["W_c"].T
        for t in range(len(caches) - 1, -1, -1):
            dx, dh = layers.gru_backward(dh, caches[t], p["gru.Wx"], p["gru.Wh"],
                                         g["gru.Wx"], g["gru.Wh"], g["gru.bx"], g["gru.bh"])
            np.add.at(g["emb"], ids[:, t], dx)

    # -- scoring -----------------------------------------------------------

    def score_matrix(self, feats: np.ndarray, captions: Sequence[Caption]) -> np.ndarray:
        return cosine_matrix(self.encode_images(feats), self.encode_captions(captions))[0]

    def loss_and_grad(self, feats: np.ndarray, captions: Sequence[Caption]) -> float:
        """Mean contrastive loss over the batch; accumulates gradients into params."""
        F = self.encode_images(feats)
        G, state = self._caption_forward(captions)
        S, (Fn, Gn, nf, ng) = cosine_matrix(F, G)
        loss, _, _, dS = contrastive_loss(S, self.margin, with_grad=True)
        dFn = dS @ Gn
        dGn = dS.T @ Fn
        dF = (dFn - Fn * (Fn * dFn).sum(1, keepdims=True)) / nf[:, None]
        dG = (dGn - Gn * (Gn * dGn).sum(1, keepdims=True)) / ng[:, None]
        self.params.grads["W_I"] += np.atleast_2d(feats).T @ dF
        self._caption_backward(dG, state)
        return loss


def pad_ids(captions: Sequence[Caption], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(c.ids) for c in captions)
    ids = np.full((len(captions), L), pad, dtype=np.int64)
    mask = np.zeros((len(captions), L))
    for b, c in enumerate(captions):
        ids[b, :len(c.ids)] = c.ids
        mask[b, :len(c.ids)] = 1.0
    return ids, mask


def encode_image(feature: np.ndarray, model: RetrievalModel) -> np.ndarray:
    return model.encode_images(np.asarray(feature)[None, :])[0]


def encode_caption(caption: Caption, model: RetrievalModel) -> np.ndarray:
    return model.encode_captions([caption])[0]


def similarity(f: np.ndarray, g: np.ndarray, model: Optional[RetrievalModel] = None) -> float:
    nf, ng = np.linalg.norm(f), np.linalg.norm(g)
    if nf < NORM_EPS or ng < NORM_EPS:
        if model is not None:
            model.degenerate += 1
        return 0.0
    return float(np.clip(f @ g / (nf * ng), -1.0, 1.0))


def cosine_matrix(F: np.ndarray, G: np.ndarray):
    nf = np.linalg.norm(F, axis=1)
    ng = np.linalg.norm(G, axis=1)
    nf_safe = np.where(nf < NORM_EPS, 1.0, nf)
    ng_safe = np.where(ng < NORM_EPS, 1.0, ng)
    Fn = np.where((nf < NORM_EPS)[:, None], 0.0, F / nf_safe[:, None])
    Gn = np.where((ng < NORM_EPS)[:, None], 0.0, G / ng_safe[:, None])
    return Fn @ Gn.T, (Fn, Gn, nf_safe, ng_safe)


def hinge_terms(scores: np.ndarray, alpha: float):
    """Per-anchor hardest-negative hinges.

    Row ``i`` is image ``i`` against every caption; column ``i`` is caption
    ``i`` against every image. Returns (caption-side costs, image-side costs,
    hardest caption index per row, hardest image index per column); argmax
    ties resolve to the lowest index and B=1 gives empty negatives (-1).
    """
    S = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(S)):
        raise NumericalError("non-finite score in contrastive loss")
    B = S.shape[0]
    if B < 2:
        return np.zeros(B), np.zeros(B), np.full(B, -1), np.full(B, -1)
    diag = np.diag(S)
    masked = S.copy()
    np.fill_diagonal(masked, -np.inf)
    j_star = masked.argmax(axis=1)
    k_star = masked.argmax(axis=0)
    idx = np.arange(B)
    cost_c = np.maximum(alpha + masked[idx, j_star] - diag, 0.0)
    cost_i = np.maximum(alpha + masked[k_star, idx] - diag, 0.0)
    return cost_c, cost_i, j_star, k_star


def contrastive_loss(scores: np.ndarray, alpha: float = 0.2, with_grad: bool = False):
    """Mean over anchors of the two hardest-negative hinges.

    Returns ``(loss, j_star, k_star)``, plus ``dL/dscores`` when ``with_grad``.
    """
    cost_c, cost_i, j_star, k_star = hinge_terms(scores, alpha)
    B = len(cost_c)
    loss = float((cost_c + cost_i).mean()) if B else 0.0
    if not with_grad:
        return loss, j_star, k_star
    dS = np.zeros((B, B))
    if B >= 2:
        w = 1.0 / B
        for i in range(B):
            if cost_c[i] > 0:
                dS[i, j_star[i]] += w
                dS[i, i] -= w
            if cost_i[i] > 0:
                dS[k_star[i], i] += w
                dS[i, i] -= w
    return loss, j_star, k_star, dS


def disc_loss(feats: np.ndarray, captions: Sequence[Caption], model: RetrievalModel) -> np.ndarray:
    """Per-pair contrastive values for (image i, caption i) within this batch.

    Read-only with respect to the retrieval model.
    """
    if len(captions) < 2:
        warnings.warn("discriminability loss on a batch of 1 is identically zero", RuntimeWarning)
        return np.zeros(len(captions))
    S = model.score_matrix(feats, captions)
    cost_c, cost_i, _, _ = hinge_terms(S, model.margin)
    return cost_c + cost_i


# -- training ---------------------------------------------------------------------

def _sample_pairs(records, vocab: Vocab, rng: np.random.Generator):
    order = rng.permutation(len(records))
    picks = rng.integers(0, 5, size=len(records))
    feats = np.stack([records[i].feature.global_ for i in order])
    caps = [tokenize(records[i].refs[picks[i] % len(records[i].refs)], vocab) for i in order]
    return feats, caps


def train_retrieval(dataset, vocab: Vocab, config: Optional[RetrievalConfig] = None,
                    model: Optional[RetrievalModel] = None):
    """Returns (model, per-epoch mean loss list).

    On a non-finite loss raises ``NumericalError`` whose ``last_good`` attribute
    holds the model as of the last finite epoch.
    """
    cfg = config or RetrievalConfig()
    train = dataset.split("train")
    if model is None:
        model = RetrievalModel.create(len(vocab), train[0].feature.global_.shape[0], cfg)
    opt = OptState(lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        last_good = model.params.copy()
        rng = np.random.default_rng([cfg.seed, 11, epoch])
        opt.lr = lr_at(epoch, cfg.lr)
        feats, caps = _sample_pairs(train, vocab, rng)
        losses = []
        for s in range(0, len(caps), cfg.batch):
            loss = model.loss_and_grad(feats[s:s + cfg.batch], caps[s:s + cfg.batch])
            if not np.isfinite(loss):
                err = NumericalError(f"retrieval loss diverged at epoch {epoch}")
                err.last_good = RetrievalModel(last_good, model.margin, cfg)
                raise err
            try:
                opt_step(model.params, opt)
            except NumericalError as exc:
                exc.last_good = RetrievalModel(last_good, model.margin, cfg)
                raise
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("retrieval epoch %d loss %.4f", epoch, history[-1])
    return model, history


# -- evaluation -------------------------------------------------------------------

def _ranks(scores: np.ndarray, true_idx: np.ndarray) -> np.ndarray:
    """1-based rank of each row's true column (strictly-greater count + 1)."""
    true = scores[np.arange(len(true_idx)), true_idx]
    return 1 + (scores > true[:, None]).sum(axis=1)


def _summary(ranks: np.ndarray, Ks) -> dict:
    out = {f"R@{k}": float((ranks <= k).mean()) for k in Ks}
    out["med_r"] = float(np.median(ranks))
    out["mean_r"] = float(ranks.mean())
    return out


def recall_report(model: RetrievalModel, split, vocab: Vocab, Ks=(1, 5, 10)) -> dict:
    """Caption retrieval ranks images for each caption; image retrieval ranks
    the k-th reference of every image for each image, averaged over k."""
    feats = np.stack([r.feature.global_ for r in split])
    n_refs = min(len(r.refs) for r in split)
    F = model.encode_images(feats)
    Gs = [model.encode_captions([tokenize(r.refs[k], vocab) for r in split]) for k in range(n_refs)]
    n = len(split)
    idx = np.arange(n)
    cap_ranks = []
    img_ranks = []
    for G in Gs:
        S = cosine_matrix(F, G)[0]                # images x captions
        cap_ranks.append(_ranks(S.T, idx))        # per caption, over images
        img_ranks.append(_ranks(S, idx))          # per image, over captions
    return {
        "n_images": n,
        "caption_retrieval": _summary(np.concatenate(cap_ranks), Ks),
        "image_retrieval": _summary(np.concatenate(img_ranks), Ks),
    }
