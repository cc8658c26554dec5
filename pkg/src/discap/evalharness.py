"""Machine discrimination on target/distractor pairs and the result table."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .generator import GeneratorModel, beam_decode
from .metrics import CiderD, bleu4, diversity_stats
from .numerics import load_checkpoint, save_checkpoint
from .retrieval import RetrievalConfig, RetrievalModel, cosine_matrix
from .synthworld import DistractorPair
from .textcore import Caption, Vocab, detokenize, tokenize
from .training import ConfigError, SplitData

REPORT_KEYS = ("model", "seed", "acc", "acc_new", "bleu4", "cider", "distinct", "avg_len",
               "n_pairs", "ties", "dataset_hash")


def save_retrieval(path, model: RetrievalModel, meta: Optional[dict] = None) -> str:
    meta = dict(meta or {}, kind="retrieval", margin=model.margin, config=asdict(model.config))
    model.checkpoint_id = save_checkpoint(path, model.params, meta)
    return model.checkpoint_id


def load_retrieval(path) -> RetrievalModel:
    params, meta, _ = load_checkpoint(path)
    if meta.get("kind") != "retrieval":
        raise ConfigError(f"{path} is not a retrieval checkpoint")
    cfg = RetrievalConfig(**meta["config"]) if "config" in meta else None
    return RetrievalModel(params, meta.get("margin", 0.2), cfg, meta["checkpoint_id"])


@dataclass
class Discrimination:
    acc: float
    correct: list[bool]
    ties: int
    margins: list[float]


def _caption_of(captions, target_id):
    try:
        cap = captions[target_id]
    except KeyError:
        raise KeyError(f"no caption for target image {target_id}") from None
    return cap


def machine_discrimination(pairs: Sequence[DistractorPair], captions: dict[int, Caption],
                           features: dict[int, np.ndarray], retrieval: RetrievalModel) -> Discrimination:
    """A pair is correct iff s(target, c) > s(distractor, c); ties are wrong."""
    caps = [_caption_of(captions, p.target_id) for p in pairs]
    if not pairs:
        return Discrimination(0.0, [], 0, [])
    G = retrieval.encode_captions(caps)
    Ft = retrieval.encode_images(np.stack([features[p.target_id] for p in pairs]))
    Fd = retrieval.encode_images(np.stack([features[p.distractor_id] for p in pairs]))
    st = np.diag(cosine_matrix(Ft, G)[0])
    sd = np.diag(cosine_matrix(Fd, G)[0])
    correct = [bool(a > b) for a, b in zip(st, sd)]
    ties = int(np.sum(st == sd))
    return Discrimination(float(np.mean(correct)), correct, ties, [float(x) for x in st - sd])


def acc_new(pairs, captions, features, independent: RetrievalModel,
            training_ckpt_id: Optional[str] = None) -> Discrimination:
    if training_ckpt_id and independent.checkpoint_id == training_ckpt_id:
        raise ConfigError("Acc-new needs a retrieval model other than the one used in training")
    return machine_discrimination(pairs, captions, features, independent)


@dataclass
class EvalReport:
    model: str
    seed: int
    acc: float
    acc_new: float
    bleu4: float
    cider: float
    distinct: int
    avg_len: float
    n_pairs: int
    ties: int
    dataset_hash: str
    bleu4_unsmoothed: float = 0.0
    ties_new: int = 0
    duplicate_images: int = 0
    decisions: list[bool] = field(default_factory=list)
    decisions_new: list[bool] = field(default_factory=list)
    captions: dict[str, str] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _duplicate_images(pairs: Sequence[DistractorPair]) -> int:
    """Appearances beyond the first of any image across all pairs."""
    ids = [i for p in pairs for i in (p.target_id, p.distractor_id)]
    return len(ids) - len(set(ids))


def decode_split(model: GeneratorModel, split: SplitData, beam: int = 2) -> list[Caption]:
    return [beam_decode(model, split.images.take([i]), beam).caption for i in range(len(split))]


def full_report(model: GeneratorModel, split: SplitData, pairs: Sequence[DistractorPair],
                retrieval: RetrievalModel, independent: RetrievalModel, vocab: Vocab,
                dataset_hash: str = "", pairs_dataset_hash: Optional[str] = None,
                seed: int = 0, beam: int = 2, config: Optional[dict] = None) -> EvalReport:
    """Beam-decode the split once and compute every column from that decode set."""
    if pairs_dataset_hash and dataset_hash and pairs_dataset_hash != dataset_hash:
        raise ConfigError(f"dataset hash mismatch: pairs {pairs_dataset_hash} vs data {dataset_hash}")
    caps = decode_split(model, split, beam)
    texts = [detokenize(c, vocab) for c in caps]
    by_id = dict(zip(split.ids, caps))
    feats = {r.scene_id: r.feature.global_ for r in split.records}
    disc = machine_discrimination(pairs, by_id, feats, retrieval)
    disc_new = acc_new(pairs, by_id, feats, independent, retrieval.checkpoint_id)
    div = diversity_stats(texts)
    return EvalReport(
        model=model.checkpoint_id or "unsaved",
        seed=seed,
        acc=disc.acc,
        acc_new=disc_new.acc,
        bleu4=bleu4(texts, split.refs),
        cider=float(split.scorer.score(texts).mean()),
        distinct=div["distinct"],
        avg_len=div["avg_len"],
        n_pairs=len(pairs),
        ties=disc.ties,
        dataset_hash=dataset_hash,
        bleu4_unsmoothed=bleu4(texts, split.refs, smooth=False),
        ties_new=disc_new.ties,
        duplicate_images=_duplicate_images(pairs),
        decisions=disc.correct,
        decisions_new=disc_new.correct,
        captions={str(i): t for i, t in zip(split.ids, texts)},
        config=dict(config or {}, beam=beam, length_normalization=False),
    )


def format_table(reports: Sequence[EvalReport], names: Optional[Sequence[str]] = None) -> str:
    names = list(names or [r.model for r in reports])
    w = max([len(n) for n in names] + [5])
    head = f"{'':<{w}}  {'Acc':>7}  {'Acc-new':>7}  {'BLEU4':>6}  {'CIDEr':>6}  {'distinct':>8}  {'avg_len':>7}"
    lines = [head, "-" * len(head)]
    for n, r in zip(names, reports):
        lines.append(f"{n:<{w}}  {100 * r.acc:6.2f}%  {100 * r.acc_new:6.2f}%  {r.bleu4:6.4f}  "
                     f"{r.cider:6.4f}  {r.distinct:8d}  {r.avg_len:7.2f}")
    return "\n".join(lines)
