"""MLE pretraining and self-critical policy-gradient fine-tuning."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .generator import GeneratorModel, ImageBatch, decode_batch
from .metrics import CiderD, NGramStats
from .numerics import (NumericalError, OptState, clip_grad_norm, load_checkpoint, lr_at, opt_step,
                       save_checkpoint)
from .retrieval import RetrievalModel, disc_loss
from .synthworld import Dataset, dataset_hash, load_dataset
from .textcore import Caption, Vocab, detokenize, tokenize

log = logging.getLogger(__name__)

REWARD_KINDS = ("mle", "cider", "mle_disc", "cider_disc")
CLIP_NORM = 5.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    kind: str = "cider"
    lam: float = 0.0
    retrieval_ckpt: Optional[str] = None

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ConfigError(f"unknown reward kind {self.kind!r}")
        if not self.lam >= 0:
            raise ConfigError("reward lambda must be >= 0")
        if self.uses_disc and not self.retrieval_ckpt:
            raise ConfigError(f"reward {self.kind} needs a retrieval checkpoint")

    @property
    def uses_disc(self) -> bool:
        return self.kind.endswith("_disc")


# -- data plumbing --------------------------------------------------------------

class SplitData:
    """Image batch, references and a CIDEr-D scorer for one split."""

    def __init__(self, records, vocab: Vocab, stats: Optional[NGramStats] = None):
        self.records = records
        self.ids = [r.scene_id for r in records]
        self.images = ImageBatch.from_features([r.feature for r in records])
        self.refs = [list(r.refs) for r in records]
        self.ref_caps = [[tokenize(x, vocab) for x in refs] for refs in self.refs]
        self.stats = stats or NGramStats.build(self.refs)
        self.scorer = CiderD(self.refs, self.stats)

    def __len__(self):
        return len(self.records)


def ngram_stats_for(data_dir, split_name: str, records) -> NGramStats:
    """Document frequencies for a split, cached next to the dataset keyed by its hash."""
    if data_dir is None:
        return NGramStats.build([r.refs for r in records])
    path = Path(data_dir) / f"ngram_{split_name}_{dataset_hash(data_dir)}.pkl"
    if path.exists():
        return NGramStats.load(path)
    stats = NGramStats.build([r.refs for r in records])
    stats.save(path)
    return stats


class TrainingData:
    def __init__(self, dataset: Dataset, vocab: Vocab, data_dir=None):
        self.dataset = dataset
        self.vocab = vocab
        self.train = SplitData(dataset.split("train"), vocab, ngram_stats_for(data_dir, "train", dataset.split("train")))
        self.val = SplitData(dataset.split("val"), vocab, ngram_stats_for(data_dir, "val", dataset.split("val")))

    @classmethod
    def load(cls, data_dir) -> "TrainingData":
        from .synthworld import VOCAB_FILE
        vocab = Vocab.from_json((Path(data_dir) / VOCAB_FILE).read_text())
        return cls(load_dataset(data_dir), vocab, data_dir)


# -- rewards ----------------------------------------------------------------------

def reward(caption, refs: Sequence[str], cfg: RewardConfig, ngram_stats: NGramStats,
           lcon: float = 0.0, logprob: Optional[float] = None, vocab: Optional[Vocab] = None) -> float:
    """Scalar reward for one caption.

    ``lcon`` is this caption's per-item discriminability loss taken from its
    sampled batch (see :func:`batch_rewards`). ``mle_disc`` needs ``logprob``.
    """
    text = detokenize(caption, vocab) if isinstance(caption, Caption) else caption
    if cfg.kind == "mle":
        return float(logprob)
    if cfg.kind == "mle_disc":
        if logprob is None:
            raise ConfigError("mle_disc reward needs the caption log-probability")
        return float(logprob) - cfg.lam * lcon
    cider = CiderD([refs], ngram_stats).score_one(0, text)
    if cfg.kind == "cider":
        return cider
    return cider - cfg.lam * lcon


def batch_rewards(captions: Sequence[Caption], images: ImageBatch, index: Sequence[int],
                  split: SplitData, cfg: RewardConfig, retrieval: Optional[RetrievalModel],
                  vocab: Vocab):
    """CIDEr-D and L_CON for a batch of captions; returns (reward, cider, lcon).

    For ``mle_disc`` the reward is ``-lam * lcon`` only: its log-likelihood
    part is optimized by its exact gradient, not through the advantage.
    """
    if cfg.uses_disc and retrieval is None:
        raise ConfigError(f"reward {cfg.kind} needs a retrieval model")
    texts = [detokenize(c, vocab) for c in captions]
    cider = split.scorer.score(texts, index) if cfg.kind in ("cider", "cider_disc") else np.zeros(len(texts))
    lcon = disc_loss(images.global_, captions, retrieval) if cfg.uses_disc else np.zeros(len(texts))
    if cfg.kind == "cider":
        r = cider
    elif cfg.kind == "cider_disc":
        r = cider - cfg.lam * lcon
    elif cfg.kind == "mle_disc":
        r = -cfg.lam * lcon
    else:
        r = np.zeros(len(texts))
    return r, cider, lcon


# -- epochs and steps -----------------------------------------------------------

def mle_epoch(model: GeneratorModel, data: TrainingData, opt: OptState, rng: np.random.Generator,
              batch: int = 64) -> float:
    """One teacher-forced pass over train; returns mean per-token NLL."""
    split = data.train
    order = rng.permutation(len(split))
    picks = rng.integers(0, 5, size=len(split))
    total_nll = 0.0
    total_tok = 0.0
    for s in range(0, len(order), batch):
        idx = order[s:s + batch]
        caps = [split.ref_caps[i][picks[i] % len(split.ref_caps[i])] for i in idx]
        n_tok = sum(len(c.ids) - 1 for c in caps)
        w = np.full(len(idx), 1.0 / n_tok)
        _, _, loss = model.sequence_logprobs(split.images.take(idx), caps, w)
        if not math.isfinite(loss):
            raise NumericalError("MLE loss is not finite")
        opt_step(model.params, opt)
        total_nll += loss * n_tok
        total_tok += n_tok
    return total_nll / total_tok


def eval_nll(model: GeneratorModel, split: SplitData, ref_index: int = 0) -> float:
    caps = [refs[ref_index] for refs in split.ref_caps]
    logp, mask = model.sequence_logprobs(split.images, caps)
    return float(-logp.sum() / mask.sum())


@dataclass
class StepStats:
    mean_reward: float
    mean_baseline: float
    mean_lcon: float
    mean_cider: float
    skipped: bool = False
    grad_norm: float = 0.0


def scst_step(model: GeneratorModel, batch_idx: np.ndarray, cfg: RewardConfig, opt: OptState,
              data: TrainingData, rng: np.random.Generator,
              retrieval: Optional[RetrievalModel] = None, clip: float = CLIP_NORM) -> StepStats:
    """Sample one caption and one greedy baseline per image, then step on
    ``-mean((R(sample) - R(greedy)) * log p(sample))``."""
    split = data.train
    images = split.images.take(batch_idx)
    samples = decode_batch(model, images, "sample", rng)
    greedy = decode_batch(model, images, "greedy")
    s_caps = [d.caption for d in samples]
    g_caps = [d.caption for d in greedy]
    r_s, cider_s, lcon_s = batch_rewards(s_caps, images, batch_idx, split, cfg, retrieval, data.vocab)
    r_g, _, _ = batch_rewards(g_caps, images, batch_idx, split, cfg, retrieval, data.vocab)
    adv = r_s - r_g
    B = len(batch_idx)
    stats = StepStats(float(r_s.mean()), float(r_g.mean()), float(lcon_s.mean()), float(cider_s.mean()))
    if cfg.kind != "mle_disc" and not np.any(adv):
        log.info("all-zero advantage batch; step skipped")
        stats.skipped = True
        return stats
    model.sequence_logprobs(images, s_caps, adv / B, skip_forced=True)
    if cfg.kind == "mle_disc":
        # exact gradient of the log-likelihood of one reference per image
        picks = rng.integers(0, 5, size=B)
        refs = [split.ref_caps[i][p % len(split.ref_caps[i])] for i, p in zip(batch_idx, picks)]
        model.sequence_logprobs(images, refs, np.full(B, 1.0 / B))
    stats.grad_norm = clip_grad_norm(model.params, clip) if clip else model.params.grad_norm()
    opt_step(model.params, opt)
    return stats


def scst_epoch(model, data, cfg, opt, rng, retrieval=None, batch: int = 64) -> StepStats:
    order = rng.permutation(len(data.train))
    rows = []
    for s in range(0, len(order), batch):
        rows.append(scst_step(model, order[s:s + batch], cfg, opt, data, rng, retrieval))
    return StepStats(*(float(np.mean([getattr(r, f) for r in rows])) for f in
                       ("mean_reward", "mean_baseline", "mean_lcon", "mean_cider")))


def greedy_texts(model: GeneratorModel, split: SplitData, vocab: Vocab) -> list[str]:
    return [detokenize(d.caption, vocab) for d in decode_batch(model, split.images, "greedy")]


def val_cider(model: GeneratorModel, data: TrainingData) -> float:
    return float(data.val.scorer.score(greedy_texts(model, data.val, data.vocab)).mean())


# -- schedule ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    dataset: str = ""
    variant: str = "attn"
    reward_kind: str = "cider"
    reward_lambda: float = 0.0
    epochs_mle: int = 20
    epochs_scst: int = 10
    batch: int = 64
    lr: float = 2e-3
    seed: int = 0
    retrieval_ckpt: str = ""
    lr_scst: float = 2e-4

    KEYS = {"dataset": "dataset", "variant": "variant", "reward.kind": "reward_kind",
            "reward.lambda": "reward_lambda", "epochs.mle": "epochs_mle", "epochs.scst": "epochs_scst",
            "batch": "batch", "lr": "lr", "seed": "seed", "retrieval_ckpt": "retrieval_ckpt",
            "lr.scst": "lr_scst"}

    @property
    def reward(self) -> RewardConfig:
        return RewardConfig(self.reward_kind, self.reward_lambda, self.retrieval_ckpt or None)

    def validate(self):
        if self.variant not in ("fc", "attn"):
            raise ConfigError(f"variant must be fc or attn, got {self.variant!r}")
        for name in ("epochs_mle", "epochs_scst"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if not (self.lr >= 0 and self.lr_scst >= 0):
            raise ConfigError("learning rates must be >= 0")
        if self.epochs_scst > 0:
            self.reward  # noqa: B018 - validates the reward block

    @classmethod
    def parse(cls, text: str) -> "TrainConfig":
        """Flat ``key = value`` lines; ``#`` starts a comment."""
        cfg = cls()
        types = {f.name: f.type for f in fields(cls)}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in cls.KEYS:
                raise ConfigError(f"line {n}: unknown key {key!r}")
            attr = cls.KEYS[key]
            kind = types[attr]
            try:
                conv = int if kind in (int, "int") else float if kind in (float, "float") else str
                setattr(cfg, attr, conv(value))
            except ValueError:
                raise ConfigError(f"line {n}: bad value for {key}: {value!r}") from None
        return cfg

    def dump(self) -> str:
        return "".join(f"{k} = {getattr(self, a)}\n" for k, a in self.KEYS.items())


@dataclass
class LogRow:
    epoch: int
    phase: str
    mean_reward: float
    mean_baseline: float
    mean_lcon: float
    val_cider: float
    lr: float
    wall_time: float = 0.0


CSV_COLUMNS = ("epoch", "phase", "mean_reward", "mean_baseline", "mean_lcon", "val_cider", "lr")


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    def append(self, row: LogRow):
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("train log epochs must increase")
        vals = (row.mean_reward, row.mean_baseline, row.mean_lcon, row.val_cider, row.lr)
        if not all(math.isfinite(v) for v in vals):
            raise NumericalError(f"non-finite train log entry at epoch {row.epoch}")
        self.rows.append(row)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.epoch, r.phase] + [repr(float(getattr(r, c))) for c in CSV_COLUMNS[2:]])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.rows.append(LogRow(int(row["epoch"]), row["phase"],
                                       *(float(row[c]) for c in CSV_COLUMNS[2:])))
        return out


def _opt_extra(opt: OptState) -> dict:
    extra = {f"adam.m.{k}": v for k, v in opt.m.items()}
    extra.update({f"adam.v.{k}": v for k, v in opt.v.items()})
    return extra


def _opt_from_extra(extra: dict, meta: dict, lr: float) -> OptState:
    opt = OptState(lr=lr, t=int(meta.get("adam_t", 0)))
    for k, v in extra.items():
        if k.startswith("adam.m."):
            opt.m[k[7:]] = v.copy()
        elif k.startswith("adam.v."):
            opt.v[k[7:]] = v.copy()
    return opt


def save_generator(path, model: GeneratorModel, meta: dict, opt: Optional[OptState] = None) -> str:
    meta = dict(meta, kind="generator", variant=model.variant, vocab_size=model.vocab_size)
    if opt is not None:
        meta["adam_t"] = opt.t
    ckpt_id = save_checkpoint(path, model.params, meta, _opt_extra(opt) if opt else None)
    model.checkpoint_id = ckpt_id
    return ckpt_id


def load_generator(path) -> tuple[GeneratorModel, dict, dict]:
    params, meta, extra = load_checkpoint(path)
    if meta.get("kind", "generator") != "generator":
        raise ConfigError(f"{path} is not a generator checkpoint")
    return GeneratorModel(meta.get("variant", "attn"), params, meta["checkpoint_id"]), meta, extra


def run_schedule(config: TrainConfig, out_dir, data: Optional[TrainingData] = None,
                 retrieval: Optional[RetrievalModel] = None, init: Optional[str] = None,
                 checkpoint_every: int = 5, eval_every: int = 1) -> tuple[GeneratorModel, TrainLog]:
    """MLE for ``epochs_mle`` epochs, then SCST for ``epochs_scst``.

    Global epoch numbering drives the learning-rate decay and per-epoch RNG
    streams, so a run resumed from ``out_dir/latest`` reproduces an
    uninterrupted one. With ``init``, training starts from that generator
    checkpoint at the epoch recorded in it (skipping MLE epochs already done).
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = TrainingData.load(config.dataset)
    rcfg = config.reward if config.epochs_scst > 0 else None
    if rcfg is not None and rcfg.uses_disc and retrieval is None:
        from .evalharness import load_retrieval
        retrieval = load_retrieval(config.retrieval_ckpt)
    total = config.epochs_mle + config.epochs_scst
    log_rows = TrainLog()
    start = 0
    latest = out / "latest.ckpt"
    resume_from = latest if latest.exists() else (Path(init) if init else None)
    feat_dim = data.train.images.global_.shape[1]
    if resume_from is not None:
        model, meta, extra = load_generator(resume_from)
        start = int(meta.get("epoch", 0))
        opt = _opt_from_extra(extra, meta, config.lr)
        if resume_from == latest and (out / "train_log.csv").exists():
            log_rows = TrainLog.read_csv(out / "train_log.csv")
        if resume_from != latest:
            opt = OptState(lr=config.lr)  # fresh optimizer for a new phase
    else:
        model = GeneratorModel.create(config.variant, len(data.vocab), feat_dim,
                                      np.random.default_rng([config.seed, 5]))
        opt = OptState(lr=config.lr)
    meta_base = {"config": asdict(config), "dataset_hash": _safe_hash(config.dataset),
                 "retrieval_ckpt": config.retrieval_ckpt}
    for epoch in range(start, total):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, 13, epoch])
        phase = "mle" if epoch < config.epochs_mle else "scst"
        opt.lr = lr_at(epoch, config.lr) if phase == "mle" else lr_at(epoch - config.epochs_mle, config.lr_scst)
        if phase == "mle":
            nll = mle_epoch(model, data, opt, rng, config.batch)
            row_vals = (-nll, 0.0, 0.0)
        else:
            st = scst_epoch(model, data, rcfg, opt, rng, retrieval, config.batch)
            row_vals = (st.mean_reward, st.mean_baseline, st.mean_lcon)
        vc = val_cider(model, data) if (epoch + 1) % eval_every == 0 or epoch + 1 == total else float("nan")
        if not math.isfinite(vc):
            vc = log_rows.rows[-1].val_cider if log_rows.rows else 0.0
        wall = time.perf_counter() - t0
        log_rows.append(LogRow(epoch, phase, *row_vals, vc, opt.lr, wall))
        # wall time stays out of the CSV so reruns are byte-identical
        log.info("epoch %d %s reward %.4f val_cider %.4f (%.1fs)", epoch, phase, row_vals[0], vc, wall)
        meta = dict(meta_base, epoch=epoch + 1, phase=phase)
        boundary = epoch + 1 == config.epochs_mle or epoch + 1 == total
        if boundary or (epoch + 1) % checkpoint_every == 0:
            save_generator(latest, model, meta, opt)
            log_rows.write_csv(out / "train_log.csv")
        if epoch + 1 == config.epochs_mle:
            save_generator(out / "mle.ckpt", model, meta, opt)
    save_generator(out / "final.ckpt", model, dict(meta_base, epoch=total, phase="done"), opt)
    log_rows.write_csv(out / "train_log.csv")
    (out / "train_config.txt").write_text(config.dump())
    return model, log_rows


def _safe_hash(data_dir) -> Optional[str]:
    try:
        return dataset_hash(data_dir) if data_dir else None
    except OSError:
        return None
