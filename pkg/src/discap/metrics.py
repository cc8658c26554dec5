"""CIDEr-D, corpus BLEU-4 and caption diversity statistics."""

from __future__ import annotations

import math
import pickle
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

Text = Union[str, Sequence[str]]
MAX_N = 4
SIGMA = 6.0


def _words(x: Text) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def _all_ngrams(words: Sequence[str]) -> list[Counter]:
    return [ngrams(words, n) for n in range(1, MAX_N + 1)]


@dataclass(frozen=True)
class NGramStats:
    """Document frequencies over a reference corpus (one document per image)."""

    df: dict[tuple[str, ...], int]
    n_docs: int

    @classmethod
    def build(cls, refs: Sequence[Sequence[Text]]) -> "NGramStats":
        df: Counter = Counter()
        for image_refs in refs:
            seen = set()
            for r in image_refs:
                for c in _all_ngrams(_words(r)):
                    seen.update(c)
            df.update(seen)
        return cls(dict(df), len(refs))

    @property
    def log_n(self) -> float:
        return math.log(float(self.n_docs))

    def save(self, path: str | Path):
        Path(path).write_bytes(pickle.dumps((self.df, self.n_docs), protocol=4))

    @classmethod
    def load(cls, path: str | Path) -> "NGramStats":
        df, n = pickle.loads(Path(path).read_bytes())
        return cls(df, n)


def _tfidf(counts: list[Counter], stats: NGramStats):
    vecs, norms = [], []
    log_n = stats.log_n
    for c in counts:
        v = {g: tf * (log_n - math.log(max(1.0, stats.df.get(g, 0.0)))) for g, tf in c.items()}
        vecs.append(v)
        norms.append(math.sqrt(sum(x * x for x in v.values())))
    return vecs, norms


def _sim(vh, nh, lh, vr, nr, lr) -> float:
    total = 0.0
    penalty = math.exp(-((lh - lr) ** 2) / (2 * SIGMA ** 2))
    for n in range(MAX_N):
        val = 0.0
        ref = vr[n]
        for g, x in vh[n].items():
            if g in ref:
                val += min(x, ref[g]) * ref[g]
        if nh[n] != 0 and nr[n] != 0:
            val /= nh[n] * nr[n]
        total += val * penalty
    return total / MAX_N


class CiderD:
    """CIDEr-D scorer with reference vectors cached per image.

    ``refs`` is a per-image list of reference texts; scoring a candidate for
    image ``i`` averages its similarity to each of that image's references.
    """

    def __init__(self, refs: Sequence[Sequence[Text]], stats: NGramStats):
        self.stats = stats
        self._refs = []
        for image_refs in refs:
            if len(image_refs) == 0:
                raise ValueError("image with no references")
            cached = []
            for r in image_refs:
                w = _words(r)
                vec, norm = _tfidf(_all_ngrams(w), stats)
                cached.append((vec, norm, len(w)))
            self._refs.append(cached)

    def __len__(self):
        return len(self._refs)

    def score_one(self, i: int, candidate: Text) -> float:
        w = _words(candidate)
        vh, nh = _tfidf(_all_ngrams(w), self.stats)
        refs = self._refs[i]
        s = sum(_sim(vh, nh, len(w), vr, nr, lr) for vr, nr, lr in refs)
        return 10.0 * s / len(refs)

    def score(self, candidates: Sequence[Text], index: Sequence[int] | None = None) -> np.ndarray:
        index = range(len(candidates)) if index is None else index
        return np.array([self.score_one(i, c) for i, c in zip(index, candidates)])


def cider_d(candidates: Sequence[Text], refs: Sequence[Sequence[Text]],
            stats: NGramStats) -> tuple[np.ndarray, float]:
    """Per-image CIDEr-D scores and their corpus mean."""
    if len(candidates) != len(refs):
        raise ValueError("need one candidate per image")
    scores = CiderD(refs, stats).score(candidates)
    return scores, float(scores.mean()) if len(scores) else 0.0


def bleu4(candidates: Sequence[Text], refs: Sequence[Sequence[Text]], smooth: bool = True) -> float:
    """Corpus BLEU-4 with closest-reference-length brevity penalty.

    With ``smooth``, an order n >= 2 whose clipped match count is zero gets
    +1 on both numerator and denominator.
    """
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    match = [0] * MAX_N
    total = [0] * MAX_N
    c_len = r_len = 0
    for cand, image_refs in zip(candidates, refs):
        cw = _words(cand)
        rws = [_words(r) for r in image_refs]
        c_len += len(cw)
        r_len += min((abs(len(r) - len(cw)), len(r)) for r in rws)[1]
        for n in range(1, MAX_N + 1):
            cc = ngrams(cw, n)
            max_ref: Counter = Counter()
            for r in rws:
                for g, k in ngrams(r, n).items():
                    if k > max_ref[g]:
                        max_ref[g] = k
            match[n - 1] += sum(min(k, max_ref[g]) for g, k in cc.items())
            total[n - 1] += max(len(cw) - n + 1, 0)
    log_p = 0.0
    for n in range(MAX_N):
        m, t = match[n], total[n]
        if smooth and n >= 1 and m == 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t) / MAX_N
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len) if c_len > 0 else 0.0
    return bp * math.exp(log_p)


def diversity_stats(captions: Sequence[str]) -> dict:
    lengths = [len(c.split()) for c in captions]
    return {
        "distinct": len(set(captions)),
        "avg_len": float(np.mean(lengths)) if lengths else 0.0,
    }
