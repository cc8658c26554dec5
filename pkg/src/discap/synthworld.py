"""Synthetic scene world: latent scenes, image features, reference captions,
and the target/distractor evaluation pairs.

Every random draw is keyed on ``(seed, stream, scene_id)`` so output does not
depend on generation order or worker count.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CATEGORIES = ("cube", "ball", "cone", "cylinder", "ring", "box", "star", "pyramid")
PLURALS = ("cubes", "balls", "cones", "cylinders", "rings", "boxes", "stars", "pyramids")
COLORS = ("red", "blue", "green", "yellow", "purple", "orange")
COUNT_WORDS = ("a", "two", "three", "four")
CONTEXTS = ("on the table", "on the floor", "in the room")
CONTEXT_WEIGHTS = (0.5, 0.3, 0.2)
MAX_COUNT = 4
MAX_OBJECTS = 3
ONEHOT_DIM = len(CATEGORIES) + len(COLORS) + MAX_COUNT

# stream tags for per-scene rng derivation
_SCENE, _FEATURE, _CAPTION, _PROJECTION, _TWIN = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class SceneObject:
    category: int
    color: int
    count: int


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    scene_id: int = 0

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError("a scene holds 1 to 3 objects")
        cats = [o.category for o in self.objects]
        if len(set(cats)) != len(cats):
            raise ValueError("duplicate category in scene")
        for o in self.objects:
            if not (0 <= o.category < len(CATEGORIES) and 0 <= o.color < len(COLORS)
                    and 1 <= o.count <= MAX_COUNT):
                raise ValueError(f"invalid object {o}")

    def to_dict(self) -> dict:
        return {"objects": [asdict(o) for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict, scene_id: int = 0) -> "Scene":
        return cls(tuple(SceneObject(**o) for o in d["objects"]), scene_id)


@dataclass
class ImageFeature:
    global_: np.ndarray          # (D,)
    regions: np.ndarray          # (n_objects, D)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.global_)) and np.all(np.isfinite(self.regions))):
            raise ValueError("non-finite image feature")


@dataclass
class Record:
    scene_id: int
    split: str
    scene: Scene
    feature: ImageFeature
    refs: list[str]


@dataclass
class DatasetConfig:
    n_train: int = 2000
    n_val: int = 300
    n_test: int = 300
    D: int = 64
    noise_sigma: float = 0.05
    seed: int = 0
    mention_p: float = 0.9
    count_mention_p: float = 0.4
    twin_p: float = 0.05

    def validate(self):
        bad = [name for name in ("n_train", "n_val", "n_test", "D")
               if not isinstance(getattr(self, name), int) or getattr(self, name) < 1]
        if not self.noise_sigma >= 0:
            bad.append("noise_sigma")
        for name in ("mention_p", "count_mention_p", "twin_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                bad.append(name)
        if bad:
            raise ValueError("invalid dataset config field(s): " + ", ".join(bad))


@dataclass
class Dataset:
    config: DatasetConfig
    splits: dict[str, list[Record]] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.config.seed

    def split(self, name: str) -> list[Record]:
        return self.splits[name]

    def all_refs(self) -> list[str]:
        return [r for recs in self.splits.values() for rec in recs for r in rec.refs]


@dataclass(frozen=True)
class DistractorPair:
    target_id: int
    distractor_id: int
    feature_distance: float
    caption_iou: float


def scene_rng(seed: int, stream: int, scene_id: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, scene_id])


# number of valid scenes with n objects: C(8, n) * (6 * 4)^n
_N_WEIGHTS = np.array([math.comb(len(CATEGORIES), n) * (len(COLORS) * MAX_COUNT) ** n
                       for n in range(1, MAX_OBJECTS + 1)], dtype=float)


def gen_scene(rng: np.random.Generator, scene_id: int = 0) -> Scene:
    """Uniform draw over all valid scenes (so 3-object scenes dominate)."""
    n = int(rng.choice(np.arange(1, MAX_OBJECTS + 1), p=_N_WEIGHTS / _N_WEIGHTS.sum()))
    cats = rng.choice(len(CATEGORIES), size=n, replace=False)
    objs = tuple(SceneObject(int(c), int(rng.integers(len(COLORS))), int(rng.integers(1, MAX_COUNT + 1)))
                 for c in cats)
    return Scene(objs, scene_id)


def make_projection(seed: int, D: int) -> np.ndarray:
    return scene_rng(seed, _PROJECTION).standard_normal((D, ONEHOT_DIM))


def object_code(obj: SceneObject) -> np.ndarray:
    v = np.zeros(ONEHOT_DIM)
    v[obj.category] = 1.0
    v[len(CATEGORIES) + obj.color] = 1.0
    v[len(CATEGORIES) + len(COLORS) + obj.count - 1] = 1.0
    return v


def scene_features(scene: Scene, projection: np.ndarray, noise_sigma: float,
                   rng: np.random.Generator) -> ImageFeature:
    D = projection.shape[0]
    codes = np.stack([object_code(o) for o in scene.objects])
    regions = codes @ projection.T + noise_sigma * rng.standard_normal((len(scene.objects), D))
    global_ = regions.mean(axis=0) + noise_sigma * rng.standard_normal(D)
    return ImageFeature(global_, regions)


def _object_phrase(obj: SceneObject, rng: np.random.Generator, p_color: float, p_count: float,
                   full: bool) -> str:
    say_color = full or rng.random() < p_color
    say_count = full or rng.random() < p_count
    if obj.count == 1:
        words = ["a"]
    else:
        words = [COUNT_WORDS[obj.count - 1] if say_count else "some"]
    if say_color:
        words.append(COLORS[obj.color])
    words.append(CATEGORIES[obj.category] if obj.count == 1 else PLURALS[obj.category])
    return " ".join(words)


def reference_captions(scene: Scene, rng: np.random.Generator, k: int = 5,
                       mention_p: float = 0.9, count_mention_p: float = 0.4,
                       full: bool = False) -> list[str]:
    """Sample ``k`` captions; each mentions every object in shuffled order.

    A color word is kept with probability ``mention_p``; a count above one is
    spelled out with probability ``count_mention_p`` and is "some" otherwise.
    ``full`` forces every attribute and the canonical context phrase.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    out = []
    for _ in range(k):
        order = range(len(scene.objects)) if full else rng.permutation(len(scene.objects))
        phrases = [_object_phrase(scene.objects[i], rng, mention_p, count_mention_p, full) for i in order]
        ctx = CONTEXTS[0] if full else CONTEXTS[rng.choice(len(CONTEXTS), p=CONTEXT_WEIGHTS)]
        out.append(" and ".join(phrases) + " " + ctx)
    return out


def grammar_vocabulary() -> list[str]:
    words = set(CATEGORIES) | set(PLURALS) | set(COLORS) | set(COUNT_WORDS) | {"some", "and"}
    for c in CONTEXTS:
        words.update(c.split())
    return sorted(words)


def count_twin(scene: Scene, rng: np.random.Generator, scene_id: int) -> Optional[Scene]:
    """Copy of ``scene`` with one multi-count object given a different count
    above one, or None when no object has a count above one."""
    many = [i for i, o in enumerate(scene.objects) if o.count > 1]
    if not many:
        return None
    i = int(rng.choice(many))
    old = scene.objects[i]
    new_count = int(rng.choice([c for c in range(2, MAX_COUNT + 1) if c != old.count]))
    objs = list(scene.objects)
    objs[i] = SceneObject(old.category, old.color, new_count)
    return Scene(tuple(objs), scene_id)


def _next_scene(config: DatasetConfig, sid: int, recs: list) -> Scene:
    # with probability twin_p, a near-duplicate of an earlier scene in the same split
    rng = scene_rng(config.seed, _TWIN, sid)
    if recs and rng.random() < config.twin_p:
        twin = count_twin(recs[int(rng.integers(len(recs)))].scene, rng, sid)
        if twin is not None:
            return twin
    return gen_scene(scene_rng(config.seed, _SCENE, sid), sid)


def build_dataset(config: DatasetConfig | None = None) -> Dataset:
    """Sample every split. Most scenes are independent uniform draws; a
    ``twin_p`` fraction differ from an earlier scene of the same split only in
    the quantity of one object, the detail references usually leave vague."""
    config = config or DatasetConfig()
    config.validate()
    projection = make_projection(config.seed, config.D)
    ds = Dataset(config)
    seen: set[tuple] = set()
    sid = 0
    for split, n in (("train", config.n_train), ("val", config.n_val), ("test", config.n_test)):
        recs = []
        while len(recs) < n:
            scene = _next_scene(config, sid, recs)
            sid += 1
            key = tuple(sorted((o.category, o.color, o.count) for o in scene.objects))
            if key in seen:
                continue  # keep latent scenes disjoint across splits
            seen.add(key)
            feat = scene_features(scene, projection, config.noise_sigma,
                                  scene_rng(config.seed, _FEATURE, scene.scene_id))
            refs = reference_captions(scene, scene_rng(config.seed, _CAPTION, scene.scene_id),
                                      5, config.mention_p, config.count_mention_p)
            recs.append(Record(scene.scene_id, split, scene, feat, refs))
        ds.splits[split] = recs
    return ds


# -- serialization -----------------------------------------------------------

DATASET_FILE = "dataset.jsonl"
VOCAB_FILE = "vocab.json"
CONFIG_FILE = "config.json"


def _record_line(rec: Record) -> str:
    return json.dumps({
        "scene_id": rec.scene_id,
        "split": rec.split,
        "scene": rec.scene.to_dict(),
        "global": [float(x) for x in rec.feature.global_],
        "regions": [[float(x) for x in r] for r in rec.feature.regions],
        "refs": rec.refs,
    }, separators=(",", ":"))


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    from .textcore import build_vocab

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / DATASET_FILE
    with open(path, "w") as fh:
        for split in ("train", "val", "test"):
            for rec in ds.splits[split]:
                fh.write(_record_line(rec) + "\n")
    (out / CONFIG_FILE).write_text(json.dumps(asdict(ds.config), sort_keys=True, indent=1) + "\n")
    vocab = build_vocab(ds.all_refs(), 1)
    (out / VOCAB_FILE).write_text(vocab.to_json() + "\n")
    return path


def load_dataset(data_dir: str | Path) -> Dataset:
    d = Path(data_dir)
    path = d / DATASET_FILE
    if not path.exists():
        raise FileNotFoundError(f"no dataset at {path}")
    cfg = DatasetConfig(**json.loads((d / CONFIG_FILE).read_text()))
    ds = Dataset(cfg, {"train": [], "val": [], "test": []})
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            feat = ImageFeature(np.array(row["global"]), np.array(row["regions"]))
            rec = Record(row["scene_id"], row["split"], Scene.from_dict(row["scene"], row["scene_id"]),
                         feat, list(row["refs"]))
            ds.splits[rec.split].append(rec)
    return ds


def dataset_hash(data_dir: str | Path) -> str:
    h = hashlib.sha256()
    h.update((Path(data_dir) / DATASET_FILE).read_bytes())
    return h.hexdigest()[:16]


# -- distractor pairs ----------------------------------------------------------

def caption_iou(a: str, b: str) -> float:
    sa, sb = set(a.split()), set(b.split())
    union = sa | sb
    return len(sa & sb) / len(union) if union else 1.0


def build_distractor_pairs(split: Sequence[Record], baseline_captions: Sequence[str],
                           n_pairs: int) -> list[DistractorPair]:
    """Pair every image with its visual nearest neighbour, then keep the
    ``n_pairs`` pairs whose generated captions overlap the most.

    An image may appear in several pairs (as target of its own pair and as
    someone else's distractor).
    """
    n = len(split)
    if len(baseline_captions) != n:
        raise ValueError("need one baseline caption per image")
    if n_pairs > n:
        raise ValueError(f"n_pairs={n_pairs} exceeds split size {n}")
    if n < 2:
        raise ValueError("split too small for pairs")
    G = np.stack([r.feature.global_ for r in split])
    sq = (G * G).sum(1)
    dist2 = np.maximum(sq[:, None] + sq[None, :] - 2 * G @ G.T, 0.0)
    np.fill_diagonal(dist2, np.inf)
    nn = dist2.argmin(axis=1)
    cands = []
    for i in range(n):
        j = int(nn[i])
        d = float(np.linalg.norm(G[i] - G[j]))
        cands.append((-caption_iou(baseline_captions[i], baseline_captions[j]), d, i, j))
    cands.sort()
    return [DistractorPair(split[i].scene_id, split[j].scene_id, d, -neg_iou)
            for neg_iou, d, i, j in cands[:n_pairs]]


def save_pairs(pairs: Sequence[DistractorPair], path: str | Path, generator_id: str,
               split: str = "val", dataset_id: Optional[str] = None):
    with open(path, "w") as fh:
        fh.write(json.dumps({"generator_checkpoint": generator_id, "split": split,
                             "dataset_hash": dataset_id, "n_pairs": len(pairs)}) + "\n")
        for p in pairs:
            fh.write(json.dumps(asdict(p)) + "\n")


def load_pairs(path: str | Path) -> tuple[dict, list[DistractorPair]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        pairs = [DistractorPair(**json.loads(line)) for line in fh if line.strip()]
    return header, pairs
