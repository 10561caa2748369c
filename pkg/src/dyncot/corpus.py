"""Synthetic multi-modal keyphrase corpora, dataset IO, overlap statistics and resampling."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import image_token

log = logging.getLogger(__name__)


class GenerationError(ValueError):
    pass


class DatasetParseError(ValueError):
    pass


class OverlapUndefinedError(ValueError):
    pass


def normalize_kp(kp: str) -> str:
    return " ".join(kp.lower().split())


@dataclass
class Post:
    id: str
    text: str
    image_tokens: list[str]
    keyphrases: list[str]

    def __post_init__(self):
        seen: dict[str, None] = {}
        for kp in self.keyphrases:
            kp = normalize_kp(kp)
            if kp:
                seen.setdefault(kp, None)
        self.keyphrases = list(seen)
        if not self.keyphrases:
            raise ValueError(f"post {self.id!r} has no keyphrases")
        self.image_tokens = list(self.image_tokens)

    def to_json(self) -> dict:
        return {"id": self.id, "text": self.text, "image_tokens": self.image_tokens, "keyphrases": self.keyphrases}


@dataclass
class Dataset:
    split: str
    posts: list[Post] = field(default_factory=list)

    def __post_init__(self):
        ids = [p.id for p in self.posts]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})[:5]
            raise ValueError(f"duplicate post ids in split {self.split!r}: {dup}")

    def __len__(self) -> int:
        return len(self.posts)

    def __iter__(self):
        return iter(self.posts)

    def gold_set(self) -> set[str]:
        return {kp for p in self.posts for kp in p.keyphrases}

    def by_id(self) -> dict[str, Post]:
        return {p.id: p for p in self.posts}


# ---------------------------------------------------------------------------
# IO


def write_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in dataset.posts:
            fh.write(json.dumps(p.to_json(), ensure_ascii=False) + "\n")


def read_jsonl(path, split: str | None = None) -> Dataset:
    path = Path(path)
    posts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetParseError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in ("id", "text", "image_tokens", "keyphrases") if k not in obj]
            if missing:
                raise DatasetParseError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            if not isinstance(obj["keyphrases"], list) or not isinstance(obj["image_tokens"], list):
                raise DatasetParseError(f"{path}:{lineno}: keyphrases and image_tokens must be lists")
            try:
                posts.append(Post(str(obj["id"]), obj["text"], obj["image_tokens"], obj["keyphrases"]))
            except ValueError as e:
                raise DatasetParseError(f"{path}:{lineno}: {e}") from None
    try:
        return Dataset(split or path.stem, posts)
    except ValueError as e:
        raise DatasetParseError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# statistics


@dataclass
class DatasetStats:
    train_posts: int
    test_posts: int
    kp_per_post: float
    train_unique_kp: int
    test_unique_kp: int
    shared_kp: int
    overlap_rate: float

    @property
    def overlap_percent(self) -> str:
        return f"{100 * self.overlap_rate:.2f}%"

    def to_json(self) -> dict:
        d = asdict(self)
        d["overlap_percent"] = self.overlap_percent
        return d


def overlap_rate(shared: int, test_unique: int) -> float:
    if test_unique <= 0:
        raise OverlapUndefinedError("test gold keyphrase set is empty; overlap is undefined")
    return shared / test_unique


def compute_stats(train: Dataset, test: Dataset) -> DatasetStats:
    train_gold, test_gold = train.gold_set(), test.gold_set()
    shared = len(train_gold & test_gold)
    n_posts = len(train) + len(test)
    n_kp = sum(len(p.keyphrases) for p in train) + sum(len(p.keyphrases) for p in test)
    return DatasetStats(
        train_posts=len(train),
        test_posts=len(test),
        kp_per_post=n_kp / n_posts if n_posts else 0.0,
        train_unique_kp=len(train_gold),
        test_unique_kp=len(test_gold),
        shared_kp=shared,
        overlap_rate=overlap_rate(shared, len(test_gold)),
    )


def format_stats_table(rows: list[tuple[str, DatasetStats]]) -> str:
    header = ("Dataset", "# Train Posts", "# Test Posts", "# KP / Post", "Train |KP| ∩ Test |KP|")
    body = [
        (name, f"{s.train_posts:,}", f"{s.test_posts:,}", f"{s.kp_per_post:.2f}", s.overlap_percent)
        for name, s in rows
    ]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# slice labels


@dataclass(frozen=True)
class KeyphraseLabel:
    keyphrase: str
    present: bool
    unseen: bool

    @property
    def absent(self) -> bool:
        return not self.present


@dataclass(frozen=True)
class PostLabels:
    post_id: str
    seen: bool
    keyphrases: tuple[KeyphraseLabel, ...]

    @property
    def unseen(self) -> bool:
        return not self.seen

    @property
    def has_absent(self) -> bool:
        return any(k.absent for k in self.keyphrases)


SliceLabels = dict  # post_id -> PostLabels


def is_present(keyphrase: str, text: str) -> bool:
    """True if the keyphrase's words occur contiguously in the text's words."""
    kw = normalize_kp(keyphrase).split()
    tw = normalize_kp(text).split()
    n = len(kw)
    if n == 0:
        return False
    return any(tw[i:i + n] == kw for i in range(len(tw) - n + 1))


def label_slices(train: Dataset, test: Dataset) -> dict[str, PostLabels]:
    train_gold = train.gold_set()
    labels = {}
    for post in sorted(test.posts, key=lambda p: p.id):
        kls = tuple(KeyphraseLabel(kp, is_present(kp, post.text), kp not in train_gold) for kp in post.keyphrases)
        labels[post.id] = PostLabels(post.id, any(not k.unseen for k in kls), kls)
    return labels


# ---------------------------------------------------------------------------
# V2 resampling


@dataclass
class ResampleResult:
    train: Dataset
    test: Dataset
    moved_ids: list[str]
    removed_ids: list[str]
    overlap_before: float
    overlap_after: float


def resample_v2(train: Dataset, test: Dataset, target_overlap: float, seed: int = 0,
                tolerance: float = 0.02) -> ResampleResult:
    """Lower train/test keyphrase overlap.

    1. Train posts whose gold keyphrases all miss the original test gold set
       move to test.
    2. Test posts whose gold keyphrases are all seen in the new train set are
       removed in seeded random order until overlap <= target + tolerance or
       no such post remains.
    """
    if not 0.0 <= target_overlap <= 1.0:
        raise ValueError(f"target_overlap must lie in [0, 1], got {target_overlap}")
    test_gold = test.gold_set()
    moved = [p for p in train.posts if all(kp not in test_gold for kp in p.keyphrases)]
    moved_set = {p.id for p in moved}
    new_train = [p for p in train.posts if p.id not in moved_set]
    new_test = list(test.posts) + moved
    for p in moved:
        if p.id in test.by_id():
            raise ValueError(f"post id {p.id!r} exists in both splits")

    train_gold = {kp for p in new_train for kp in p.keyphrases}
    counts: dict[str, int] = {}
    for p in new_test:
        for kp in p.keyphrases:
            counts[kp] = counts.get(kp, 0) + 1
    unique = len(counts)
    shared = sum(1 for kp in counts if kp in train_gold)
    before = shared / unique if unique else 0.0

    candidates = sorted((p for p in new_test if all(kp in train_gold for kp in p.keyphrases)), key=lambda p: p.id)
    order = np.random.default_rng(seed).permutation(len(candidates))
    removed: list[str] = []
    limit = target_overlap + tolerance
    for j in order:
        if unique == 0 or shared / unique <= limit + 1e-12:
            break
        post = candidates[j]
        removed.append(post.id)
        for kp in post.keyphrases:
            counts[kp] -= 1
            if counts[kp] == 0:
                del counts[kp]
                unique -= 1
                shared -= 1
    removed_set = set(removed)
    final_test = [p for p in new_test if p.id not in removed_set]
    after = shared / unique if unique else 0.0
    log.info("resample_v2: moved %d train posts, removed %d test posts, overlap %.4f -> %.4f",
             len(moved), len(removed), before, after)
    return ResampleResult(Dataset(train.split, new_train), Dataset(test.split, final_test),
                          [p.id for p in moved], removed, before, after)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class CorpusSpec:
    n_train: int = 2000
    n_test: int = 400
    kp_vocab_size: int = 240
    unseen_fraction: float = 0.45
    absent_fraction: float = 0.3
    kp_per_post_mean: float = 1.1
    image_symbols: int = 32
    image_len: int = 4
    seed: int = 0
    train_exclusive_fraction: float = 0.0
    topic_bag_size: int = 4
    topic_words_per_post: int = 3
    filler_words_per_post: int = 2
    n_fillers: int = 40
    image_prefs: int = 2

    def validate(self) -> None:
        for name in ("unseen_fraction", "absent_fraction", "train_exclusive_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise GenerationError(f"{name} must lie in [0, 1], got {v}")
        for name in ("n_train", "n_test", "kp_vocab_size", "image_symbols", "image_len", "topic_bag_size"):
            if getattr(self, name) <= 0:
                raise GenerationError(f"{name} must be positive")
        if self.kp_per_post_mean < 1:
            raise GenerationError("kp_per_post_mean must be >= 1")
        if self.topic_words_per_post > self.topic_bag_size:
            raise GenerationError("topic_words_per_post exceeds topic_bag_size")
        if self.image_prefs > self.image_symbols:
            raise GenerationError("image_prefs exceeds image_symbols")


_ONSETS = "b d f g h j k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out: list[str] = []
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(k))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass
class Topic:
    keyphrase: str
    bag: list[str]
    images: list[int]


def _n_extra(rng, mean: float) -> int:
    return int(rng.poisson(mean - 1.0)) if mean > 1.0 else 0


def generate_synthetic(spec: CorpusSpec, reserved_words: set[str] | None = None) -> tuple[Dataset, Dataset]:
    """Build (train, test) whose test keyphrase types split into seen and unseen
    exactly per ``spec.unseen_fraction``.

    Every test keyphrase type is used by at least one test post, every train
    keyphrase type by at least one train post.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    V = spec.kp_vocab_size
    n_train_only = round(spec.train_exclusive_fraction * V)
    n_test_types = V - n_train_only
    n_unseen = round(spec.unseen_fraction * n_test_types)
    n_shared = n_test_types - n_unseen
    n_train_types = n_shared + n_train_only
    if n_train_types == 0:
        raise GenerationError("no keyphrase types left for the training split (unseen_fraction too high)")
    if n_test_types == 0:
        raise GenerationError("no keyphrase types left for the test split")
    if n_test_types > spec.n_test:
        raise GenerationError(f"{n_test_types} test keyphrase types need at least that many test posts, "
                              f"got n_test={spec.n_test}")
    if n_train_types > spec.n_train:
        raise GenerationError(f"{n_train_types} train keyphrase types need at least that many train posts, "
                              f"got n_train={spec.n_train}")

    taken = set(reserved_words or ())
    fillers = _pseudo_words(rng, spec.n_fillers, taken)
    topics = []
    for _ in range(V):
        n_words = 2 if rng.random() < 0.4 else 1
        kp = " ".join(_pseudo_words(rng, n_words, taken))
        bag = _pseudo_words(rng, spec.topic_bag_size, taken)
        images = sorted(rng.choice(spec.image_symbols, size=spec.image_prefs, replace=False).tolist())
        topics.append(Topic(kp, bag, images))
    shared = list(range(n_shared))
    unseen = list(range(n_shared, n_test_types))
    train_only = list(range(n_test_types, V))

    def pools_of(i: int) -> list[int]:
        if i < n_shared:
            return shared
        return unseen if i < n_test_types else train_only

    def make_post(pid: str, primary: int) -> Post:
        pool = pools_of(primary)
        extra = min(_n_extra(rng, spec.kp_per_post_mean), len(pool) - 1)
        chosen = [primary]
        if extra:
            others = [i for i in rng.choice(len(pool), size=extra + 1, replace=False) if pool[i] != primary][:extra]
            chosen += [pool[i] for i in others]
        units: list[list[str]] = []
        images: list[int] = []
        for t in chosen:
            topic = topics[t]
            words = rng.choice(topic.bag, size=spec.topic_words_per_post, replace=False).tolist()
            units.extend([w] for w in words)
            if rng.random() >= spec.absent_fraction:
                units.append(topic.keyphrase.split())
            images.extend(topic.images)
        units.extend([w] for w in rng.choice(fillers, size=spec.filler_words_per_post, replace=False).tolist())
        order = rng.permutation(len(units))
        text = " ".join(w for j in order for w in units[j])
        while len(images) < spec.image_len:
            images.append(int(rng.integers(spec.image_symbols)))
        sel = rng.permutation(len(images))[: spec.image_len]
        image_tokens = [image_token(images[j]) for j in sorted(sel)]
        return Post(pid, text, image_tokens, [topics[t].keyphrase for t in chosen])

    train_types = shared + train_only
    train_prim = list(rng.permutation(train_types)) + list(rng.choice(train_types, size=spec.n_train - n_train_types))
    test_types = shared + unseen
    test_prim = list(rng.permutation(test_types)) + list(rng.choice(test_types, size=spec.n_test - n_test_types))
    train_prim = [train_prim[j] for j in rng.permutation(len(train_prim))]
    test_prim = [test_prim[j] for j in rng.permutation(len(test_prim))]
    wt = max(4, len(str(max(spec.n_train, spec.n_test))))
    train = Dataset("train", [make_post(f"train-{i:0{wt}d}", int(t)) for i, t in enumerate(train_prim)])
    test = Dataset("test", [make_post(f"test-{i:0{wt}d}", int(t)) for i, t in enumerate(test_prim)])
    return train, test


def expected_overlap(spec: CorpusSpec) -> float:
    n_test_types = spec.kp_vocab_size - round(spec.train_exclusive_fraction * spec.kp_vocab_size)
    n_unseen = round(spec.unseen_fraction * n_test_types)
    return (n_test_types - n_unseen) / n_test_types if n_test_types else math.nan
