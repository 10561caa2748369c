"""Output parsing, F1@1 / F1@M, slice aggregation and rank averaging."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import Dataset, Post, PostLabels, normalize_kp
from .cotgen import build_prompt
from .model import EOS, SequenceLengthError, TransformerParams, Vocabulary, detokenize, greedy_decode

log = logging.getLogger(__name__)

SLICES = ("All", "Seen", "Unseen", "Absent")

_FULL = re.compile(r"\s*<think>(.*?)</think>\s*<answer>(.*?)</answer>\s*", re.DOTALL)
_ANSWER_ONLY = re.compile(r"\s*<answer>(.*?)</answer>\s*", re.DOTALL)


def parse_output(text: str) -> tuple[str | None, list[str]]:
    """Split model output into (think, keyphrases). Never raises.

    Accepts ``<think>..</think> <answer>..</answer>``, a lone answer block, or a
    bare keyphrase list. Keyphrases are separated by ``;``.
    """
    think = None
    m = _FULL.fullmatch(text)
    if m:
        think, payload = m.group(1).strip(), m.group(2)
    else:
        m = _ANSWER_ONLY.fullmatch(text)
        payload = m.group(1) if m else text
    kps = [normalize_kp(part) for part in payload.split(";")]
    return think, [k for k in kps if k]


def _check_gold(gold) -> set[str]:
    gold = set(gold)
    if not gold:
        raise ValueError("gold keyphrase set is empty")
    return gold


def f1_at_1(pred: Sequence[str], gold: Iterable[str]) -> float:
    """F1 of the top prediction alone; a hit scores 2 / (|gold| + 1)."""
    gold = _check_gold(gold)
    if not pred or pred[0] not in gold:
        return 0.0
    return 2.0 / (1 + len(gold))


def f1_at_m(pred: Sequence[str], gold: Iterable[str]) -> float:
    """F1 over all (deduplicated) predictions: 2|P∩G| / (|P| + |G|)."""
    gold = _check_gold(gold)
    p = set(pred)
    if not p:
        return 0.0
    hits = len(p & gold)
    return 2.0 * hits / (len(p) + len(gold))


@dataclass
class Prediction:
    post_id: str
    raw: str
    think: str | None
    keyphrases: list[str]
    f1_1: float
    f1_m: float
    seen: bool
    absent: bool
    words: int


@dataclass
class SliceMetrics:
    f1_at_1: float
    f1_at_m: float
    count: int


@dataclass
class MetricsReport:
    strategy: str
    slices: dict[str, SliceMetrics]
    mean_words: float
    evaluated: int
    excluded: int = 0
    cot_fraction: float = 0.0
    excluded_ids: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def score_output(post: Post, labels: PostLabels, raw: str) -> Prediction:
    think, kps = parse_output(raw)
    gold = set(post.keyphrases)
    return Prediction(post.id, raw, think, kps, f1_at_1(kps, gold), f1_at_m(kps, gold),
                      labels.seen, labels.has_absent, len(raw.split()))


def aggregate(predictions: list[Prediction], strategy: str = "", excluded_ids: Sequence[str] = ()) -> MetricsReport:
    preds = sorted(predictions, key=lambda p: p.post_id)
    groups = {
        "All": preds,
        "Seen": [p for p in preds if p.seen],
        "Unseen": [p for p in preds if not p.seen],
        "Absent": [p for p in preds if p.absent],
    }
    slices = {}
    for name, g in groups.items():
        n = len(g)
        slices[name] = SliceMetrics(
            f1_at_1=float(np.mean([p.f1_1 for p in g])) if n else 0.0,
            f1_at_m=float(np.mean([p.f1_m for p in g])) if n else 0.0,
            count=n,
        )
    return MetricsReport(
        strategy=strategy,
        slices=slices,
        mean_words=float(np.mean([p.words for p in preds])) if preds else 0.0,
        evaluated=len(preds),
        excluded=len(excluded_ids),
        cot_fraction=float(np.mean([p.think is not None for p in preds])) if preds else 0.0,
        excluded_ids=list(excluded_ids),
    )


def evaluate_outputs(
    test: Dataset,
    labels: dict[str, PostLabels],
    generate: Callable[[Post], str],
    strategy: str = "",
) -> tuple[MetricsReport, list[Prediction]]:
    """Score ``generate(post)`` for every test post. Posts that fail are excluded and counted."""
    preds, excluded = [], []
    for post in sorted(test.posts, key=lambda p: p.id):
        try:
            raw = generate(post)
        except (SequenceLengthError, ValueError) as e:
            log.warning("excluding post %s: %s", post.id, e)
            excluded.append(post.id)
            continue
        preds.append(score_output(post, labels[post.id], raw))
    return aggregate(preds, strategy, excluded), preds


def model_generator(params: TransformerParams, vocab: Vocabulary, max_new: int) -> Callable[[Post], str]:
    eos = vocab.id(EOS)

    def generate(post: Post) -> str:
        prompt = build_prompt(post, vocab)
        out = greedy_decode(params, prompt, max_new, eos_id=eos)
        new = out.ids[len(prompt):]
        if new and new[-1] == eos:
            new = new[:-1]
        return detokenize(new, vocab)

    return generate


def evaluate(
    params: TransformerParams,
    test: Dataset,
    labels: dict[str, PostLabels],
    vocab: Vocabulary,
    max_new: int = 160,
    strategy: str = "",
) -> tuple[MetricsReport, list[Prediction]]:
    return evaluate_outputs(test, labels, model_generator(params, vocab, max_new), strategy)


def write_predictions(predictions: list[Prediction], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(json.dumps(asdict(p), ensure_ascii=False) + "\n")


def read_predictions(path) -> list[Prediction]:
    with open(path, encoding="utf-8") as fh:
        return [Prediction(**json.loads(line)) for line in fh if line.strip()]


def format_report_table(reports: list[MetricsReport]) -> str:
    """Aligned text table: F1@1 and F1@M (%) per slice, plus mean output words."""
    header = ["Strategy"]
    for s in SLICES:
        header += [f"{s} F1@1", f"{s} F1@M"]
    header += ["Words", "N"]
    rows = [header]
    for r in reports:
        row = [r.strategy or "-"]
        for s in SLICES:
            m = r.slices[s]
            row += [f"{100 * m.f1_at_1:.2f}", f"{100 * m.f1_at_m:.2f}"]
        row += [f"{r.mean_words:.2f}", str(r.evaluated)]
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    out = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in rows]
    out.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(out)


class RankingError(ValueError):
    pass


def aggregate_rankings(ranks) -> list[float]:
    """Mean rank per model (column) over inputs (rows); each row must be a permutation of 1..N."""
    rows = [list(r) for r in ranks]
    if not rows:
        raise RankingError("no rankings given")
    n = len(rows[0])
    for i, row in enumerate(rows):
        if sorted(row) != list(range(1, n + 1)):
            raise RankingError(f"row {i} is not a permutation of 1..{n}: {row}")
    return [float(x) for x in np.mean(np.asarray(rows, dtype=float), axis=0)]
