"""CoT data production: teacher prompt, teacher backends, and training-example assembly."""
from __future__ import annotations

import json
import logging
import os
import re
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from typing import Callable, Iterable

import numpy as np
import requests

from .corpus import Post
from .model import (
    ANSWER_CLOSE, ANSWER_OPEN, BOS, EOS, RESPONSE, SEP, THINK_CLOSE, THINK_OPEN,
    SequenceLengthError, TokenSequence, TrainingExample, Vocabulary, tokenize,
)

log = logging.getLogger(__name__)

KP_DELIMITER = "; "
INSTRUCTION = "predict hashtags for this social media post"
ORACLE_TIMESTAMP = "1970-01-01T00:00:00+00:00"

PROMPT_TEMPLATE = (
    "[INST]<SYS>\n"
    "You are a helpful assistant. Analyze briefly why social media users would use specific hashtags "
    "\"Keyphrases\" for a post titled \"Post text\" with given image \"Image\".</SYS>\n"
    "<USER>\n"
    "\"Keyphrases\": {keyphrases}\n"
    "\"Post text\": {post_text}\n"
    "\"Image\": {image}\n"
    "</USER>[INST]"
)


@dataclass
class CoTRecord:
    post_id: str
    think: str
    answer_keyphrases: list[str]
    teacher: str
    created_at: str

    def __post_init__(self):
        if not self.think.strip():
            raise ValueError(f"empty think text for post {self.post_id!r}")


def render_prompt(post: Post) -> str:
    if not post.keyphrases:
        raise ValueError(f"post {post.id!r} has no keyphrases to explain")
    return PROMPT_TEMPLATE.format(
        keyphrases=", ".join(post.keyphrases),
        post_text=post.text,
        image=" ".join(post.image_tokens),
    )


_SPECIAL_LITERAL = re.compile(r"<\s*/?\s*(?:think|answer|sep|eos|bos|pad|unk|img:\d+)\s*>", re.IGNORECASE)


def sanitize(text: str) -> str:
    """Strip special-token literals and collapse whitespace."""
    return " ".join(_SPECIAL_LITERAL.sub(" ", text).split())


def assemble_response(think: str, keyphrases: Iterable[str]) -> str:
    return f"{THINK_OPEN}{think}{THINK_CLOSE} {ANSWER_OPEN}{KP_DELIMITER.join(keyphrases)}{ANSWER_CLOSE}"


# ---------------------------------------------------------------------------
# offline oracle teacher

_OPENERS = [
    "the post talks about {words}",
    "the text of this post focuses on {words}",
    "reading the caption we notice {words}",
]
_IMAGE_LINES = [
    "and the picture shows the visual motifs {images}",
    "while the attached image contains the motifs {images}",
]
_REASONS = [
    "users add {kp} because it captures the main theme of the post",
    "the tag {kp} fits since the content and the picture share that theme",
    "people would choose {kp} to reach others who follow this kind of content",
]
_SHORT_REASON = "{kp} also fits"
_CLOSERS = [
    "overall these hashtags help the post reach the right community",
    "in short the chosen tags connect the post with similar content",
]
_PADDING = "one idea appears in both the words and the visual content of the post"

TEMPLATE_WORDS = {
    w
    for s in _OPENERS + _IMAGE_LINES + _REASONS + [_SHORT_REASON] + _CLOSERS + [_PADDING, INSTRUCTION]
    for w in re.sub(r"\{\w+\}", " ", s).split()
} | {"and", "."}


def _seed_for(post_id: str, seed: int) -> int:
    return zlib.crc32(f"{seed}:{post_id}".encode("utf-8"))


def _join(words: list[str]) -> str:
    if len(words) <= 1:
        return " ".join(words)
    return " ".join(words[:-1]) + " and " + words[-1]


def oracle_generate(post: Post, seed: int = 0, max_words: int = 120, min_words: int = 30) -> str:
    """Deterministic stand-in teacher trace naming text words, image motifs and each keyphrase once."""
    rng = np.random.default_rng(_seed_for(post.id, seed))
    kp_words = {w for kp in post.keyphrases for w in kp.split()}
    salient: list[str] = []
    for w in post.text.lower().split():
        if w not in kp_words and w not in salient and w not in TEMPLATE_WORDS:
            salient.append(w)
    salient = salient[:4] or ["everyday life"]
    images: list[str] = []
    for tok in post.image_tokens:
        m = re.match(r"<img:(\d+)>", tok)
        name = f"img{m.group(1)}" if m else sanitize(tok)
        if name and name not in images:
            images.append(name)
    images = images[:3]

    head = [_OPENERS[rng.integers(len(_OPENERS))].format(words=_join(salient))]
    if images:
        head[0] += " " + _IMAGE_LINES[rng.integers(len(_IMAGE_LINES))].format(images=_join(images))
    closer = _CLOSERS[rng.integers(len(_CLOSERS))]
    long_reasons = [_REASONS[rng.integers(len(_REASONS))].format(kp=kp) for kp in post.keyphrases]
    short_reasons = [_SHORT_REASON.format(kp=kp) for kp in post.keyphrases]

    def render(reasons, pad):
        parts = head + reasons + ([_PADDING] if pad else []) + [closer]
        return " . ".join(parts) + " ."

    text = render(long_reasons, False)
    if len(text.split()) > max_words:
        text = render(short_reasons, False)
    if len(text.split()) < min_words:
        text = render(long_reasons, True)
    return text


# ---------------------------------------------------------------------------
# remote teacher


class TeacherError(Exception):
    reason = "error"


class TeacherHTTPError(TeacherError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status
        self.reason = f"http_{status}"


class TeacherTimeout(TeacherError):
    reason = "timeout"


class TeacherConnectionError(TeacherError):
    reason = "connection"


class TeacherParseError(TeacherError):
    reason = "malformed"


class TeacherExhausted(TeacherError):
    def __init__(self, last: TeacherError, attempts: int, delays: list[float]):
        super().__init__(f"gave up after {attempts} attempt(s): {last}")
        self.last = last
        self.attempts = attempts
        self.delays = delays
        self.reason = last.reason


@dataclass
class EndpointConfig:
    url: str
    token: str
    model: str
    timeout: float = 60.0
    retries: int = 3
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    concurrency: int = 4

    @classmethod
    def from_env(cls, **overrides) -> "EndpointConfig":
        env = {"url": os.environ.get("TEACHER_URL"), "token": os.environ.get("TEACHER_TOKEN"),
               "model": os.environ.get("TEACHER_MODEL")}
        env.update({k: v for k, v in overrides.items() if v is not None})
        missing = [k for k in ("url", "token", "model") if not env.get(k)]
        if missing:
            raise ValueError("teacher endpoint not configured: missing " + ", ".join(
                f"TEACHER_{k.upper()}" for k in missing))
        return cls(**env)


@dataclass
class TeacherRequest:
    prompt: str
    post_id: str
    retry_budget: int = 3
    timeout: float = 60.0


def _post_once(session: requests.Session, req: TeacherRequest, endpoint: EndpointConfig) -> str:
    payload = {"model": endpoint.model, "messages": [{"role": "user", "content": req.prompt}]}
    headers = {"Authorization": f"Bearer {endpoint.token}", "Content-Type": "application/json"}
    try:
        resp = session.post(endpoint.url, json=payload, headers=headers, timeout=req.timeout)
    except requests.Timeout as e:
        raise TeacherTimeout(str(e)) from None
    except requests.ConnectionError as e:
        raise TeacherConnectionError(str(e)) from None
    if resp.status_code != 200:
        raise TeacherHTTPError(resp.status_code, resp.text)
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as e:
        raise TeacherParseError(f"unexpected response body: {e!r}") from None
    if not isinstance(content, str):
        raise TeacherParseError("assistant content is not a string")
    return content


def _retryable(err: TeacherError) -> bool:
    if isinstance(err, TeacherHTTPError):
        return err.status >= 500 or err.status in (408, 429)
    return True


def remote_generate(
    req: TeacherRequest,
    endpoint: EndpointConfig,
    session: requests.Session | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Ask a chat-completions endpoint for a trace, retrying with exponential backoff.

    Raises TeacherExhausted once ``req.retry_budget`` retries are spent (or on a
    non-retryable error).
    """
    session = session or requests.Session()
    delays: list[float] = []
    attempt = 0
    while True:
        attempt += 1
        try:
            text = sanitize(_post_once(session, req, endpoint))
            if not text:
                raise TeacherParseError("empty assistant content")
            return text
        except TeacherError as err:
            if attempt > req.retry_budget or not _retryable(err):
                raise TeacherExhausted(err, attempt, delays) from None
            delay = min(endpoint.backoff_base * 2 ** (attempt - 1), endpoint.backoff_max)
            delays.append(delay)
            log.warning("teacher %s for post %s (attempt %d); retrying in %.3fs",
                        err.reason, req.post_id, attempt, delay)
            sleep(delay)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class SkippedPost:
    post_id: str
    reason: str
    attempts: int
    detail: str


def produce_cot(
    posts: list[Post],
    teacher: str = "oracle",
    seed: int = 0,
    endpoint: EndpointConfig | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[list[CoTRecord], list[SkippedPost]]:
    """One CoT record per post, ordered by post id. Remote failures are skipped, not raised."""
    posts = sorted(posts, key=lambda p: p.id)
    if teacher == "oracle":
        recs = [CoTRecord(p.id, oracle_generate(p, seed), list(p.keyphrases), "oracle", ORACLE_TIMESTAMP)
                for p in posts]
        return recs, []
    if teacher != "remote":
        raise ValueError(f"unknown teacher {teacher!r}")
    if endpoint is None:
        raise ValueError("remote teacher needs an endpoint configuration")

    def work(post: Post):
        req = TeacherRequest(render_prompt(post), post.id, endpoint.retries, endpoint.timeout)
        try:
            think = remote_generate(req, endpoint, sleep=sleep)
        except TeacherExhausted as e:
            return SkippedPost(post.id, e.reason, e.attempts, str(e.last))
        except Exception as e:  # the pipeline must survive any single post
            return SkippedPost(post.id, "error", 1, repr(e))
        stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        return CoTRecord(post.id, think, list(post.keyphrases), "remote", stamp)

    with ThreadPoolExecutor(max_workers=max(1, endpoint.concurrency)) as pool:
        results = list(pool.map(work, posts))
    records = [r for r in results if isinstance(r, CoTRecord)]
    skipped = [r for r in results if isinstance(r, SkippedPost)]
    for s in skipped:
        log.error("skipped post %s: %s", s.post_id, s.reason)
    return records, skipped


def write_cot_cache(records: list[CoTRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), ensure_ascii=False) + "\n")


def read_cot_cache(path) -> dict[str, CoTRecord]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = CoTRecord(**json.loads(line))
            except (ValueError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: bad CoT record ({e})") from None
            out[rec.post_id] = rec
    return out


def write_sidecar(skipped: list[SkippedPost], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in skipped:
            fh.write(json.dumps(asdict(s), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# training examples


def prompt_text(post: Post) -> str:
    return " ".join([BOS, INSTRUCTION, *post.image_tokens, post.text, SEP])


def target_text(post: Post, mode: str, cot: CoTRecord | None = None) -> str:
    if mode == "plain":
        return KP_DELIMITER.join(post.keyphrases)
    if mode == "cot":
        if cot is None:
            raise ValueError(f"cot mode needs a CoT record for post {post.id!r}")
        return assemble_response(cot.think, cot.answer_keyphrases)
    raise ValueError(f"unknown mode {mode!r}")


def build_prompt(post: Post, vocab: Vocabulary) -> TokenSequence:
    return tokenize(prompt_text(post), vocab)


def build_training_example(
    post: Post,
    mode: str,
    vocab: Vocabulary,
    cot: CoTRecord | None = None,
    max_len: int | None = None,
) -> TrainingExample:
    prompt = build_prompt(post, vocab)
    target = tokenize(target_text(post, mode, cot) + " " + EOS, vocab, role=RESPONSE)
    seq = prompt + target
    if max_len is not None and len(seq) - 1 > max_len:
        raise SequenceLengthError(
            f"post {post.id}: {mode} example has {len(seq)} tokens, model max length is {max_len}")
    return TrainingExample(post.id, mode, seq, [False] * len(prompt) + [True] * len(target))


def vocab_texts(posts: Iterable[Post], records: Iterable[CoTRecord] = ()) -> list[str]:
    """Everything the vocabulary must cover for these posts and traces."""
    texts = [INSTRUCTION]
    for p in posts:
        texts.append(p.text)
        texts.extend(p.keyphrases)
        texts.append(target_text(p, "plain"))
    for r in records:
        texts.append(assemble_response(r.think, r.answer_keyphrases))
    return texts
