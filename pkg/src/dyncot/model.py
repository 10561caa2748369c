"""Word-level vocabulary and a tiny decoder-only transformer.

Checkpoint layout (``.npz``, uncompressed, loadable with ``allow_pickle=False``):

* ``__meta__``: uint8 array holding UTF-8 JSON with keys ``format``
  (``"dyncot-checkpoint/1"``), ``config`` (ModelConfig fields),
  ``vocab`` (id-ordered token list), ``n_image_symbols`` and ``params``
  (parameter names in canonical order).
* one array per parameter name, stored at its training dtype.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, BOS, EOS, SEP, UNK = "<pad>", "<bos>", "<eos>", "<sep>", "<unk>"
THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
SPECIALS = (PAD, BOS, EOS, SEP, UNK, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)

SPECIAL_RE = re.compile(r"(<(?:pad|bos|eos|sep|unk|/?think|/?answer|img:\d+)>)")
IMAGE_RE = re.compile(r"^<img:(\d+)>$")

PROMPT, IMAGE, RESPONSE = "prompt", "image", "response"


class VocabError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


def image_token(k: int) -> str:
    return f"<img:{k}>"


def split_words(text: str) -> list[str]:
    """Lowercase, pad special-token literals with spaces, split on whitespace."""
    return SPECIAL_RE.sub(r" \1 ", text.lower()).split()


def normalize_text(text: str) -> str:
    return " ".join(split_words(text))


class Vocabulary:
    """Bijective token <-> id map. Specials first, then image symbols, then words."""

    def __init__(self, tokens: list[str], n_image_symbols: int):
        if len(set(tokens)) != len(tokens):
            raise VocabError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.n_image_symbols = n_image_symbols
        self.index = {t: i for i, t in enumerate(self.tokens)}
        for s in SPECIALS:
            if s not in self.index:
                raise VocabError(f"missing special token {s}")

    @classmethod
    def build(cls, texts, n_image_symbols: int) -> "Vocabulary":
        words: set[str] = set()
        for text in texts:
            words.update(split_words(text))
        reserved = set(SPECIALS) | {image_token(k) for k in range(n_image_symbols)}
        extra = sorted(w for w in words if w not in reserved and not IMAGE_RE.match(w))
        tokens = list(SPECIALS) + [image_token(k) for k in range(n_image_symbols)] + extra
        return cls(tokens, n_image_symbols)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @property
    def image_ids(self) -> range:
        first = len(SPECIALS)
        return range(first, first + self.n_image_symbols)

    def is_image_id(self, i: int) -> bool:
        return i in self.image_ids


@dataclass
class TokenSequence:
    ids: list[int]
    roles: list[str]

    def __post_init__(self):
        if len(self.ids) != len(self.roles):
            raise ValueError("ids and roles differ in length")

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: "TokenSequence") -> "TokenSequence":
        return TokenSequence(self.ids + other.ids, self.roles + other.roles)


def tokenize(text: str, vocab: Vocabulary, role: str = PROMPT) -> TokenSequence:
    ids = [vocab.id(w) for w in split_words(text)]
    roles = [IMAGE if vocab.is_image_id(i) and role != RESPONSE else role for i in ids]
    return TokenSequence(ids, roles)


def detokenize(ids, vocab: Vocabulary) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise VocabError(f"token id {i} outside vocabulary of size {len(vocab)}")
        out.append(vocab.tokens[i])
    return " ".join(out)


@dataclass
class TrainingExample:
    """A tokenized prompt + target. ``mask[t]`` marks target (response) tokens."""

    post_id: str
    mode: str
    tokens: TokenSequence
    mask: list[bool]

    @property
    def prompt_len(self) -> int:
        return self.mask.index(True) if any(self.mask) else len(self.mask)

    @property
    def n_target(self) -> int:
        return int(sum(self.mask))

    def prompt(self) -> TokenSequence:
        n = self.prompt_len
        return TokenSequence(self.tokens.ids[:n], self.tokens.roles[:n])


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_len: int = 512

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


@dataclass
class TransformerParams:
    """Named learnable tensors. The output projection is tied to ``tok_emb``."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "TransformerParams":
        return TransformerParams(
            self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()}
        )


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_len, d)}
    for i in range(cfg.n_layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1.w": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.w": (d,), p + "ln2.b": (d,),
            p + "w1": (d, f), p + "b1": (f,), p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"lnf.w": (d,), "lnf.b": (d,)})
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> TransformerParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "w" and len(shape) == 1:
            arr = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, std, size=shape)
            if name.endswith(("wo", "w2")):
                arr /= np.sqrt(2 * cfg.n_layers)
        tensors[name] = Tensor(arr, requires_grad=True)
    return TransformerParams(cfg, tensors)


def _hidden(params: TransformerParams, ids) -> Tensor:
    cfg = params.config
    T = len(ids)
    if T > cfg.max_len:
        raise SequenceLengthError(f"sequence of {T} tokens exceeds max length {cfg.max_len}")
    if T == 0:
        raise SequenceLengthError("empty sequence")
    x = ad.embedding(params["tok_emb"], ids) + ad.slice_rows(params["pos_emb"], T)
    for i in range(cfg.n_layers):
        p = f"h{i}."
        h = ad.layer_norm(x, params[p + "ln1.w"], params[p + "ln1.b"])
        att = ad.causal_attention(h @ params[p + "wq"], h @ params[p + "wk"], h @ params[p + "wv"], cfg.n_heads)
        x = x + (att @ params[p + "wo"] + params[p + "bo"])
        h = ad.layer_norm(x, params[p + "ln2.w"], params[p + "ln2.b"])
        h = ad.gelu(h @ params[p + "w1"] + params[p + "b1"])
        x = x + (h @ params[p + "w2"] + params[p + "b2"])
    return ad.layer_norm(x, params["lnf.w"], params["lnf.b"])


def forward(params: TransformerParams, seq) -> Tensor:
    """Logits [T, V]; row t depends only on tokens 0..t."""
    ids = seq.ids if isinstance(seq, TokenSequence) else list(seq)
    h = _hidden(params, ids)
    return h @ ad.transpose(params["tok_emb"])


def sequence_loss(params: TransformerParams, example: TrainingExample) -> Tensor:
    """Mean next-token loss over the target (response) tokens only."""
    ids = example.tokens.ids
    logits = forward(params, ids[:-1])
    return ad.masked_cross_entropy(logits, ids[1:], example.mask[1:])


def greedy_decode(
    params: TransformerParams,
    prompt: TokenSequence,
    max_new: int,
    eos_id: int | None = None,
) -> TokenSequence:
    """Append argmax tokens until ``eos_id``, ``max_new`` or the context limit.

    ``np.argmax`` returns the first maximum, so ties go to the lowest id.
    """
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty")
    ids = list(prompt.ids)
    roles = list(prompt.roles)
    tok_t = params["tok_emb"].data.T
    with ad.no_grad():
        for _ in range(max_new):
            if len(ids) >= params.config.max_len:
                break
            h = _hidden(params, ids).data[-1]
            nxt = int(np.argmax(h @ tok_t))
            ids.append(nxt)
            roles.append(RESPONSE)
            if nxt == eos_id:
                break
    return TokenSequence(ids, roles)


CHECKPOINT_FORMAT = "dyncot-checkpoint/1"


def save_checkpoint(path, params: TransformerParams, vocab: Vocabulary) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(params.config),
        "vocab": vocab.tokens,
        "n_image_symbols": vocab.n_image_symbols,
        "params": params.names(),
    }
    blob = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=blob, **params.arrays())


def load_checkpoint(path) -> tuple[TransformerParams, Vocabulary]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
        arrays = {name: z[name] for name in meta["params"]}
    cfg = ModelConfig(**meta["config"])
    vocab = Vocabulary(meta["vocab"], meta["n_image_symbols"])
    tensors = {}
    for name, arr in arrays.items():
        t = Tensor(arr, requires_grad=True)
        t.data = arr  # keep stored dtype exactly
        tensors[name] = t
    return TransformerParams(cfg, tensors), vocab
