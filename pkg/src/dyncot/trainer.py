"""Training strategies: plain SFT, Fine-tune-CoT, multi-task mixing and dynamic CoT.

Dynamic CoT probes each sample's plain-target loss with the current
parameters and trains on the CoT target only when that loss is strictly
below the threshold. The threshold is fixed or the running mean of all
earlier probe losses.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .corpus import Post
from .cotgen import CoTRecord, build_training_example
from .model import (
    ModelConfig, TrainingExample, TransformerParams, Vocabulary, detokenize, init_params, sequence_loss,
)

log = logging.getLogger(__name__)

STRATEGIES = ("sft", "cot", "multitask", "dynamic")
GAMMA_MODES = ("fixed", "running_average")


class ConfigurationError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "sft"
    gamma: float | None = None
    gamma_mode: str = "fixed"
    probe_timing: str = "step"
    lr: float = 5e-5
    final_lr_fraction: float = 0.0
    epochs: int = 5
    seed: int = 0
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_len: int = 512
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.gamma_mode not in GAMMA_MODES:
            raise ConfigurationError(f"gamma_mode must be one of {GAMMA_MODES}, got {self.gamma_mode!r}")
        if self.probe_timing not in ("step", "epoch"):
            raise ConfigurationError(f"probe_timing must be 'step' or 'epoch', got {self.probe_timing!r}")
        if self.strategy == "dynamic" and self.gamma_mode == "fixed" and self.gamma is None:
            raise ConfigurationError("strategy=dynamic needs gamma, or gamma_mode=running_average")
        if self.gamma is not None and self.gamma < 0:
            raise ConfigurationError(f"gamma must be non-negative, got {self.gamma}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigurationError("epochs and batch_size must be positive")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.n_layers, self.n_heads, self.d_model, self.d_ff, self.max_len)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Cosine annealing from ``config.lr`` down to ``config.lr * final_lr_fraction``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    final = config.lr * config.final_lr_fraction
    if total_steps == 0:
        return config.lr
    return final + (config.lr - final) * (1 + math.cos(math.pi * step / total_steps)) / 2


@dataclass
class SupervisionChoice:
    mode: str
    probe_loss: float
    threshold: float | None


def select_target(probe: float, gamma: float | None, plain: TrainingExample, cot: TrainingExample
                  ) -> tuple[SupervisionChoice, TrainingExample]:
    """CoT target iff probe < gamma (strict). No threshold yet means plain."""
    if gamma is not None and gamma < 0:
        raise ValueError("gamma must be non-negative")
    if gamma is not None and probe < gamma:
        return SupervisionChoice("cot", probe, gamma), cot
    return SupervisionChoice("plain", probe, gamma), plain


def probe_loss(params: TransformerParams, plain_example: TrainingExample) -> float:
    """Plain-target loss under the current parameters; builds no graph."""
    with ad.no_grad():
        return float(sequence_loss(params, plain_example).data)


@dataclass
class TrainState:
    params: TransformerParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    probe_sum: float = 0.0
    probe_count: int = 0
    log: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: TransformerParams) -> "TrainState":
        return cls(params, {k: np.zeros_like(t.data) for k, t in params.tensors.items()},
                   {k: np.zeros_like(t.data) for k, t in params.tensors.items()})

    @property
    def running_mean(self) -> float | None:
        return self.probe_sum / self.probe_count if self.probe_count else None

    def record_probe(self, loss: float) -> None:
        self.probe_sum += loss
        self.probe_count += 1


def _dump_example(ex: TrainingExample, vocab: Vocabulary | None) -> str:
    text = detokenize(ex.tokens.ids, vocab) if vocab is not None else str(ex.tokens.ids)
    return json.dumps({"post_id": ex.post_id, "mode": ex.mode, "ids": ex.tokens.ids, "text": text})


def train_step(state: TrainState, examples: list[TrainingExample], lr: float, config: TrainConfig,
               vocab: Vocabulary | None = None) -> float:
    """One AdamW update on the mean loss of ``examples``; returns that loss."""
    params = state.params
    names = params.names()
    leaves = params.values()
    for t in leaves:
        t.grad = None
    total = 0.0
    for ex in examples:
        loss = sequence_loss(params, ex)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss {value} at step {state.step + 1}: {_dump_example(ex, vocab)}")
        total += value
        ad.backward(loss * (1.0 / len(examples)))
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, t in zip(names, leaves):
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if config.weight_decay and t.data.ndim >= 2:
            t.data *= 1 - lr * config.weight_decay
        t.data -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(t.data.dtype)
        t.grad = None
    return total / len(examples)


@dataclass
class PairedExamples:
    post_id: str
    plain: TrainingExample
    cot: TrainingExample | None


def build_pairs(posts: list[Post], cot: dict[str, CoTRecord] | None, vocab: Vocabulary, config: TrainConfig
                ) -> list[PairedExamples]:
    needs_cot = config.strategy != "sft"
    cot = cot or {}
    if needs_cot:
        missing = sorted(p.id for p in posts if p.id not in cot)
        if missing:
            shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
            raise ConfigurationError(f"strategy {config.strategy} needs CoT records; missing for {len(missing)} "
                                     f"post(s): {shown}")
    pairs = []
    for p in sorted(posts, key=lambda p: p.id):
        plain = build_training_example(p, "plain", vocab, max_len=config.max_len)
        c = build_training_example(p, "cot", vocab, cot[p.id], max_len=config.max_len) if p.id in cot else None
        pairs.append(PairedExamples(p.id, plain, c if needs_cot else None))
    return pairs


def _schedule(pairs: list[PairedExamples], config: TrainConfig) -> list[tuple[int, list[tuple[int, str]]]]:
    """[(epoch, [(pair index, unit kind)])] batches in delivery order.

    Unit kind is 'plain', 'cot' or 'route' (dynamic decides). Multi-task
    visits each post twice per epoch and stops at the same example budget as
    the other strategies.
    """
    n = len(pairs)
    budget = config.epochs * n
    units: list[tuple[int, int, str]] = []
    epoch = 0
    while len(units) < budget:
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        for i in order:
            if config.strategy == "sft":
                units.append((epoch, int(i), "plain"))
            elif config.strategy == "cot":
                units.append((epoch, int(i), "cot"))
            elif config.strategy == "dynamic":
                units.append((epoch, int(i), "route"))
            else:
                units.append((epoch, int(i), "plain"))
                units.append((epoch, int(i), "cot"))
        epoch += 1
    units = units[:budget]
    batches = []
    bs = config.batch_size
    start = 0
    while start < len(units):
        chunk = units[start:start + bs]
        # never let a batch straddle two epochs
        ep = chunk[0][0]
        chunk = [u for u in chunk if u[0] == ep]
        batches.append((ep, [(i, k) for _, i, k in chunk]))
        start += len(chunk)
    return batches


def run_training(
    config: TrainConfig,
    posts: list[Post],
    cot: dict[str, CoTRecord] | None,
    vocab: Vocabulary,
    params: TransformerParams | None = None,
    epoch_hook: Callable[[int, TransformerParams], None] | None = None,
    checkpoint_hook: Callable[[int, TransformerParams], None] | None = None,
) -> tuple[TransformerParams, list[dict]]:
    """Train with ``config.strategy``; returns (params, per-step log records)."""
    config.validate()
    pairs = build_pairs(posts, cot, vocab, config)
    if params is None:
        params = init_params(config.model_config(len(vocab)), seed=config.seed)
    state = TrainState.fresh(params)
    batches = _schedule(pairs, config)
    total = len(batches)
    gamma_inf = config.gamma is not None and math.isinf(config.gamma)
    cached: dict[int, float] = {}
    current_epoch = -1
    for b, (epoch, batch) in enumerate(batches):
        if epoch != current_epoch:
            if current_epoch >= 0 and epoch_hook is not None:
                epoch_hook(current_epoch, params)
            current_epoch = epoch
            if config.strategy == "dynamic" and config.probe_timing == "epoch":
                cached = {i: probe_loss(params, pairs[i].plain) for i in range(len(pairs))}
        lr = lr_at(b, total, config)
        chosen: list[TrainingExample] = []
        meta: list[dict] = []
        for i, kind in batch:
            pair = pairs[i]
            rec: dict = {"post_id": pair.post_id, "probe_loss": None, "threshold": None}
            if kind == "route":
                probe = cached[i] if config.probe_timing == "epoch" else probe_loss(params, pair.plain)
                threshold = config.gamma if config.gamma_mode == "fixed" else state.running_mean
                choice, ex = select_target(probe, threshold, pair.plain, pair.cot)
                state.record_probe(probe)
                rec.update(probe_loss=probe, threshold=None if threshold is None else
                           ("inf" if gamma_inf else threshold))
            else:
                ex = pair.plain if kind == "plain" else pair.cot
            rec["chosen_mode"] = ex.mode
            chosen.append(ex)
            meta.append(rec)
        loss = train_step(state, chosen, lr, config, vocab)
        for rec in meta:
            state.log.append({"step": state.step, "epoch": epoch, **rec, "train_loss": loss, "lr": lr})
        if checkpoint_hook is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            checkpoint_hook(state.step, params)
    if epoch_hook is not None and current_epoch >= 0:
        epoch_hook(current_epoch, params)
    return params, state.log


def threshold_value(rec: dict) -> float | None:
    t = rec.get("threshold")
    if t is None:
        return None
    return math.inf if t == "inf" else float(t)


def replay_switch(records: list[dict]) -> list[dict]:
    """Records whose chosen mode disagrees with probe < threshold. Empty means the log is consistent."""
    bad = []
    for rec in records:
        if rec.get("probe_loss") is None:
            continue
        t = threshold_value(rec)
        expect = "cot" if t is not None and rec["probe_loss"] < t else "plain"
        if rec["chosen_mode"] != expect:
            bad.append(rec)
    return bad


def routed_to_cot(params: TransformerParams, plain_examples: list[TrainingExample], gamma: float) -> set[str]:
    return {ex.post_id for ex in plain_examples if probe_loss(params, ex) < gamma}


def epoch_mean_losses(records: list[dict]) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for r in records:
        by_epoch.setdefault(r["epoch"], []).append(r["train_loss"])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def write_log(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_log(path) -> list[dict]:
    with open(Path(path), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
