"""``dyncot`` command-line entry point.

Every command accepts ``--config FILE`` with flat ``key = value`` lines; flags
given on the command line win. The fully resolved configuration is written
to the output directory as ``resolved_config.txt`` and can be fed back with
``--config`` to rerun.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import corpus, cotgen, evaluation, trainer
from .corpus import CorpusSpec, DatasetParseError, GenerationError, OverlapUndefinedError
from .model import SequenceLengthError, Vocabulary, load_checkpoint, save_checkpoint

log = logging.getLogger("dyncot")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _gamma(s) -> float:
    return float(s)  # accepts "inf"


# (name, type, default, help). Names use underscores; flags use dashes.
CORPUS_OPTS = [
    ("n_train", int, 2000, "training posts"),
    ("n_test", int, 400, "test posts"),
    ("kp_vocab_size", int, 240, "distinct keyphrases"),
    ("unseen_fraction", float, 0.45, "fraction of test keyphrase types never seen in train"),
    ("absent_fraction", float, 0.3, "probability a gold keyphrase is left out of the text"),
    ("kp_per_post", float, 1.1, "mean keyphrases per post"),
    ("image_symbols", int, 32, "size of the image-symbol alphabet"),
    ("image_len", int, 4, "image tokens per post"),
    ("train_exclusive_fraction", float, 0.0, "fraction of keyphrase types only used in train"),
]
SEED_OPT = [("seed", int, 0, "random seed")]
OUT_OPT = [("out", str, None, "output directory")]

TRAIN_OPTS = [
    ("train", str, None, "training posts (JSONL)"),
    ("cot_cache", str, None, "CoT cache (JSONL); required unless strategy=sft"),
    ("strategy", str, "sft", "sft | cot | multitask | dynamic"),
    ("gamma", _gamma, None, "dynamic threshold (use 'inf' for the always-CoT sentinel)"),
    ("gamma_mode", str, "fixed", "fixed | running_average"),
    ("probe_timing", str, "step", "step | epoch"),
    ("lr", float, 5e-5, "initial learning rate"),
    ("final_lr_fraction", float, 0.0, "final lr as a fraction of the initial lr"),
    ("epochs", int, 5, "training epochs"),
    ("batch_size", int, 1, "examples per optimizer step"),
    ("weight_decay", float, 0.01, "decoupled weight decay"),
    ("beta1", float, 0.9, "AdamW beta1"),
    ("beta2", float, 0.999, "AdamW beta2"),
    ("eps", float, 1e-8, "AdamW epsilon"),
    ("n_layers", int, 2, "decoder layers"),
    ("n_heads", int, 4, "attention heads"),
    ("d_model", int, 128, "embedding width"),
    ("d_ff", int, 512, "feed-forward width"),
    ("max_len", int, 512, "maximum sequence length"),
    ("checkpoint_every", int, 0, "also write a checkpoint every N steps (0 = off)"),
]

COMMANDS = {
    "gen": CORPUS_OPTS + SEED_OPT + OUT_OPT,
    "stats": [("train", str, None, "train JSONL"), ("test", str, None, "test JSONL"),
              ("name", str, "dataset", "row label"), ("out", str, None, "optional output directory")],
    "resample": [("train", str, None, "train JSONL"), ("test", str, None, "test JSONL"),
                 ("target_overlap", float, 0.45, "overlap to reach"), ("tolerance", float, 0.02, "slack above target")]
    + SEED_OPT + OUT_OPT,
    "cotgen": [("train", str, None, "posts to explain (JSONL)"), ("teacher", str, "oracle", "oracle | remote"),
               ("url", str, None, "endpoint URL (default $TEACHER_URL)"),
               ("model", str, None, "teacher model name (default $TEACHER_MODEL)"),
               ("timeout", float, 60.0, "request timeout in seconds"), ("retries", int, 3, "retry budget per post"),
               ("backoff", float, 1.0, "initial backoff in seconds"),
               ("concurrency", int, 4, "parallel in-flight requests"),
               ("errors", str, None, "sidecar for skipped posts (default OUT/cot_errors.jsonl)")]
    + SEED_OPT + OUT_OPT,
    "train": TRAIN_OPTS + SEED_OPT + OUT_OPT,
    "eval": [("checkpoint", str, None, "checkpoint file"), ("train", str, None, "train JSONL used for training"),
             ("test", str, None, "test JSONL"), ("max_new", int, 160, "max generated tokens"),
             ("strategy_name", str, "", "label for the report row")] + OUT_OPT,
}

REQUIRED = {
    "gen": ["out"], "stats": ["train", "test"], "resample": ["train", "test", "out"],
    "cotgen": ["train", "out"], "train": ["train", "out"], "eval": ["checkpoint", "train", "test", "out"],
}


SUMMARIES = {
    "gen": "generate a synthetic train/test corpus",
    "stats": "report keyphrase overlap statistics",
    "resample": "move or drop posts to lower train/test overlap",
    "cotgen": "produce chain-of-thought traces with a teacher",
    "train": "train a model under one supervision strategy",
    "eval": "decode the test set and score keyphrase F1",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dyncot", description="Keyphrase generation with dynamic chain-of-thought supervision.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name, help=SUMMARIES[name])
        sp.add_argument("--config", help="flat key = value config file")
        for key, typ, default, helptext in opts:
            sp.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None,
                            help=f"{helptext} (default: {default})")
    return p


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k in values:
            raise UsageError(f"{path}:{lineno}: key '{k}' given twice")
        values[k] = v
    return values


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults < config file < command-line flags."""
    opts = COMMANDS[command]
    file_vals = read_config_file(args.config) if args.config else {}
    known = {k for k, *_ in opts}
    unknown = sorted(set(file_vals) - known)
    if unknown:
        raise UsageError(f"unknown config key(s) for '{command}': {', '.join(unknown)}")
    cfg = {}
    explicit = set()
    for key, typ, default, _ in opts:
        cli_val = getattr(args, key)
        if cli_val is not None:
            cfg[key] = cli_val
            explicit.add(key)
        elif key in file_vals and file_vals[key] != "":
            try:
                cfg[key] = typ(file_vals[key])
            except ValueError as e:
                raise UsageError(f"config key '{key}': {e}") from None
            explicit.add(key)
        else:
            cfg[key] = default
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"'{command}' needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
    cfg["_explicit"] = explicit
    return cfg


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return "" if v is None else str(v)


def echo_config(command: str, cfg: dict, out_dir: Path) -> None:
    lines = [f"# dyncot {command}"] + [f"{k} = {_fmt(v)}" for k, v in cfg.items() if not k.startswith("_")]
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _need_file(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"file not found: {p}")
    return p


def _summary(**kw) -> None:
    print(json.dumps(kw, sort_keys=True))


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(cfg: dict) -> int:
    spec = CorpusSpec(
        n_train=cfg["n_train"], n_test=cfg["n_test"], kp_vocab_size=cfg["kp_vocab_size"],
        unseen_fraction=cfg["unseen_fraction"], absent_fraction=cfg["absent_fraction"],
        kp_per_post_mean=cfg["kp_per_post"], image_symbols=cfg["image_symbols"], image_len=cfg["image_len"],
        seed=cfg["seed"], train_exclusive_fraction=cfg["train_exclusive_fraction"],
    )
    train, test = corpus.generate_synthetic(spec)
    out = _out_dir(cfg)
    corpus.write_jsonl(train, out / "train.jsonl")
    corpus.write_jsonl(test, out / "test.jsonl")
    stats = corpus.compute_stats(train, test)
    _write_stats(stats, "synthetic", out)
    echo_config("gen", cfg, out)
    _summary(command="gen", train=len(train), test=len(test), overlap=stats.overlap_percent, out=str(out))
    return EXIT_OK


def _write_stats(stats, name: str, out: Path) -> None:
    (out / "stats.json").write_text(json.dumps(stats.to_json(), indent=2) + "\n", encoding="utf-8")
    (out / "stats.txt").write_text(corpus.format_stats_table([(name, stats)]) + "\n", encoding="utf-8")


def cmd_stats(cfg: dict) -> int:
    train = corpus.read_jsonl(_need_file(cfg["train"]), "train")
    test = corpus.read_jsonl(_need_file(cfg["test"]), "test")
    stats = corpus.compute_stats(train, test)
    print(corpus.format_stats_table([(cfg["name"], stats)]))
    if cfg["out"]:
        out = _out_dir(cfg)
        _write_stats(stats, cfg["name"], out)
        echo_config("stats", cfg, out)
    _summary(command="stats", overlap=stats.overlap_percent, train_unique_kp=stats.train_unique_kp,
             test_unique_kp=stats.test_unique_kp, shared_kp=stats.shared_kp)
    return EXIT_OK


def cmd_resample(cfg: dict) -> int:
    train = corpus.read_jsonl(_need_file(cfg["train"]), "train")
    test = corpus.read_jsonl(_need_file(cfg["test"]), "test")
    res = corpus.resample_v2(train, test, cfg["target_overlap"], seed=cfg["seed"], tolerance=cfg["tolerance"])
    out = _out_dir(cfg)
    corpus.write_jsonl(res.train, out / "train.jsonl")
    corpus.write_jsonl(res.test, out / "test.jsonl")
    with open(out / "resample_log.jsonl", "w", encoding="utf-8") as fh:
        for pid in res.moved_ids:
            fh.write(json.dumps({"post_id": pid, "action": "moved_to_test"}) + "\n")
        for pid in res.removed_ids:
            fh.write(json.dumps({"post_id": pid, "action": "removed_from_test"}) + "\n")
    _write_stats(corpus.compute_stats(res.train, res.test), "resampled", out)
    echo_config("resample", cfg, out)
    _summary(command="resample", moved=len(res.moved_ids), removed=len(res.removed_ids),
             overlap_before=f"{100 * res.overlap_before:.2f}%", overlap=f"{100 * res.overlap_after:.2f}%")
    return EXIT_OK


def cmd_cotgen(cfg: dict) -> int:
    posts = corpus.read_jsonl(_need_file(cfg["train"]), "train").posts
    out = _out_dir(cfg)
    endpoint = None
    if cfg["teacher"] == "remote":
        try:
            endpoint = cotgen.EndpointConfig.from_env(
                url=cfg["url"], model=cfg["model"], timeout=cfg["timeout"], retries=cfg["retries"],
                backoff_base=cfg["backoff"], concurrency=cfg["concurrency"])
        except ValueError as e:
            raise UsageError(str(e)) from None
    elif cfg["teacher"] != "oracle":
        raise UsageError(f"--teacher must be oracle or remote, got {cfg['teacher']!r}")
    records, skipped = cotgen.produce_cot(posts, cfg["teacher"], seed=cfg["seed"], endpoint=endpoint)
    cotgen.write_cot_cache(records, out / "cot.jsonl")
    sidecar = Path(cfg["errors"]) if cfg["errors"] else out / "cot_errors.jsonl"
    cotgen.write_sidecar(skipped, sidecar)
    echo_config("cotgen", cfg, out)
    _summary(command="cotgen", records=len(records), skipped=len(skipped), cache=str(out / "cot.jsonl"))
    return EXIT_OK


def train_config_from(cfg: dict) -> trainer.TrainConfig:
    explicit = cfg.get("_explicit", set())
    if cfg["gamma_mode"] == "running_average" and "gamma" in explicit and cfg["gamma"] is not None:
        raise UsageError("config conflict: 'gamma' and 'gamma_mode=running_average' are mutually exclusive")
    if cfg["strategy"] != "dynamic" and "gamma" in explicit and cfg["gamma"] is not None:
        raise UsageError(f"config conflict: 'gamma' is only used with 'strategy=dynamic' (got {cfg['strategy']})")
    kw = {k: cfg[k] for k in trainer.TrainConfig.field_names() if k in cfg}
    try:
        return trainer.TrainConfig(**kw)
    except trainer.ConfigurationError as e:
        raise UsageError(str(e)) from None


def cmd_train(cfg: dict) -> int:
    tcfg = train_config_from(cfg)
    train = corpus.read_jsonl(_need_file(cfg["train"]), "train")
    records = []
    cot = None
    if cfg["cot_cache"]:
        cot = cotgen.read_cot_cache(_need_file(cfg["cot_cache"]))
        records = [cot[k] for k in sorted(cot)]
    elif tcfg.strategy != "sft":
        raise UsageError(f"strategy {tcfg.strategy} needs --cot-cache")
    vocab = Vocabulary.build(cotgen.vocab_texts(train.posts, records), _image_symbols(train))
    out = _out_dir(cfg)

    def ckpt(step, params):
        save_checkpoint(out / f"checkpoint_step{step}.npz", params, vocab)

    params, records_log = trainer.run_training(tcfg, train.posts, cot, vocab, checkpoint_hook=ckpt)
    save_checkpoint(out / "checkpoint.npz", params, vocab)
    trainer.write_log(records_log, out / "train_log.jsonl")
    echo_config("train", cfg, out)
    modes = [r["chosen_mode"] for r in records_log]
    _summary(command="train", strategy=tcfg.strategy, steps=records_log[-1]["step"] if records_log else 0,
             final_loss=round(records_log[-1]["train_loss"], 6) if records_log else None,
             cot_steps=modes.count("cot"), plain_steps=modes.count("plain"),
             params=params.n_parameters(), checkpoint=str(out / "checkpoint.npz"))
    return EXIT_OK


def _image_symbols(dataset) -> int:
    top = -1
    for p in dataset.posts:
        for tok in p.image_tokens:
            if tok.startswith("<img:") and tok.endswith(">"):
                top = max(top, int(tok[5:-1]))
    return top + 1


def cmd_eval(cfg: dict) -> int:
    params, vocab = load_checkpoint(_need_file(cfg["checkpoint"]))
    train = corpus.read_jsonl(_need_file(cfg["train"]), "train")
    test = corpus.read_jsonl(_need_file(cfg["test"]), "test")
    labels = corpus.label_slices(train, test)
    report, preds = evaluation.evaluate(params, test, labels, vocab, cfg["max_new"], cfg["strategy_name"])
    out = _out_dir(cfg)
    evaluation.write_predictions(preds, out / "predictions.jsonl")
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    table = evaluation.format_report_table([report])
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    echo_config("eval", cfg, out)
    print(table)
    s = report.slices
    _summary(command="eval", all_f1_1=round(s["All"].f1_at_1, 6), seen_f1_1=round(s["Seen"].f1_at_1, 6),
             unseen_f1_1=round(s["Unseen"].f1_at_1, 6), absent_f1_1=round(s["Absent"].f1_at_1, 6),
             mean_words=round(report.mean_words, 4), excluded=report.excluded)
    return EXIT_OK


HANDLERS = {"gen": cmd_gen, "stats": cmd_stats, "resample": cmd_resample, "cotgen": cmd_cotgen,
            "train": cmd_train, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        return HANDLERS[args.command](cfg)
    except UsageError as e:
        print(f"dyncot {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetParseError, GenerationError, OverlapUndefinedError, FileNotFoundError,
            trainer.ConfigurationError, SequenceLengthError) as e:
        print(f"dyncot {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"dyncot {args.command}: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
