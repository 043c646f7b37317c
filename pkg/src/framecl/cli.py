"""Command-line entry point: ``framecl <command> [options]``.

Every command resolves its settings as built-in defaults, then the named
profile (``train`` only), then ``--config FILE`` (YAML or JSON mapping of
option names), then explicit flags.  The resolved mapping is written to
``config.json`` in the output directory.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import yaml

from . import __version__
from .data import (
    DEFAULT_DIM,
    PRESET_LANGUAGES,
    ZERO_SHOT_LANGUAGES,
    BayesModel,
    LabelVocabulary,
    SynthConfig,
    featurize_split,
    load_embeddings,
    load_jsonl,
    synth_generate,
    write_jsonl,
)
from .errors import ConfigError, DataError, DomainError, FrameclError, UsageError
from .losses import ContrastiveConfig
from .metrics import evaluate, micro_f1
from .model import Checkpoint, ModelConfig, predict_feature_set
from .thresholds import ThresholdTable, apply_threshold, tune_table
from .train import PROFILES, NumericError, TrainConfig, train

log = logging.getLogger("framecl")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

# feature and model settings that go with each training profile
PROFILE_EXTRAS = {
    "plm-parity": {},
    "synthetic": {"dim": 4096, "d_h": 128},
}

DEFAULTS = {
    "synth": {
        "seed": 0,
        "languages": len(PRESET_LANGUAGES),
        "zero_shot": False,
        "noise": 0.1,
        "filler_rate": 0.25,
        "allow_empty": False,
    },
    "train": {
        "seed": 0,
        "data": None,
        "train": None,
        "dev": None,
        "vocab": None,
        "train_embeddings": None,
        "dev_embeddings": None,
        "profile": "plm-parity",
        "dim": DEFAULT_DIM,
        "d_h": 64,
        "d_p": 32,
        "view_dropout": 0.1,
        "single_input": False,
        "alpha": 0.5,
        "weight_fn": "identity",
        "temperature": 0.1,
        "denominator": "negatives_only",
        "batch_size": 4,
        "learning_rate": None,
        "epochs": 20,
        "patience": 10,
        "grid_step": 0.01,
        "allow_empty_labels": False,
    },
    "tune-thresholds": {
        "checkpoint": None,
        "dev": None,
        "vocab": None,
        "embeddings": None,
        "languages": None,
        "grid_step": 0.01,
    },
    "eval": {
        "checkpoint": None,
        "corpus": None,
        "thresholds": None,
        "vocab": None,
        "embeddings": None,
    },
    "predict": {
        "checkpoint": None,
        "corpus": None,
        "thresholds": None,
        "vocab": None,
        "embeddings": None,
    },
    "verify": {},
}


# ---------------------------------------------------------------------------
# argument parsing and config resolution
# ---------------------------------------------------------------------------


def _flag(p: argparse.ArgumentParser, name: str, **kw) -> None:
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS, **kw)


def _bool_flag(p: argparse.ArgumentParser, name: str, help: str) -> None:
    p.add_argument("--" + name.replace("_", "-"), dest=name, action="store_true", default=argparse.SUPPRESS, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="framecl", description="Multi-label contrastive frame classification.")
    parser.add_argument("--version", action="version", version=f"framecl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="YAML or JSON file of option values")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        if name != "verify":
            p.add_argument("--out", help="output directory (default: runs/<timestamp>-seed<seed>)")
        return p

    p = command("synth", "generate a synthetic multilingual corpus")
    _flag(p, "seed", type=int)
    _flag(p, "languages", type=int, help=f"use the first N of the {len(PRESET_LANGUAGES)} preset languages")
    _bool_flag(p, "zero_shot", "add test-only languages that have no training data")
    _flag(p, "noise", type=float, help="probability that a signature token comes from an absent label")
    _flag(p, "filler_rate", type=float)
    _bool_flag(p, "allow_empty", "allow documents with no labels")

    p = command("train", "train a model and tune thresholds on dev")
    _flag(p, "seed", type=int)
    _flag(p, "data", help="corpus directory with train.jsonl, dev.jsonl and vocab.txt")
    _flag(p, "train", help="training split (default <data>/train.jsonl)")
    _flag(p, "dev", help="dev split (default <data>/dev.jsonl)")
    _flag(p, "vocab", help="label vocabulary file (default <data>/vocab.txt if present)")
    _flag(p, "train_embeddings", help="precomputed embeddings for the training split")
    _flag(p, "dev_embeddings", help="precomputed embeddings for the dev split")
    _flag(p, "profile", choices=sorted(PROFILES))
    _flag(p, "dim", type=int, help="hashed feature dimension (power of two)")
    _flag(p, "d_h", type=int)
    _flag(p, "d_p", type=int)
    _flag(p, "view_dropout", type=float)
    _bool_flag(p, "single_input", "encode the whole article as one input")
    _flag(p, "alpha", type=float, help="weight of the cross-entropy term; 1.0 disables the contrastive term")
    _flag(p, "weight_fn", help="identity, constant, or comma-separated weights for distance 0,1,2,...")
    _flag(p, "temperature", type=float)
    _flag(p, "denominator", choices=["negatives_only", "all_others"])
    _flag(p, "batch_size", type=int)
    _flag(p, "learning_rate", type=float)
    _flag(p, "epochs", type=int)
    _flag(p, "patience", type=int, help="stop after this many epochs without a dev gain")
    _flag(p, "grid_step", type=float)
    _bool_flag(p, "allow_empty_labels", "accept examples without labels")

    p = command("tune-thresholds", "tune per-language thresholds on a dev split")
    _flag(p, "checkpoint")
    _flag(p, "dev")
    _flag(p, "vocab")
    _flag(p, "embeddings")
    _flag(p, "languages", help="comma-separated languages expected in dev; missing ones are skipped")
    _flag(p, "grid_step", type=float)

    for name, help in (("eval", "score a labelled corpus"), ("predict", "write predictions for a corpus")):
        p = command(name, help)
        _flag(p, "checkpoint")
        _flag(p, "corpus")
        _flag(p, "thresholds", help="threshold table (default: the one stored in the checkpoint)")
        _flag(p, "vocab")
        _flag(p, "embeddings")

    command("verify", "run the built-in correctness checks")
    return parser


def load_config_file(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping of option names to values")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then profile, then config file, then flags."""
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "log_level", "out")}
    from_file = load_config_file(args.config) if args.config else {}
    known = DEFAULTS[command]
    unknown = sorted(set(from_file) - set(known) - {"out"})
    if unknown:
        raise ConfigError(f"unknown option(s) for {command}: {unknown}")
    cfg = dict(known)
    if command == "train":
        profile = flags.get("profile", from_file.get("profile", known["profile"]))
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        cfg.update(PROFILE_EXTRAS.get(profile, {}))
        cfg.update({k: v for k, v in PROFILES[profile].items() if k in cfg})
    cfg.update({k: v for k, v in from_file.items() if k != "out"})
    cfg.update(flags)
    out = getattr(args, "out", None) or from_file.get("out")
    if command != "verify":
        cfg["out"] = str(out) if out else None
    return cfg


def _run_dir(cfg: dict) -> Path:
    out = cfg.get("out")
    if not out:
        out = Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg.get('seed', 0)}"
        cfg["out"] = str(out)
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to output directory {path}: {exc.strerror or exc}") from None
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _echo_config(out: Path, command: str, cfg: dict) -> None:
    _write_json(out / "config.json", {"command": command, "version": __version__, **cfg})


def _require(cfg: dict, *names: str) -> None:
    missing = [n for n in names if cfg.get(n) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    n = int(cfg["languages"])
    if not 1 <= n <= len(PRESET_LANGUAGES):
        raise ConfigError(f"--languages must be in 1..{len(PRESET_LANGUAGES)}, got {n}")
    langs = PRESET_LANGUAGES[:n] + (ZERO_SHOT_LANGUAGES if cfg["zero_shot"] else ())
    scfg = SynthConfig(
        languages=langs,
        noise=float(cfg["noise"]),
        filler_rate=float(cfg["filler_rate"]),
        allow_empty=bool(cfg["allow_empty"]),
        seed=int(cfg["seed"]),
    )
    out = _run_dir(cfg)
    corpus = synth_generate(scfg)
    for split, examples in corpus.splits().items():
        write_jsonl(out / f"{split}.jsonl", examples, corpus.vocab)
    corpus.vocab.save(out / "vocab.txt")
    _write_json(out / "manifest.json", corpus.manifest)
    _echo_config(out, "synth", cfg)
    bayes = BayesModel(corpus.manifest)
    for split, examples in corpus.splits().items():
        if examples:
            f1 = micro_f1([bayes.predict(ex) for ex in examples], [ex.labels for ex in examples])
            log.info("%s: %d examples, Bayes-optimal micro-F1 %.4f", split, len(examples), f1)
    print(out)
    return EXIT_OK


def _weight_spec(value):
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    value = str(value)
    if value in ("identity", "constant"):
        return value
    try:
        return tuple(float(v) for v in value.split(","))
    except ValueError:
        raise ConfigError(f"weight_fn must be identity, constant or a list of numbers, got {value!r}") from None


def _split_path(cfg: dict, key: str, filename: str) -> Path:
    if cfg.get(key):
        return Path(cfg[key])
    if cfg.get("data"):
        return Path(cfg["data"]) / filename
    raise UsageError(f"pass --{key} or --data")


def _load_vocab(cfg: dict, fallback: list[str] | None = None) -> LabelVocabulary:
    if cfg.get("vocab"):
        vocab = LabelVocabulary.load(cfg["vocab"])
    elif cfg.get("data") and (Path(cfg["data"]) / "vocab.txt").exists():
        vocab = LabelVocabulary.load(Path(cfg["data"]) / "vocab.txt")
    elif fallback is not None:
        return LabelVocabulary(tuple(fallback))
    else:
        vocab = LabelVocabulary.default()
    if fallback is not None and list(vocab.names) != list(fallback):
        raise ConfigError(f"vocabulary mismatch: corpus vocabulary {list(vocab.names)} != checkpoint labels {fallback}")
    return vocab


def _features(examples, embeddings, dim: int, external: bool = False):
    if embeddings:
        return load_embeddings(embeddings, examples)
    if external:
        raise UsageError("the checkpoint was trained on external embeddings; pass --embeddings")
    return featurize_split(examples, dim)


def cmd_train(cfg: dict) -> int:
    vocab = _load_vocab(cfg)
    train_path, dev_path = _split_path(cfg, "train", "train.jsonl"), _split_path(cfg, "dev", "dev.jsonl")
    allow_empty = bool(cfg["allow_empty_labels"])
    model_kw = dict(
        d_h=int(cfg["d_h"]),
        d_p=int(cfg["d_p"]),
        num_labels=len(vocab),
        view_dropout=float(cfg["view_dropout"]),
        single_input=bool(cfg["single_input"]),
        init_seed=int(cfg["seed"]),
    )
    con_cfg = ContrastiveConfig(
        temperature=float(cfg["temperature"]),
        weight_fn=_weight_spec(cfg["weight_fn"]),
        denominator_convention=cfg["denominator"],
    )
    train_cfg = TrainConfig.from_profile(
        cfg["profile"],
        batch_size=int(cfg["batch_size"]),
        alpha=float(cfg["alpha"]),
        epochs=int(cfg["epochs"]),
        seed=int(cfg["seed"]),
        early_stop_patience=int(cfg["patience"]),
        grid_step=float(cfg["grid_step"]),
        **({"learning_rate": float(cfg["learning_rate"])} if cfg["learning_rate"] is not None else {}),
    )
    cfg["learning_rate"] = train_cfg.learning_rate
    out = _run_dir(cfg)
    train_split = load_jsonl(train_path, vocab, allow_empty)
    dev_split = load_jsonl(dev_path, vocab, allow_empty)
    train_fs = _features(train_split, cfg["train_embeddings"], int(cfg["dim"]))
    dev_fs = _features(dev_split, cfg["dev_embeddings"], int(cfg["dim"]))
    if train_fs.dim != dev_fs.dim:
        raise DataError(f"train features have width {train_fs.dim}, dev features {dev_fs.dim}")
    model_cfg = ModelConfig(d_in=train_fs.dim, **model_kw)
    _echo_config(out, "train", cfg)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics:
        def on_epoch(rec):
            metrics.write(json.dumps({"type": "epoch", **asdict(rec)}, sort_keys=True) + "\n")
            metrics.flush()

        result = train(train_split, train_fs, dev_split, dev_fs, model_cfg, con_cfg, train_cfg,
                       labels=list(vocab.names), on_epoch=on_epoch)
        summary = result.report.records()[-1]
        metrics.write(json.dumps(summary, sort_keys=True) + "\n")
    result.checkpoint.save(out / "checkpoint.zip")
    result.checkpoint.thresholds.save(out / "thresholds.json")
    log.info("selected epoch %d, dev mean micro-F1 %.4f", result.report.selected_epoch,
             result.report.best_dev_mean_micro_f1)
    print(out)
    return EXIT_OK


def _load_checkpoint_and_corpus(cfg: dict, corpus_key: str):
    ckpt = Checkpoint.load(cfg["checkpoint"])
    vocab = _load_vocab(cfg, fallback=ckpt.labels)
    examples = load_jsonl(cfg[corpus_key], vocab, allow_empty_labels=True)
    external = ckpt.features.get("kind") == "external"
    fs = _features(examples, cfg.get("embeddings"), int(ckpt.features.get("dim", ckpt.model_config.d_in)), external)
    if fs.dim != ckpt.model_config.d_in:
        raise DataError(f"features have width {fs.dim}, the checkpoint expects {ckpt.model_config.d_in}")
    return ckpt, vocab, examples, fs


def cmd_tune_thresholds(cfg: dict) -> int:
    _require(cfg, "checkpoint", "dev")
    ckpt, _, dev, fs = _load_checkpoint_and_corpus(cfg, "dev")
    out = _run_dir(cfg)
    _echo_config(out, "tune-thresholds", cfg)
    inclusive = ckpt.thresholds.inclusive if ckpt.thresholds is not None else True
    expected = set()
    if cfg.get("languages"):
        expected = {x.strip() for x in str(cfg["languages"]).split(",") if x.strip()}
    present = {ex.language for ex in dev}
    skipped = sorted(expected - present)
    for lang in skipped:
        log.warning("language %s has no dev examples; skipped and left out of the zero-shot mean", lang)
    if not dev:
        raise DataError("dev split is empty")
    probs = predict_feature_set(fs, ckpt.params, ckpt.model_config)
    table = tune_table(probs, [ex.labels for ex in dev], [ex.language for ex in dev], float(cfg["grid_step"]),
                       inclusive)
    table.skipped = skipped
    table.save(out / "thresholds.json")
    ckpt.thresholds = table
    ckpt.save(out / "checkpoint.zip")
    for lang, theta in table.per_language.items():
        log.info("%s: threshold %.2f", lang, theta)
    log.info("zero-shot threshold %.2f", table.zero_shot)
    print(out)
    return EXIT_OK


def _table_for(cfg: dict, ckpt: Checkpoint) -> ThresholdTable:
    if cfg.get("thresholds"):
        return ThresholdTable.load(cfg["thresholds"])
    if ckpt.thresholds is None:
        raise UsageError("the checkpoint has no threshold table; run tune-thresholds or pass --thresholds")
    return ckpt.thresholds


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "checkpoint", "corpus")
    ckpt, _, examples, fs = _load_checkpoint_and_corpus(cfg, "corpus")
    table = _table_for(cfg, ckpt)
    out = _run_dir(cfg)
    _echo_config(out, "eval", cfg)
    report = evaluate(ckpt, examples, fs, table)
    report.save(out / "report.json")
    (out / "report.tsv").write_text(report.table(), encoding="utf-8")
    sys.stdout.write(report.table())
    print(out)
    return EXIT_OK


def cmd_predict(cfg: dict) -> int:
    _require(cfg, "checkpoint", "corpus")
    ckpt, vocab, examples, fs = _load_checkpoint_and_corpus(cfg, "corpus")
    table = _table_for(cfg, ckpt)
    out = _run_dir(cfg)
    _echo_config(out, "predict", cfg)
    probs = predict_feature_set(fs, ckpt.params, ckpt.model_config)
    with open(out / "predictions.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for ex, p in zip(examples, probs):
            theta, route = table.lookup(ex.language)
            labels = apply_threshold(p, theta, table.inclusive)[0]
            rec = {
                "id": ex.id,
                "language": ex.language,
                "labels": vocab.decode(labels),
                "probabilities": {name: float(v) for name, v in zip(vocab.names, p)},
                "threshold": theta,
                "route": route,
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    print(out)
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    from .verify import format_table, run_all

    results = run_all()
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + "; ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "tune-thresholds": cmd_tune_thresholds,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except (NumericError, DomainError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FrameclError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
