"""Command-line entry point.

    envcodegen synth      --out data.jsonl [--n 100] [--unique-names]
    envcodegen preprocess --train-file data.jsonl --out outdir
    envcodegen train      --train-file data.jsonl [--dev-file dev.jsonl] --checkpoint model.ckpt
    envcodegen predict    --checkpoint model.ckpt --test-file test.jsonl --out preds.txt
    envcodegen eval       --predictions preds.txt --test-file test.jsonl [--out report.json]
    envcodegen ablate     --train-file data.jsonl [--dev-file dev.jsonl] [--out table.txt]

Settings come from a ``key = value`` config file (``--config``) and are
overridden by flags.  Config keys are the run keys below plus every
ModelConfig field.  Errors print a single ``error: <kind>: <message>`` line
to stderr and exit with status 1 (2 for usage errors).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict

from . import grammar as G
from . import tensor as T
from .baselines import Seq2Prod, Seq2Seq, parse_failure_rate, retrieval_predict_corpus
from .corpus import (DEFAULT_THRESHOLDS, DatasetError, Vocabulary, build_vocab, corpus_statistics,
                     load_dataset, write_dataset)
from .inference import decode, exact_match_rate
from .metrics import ABLATION_ROWS, ablation_table, evaluate, read_predictions
from .model import ModelConfig, build_model, train
from .synthetic import generate_synthetic

log = logging.getLogger("envcodegen")

SYSTEMS = ("ours", "retrieval", "seq2seq", "seq2prod")
RUN_KEYS = {"grammar": str, "train_file": str, "dev_file": str, "test_file": str,
            "checkpoint": str, "out": str, "system": str, "seed": int, "beam": int,
            "predictions": str, "n": int, "min_count": int, "threshold_identifier": int,
            "threshold_type": int, "threshold_rule": int, "unique_names": bool}
# fields that fix parameter shapes or the architecture; must match a checkpoint
ARCH_KEYS = ("H", "decoder_sym_embed", "layers", "use_variables", "use_methods",
             "use_two_step_attention", "use_camel_encoding", "use_copy")
ABLATION_FLAGS = {"use_variables": "--no-variables", "use_methods": "--no-methods",
                  "use_two_step_attention": "--no-two-step-attention",
                  "use_camel_encoding": "--no-camel-encoding", "use_copy": "--no-copy"}


class CliError(Exception):
    kind = "error"


class ConfigError(CliError):
    kind = "config"


class MismatchError(CliError):
    kind = "mismatch"


class InputError(CliError):
    kind = "input"


# ---------------------------------------------------------------- config

def _model_field_types():
    hints = {"H": int, "decoder_sym_embed": int, "layers": int, "dropout_p": float,
             "beam_size": int, "max_rules": int, "max_tokens": int, "batch_size": int,
             "epochs": int, "lr": float, "lr_decay": float, "clip_norm": float, "seed": int}
    return {f: hints.get(f, bool) for f in ModelConfig.field_names()}


def _coerce(key, value, typ):
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    if typ is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if typ is float and key == "clip_norm" and text.lower() == "none":
        return None
    try:
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {text!r}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read config {path}: {e.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def resolve(file_values: dict, flag_values: dict) -> tuple[dict, ModelConfig, set]:
    """Merge config-file and flag values (flags win).

    Returns the run settings, the model config and the set of model keys set
    explicitly by the user.
    """
    mtypes = _model_field_types()
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    run = {"seed": 0, "system": "ours", "n": 100, "min_count": 1, "unique_names": False}
    model_kw = {}
    for key, value in merged.items():
        if key in RUN_KEYS:
            run[key] = _coerce(key, value, RUN_KEYS[key])
        elif key in mtypes:
            model_kw[key] = _coerce(key, value, mtypes[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if run["system"] not in SYSTEMS:
        raise ConfigError(f"system must be one of {', '.join(SYSTEMS)}")
    model_kw.setdefault("seed", run["seed"])
    if "beam" in run:
        model_kw["beam_size"] = run["beam"]
    for key in ("grammar", "train_file", "dev_file", "test_file", "predictions"):
        if key in run and not os.path.exists(run[key]):
            raise InputError(f"{key.replace('_', '-')} not found: {run[key]}")
    try:
        config = ModelConfig(**model_kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return run, config, set(model_kw)


def _grammar(run):
    if "grammar" in run:
        with open(run["grammar"], encoding="utf-8") as fh:
            return G.load_grammar(fh.read())
    return G.load_java_grammar()


def _require(run, *keys):
    for key in keys:
        if key not in run:
            raise ConfigError(f"--{key.replace('_', '-')} is required for this command")


def _thresholds(run):
    th = dict(DEFAULT_THRESHOLDS)
    for k in th:
        if f"threshold_{k}" in run:
            th[k] = run[f"threshold_{k}"]
    return th


def _load(path, g, stats=None):
    data = load_dataset(path, g, stats)
    if not data:
        raise InputError(f"{path}: no usable examples after filtering")
    return data


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# ---------------------------------------------------------------- checkpoints

def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _config_json(config: ModelConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True)


def save_model(path, system, model, config, vocab=None, train_file=None):
    """Checkpoint plus ``<path>.meta.json`` (config, tables and hashes)."""
    meta = {"system": system, "config": asdict(config), "config_digest": _digest(_config_json(config))}
    if vocab is not None:
        meta["vocab"] = json.loads(vocab.to_json())
        meta["vocab_digest"] = vocab.digest()
    if hasattr(model, "tables"):
        meta["tables"] = model.tables()
    if train_file is not None:
        meta["train_file"] = os.path.abspath(train_file)
    if model is not None:
        T.save_checkpoint(path, model.params)
    else:
        _write(path, "")
    _write(path + ".meta.json", json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_model(path, g, overrides: ModelConfig, explicit: set):
    meta_path = path + ".meta.json"
    if not os.path.exists(path) or not os.path.exists(meta_path):
        raise InputError(f"checkpoint not found: {path}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    config = ModelConfig(**meta["config"])
    if _digest(_config_json(config)) != meta["config_digest"]:
        raise MismatchError("checkpoint config hash does not match its metadata")
    for key in ARCH_KEYS:
        if key in explicit and getattr(overrides, key) != getattr(config, key):
            raise MismatchError(f"{key}={getattr(overrides, key)} conflicts with checkpoint "
                                f"value {getattr(config, key)}")
    # decoding settings may be changed at prediction time
    config = config.replace(**{k: getattr(overrides, k) for k in explicit
                               if k not in ARCH_KEYS and k != "seed"})
    vocab = None
    if "vocab" in meta:
        vocab = Vocabulary(**meta["vocab"])
        if vocab.digest() != meta["vocab_digest"]:
            raise MismatchError("checkpoint vocabulary hash does not match its metadata")
    system = meta["system"]
    if system == "retrieval":
        return system, None, config, meta
    if system == "ours":
        model = build_model(config, vocab, g)
    elif system == "seq2prod":
        model = Seq2Prod(config, vocab, g, tables=meta["tables"])
    else:
        model = Seq2Seq(config, tables=meta["tables"])
    try:
        arrays = T.load_checkpoint(path, model.shapes())
    except T.CheckpointError as e:
        raise MismatchError(str(e)) from None
    model.load_state_dict(arrays)
    return system, model, config, meta


# ---------------------------------------------------------------- commands

def cmd_synth(run, config):
    _require(run, "out")
    g = _grammar(run)
    data = generate_synthetic(run["n"], run["seed"], g, unique_names=run["unique_names"])
    write_dataset(run["out"], data)
    return f"wrote {len(data)} examples to {run['out']}"


def cmd_preprocess(run, config):
    _require(run, "train_file", "out")
    g = _grammar(run)
    stats = {}
    data = _load(run["train_file"], g, stats)
    vocab = build_vocab(data, g, _thresholds(run))
    os.makedirs(run["out"], exist_ok=True)
    summary = {"counts": {**stats, "kept": len(data)}, "thresholds": vocab.thresholds,
               "statistics": corpus_statistics(data, g),
               "vocab_sizes": {"identifier": len(vocab.identifier), "type": len(vocab.type),
                               "rule": len(vocab.rule), "nonterminal": len(vocab.nonterminal)}}
    _write(os.path.join(run["out"], "vocab.json"), vocab.to_json() + "\n")
    _write(os.path.join(run["out"], "stats.json"), json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return f"kept {len(data)} of {stats['read']} examples; vocabulary written to {run['out']}"


def _make_system(system, config, data, g, run):
    vocab = build_vocab(data, g, _thresholds(run)) if system in ("ours", "seq2prod") else None
    if system == "ours":
        return build_model(config, vocab, g), vocab
    if system == "seq2prod":
        return Seq2Prod(config, vocab, g, data, min_count=run["min_count"]), vocab
    return Seq2Seq(config, data, min_count=run["min_count"]), None


def cmd_train(run, config):
    _require(run, "train_file", "checkpoint")
    g = _grammar(run)
    data = _load(run["train_file"], g)
    dev = _load(run["dev_file"], g) if "dev_file" in run else None
    system = run["system"]
    if system == "retrieval":
        save_model(run["checkpoint"], system, None, config, train_file=run["train_file"])
        return "retrieval needs no training; wrote metadata pointing at the training file"
    model, vocab = _make_system(system, config, data, g, run)
    result = train(model, data, dev, config)
    if result.diverged:
        log.warning("training diverged; saving the last good parameters")
    save_model(run["checkpoint"], system, model, config, vocab)
    last = result.log[-1] if result.log else None
    return (f"trained {system} for {len(result.log)} epochs; final loss "
            f"{last.loss:.4f}" if last else f"trained {system}")


def _predict_tokens(system, model, config, test, run, meta, g):
    if system == "retrieval":
        train_file = run.get("train_file", meta.get("train_file"))
        if not train_file or not os.path.exists(train_file):
            raise InputError("retrieval needs --train-file")
        return retrieval_predict_corpus(test, _load(train_file, g), run["seed"])
    if system == "seq2seq":
        return [model.predict(ex, config.max_tokens).tokens for ex in test]
    return [decode(ex, model, config.beam_size).tokens for ex in test]


def cmd_predict(run, config, explicit):
    _require(run, "checkpoint", "test_file", "out")
    g = _grammar(run)
    system, model, config, meta = load_model(run["checkpoint"], g, config, explicit)
    test = load_dataset(run["test_file"], g)
    preds = _predict_tokens(system, model, config, test, run, meta, g)
    _write(run["out"], "".join(" ".join(p) + "\n" for p in preds))
    return f"wrote {len(preds)} predictions to {run['out']}"


def _references(path, g):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.lstrip().startswith("{"):
        return [ex.tokens for ex in load_dataset(path, g)]
    return read_predictions(path)


def cmd_eval(run, config):
    _require(run, "predictions", "test_file")
    g = _grammar(run)
    preds = read_predictions(run["predictions"])
    refs = _references(run["test_file"], g)
    if len(preds) != len(refs):
        raise InputError(f"{len(preds)} predictions for {len(refs)} references")
    if not preds:
        raise InputError("nothing to evaluate")
    report = evaluate(preds, refs, {"parse_failure_rate": parse_failure_rate(preds, g)})
    if "out" in run:
        _write(run["out"], report.to_json(per_example=True) + "\n")
    print(report.to_json())
    return report.table()


def run_ablation(data, dev, config, g, epochs=None, callback=None):
    """Train the full model and each single-toggle ablation from the same seed.

    Returns rows (label, train exact, dev exact, dev BLEU).
    """
    from .metrics import bleu
    rows = []
    vocab = build_vocab(data, g)
    for label, toggle in ABLATION_ROWS:
        cfg = config if toggle is None else config.replace(**{toggle: False})
        model = build_model(cfg, vocab, g)
        train(model, data, dev, cfg, epochs=epochs)
        tr = exact_match_rate(model, data, cfg.beam_size)
        dv = b = None
        if dev:
            preds = [decode(ex, model, cfg.beam_size).tokens for ex in dev]
            dv = 100.0 * sum(p == ex.tokens for p, ex in zip(preds, dev)) / len(dev)
            b = bleu(preds, [ex.tokens for ex in dev])
        rows.append((label, tr, dv, b))
        if callback:
            callback(rows[-1])
    return rows


def cmd_ablate(run, config):
    _require(run, "train_file")
    g = _grammar(run)
    data = _load(run["train_file"], g)
    dev = _load(run["dev_file"], g) if "dev_file" in run else None
    rows = run_ablation(data, dev, config, g)
    table = ablation_table(rows)
    if "out" in run:
        _write(run["out"], table + "\n")
    return table


# ---------------------------------------------------------------- argparse

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: usage: {message}\n")


def build_parser():
    p = _Parser(prog="envcodegen", description="Grammar-constrained code generation from "
                "documentation and class environments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("preprocess", "train", "predict", "eval", "ablate", "synth"):
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--grammar")
        s.add_argument("--train-file")
        s.add_argument("--dev-file")
        s.add_argument("--test-file")
        s.add_argument("--checkpoint")
        s.add_argument("--out")
        s.add_argument("--system", choices=SYSTEMS)
        s.add_argument("--seed", type=int)
        s.add_argument("--beam", type=int)
        s.add_argument("--predictions", help="predictions file for eval")
        s.add_argument("--n", type=int, help="number of synthetic examples")
        s.add_argument("--unique-names", action="store_true", default=None,
                       help="synthetic corpus whose member names occur once")
        for field_, flag in ABLATION_FLAGS.items():
            s.add_argument(flag, dest=field_, action="store_const", const=False)
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = read_config_file(args.config) if args.config else {}
        flags = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "set", "verbose")}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            flags[k.strip().replace("-", "_")] = v.strip()
        run, config, explicit = resolve(file_values, flags)
        cmd = args.command
        if cmd == "predict":
            msg = cmd_predict(run, config, explicit)
        else:
            msg = {"preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
                   "ablate": cmd_ablate, "synth": cmd_synth}[cmd](run, config)
    except CliError as e:
        print(f"error: {e.kind}: {e}", file=sys.stderr)
        return 1
    except (DatasetError, G.GrammarError, T.CheckpointError) as e:
        print(f"error: {type(e).__name__}: {str(e).splitlines()[0]}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 1
    if msg:
        print(msg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
