"""Command-line entry point.

Every command accepts ``--config FILE`` holding flat ``key = value`` lines
(``#`` starts a comment). Flags override config-file values, which override
built-in defaults. Keys are the flag names with underscores; unknown keys
are rejected. Errors print one ``error: <kind>: <message>`` line to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from . import data_io
from .data_io import SynthSpec, encode_dataset, synth_generate
from .errors import ConfigError, CvlError
from .evaluation import (PredictionSet, ensemble_average, evaluate, load_predictions, write_predictions)
from .model import CvlModel, ModelConfig, load_checkpoint, predict
from .representation import Vocabulary, extract_keywords
from .training import TrainConfig, train

MODEL_KEYS = [f for f in dataclasses.fields(ModelConfig) if f.name != "vocab_size"]
TRAIN_KEYS = list(dataclasses.fields(TrainConfig))
SYNTH_KEYS = [f for f in dataclasses.fields(SynthSpec) if f.name != "n_samples"]

# (key, type, help); "path" keys must exist before work starts, "out" keys need an existing parent
INPUT_KEYS = {
    "gen-data": [("out", "outdir", "output directory"),
                 ("splits", str, "comma list of name:count, e.g. train:2000,val:500")],
    "extract-keywords": [("dataset", "path", "dataset JSON lines"), ("noun_lexicon", "path", "one noun per line"),
                         ("stopwords", "path", "one stopword per line"),
                         ("override", "path", "precomputed keyword file whose entries win"),
                         ("out", "out", "keyword file to write")],
    "train": [("train", "path", "training dataset"), ("val", "path", "validation dataset"),
              ("features", "paths", "comma list of feature files"), ("keywords", "paths", "comma list of keyword files"),
              ("noun_lexicon", "path", "noun lexicon for heuristic keywords"),
              ("stopwords", "path", "stopword list for heuristic keywords"),
              ("vocab_exclude", "path", "words to keep out of the vocabulary"),
              ("min_count", int, "minimum word count for the vocabulary"),
              ("checkpoint", "out", "checkpoint to write"), ("loss_trace", "out", "loss trace to write"),
              ("figure", "out", "loss curve image to write")],
    "predict": [("checkpoint", "path", "trained checkpoint"), ("dataset", "path", "dataset to score"),
                ("features", "paths", "comma list of feature files"), ("keywords", "paths", "comma list of keyword files"),
                ("noun_lexicon", "path", "noun lexicon"), ("stopwords", "path", "stopword list"),
                ("out", "out", "prediction CSV to write")],
    "eval": [("predictions", "path", "prediction CSV to score"), ("checkpoint", "path", "checkpoint to run"),
             ("dataset", "path", "labeled dataset"), ("features", "paths", "comma list of feature files"),
             ("keywords", "paths", "comma list of keyword files"), ("noun_lexicon", "path", "noun lexicon"),
             ("stopwords", "path", "stopword list"), ("threshold", float, "decision threshold"),
             ("figure", "out", "ROC curve image to write")],
    "ensemble": [("out", "out", "averaged prediction CSV to write")],
    "gradcheck": [("seeds", int, "random cases per op"), ("coords", int, "sampled coordinates per model parameter"),
                  ("seed", int, "seed for the model check")],
}

DEFAULTS = {
    "gen-data": {"splits": "train:2000,val:500"},
    "train": {"min_count": 1},
    "eval": {"threshold": 0.5},
    "gradcheck": {"seeds": 20, "coords": 4, "seed": 0},
}


def _fields_for(command: str) -> list[tuple[str, object, str]]:
    keys = list(INPUT_KEYS[command])
    if command == "train":
        keys += [(f.name, f.type, f"model setting (default {f.default})") for f in MODEL_KEYS]
        keys += [(f.name, f.type, f"training setting (default {f.default})") for f in TRAIN_KEYS]
    if command == "gen-data":
        keys += [(f.name, f.type, f"synthetic data setting (default {f.default})") for f in SYNTH_KEYS]
    return keys


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _converter(kind):
    if kind in ("bool", bool):
        return _parse_bool
    if kind in ("int", int):
        return int
    if kind in ("float", float):
        return float
    return str


def read_config_file(path) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvlnet", description="Complementary visual-linguistic meme classifier.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "write synthetic XOR benchmark splits",
        "extract-keywords": "write a keyword file from a dataset and lexicons",
        "train": "train a model and write a checkpoint and loss trace",
        "predict": "write a prediction CSV for a dataset",
        "eval": "print accuracy and AUROC for predictions or a checkpoint",
        "ensemble": "average several prediction CSVs",
        "gradcheck": "run the finite-difference gradient suite",
    }
    for command, text in helps.items():
        p = sub.add_parser(command, help=text, description=text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="flat key = value config file")
        for key, kind, help_text in _fields_for(command):
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, help=help_text, metavar=key.upper())
        if command == "ensemble":
            p.add_argument("inputs", nargs="+", help="prediction CSVs to average")
    return parser


def resolve(command: str, args: argparse.Namespace) -> tuple[dict, set[str]]:
    """Merge defaults, config file and flags; convert types and validate paths."""
    fields = {key: kind for key, kind, _ in _fields_for(command)}
    merged: dict[str, object] = dict(DEFAULTS.get(command, {}))
    explicit: set[str] = set()
    layers = []
    if getattr(args, "config", None):
        layers.append(read_config_file(args.config))
    layers.append({k: v for k, v in vars(args).items() if k in fields})
    for layer in layers:
        for key, raw in layer.items():
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} for {command}")
            kind = fields[key]
            try:
                merged[key] = _converter(kind)(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
            explicit.add(key)
    for key, kind in fields.items():
        if key not in merged:
            continue
        if kind == "path" and not Path(str(merged[key])).is_file():
            raise ConfigError(f"{key}: no such file {merged[key]}")
        if kind == "paths":
            for item in str(merged[key]).split(","):
                if not Path(item).is_file():
                    raise ConfigError(f"{key}: no such file {item}")
        if kind == "out" and not Path(str(merged[key])).resolve().parent.is_dir():
            raise ConfigError(f"{key}: directory of {merged[key]} does not exist")
    return merged, explicit


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


def _merged_features(paths: str) -> dict:
    out = {}
    for p in paths.split(","):
        out.update(data_io.load_features(p))
    return out


def _merged_keywords(cfg: dict):
    if "keywords" not in cfg:
        return None
    out = {}
    for p in str(cfg["keywords"]).split(","):
        out.update(data_io.load_keywords(p))
    return out


def _lexicons(cfg: dict):
    nouns = data_io.load_lexicon(cfg["noun_lexicon"]) if "noun_lexicon" in cfg else None
    stops = data_io.load_lexicon(cfg["stopwords"]) if "stopwords" in cfg else set()
    return nouns, stops


def _encode(records, cfg, model_cfg: ModelConfig, vocab: Vocabulary, features, keywords):
    nouns, stops = _lexicons(cfg)
    return encode_dataset(records, features, vocab, model_cfg.max_len, model_cfg.max_rois, model_cfg.visual_dim,
                          keywords, nouns, stops)


def cmd_gen_data(cfg: dict, explicit: set[str]) -> int:
    _require(cfg, "out")
    splits = []
    for part in str(cfg["splits"]).split(","):
        name, _, count = part.partition(":")
        if not name or not count.isdigit():
            raise ConfigError(f"bad split {part!r}; expected name:count")
        splits.append((name, int(count)))
    synth_args = {f.name: cfg[f.name] for f in SYNTH_KEYS if f.name in cfg}
    spec = SynthSpec(n_samples=sum(c for _, c in splits), **synth_args)
    data = synth_generate(spec)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    start = 0
    for name, count in splits:
        part = data.subset(start, start + count)
        start += count
        data_io.write_dataset(out / f"{name}.jsonl", part.records)
        data_io.write_features(out / f"{name}.feat", part.features, spec.visual_dim, spec.n_rois)
        data_io.write_keywords(out / f"{name}.keywords.jsonl", part.keywords)
        print(f"wrote,{name},{count}")
    if data.hidden_words:
        (out / "vocab_exclude.txt").write_text("".join(w + "\n" for w in data.hidden_words), encoding="utf-8")
    return 0


def cmd_extract_keywords(cfg: dict, explicit: set[str]) -> int:
    _require(cfg, "dataset", "noun_lexicon", "out")
    records = data_io.load_dataset(cfg["dataset"])
    nouns, stops = _lexicons(cfg)
    override = data_io.load_keywords(cfg["override"]) if "override" in cfg else None
    sets = [extract_keywords(r.text, nouns, stops, r.id, override) for r in records]
    data_io.write_keywords(cfg["out"], sets)
    print(f"wrote,{len(sets)}")
    return 0


def cmd_train(cfg: dict, explicit: set[str]) -> int:
    _require(cfg, "train", "features", "checkpoint")
    records = data_io.load_dataset(cfg["train"])
    features = _merged_features(cfg["features"])
    keywords = _merged_keywords(cfg)
    exclude = data_io.load_lexicon(cfg["vocab_exclude"]) if "vocab_exclude" in cfg else ()
    vocab = Vocabulary.build((r.text for r in records), exclude=exclude, min_count=cfg["min_count"])
    model_args = {f.name: cfg[f.name] for f in MODEL_KEYS if f.name in cfg}
    if "visual_dim" not in explicit and features:
        model_args["visual_dim"] = next(iter(features.values())).contextual.shape[0]
    model_cfg = ModelConfig(vocab_size=len(vocab), **model_args)
    train_cfg = TrainConfig(**{f.name: cfg[f.name] for f in TRAIN_KEYS if f.name in cfg})
    data = _encode(records, cfg, model_cfg, vocab, features, keywords)
    val = None
    if "val" in cfg:
        val = _encode(data_io.load_dataset(cfg["val"]), cfg, model_cfg, vocab, features, keywords)
    model = CvlModel(model_cfg, seed=train_cfg.seed, vocab=vocab)
    trace = open(cfg["loss_trace"], "w", encoding="utf-8") if "loss_trace" in cfg else None

    def log(line: str) -> None:
        print(line)
        if trace is not None:
            trace.write(line + "\n")
            trace.flush()

    try:
        result = train(model, data, train_cfg, val=val, on_log=log, checkpoint_path=cfg["checkpoint"])
    finally:
        if trace is not None:
            trace.close()
    for step, report in result.val_history:
        auroc = "undefined" if report.auroc is None else repr(report.auroc)
        print(f"val,{step},accuracy,{report.accuracy!r},auroc,{auroc}")
    if "figure" in cfg:
        from .plotting import plot_loss_trace

        plot_loss_trace(result.losses, cfg["figure"], result.val_history)
    return 0


def _model_predictions(cfg: dict) -> PredictionSet:
    _require(cfg, "checkpoint", "dataset", "features")
    model = load_checkpoint(cfg["checkpoint"])
    if model.vocab is None:
        raise ConfigError("checkpoint carries no vocabulary")
    records = data_io.load_dataset(cfg["dataset"])
    batch = _encode(records, cfg, model.config, model.vocab, _merged_features(cfg["features"]),
                    _merged_keywords(cfg))
    return PredictionSet.from_batch(batch, predict(batch, model))


def cmd_predict(cfg: dict, explicit: set[str]) -> int:
    _require(cfg, "out")
    preds = _model_predictions(cfg)
    write_predictions(cfg["out"], preds)
    print(f"wrote,{len(preds)}")
    return 0


def cmd_eval(cfg: dict, explicit: set[str]) -> int:
    preds = load_predictions(cfg["predictions"]) if "predictions" in cfg else _model_predictions(cfg)
    report = evaluate(preds, cfg["threshold"])
    print("metric,value")
    for key, value in report.rows():
        print(f"{key},{value}")
    if "figure" in cfg:
        if report.auroc is None:
            print("figure,skipped (single class)")
        else:
            from .plotting import plot_roc

            plot_roc(preds, cfg["figure"], auroc=report.auroc)
    return 0


def cmd_ensemble(cfg: dict, explicit: set[str], inputs: list[str]) -> int:
    _require(cfg, "out")
    for p in inputs:
        if not Path(p).is_file():
            raise ConfigError(f"inputs: no such file {p}")
    merged = ensemble_average([load_predictions(p) for p in inputs])
    write_predictions(cfg["out"], merged)
    print(f"wrote,{len(merged)},members,{len(inputs)}")
    return 0


def cmd_gradcheck(cfg: dict, explicit: set[str]) -> int:
    from .gradsuite import TOLERANCE, check_model, check_ops

    start = time.perf_counter()
    results = check_ops(range(cfg["seeds"])) + [check_model(cfg["coords"], seed=cfg["seed"])]
    print("check,max_rel_error,norm_rel_error,status")
    for r in results:
        print(f"{r.name},{r.max_rel_error:.3e},{r.norm_rel_error:.3e},{'pass' if r.passed else 'FAIL'}")
    worst = max(r.max_rel_error for r in results)
    print(f"max_relative_error,{worst:.3e}")
    print(f"seconds,{time.perf_counter() - start:.1f}")
    if worst > TOLERANCE:
        print(f"error: gradcheck: max relative error {worst:.3e} exceeds {TOLERANCE:g}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "extract-keywords": cmd_extract_keywords,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, explicit = resolve(args.command, args)
        if args.command == "ensemble":
            return cmd_ensemble(cfg, explicit, args.inputs)
        return COMMANDS[args.command](cfg, explicit)
    except CvlError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 1
    except (IndexError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
