"""Command-line entry point: ``hoicrf {gen,train,eval,predict,experiment}``.

Exit codes: 0 success, 2 bad config or input file, 3 I/O failure,
4 non-finite training loss, 5 unsupported checkpoint version.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import typing
from dataclasses import MISSING, asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import numerics as nx
from .pipeline import (
    DESK_PRESET,
    MODEL_VARIANTS,
    VARIANT_HEADS,
    ConstantPredictor,
    TrainConfig,
    TrainingDiverged,
    baseline_most_frequent,
    evaluate,
    evaluate_baseline,
    run_experiment,
    train,
)
from .sequence_model import encode, potentials
from .storage import (
    MANIFEST_FILE,
    Checkpoint,
    SchemaError,
    VersionError,
    load_checkpoint,
    parse_frames,
    read_corpus,
    save_checkpoint,
    sha256_file,
    write_corpus,
)
from .structured import (
    DEFAULT_VOCAB,
    SLOTS,
    ConfigError,
    EventTuple,
    SlotVocabulary,
    is_valid,
    predict,
    render,
)
from .synthgen import CorpusConfig, GenerationError, build_corpus

log = logging.getLogger("hoicrf")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_VERSION = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"field {name!r}: expected boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field {name!r}: expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field {name!r}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"field {name!r}: expected list of strings, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"field {name!r}: expected string, got {value!r}")
        return value
    return value


def _build(cls, values: dict):
    kw = {}
    for f in fields(cls):
        if f.name in values:
            default = f.default if f.default is not MISSING else None
            kw[f.name] = _coerce(f.name, values[f.name], default)
    obj = cls(**kw)
    try:
        obj.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return obj


@dataclass
class RunConfig:
    corpus: CorpusConfig
    train: TrainConfig

    def echo(self) -> dict:
        d = self.corpus.to_dict()
        d.update(asdict(self.train))
        d["seed"] = self.train.seed
        return d


def load_config(path: str | None, desk: bool = False, seed: int | None = None, variant: str | None = None) -> RunConfig:
    """Flat JSON config; precedence defaults < --desk < file < flags."""
    values: dict = {}
    if desk:
        values.update(DESK_PRESET)
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}", EXIT_IO) from None
        except OSError as e:
            raise CliError(f"cannot read config {path}: {e}", EXIT_IO) from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e.msg} (line {e.lineno})") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        values.update(raw)
    if seed is not None:
        values["seed"] = seed
    if variant is not None:
        values["variant"] = variant
    known = {f.name for f in fields(CorpusConfig)} | TrainConfig.field_names()
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    corpus_keys = {f.name for f in fields(CorpusConfig)}
    cc = _build(CorpusConfig, {k: v for k, v in values.items() if k in corpus_keys})
    tc = _build(TrainConfig, {k: v for k, v in values.items() if k in TrainConfig.field_names()})
    return RunConfig(cc, tc)


def write_run_manifest(path: Path, command: str, cfg: RunConfig | None, paths: dict, started: float,
                       corpus_dir: str | None = None, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": cfg.echo() if cfg is not None else None,
        "seed": cfg.train.seed if cfg is not None else None,
        "paths": paths,
        "corpus_manifest_sha256": None,
        "tool_version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    if corpus_dir is not None and (Path(corpus_dir) / MANIFEST_FILE).exists():
        manifest["corpus_manifest_sha256"] = sha256_file(Path(corpus_dir) / MANIFEST_FILE)
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _sidecar(model_path: Path, suffix: str) -> Path:
    return model_path.with_name(model_path.stem + suffix)


def _load_corpus(corpus_dir: str):
    if not Path(corpus_dir).is_dir():
        raise CliError(f"corpus directory not found: {corpus_dir}", EXIT_IO)
    return read_corpus(corpus_dir)


def _load_model(path: str) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"model file not found: {path}", EXIT_IO) from None
    except json.JSONDecodeError as e:
        raise CliError(f"model file {path} is not valid JSON: {e.msg}", EXIT_CONFIG) from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.desk, args.seed)
    corpus = build_corpus(cfg.corpus)
    out = Path(args.out)
    try:
        manifest = write_corpus(out, corpus.train, corpus.test, corpus.manifest)
        write_run_manifest(out / "run_manifest.json", "gen", cfg, {"out": str(out)}, started)
    except OSError as e:
        raise CliError(f"cannot write corpus to {out}: {e}", EXIT_IO) from None
    c = manifest["counts"]
    print(f"wrote {c['train_segments']} train / {c['test_segments']} test segments "
          f"({c['train_sessions']}/{c['test_sessions']} sessions) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.desk, args.seed, args.variant)
    train_set, _, manifest = _load_corpus(args.corpus)
    if not train_set:
        raise CliError(f"no training segments in {args.corpus}", EXIT_CONFIG)
    model_path = Path(args.model)
    tc = cfg.train
    history: list[float] = []
    if tc.variant == "baseline":
        pred = baseline_most_frequent(train_set)
        ckpt = Checkpoint("baseline", _vocab(manifest), asdict(tc),
                          baseline={"tuple": pred.tuple.labels(_vocab(manifest)), "frequency": pred.frequency})
    else:
        try:
            result = train(tc, train_set, _vocab(manifest))
        except TrainingDiverged as e:
            raise CliError(str(e), EXIT_DIVERGED) from None
        history = result.loss_history
        ckpt = Checkpoint(tc.variant, _vocab(manifest), asdict(tc), params=result.params)
    try:
        model_path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model_path, ckpt)
        loss_path = _sidecar(model_path, ".loss.csv")
        with open(loss_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss"])
            for i, v in enumerate(history):
                w.writerow([i, repr(v)])
        write_run_manifest(_sidecar(model_path, ".manifest.json"), "train", cfg,
                           {"corpus": args.corpus, "model": str(model_path), "loss_history": str(loss_path)},
                           started, corpus_dir=args.corpus)
    except OSError as e:
        raise CliError(f"cannot write model outputs: {e}", EXIT_IO) from None
    final = f", final loss {history[-1]:.6f}" if history else ""
    print(f"trained {tc.variant} on {len(train_set)} segments{final}; checkpoint {model_path}")
    return EXIT_OK


def _vocab(manifest: dict) -> SlotVocabulary:
    return SlotVocabulary.from_dict(manifest["vocabulary"]) if "vocabulary" in manifest else DEFAULT_VOCAB


def cmd_eval(args) -> int:
    ckpt = _load_model(args.model)
    train_set, test_set, _ = _load_corpus(args.corpus)
    segments = test_set if args.split == "test" else train_set
    if not segments:
        raise CliError(f"no {args.split} segments in {args.corpus}", EXIT_CONFIG)
    if ckpt.variant == "baseline":
        b = ckpt.baseline
        pred = ConstantPredictor(EventTuple.from_labels(ckpt.vocab, **b["tuple"]), b["frequency"])
        report = evaluate_baseline(pred, segments, ckpt.vocab)
    else:
        constrained = bool(ckpt.train_config.get("constrained_decoding", False))
        report = evaluate(ckpt.params, ckpt.variant, segments, constrained)
    report.extra = {**report.extra, "model": str(args.model), "split": args.split}
    out = Path(args.out) if args.out else _sidecar(Path(args.model), f".eval-{args.split}.json")
    try:
        report.save(out)
    except OSError as e:
        raise CliError(f"cannot write report {out}: {e}", EXIT_IO) from None
    print(report.table())
    if ckpt.variant == "baseline":
        print(f"modal tuple      {render(EventTuple.from_labels(ckpt.vocab, **ckpt.baseline['tuple']), ckpt.vocab)}"
              f" (train frequency {ckpt.baseline['frequency']:.4f})")
    print(f"report           {out}")
    return EXIT_OK


def _read_segment_file(path: str) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise CliError(f"segment file not found: {path}", EXIT_IO) from None
    try:
        doc = json.loads(text.strip().splitlines()[0] if text.strip().startswith("{") else text)
    except (json.JSONDecodeError, IndexError) as e:
        raise SchemaError(f"segment file is not valid JSON: {e}", path=path) from None
    raw = doc.get("frames") if isinstance(doc, dict) else doc
    if raw is None:
        raise SchemaError("segment file has no 'frames' field", path=path)
    return parse_frames(raw, path=path)


def cmd_predict(args) -> int:
    ckpt = _load_model(args.model)
    frames = _read_segment_file(args.segment)
    vocab = ckpt.vocab
    if ckpt.variant == "baseline":
        t = EventTuple.from_labels(vocab, **ckpt.baseline["tuple"])
        scores = None
    else:
        head = VARIANT_HEADS[ckpt.variant]
        with nx.no_grad():
            unary = encode(frames, ckpt.params)
            table = potentials(unary, ckpt.params, head == "CRF")
        constrained = bool(ckpt.train_config.get("constrained_decoding", False))
        t = EventTuple.from_sequence(predict(head, table, constrained, vocab))
        scores = {s: [round(float(x), 6) for x in unary[s].data] for s in SLOTS}
    ok, violations = is_valid(t, vocab)
    print(render(t, vocab))
    print("tuple   " + json.dumps(t.labels(vocab)))
    print(f"valid   {str(ok).lower()}" + (f" ({'; '.join(violations)})" if violations else ""))
    if scores is not None:
        for s in SLOTS:
            labs = vocab.labels[s]
            print(f"  {s:<12} " + "  ".join(f"{l}={v:+.4f}" for l, v in zip(labs, scores[s])))
    return EXIT_OK


def cmd_experiment(args) -> int:
    """Baseline plus each LSTM variant, averaged over runs (the model comparison table)."""
    cfg = load_config(args.config, args.desk, args.seed)
    train_set, test_set, _ = _load_corpus(args.corpus)
    if args.runs is not None:
        cfg.train.runs = args.runs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in args.variants.split(","):
        if variant not in MODEL_VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        try:
            rep = run_experiment(cfg.train.replace(variant=variant), train_set, test_set, out / f"{variant}.json")
        except TrainingDiverged as e:
            raise CliError(str(e), EXIT_DIVERGED) from None
        rows.append(rep)
    print(f"{'model':<10} {'exact':>7} {'invalid':>8}  " + " ".join(f"{s[:5]:>6}" for s in SLOTS))
    for r in rows:
        print(f"{r.variant:<10} {r.exact_precision:7.3f} {r.invalid_rate:8.3f}  "
              + " ".join(f"{r.per_label_precision[s]:6.3f}" for s in SLOTS))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hoicrf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hoicrf {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--config")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--desk", action="store_true", help="apply the reduced desk preset")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("--config")
    t.add_argument("--corpus", required=True)
    t.add_argument("--model", required=True, help="checkpoint path to write")
    t.add_argument("--variant", choices=MODEL_VARIANTS)
    t.add_argument("--seed", type=int)
    t.add_argument("--desk", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--out", help="report path (default: next to the model)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="label one 20-frame segment")
    r.add_argument("--model", required=True)
    r.add_argument("--segment", required=True, help="JSON with a 'frames' 20x63 matrix")
    r.set_defaults(func=cmd_predict)

    x = sub.add_parser("experiment", help="compare baseline and LSTM variants over repeated runs")
    x.add_argument("--config")
    x.add_argument("--corpus", required=True)
    x.add_argument("--out", required=True, help="directory for per-variant reports")
    x.add_argument("--variants", default="baseline,lstm_i,lstm_w,lstm_crf")
    x.add_argument("--runs", type=int)
    x.add_argument("--seed", type=int)
    x.add_argument("--desk", action="store_true")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv: typing.Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, SchemaError, GenerationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except VersionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERSION
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
