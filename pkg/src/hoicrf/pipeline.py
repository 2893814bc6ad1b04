"""Training loop, evaluation metrics and the most-frequent-tuple baseline."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .sequence_model import FeatureSegment, ModelConfig, ModelParams, clip_global_norm, encode, potentials
from .structured import (
    DEFAULT_VOCAB,
    LOSSES,
    SLOTS,
    ConfigError,
    EventTuple,
    SlotVocabulary,
    is_valid,
    predict,
)

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
VARIANT_HEADS = {"lstm_i": "I", "lstm_w": "W", "lstm_crf": "CRF"}
MODEL_VARIANTS = ("baseline",) + tuple(VARIANT_HEADS)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class TrainConfig:
    variant: str = "lstm_crf"
    hidden_size: int = 200
    input_size: int = 128
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.05
    keep_prob: float = 0.8
    clip_norm: float = 5.0
    seed: int = 0
    runs: int = 5
    separate_lstms: bool = False
    init_scale: float = 0.08
    constrained_decoding: bool = False
    normalize_inputs: bool = True

    def validate(self) -> None:
        if self.variant not in MODEL_VARIANTS:
            raise ConfigError(f"variant must be one of {MODEL_VARIANTS}, got {self.variant!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError("keep_prob must be in (0, 1]")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")

    @property
    def head(self) -> str:
        return VARIANT_HEADS[self.variant]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=self.input_size,
            hidden_size=self.hidden_size,
            keep_prob=self.keep_prob,
            separate_lstms=self.separate_lstms,
            edges=self.variant == "lstm_crf",
            init_scale=self.init_scale,
        )

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


# reduced settings that keep the five-run comparison on a desktop CPU
DESK_PRESET = dict(hidden_size=64, input_size=64, epochs=60, learning_rate=0.1)


def stack(segments: Sequence[FeatureSegment]) -> tuple[np.ndarray, np.ndarray | None]:
    X = np.stack([s.frames for s in segments])
    if any(s.gold is None for s in segments):
        return X, None
    Y = np.array([s.gold.as_tuple() for s in segments], dtype=np.int64)
    return X, Y


@dataclass
class TrainResult:
    params: ModelParams
    loss_history: list[float]
    config: TrainConfig


def train(
    config: TrainConfig,
    corpus: Sequence[FeatureSegment],
    vocab: SlotVocabulary = DEFAULT_VOCAB,
) -> TrainResult:
    """Mini-batch gradient descent on the head loss of ``config.variant``."""
    config.validate()
    if config.variant == "baseline":
        raise ConfigError("the baseline is fitted with baseline_most_frequent, not trained")
    if not corpus:
        raise ValueError("training corpus is empty")
    X, Y = stack(corpus)
    if Y is None:
        raise ValueError("training segments must carry gold tuples")

    init_rng, shuffle_rng, dropout_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3)
    )
    params = ModelParams.init(config.model_config(), vocab, init_rng)
    if config.normalize_inputs:
        params.fit_normalizer(X)
    loss_fn = LOSSES[config.head]
    use_edges = config.head == "CRF"
    tensors = params.parameters()
    history: list[float] = []
    n = len(X)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            scores = encode(X[idx], params, dropout_active=True, rng=dropout_rng)
            loss = nx.mean(loss_fn(potentials(scores, params, use_edges), Y[idx]))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            params.zero_grad()
            nx.backward(loss)
            grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
            for t, g in zip(tensors, clip_global_norm(grads, config.clip_norm)):
                t.data -= config.learning_rate * g
            total += value * len(idx)
        history.append(total / n)
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    params.zero_grad()
    return TrainResult(params, history, config)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    variant: str
    exact_precision: float
    per_label_precision: dict[str, float]
    invalid_rate: float
    n_samples: int
    confusion: dict[str, list[list[int]]] = field(default_factory=dict)
    runs: list["EvalReport"] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "schema_version": REPORT_SCHEMA,
            "variant": self.variant,
            "exact_precision": self.exact_precision,
            "per_label_precision": dict(self.per_label_precision),
            "invalid_rate": self.invalid_rate,
            "n_samples": self.n_samples,
            "confusion": self.confusion,
            "runs": [r.to_dict() for r in self.runs],
        }
        if self.extra:
            d["extra"] = self.extra
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(
            variant=d["variant"],
            exact_precision=d["exact_precision"],
            per_label_precision=dict(d["per_label_precision"]),
            invalid_rate=d["invalid_rate"],
            n_samples=d["n_samples"],
            confusion=d.get("confusion", {}),
            runs=[cls.from_dict(r) for r in d.get("runs", [])],
            extra=d.get("extra", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def table(self) -> str:
        lines = [
            f"variant          {self.variant}",
            f"samples          {self.n_samples}",
            f"exact precision  {self.exact_precision:.4f}",
        ]
        for s in SLOTS:
            lines.append(f"  {s:<14} {self.per_label_precision[s]:.4f}")
        lines.append(f"invalid rate     {self.invalid_rate:.4f}")
        return "\n".join(lines)


def score_predictions(
    pred: np.ndarray,
    gold: np.ndarray,
    variant: str = "",
    vocab: SlotVocabulary = DEFAULT_VOCAB,
) -> EvalReport:
    """Metrics for integer prediction/gold arrays of shape ``(N, 5)``."""
    pred = np.asarray(pred, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if pred.shape != gold.shape or pred.ndim != 2 or len(pred) == 0:
        raise ValueError(f"prediction/gold shapes {pred.shape} vs {gold.shape}")
    n = len(gold)
    exact = int(np.all(pred == gold, axis=1).sum())
    per_label = {s: int((pred[:, i] == gold[:, i]).sum()) / n for i, s in enumerate(SLOTS)}
    invalid = sum(not is_valid(EventTuple.from_sequence(row), vocab)[0] for row in pred)
    confusion = {}
    for i, s in enumerate(SLOTS):
        m = np.zeros((vocab.size(s), vocab.size(s)), dtype=np.int64)
        np.add.at(m, (gold[:, i], pred[:, i]), 1)
        confusion[s] = m.tolist()
    return EvalReport(variant, exact / n, per_label, invalid / n, n, confusion)


def predict_segments(
    params: ModelParams,
    variant: str,
    segments: Sequence[FeatureSegment] | np.ndarray,
    constrained: bool = False,
    batch_size: int = 256,
) -> np.ndarray:
    X = segments if isinstance(segments, np.ndarray) else stack(segments)[0]
    head = VARIANT_HEADS[variant]
    out = []
    with nx.no_grad():
        for lo in range(0, len(X), batch_size):
            scores = encode(X[lo:lo + batch_size], params)
            table = potentials(scores, params, head == "CRF")
            out.append(predict(head, table, constrained=constrained, vocab=params.vocab))
    return np.concatenate(out, axis=0)


def evaluate(
    params: ModelParams,
    variant: str,
    segments: Sequence[FeatureSegment],
    constrained: bool = False,
) -> EvalReport:
    """Dropout-free predictions scored against the gold tuples."""
    if not segments:
        raise ValueError("test set is empty")
    X, Y = stack(segments)
    if Y is None:
        raise ValueError("test segments must carry gold tuples")
    pred = predict_segments(params, variant, X, constrained)
    return score_predictions(pred, Y, variant, params.vocab)


@dataclass
class ConstantPredictor:
    """Predicts one tuple for every input."""

    tuple: EventTuple
    frequency: float

    def predict(self, n: int) -> np.ndarray:
        return np.tile(np.array(self.tuple.as_tuple(), dtype=np.int64), (n, 1))


def baseline_most_frequent(train_segments: Sequence[FeatureSegment]) -> ConstantPredictor:
    """Modal gold tuple of the training set (ties go to the first seen)."""
    if not train_segments:
        raise ValueError("training set is empty")
    counts = Counter(s.gold for s in train_segments)
    best = max(counts.values())
    for s in train_segments:
        if counts[s.gold] == best:
            return ConstantPredictor(s.gold, best / len(train_segments))
    raise AssertionError("unreachable")


def evaluate_baseline(
    predictor: ConstantPredictor,
    segments: Sequence[FeatureSegment],
    vocab: SlotVocabulary = DEFAULT_VOCAB,
) -> EvalReport:
    _, Y = stack(segments)
    rep = score_predictions(predictor.predict(len(Y)), Y, "baseline", vocab)
    rep.extra = {"modal_tuple": predictor.tuple.labels(vocab), "modal_frequency": predictor.frequency}
    return rep


# ---------------------------------------------------------------------------
# repeated runs


def run_seeds(master_seed: int, runs: int) -> list[int]:
    states = np.random.SeedSequence(master_seed).generate_state(runs, dtype=np.uint32)
    return [int(s) for s in states]


def average_reports(reports: list[EvalReport], variant: str) -> EvalReport:
    k = len(reports)
    confusion = {}
    for s in SLOTS:
        confusion[s] = np.sum([np.array(r.confusion[s]) for r in reports], axis=0).tolist()
    return EvalReport(
        variant=variant,
        exact_precision=float(np.mean([r.exact_precision for r in reports])),
        per_label_precision={s: float(np.mean([r.per_label_precision[s] for r in reports])) for s in SLOTS},
        invalid_rate=float(np.mean([r.invalid_rate for r in reports])),
        n_samples=reports[0].n_samples,
        confusion=confusion,
        runs=list(reports) if k > 1 else [],
    )


def run_experiment(
    config: TrainConfig,
    train_segments: Sequence[FeatureSegment],
    test_segments: Sequence[FeatureSegment],
    out_path: str | Path | None = None,
    vocab: SlotVocabulary = DEFAULT_VOCAB,
) -> EvalReport:
    """Train and evaluate ``config.runs`` times with derived initialization seeds."""
    config.validate()
    if config.variant == "baseline":
        rep = evaluate_baseline(baseline_most_frequent(train_segments), test_segments, vocab)
    else:
        reports = []
        for i, seed in enumerate(run_seeds(config.seed, config.runs)):
            result = train(config.replace(seed=seed), train_segments, vocab)
            r = evaluate(result.params, config.variant, test_segments, config.constrained_decoding)
            r.extra = {"seed": seed, "final_loss": result.loss_history[-1]}
            log.info("%s run %d: exact %.4f invalid %.4f", config.variant, i, r.exact_precision, r.invalid_rate)
            reports.append(r)
        rep = average_reports(reports, config.variant)
        if config.runs == 1:
            rep.extra = reports[0].extra
    rep.extra = {**rep.extra, "config": asdict(config)}
    if out_path is not None:
        rep.save(out_path)
    return rep
