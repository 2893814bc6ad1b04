import json

import numpy as np
import pytest

from hoicrf.pipeline import (
    EvalReport,
    TrainConfig,
    TrainingDiverged,
    average_reports,
    baseline_most_frequent,
    evaluate,
    evaluate_baseline,
    run_experiment,
    score_predictions,
    train,
)
from hoicrf.sequence_model import N_FEATURES, N_FRAMES, FeatureSegment
from hoicrf.structured import DEFAULT_VOCAB, SLOTS, ConfigError, EventTuple, none_tuple
from hoicrf.synthgen import CorpusConfig, build_corpus

FULL = EventTuple.from_labels(subject="Performer", object="A", locative="B", verb="push", preposition="toward")
SLIDE = EventTuple.from_labels(subject="A", locative="B", verb="slide", preposition="toward")
NONE_T = none_tuple()
TINY = dict(hidden_size=8, input_size=8, epochs=2, batch_size=8)


def segments_with(golds, seed=0):
    rng = np.random.default_rng(seed)
    return [
        FeatureSegment(rng.normal(size=(N_FRAMES, N_FEATURES)), g, f"s{i}", 0, 0)
        for i, g in enumerate(golds)
    ]


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(CorpusConfig(sessions_per_type=3, verbs=("push", "roll"), seed=5))


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kw",
        [dict(epochs=0), dict(keep_prob=0.0), dict(keep_prob=1.2), dict(clip_norm=0.0), dict(variant="lstm_x")],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()

    def test_defaults(self):
        c = TrainConfig()
        assert (c.hidden_size, c.epochs, c.keep_prob, c.runs) == (200, 200, 0.8, 5)

    def test_crf_has_edges(self):
        assert TrainConfig(variant="lstm_crf").model_config().edges
        assert not TrainConfig(variant="lstm_i").model_config().edges


class TestTrain:
    def test_zero_learning_rate(self, corpus):
        cfg = TrainConfig(variant="lstm_crf", learning_rate=0.0, seed=3, **TINY)
        before = TrainConfig(variant="lstm_crf", learning_rate=0.0, seed=3, **{**TINY, "epochs": 1})
        a = train(cfg, corpus.train[:20]).params.state()
        b = train(before, corpus.train[:20]).params.state()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_overfit_single_sample(self, corpus):
        seg = [s for s in corpus.train if s.gold == FULL or s.gold != NONE_T][:1]
        cfg = TrainConfig(variant="lstm_w", hidden_size=16, input_size=16, epochs=200, learning_rate=0.5, seed=1)
        hist = train(cfg, seg).loss_history
        assert hist[-1] < 0.01
        assert hist[-1] < hist[0]

    def test_deterministic_history(self, corpus):
        cfg = TrainConfig(variant="lstm_crf", seed=9, **TINY)
        a = train(cfg, corpus.train[:30])
        b = train(cfg, corpus.train[:30])
        assert a.loss_history == b.loss_history
        for k, v in a.params.state().items():
            assert v.tobytes() == b.params.state()[k].tobytes()

    def test_seed_matters(self, corpus):
        a = train(TrainConfig(variant="lstm_w", seed=1, **TINY), corpus.train[:30])
        b = train(TrainConfig(variant="lstm_w", seed=2, **TINY), corpus.train[:30])
        assert a.loss_history != b.loss_history

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self, corpus):
        cfg = TrainConfig(variant="lstm_w", learning_rate=1e300, clip_norm=1e300, seed=0, **TINY)
        with pytest.raises(TrainingDiverged) as info:
            train(cfg, corpus.train[:30])
        assert info.value.epoch >= 0 and not np.isfinite(info.value.loss)

    def test_baseline_not_trainable(self, corpus):
        with pytest.raises(ConfigError):
            train(TrainConfig(variant="baseline"), corpus.train)

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            train(TrainConfig(variant="lstm_w", **TINY), [])


class TestScorePredictions:
    def test_perfect(self):
        gold = np.array([FULL.as_tuple(), SLIDE.as_tuple(), NONE_T.as_tuple()])
        rep = score_predictions(gold.copy(), gold)
        assert rep.exact_precision == 1.0
        assert all(v == 1.0 for v in rep.per_label_precision.values())
        assert rep.invalid_rate == 0.0

    def test_all_none_predictor(self):
        golds = [NONE_T] * 10 + [FULL] * 45 + [SLIDE] * 45
        gold = np.array([g.as_tuple() for g in golds])
        pred = np.tile(NONE_T.as_tuple(), (100, 1))
        assert score_predictions(pred, gold).exact_precision == pytest.approx(0.10)

    def test_hand_computed_fixture(self):
        bad = EventTuple.from_labels(subject="Performer", object="A", locative="A", verb="push", preposition="toward")
        lonely = EventTuple.from_labels(subject="A", verb="slide", preposition="toward")
        gold = [FULL, FULL, SLIDE, NONE_T, SLIDE]
        pred = [FULL, bad, lonely, NONE_T, FULL]
        rep = score_predictions(np.array([p.as_tuple() for p in pred]), np.array([g.as_tuple() for g in gold]))
        # exact: samples 0 and 3
        assert rep.exact_precision == pytest.approx(2 / 5)
        # subject, object, verb: all but sample 4; locative: 0, 3, 4; preposition: all
        assert rep.per_label_precision == pytest.approx(
            {"subject": 4 / 5, "object": 4 / 5, "locative": 3 / 5, "verb": 4 / 5, "preposition": 1.0}
        )
        assert rep.invalid_rate == pytest.approx(2 / 5)
        assert rep.exact_precision <= min(rep.per_label_precision.values())
        conf = np.array(rep.confusion["locative"])
        assert conf.sum() == 5
        assert conf[DEFAULT_VOCAB.index("locative", "B"), DEFAULT_VOCAB.index("locative", "A")] == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            score_predictions(np.zeros((2, 5)), np.zeros((3, 5)))


class TestBaseline:
    def test_single_label(self):
        pred = baseline_most_frequent(segments_with([SLIDE] * 4))
        assert pred.tuple == SLIDE
        rep = evaluate_baseline(pred, segments_with([SLIDE] * 3, seed=1))
        assert rep.exact_precision == 1.0

    def test_majority(self):
        pred = baseline_most_frequent(segments_with([FULL] * 6 + [SLIDE] * 3 + [NONE_T]))
        assert pred.tuple == FULL and pred.frequency == pytest.approx(0.6)
        np.testing.assert_array_equal(pred.predict(4), np.tile(FULL.as_tuple(), (4, 1)))

    def test_tie_goes_to_first_seen(self):
        assert baseline_most_frequent(segments_with([SLIDE, FULL, FULL, SLIDE])).tuple == SLIDE

    def test_report_extras_and_validity(self, corpus):
        pred = baseline_most_frequent(corpus.train)
        rep = evaluate_baseline(pred, corpus.test)
        assert set(rep.extra["modal_tuple"]) == set(SLOTS)
        assert 0 < rep.extra["modal_frequency"] <= 1
        assert rep.invalid_rate == 0.0


class TestEvaluate:
    def test_pure_and_repeatable(self, corpus):
        params = train(TrainConfig(variant="lstm_crf", seed=4, **TINY), corpus.train[:30]).params
        before = {k: v.copy() for k, v in params.state().items()}
        a = evaluate(params, "lstm_crf", corpus.test)
        b = evaluate(params, "lstm_crf", corpus.test)
        assert a.to_dict() == b.to_dict()
        for k, v in params.state().items():
            assert v.tobytes() == before[k].tobytes()
        assert 0 <= a.invalid_rate <= 1
        assert a.exact_precision <= min(a.per_label_precision.values())

    def test_constrained_decoding_valid(self, corpus):
        params = train(TrainConfig(variant="lstm_w", seed=4, **TINY), corpus.train[:30]).params
        assert evaluate(params, "lstm_w", corpus.test, constrained=True).invalid_rate == 0.0

    def test_empty(self, corpus):
        params = train(TrainConfig(variant="lstm_w", seed=4, **TINY), corpus.train[:10]).params
        with pytest.raises(ValueError):
            evaluate(params, "lstm_w", [])


class TestExperiment:
    def test_single_run_mean(self, corpus, tmp_path):
        cfg = TrainConfig(variant="lstm_w", runs=1, seed=2, **TINY)
        rep = run_experiment(cfg, corpus.train[:30], corpus.test, tmp_path / "r.json")
        assert rep.runs == []
        assert "seed" in rep.extra
        on_disk = EvalReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
        assert on_disk.exact_precision == rep.exact_precision

    def test_mean_of_runs_reproducible(self, corpus):
        cfg = TrainConfig(variant="lstm_i", runs=2, seed=2, **TINY)
        a = run_experiment(cfg, corpus.train[:30], corpus.test)
        b = run_experiment(cfg, corpus.train[:30], corpus.test)
        assert a.to_dict() == b.to_dict()
        assert len(a.runs) == 2
        assert a.exact_precision == pytest.approx(np.mean([r.exact_precision for r in a.runs]))

    def test_baseline_experiment(self, corpus):
        rep = run_experiment(TrainConfig(variant="baseline"), corpus.train, corpus.test)
        assert rep.variant == "baseline" and "modal_tuple" in rep.extra

    def test_average_reports(self):
        g = np.array([FULL.as_tuple(), SLIDE.as_tuple()])
        r1 = score_predictions(g, g, "x")
        r2 = score_predictions(g[::-1], g, "x")
        avg = average_reports([r1, r2], "x")
        assert avg.exact_precision == 0.5
        assert np.array(avg.confusion["verb"]).sum() == 4

    def test_report_round_trip(self):
        g = np.array([FULL.as_tuple(), SLIDE.as_tuple()])
        rep = average_reports([score_predictions(g, g, "x")] * 2, "x")
        assert EvalReport.from_dict(json.loads(json.dumps(rep.to_dict()))).to_dict() == rep.to_dict()

    def test_report_schema_checked(self):
        with pytest.raises(ValueError):
            EvalReport.from_dict({"schema_version": 99})
