import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoicrf import numerics as nx
from hoicrf.numerics import Tensor
from hoicrf.structured import (
    DEFAULT_VOCAB,
    EDGES,
    NONE,
    SLOTS,
    ConfigError,
    EventTuple,
    PotentialTable,
    SlotVocabulary,
    decode,
    decode_batch,
    is_valid,
    log_partition,
    loss_crf,
    loss_independent,
    loss_joint,
    none_tuple,
    predict,
    random_table,
    render,
    tuple_score,
    valid_tuples,
)
from oracles import brute_argmax, brute_log_partition, brute_marginals, brute_probability

DEFAULT_SIZES = DEFAULT_VOCAB.sizes()
LN_720 = math.log(720)


def T(**labels) -> EventTuple:
    return EventTuple.from_labels(DEFAULT_VOCAB, **labels)


def zero_table(sizes=DEFAULT_SIZES, edges=True) -> PotentialTable:
    return random_table(np.random.default_rng(0), sizes, scale=0.0, edges=edges)


def random_sizes(rng):
    return {s: int(rng.integers(1, 7)) for s in SLOTS}


def random_gold(rng, sizes) -> EventTuple:
    return EventTuple(*(int(rng.integers(sizes[s])) for s in SLOTS))


def forced_table(gold: EventTuple, sizes=DEFAULT_SIZES) -> PotentialTable:
    t = {}
    for s in SLOTS:
        u = np.full(sizes[s], -1e9)
        u[getattr(gold, s)] = 0.0
        t[s] = u
    return PotentialTable(**t)


class TestVocabulary:
    def test_default_sizes(self):
        assert DEFAULT_SIZES == {"subject": 4, "object": 3, "locative": 3, "verb": 5, "preposition": 4}
        assert math.prod(DEFAULT_SIZES.values()) == 720

    def test_every_slot_has_none(self):
        for s in SLOTS:
            assert NONE in DEFAULT_VOCAB.labels[s]

    def test_duplicate_labels_rejected(self):
        labels = DEFAULT_VOCAB.to_dict()
        labels["object"] = ["A", "A", "None"]
        with pytest.raises(ValueError):
            SlotVocabulary.from_dict(labels)

    def test_missing_none_rejected(self):
        labels = DEFAULT_VOCAB.to_dict()
        labels["verb"] = ["push", "pull"]
        with pytest.raises(ValueError):
            SlotVocabulary.from_dict(labels)

    def test_round_trip(self):
        assert SlotVocabulary.from_dict(DEFAULT_VOCAB.to_dict()) == DEFAULT_VOCAB


class TestIsValid:
    def test_full_sentence(self):
        ok, why = is_valid(T(subject="Performer", object="A", locative="B", verb="push", preposition="toward"))
        assert ok and why == []

    def test_duplicate_entity(self):
        ok, why = is_valid(T(subject="Performer", object="A", locative="A", verb="push", preposition="toward"))
        assert not ok
        assert any("duplicate" in w for w in why)

    def test_all_none(self):
        assert is_valid(none_tuple())[0]

    def test_locative_preposition_dependency(self):
        ok, why = is_valid(T(subject="Performer", object="A", verb="push", preposition="toward"))
        assert not ok
        assert any("locative" in w for w in why)

    def test_none_verb_forces_none(self):
        ok, why = is_valid(T(subject="A"))
        assert not ok
        assert any("verb" in w for w in why)

    def test_exhaustive_against_restatement(self):
        labels = DEFAULT_VOCAB.labels
        count = 0
        for combo in itertools.product(*(range(len(labels[s])) for s in SLOTS)):
            t = EventTuple(*combo)
            lab = {s: labels[s][i] for s, i in zip(SLOTS, combo)}
            entities = [lab[s] for s in ("subject", "object", "locative") if lab[s] != "None"]
            rule_a = len(entities) == len(set(entities))
            rule_b = lab["verb"] != "None" or all(lab[s] == "None" for s in SLOTS)
            rule_c = (lab["locative"] == "None") == (lab["preposition"] == "None")
            assert is_valid(t)[0] == (rule_a and rule_b and rule_c), lab
            count += 1
        assert count == 720

    def test_valid_tuple_table(self):
        rows = valid_tuples()
        assert all(is_valid(EventTuple(*r))[0] for r in rows)
        assert len(rows) == sum(is_valid(EventTuple(*c))[0] for c in itertools.product(
            *(range(DEFAULT_SIZES[s]) for s in SLOTS)))


class TestRender:
    def test_performer_sentence(self):
        t = T(subject="Performer", object="A", locative="B", verb="push", preposition="toward")
        assert render(t) == "The performer pushes A toward B"

    def test_none(self):
        assert render(none_tuple()) == "None"

    def test_intransitive(self):
        assert render(T(subject="A", locative="B", verb="slide", preposition="toward")) == "A slides toward B"

    def test_away_from(self):
        t = T(subject="Performer", object="B", locative="A", verb="pull", preposition="away_from")
        assert render(t) == "The performer pulls B away from A"

    def test_no_preposition(self):
        assert render(T(subject="Performer", object="A", verb="roll")) == "The performer rolls A"


class TestTupleScore:
    def test_zero_table(self):
        p = zero_table()
        for combo in [(0, 0, 0, 0, 0), (3, 2, 2, 4, 3), (1, 0, 2, 3, 1)]:
            assert tuple_score(p, EventTuple(*combo)) == 0.0

    def test_unary_only(self, rng):
        p = random_table(rng, DEFAULT_SIZES, edges=False)
        t = EventTuple(1, 2, 0, 3, 1)
        expected = p.subject[1] + p.object[2] + p.locative[0] + p.verb[3] + p.preposition[1]
        assert tuple_score(p, t) == pytest.approx(expected, abs=1e-12)

    def test_summation_oracle(self, rng):
        for _ in range(50):
            p = random_table(rng, DEFAULT_SIZES)
            g = random_gold(rng, DEFAULT_SIZES)
            s, o, l, v, pr = g.as_tuple()
            expected = sum([
                p.subject[s], p.object[o], p.locative[l], p.verb[v], p.preposition[pr],
                p.start_l[l], p.ls[l, s], p.lo[l, o], p.lp[l, pr], p.sv[s, v],
            ])
            assert abs(tuple_score(p, g) - expected) <= 1e-12


class TestLogPartition:
    def test_uniform(self):
        assert log_partition(zero_table()) == pytest.approx(LN_720, abs=1e-12)

    def test_forced_tuple(self):
        gold = T(subject="Performer", object="A", locative="B", verb="push", preposition="toward")
        p = forced_table(gold)
        assert log_partition(p) == pytest.approx(tuple_score(p, gold), abs=1e-9)

    def test_matches_enumeration(self, rng):
        for _ in range(100):
            sizes = random_sizes(rng)
            p = random_table(rng, sizes, scale=2.0)
            assert abs(log_partition(p) - brute_log_partition(p)) <= 1e-9

    def test_no_edges_matches_enumeration(self, rng):
        p = random_table(rng, DEFAULT_SIZES, edges=False)
        assert abs(log_partition(p) - brute_log_partition(p)) <= 1e-9

    def test_partial_edges(self, rng):
        p = random_table(rng, DEFAULT_SIZES)
        p.lo = None
        p.start_l = None
        assert abs(log_partition(p) - brute_log_partition(p)) <= 1e-9

    def test_batched(self, rng):
        tables = [random_table(rng, DEFAULT_SIZES) for _ in range(4)]
        edges = {e: getattr(tables[0], e) for e in EDGES}
        batch = PotentialTable(**{s: np.stack([getattr(t, s) for t in tables]) for s in SLOTS}, **edges)
        got = log_partition(batch)
        for i, t in enumerate(tables):
            single = PotentialTable(**t.unaries(), **edges)
            assert abs(got[i] - log_partition(single)) <= 1e-12

    def test_marginal_property(self, rng):
        for _ in range(50):
            p = random_table(rng, DEFAULT_SIZES, scale=1.5)
            leaves = {s: Tensor(getattr(p, s), requires_grad=True) for s in SLOTS}
            tp = PotentialTable(**leaves, **{e: getattr(p, e) for e in EDGES})
            nx.backward(log_partition(tp))
            ref = brute_marginals(p)
            for s in SLOTS:
                g = leaves[s].grad
                assert np.all(g >= 0) and np.all(g <= 1)
                assert abs(g.sum() - 1.0) <= 1e-9
                np.testing.assert_allclose(g, ref[s], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(SLOTS), st.floats(-20, 20))
    def test_shift_invariance(self, seed, slot, c):
        rng = np.random.default_rng(seed)
        p = random_table(rng, DEFAULT_SIZES)
        shifted = random_table(np.random.default_rng(seed), DEFAULT_SIZES)
        setattr(shifted, slot, getattr(shifted, slot) + c)
        assert abs(log_partition(shifted) - (log_partition(p) + c)) <= 1e-12 * max(1.0, abs(c))
        assert decode(shifted)[0] == decode(p)[0]


class TestDecode:
    def test_factorized_maximum(self, rng):
        p = random_table(rng, DEFAULT_SIZES, edges=False)
        best, _ = decode(p)
        assert best.as_tuple() == tuple(int(np.argmax(getattr(p, s))) for s in SLOTS)

    def test_all_zero_picks_index_zero(self):
        assert decode(zero_table())[0] == EventTuple(0, 0, 0, 0, 0)

    def test_score_is_tuple_score(self, rng):
        p = random_table(rng, DEFAULT_SIZES)
        best, score = decode(p)
        assert score == tuple_score(p, best)

    def test_matches_enumeration(self, rng):
        for _ in range(100):
            sizes = random_sizes(rng)
            p = random_table(rng, sizes, scale=2.0)
            best, score = decode(p)
            ref, ref_score = brute_argmax(p)
            assert best.as_tuple() == ref
            assert abs(score - ref_score) <= 1e-12

    def test_tie_break_matches_enumeration(self, rng):
        for _ in range(200):
            sizes = random_sizes(rng)
            p = random_table(rng, sizes)
            for f in ("subject", "object", "locative", "verb", "preposition", *EDGES):
                setattr(p, f, rng.integers(-1, 2, np.shape(getattr(p, f))).astype(float))
            assert decode(p)[0].as_tuple() == brute_argmax(p)[0]

    def test_batch_matches_single(self, rng):
        tables = [random_table(rng, DEFAULT_SIZES) for _ in range(5)]
        edges = {e: getattr(tables[0], e) for e in EDGES}
        batch = PotentialTable(**{s: np.stack([getattr(t, s) for t in tables]) for s in SLOTS}, **edges)
        tuples, scores = decode_batch(batch)
        for i, t in enumerate(tables):
            best, score = decode(PotentialTable(**t.unaries(), **edges))
            assert tuple(tuples[i]) == best.as_tuple()
            assert scores[i] == pytest.approx(score, abs=1e-12)


class TestLosses:
    def test_forced_gold(self):
        gold = T(subject="A", locative="B", verb="roll", preposition="toward")
        p = forced_table(gold)
        assert abs(loss_crf(p, gold)) < 1e-9
        assert abs(loss_joint(p, gold)) < 1e-9
        assert abs(loss_independent(p, gold)) < 1e-9

    @pytest.mark.parametrize("loss", [loss_crf, loss_joint, loss_independent])
    def test_uniform(self, loss, rng):
        for _ in range(5):
            assert loss(zero_table(), random_gold(rng, DEFAULT_SIZES)) == pytest.approx(LN_720, abs=1e-12)

    def test_crf_enumeration(self, rng):
        for _ in range(50):
            sizes = random_sizes(rng)
            p = random_table(rng, sizes, scale=2.0)
            gold = random_gold(rng, sizes)
            expected = -math.log(brute_probability(p, gold))
            got = loss_crf(p, gold)
            assert got >= -1e-12
            assert abs(got - expected) <= 1e-9

    def test_joint_enumeration(self, rng):
        for _ in range(50):
            p = random_table(rng, DEFAULT_SIZES, scale=2.0)
            gold = random_gold(rng, DEFAULT_SIZES)
            expected = -math.log(brute_probability(p.without_edges(), gold))
            assert abs(loss_joint(p, gold) - expected) <= 1e-9

    def test_joint_is_crf_without_edges(self, rng):
        for _ in range(50):
            p = random_table(rng, DEFAULT_SIZES)
            gold = random_gold(rng, DEFAULT_SIZES)
            zeroed = PotentialTable(**p.unaries(), **{e: np.zeros_like(getattr(p, e)) for e in EDGES})
            assert abs(loss_joint(p, gold) - loss_crf(zeroed, gold)) <= 1e-12

    def test_independent_per_slot_oracle(self, rng):
        for _ in range(50):
            p = random_table(rng, DEFAULT_SIZES, scale=2.0)
            gold = random_gold(rng, DEFAULT_SIZES)
            expected = 0.0
            for s in SLOTS:
                u = getattr(p, s)
                probs = np.exp(u) / np.exp(u).sum()
                expected -= math.log(probs[getattr(gold, s)])
            assert abs(loss_independent(p, gold) - expected) <= 1e-9

    @pytest.mark.parametrize("loss", [loss_crf, loss_joint, loss_independent])
    def test_batched_matches_single(self, loss, rng):
        tables = [random_table(rng, DEFAULT_SIZES) for _ in range(3)]
        edges = {e: getattr(tables[0], e) for e in EDGES}
        batch = PotentialTable(**{s: np.stack([getattr(t, s) for t in tables]) for s in SLOTS}, **edges)
        golds = [random_gold(rng, DEFAULT_SIZES) for _ in range(3)]
        got = loss(batch, np.array([g.as_tuple() for g in golds]))
        for i in range(3):
            single = PotentialTable(**tables[i].unaries(), **edges)
            assert got[i] == pytest.approx(loss(single, golds[i]), abs=1e-12)

    @pytest.mark.parametrize("loss", [loss_crf, loss_joint, loss_independent])
    def test_gradients(self, loss, rng):
        sizes = DEFAULT_SIZES
        p = random_table(rng, sizes)
        gold = random_gold(rng, sizes)
        names = list(SLOTS) + list(EDGES)
        shapes = [np.shape(getattr(p, n)) for n in names]
        flat = np.concatenate([np.ravel(getattr(p, n)) for n in names])

        def f(x):
            parts, i = {}, 0
            for n, shp in zip(names, shapes):
                k = int(np.prod(shp))
                parts[n] = nx.reshape(x[i:i + k], shp)
                i += k
            return loss(PotentialTable(**parts), gold)

        assert nx.check_gradient(f, flat) < 1e-4


class TestPredict:
    def test_w_is_per_slot_argmax(self, rng):
        p = random_table(rng, DEFAULT_SIZES, edges=False)
        expected = [int(np.argmax(getattr(p, s))) for s in SLOTS]
        np.testing.assert_array_equal(predict("W", p), expected)
        np.testing.assert_array_equal(predict("I", p), expected)

    def test_crf_zero_edges_equals_w(self, rng):
        for _ in range(100):
            p = random_table(rng, DEFAULT_SIZES)
            zeroed = PotentialTable(**p.unaries(), **{e: np.zeros_like(getattr(p, e)) for e in EDGES})
            np.testing.assert_array_equal(predict("CRF", zeroed), predict("W", p))

    def test_crf_uses_edges(self, rng):
        p = random_table(rng, DEFAULT_SIZES, scale=3.0)
        np.testing.assert_array_equal(predict("CRF", p), decode(p)[0].as_tuple())

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            predict("Q", zero_table())

    def test_variant_spellings(self):
        for name in ("lstm_crf", "LSTM-CRF", "crf"):
            predict(name, zero_table())

    def test_constrained_always_valid(self, rng):
        for _ in range(50):
            p = random_table(rng, DEFAULT_SIZES, scale=2.0)
            for head in ("W", "CRF"):
                out = predict(head, p, constrained=True)
                assert is_valid(EventTuple(*out))[0]

    def test_locative_preposition_edges_help(self, rng):
        loc_none = DEFAULT_VOCAB.none_index("locative")
        prep_none = DEFAULT_VOCAB.none_index("preposition")
        lp = np.zeros((DEFAULT_SIZES["locative"], DEFAULT_SIZES["preposition"]))
        lp[np.arange(DEFAULT_SIZES["locative"]) != loc_none, prep_none] = -20.0
        crf_ok = w_ok = 0
        for _ in range(1000):
            p = random_table(rng, DEFAULT_SIZES, edges=False)
            p.lp = lp
            for head in ("CRF", "W"):
                out = predict(head, p)
                ok = (out[2] == loc_none) == (out[4] == prep_none)
                if head == "CRF":
                    crf_ok += ok
                else:
                    w_ok += ok
        assert crf_ok > w_ok
