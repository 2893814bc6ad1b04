"""Five-slot event tuples and exact inference on the output tree.

The tree is rooted at a virtual START node::

    START -> locative -> {subject, object, preposition}
    subject -> verb

Scores of a tuple are the five slot unaries plus one pairwise potential per
tree edge. Unaries may carry leading batch dimensions; edge potentials are
shared across the batch.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor

SLOTS = ("subject", "object", "locative", "verb", "preposition")
EDGES = ("start_l", "ls", "lo", "lp", "sv")

NONE = "None"
SYMBOLS = (
    NONE, "Performer", "A", "B",
    "push", "pull", "slide", "roll",
    "toward", "away_from", "past",
)
ENTITY_SLOTS = ("subject", "object", "locative")
VARIANTS = ("I", "W", "CRF")


class ConfigError(ValueError):
    """Unknown head variant or invalid model/training option."""


@dataclass(frozen=True)
class SlotVocabulary:
    """Per-slot label inventories drawn from the shared symbol table."""

    labels: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        for slot in SLOTS:
            labs = self.labels.get(slot)
            if labs is None:
                raise ValueError(f"vocabulary missing slot {slot!r}")
            if NONE not in labs:
                raise ValueError(f"slot {slot!r} has no {NONE!r} label")
            if len(set(labs)) != len(labs):
                raise ValueError(f"slot {slot!r} has duplicate labels")
            unknown = set(labs) - set(SYMBOLS)
            if unknown:
                raise ValueError(f"slot {slot!r} uses unknown symbols {sorted(unknown)}")

    @classmethod
    def default(cls) -> "SlotVocabulary":
        return cls({
            "subject": ("Performer", "A", "B", NONE),
            "object": ("A", "B", NONE),
            "locative": ("A", "B", NONE),
            "verb": ("push", "pull", "slide", "roll", NONE),
            "preposition": ("toward", "away_from", "past", NONE),
        })

    def size(self, slot: str) -> int:
        return len(self.labels[slot])

    def sizes(self) -> dict[str, int]:
        return {s: len(self.labels[s]) for s in SLOTS}

    def index(self, slot: str, label: str) -> int:
        try:
            return self.labels[slot].index(label)
        except ValueError:
            raise ValueError(f"label {label!r} not in slot {slot!r}") from None

    def label(self, slot: str, index: int) -> str:
        return self.labels[slot][index]

    def none_index(self, slot: str) -> int:
        return self.labels[slot].index(NONE)

    def to_dict(self) -> dict[str, list[str]]:
        return {s: list(self.labels[s]) for s in SLOTS}

    @classmethod
    def from_dict(cls, d: Mapping[str, list[str]]) -> "SlotVocabulary":
        return cls({s: tuple(d[s]) for s in SLOTS})


DEFAULT_VOCAB = SlotVocabulary.default()


@dataclass(frozen=True)
class EventTuple:
    """One label index per slot."""

    subject: int
    object: int
    locative: int
    verb: int
    preposition: int

    def as_tuple(self) -> tuple[int, ...]:
        return (self.subject, self.object, self.locative, self.verb, self.preposition)

    @classmethod
    def from_labels(cls, vocab: SlotVocabulary = DEFAULT_VOCAB, **labels: str) -> "EventTuple":
        return cls(**{s: vocab.index(s, labels.get(s, NONE)) for s in SLOTS})

    @classmethod
    def from_sequence(cls, seq) -> "EventTuple":
        return cls(*(int(v) for v in seq))

    def labels(self, vocab: SlotVocabulary = DEFAULT_VOCAB) -> dict[str, str]:
        return {s: vocab.label(s, getattr(self, s)) for s in SLOTS}

    def check_range(self, vocab: SlotVocabulary = DEFAULT_VOCAB) -> None:
        for s in SLOTS:
            if not 0 <= getattr(self, s) < vocab.size(s):
                raise ValueError(f"{s} index {getattr(self, s)} out of range")


def none_tuple(vocab: SlotVocabulary = DEFAULT_VOCAB) -> EventTuple:
    return EventTuple(*(vocab.none_index(s) for s in SLOTS))


def is_valid(t: EventTuple, vocab: SlotVocabulary = DEFAULT_VOCAB) -> tuple[bool, list[str]]:
    """Check the output constraints; returns ``(valid, violations)``."""
    lab = t.labels(vocab)
    violations = []
    seen: dict[str, str] = {}
    for slot in ENTITY_SLOTS:
        ent = lab[slot]
        if ent == NONE:
            continue
        if ent in seen:
            violations.append(f"duplicate entity {ent!r} in {seen[ent]} and {slot}")
        else:
            seen[ent] = slot
    if lab["verb"] == NONE:
        filled = [s for s in SLOTS if s != "verb" and lab[s] != NONE]
        if filled:
            violations.append(f"verb is None but {', '.join(filled)} filled")
    if (lab["locative"] == NONE) != (lab["preposition"] == NONE):
        violations.append("locative and preposition must be None together")
    return not violations, violations


def _third_person(verb: str) -> str:
    return verb + ("es" if verb.endswith(("sh", "ch", "s", "x")) else "s")


def render(t: EventTuple, vocab: SlotVocabulary = DEFAULT_VOCAB) -> str:
    """Sentence form, e.g. ``"The performer pushes A toward B"``; all-None gives ``"None"``."""
    lab = t.labels(vocab)
    if all(v == NONE for v in lab.values()):
        return NONE
    words = []
    subj = lab["subject"]
    words.append("The performer" if subj == "Performer" else ("Something" if subj == NONE else subj))
    if lab["verb"] != NONE:
        words.append(_third_person(lab["verb"]))
    if lab["object"] != NONE:
        words.append(lab["object"])
    if lab["preposition"] != NONE:
        words.append(lab["preposition"].replace("_", " "))
    if lab["locative"] != NONE:
        words.append(lab["locative"])
    return " ".join(words)


# ---------------------------------------------------------------------------
# potentials


@dataclass
class PotentialTable:
    """Slot unaries ``t_*`` and tree-edge potentials ``P_*``.

    Edge shapes: ``start_l (n_loc,)``, ``ls (n_loc, n_subj)``,
    ``lo (n_loc, n_obj)``, ``lp (n_loc, n_prep)``, ``sv (n_subj, n_verb)``.
    A missing edge counts as all zeros. Entries are numpy arrays or
    :class:`~hoicrf.numerics.Tensor` (for training).
    """

    subject: object
    object: object
    locative: object
    verb: object
    preposition: object
    start_l: object = None
    ls: object = None
    lo: object = None
    lp: object = None
    sv: object = None

    @property
    def has_edges(self) -> bool:
        return any(getattr(self, e) is not None for e in EDGES)

    def unaries(self) -> dict:
        return {s: getattr(self, s) for s in SLOTS}

    def without_edges(self) -> "PotentialTable":
        return PotentialTable(**self.unaries())

    def numpy(self) -> "PotentialTable":
        def val(x):
            if x is None:
                return None
            return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)

        return PotentialTable(**{f.name: val(getattr(self, f.name)) for f in fields(self)})

    def filled_edges(self) -> dict[str, np.ndarray]:
        """Edge arrays with zeros substituted for missing edges (numpy)."""
        t = self.numpy()
        n = {s: np.shape(getattr(t, s))[-1] for s in SLOTS}
        shapes = {
            "start_l": (n["locative"],),
            "ls": (n["locative"], n["subject"]),
            "lo": (n["locative"], n["object"]),
            "lp": (n["locative"], n["preposition"]),
            "sv": (n["subject"], n["verb"]),
        }
        return {e: (np.zeros(shapes[e]) if getattr(t, e) is None else getattr(t, e)) for e in EDGES}


def random_table(
    rng: np.random.Generator,
    sizes: Mapping[str, int],
    scale: float = 1.0,
    edges: bool = True,
) -> PotentialTable:
    """Gaussian potentials; handy for tests and Monte-Carlo comparisons."""
    t = {s: rng.normal(0.0, scale, sizes[s]) for s in SLOTS}
    if edges:
        t["start_l"] = rng.normal(0.0, scale, sizes["locative"])
        t["ls"] = rng.normal(0.0, scale, (sizes["locative"], sizes["subject"]))
        t["lo"] = rng.normal(0.0, scale, (sizes["locative"], sizes["object"]))
        t["lp"] = rng.normal(0.0, scale, (sizes["locative"], sizes["preposition"]))
        t["sv"] = rng.normal(0.0, scale, (sizes["subject"], sizes["verb"]))
    return PotentialTable(**t)


def tuple_score(p: PotentialTable, t: EventTuple) -> float:
    """Sum of the five unaries and five edge potentials selected by ``t``."""
    q = p.numpy()
    e = q.filled_edges()
    l, s, o, v, pr = t.locative, t.subject, t.object, t.verb, t.preposition
    total = q.locative[l] + q.subject[s] + q.object[o] + q.preposition[pr] + q.verb[v]
    total = total + e["start_l"][l] + e["ls"][l, s] + e["lo"][l, o] + e["lp"][l, pr] + e["sv"][s, v]
    return float(total)


# ---------------------------------------------------------------------------
# sum-product (differentiable)


def _expand(x: Tensor, axis: int) -> Tensor:
    shape = list(x.shape)
    shape.insert(axis % (x.ndim + 1), 1)
    return nx.reshape(x, shape)


def _child_message(child: Tensor, edge, grandchild: Tensor | None = None) -> Tensor:
    """``log sum_c exp(t_c + P[parent, c] (+ m_c))`` for every parent label."""
    # child: (..., n_c) -> (..., 1, n_c)
    z = _expand(child, -2)
    if grandchild is not None:
        z = z + _expand(grandchild, -2)
    if edge is not None:
        z = z + edge
    return nx.log_sum_exp(z, axis=-1)


def _as_tensors(p: PotentialTable) -> tuple[PotentialTable, bool]:
    tracked = any(isinstance(getattr(p, f.name), Tensor) for f in fields(p))
    conv = {
        f.name: (None if getattr(p, f.name) is None else nx.as_tensor(getattr(p, f.name)))
        for f in fields(p)
    }
    return PotentialTable(**conv), tracked


def _log_partition_tensor(p: PotentialTable) -> Tensor:
    if not p.has_edges:
        total = None
        for s in SLOTS:
            z = nx.log_sum_exp(getattr(p, s), axis=-1)
            total = z if total is None else total + z
        return total
    msg_v = _child_message(p.verb, p.sv)                      # (..., n_subj)
    msg_s = _child_message(p.subject, p.ls, grandchild=msg_v)  # (..., n_loc)
    msg_o = _child_message(p.object, p.lo)
    msg_p = _child_message(p.preposition, p.lp)
    root = p.locative + msg_s + msg_o + msg_p
    if p.start_l is not None:
        root = root + p.start_l
    return nx.log_sum_exp(root, axis=-1)


def log_partition(p: PotentialTable):
    """Log of the sum of ``exp(tuple_score)`` over every tuple, by message passing.

    Returns a :class:`Tensor` when any potential is a Tensor, else a float
    (or an array for batched unaries).
    """
    tp, tracked = _as_tensors(p)
    out = _log_partition_tensor(tp)
    if tracked:
        return out
    return float(out.data) if out.ndim == 0 else out.data


def _gold_columns(gold, batch_shape: tuple[int, ...]) -> dict[str, np.ndarray | int]:
    if isinstance(gold, EventTuple):
        return {s: getattr(gold, s) for s in SLOTS}
    g = np.asarray(gold, dtype=np.int64)
    if g.shape[-1] != len(SLOTS):
        raise ValueError(f"gold must have {len(SLOTS)} columns, got shape {g.shape}")
    return {s: g[..., i] for i, s in enumerate(SLOTS)}


def _pick(x: Tensor, idx) -> Tensor:
    if x.ndim == 1:
        return x[int(idx)] if np.ndim(idx) == 0 else x[np.asarray(idx)]
    rows = np.arange(x.shape[0])
    return x[rows, np.asarray(idx)]


def _pick_edge(edge: Tensor, i, j) -> Tensor:
    if np.ndim(i) == 0:
        return edge[int(i), int(j)]
    return edge[np.asarray(i), np.asarray(j)]


def _gold_score(p: PotentialTable, gold) -> Tensor:
    batch = p.subject.shape[:-1]
    g = _gold_columns(gold, batch)
    score = None
    for s in ("locative", "subject", "object", "preposition", "verb"):
        term = _pick(getattr(p, s), g[s])
        score = term if score is None else score + term
    pairs = {
        "start_l": None,
        "ls": ("locative", "subject"),
        "lo": ("locative", "object"),
        "lp": ("locative", "preposition"),
        "sv": ("subject", "verb"),
    }
    for e, pair in pairs.items():
        edge = getattr(p, e)
        if edge is None:
            continue
        if pair is None:
            term = _pick(edge, g["locative"])
        else:
            term = _pick_edge(edge, g[pair[0]], g[pair[1]])
        score = score + term
    return score


def _finish(out: Tensor, tracked: bool):
    if tracked:
        return out
    return float(out.data) if out.ndim == 0 else out.data


def loss_crf(p: PotentialTable, gold):
    """Negative log-likelihood of ``gold`` under the tree-CRF distribution.

    With batched unaries ``gold`` is an integer array ``(B, 5)`` in slot
    order and the per-sample losses are returned.
    """
    tp, tracked = _as_tensors(p)
    return _finish(_log_partition_tensor(tp) - _gold_score(tp, gold), tracked)


def loss_joint(p: PotentialTable, gold):
    """Joint softmax over summed unaries; edge potentials are ignored."""
    tp, tracked = _as_tensors(p.without_edges())
    return _finish(_log_partition_tensor(tp) - _gold_score(tp, gold), tracked)


def loss_independent(p: PotentialTable, gold):
    """Sum of five per-slot softmax cross-entropies; edges are ignored."""
    tp, tracked = _as_tensors(p.without_edges())
    g = _gold_columns(gold, tp.subject.shape[:-1])
    total = None
    for s in SLOTS:
        u = getattr(tp, s)
        ce = nx.log_sum_exp(u, axis=-1) - _pick(u, g[s])
        total = ce if total is None else total + ce
    return _finish(total, tracked)


LOSSES = {"I": loss_independent, "W": loss_joint, "CRF": loss_crf}


# ---------------------------------------------------------------------------
# max-product decoding


def decode_batch(p: PotentialTable) -> tuple[np.ndarray, np.ndarray]:
    """Max-product decoding over leading batch dimensions.

    Returns ``(tuples, scores)`` where ``tuples`` has a trailing axis of five
    label indices in slot order. Ties resolve to the lowest label index.
    """
    q = p.numpy()
    e = q.filled_edges()
    batch = np.shape(q.subject)[:-1]
    t = {s: np.asarray(getattr(q, s)).reshape((-1, np.shape(getattr(q, s))[-1])) for s in SLOTS}
    n_b = t["subject"].shape[0]

    # verb given subject
    z_v = t["verb"][:, None, :] + e["sv"][None]
    arg_v = z_v.argmax(axis=-1)                       # (B, n_subj)
    max_v = np.take_along_axis(z_v, arg_v[..., None], -1)[..., 0]
    # children of locative
    z_s = t["subject"][:, None, :] + e["ls"][None] + max_v[:, None, :]
    arg_s = z_s.argmax(axis=-1)                       # (B, n_loc)
    max_s = np.take_along_axis(z_s, arg_s[..., None], -1)[..., 0]
    z_o = t["object"][:, None, :] + e["lo"][None]
    arg_o = z_o.argmax(axis=-1)
    max_o = np.take_along_axis(z_o, arg_o[..., None], -1)[..., 0]
    z_p = t["preposition"][:, None, :] + e["lp"][None]
    arg_p = z_p.argmax(axis=-1)
    max_p = np.take_along_axis(z_p, arg_p[..., None], -1)[..., 0]
    root = t["locative"] + e["start_l"][None] + max_s + max_o + max_p
    loc = root.argmax(axis=-1)

    rows = np.arange(n_b)
    subj = arg_s[rows, loc]
    out = np.stack([
        subj,
        arg_o[rows, loc],
        loc,
        arg_v[rows, subj],
        arg_p[rows, loc],
    ], axis=-1)
    scores = _scores_of(t, e, out)
    return out.reshape(batch + (5,)), scores.reshape(batch)


def _scores_of(t: dict, e: dict, tuples: np.ndarray) -> np.ndarray:
    rows = np.arange(tuples.shape[0])
    s, o, l, v, pr = (tuples[:, i] for i in range(5))
    total = (
        t["locative"][rows, l] + t["subject"][rows, s] + t["object"][rows, o]
        + t["preposition"][rows, pr] + t["verb"][rows, v]
    )
    total = total + e["start_l"][l] + e["ls"][l, s] + e["lo"][l, o] + e["lp"][l, pr] + e["sv"][s, v]
    return total


def decode(p: PotentialTable) -> tuple[EventTuple, float]:
    """Highest-scoring tuple of an unbatched table and its score."""
    tuples, scores = decode_batch(p)
    if tuples.ndim != 1:
        raise ValueError("decode expects an unbatched table; use decode_batch")
    best = EventTuple.from_sequence(tuples)
    return best, tuple_score(p, best)


def argmax_slots(p: PotentialTable) -> np.ndarray:
    """Per-slot argmax of the unaries, slot order on the last axis."""
    q = p.numpy()
    return np.stack([np.asarray(getattr(q, s)).argmax(axis=-1) for s in SLOTS], axis=-1)


_VALID_CACHE: dict[tuple, np.ndarray] = {}


def valid_tuples(vocab: SlotVocabulary = DEFAULT_VOCAB) -> np.ndarray:
    """All tuples (rows, slot order) that satisfy :func:`is_valid`."""
    key = tuple(tuple(vocab.labels[s]) for s in SLOTS)
    if key not in _VALID_CACHE:
        ranges = [range(vocab.size(s)) for s in SLOTS]
        rows = [c for c in itertools.product(*ranges) if is_valid(EventTuple(*c), vocab)[0]]
        _VALID_CACHE[key] = np.array(rows, dtype=np.int64)
    return _VALID_CACHE[key]


def _constrain(p: PotentialTable, tuples: np.ndarray, vocab: SlotVocabulary) -> np.ndarray:
    q = p.numpy()
    e = q.filled_edges()
    flat = tuples.reshape(-1, 5).copy()
    t = {s: np.asarray(getattr(q, s)).reshape(flat.shape[0], -1) for s in SLOTS}
    cands = valid_tuples(vocab)
    valid_rows = {tuple(r) for r in cands}
    for i, row in enumerate(flat):
        if tuple(row) in valid_rows:
            continue
        ti = {s: t[s][i:i + 1].repeat(len(cands), axis=0) for s in SLOTS}
        sc = _scores_of(ti, e, cands)
        flat[i] = cands[int(np.argmax(sc))]
    return flat.reshape(tuples.shape)


def predict(
    head: str,
    p: PotentialTable,
    constrained: bool = False,
    vocab: SlotVocabulary = DEFAULT_VOCAB,
) -> np.ndarray:
    """Predicted label indices for head ``I``, ``W`` or ``CRF``.

    ``I`` and ``W`` take the per-slot argmax (their edges are absent);
    ``CRF`` runs max-product decoding. ``constrained`` swaps an invalid
    prediction for the best-scoring valid tuple.
    """
    head = normalize_head(head)
    if head == "CRF":
        out, _ = decode_batch(p)
    else:
        out = argmax_slots(p)
    if constrained:
        out = _constrain(p if head == "CRF" else p.without_edges(), out, vocab)
    return out


def normalize_head(head: str) -> str:
    key = str(head).upper().replace("LSTM_", "").replace("LSTM-", "")
    if key not in VARIANTS:
        raise ConfigError(f"unknown head variant {head!r}; expected one of {VARIANTS}")
    return key
