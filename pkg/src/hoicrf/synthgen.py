"""Synthetic tabletop sessions: a performer moving one of two marked objects.

Frame layout (63 values): 13 upper-body joints x (x, y, z), then the four
marker corners of object A and of object B, each (x, y, z).

World frame: ``x`` lateral (performer's right positive), ``y`` up with the
table top at ``y = 0``, ``z`` depth away from the performer. The camera
sits across the table, so markers are vertical squares on each object's
``+z`` face.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .sequence_model import N_FEATURES, N_FRAMES, FeatureSegment
from .structured import DEFAULT_VOCAB, NONE, EventTuple, SlotVocabulary, is_valid, none_tuple

VERBS = ("push", "pull", "slide", "roll")
PREPOSITIONS = ("toward", "away_from", "past")
OBJECTS = ("A", "B")

JOINTS = (
    "head", "neck", "spine_shoulder", "spine_mid", "spine_base",
    "shoulder_left", "elbow_left", "wrist_left", "hand_left",
    "shoulder_right", "elbow_right", "wrist_right", "hand_right",
)
_REST_POSE = np.array([
    [0.00, 0.78, -0.40],
    [0.00, 0.62, -0.38],
    [0.00, 0.56, -0.37],
    [0.00, 0.36, -0.39],
    [0.00, 0.12, -0.41],
    [-0.18, 0.53, -0.37],
    [-0.22, 0.30, -0.34],
    [-0.20, 0.10, -0.26],
    [-0.19, 0.05, -0.22],
    [0.18, 0.53, -0.37],
    [0.22, 0.30, -0.34],
    [0.20, 0.10, -0.26],
    [0.19, 0.05, -0.22],
])
_UPPER = [0, 1, 2, 5, 9]          # joints that lean with the active hand
_ARM = {"left": (5, 6, 7, 8), "right": (9, 10, 11, 12)}

PHASES = ("idle", "reach", "contact_motion", "free_motion", "rest")
# tie-break when two phases cover equally many frames of a window
_PHASE_PRIORITY = ("contact_motion", "free_motion", "reach", "idle", "rest")

MARKER_HALF = 0.04                # marker square side 0.08 m
ROLL_RADIUS = 0.05
TABLE_X = (-0.7, 0.7)
TABLE_Z = (0.0, 1.0)
MAX_STEP = 0.15                   # per-frame displacement bound (pre-noise)


class GenerationError(ValueError):
    """Requested scene cannot be laid out on the table."""


class SlicingError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    verb: str
    preposition: str | None = None
    moving_object: str = "A"
    reference_object: str | None = None
    duration_frames: int = 80
    noise_std: float = 0.01
    rng_seed: int = 0
    # optional (x, z) override for the reference object's table position
    reference_position: tuple[float, float] | None = None

    def __post_init__(self):
        if self.verb not in VERBS:
            raise ValueError(f"unknown verb {self.verb!r}")
        if self.preposition is not None and self.preposition not in PREPOSITIONS:
            raise ValueError(f"unknown preposition {self.preposition!r}")
        if self.moving_object not in OBJECTS:
            raise ValueError(f"unknown moving object {self.moving_object!r}")
        if (self.preposition is None) != (self.reference_object is None):
            raise ValueError("preposition and reference object must be given together")
        if self.reference_object is not None and (
            self.reference_object not in OBJECTS or self.reference_object == self.moving_object
        ):
            raise ValueError("reference object must be the other object")
        if self.duration_frames < N_FRAMES:
            raise ValueError(f"duration_frames must be >= {N_FRAMES}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def other_object(self) -> str:
        return "B" if self.moving_object == "A" else "A"


@dataclass
class Session:
    frames: np.ndarray            # (duration, 63), noisy and quantized
    clean: np.ndarray             # (duration, 63), before noise
    phase_track: list[str]
    spec: SceneSpec
    session_id: str = ""
    motion: dict = field(default_factory=dict)

    @property
    def duration(self) -> int:
        return self.frames.shape[0]

    def motion_frames(self) -> np.ndarray:
        return np.array([i for i, p in enumerate(self.phase_track) if p in ("contact_motion", "free_motion")])


# ---------------------------------------------------------------------------
# geometry helpers


def marker_corners(center_xz, angle: float = 0.0) -> np.ndarray:
    """Four corners (4, 3) of an object's marker, counter-clockwise from bottom-left."""
    cx, cz = center_xz
    local = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64) * MARKER_HALF
    c, s = np.cos(angle), np.sin(angle)
    rot = local @ np.array([[c, s], [-s, c]])
    out = np.empty((4, 3))
    out[:, 0] = cx + rot[:, 0]
    out[:, 1] = MARKER_HALF + rot[:, 1]
    out[:, 2] = cz + MARKER_HALF
    return out


def object_corners(frames: np.ndarray) -> np.ndarray:
    """(T, 2, 4, 3) marker corners of objects A and B."""
    f = np.asarray(frames)
    return f[..., 39:].reshape(f.shape[:-1] + (2, 4, 3))


def object_centroids(frames: np.ndarray) -> np.ndarray:
    """(T, 2, 3) marker centroids of objects A and B."""
    return object_corners(frames).mean(axis=-2)


def joints(frames: np.ndarray) -> np.ndarray:
    f = np.asarray(frames)
    return f[..., :39].reshape(f.shape[:-1] + (13, 3))


def _smoothstep(n: int) -> np.ndarray:
    """n samples rising from just above 0 to exactly 1."""
    x = np.arange(1, n + 1) / n
    return x * x * (3.0 - 2.0 * x)


def _phase_lengths(spec: SceneSpec, rng: np.random.Generator, min_reach: int) -> dict[str, int]:
    free = spec.verb in ("slide", "roll")
    n = {
        "idle": int(rng.integers(2, 7)),
        "reach": max(int(rng.integers(9, 13)), min_reach),
        "contact_motion": int(rng.integers(14, 21)) if free else int(rng.integers(38, 49)),
        "free_motion": int(rng.integers(26, 35)) if free else 0,
    }
    budget = spec.duration_frames - 1          # keep at least one rest frame
    if sum(n.values()) > budget:
        # squeeze motion then idle; reach keeps its length so the arm stays slow
        room = budget - n["reach"] - 1
        motion = n["contact_motion"] + n["free_motion"]
        # passing needs frames before, at and after the closest approach
        need = 3 if spec.preposition == "past" else (2 if free else 1)
        if room < need:
            raise GenerationError(f"duration {spec.duration_frames} too short for {spec.verb}")
        if motion > room:
            if free:
                c = min(max(1, round(n["contact_motion"] * room / motion)), room - 1)
                n["contact_motion"], n["free_motion"] = c, room - c
            else:
                n["contact_motion"] = room
        n["idle"] = min(n["idle"], budget - n["reach"] - n["contact_motion"] - n["free_motion"])
    n["rest"] = spec.duration_frames - sum(n.values())
    return n


def _layout(spec: SceneSpec, rng: np.random.Generator, distance: float):
    """Start position, unit direction, and reference position on the table."""
    if spec.verb == "push":
        u = np.array([0.0, 1.0])
    elif spec.verb == "pull":
        u = np.array([0.0, -1.0])
    else:
        u = np.array([1.0, 0.0]) * (1.0 if rng.random() < 0.5 else -1.0)
    perp = np.array([u[1], -u[0]])

    # along-path coordinates with the start at 0 and the end at `distance`
    prep = spec.preposition
    if prep == "toward":
        ref_along, ref_off = distance + rng.uniform(0.15, 0.25), 0.0
    elif prep == "away_from":
        ref_along, ref_off = -rng.uniform(0.15, 0.25), 0.0
    elif prep == "past":
        ref_along = distance * rng.uniform(0.35, 0.65)
        ref_off = rng.uniform(0.12, 0.2) * (1.0 if rng.random() < 0.5 else -1.0)
    else:
        ref_along = distance * rng.uniform(0.0, 1.0)
        ref_off = rng.uniform(0.3, 0.4) * (1.0 if rng.random() < 0.5 else -1.0)

    lo_along = min(0.0, ref_along)
    hi_along = max(distance, ref_along)
    lo_off, hi_off = min(0.0, ref_off), max(0.0, ref_off)
    margin = 0.06
    x_lo, x_hi = TABLE_X[0] + margin, TABLE_X[1] - margin
    z_lo, z_hi = TABLE_Z[0] + margin, TABLE_Z[1] - margin

    def span(axis_lo, axis_hi, lo, hi, coeff):
        # range of origin values so that origin + coeff*[lo, hi] stays inside
        a, b = sorted((coeff * lo, coeff * hi))
        return axis_lo - a, axis_hi - b

    # origin along each world axis from along-path and offset extents
    ranges = []
    for axis, (w_lo, w_hi) in enumerate(((x_lo, x_hi), (z_lo, z_hi))):
        a1, b1 = span(w_lo, w_hi, lo_along, hi_along, u[axis])
        a2, b2 = span(w_lo, w_hi, lo_off, hi_off, perp[axis])
        ranges.append((max(a1, a2), min(b1, b2)))
    if any(lo > hi for lo, hi in ranges):
        raise GenerationError("scene does not fit on the table")
    origin = np.array([rng.uniform(lo, hi) for lo, hi in ranges])
    ref = origin + u * ref_along + perp * ref_off

    if spec.reference_position is not None:
        ref = np.asarray(spec.reference_position, dtype=np.float64)
        _check_reference(prep, origin, u, distance, ref)
    return origin, u, ref


def _check_reference(prep, start, u, distance, ref) -> None:
    rel = ref - start
    along = float(rel @ u)
    off = float(abs(rel[0] * u[1] - rel[1] * u[0]))
    lined_up = off <= 0.02
    if prep == "toward":
        ok = lined_up and along > distance + 2 * MARKER_HALF
    elif prep == "away_from":
        ok = lined_up and along < -2 * MARKER_HALF
    elif prep == "past":
        ok = 0.0 < along < distance and off > 2 * MARKER_HALF
    else:
        ok = off > 2 * MARKER_HALF or along < -2 * MARKER_HALF or along > distance + 2 * MARKER_HALF
    if not ok:
        raise GenerationError(
            f"reference at {tuple(ref)} is inconsistent with {prep!r} for a path from "
            f"{tuple(start)} along {tuple(u)} of length {distance:.3f}"
        )


def _settle_past(spec: SceneSpec, start, u, ref, cum: np.ndarray) -> np.ndarray:
    """Keep the closest approach strictly inside the sampled motion frames."""
    rel = ref - start
    along = float(rel @ u)
    k = int(np.argmin(np.abs(cum - along)))
    if 0 < k < len(cum) - 1:
        return ref
    if spec.reference_position is not None or len(cum) < 3:
        raise GenerationError("too few motion frames to pass the reference object")
    # few motion frames: slide the reference along the path onto an inner frame
    k = min(max(k, 1), len(cum) - 2)
    return ref + u * (cum[k] - along)


def _speed_profile(spec: SceneSpec, n_contact: int, n_free: int, distance: float) -> np.ndarray:
    if n_free == 0:
        k = (np.arange(n_contact) + 0.5) / n_contact
        v = 0.4 + 0.6 * np.sin(np.pi * k)
    else:
        up = 0.3 + 0.7 * np.arange(1, n_contact + 1) / n_contact
        down = 1.0 - 0.85 * np.arange(1, n_free + 1) / n_free
        v = np.concatenate([up, down])
    return v * (distance / v.sum())


def _max_distance(verb: str, n_motion: int) -> float:
    """Longest path that keeps every corner under the per-frame bound."""
    peak = 1.7                                   # speed profile peak over its mean
    spin = 1.0 + np.sqrt(2.0) * MARKER_HALF / ROLL_RADIUS if verb == "roll" else 1.0
    return 0.8 * MAX_STEP * n_motion / (peak * spin)


def _grasp_point(verb: str, center_xz) -> np.ndarray:
    cx, cz = center_xz
    if verb == "push":
        return np.array([cx, 0.06, cz - MARKER_HALF - 0.03])
    return np.array([cx, 2 * MARKER_HALF + 0.02, cz])


def _pose(hand: np.ndarray, side: str, sway: np.ndarray) -> np.ndarray:
    pose = _REST_POSE.copy()
    shoulder_i, elbow_i, wrist_i, hand_i = _ARM[side]
    rest_hand = _REST_POSE[hand_i]
    lean = 0.12 * (hand - rest_hand)
    lean[1] = 0.0
    pose[_UPPER] += lean + sway
    shoulder = pose[shoulder_i]
    to_sh = shoulder - hand
    to_sh /= max(np.linalg.norm(to_sh), 1e-9)
    wrist = hand + 0.06 * to_sh
    elbow = 0.5 * (shoulder + wrist) + np.array([0.0, -0.1, 0.0])
    pose[wrist_i] = wrist
    pose[elbow_i] = elbow
    pose[hand_i] = hand
    return pose


def generate_session(spec: SceneSpec, session_id: str = "") -> Session:
    """Deterministic kinematics for one scene given ``spec.rng_seed``."""
    rng = np.random.default_rng(spec.rng_seed)
    distance = rng.uniform(0.25, 0.4)
    state = rng.bit_generator.state
    for _ in range(4):
        rng.bit_generator.state = state
        start, u, ref = _layout(spec, rng, distance)
        side = "right" if start[0] >= 0.0 else "left"
        hand_rest = _REST_POSE[_ARM[side][3]]
        grasp0 = _grasp_point(spec.verb, start)
        # smoothstep peaks at 1.5x the mean speed
        min_reach = int(np.ceil(1.5 * np.linalg.norm(grasp0 - hand_rest) / (0.8 * MAX_STEP)))
        n = _phase_lengths(spec, rng, min_reach)
        cap = _max_distance(spec.verb, n["contact_motion"] + n["free_motion"])
        if distance <= cap:
            break
        distance = cap  # short session: travel less, then lay the scene out again

    T = spec.duration_frames
    phases: list[str] = []
    for name in PHASES:
        phases.extend([name] * n[name])

    v = _speed_profile(spec, n["contact_motion"], n["free_motion"], distance)
    cum = np.cumsum(v)
    if spec.preposition == "past":
        ref = _settle_past(spec, start, u, ref, cum)
    t0 = n["idle"] + n["reach"]
    n_motion = len(v)
    along = np.zeros(T)
    along[t0:t0 + n_motion] = cum
    along[t0 + n_motion:] = distance
    moving_xz = start[None, :] + along[:, None] * u[None, :]
    angle = np.zeros(T)
    if spec.verb == "roll":
        # rolling without slipping: rotation proportional to distance travelled
        angle = -np.sign(u[0]) * along / ROLL_RADIUS

    # hand trajectory
    hand = np.tile(hand_rest, (T, 1))
    r0 = n["idle"]
    w = _smoothstep(n["reach"])
    hand[r0:t0] = hand_rest + w[:, None] * (grasp0 - hand_rest)
    c_end = t0 + n["contact_motion"]
    for t in range(t0, c_end):
        hand[t] = _grasp_point(spec.verb, moving_xz[t])
    release = _grasp_point(spec.verb, moving_xz[c_end - 1]) if c_end > t0 else grasp0
    n_retract = n["free_motion"] if n["free_motion"] else 12
    n_retract = max(n_retract, int(np.ceil(1.5 * np.linalg.norm(hand_rest - release) / (0.8 * MAX_STEP))))
    # a short session may end before the hand is back at rest
    k = min(n_retract, T - c_end)
    w = _smoothstep(n_retract)[:k]
    hand[c_end:c_end + k] = release + w[:, None] * (hand_rest - release)

    phase0 = rng.uniform(0, 2 * np.pi)
    clean = np.empty((T, N_FEATURES))
    other_corners = marker_corners(ref)
    mov_i = OBJECTS.index(spec.moving_object)
    for t in range(T):
        sway = 0.008 * np.array([np.sin(0.15 * t + phase0), 0.0, np.cos(0.11 * t + phase0)])
        pose = _pose(hand[t], side, sway)
        objs = [None, None]
        objs[mov_i] = marker_corners(moving_xz[t], angle[t])
        objs[1 - mov_i] = other_corners
        clean[t] = np.concatenate([pose.reshape(-1), objs[0].reshape(-1), objs[1].reshape(-1)])

    steps = np.abs(np.diff(clean, axis=0)).reshape(T - 1, -1, 3)
    if np.linalg.norm(steps, axis=-1).max(initial=0.0) > MAX_STEP:
        raise GenerationError("trajectory exceeds the per-frame displacement bound")

    noisy = clean + rng.normal(0.0, spec.noise_std, clean.shape) if spec.noise_std > 0 else clean.copy()
    frames = np.round(noisy, 6)
    motion = {
        "start": start.tolist(), "direction": u.tolist(), "distance": float(distance),
        "reference": ref.tolist(), "hand": side,
    }
    return Session(frames, clean, phases, spec, session_id, motion)


# ---------------------------------------------------------------------------
# slicing and annotation


def slice_session(s: Session, window: int = N_FRAMES, stride: int = 10) -> list[FeatureSegment]:
    """Cut ``s`` into unlabeled windows starting every ``stride`` frames."""
    if window < 1 or stride < 1:
        raise SlicingError("window and stride must be positive")
    if window > s.duration:
        raise SlicingError(f"window {window} exceeds session duration {s.duration}")
    count = (s.duration - window) // stride + 1
    return [
        FeatureSegment(
            s.frames[k * stride:k * stride + window],
            None, s.session_id, k, k * stride,
        )
        for k in range(count)
    ]


def dominant_phase(phases) -> str:
    counts = Counter(phases)
    best = max(counts.values())
    return next(p for p in _PHASE_PRIORITY if counts.get(p, 0) == best)


def auto_annotate(
    seg: FeatureSegment, s: Session, vocab: SlotVocabulary = DEFAULT_VOCAB
) -> EventTuple:
    """Label a window from the session's ground-truth phases."""
    phases = s.phase_track[seg.start_frame:seg.start_frame + seg.frames.shape[0]]
    phase = dominant_phase(phases)
    spec = s.spec
    ref = spec.reference_object or NONE
    prep = spec.preposition or NONE
    if phase == "contact_motion":
        t = EventTuple.from_labels(
            vocab, subject="Performer", object=spec.moving_object,
            locative=ref, verb=spec.verb, preposition=prep,
        )
    elif phase == "free_motion":
        t = EventTuple.from_labels(
            vocab, subject=spec.moving_object, object=NONE,
            locative=ref, verb=spec.verb, preposition=prep,
        )
    else:
        t = none_tuple(vocab)
    ok, why = is_valid(t, vocab)
    if not ok:  # pragma: no cover - rules above only build valid tuples
        raise AssertionError(f"annotation produced invalid tuple: {why}")
    return t


# ---------------------------------------------------------------------------
# corpus


@dataclass
class CorpusConfig:
    sessions_per_type: int = 30
    verbs: tuple[str, ...] = VERBS
    prepositions: tuple[str, ...] = PREPOSITIONS
    include_no_preposition: bool = False
    duration_frames: int = 80
    noise_std: float = 0.01
    window: int = N_FRAMES
    stride: int = 10
    train_fraction: float = 0.6
    seed: int = 42

    def validate(self) -> None:
        if self.sessions_per_type < 2:
            raise ValueError("sessions_per_type must be at least 2")
        for v in self.verbs:
            if v not in VERBS:
                raise ValueError(f"unknown verb {v!r}")
        for p in self.prepositions:
            if p not in PREPOSITIONS:
                raise ValueError(f"unknown preposition {p!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.window != N_FRAMES:
            raise ValueError(f"window must be {N_FRAMES} (fixed model input length)")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.duration_frames < self.window:
            raise ValueError("duration_frames must be at least the window")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    def event_types(self) -> list[tuple[str, str | None]]:
        preps: list[str | None] = list(self.prepositions)
        if self.include_no_preposition:
            preps.append(None)
        return [(v, p) for v in self.verbs for p in preps]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verbs"] = list(self.verbs)
        d["prepositions"] = list(self.prepositions)
        return d


@dataclass
class Corpus:
    train: list[FeatureSegment]
    test: list[FeatureSegment]
    manifest: dict


def _session_seed(master: int, ordinal: int) -> int:
    ss = np.random.SeedSequence([master, ordinal])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def type_name(verb: str, prep: str | None) -> str:
    return f"{verb}-{prep or 'none'}"


def build_corpus(config: CorpusConfig | None = None, vocab: SlotVocabulary = DEFAULT_VOCAB) -> Corpus:
    """Generate, split (by session, per event type), slice, and label."""
    config = config or CorpusConfig()
    config.validate()
    train: list[FeatureSegment] = []
    test: list[FeatureSegment] = []
    split: dict[str, dict[str, list[str]]] = {}
    ordinal = 0
    n_train = int(round(config.train_fraction * config.sessions_per_type))
    n_train = min(max(n_train, 1), config.sessions_per_type - 1)
    for type_idx, (verb, prep) in enumerate(config.event_types()):
        name = type_name(verb, prep)
        sessions = []
        for k in range(config.sessions_per_type):
            rng = np.random.default_rng(_session_seed(config.seed, ordinal))
            ordinal += 1
            moving = OBJECTS[int(rng.integers(2))]
            spec = SceneSpec(
                verb=verb,
                preposition=prep,
                moving_object=moving,
                reference_object=("B" if moving == "A" else "A") if prep else None,
                duration_frames=config.duration_frames,
                noise_std=config.noise_std,
                rng_seed=int(rng.integers(2**31 - 1)),
            )
            sessions.append(generate_session(spec, session_id=f"{name}-{k:03d}"))
        order = np.random.default_rng([config.seed, type_idx, 7]).permutation(len(sessions))
        train_ids = sorted(int(i) for i in order[:n_train])
        split[name] = {
            "train": [sessions[i].session_id for i in train_ids],
            "test": [sessions[i].session_id for i in sorted(int(i) for i in order[n_train:])],
        }
        for i, sess in enumerate(sessions):
            labeled = [
                FeatureSegment(seg.frames, auto_annotate(seg, sess, vocab), seg.session_id,
                               seg.segment_index, seg.start_frame)
                for seg in slice_session(sess, config.window, config.stride)
            ]
            (train if i in train_ids else test).extend(labeled)

    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "split": split,
        "counts": {
            "train_segments": len(train),
            "test_segments": len(test),
            "train_sessions": sum(len(v["train"]) for v in split.values()),
            "test_sessions": sum(len(v["test"]) for v in split.values()),
        },
    }
    return Corpus(train, test, manifest)


def corpus_digest(segments: list[FeatureSegment]) -> str:
    h = hashlib.sha256()
    for s in segments:
        h.update(s.session_id.encode())
        h.update(np.ascontiguousarray(s.frames).tobytes())
        if s.gold is not None:
            h.update(bytes(s.gold.as_tuple()))
    return h.hexdigest()
