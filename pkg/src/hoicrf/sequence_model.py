"""LSTM encoder: per-frame linear projection, recurrence, slot heads.

Gate layout inside the fused ``lstm.W_*`` matrices is ``[input, forget,
output, candidate]``, each ``hidden_size`` wide.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor
from .structured import DEFAULT_VOCAB, EDGES, SLOTS, ConfigError, PotentialTable, SlotVocabulary

N_FRAMES = 20
N_JOINTS = 13
N_OBJECTS = 2
N_FEATURES = N_JOINTS * 3 + N_OBJECTS * 12  # 63


@dataclass(frozen=True)
class FeatureSegment:
    """A fixed-length window of frame features with its (optional) gold tuple."""

    frames: np.ndarray
    gold: object = None  # EventTuple or None while unlabeled
    session_id: str = ""
    segment_index: int = 0
    start_frame: int = 0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.shape != (N_FRAMES, N_FEATURES):
            raise DimensionError(
                f"segment frames must be {N_FRAMES}x{N_FEATURES}, got {f.shape}"
            )
        if not np.all(np.isfinite(f)):
            raise ValueError("segment frames contain non-finite values")
        object.__setattr__(self, "frames", f)


@dataclass
class ModelConfig:
    n_features: int = N_FEATURES
    input_size: int = 128
    hidden_size: int = 200
    keep_prob: float = 0.8
    # False: five heads over one shared LSTM; True: one LSTM per slot
    separate_lstms: bool = False
    edges: bool = False
    init_scale: float = 0.08
    forget_bias: float = 1.0

    def validate(self) -> None:
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        for name in ("n_features", "input_size", "hidden_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.init_scale < 0:
            raise ConfigError("init_scale must be non-negative")


@dataclass
class ModelParams:
    """Named parameter tensors plus the shapes they were built for."""

    config: ModelConfig
    vocab: SlotVocabulary
    tensors: dict[str, Tensor] = field(default_factory=dict)
    # per-feature standardization fitted on the training frames; not trained
    input_mean: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def fit_normalizer(self, frames: np.ndarray) -> None:
        flat = np.asarray(frames, dtype=np.float64).reshape(-1, self.config.n_features)
        self.input_mean = flat.mean(axis=0)
        self.input_scale = flat.std(axis=0) + 1e-6

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        if self.input_mean is None:
            return frames
        return (frames - self.input_mean) / self.input_scale

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        vocab: SlotVocabulary = DEFAULT_VOCAB,
        rng: np.random.Generator | None = None,
    ) -> "ModelParams":
        config.validate()
        rng = np.random.default_rng(0) if rng is None else rng
        a = config.init_scale
        H, D = config.hidden_size, config.input_size

        def u(*shape):
            return Tensor(rng.uniform(-a, a, shape), requires_grad=True)

        t: dict[str, Tensor] = {}
        t["input.W"] = u(config.n_features, D)
        t["input.b"] = Tensor(np.zeros(D), requires_grad=True)
        for prefix in _lstm_prefixes(config):
            t[f"{prefix}.W_x"] = u(D, 4 * H)
            t[f"{prefix}.W_h"] = u(H, 4 * H)
            b = np.zeros(4 * H)
            b[H:2 * H] = config.forget_bias
            t[f"{prefix}.b"] = Tensor(b, requires_grad=True)
        for s in SLOTS:
            t[f"head.{s}.W"] = u(H, vocab.size(s))
            t[f"head.{s}.b"] = Tensor(np.zeros(vocab.size(s)), requires_grad=True)
        if config.edges:
            # zero start: the CRF head begins as the joint head exactly
            n = vocab.sizes()
            shapes = {
                "start_l": (n["locative"],),
                "ls": (n["locative"], n["subject"]),
                "lo": (n["locative"], n["object"]),
                "lp": (n["locative"], n["preposition"]),
                "sv": (n["subject"], n["verb"]),
            }
            for e in EDGES:
                t[f"edge.{e}"] = Tensor(np.zeros(shapes[e]), requires_grad=True)
        return cls(config, vocab, t)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def named(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.grad = None

    @property
    def has_edges(self) -> bool:
        return any(k.startswith("edge.") for k in self.tensors)

    def edges(self) -> dict[str, Tensor | None]:
        return {e: self.tensors.get(f"edge.{e}") for e in EDGES}

    def copy(self) -> "ModelParams":
        return ModelParams(
            ModelConfig(**asdict(self.config)),
            self.vocab,
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
            None if self.input_mean is None else self.input_mean.copy(),
            None if self.input_scale is None else self.input_scale.copy(),
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    @classmethod
    def from_state(
        cls, config: ModelConfig, vocab: SlotVocabulary, state: Mapping[str, np.ndarray]
    ) -> "ModelParams":
        ref = cls.init(config, vocab, np.random.default_rng(0))
        missing = set(ref.tensors) - set(state)
        extra = set(state) - set(ref.tensors)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        tensors = {}
        for k, v in ref.tensors.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise DimensionError(f"parameter {k}: expected {v.shape}, got {arr.shape}")
            tensors[k] = Tensor(arr.copy(), requires_grad=True)
        return cls(config, vocab, tensors)


def _lstm_prefixes(config: ModelConfig) -> list[str]:
    if config.separate_lstms:
        return [f"lstm.{s}" for s in SLOTS]
    return ["lstm"]


def _cell_from_gates(gates: Tensor, c: Tensor, H: int) -> tuple[Tensor, Tensor]:
    sig = nx.sigmoid(gates[..., : 3 * H])
    g = nx.tanh(gates[..., 3 * H:])
    i = sig[..., :H]
    f = sig[..., H: 2 * H]
    o = sig[..., 2 * H: 3 * H]
    c_new = f * c + i * g
    h_new = o * nx.tanh(c_new)
    return h_new, c_new


def lstm_cell(x, h, c, params: ModelParams, prefix: str = "lstm") -> tuple[Tensor, Tensor]:
    """One recurrent step: returns ``(h', c')``."""
    W_x, W_h, b = params[f"{prefix}.W_x"], params[f"{prefix}.W_h"], params[f"{prefix}.b"]
    x, h, c = nx.as_tensor(x), nx.as_tensor(h), nx.as_tensor(c)
    H = W_h.shape[0]
    if h.shape[-1] != H or c.shape[-1] != H:
        raise DimensionError(f"lstm_cell: state shapes {h.shape}, {c.shape} vs hidden {H}")
    gates = x @ W_x + h @ W_h + b
    return _cell_from_gates(gates, c, H)


def apply_dropout(h, keep_prob: float, rng: np.random.Generator):
    """Inverted dropout: keep each unit with ``keep_prob`` and rescale by its inverse."""
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if keep_prob == 1.0:
        return h
    shape = h.shape if isinstance(h, Tensor) else np.shape(h)
    mask = (rng.random(shape) < keep_prob) / keep_prob
    if isinstance(h, Tensor):
        return h * mask
    return np.asarray(h, dtype=np.float64) * mask


def _run_lstm(frames: np.ndarray, params: ModelParams, prefix: str, H: int) -> tuple[Tensor, Tensor]:
    # linear input projection folded into the input-to-gate weights:
    # (x W_in + b_in) W_x + b == x (W_in W_x) + (b_in W_x + b)
    W_x = params[f"{prefix}.W_x"]
    W_in = params["input.W"] @ W_x
    b_in = params["input.b"] @ W_x + params[f"{prefix}.b"]
    W_h = params[f"{prefix}.W_h"]
    batch = frames.shape[:-2]
    h = Tensor(np.zeros(batch + (H,)))
    c = Tensor(np.zeros(batch + (H,)))
    for t in range(frames.shape[-2]):
        gates = nx.matmul(frames[..., t, :], W_in) + b_in + h @ W_h
        h, c = _cell_from_gates(gates, c, H)
    return h, c


def _frames_array(segment) -> np.ndarray:
    if isinstance(segment, FeatureSegment):
        return segment.frames
    if isinstance(segment, (list, tuple)) and segment and isinstance(segment[0], FeatureSegment):
        return np.stack([s.frames for s in segment])
    return np.asarray(segment, dtype=np.float64)


def encode(
    segment,
    params: ModelParams,
    dropout_active: bool = False,
    rng: np.random.Generator | None = None,
    return_state: bool = False,
):
    """Run the encoder and emit one unary score vector per slot.

    ``segment`` is a :class:`FeatureSegment`, a list of them, or an array of
    shape ``(T, F)`` / ``(B, T, F)``. Returns a dict ``slot -> Tensor``.
    """
    cfg = params.config
    frames = _frames_array(segment)
    if frames.shape[-1] != cfg.n_features or frames.ndim not in (2, 3):
        raise DimensionError(
            f"encode: frames {frames.shape} do not match {cfg.n_features} features"
        )
    if dropout_active and rng is None:
        raise ConfigError("dropout requires a seeded generator")
    H = cfg.hidden_size
    frames = params.normalize(frames)

    finals: dict[str, Tensor] = {}
    cells: dict[str, Tensor] = {}
    if cfg.separate_lstms:
        for s in SLOTS:
            finals[s], cells[s] = _run_lstm(frames, params, f"lstm.{s}", H)
    else:
        h, c = _run_lstm(frames, params, "lstm", H)
        finals = {s: h for s in SLOTS}
        cells = {s: c for s in SLOTS}

    if dropout_active and cfg.keep_prob < 1.0:
        if cfg.separate_lstms:
            finals = {s: apply_dropout(finals[s], cfg.keep_prob, rng) for s in SLOTS}
        else:
            dropped = apply_dropout(finals[SLOTS[0]], cfg.keep_prob, rng)
            finals = {s: dropped for s in SLOTS}

    scores = {s: finals[s] @ params[f"head.{s}.W"] + params[f"head.{s}.b"] for s in SLOTS}
    if return_state:
        return scores, finals, cells
    return scores


def potentials(scores: Mapping[str, Tensor], params: ModelParams, use_edges: bool) -> PotentialTable:
    """Bundle slot scores with the model's shared edge potentials."""
    kw = dict(scores)
    if use_edges:
        kw.update(params.edges())
    return PotentialTable(**kw)


def global_norm(grads) -> float:
    items = grads.values() if isinstance(grads, Mapping) else grads
    total = 0.0
    for g in items:
        total += float(np.sum(np.square(g)))
    return float(np.sqrt(total))


def clip_global_norm(grads, threshold: float):
    """Scale every gradient by ``threshold / norm`` when the joint norm exceeds it.

    Accepts a list or a name -> array mapping and returns the same kind.
    """
    if threshold <= 0:
        raise ConfigError(f"clip threshold must be positive, got {threshold}")
    norm = global_norm(grads)
    scale = threshold / norm if norm > threshold else 1.0
    if isinstance(grads, Mapping):
        return {k: np.asarray(g) * scale for k, g in grads.items()}
    return [np.asarray(g) * scale for g in grads]
