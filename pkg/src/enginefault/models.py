"""Fault classifiers: an encoder-decoder transformer and a stacked tanh RNN.

Both map a (T, 27) sequence (or a (B, T, 27) batch) to per-step logits over
the 12 fault classes. Inputs are z-scored with stored per-channel statistics
before entering the network.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
import numpy as np

from . import nn
from .nn import functional as F
from .nn.tensor import Tensor, no_grad
from .preprocess import NUM_CHANNELS
from .testbed_sim import NUM_CLASSES


class ConfigError(ValueError):
    pass


@dataclass
class TransformerConfig:
    input_dim: int = NUM_CHANNELS
    num_heads: int = 9
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    dim_feedforward: int = 64
    dropout: float = 0.1
    num_classes: int = NUM_CLASSES
    window: int = 64
    positional_encoding: bool = True
    causal: bool = True

    def validate(self) -> None:
        if self.input_dim % self.num_heads:
            raise ConfigError(
                f"input_dim {self.input_dim} must be divisible by num_heads {self.num_heads}")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes must be {NUM_CLASSES}")
        if min(self.num_encoder_layers, self.num_decoder_layers, self.dim_feedforward, self.window) < 1:
            raise ConfigError("layer counts, dim_feedforward and window must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class RnnConfig:
    input_dim: int = NUM_CHANNELS
    hidden: int = 512
    layers: int = 10
    num_classes: int = NUM_CLASSES
    window: int = 64

    def validate(self) -> None:
        if self.layers < 1 or self.hidden < 1:
            raise ConfigError("RNN needs layers >= 1 and hidden >= 1")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes must be {NUM_CLASSES}")


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-np.log(10000.0) * (2 * (np.arange(dim) // 2)) / dim)
    angle = pos * rate[None, :]
    pe = np.where(np.arange(dim) % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


class _Classifier(nn.Module):
    kind = "base"

    def _init_norm(self, dim: int, dtype):
        self.norm_mean = np.zeros(dim, dtype=dtype)
        self.norm_std = np.ones(dim, dtype=dtype)

    def set_normalization(self, mean, std) -> None:
        std = np.asarray(std, dtype=np.float64)
        std = np.where(std > 1e-8, std, 1.0)
        self.norm_mean = np.asarray(mean, dtype=self.dtype)
        self.norm_std = std.astype(self.dtype)

    @property
    def dtype(self):
        return self.fc.weight.dtype

    def _prepare(self, x):
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        squeeze = data.ndim == 2
        if squeeze:
            data = data[None]
        if data.ndim != 3 or data.shape[-1] != self.config.input_dim:
            raise nn.ShapeError(
                f"expected (T, {self.config.input_dim}) or (B, T, {self.config.input_dim}) input, got {data.shape}")
        if data.shape[1] < 1:
            raise nn.ShapeError("sequence must have at least one step")
        z = ((data - self.norm_mean) / self.norm_std).astype(self.dtype)
        return z, squeeze

    def probabilities(self, x) -> np.ndarray:
        with no_grad():
            logits = self(x).data.astype(np.float64)
        return softmax_np(logits)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: TransformerConfig, rng, dtype):
        d = cfg.input_dim
        self.self_attn = nn.MultiHeadAttention(d, cfg.num_heads, rng, cfg.dropout, dtype)
        self.ff = nn.FeedForward(d, cfg.dim_feedforward, rng, cfg.dropout, dtype)
        self.norm1 = nn.LayerNorm(d, dtype=dtype)
        self.norm2 = nn.LayerNorm(d, dtype=dtype)
        self.dropout = cfg.dropout
        self.rng = rng

    def _drop(self, x):
        return F.dropout(x, self.dropout, self.rng, self.training)

    def forward(self, x, mask=None):
        x = self.norm1(x + self._drop(self.self_attn(x, x, x, mask)))
        return self.norm2(x + self._drop(self.ff(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: TransformerConfig, rng, dtype):
        d = cfg.input_dim
        self.self_attn = nn.MultiHeadAttention(d, cfg.num_heads, rng, cfg.dropout, dtype)
        self.cross_attn = nn.MultiHeadAttention(d, cfg.num_heads, rng, cfg.dropout, dtype)
        self.ff = nn.FeedForward(d, cfg.dim_feedforward, rng, cfg.dropout, dtype)
        self.norm1 = nn.LayerNorm(d, dtype=dtype)
        self.norm2 = nn.LayerNorm(d, dtype=dtype)
        self.norm3 = nn.LayerNorm(d, dtype=dtype)
        self.dropout = cfg.dropout
        self.rng = rng

    def _drop(self, x):
        return F.dropout(x, self.dropout, self.rng, self.training)

    def forward(self, x, memory, self_mask=None, memory_mask=None):
        x = self.norm1(x + self._drop(self.self_attn(x, x, x, self_mask)))
        x = self.norm2(x + self._drop(self.cross_attn(x, memory, memory, memory_mask)))
        return self.norm3(x + self._drop(self.ff(x)))


class EncoderDecoderTransformer(_Classifier):
    """Post-norm encoder-decoder transformer fed the same sequence on both sides.

    ``d_model`` equals the raw channel count and ``dim_feedforward`` is the
    hidden width. With ``causal`` set, encoder self-attention, decoder
    self-attention and cross-attention are all masked so that the output at
    step t depends only on inputs up to t. Without it only the decoder
    self-attention is masked.
    """

    kind = "transformer"

    def __init__(self, config: TransformerConfig | None = None, seed: int = 0, dtype=np.float64):
        config = config or TransformerConfig()
        config.validate()
        self.config = config
        self.rng = F.RngState(seed)
        self.encoder = [EncoderLayer(config, self.rng, dtype) for _ in range(config.num_encoder_layers)]
        self.encoder_norm = nn.LayerNorm(config.input_dim, dtype=dtype)
        self.decoder = [DecoderLayer(config, self.rng, dtype) for _ in range(config.num_decoder_layers)]
        self.decoder_norm = nn.LayerNorm(config.input_dim, dtype=dtype)
        self.fc = nn.Linear(config.input_dim, config.num_classes, self.rng, dtype)
        self._init_norm(config.input_dim, dtype)

    def embed(self, x) -> tuple[np.ndarray, bool]:
        z, squeeze = self._prepare(x)
        if self.config.positional_encoding:
            z = z + sinusoidal_encoding(z.shape[1], z.shape[2]).astype(z.dtype)
        return z, squeeze

    def encode(self, src, mask=None) -> Tensor:
        h = src if isinstance(src, Tensor) else Tensor(src)
        for layer in self.encoder:
            h = layer(h, mask)
        return self.encoder_norm(h)

    def forward(self, x) -> Tensor:
        z, squeeze = self.embed(x)
        steps = z.shape[1]
        causal = F.causal_mask(steps)
        enc_mask = causal if self.config.causal else None
        memory = self.encode(Tensor(z), enc_mask)
        h = Tensor(z)
        for layer in self.decoder:
            h = layer(h, memory, causal, enc_mask)
        logits = self.fc(self.decoder_norm(h))
        return logits[0] if squeeze else logits


class StackedRNN(_Classifier):
    """Stacked Elman RNN (tanh) with a per-step linear head."""

    kind = "rnn"

    def __init__(self, config: RnnConfig | None = None, seed: int = 0, dtype=np.float64):
        config = config or RnnConfig()
        config.validate()
        self.config = config
        self.rng = F.RngState(seed)
        self.layers = []
        for i in range(config.layers):
            d_in = config.input_dim if i == 0 else config.hidden
            self.layers.append(_RnnLayer(d_in, config.hidden, self.rng, dtype))
        self.fc = nn.Linear(config.hidden, config.num_classes, self.rng, dtype)
        self._init_norm(config.input_dim, dtype)

    def forward(self, x) -> Tensor:
        z, squeeze = self._prepare(x)
        h = Tensor(z)
        for layer in self.layers:
            h = layer(h)
        logits = self.fc(h)
        return logits[0] if squeeze else logits


class _RnnLayer(nn.Module):
    def __init__(self, d_in: int, hidden: int, rng, dtype):
        self.w_ih = nn.Parameter(F.xavier_init((d_in, hidden), rng, dtype))
        self.w_hh = nn.Parameter(F.xavier_init((hidden, hidden), rng, dtype))
        self.b = nn.Parameter(np.zeros(hidden, dtype=dtype))

    def forward(self, x):
        return F.rnn_tanh(x, self.w_ih, self.w_hh, self.b)


def build_model(kind: str, config=None, seed: int = 0, dtype=np.float32):
    if kind == "transformer":
        return EncoderDecoderTransformer(config or TransformerConfig(), seed, dtype)
    if kind == "rnn":
        return StackedRNN(config or RnnConfig(), seed, dtype)
    raise ConfigError(f"unknown model kind {kind!r}")


def config_from_dict(kind: str, d: dict):
    cls = {"transformer": TransformerConfig, "rnn": RnnConfig}.get(kind)
    if cls is None:
        raise ConfigError(f"unknown model kind {kind!r}")
    return cls(**d)


def config_to_dict(config) -> dict:
    return asdict(config)


# --------------------------------------------------------------------------
# prediction traces and aggregation

NOT_DETECTED = None


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Rule:
    kind: str  # "last_step" | "majority" | "first_persistent"
    k: int = 1

    def __post_init__(self):
        if self.kind not in ("last_step", "majority", "first_persistent"):
            raise ConfigError(f"unknown aggregation rule {self.kind!r}")
        if self.k < 1:
            raise ConfigError("FIRST_PERSISTENT needs k >= 1")

    @classmethod
    def parse(cls, text: "str | Rule") -> "Rule":
        if isinstance(text, Rule):
            return text
        name, _, arg = str(text).strip().lower().partition(":")
        name = name.replace("-", "_")
        if name == "first_persistent":
            return cls(name, int(arg or 1))
        if arg:
            raise ConfigError(f"rule {name!r} takes no argument")
        return cls(name)

    def __str__(self):
        return f"first_persistent:{self.k}" if self.kind == "first_persistent" else self.kind


LAST_STEP = Rule("last_step")
MAJORITY = Rule("majority")


def FIRST_PERSISTENT(k: int) -> Rule:  # noqa: N802  mirrors the rule constants
    return Rule("first_persistent", k)


@dataclass
class PredictionTrace:
    probs: np.ndarray  # (T, 12)

    @property
    def classes(self) -> np.ndarray:
        return self.probs.argmax(axis=-1)

    def __len__(self):
        return len(self.probs)

    def verdict(self, rule="last_step") -> int:
        return aggregate_prediction(self, rule)


def _classes(trace) -> np.ndarray:
    if isinstance(trace, PredictionTrace):
        return trace.classes
    return np.asarray(trace, dtype=np.int64)


def aggregate_prediction(trace, rule="last_step") -> int:
    """Collapse a per-step prediction sequence into one class."""
    rule = Rule.parse(rule)
    cls = _classes(trace)
    if len(cls) == 0:
        raise ValueError("cannot aggregate an empty trace")
    if rule.kind == "last_step":
        return int(cls[-1])
    if rule.kind == "majority":
        return int(np.bincount(cls, minlength=NUM_CLASSES).argmax())
    step = _first_persistent_step(cls, rule.k)
    return 0 if step is None else int(cls[step])


def _first_persistent_step(cls: np.ndarray, k: int):
    """Step at which some non-zero class completes its first run of k repeats."""
    run = 0
    for t, c in enumerate(cls):
        run = run + 1 if t and c == cls[t - 1] else 1
        if c != 0 and run >= k:
            return t
    return None


def detection_step(trace, true_class: int, rule="first_persistent:1"):
    """First step t at which the rule applied to ``trace[:t+1]`` yields ``true_class``."""
    rule = Rule.parse(rule)
    cls = _classes(trace)
    if rule.kind == "last_step":
        hits = np.flatnonzero(cls == true_class)
        return int(hits[0]) if len(hits) else NOT_DETECTED
    if rule.kind == "majority":
        counts = np.zeros(NUM_CLASSES, dtype=np.int64)
        for t, c in enumerate(cls):
            counts[c] += 1
            if counts.argmax() == true_class:
                return t
        return NOT_DETECTED
    step = _first_persistent_step(cls, rule.k)
    if step is None or cls[step] != true_class:
        return NOT_DETECTED
    return step


def detection_latency(trace, onset_step: int, rule="first_persistent:1", true_class: int | None = None):
    """Steps from onset to the first firing of the true class; negative means false-early."""
    cls = _classes(trace)
    if not 0 <= onset_step < len(cls):
        raise ValueError(f"onset step {onset_step} outside trace of length {len(cls)}")
    if true_class is None:
        raise ValueError("true_class is required")
    step = detection_step(cls, true_class, rule)
    return NOT_DETECTED if step is None else step - onset_step


def stream_trace(model: _Classifier, values: np.ndarray, window: int | None = None,
                 chunk: int = 64) -> PredictionTrace:
    """Per-step probabilities for a whole (L, 27) sequence using stride-1 windows.

    Step t (t >= window-1) takes the last output of the window ending at t;
    earlier steps come from the first window. With a causal model every step
    depends only on rows <= t.
    """
    window = window or model.config.window
    values = np.asarray(values)
    L = len(values)
    if L <= window:
        return PredictionTrace(model.probabilities(values))
    model.eval()
    idx = np.arange(L - window + 1)[:, None] + np.arange(window)
    probs = np.empty((L, NUM_CLASSES))
    first = model.probabilities(values[:window])
    probs[:window] = first
    for lo in range(1, len(idx), chunk):
        batch = values[idx[lo:lo + chunk]]
        p = model.probabilities(batch)
        probs[window - 1 + lo: window - 1 + lo + len(batch)] = p[:, -1]
    return PredictionTrace(probs)


def expected_parameter_count(config) -> int:
    if isinstance(config, TransformerConfig):
        d, f, c = config.input_dim, config.dim_feedforward, config.num_classes
        attn = 4 * (d * d + d)
        ff = d * f + f + f * d + d
        enc = attn + ff + 2 * 2 * d
        dec = 2 * attn + ff + 3 * 2 * d
        return (config.num_encoder_layers * enc + config.num_decoder_layers * dec
                + 2 * 2 * d + d * c + c)
    h, d, c = config.hidden, config.input_dim, config.num_classes
    first = d * h + h * h + h
    rest = (config.layers - 1) * (2 * h * h + h)
    return first + rest + h * c + c

