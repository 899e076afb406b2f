"""Byte-level CNN classifier: preprocessing, model assembly, training,
evaluation and a binary model container.

Architecture: embedding -> N x (conv -> relu -> maxpool) -> global max over
time -> dense(1) -> sigmoid, with optional dropout after the embedding and
after every block.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .errors import ConfigError, FormatError, InputError, MetricError
from .tensor import Parameter, Tensor

logger = logging.getLogger(__name__)

VOCAB = 257
PAD = 256
EMBED_DIM = 10
PAPER_INPUT_LEN = 102400
DESK_INPUT_LEN = 4096
PAPER_DROPOUT = (0.1, 0.25, 0.25, 0.25, 0.5, 0.5)


def default_dropout(n_blocks: int) -> tuple[float, ...]:
    """Embedding rate plus the first ``n_blocks`` block rates, repeating the last when deeper."""
    blocks = PAPER_DROPOUT[1:]
    blocks = blocks[:n_blocks] + blocks[-1:] * max(0, n_blocks - len(blocks))
    return PAPER_DROPOUT[:1] + tuple(blocks)


@dataclass(frozen=True)
class LayerSpec:
    filters: int
    kernel_width: int
    pool_width: int
    pool_stride: int


# Five blocks pool 100 KB inputs down to ~100 positions before the global max.
PAPER_LAYERS = (
    LayerSpec(96, 11, 4, 4),
    LayerSpec(96, 11, 4, 4),
    LayerSpec(128, 11, 4, 4),
    LayerSpec(128, 11, 4, 4),
    LayerSpec(192, 11, 4, 4),
)
# At 4 KB the first three blocks keep the same ~50-100 positions (60); five would leave 1.
DESK_LAYERS = PAPER_LAYERS[:3]


@dataclass(frozen=True)
class ModelConfig:
    input_len: int = DESK_INPUT_LEN
    vocab: int = VOCAB
    embed_dim: int = EMBED_DIM
    layers: tuple[LayerSpec, ...] = DESK_LAYERS
    dropout_rates: Optional[tuple[float, ...]] = None
    conv_stride: int = 1
    embed_gain: float = 1.0  # scales the embedding's Xavier bound

    @classmethod
    def paper(cls, dropout: bool = False) -> "ModelConfig":
        return cls(input_len=PAPER_INPUT_LEN, layers=PAPER_LAYERS,
                   dropout_rates=PAPER_DROPOUT if dropout else None)

    def with_dropout(self, rates: Optional[Sequence[float]] = ()) -> "ModelConfig":
        """Copy with dropout; the default adapts the stock rates to the block count."""
        if rates == ():
            rates = default_dropout(len(self.layers))
        return replace(self, dropout_rates=None if rates is None else tuple(float(r) for r in rates))

    def validate(self) -> None:
        if self.vocab != VOCAB:
            raise ConfigError(f"vocab must be {VOCAB} (256 byte values + padding), got {self.vocab}")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        if not self.embed_gain > 0:
            raise ConfigError(f"embed_gain must be positive, got {self.embed_gain}")
        if not self.layers:
            raise ConfigError("at least one convolutional block is required")
        for i, spec in enumerate(self.layers):
            if min(spec.filters, spec.kernel_width, spec.pool_width, spec.pool_stride) < 1:
                raise ConfigError(f"layer {i} has a non-positive dimension: {spec}")
        if self.dropout_rates is not None:
            if len(self.dropout_rates) != len(self.layers) + 1:
                raise ConfigError(
                    f"need {len(self.layers) + 1} dropout rates (embedding + one per block), "
                    f"got {len(self.dropout_rates)}"
                )
            if any(not 0.0 <= r < 1.0 for r in self.dropout_rates):
                raise ConfigError(f"dropout rates must lie in [0, 1): {self.dropout_rates}")
        self.stage_lengths()

    def pool_geometry(self) -> list[tuple[int, int]]:
        """Effective (width, stride) per block, after clamping to the conv length."""
        geometry = []
        length = self.input_len
        for i, spec in enumerate(self.layers):
            if length < spec.kernel_width:
                raise ConfigError(
                    f"block {i}: input length {length} is shorter than kernel width {spec.kernel_width}"
                )
            conv_len = (length - spec.kernel_width) // self.conv_stride + 1
            width = min(spec.pool_width, conv_len)
            geometry.append((width, spec.pool_stride))
            length = (conv_len - width) // spec.pool_stride + 1
        return geometry

    def stage_lengths(self) -> list[int]:
        """Sequence lengths after every conv and every pool, in order."""
        lengths = []
        length = self.input_len
        for spec, (width, stride) in zip(self.layers, self.pool_geometry()):
            length = (length - spec.kernel_width) // self.conv_stride + 1
            lengths.append(length)
            length = (length - width) // stride + 1
            lengths.append(length)
        return lengths

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [list(asdict(s).values()) for s in self.layers]
        d["dropout_rates"] = None if self.dropout_rates is None else list(self.dropout_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            rates = d.get("dropout_rates")
            return cls(
                input_len=int(d.get("input_len", cls.input_len)),
                vocab=int(d.get("vocab", cls.vocab)),
                embed_dim=int(d.get("embed_dim", cls.embed_dim)),
                layers=tuple(LayerSpec(*map(int, s)) for s in d["layers"]) if "layers" in d else DESK_LAYERS,
                dropout_rates=None if rates is None else tuple(float(r) for r in rates),
                conv_stride=int(d.get("conv_stride", 1)),
                embed_gain=float(d.get("embed_gain", 1.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Parameter]
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    @property
    def embedding(self) -> np.ndarray:
        return self.params["embedding"].tensor.data

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.zero_grad()

    def copy(self) -> "Model":
        params = {
            n: Parameter(n, Tensor(p.tensor.data.copy(), requires_grad=True))
            for n, p in self.params.items()
        }
        return Model(self.config, params, dict(self.metadata))


@dataclass(frozen=True)
class LabeledSample:
    data: bytes
    label: int
    id: str

    def __post_init__(self):
        if not self.data:
            raise InputError(f"sample {self.id!r} is empty")
        if self.label not in (0, 1):
            raise InputError(f"sample {self.id!r} has label {self.label}, expected 0 or 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.5
    decay_every: int = 3
    batch_size: int = 16
    seed: int = 0
    regime: str = "baseline"
    precision: str = "float64"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.decay_every < 1:
            raise ConfigError("batch_size and decay_every must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_every)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def preprocess(data: bytes, input_len: int) -> np.ndarray:
    """Truncate or pad raw bytes to ``input_len`` symbols (padding = 256)."""
    if not data:
        raise InputError("cannot preprocess an empty byte string")
    if input_len < 1:
        raise InputError("input_len must be positive")
    raw = np.frombuffer(data[:input_len], dtype=np.uint8)
    out = np.full(input_len, PAD, dtype=np.uint16)
    out[: raw.size] = raw
    return out


def preprocess_many(samples: Iterable[LabeledSample], input_len: int) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    X = np.empty((len(samples), input_len), dtype=np.uint16)
    for i, s in enumerate(samples):
        X[i] = preprocess(s.data, input_len)
    y = np.array([s.label for s in samples], dtype=np.float64)
    return X, y


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.vocab, config.embed_dim)}
    c_in = config.embed_dim
    for i, spec in enumerate(config.layers):
        shapes[f"conv{i}.weight"] = (spec.filters, c_in, spec.kernel_width)
        shapes[f"conv{i}.bias"] = (spec.filters,)
        c_in = spec.filters
    shapes["dense.weight"] = (1, c_in)
    shapes["dense.bias"] = (1,)
    return shapes


def fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 3:  # conv kernel [out, in, width]
        return shape[1] * shape[2], shape[0] * shape[2]
    if name == "dense.weight":
        return shape[1], shape[0]
    return shape[0], shape[1]  # embedding table [vocab, dim]


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Xavier-uniform weights, zero biases, deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            bound = xavier_bound(*fans(name, shape))
            if name == "embedding":
                bound *= config.embed_gain
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Parameter(name, Tensor(data, requires_grad=True))
    return Model(config, params)


def _dropout_rate(model: Model, site: int) -> float:
    rates = model.config.dropout_rates
    return 0.0 if rates is None else rates[site]


def logits_from_embedded(
    model: Model,
    emb: Tensor,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Run everything after the embedding lookup; ``emb`` is ``[B, dim, L]``."""
    cfg = model.config
    h = T.dropout(emb, _dropout_rate(model, 0), training, rng)
    for i, (spec, (width, stride)) in enumerate(zip(cfg.layers, cfg.pool_geometry())):
        h = T.conv1d(h, model[f"conv{i}.weight"], model[f"conv{i}.bias"], cfg.conv_stride)
        h = T.relu(h)
        h, _ = T.maxpool1d(h, width, stride)
        h = T.dropout(h, _dropout_rate(model, i + 1), training, rng)
    h, _ = T.maxpool1d(h, h.shape[-1], 1)
    h = T.reshape(h, h.shape[:-1])
    z = T.dense(h, model["dense.weight"], model["dense.bias"])
    return T.reshape(z, z.shape[:-1])


def _as_batch(model: Model, symbols) -> np.ndarray:
    sym = np.asarray(symbols)
    if sym.ndim == 1:
        sym = sym[None]
    if sym.ndim != 2 or sym.shape[1] != model.config.input_len:
        raise InputError(
            f"expected {model.config.input_len} symbols per sample, got shape {np.shape(symbols)}"
        )
    return sym


def embed(model: Model, symbols) -> Tensor:
    return T.embedding_lookup(_as_batch(model, symbols), model["embedding"])


def logits(model: Model, symbols, training: bool = False, rng=None) -> Tensor:
    return logits_from_embedded(model, embed(model, symbols), training, rng)


def forward(model: Model, symbols, training: bool = False, rng=None) -> float:
    """Malware probability for one preprocessed sample."""
    z = logits(model, symbols, training, rng)
    if z.shape != (1,):
        raise InputError("forward takes a single sample; use predict_proba for batches")
    return float(T.sigmoid(z).data[0])


def predict_proba(model: Model, X, batch_size: int = 32) -> np.ndarray:
    X = _as_batch(model, X)
    out = np.empty(len(X))
    for start in range(0, len(X), batch_size):
        chunk = X[start : start + batch_size]
        out[start : start + len(chunk)] = T._sigmoid(logits(model, chunk).data)
    return out


def first_layer_activations(model: Model, symbols) -> np.ndarray:
    """Post-ReLU output of the first conv layer, ``[filters, positions]``."""
    emb = T.embedding_lookup(np.asarray(symbols)[None], Tensor(model.embedding))
    h = T.conv1d(emb, Tensor(model["conv0.weight"].data), Tensor(model["conv0.bias"].data),
                 model.config.conv_stride)
    return np.maximum(h.data[0], 0.0)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _check_two_classes(y: np.ndarray, what: str, exc=ConfigError) -> None:
    if len(np.unique(y)) < 2:
        raise exc(f"{what} needs both classes, got only label(s) {sorted(set(y.tolist()))}")


def mean_loss(model: Model, X: np.ndarray, y: np.ndarray, batch_size: int = 32) -> float:
    total = 0.0
    for start in range(0, len(X), batch_size):
        xb, yb = X[start : start + batch_size], y[start : start + batch_size]
        total += T.bce_with_logits(logits(model, xb), yb).item() * len(xb)
    return total / len(X)


def _sgd_loop(model: Model, X, y, config: TrainConfig, Xv, yv) -> TrainHistory:
    rng = np.random.default_rng(config.seed)
    velocity = {n: np.zeros_like(p.tensor.data) for n, p in model.params.items()}
    history = TrainHistory()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(X))
        epoch_loss = 0.0
        for start in range(0, len(X), config.batch_size):
            idx = order[start : start + config.batch_size]
            model.zero_grad()
            loss = T.bce_with_logits(logits(model, X[idx], training=True, rng=rng), y[idx])
            loss.backward()
            for name, p in model.params.items():
                g = p.tensor.grad
                if g is None:
                    continue
                v = velocity[name]
                v *= config.momentum
                v -= lr * g
                p.tensor.data += v
            epoch_loss += loss.item() * len(idx)
        model.zero_grad()
        history.train_loss.append(epoch_loss / len(X))
        history.learning_rate.append(lr)
        if Xv is not None:
            history.val_loss.append(mean_loss(model, Xv, yv))
        logger.info(
            "epoch %d/%d lr=%.4g train_loss=%.4f%s", epoch + 1, config.epochs, lr,
            history.train_loss[-1],
            f" val_loss={history.val_loss[-1]:.4f}" if Xv is not None else "",
        )
    return history


def train(
    model: Model,
    dataset: Sequence[LabeledSample],
    config: TrainConfig,
    validation: Optional[Sequence[LabeledSample]] = None,
) -> tuple[Model, TrainHistory]:
    """SGD with classical momentum and step decay on binary cross-entropy.

    The model is updated in place and returned with its loss history.
    """
    config.validate()
    X, y = preprocess_many(dataset, model.config.input_len)
    _check_two_classes(y, "training")
    Xv = yv = None
    if validation:
        Xv, yv = preprocess_many(validation, model.config.input_len)

    dtype = np.float32 if config.precision == "float32" else np.float64
    for p in model.params.values():
        p.tensor.data = p.tensor.data.astype(dtype)
    try:
        with T.precision(dtype):
            history = _sgd_loop(model, X, y, config, Xv, yv)
    finally:
        for p in model.params.values():
            p.tensor.data = p.tensor.data.astype(np.float64)
    model.metadata["train"] = asdict(config)
    model.metadata["history"] = asdict(history)
    return model, history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    _check_two_classes(labels, "AUC", MetricError)
    ranks = rankdata(scores)
    pos = labels == 1
    n_pos, n_neg = pos.sum(), (~pos).sum()
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def binary_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "accuracy": float(np.mean(pred == (labels == 1))),
    }


def evaluate(model: Model, dataset: Sequence[LabeledSample]) -> dict[str, float]:
    X, y = preprocess_many(dataset, model.config.input_len)
    _check_two_classes(y, "evaluation", MetricError)
    scores = predict_proba(model, X)
    metrics = binary_metrics(scores, y)
    metrics["auc"] = roc_auc(scores, y)
    return metrics


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

MAGIC = b"BSCN"
FORMAT_VERSION = 1


def dumps_model(model: Model) -> bytes:
    header = json.dumps(
        {"config": model.config.to_dict(), "metadata": model.metadata}, sort_keys=True
    ).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    parts.append(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw_name = name.encode()
        data = p.tensor.data
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated model file: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads_model(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic: not a BSCN model file")
    version, header_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    try:
        header = json.loads(r.take(header_len))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt model header: {exc}") from exc
    try:
        config = ModelConfig.from_dict(header["config"])
        config.validate()
    except (ConfigError, KeyError) as exc:
        raise FormatError(f"invalid model config: {exc}") from exc
    expected = parameter_shapes(config)
    (count,) = r.unpack("<I")
    params: dict[str, Parameter] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{ndim}I"))
        if name not in expected:
            raise FormatError(f"unknown parameter {name!r}")
        if shape != expected[name]:
            raise FormatError(f"parameter {name!r} has shape {shape}, expected {expected[name]}")
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Parameter(name, Tensor(data, requires_grad=True))
    missing = sorted(set(expected) - set(params))
    if missing:
        raise FormatError(f"missing parameters: {', '.join(missing)}")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last parameter block")
    ordered = {n: params[n] for n in expected}
    return Model(config, ordered, header.get("metadata", {}))


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path) -> Model:
    return loads_model(Path(path).read_bytes())
