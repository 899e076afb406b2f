import math
import struct

import numpy as np
import pytest

from malact import tensor as T
from malact.errors import ConfigError, FormatError, InputError, MetricError
from malact.model import (
    DESK_LAYERS,
    MAGIC,
    PAD,
    PAPER_DROPOUT,
    PAPER_LAYERS,
    LabeledSample,
    LayerSpec,
    Model,
    ModelConfig,
    TrainConfig,
    binary_metrics,
    build_model,
    dumps_model,
    evaluate,
    first_layer_activations,
    forward,
    load_model,
    loads_model,
    logits,
    predict_proba,
    preprocess,
    roc_auc,
    save_model,
    train,
)

SMALL = ModelConfig(input_len=64, layers=(LayerSpec(6, 5, 2, 2), LayerSpec(4, 3, 2, 2)))
ONE_BLOCK = ModelConfig(input_len=32, layers=(LayerSpec(16, 3, 2, 2),))


def separable_corpus(n=64, seed=0, length=32):
    """Label 1 iff byte 0 is 0x42; 0x42 never occurs elsewhere."""
    rng = np.random.default_rng(seed)
    filler = np.array([b for b in range(256) if b != 0x42], dtype=np.uint8)
    out = []
    for i in range(n):
        data = bytearray(rng.choice(filler, int(rng.integers(length // 2, length))).tobytes())
        if i % 2:
            data[0] = 0x42
        out.append(LabeledSample(bytes(data), i % 2, f"t{i}"))
    return out


# -- preprocessing ------------------------------------------------------------

def test_preprocess_pads():
    assert preprocess(b"\x01\x02\x03", 5).tolist() == [1, 2, 3, PAD, PAD]


def test_preprocess_truncates():
    data = bytes(range(200))
    out = preprocess(data, 100)
    assert out.tolist() == list(range(100))
    assert PAD not in out


def test_preprocess_exact_length():
    data = bytes([7, 255, 0, 9])
    assert preprocess(data, 4).tolist() == [7, 255, 0, 9]


def test_preprocess_empty():
    with pytest.raises(InputError):
        preprocess(b"", 4)
    with pytest.raises(InputError):
        LabeledSample(b"", 1, "x")


# -- geometry and init ----------------------------------------------------------

def _lengths_by_formula(input_len, layers, stride=1):
    out, n = [], input_len
    for spec in layers:
        n = (n - spec.kernel_width) // stride + 1
        out.append(n)
        width = min(spec.pool_width, n)
        n = (n - width) // spec.pool_stride + 1
        out.append(n)
    return out


def test_desk_geometry_valid():
    cfg = ModelConfig()
    assert cfg.layers == DESK_LAYERS == PAPER_LAYERS[:3]
    lengths = cfg.stage_lengths()
    assert lengths == _lengths_by_formula(4096, DESK_LAYERS)
    assert lengths == [4086, 1021, 1011, 252, 242, 60]
    pooled = lengths[1::2]
    for spec, n in zip(cfg.layers[1:], pooled):
        assert n >= spec.kernel_width


def test_five_blocks_at_desk_length_still_valid():
    lengths = ModelConfig(layers=PAPER_LAYERS).stage_lengths()
    assert lengths == [4086, 1021, 1011, 252, 242, 60, 50, 12, 2, 1]  # last pool clamped to width 2


def test_paper_first_layer_positions():
    cfg = ModelConfig.paper()
    assert cfg.layers == PAPER_LAYERS
    assert cfg.stage_lengths()[0] == 102_390
    assert cfg.stage_lengths()[-1] == 96


def test_invalid_geometry_rejected():
    with pytest.raises(ConfigError):
        build_model(ModelConfig(input_len=20, layers=PAPER_LAYERS))
    with pytest.raises(ConfigError):
        ModelConfig(vocab=300).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dropout_rates=(0.1, 0.2)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dropout_rates=(0.1,) * 5 + (1.0,)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(embed_gain=0.0).validate()


def test_build_deterministic():
    a, b = build_model(SMALL, seed=3), build_model(SMALL, seed=3)
    c = build_model(SMALL, seed=4)
    for n in a.params:
        assert np.array_equal(a[n].data, b[n].data)
    assert not np.array_equal(a["conv0.weight"].data, c["conv0.weight"].data)


def test_xavier_bounds():
    m = build_model(ModelConfig(), seed=0)
    k = m["conv0.weight"].data
    assert k.shape == (96, 10, 11)
    bound = math.sqrt(6.0 / (10 * 11 + 96 * 11))  # fan_in = c_in*w, fan_out = c_out*w
    assert np.abs(k).max() <= bound
    assert np.abs(k).max() > 0.99 * bound
    assert np.all(m["conv0.bias"].data == 0) and np.all(m["dense.bias"].data == 0)
    emb_bound = math.sqrt(6.0 / (257 + 10))
    assert emb_bound / 1.01 < np.abs(m.embedding).max() <= emb_bound
    small = build_model(ModelConfig(embed_gain=0.02), seed=0)
    assert np.array_equal(small["conv0.weight"].data, k)
    assert np.abs(small.embedding).max() <= 0.02 * emb_bound


# -- forward ----------------------------------------------------------------------

def test_all_padding_zero_head_is_half():
    m = build_model(SMALL, seed=0)
    m["dense.weight"].data[:] = 0
    assert forward(m, np.full(64, PAD)) == 0.5


def test_output_in_unit_interval():
    m = build_model(SMALL, seed=1)
    X = np.random.default_rng(0).integers(0, 257, (20, 64))
    p = predict_proba(m, X, batch_size=7)
    assert np.all((p > 0) & (p < 1))
    assert p[3] == pytest.approx(forward(m, X[3]), abs=1e-15)


def test_length_mismatch():
    m = build_model(SMALL, seed=1)
    with pytest.raises(InputError):
        forward(m, np.zeros(63, dtype=int))


def test_first_layer_activations_shape_and_relu():
    m = build_model(SMALL, seed=1)
    a = first_layer_activations(m, np.random.default_rng(1).integers(0, 257, 64))
    assert a.shape == (6, 60)
    assert a.min() >= 0


def test_zero_dropout_training_equals_inference():
    m = build_model(SMALL.with_dropout((0.0,) * 3), seed=2)
    X = np.random.default_rng(2).integers(0, 257, (4, 64))
    a = logits(m, X, training=True, rng=np.random.default_rng(0)).data
    b = logits(m, X).data
    assert np.array_equal(a, b)


def test_dropout_sites(monkeypatch):
    assert ModelConfig.paper(dropout=True).dropout_rates == PAPER_DROPOUT == (0.1, 0.25, 0.25, 0.25, 0.5, 0.5)
    assert ModelConfig().with_dropout().dropout_rates == (0.1, 0.25, 0.25, 0.25)
    m = build_model(ModelConfig(input_len=64, layers=SMALL.layers).with_dropout((0.1, 0.25, 0.5)), seed=0)
    calls = []
    real = T.dropout

    def spy(x, rate, training, rng=None):
        calls.append((rate, training))
        return real(x, rate, training, rng)

    monkeypatch.setattr(T, "dropout", spy)
    X = np.random.default_rng(0).integers(0, 257, (2, 64))
    logits(m, X, training=True, rng=np.random.default_rng(1))
    assert calls == [(0.1, True), (0.25, True), (0.5, True)]
    calls.clear()
    inference = logits(m, X).data
    assert all(not training for _, training in calls)
    plain = build_model(ModelConfig(input_len=64, layers=SMALL.layers), seed=0)
    assert np.array_equal(inference, logits(plain, X).data)


def test_desk_dropout_has_six_active_sites(monkeypatch):
    m = build_model(ModelConfig(layers=PAPER_LAYERS).with_dropout(), seed=0)
    active = []
    real = T.dropout

    def spy(x, rate, training, rng=None):
        if training and rate > 0:
            active.append(rate)
        return real(x, rate, training, rng)

    monkeypatch.setattr(T, "dropout", spy)
    X = np.random.default_rng(0).integers(0, 257, (1, 4096))
    logits(m, X, training=True, rng=np.random.default_rng(0))
    assert active == list(PAPER_DROPOUT)
    active.clear()
    logits(m, X)
    assert active == []


# -- training -----------------------------------------------------------------------

def test_lr_zero_leaves_parameters():
    m = build_model(SMALL, seed=0)
    before = {n: m[n].data.copy() for n in m.params}
    data = [LabeledSample(bytes([i, i + 1, 3]), i % 2, str(i)) for i in range(8)]
    train(m, data, TrainConfig(epochs=2, learning_rate=0.0, batch_size=4))
    for n in m.params:
        assert np.array_equal(before[n], m[n].data)


def test_single_class_rejected():
    m = build_model(SMALL, seed=0)
    data = [LabeledSample(b"abc", 1, str(i)) for i in range(4)]
    with pytest.raises(ConfigError):
        train(m, data, TrainConfig(epochs=1))


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(momentum=1.0), dict(batch_size=0),
                                    dict(learning_rate=-1.0), dict(precision="float16")])
def test_bad_train_config(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs).validate()


def test_lr_decay_schedule():
    tc = TrainConfig(learning_rate=0.01, decay_factor=0.5, decay_every=3)
    assert [tc.lr_at(e) for e in range(7)] == [0.01, 0.01, 0.01, 0.005, 0.005, 0.005, 0.0025]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_separable_toy_reaches_full_accuracy(seed):
    data = separable_corpus(seed=seed)
    m = build_model(ONE_BLOCK, seed=seed)
    _, hist = train(m, data, TrainConfig(epochs=10, learning_rate=0.2, batch_size=8, seed=seed))
    assert evaluate(m, data)["accuracy"] == 1.0
    assert hist.train_loss[-1] < hist.train_loss[0]
    # it learned the byte, not the files
    assert evaluate(m, separable_corpus(n=100, seed=99))["auc"] > 0.95


def test_training_bit_reproducible():
    data = separable_corpus(n=24)
    runs = []
    for _ in range(2):
        m = build_model(ONE_BLOCK, seed=5)
        train(m, data, TrainConfig(epochs=2, learning_rate=0.1, batch_size=5, seed=9), validation=data[:6])
        runs.append(dumps_model(m))
    assert runs[0] == runs[1]


def test_float32_training_returns_float64_parameters():
    data = separable_corpus(n=16)
    m = build_model(ONE_BLOCK, seed=5)
    _, hist = train(m, data, TrainConfig(epochs=2, learning_rate=0.1, batch_size=4, precision="float32"))
    assert all(p.tensor.data.dtype == np.float64 for p in m.parameters())
    assert len(hist.train_loss) == 2
    assert m.metadata["train"]["precision"] == "float32"
    assert T.active_dtype() is np.float64


def test_history_recorded_with_validation():
    data = separable_corpus(n=16)
    m = build_model(ONE_BLOCK, seed=5)
    _, hist = train(m, data, TrainConfig(epochs=3, learning_rate=0.1, batch_size=4), validation=data[:4])
    assert len(hist.train_loss) == len(hist.val_loss) == len(hist.learning_rate) == 3
    assert m.metadata["history"]["val_loss"] == hist.val_loss


# -- metrics --------------------------------------------------------------------------

def _auc_pairs(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(4, 40))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), 1)  # ties included
        assert roc_auc(scores, labels) == pytest.approx(_auc_pairs(scores, labels), abs=1e-12)


def test_perfect_separator():
    labels = np.array([0, 0, 1, 1])
    scores = np.array([0.1, 0.2, 0.8, 0.9])
    assert roc_auc(scores, labels) == 1.0
    assert binary_metrics(scores, labels)["f1"] == 1.0


def test_random_scorer_auc_near_half():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 500)
    assert abs(roc_auc(rng.random(1000), labels) - 0.5) < 0.05


def test_all_positive_predictions():
    labels = np.repeat([0, 1], 50)
    m = binary_metrics(np.ones(100), labels)
    assert m["precision"] == 0.5 and m["recall"] == 1.0
    assert m["f1"] == pytest.approx(2 / 3)


def test_single_class_auc():
    with pytest.raises(MetricError):
        roc_auc([0.1, 0.2], [1, 1])


# -- serialization ----------------------------------------------------------------------

@pytest.fixture
def model_bytes():
    m = build_model(SMALL.with_dropout((0.1, 0.2, 0.3)), seed=7)
    m.metadata["note"] = "x"
    return m, dumps_model(m)


def test_round_trip(tmp_path, model_bytes):
    m, blob = model_bytes
    path = tmp_path / "m.bscn"
    save_model(m, path)
    assert path.read_bytes() == blob
    back = load_model(path)
    assert back.config == m.config and back.metadata == m.metadata
    for n in m.params:
        assert np.array_equal(back[n].data, m[n].data)
    assert dumps_model(back) == blob


def test_bad_magic(model_bytes):
    _, blob = model_bytes
    with pytest.raises(FormatError):
        loads_model(b"XXXX" + blob[4:])


def test_bad_version(model_bytes):
    _, blob = model_bytes
    bad = blob[:4] + struct.pack("<I", 99) + blob[8:]
    with pytest.raises(FormatError, match="version"):
        loads_model(bad)


@pytest.mark.parametrize("cut", [3, 10, 40, -1])
def test_truncated(model_bytes, cut):
    _, blob = model_bytes
    with pytest.raises(FormatError):
        loads_model(blob[:cut])


def test_trailing_bytes(model_bytes):
    _, blob = model_bytes
    with pytest.raises(FormatError):
        loads_model(blob + b"\x00")


def _with_extra_param(m, name, shape):
    from malact.tensor import Parameter, Tensor

    params = dict(m.params)
    params[name] = Parameter(name, Tensor(np.zeros(shape)))
    return Model(m.config, params, m.metadata)


def test_unknown_parameter_named(model_bytes):
    m, _ = model_bytes
    blob = dumps_model(_with_extra_param(m, "mystery.weight", (2, 2)))
    with pytest.raises(FormatError, match="mystery.weight"):
        loads_model(blob)


def test_missing_and_misshapen_parameters(model_bytes):
    m, _ = model_bytes
    params = {n: p for n, p in m.params.items() if n != "dense.bias"}
    with pytest.raises(FormatError, match="dense.bias"):
        loads_model(dumps_model(Model(m.config, params, {})))
    bad = _with_extra_param(Model(m.config, params, {}), "dense.bias", (3,))
    with pytest.raises(FormatError):
        loads_model(dumps_model(bad))


def test_magic_constant():
    assert MAGIC == b"BSCN"


def test_default_dropout_adapts_to_depth():
    from malact.model import default_dropout

    assert default_dropout(5) == PAPER_DROPOUT
    assert default_dropout(1) == (0.1, 0.25)
    assert default_dropout(3) == (0.1, 0.25, 0.25, 0.25)
    assert default_dropout(7) == (0.1, 0.25, 0.25, 0.25, 0.5, 0.5, 0.5, 0.5)
    assert SMALL.with_dropout().dropout_rates == (0.1, 0.25, 0.25)
