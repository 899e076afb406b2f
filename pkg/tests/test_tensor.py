import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import central_difference, max_relative_error
from malact import tensor as T
from malact.errors import DimensionError, InputError, StateError


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradcheck(build, inputs, eps=1e-5):
    """Compare backward() against central differences for every input tensor."""
    build().backward()
    analytic = [t.grad.copy() for t in inputs]
    worst = 0.0
    for t, g in zip(inputs, analytic):
        numeric = central_difference(lambda: build().item(), t.data, eps)
        worst = max(worst, max_relative_error(g, numeric))
    return worst


# --- conv1d ---------------------------------------------------------------

def test_conv1d_hand_example():
    x = T.tensor([[1.0, 2.0, 3.0, 4.0]])
    k = T.tensor([[[1.0, 0.0, -1.0]]])
    out = T.conv1d(x, k, T.tensor([0.0]), stride=1)
    np.testing.assert_array_equal(out.data, [[-2.0, -2.0]])


def test_conv1d_zero_kernel_single_position():
    x = T.tensor(np.arange(6.0).reshape(2, 3))
    out = T.conv1d(x, T.tensor(np.zeros((4, 2, 3))), T.tensor(np.zeros(4)))
    assert out.shape == (4, 1)
    assert np.all(out.data == 0)


def test_conv1d_paper_geometry():
    assert T.conv_output_length(102400, 11, 1) == 102390


def test_conv1d_matches_brute_force(rng):
    x = rng.normal(size=(3, 17))
    k = rng.normal(size=(4, 3, 5))
    b = rng.normal(size=4)
    for stride in (1, 2, 3):
        out = T.conv1d(T.tensor(x), T.tensor(k), T.tensor(b), stride).data
        L_out = (17 - 5) // stride + 1
        expect = np.array(
            [[b[f] + np.sum(x[:, p * stride : p * stride + 5] * k[f]) for p in range(L_out)] for f in range(4)]
        )
        np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_conv1d_batched_equals_unbatched(rng):
    x = rng.normal(size=(2, 3, 12))
    k, b = T.tensor(rng.normal(size=(4, 3, 3))), T.tensor(rng.normal(size=4))
    batched = T.conv1d(T.tensor(x), k, b, 2).data
    for i in range(2):
        np.testing.assert_allclose(batched[i], T.conv1d(T.tensor(x[i]), k, b, 2).data)


def test_conv1d_shape_errors():
    x = T.tensor(np.zeros((3, 10)))
    with pytest.raises(DimensionError, match="channel"):
        T.conv1d(x, T.tensor(np.zeros((2, 4, 3))), T.tensor(np.zeros(2)))
    with pytest.raises(DimensionError, match="bias"):
        T.conv1d(x, T.tensor(np.zeros((2, 3, 3))), T.tensor(np.zeros(5)))
    with pytest.raises(DimensionError):
        T.conv1d(x, T.tensor(np.zeros((2, 3, 11))), T.tensor(np.zeros(2)))


@settings(max_examples=60, deadline=None)
@given(L=st.integers(1, 60), w=st.integers(1, 15), stride=st.integers(1, 6))
def test_conv_and_pool_length_formula(L, w, stride):
    if L < w:
        with pytest.raises(DimensionError):
            T.conv1d(T.tensor(np.zeros((1, L))), T.tensor(np.zeros((1, 1, w))), T.tensor([0.0]), stride)
        return
    expect = (L - w) // stride + 1
    out = T.conv1d(T.tensor(np.ones((1, L))), T.tensor(np.ones((1, 1, w))), T.tensor([0.0]), stride)
    assert out.shape == (1, expect)
    pooled, idx = T.maxpool1d(T.tensor(np.ones((1, L))), w, stride)
    assert pooled.shape == (1, expect) and idx.shape == (1, expect)


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv1d_gradients(rng, stride):
    x = T.Tensor(rng.normal(size=(2, 3, 14)), requires_grad=True)
    k = T.Tensor(rng.normal(size=(4, 3, 5)), requires_grad=True)
    b = T.Tensor(rng.normal(size=4), requires_grad=True)
    weights = rng.normal(size=(2, 4, (14 - 5) // stride + 1))

    def build():
        for t in (x, k, b):
            t.zero_grad()
        return T.tsum(T.mul(T.conv1d(x, k, b, stride), T.tensor(weights)))

    assert gradcheck(build, [x, k, b]) < 1e-4


# --- maxpool --------------------------------------------------------------

def test_maxpool_enumerated_windows():
    out, idx = T.maxpool1d(T.tensor([1.0, 5.0, 2.0, 0.0]), 2, 2)
    np.testing.assert_array_equal(out.data, [5.0, 2.0])
    np.testing.assert_array_equal(idx, [1, 2])


def test_maxpool_ties_pick_first_index():
    out, idx = T.maxpool1d(T.tensor(np.full(9, 3.0)), 3, 2)
    np.testing.assert_array_equal(out.data, [3.0] * 4)
    np.testing.assert_array_equal(idx, [0, 2, 4, 6])


def test_maxpool_unit_window_is_identity(rng):
    x = rng.normal(size=(3, 7))
    out, idx = T.maxpool1d(T.tensor(x), 1, 1)
    np.testing.assert_array_equal(out.data, x)
    np.testing.assert_array_equal(idx, np.tile(np.arange(7), (3, 1)))


def test_maxpool_width_exceeds_length():
    with pytest.raises(DimensionError):
        T.maxpool1d(T.tensor(np.zeros(3)), 4, 1)


@pytest.mark.parametrize("width,stride", [(2, 2), (3, 1), (4, 3)])
def test_maxpool_gradients(rng, width, stride):
    x = T.Tensor(rng.normal(size=(2, 3, 13)), requires_grad=True)
    out_len = (13 - width) // stride + 1
    weights = rng.normal(size=(2, 3, out_len))

    def build():
        x.zero_grad()
        return T.tsum(T.mul(T.maxpool1d(x, width, stride)[0], T.tensor(weights)))

    assert gradcheck(build, [x]) < 1e-4


def test_maxpool_gradient_only_reaches_argmax(rng):
    x = T.Tensor(rng.normal(size=(2, 12)), requires_grad=True)
    out, idx = T.maxpool1d(x, 3, 3)
    T.tsum(out).backward()
    chosen = np.zeros_like(x.data, dtype=bool)
    np.put_along_axis(chosen, idx, True, axis=-1)
    assert np.all(x.grad[~chosen] == 0)
    assert np.all(x.grad[chosen] == 1)
    # perturbing a non-argmax element leaves the pooled output unchanged
    r, c = np.argwhere(~chosen)[0]
    bumped = x.data.copy()
    bumped[r, c] -= 0.5
    np.testing.assert_array_equal(T.maxpool1d(T.tensor(bumped), 3, 3)[0].data, out.data)


# --- embedding ------------------------------------------------------------

def test_embedding_columns_are_rows(rng):
    table = T.tensor(rng.normal(size=(257, 10)))
    out = T.embedding_lookup(np.array([0, 0]), table)
    assert out.shape == (10, 2)
    np.testing.assert_array_equal(out.data[:, 0], table.data[0])
    np.testing.assert_array_equal(out.data[:, 1], table.data[0])


def test_embedding_out_of_range_names_offset():
    table = T.tensor(np.zeros((257, 10)))
    with pytest.raises(InputError, match=r"257 at offset \(2,\)"):
        T.embedding_lookup(np.array([1, 2, 257]), table)


def test_embedding_gradient_counts_occurrences(rng):
    table = T.Tensor(rng.normal(size=(257, 10)), requires_grad=True)
    symbols = np.array([[3, 3, 7, 256, 3], [7, 0, 0, 1, 3]])
    T.tsum(T.embedding_lookup(symbols, table)).backward()
    counts = np.bincount(symbols.reshape(-1), minlength=257)
    np.testing.assert_array_equal(table.grad, np.repeat(counts[:, None], 10, axis=1))

    def f():
        return T.tsum(T.embedding_lookup(symbols, T.tensor(table.data))).item()

    numeric = central_difference(f, table.data)
    np.testing.assert_allclose(numeric, table.grad, atol=1e-6)


# --- dense / activations --------------------------------------------------

def test_sigmoid_zero():
    assert T.sigmoid(T.tensor([0.0])).data[0] == 0.5


def test_sigmoid_range_extremes():
    s = T.sigmoid(T.tensor([-800.0, -30.0, 30.0, 800.0])).data
    assert np.all(s >= 0) and np.all(s <= 1)
    assert np.all(np.isfinite(s))


def test_dense_identity_passthrough(rng):
    x = rng.normal(size=5)
    out = T.dense(T.tensor(x), T.tensor(np.eye(5)), T.tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, x)


def test_dense_shape_error():
    with pytest.raises(DimensionError):
        T.dense(T.tensor(np.zeros(4)), T.tensor(np.zeros((3, 5))), T.tensor(np.zeros(3)))


def test_dense_gradient_3x4(rng):
    x = T.Tensor(rng.normal(size=4), requires_grad=True)
    W = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=3), requires_grad=True)
    weights = T.tensor(rng.normal(size=3))

    def build():
        for t in (x, W, b):
            t.zero_grad()
        return T.tsum(T.mul(T.sigmoid(T.dense(x, W, b)), weights))

    assert gradcheck(build, [x, W, b]) < 1e-6


def test_relu_and_sigmoid_gradients(rng):
    x = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    weights = T.tensor(rng.normal(size=(4, 6)))

    def build():
        x.zero_grad()
        return T.tsum(T.mul(T.sigmoid(T.relu(x)), weights))

    assert gradcheck(build, [x]) < 1e-4


def test_bce_gradient(rng):
    z = T.Tensor(rng.normal(size=6) * 3, requires_grad=True)
    y = np.array([0, 1, 1, 0, 1, 0])

    def build():
        z.zero_grad()
        return T.bce_with_logits(z, y)

    assert gradcheck(build, [z]) < 1e-6


# --- dropout --------------------------------------------------------------

def test_dropout_rate_zero_is_identity(rng):
    x = T.tensor(rng.normal(size=50))
    assert T.dropout(x, 0.0, True, rng) is x
    assert T.dropout(x, 0.0, False) is x


def test_dropout_inference_is_identity(rng):
    x = T.tensor(rng.normal(size=50))
    np.testing.assert_array_equal(T.dropout(x, 0.5, False).data, x.data)


def test_dropout_zero_fraction_and_scaling():
    rng = np.random.default_rng(7)
    x = T.tensor(np.ones(100_000))
    out = T.dropout(x, 0.5, True, rng).data
    assert abs(np.mean(out == 0) - 0.5) < 0.01
    assert set(np.unique(out)) == {0.0, 2.0}


def test_dropout_rejects_rate_one():
    with pytest.raises(InputError):
        T.dropout(T.tensor([1.0]), 1.0, True, np.random.default_rng(0))


# --- backward -------------------------------------------------------------

def test_backward_without_graph_is_state_error():
    with pytest.raises(StateError):
        T.tensor([3.0]).backward()


def test_backward_requires_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        T.relu(x).backward()


def test_constant_loss_gives_zero_gradients(rng):
    x = T.Tensor(rng.normal(size=(2, 9)), requires_grad=True)
    k = T.Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
    loss = T.tsum(T.scale(T.conv1d(x, k, T.tensor(np.zeros(3))), 0.0))
    loss.backward()
    assert np.all(x.grad == 0) and np.all(k.grad == 0)


def test_two_layer_toy_model_gradient(rng):
    """embedding -> conv/relu/pool -> conv/relu -> global max -> dense -> BCE."""
    table = T.Tensor(rng.normal(size=(257, 4)), requires_grad=True)
    k1 = T.Tensor(rng.normal(size=(5, 4, 3)), requires_grad=True)
    b1 = T.Tensor(rng.normal(size=5), requires_grad=True)
    k2 = T.Tensor(rng.normal(size=(6, 5, 3)), requires_grad=True)
    b2 = T.Tensor(rng.normal(size=6), requires_grad=True)
    W = T.Tensor(rng.normal(size=(1, 6)), requires_grad=True)
    b = T.Tensor(rng.normal(size=1), requires_grad=True)
    params = [table, k1, b1, k2, b2, W, b]
    symbols = rng.integers(0, 257, size=(3, 24))
    y = np.array([1, 0, 1])

    def build():
        for p in params:
            p.zero_grad()
        h = T.embedding_lookup(symbols, table)
        h, _ = T.maxpool1d(T.relu(T.conv1d(h, k1, b1)), 2, 2)
        h = T.relu(T.conv1d(h, k2, b2))
        h, _ = T.maxpool1d(h, h.shape[-1], 1)
        z = T.dense(T.reshape(h, h.shape[:-1]), W, b)
        return T.bce_with_logits(T.reshape(z, (3,)), y)

    assert gradcheck(build, params) < 1e-4
