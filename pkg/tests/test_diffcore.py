import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lsadsac import diffcore as dc
from lsadsac.errors import (
    BadMagicError,
    BadVersionError,
    ConfigurationError,
    InvalidInputError,
    NumericError,
    TruncatedError,
    UsageError,
)


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


@pytest.fixture
def rng():
    return np.random.default_rng(7)


# ---------------------------------------------------------------- mlp_forward


def test_mlp_zero_weights_give_zero(rng):
    spec = [(4, 3, "relu"), (3, 2, None)]
    store = dc.ParameterStore()
    dc.init_mlp(store, "", spec, rng)
    for name in store:
        store[name] = np.zeros_like(store[name])
    out = dc.mlp_forward(store, spec, rng.normal(size=4))
    assert np.array_equal(out.data, np.zeros(2))


def test_mlp_identity_layer():
    store = dc.ParameterStore({"l0.W": np.eye(3), "l0.b": np.zeros(3)})
    v = np.array([1.5, -2.0, 0.25])
    assert np.array_equal(dc.mlp_forward(store, [(3, 3, None)], v).data, v)


def test_mlp_matches_straight_line_oracle(rng):
    spec = [(4, 3, "relu"), (3, 2, None)]
    store = dc.ParameterStore()
    dc.init_mlp(store, "", spec, rng)
    x = rng.normal(size=4)
    h = [sum(x[i] * store["l0.W"][i, j] for i in range(4)) + store["l0.b"][j] for j in range(3)]
    h = [max(v, 0.0) for v in h]
    y = [sum(h[i] * store["l1.W"][i, j] for i in range(3)) + store["l1.b"][j] for j in range(2)]
    np.testing.assert_allclose(dc.mlp_forward(store, spec, x).data, y, rtol=0, atol=1e-12)


def test_mlp_dimension_mismatch_names_layer(rng):
    spec = [(4, 3, "relu"), (3, 2, None)]
    store = dc.ParameterStore()
    dc.init_mlp(store, "net.", spec, rng)
    with pytest.raises(ConfigurationError, match="net.l0"):
        dc.mlp_forward(store, spec, np.ones(5), prefix="net.")


# ---------------------------------------------------------------- lstm_forward


def _lstm_store(rng, n_in, hidden, zero=False):
    store = dc.ParameterStore()
    dc.init_lstm(store, "", n_in, hidden, rng)
    if zero:
        for name in store:
            store[name] = np.zeros_like(store[name])
    return store


def test_lstm_zero_everything_gives_zero(rng):
    store = _lstm_store(rng, 3, 50, zero=True)
    h = dc.lstm_forward(store, [np.zeros(3), np.zeros(3)])
    assert h.shape == (50,)
    assert np.array_equal(h.data, np.zeros(50))


def test_lstm_single_step_matches_one_cell_oracle(rng):
    n_in, H = 3, 4
    store = _lstm_store(rng, n_in, H)
    x = rng.normal(size=n_in)
    Wx, b = store["Wx"], store["b"]
    expected = []
    for k in range(H):
        z = [sum(x[i] * Wx[i, g * H + k] for i in range(n_in)) + b[g * H + k] for g in range(4)]
        c = _sig(z[0]) * math.tanh(z[2])  # c0 = 0 kills the forget path
        expected.append(_sig(z[3]) * math.tanh(c))
    np.testing.assert_allclose(dc.lstm_forward(store, [x]).data, expected, rtol=0, atol=1e-12)


def test_lstm_is_order_sensitive(rng):
    store = _lstm_store(rng, 5, 50)
    u, v = rng.normal(size=5), rng.normal(size=5)
    a = dc.lstm_forward(store, [u, v]).data
    b = dc.lstm_forward(store, [v, u]).data
    assert np.linalg.norm(a - b) > 1e-9


def test_lstm_batched_equals_per_row(rng):
    store = _lstm_store(rng, 5, 8)
    seq = rng.normal(size=(3, 4, 5))
    batched = dc.lstm_forward(store, seq).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], dc.lstm_forward(store, list(seq[i])).data, atol=1e-14)


def test_lstm_empty_sequence_rejected(rng):
    store = _lstm_store(rng, 3, 4)
    with pytest.raises(InvalidInputError):
        dc.lstm_forward(store, [])
    with pytest.raises(InvalidInputError):
        dc.lstm_forward(store, np.zeros((2, 0, 3)))


# ---------------------------------------------------------------- softmax


def test_softmax_constant_is_uniform():
    np.testing.assert_allclose(dc.softmax(np.full(7, 3.3)).data, np.full(7, 1 / 7), atol=1e-15)


def test_softmax_analytic_pair():
    np.testing.assert_allclose(dc.softmax(np.array([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)


finite_vectors = arrays(np.float64, st.integers(1, 12), elements=st.floats(-500, 500))


@given(finite_vectors, st.floats(-1e3, 1e3))
def test_softmax_is_distribution_and_shift_invariant(v, c):
    p = dc.softmax(v).data
    assert np.all(p > 0) or np.ptp(v) > 700  # exp underflow only for huge spreads
    assert abs(p.sum() - 1) <= 1e-9
    np.testing.assert_allclose(dc.softmax(v + c).data, p, atol=1e-9)


# ---------------------------------------------------------------- backward


def test_quadratic_gradient_is_w(rng):
    w0 = rng.normal(size=6)
    w = dc.Tensor(w0, requires_grad=True, name="w")
    grads = dc.backward(dc.mul(dc.sum(w * w), 0.5))
    assert np.array_equal(grads["w"], w0)


def test_softmax_cross_entropy_gradient(rng):
    logits = rng.normal(size=9)
    t = dc.Tensor(logits, requires_grad=True, name="z")
    g = dc.backward(dc.softmax_cross_entropy(t, 4))["z"]
    e = np.exp(logits - logits.max())
    expected = e / e.sum()
    expected[4] -= 1.0
    np.testing.assert_allclose(g, expected, rtol=0, atol=1e-10)


def test_backward_rejects_non_scalar():
    with pytest.raises(UsageError):
        dc.backward(dc.Tensor(np.ones(3), requires_grad=True, name="x"))


def test_backward_nan_names_parameter():
    w = dc.Tensor(np.array([0.0, 1.0]), requires_grad=True, name="layer.W")
    with pytest.raises(NumericError) as info, np.errstate(divide="ignore"):
        dc.backward(dc.sum(dc.log(w)))
    assert info.value.name == "layer.W"


def test_composite_gradient_finite_differences(rng):
    store = dc.ParameterStore()
    dc.init_mlp(store, "m.", [(5, 6, "relu"), (6, 4, None)], rng)
    dc.init_lstm(store, "r.", 4, 3, rng)
    x = rng.normal(size=(2, 3, 5))

    def forward(params, grad):
        p = params.view("", grad)
        feats = dc.mlp_forward(p, [(5, 6, "relu"), (6, 4, None)], x, "m.")
        h = dc.lstm_forward(p, feats, "r.")
        return dc.sum(dc.softmax(h) * np.array([1.0, -2.0, 0.5]))

    grads = dc.backward(forward(store, True))
    assert set(grads) == set(store.keys())
    rows = dc.finite_difference_check(lambda s: float(forward(s, False).data), store, grads, rng)
    assert len(rows) == 64
    assert max(r[4] for r in rows) < 1e-4


def test_untouched_parameters_absent(rng):
    store = dc.ParameterStore({"a": rng.normal(size=3), "b": rng.normal(size=3)})
    p = store.view("", grad=True)
    grads = dc.backward(dc.sum(p["a"]))
    assert list(grads) == ["a"]


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: dc.sum(dc.minimum(a, b) * dc.tanh(a)),
        lambda a, b: dc.sum(dc.concat([a, b], axis=0) * dc.concat([b, a], axis=0)),
        lambda a, b: dc.sum(dc.log_softmax(a * b, axis=-1)[..., 1]),
        lambda a, b: dc.sum(dc.matmul(dc.reshape(a, (2, 3)), dc.reshape(b, (3, 2)))),
        lambda a, b: dc.mean(dc.broadcast_to(dc.reshape(a, (1, 6)), (4, 6)) * b),
        lambda a, b: dc.sum(dc.gather(dc.reshape(a * b, (2, 3)), np.array([2, 0]))),
        lambda a, b: dc.sum(dc.stack([a, dc.exp(b)], axis=1)[:, 1]),
    ],
)
def test_primitive_gradients(op, rng):
    store = dc.ParameterStore({"a": rng.normal(size=6), "b": rng.normal(size=6)})
    grads = dc.backward(op(*[store.view("", True)[k] for k in "ab"]))

    def f(s):
        return float(op(dc.Tensor(s["a"]), dc.Tensor(s["b"])).data)

    rows = dc.finite_difference_check(f, store, grads, rng, n_coords=12)
    assert max(r[4] for r in rows) < 1e-6


# ---------------------------------------------------------------- adam


def _adam_setup(shape=(3,)):
    store = dc.ParameterStore({"w": np.linspace(-1, 1, int(np.prod(shape))).reshape(shape)})
    return store, dc.OptimizerState(store, ["w"], lr=3e-4)


def test_adam_zero_gradient_is_identity():
    store, opt = _adam_setup()
    before = store["w"].copy()
    for _ in range(5):
        dc.adam_step(store, dc.GradientStore(w=np.zeros(3)), opt)
    assert np.array_equal(store["w"], before)
    assert opt.step == 5


def test_adam_first_step_magnitude_is_lr():
    store, opt = _adam_setup()
    before = store["w"].copy()
    dc.adam_step(store, dc.GradientStore(w=np.array([2.0, -0.5, 10.0])), opt)
    delta = np.abs(store["w"] - before)
    assert np.all(delta >= 0.99 * 3e-4) and np.all(delta <= 3e-4)


def test_adam_matches_independent_recurrence():
    store, opt = _adam_setup()
    stream = np.random.default_rng(3).normal(size=(10, 3))
    theta = store["w"].copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t, g in enumerate(stream, start=1):
        dc.adam_step(store, dc.GradientStore(w=g.copy()), opt)
        for i in range(3):
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.999 * v[i] + 0.001 * g[i] ** 2
            mh = m[i] / (1 - 0.9**t)
            vh = v[i] / (1 - 0.999**t)
            theta[i] = theta[i] - 3e-4 * mh / (math.sqrt(vh) + 1e-8)
    np.testing.assert_allclose(store["w"], theta, rtol=0, atol=1e-10)


def test_adam_missing_state_is_configuration_error():
    store, opt = _adam_setup()
    store.add("extra", np.ones(2))
    with pytest.raises(ConfigurationError):
        dc.adam_step(store, dc.GradientStore(extra=np.ones(2)), opt)


def test_parameter_shape_is_fixed():
    store = dc.ParameterStore({"w": np.zeros((2, 3))})
    with pytest.raises(ConfigurationError):
        store["w"] = np.zeros(6)


# ---------------------------------------------------------------- serialisation


def _random_store(rng):
    store = dc.ParameterStore()
    dc.init_mlp(store, "net.", [(4, 5, "relu"), (5, 2, None)], rng)
    store.add("log_alpha", np.array(math.log(0.2)))
    return store


def test_round_trip_bit_exact(rng):
    store = _random_store(rng)
    back, meta = dc.deserialize_params(dc.serialize_params(store, {"encoder": "LSA"}), with_metadata=True)
    assert meta == {"encoder": "LSA"}
    assert list(back.keys()) == list(store.keys())
    for k in store:
        assert back[k].shape == store[k].shape
        assert back[k].tobytes() == store[k].tobytes()


@given(arrays(np.float64, st.tuples(st.integers(0, 3), st.integers(1, 4))))
@settings(max_examples=50)
def test_round_trip_arbitrary_values(a):
    store = dc.ParameterStore({"x": a})
    back = dc.deserialize_params(dc.serialize_params(store))
    assert back["x"].tobytes() == store["x"].tobytes()


def test_parse_errors_are_distinct(rng):
    with pytest.raises(BadMagicError, match="bad magic"):
        dc.deserialize_params(b"")
    blob = dc.serialize_params(_random_store(rng))
    with pytest.raises(BadVersionError):
        dc.deserialize_params(blob[:4] + (99).to_bytes(4, "little") + blob[8:])
    with pytest.raises(TruncatedError):
        dc.deserialize_params(blob[:-3])


def test_reloaded_checkpoint_gives_identical_forward(rng, tmp_path):
    store = _random_store(rng)
    path = tmp_path / "ckpt.bin"
    path.write_bytes(dc.serialize_params(store))
    back = dc.deserialize_params(path.read_bytes())
    x = rng.normal(size=(10, 4))
    spec = [(4, 5, "relu"), (5, 2, None)]
    assert np.array_equal(dc.mlp_forward(store, spec, x, "net.").data, dc.mlp_forward(back, spec, x, "net.").data)
