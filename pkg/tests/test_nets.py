import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otcmm import autodiff as ad
from otcmm.nets import (
    NetworkSpec,
    ParamStore,
    StateScaling,
    ValueNetwork,
    backward,
    fd_check,
    forward,
    init_network,
    load_checkpoint,
    make_optimizer,
    optimizer_step,
    save_checkpoint,
)

CONV = NetworkSpec(family="conv_residual")
MLP = NetworkSpec(family="mlp")


def hand_count(spec: NetworkSpec) -> int:
    E = spec.embed_width
    n = spec.input_width * E + E
    if spec.family == "conv_residual":
        conv = spec.conv_out * spec.conv_in * spec.kernel + spec.conv_out
        proj = E * spec.conv_out * E
        n += spec.residual_blocks * 2 * (conv + proj)
    widths = [E, *spec.head_widths, spec.output_width]
    n += sum(a * b + b for a, b in zip(widths, widths[1:]))
    return n


def generic_store(spec: NetworkSpec, seed: int) -> ParamStore:
    """Initialised weights with small random biases, so no ReLU sits exactly at its kink."""
    store = init_network(spec, seed)
    rng = np.random.default_rng(seed + 1)
    arrays = {k: v + 0.1 * rng.standard_normal(v.shape) if k.endswith(".b") else v for k, v in store.arrays.items()}
    return ParamStore(spec, arrays, seed)


def test_parameter_counts():
    assert CONV.parameter_count() == hand_count(CONV) == 158497
    assert MLP.parameter_count() == hand_count(MLP)
    actor = NetworkSpec(output_width=12)
    assert actor.parameter_count() == hand_count(actor)


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(family="transformer")
    with pytest.raises(ValueError):
        NetworkSpec(head_widths=(8, 8))
    with pytest.raises(ValueError):
        NetworkSpec(stride=2)


def test_init_is_seeded():
    a, b, c = init_network(MLP, 3), init_network(MLP, 3), init_network(MLP, 4)
    assert a.equals(b)
    assert not a.equals(c)
    assert all(np.all(v == 0) for k, v in a.arrays.items() if k.endswith(".b"))


def test_zero_weights_give_zero_output():
    store = init_network(CONV, 0).zeros_like()
    x = np.random.default_rng(0).standard_normal((5, 3))
    out, _ = forward(store, x, record=False)
    assert np.all(out == 0)


def test_zeroed_residual_block_is_identity():
    two = init_network(CONV, 1)
    arrays = {k: v.copy() for k, v in two.arrays.items()}
    for k in ("block1.conv2.W", "block1.conv2.b"):
        arrays[k][:] = 0.0
    zeroed = ParamStore(CONV, arrays)
    one_spec = NetworkSpec(residual_blocks=1)
    one = ParamStore(one_spec, {k: arrays[k] for k in one_spec.param_shapes()})
    x = np.random.default_rng(2).standard_normal((7, 3))
    np.testing.assert_allclose(forward(zeroed, x, False)[0], forward(one, x, False)[0], rtol=1e-12, atol=1e-12)


def test_forward_is_pure_and_repeatable():
    store = init_network(CONV, 5)
    before = store.copy()
    x = np.random.default_rng(3).standard_normal((4, 3))
    a, _ = forward(store, x)
    b, _ = forward(store, x)
    assert np.array_equal(a, b)
    assert store.equals(before)
    with pytest.raises(ValueError):
        forward(store, np.array([[np.nan, 0.0, 0.0]]))


def test_linear_gradient_is_input():
    tape = ad.GradTape()
    x = np.array([[1.5, -2.0, 0.25]])
    W = tape.param("W", np.array([[0.3, 0.1, -0.7]]))
    y = ad.linear(tape, tape.input(x), W)
    tape.output = y
    g = tape.backward(1.0)
    np.testing.assert_array_equal(g["W"], x)


def test_linear_layer_matches_finite_differences_tightly():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 4))
    W0, b0 = rng.standard_normal((3, 4)), rng.standard_normal(3)
    up = rng.standard_normal((6, 3))

    def f(W, b):
        return float(np.sum(up * (x @ W.T + b)))

    tape = ad.GradTape()
    tape.output = ad.linear(tape, tape.input(x), tape.param("W", W0), tape.param("b", b0))
    g = tape.backward(up)
    h, worst = 1e-5, 0.0
    for idx in np.ndindex(W0.shape):
        E = np.zeros_like(W0)
        E[idx] = h
        fd = (f(W0 + E, b0) - f(W0 - E, b0)) / (2 * h)
        worst = max(worst, abs(fd - g["W"][idx]) / max(abs(fd), 1e-12))
    assert worst < 1e-8


def test_relu_blocks_negative_preactivation():
    tape = ad.GradTape()
    W = tape.param("W", np.array([[1.0], [-1.0]]))
    tape.output = ad.relu(tape, ad.linear(tape, tape.input(np.array([[2.0]])), W))
    g = tape.backward(np.ones((1, 2)))
    assert g["W"][0, 0] == 2.0 and g["W"][1, 0] == 0.0


def test_tape_is_single_use():
    store = init_network(MLP, 0)
    _, tape = forward(store, np.zeros((1, 3)))
    backward(tape, 1.0, MLP)
    with pytest.raises(ad.TapeConsumedError):
        backward(tape, 1.0, MLP)


@pytest.mark.parametrize("spec", [CONV, MLP], ids=["conv_residual", "mlp"])
def test_fd_check_passes(spec):
    store = generic_store(spec, 7)
    x = np.random.default_rng(8).uniform(-1, 1, (3, 3))
    rep = fd_check(store, x, tolerance=1e-4, max_per_tensor=4)
    assert rep.passed, rep


def test_fd_check_detects_a_sign_flip():
    store = init_network(MLP, 7)
    x = np.random.default_rng(8).uniform(-1, 1, (3, 3))
    up = np.ones((3, 1))
    out, tape = forward(store, x)
    g = backward(tape, up, MLP)
    bad = {k: v.copy() for k, v in g.arrays.items()}
    bad["head3.b"] = -bad["head3.b"]
    rep = fd_check(store, x, upstream=up, grads=ParamStore(MLP, bad), max_per_tensor=2)
    assert not rep.passed


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_every_layer_type_matches_fd(seed):
    spec = NetworkSpec(embed_width=8, head_widths=(6, 5, 4), output_width=2)
    store = generic_store(spec, seed)
    x = np.random.default_rng(seed).uniform(-1, 1, (2, 3))
    assert fd_check(store, x, max_per_tensor=3, seed=seed).passed


def test_sgd_step_example():
    spec = NetworkSpec(family="mlp", embed_width=1, head_widths=(1, 1, 1), input_width=1)
    store = ParamStore(spec, {k: np.ones(s) for k, s in spec.param_shapes().items()})
    grads = {k: 2 * np.ones(s) for k, s in spec.param_shapes().items()}
    new, opt = optimizer_step(make_optimizer("sgd", 0.1, store), store, grads)
    assert all(np.allclose(v, 0.8) for v in new.arrays.values())
    assert all(np.all(v == 1) for v in store.arrays.values())


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_keeps_parameters(kind):
    store = init_network(MLP, 1)
    new, _ = optimizer_step(make_optimizer(kind, 0.01, store), store, store.zeros_like())
    assert new.equals(store)


def test_adam_first_step_closed_form():
    store = init_network(MLP, 1)
    g = {k: np.full(v.shape, 0.37) for k, v in store.arrays.items()}
    new, opt = optimizer_step(make_optimizer("adam", 1e-3, store), store, g)
    # m_hat = g, v_hat = g^2: step = lr * g / (|g| + eps)
    expected = 1e-3 * 0.37 / (0.37 + 1e-8)
    for k in store.arrays:
        np.testing.assert_allclose(store.arrays[k] - new.arrays[k], expected, rtol=1e-12)
    assert opt.step == 1


def test_optimizer_rejects_shape_mismatch():
    store = init_network(MLP, 1)
    g = {k: np.zeros(3) for k in store.arrays}
    with pytest.raises(ValueError):
        optimizer_step(make_optimizer("sgd", 0.1, store), store, g)


def test_checkpoint_round_trip(tmp_path):
    store = init_network(CONV, 9)
    path = save_checkpoint(tmp_path / "c.json", store, {"role": "x"})
    back, meta = load_checkpoint(path)
    assert back.equals(store) and meta == {"role": "x"}
    V = ValueNetwork(store, StateScaling(1.0, 1.0, 100.0), 12.5)
    V.save(tmp_path / "v.json")
    W = ValueNetwork.load(tmp_path / "v.json")
    assert W(0.3, 1.1, 40) == V(0.3, 1.1, 40)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.json")


def test_value_network_gradient_scaling():
    V = ValueNetwork(init_network(MLP, 2), StateScaling(1.0, 1.0, 100.0), 50.0)
    vals, tape = V.forward(np.array([0.1, 0.5]), np.array([1.0, 1.2]), np.array([0, 30]))
    g = V.gradient(tape, np.array([1.0, -1.0]))
    h = 1e-6
    arr = {k: v.copy() for k, v in V.store.arrays.items()}
    arr["head3.b"] = arr["head3.b"] + h
    W = V.with_store(ParamStore(MLP, arr))
    fd = (W(np.array([0.1, 0.5]), np.array([1.0, 1.2]), np.array([0, 30])) - vals) / h
    assert g["head3.b"][0] == pytest.approx(fd[0] - fd[1], rel=1e-5, abs=1e-8)
    assert math.isfinite(V(0.0, 1.0, 0))
