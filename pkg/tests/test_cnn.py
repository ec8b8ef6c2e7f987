import numpy as np
import pytest

from mtpose.cnn import (
    Activation,
    Conv,
    FullyConnected,
    MaxPool,
    NetworkSpec,
    Output,
    activate,
    backward,
    conv_forward,
    default_spec,
    extract_features,
    forward,
    init_state,
    load_checkpoint,
    loss_value,
    maxpool_forward,
    save_checkpoint,
    sgd_step,
    train_epoch,
)
from mtpose.exceptions import MtposeError, NumericsError, ShapeError


def _tiny_spec(activation=Activation.RELU, hw=8, d2=2):
    layers = (
        Conv(4, 3, 3, activation),
        MaxPool(),
        FullyConnected(6, activation),
        Output(d2),
    )
    return NetworkSpec(input=(1, hw, hw), layers=layers)


# ------------------------------------------------------------- activations


def test_activation_values():
    x = np.array([-2.0, 0.0, 3.0])
    assert np.array_equal(activate(Activation.RELU, x), [0.0, 0.0, 3.0])
    assert np.allclose(activate(Activation.SIGMOID, x), 1 / (1 + np.exp(-x)))
    assert np.allclose(activate(Activation.TANH, x), np.tanh(x))


# ------------------------------------------------------------ shape trace


def test_default_spec_shape_trace_64():
    spec = default_spec(2, Activation.RELU, input_hw=64)
    trace = spec.shape_trace()
    spatial = [t[-1] for t in trace if len(t) == 3]
    assert spatial == [60, 30, 28, 14, 12, 6]
    assert trace[-2] == (512,)
    assert trace[-1] == (2,)


def test_spec_rejects_nonpositive_spatial():
    with pytest.raises(MtposeError):
        default_spec(2, Activation.RELU, input_hw=10).shape_trace()


# ---------------------------------------------------------------- forward


def test_conv_forward_matches_naive_loops():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    post, pre = conv_forward(x, w, b, Activation.RELU)
    naive = np.zeros((2, 4, 4, 4))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(4):
                    naive[n, o, i, j] = (
                        np.sum(x[n, :, i : i + 3, j : j + 3] * w[o]) + b[o]
                    )
    assert np.allclose(pre, naive, atol=1e-12)
    assert np.allclose(post, np.maximum(naive, 0.0), atol=1e-12)


def test_zero_weights_give_zero_preactivation():
    x = np.ones((1, 2, 5, 5))
    post, pre = conv_forward(
        x, np.zeros((3, 2, 3, 3)), np.zeros(3), Activation.RELU
    )
    assert np.array_equal(pre, np.zeros_like(pre))
    assert np.array_equal(post, np.zeros_like(post))


def test_maxpool_forward_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out, arg = maxpool_forward(x)
    assert np.array_equal(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])


def test_forward_output_is_linear_layer():
    spec = _tiny_spec()
    state = init_state(spec, 0)
    x = np.random.default_rng(1).normal(size=(3, 1, 8, 8))
    pred, _ = forward(spec, state, x)
    assert pred.shape == (3, 2)
    # doubling the Output weights and bias doubles predictions: linearity
    out_idx = len(spec.layers) - 1
    state2 = {
        i: ({k: 2 * v for k, v in p.items()} if i == out_idx else p)
        for i, p in state.items()
    }
    pred2, _ = forward(spec, state2, x)
    assert np.allclose(pred2, 2 * pred)


def test_relu_positive_homogeneity():
    # with zero biases, scaling the input scales all pre-Output values
    spec = default_spec(2, Activation.RELU, input_hw=32)
    state = init_state(spec, 2)
    state = {
        i: {"w": p["w"], "b": np.zeros_like(p["b"])} for i, p in state.items()
    }
    x = np.abs(np.random.default_rng(3).normal(size=(2, 1, 32, 32)))
    feats1 = extract_features(spec, state, x)
    feats3 = extract_features(spec, state, 3.0 * x)
    assert np.allclose(feats3, 3.0 * feats1, atol=1e-10)


def test_forward_rejects_wrong_input_shape():
    spec = _tiny_spec()
    state = init_state(spec, 0)
    with pytest.raises((ShapeError, MtposeError)):
        forward(spec, state, np.zeros((2, 1, 9, 9)))


# --------------------------------------------------------------- gradients


def _loss_of_state(spec, state, x, y):
    pred, _ = forward(spec, state, x)
    return loss_value(pred, y)


@pytest.mark.parametrize("activation", list(Activation))
def test_gradients_match_finite_differences(activation):
    rng = np.random.default_rng(4)
    spec = _tiny_spec(activation)
    state = init_state(spec, 5)
    x = rng.normal(size=(3, 1, 8, 8))
    y = rng.normal(size=(3, 2))
    pred, cache = forward(spec, state, x)
    grads = backward(spec, state, cache, y)
    eps = 1e-6
    for li, layer_grads in grads.items():
        for name, g in layer_grads.items():
            flat = state[li][name].reshape(-1)
            idx = rng.choice(flat.size, size=min(12, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                hi = _loss_of_state(spec, state, x, y)
                flat[i] = orig - eps
                lo = _loss_of_state(spec, state, x, y)
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                ana = g.reshape(-1)[i]
                denom = max(abs(fd), abs(ana), 1e-8)
                assert abs(fd - ana) / denom < 1e-4, f"{li}.{name}[{i}]: {fd} vs {ana}"


def test_loss_value_definition():
    pred = np.array([[1.0, 2.0], [3.0, 4.0]])
    y = np.array([[0.0, 0.0], [3.0, 4.0]])
    # mean over the batch of 0.5 * squared error
    assert loss_value(pred, y) == pytest.approx(0.5 * 5.0 / 2)


# ---------------------------------------------------------------- training


def test_sgd_step_moves_against_gradient():
    state = {0: {"w": np.array([[1.0, 2.0]])}}
    grads = {0: {"w": np.array([[0.5, -1.0]])}}
    new = sgd_step(state, grads, eta=0.1)
    assert np.allclose(new[0]["w"], [[0.95, 2.1]])
    assert np.array_equal(state[0]["w"], [[1.0, 2.0]])  # input untouched


def test_sgd_step_rejects_nonfinite_gradient():
    with pytest.raises(NumericsError):
        sgd_step(
            {0: {"w": np.zeros(2)}}, {0: {"w": np.array([np.nan, 0.0])}}, 0.1
        )


def test_overfits_single_sample():
    rng = np.random.default_rng(6)
    spec = _tiny_spec()
    state = init_state(spec, 7)
    x = rng.normal(size=(1, 1, 8, 8))
    y = np.array([[0.3, -0.2]])
    loss = np.inf
    train_rng = np.random.default_rng(8)
    for _ in range(300):
        state, loss = train_epoch(spec, state, x, y, eta=0.1, batch_size=1, rng=train_rng)
    assert loss < 1e-4


def test_train_epoch_deterministic():
    rng = np.random.default_rng(9)
    spec = _tiny_spec()
    x = rng.normal(size=(10, 1, 8, 8))
    y = rng.normal(size=(10, 2))

    def run():
        state = init_state(spec, 10)
        r = np.random.default_rng(11)
        for _ in range(2):
            state, loss = train_epoch(spec, state, x, y, eta=0.05, batch_size=4, rng=r)
        return state, loss

    s1, l1 = run()
    s2, l2 = run()
    assert l1 == l2
    for i in s1:
        for k in s1[i]:
            assert np.array_equal(s1[i][k], s2[i][k])


def test_init_state_seeded_and_distinct():
    spec = _tiny_spec()
    a, b, c = init_state(spec, 1), init_state(spec, 1), init_state(spec, 2)
    for i in a:
        for k in a[i]:
            assert np.array_equal(a[i][k], b[i][k])
    assert any(
        not np.array_equal(a[i][k], c[i][k]) for i in a for k in a[i]
    )


# ---------------------------------------------------------------- features


def test_extract_features_is_fc_output():
    spec = default_spec(2, Activation.RELU, input_hw=32)
    state = init_state(spec, 12)
    x = np.random.default_rng(13).normal(size=(4, 1, 32, 32))
    feats = extract_features(spec, state, x)
    assert feats.shape == (4, 512)
    assert np.all(feats >= 0.0)  # post-ReLU


# --------------------------------------------------------------- round trip


def test_checkpoint_round_trip(tmp_path):
    spec = _tiny_spec(Activation.TANH)
    state = init_state(spec, 14)
    path = tmp_path / "net.npz"
    save_checkpoint(spec, state, path)
    spec2, state2 = load_checkpoint(path)
    assert spec2 == spec
    for i in state:
        for k in state[i]:
            assert np.array_equal(state[i][k], state2[i][k])
    x = np.random.default_rng(15).normal(size=(2, 1, 8, 8))
    p1, _ = forward(spec, state, x)
    p2, _ = forward(spec2, state2, x)
    assert np.array_equal(p1, p2)
