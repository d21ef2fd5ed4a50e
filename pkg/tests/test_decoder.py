import numpy as np
import pytest

from triquad.decoder import MlpDecoder, adam_update, init_mlp
from triquad.errors import DimensionMismatch, InvalidConfig


def test_parameter_counts():
    assert init_mlp(120, 32, 2, 0).parameter_count() == 4961
    assert init_mlp(120, 32, 0, 0).parameter_count() == 121


def test_init_is_deterministic_and_glorot_bounded():
    a, b = init_mlp(20, 8, 2, 5), init_mlp(20, 8, 2, 5)
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p, q)
    for w, bias in zip(a.weights, a.biases):
        limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        assert np.all(np.abs(w) <= limit)
        assert np.all(bias == 0)
    with pytest.raises(InvalidConfig):
        init_mlp(0, 8, 2, 0)


def test_forward_examples():
    net = MlpDecoder([np.zeros((4, 3)), np.zeros((1, 4))], [np.zeros(4), np.zeros(1)])
    assert net(np.ones(3)) == 0.0
    w = np.zeros((1, 5))
    w[0, 0] = 1.0
    lin = MlpDecoder([w], [np.zeros(1)])
    phi = np.zeros(5)
    phi[0] = 0.5
    assert lin(phi) == 0.5
    with pytest.raises(DimensionMismatch):
        lin(np.zeros(4))


def naive_forward(net, phi):
    x = list(phi)
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        y = [sum(W[r, c] * x[c] for c in range(len(x))) + b[r] for r in range(W.shape[0])]
        x = y if i == len(net.weights) - 1 else [max(v, 0.0) for v in y]
    return x[0]


def test_forward_matches_naive_oracle():
    rng = np.random.default_rng(0)
    net = init_mlp(10, 6, 2, 3)
    for layer in net.biases:
        layer[:] = rng.normal(size=layer.shape)
    for _ in range(10):
        phi = rng.normal(size=10)
        assert net(phi) == pytest.approx(naive_forward(net, phi), abs=1e-12)


def test_backward_closed_form_linear():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(1, 4))
    net = MlpDecoder([w], [np.zeros(1)])
    phi = rng.normal(size=4)
    _, cache = net.forward(phi)
    grads, dphi = net.backward(cache, 0.7)
    assert np.allclose(grads[0], 0.7 * phi[None, :])
    assert np.allclose(grads[1], [0.7])
    assert np.allclose(dphi[0], 0.7 * w[0])
    grads, dphi = net.backward(cache, 0.0)
    assert all(np.all(g == 0) for g in grads) and np.all(dphi == 0)


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_check(seed):
    rng = np.random.default_rng(seed)
    n_in, width, depth = rng.integers(2, 9), rng.integers(2, 9), rng.integers(0, 3)
    net = init_mlp(int(n_in), int(width), int(depth), seed)
    for b in net.biases:
        b[:] = rng.normal(scale=0.5, size=b.shape)
    phi = rng.normal(size=(3, n_in))
    dL = rng.normal(size=3)            # loss = sum(dL * s)

    def loss():
        return float(np.dot(dL, net.forward(phi)[0]))

    _, cache = net.forward(phi)
    grads, dphi = net.backward(cache, dL)
    h = 1e-5
    for p, g in zip(net.parameters(), grads):
        fd = np.empty_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = loss()
            p[idx] = orig - h
            down = loss()
            p[idx] = orig
            fd[idx] = (up - down) / (2 * h)
        assert np.max(rel_err(fd, g)) < 1e-4
    fd = np.empty_like(phi)
    for idx in np.ndindex(phi.shape):
        orig = phi[idx]
        phi[idx] = orig + h
        up = loss()
        phi[idx] = orig - h
        down = loss()
        phi[idx] = orig
        fd[idx] = (up - down) / (2 * h)
    assert np.max(rel_err(fd, dphi)) < 1e-4


def test_adam_zero_gradient_is_noop():
    net = init_mlp(5, 4, 1, 0)
    before = [p.copy() for p in net.parameters()]
    net.adam_step([np.zeros_like(p) for p in net.parameters()], 1e-3)
    assert net.step == 1
    for p, q in zip(before, net.parameters()):
        assert np.array_equal(p, q)


def test_adam_first_step_hand_evaluation():
    theta = np.array([1.0])
    m, v = np.zeros(1), np.zeros(1)
    adam_update(theta, np.array([1.0]), m, v, 1, 0.1, 0.9, 0.999, 1e-8)
    # m_hat = v_hat = 1 -> step = lr / (1 + eps)
    assert theta[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)


def test_adam_runs_are_bit_identical():
    def run():
        net = init_mlp(6, 5, 2, 11)
        rng = np.random.default_rng(4)
        for _ in range(25):
            phi = rng.normal(size=(8, 6))
            s, cache = net.forward(phi)
            grads, _ = net.backward(cache, s - 1.0)
            net.adam_step(grads, 1e-2)
        return np.concatenate([p.ravel() for p in net.parameters()])

    assert np.array_equal(run(), run())
