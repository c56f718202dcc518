import struct

import numpy as np
import pytest

from vhmpc import nn, oracles
from vhmpc.errors import ConfigError, ShapeError


def test_zero_network_outputs_zero():
    net = nn.Mlp([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
    assert np.array_equal(net(np.array([1.0, -2.0, 3.0])), [0.0, 0.0])


def test_identity_layer():
    net = nn.Mlp([np.eye(3)], [np.zeros(3)])
    x = np.array([0.5, -1.5, 2.0])
    assert np.array_equal(net(x), x)


def test_hand_computed_two_two_one():
    W0 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b0 = np.array([0.0, 0.25])
    W1 = np.array([[1.0], [-2.0]])
    b1 = np.array([0.5])
    net = nn.Mlp([W0, W1], [b0, b1])
    # pre-activations: (1 + 4, -1 + 1 + 0.25) = (5, 0.25); output 5 - 0.5 + 0.5
    assert net(np.array([1.0, 2.0]))[0] == pytest.approx(5.0, abs=1e-15)
    # first unit dead: pre = (-3, 1 - 0.5 + 0.25) -> (0, 0.75); output -1.5 + 0.5
    assert net(np.array([-1.0, -1.0]))[0] == pytest.approx(-1.0, abs=1e-15)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        nn.Mlp([np.zeros((2, 3)), np.zeros((2, 1))], [np.zeros(3), np.zeros(1)])
    with pytest.raises(ShapeError):
        nn.forward(nn.Mlp([np.eye(2)], [np.zeros(2)]), np.zeros(3))


def test_linear_layer_gradient():
    net = nn.Mlp([np.arange(6.0).reshape(3, 2)], [np.zeros(2)])
    x = np.array([1.0, -2.0, 0.5])
    _, cache = nn.forward(net, x)
    grads, gx = nn.backward(net, cache, np.array([1.0, 0.0]))
    # weights are stored (fan_in, fan_out): dW = x e1'
    assert np.array_equal(grads[0], np.outer(x, [1.0, 0.0]))
    assert np.array_equal(grads[1], [1.0, 0.0])
    assert np.array_equal(gx, net.weights[0][:, 0])


def test_dead_relu_blocks_gradient():
    net = nn.Mlp([np.array([[1.0, -1.0]]), np.array([[1.0], [1.0]])], [np.zeros(2), np.zeros(1)])
    _, cache = nn.forward(net, np.array([2.0]))   # second hidden unit pre-activation -2
    grads, _ = nn.backward(net, cache, np.array([1.0]))
    assert grads[0][0, 1] == 0.0
    assert grads[1][1] == 0.0
    assert grads[2][1, 0] == 0.0


def test_random_net_matches_finite_differences():
    rng = np.random.default_rng(0)
    net = nn.init_mlp([4, 8, 3], rng)
    for b in net.biases:
        b[:] = 0.1 * rng.standard_normal(b.shape)
    x = rng.standard_normal((5, 4))
    w = rng.standard_normal((5, 3))
    _, cache = nn.forward(net, x)
    grads, gx = nn.backward(net, cache, w)
    loss = lambda: float(np.sum(w * nn.forward(net, x)[0]))
    assert oracles.relative_error(grads, oracles.central_difference(loss, net.params())) <= 1e-4
    assert oracles.relative_error([gx], oracles.central_difference(loss, [x])) <= 1e-4


def test_init_is_seed_reproducible():
    a = nn.init_mlp([3, 5, 2], np.random.default_rng(4))
    b = nn.init_mlp([3, 5, 2], np.random.default_rng(4))
    assert nn.mlp_to_bytes(a) == nn.mlp_to_bytes(b)


def test_final_scale_shrinks_output_layer():
    a = nn.init_mlp([3, 5, 2], np.random.default_rng(4))
    b = nn.init_mlp([3, 5, 2], np.random.default_rng(4), final_scale=1e-2)
    assert np.allclose(b.weights[-1], 1e-2 * a.weights[-1])
    assert np.array_equal(a.weights[0], b.weights[0])


def test_adam_zero_gradient_keeps_params():
    params = [np.array([1.0, -2.0]), np.array([[3.0]])]
    state = nn.AdamState.for_params(params)
    new, _ = nn.adam_step(params, [np.zeros(2), np.zeros((1, 1))], state)
    for p, q in zip(params, new):
        assert np.array_equal(p, q)


def test_adam_first_step_is_about_lr():
    params = [np.zeros(3)]
    g = np.array([0.5, -4.0, 1e-3])
    state = nn.AdamState.for_params(params, lr=1e-3)
    new, st = nn.adam_step(params, [g], state)
    assert np.allclose(new[0], -1e-3 * np.sign(g), rtol=1e-4)
    assert st.step == 1


def test_adam_is_deterministic():
    rng = np.random.default_rng(1)
    params = [rng.normal(size=(2, 2))]
    grads = [rng.normal(size=(2, 2))]
    a, _ = nn.adam_step(params, grads, nn.AdamState.for_params(params))
    b, _ = nn.adam_step(params, grads, nn.AdamState.for_params(params))
    assert a[0].tobytes() == b[0].tobytes()


def test_soft_update_identity():
    rng = np.random.default_rng(2)
    target = nn.init_mlp([2, 3, 1], rng)
    online = nn.init_mlp([2, 3, 1], rng)
    old = target.copy()
    nn.soft_update(target, online, 0.005)
    for t, o, p in zip(target.params(), online.params(), old.params()):
        assert np.array_equal(t, 0.005 * o + (1.0 - 0.005) * p)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = nn.init_mlp([5, 7, 3], np.random.default_rng(9))
    path = tmp_path / "net.bin"
    nn.save_mlp(net, path)
    back = nn.load_mlp(path)
    for a, b in zip(net.params(), back.params()):
        assert a.tobytes() == b.tobytes()
    assert path.read_bytes() == nn.mlp_to_bytes(back)


def test_checkpoint_header_layout():
    net = nn.Mlp([np.ones((2, 3))], [np.zeros(3)])
    data = nn.mlp_to_bytes(net)
    assert data[:8] == b"VHMPC-NN"
    assert struct.unpack_from("<IIII", data, 8) == (1, 1, 2, 3)
    assert len(data) == 8 + 16 + 8 * (6 + 3)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a network")
    with pytest.raises(ConfigError):
        nn.load_mlp(path)
    good = nn.mlp_to_bytes(nn.Mlp([np.eye(2)], [np.zeros(2)]))
    path.write_bytes(good[:-4])
    with pytest.raises(ConfigError):
        nn.load_mlp(path)
