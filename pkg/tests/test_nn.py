import numpy as np
import pytest

from diffope.nn import Adam, Mlp, grads_flat, sinusoidal_embedding
from diffope.rng import RngStream


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_zero_net_maps_to_zero():
    net = Mlp.zeros([3, 4, 2])
    assert np.array_equal(net.forward(np.ones(3)), np.zeros(2))


def test_identity_single_layer_echoes_input():
    net = Mlp([3, 3], [np.eye(3)], [np.zeros(3)])
    x = np.array([0.3, -1.2, 2.5])
    assert np.array_equal(net.forward(x), x)


def test_forward_matches_hand_rolled_matmul():
    rng = RngStream(42)
    net = Mlp.init_random([2, 3, 1], rng)
    x = np.array([0.5, -0.7])
    z1 = net.weights[0] @ x + net.biases[0]
    a1 = np.maximum(z1, 0.0)
    expect = net.weights[1] @ a1 + net.biases[1]
    assert np.allclose(net.forward(x), expect, atol=1e-10)


def test_dimension_mismatch_errors():
    net = Mlp.zeros([3, 2])
    with pytest.raises(ValueError):
        net.forward(np.ones(4))


def test_linear_net_squared_loss_closed_form_gradient():
    w = np.array([[1.5, -0.5]])
    b = np.array([0.25])
    net = Mlp([2, 1], [w], [b])
    x = np.array([0.3, 0.8])
    y = np.array([1.0])
    out, cache = net.forward_cached(x)
    resid = out - y
    grads, dx = net.backward(cache, 2.0 * resid)
    assert np.allclose(grads[0][0], 2.0 * resid[:, None] * x[None, :], atol=1e-12)
    assert np.allclose(grads[0][1], 2.0 * resid, atol=1e-12)
    assert np.allclose(dx, 2.0 * resid @ w, atol=1e-12)


def test_zero_upstream_gives_zero_gradients():
    net = Mlp.init_random([3, 5, 2], RngStream(3))
    _, cache = net.forward_cached(np.ones(3))
    grads, dx = net.backward(cache, np.zeros(2))
    assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads)
    assert np.all(dx == 0)


@pytest.mark.parametrize("activation", ["relu", "sigmoid"])
def test_gradients_match_finite_differences(activation):
    # property check across 100 random (architecture, input) pairs, dims <= 8
    failures = 0
    for trial in range(100):
        rng = RngStream(1000 + trial)
        dims_n = int(rng.integers(2, 5))
        dims = [int(rng.integers(1, 9)) for _ in range(dims_n)]
        net = Mlp.init_random(dims, rng.child(0), activation=activation)
        # relu is non-differentiable at 0: draw inputs whose pre-activations
        # stay clear of the kink so central differences are valid
        x = rng.child(1).normal((dims[0],))
        for attempt in range(2, 50):
            _, (pre, _, _) = net.forward_cached(x)
            if all(np.abs(z).min() > 1e-3 for z in pre[:-1]) or activation != "relu":
                break
            x = rng.child(1, attempt).normal((dims[0],))
        target = rng.child(2).normal((dims[-1],))

        def loss_of(flat, net=net, x=x, target=target):
            probe = net.copy()
            probe.set_flat(flat)
            return float(((probe.forward(x) - target) ** 2).sum())

        flat = net.get_flat()
        out, cache = net.forward_cached(x)
        grads, _ = net.backward(cache, 2.0 * (out - target))
        analytic = grads_flat(net, grads)
        numeric = numeric_grad(loss_of, flat)
        denom = np.maximum(np.abs(numeric), 1.0)
        if not np.all(np.abs(analytic - numeric) / denom < 1e-4):
            failures += 1
    assert failures == 0


def test_input_gradient_matches_finite_differences():
    rng = RngStream(77)
    net = Mlp.init_random([4, 6, 3], rng, activation="sigmoid")
    x = rng.child(1).normal((4,))

    def loss_of_x(xv):
        return float((net.forward(xv) ** 2).sum())

    out, cache = net.forward_cached(x)
    _, dx = net.backward(cache, 2.0 * out)
    numeric = numeric_grad(loss_of_x, x)
    assert np.allclose(dx, numeric, rtol=1e-4, atol=1e-7)


def test_batched_backward_sums_over_batch():
    net = Mlp.init_random([3, 4, 2], RngStream(5))
    xb = RngStream(6).normal((7, 3))
    up = RngStream(8).normal((7, 2))
    _, cache = net.forward_cached(xb)
    grads_b, dx_b = net.backward(cache, up)
    acc = [np.zeros_like(p) for pair in zip(net.weights, net.biases) for p in pair]
    for i in range(7):
        _, cache_i = net.forward_cached(xb[i])
        g_i, dx_i = net.backward(cache_i, up[i])
        flat_i = grads_flat(net, g_i)
        acc_flat = grads_flat(net, grads_b)
        assert np.allclose(dx_b[i], dx_i, atol=1e-12)
    assert np.allclose(grads_flat(net, grads_b),
                       sum(grads_flat(net, net.backward(net.forward_cached(xb[i])[1], up[i])[0])
                           for i in range(7)), atol=1e-10)


def test_adam_step_count_and_finiteness():
    opt = Adam(4, lr=0.1)
    params = np.zeros(4)
    for i in range(5):
        params = opt.step(params, np.array([1.0, -2.0, 0.5, 1e6]))
        assert opt.step_count == i + 1
        assert np.all(np.isfinite(params))


def test_adam_minimizes_quadratic():
    opt = Adam(2, lr=0.05)
    params = np.array([3.0, -2.0])
    for _ in range(500):
        params = opt.step(params, 2.0 * params)
    assert np.all(np.abs(params) < 1e-2)


def test_sinusoidal_embedding_shapes_and_determinism():
    e1 = sinusoidal_embedding(3, 16)
    e2 = sinusoidal_embedding(3, 16)
    assert e1.shape == (16,)
    assert np.array_equal(e1, e2)
    eb = sinusoidal_embedding(np.array([1, 2, 3]), 8)
    assert eb.shape == (3, 8)
    assert np.allclose(eb[2], sinusoidal_embedding(3, 8))
    with pytest.raises(ValueError):
        sinusoidal_embedding(1, 7)
