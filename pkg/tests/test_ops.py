import numpy as np
import pytest
from scipy.signal import correlate2d

from ostr import ops
from ostr.ops import Var


def _fd_check(build, inputs, seed=0, h=1e-6, tol=1e-6):
    """Compare backprop against central differences for every input scalar."""
    rng = np.random.default_rng(seed)
    leaves = [Var(x.copy()) for x in inputs]
    out = build(*leaves)
    upstream = rng.normal(size=out.value.shape)
    grads = ops.backprop(out, upstream)
    for leaf in leaves:
        analytic = grads[id(leaf)][1]
        flat = leaf.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with ops.no_grad():
                up = (build(*[Var(v.value) for v in leaves]).value * upstream).sum()
            flat[i] = orig - h
            with ops.no_grad():
                down = (build(*[Var(v.value) for v in leaves]).value * upstream).sum()
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            assert abs(a - num) <= tol * max(1.0, abs(a), abs(num)), (leaf.name, i, a, num)


def test_conv2d_matches_scipy_correlation():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 6, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    y = ops.conv2d(Var(x), Var(w), Var(b)).value
    for o in range(3):
        ref = sum(correlate2d(x[0, c], w[o, c], mode="same") for c in range(2)) + b[o]
        assert np.allclose(y[0, o], ref)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradients(stride):
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 2, 5, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    _fd_check(lambda x, w, b: ops.conv2d(x, w, b, stride=stride), [x, w, b])


def test_batch_norm_gradients_and_stats():
    rng = np.random.default_rng(2)
    x = rng.normal(2.0, 3.0, size=(3, 2, 3, 3))
    gamma, beta = rng.uniform(0.5, 1.5, 2), rng.normal(size=2)
    mean, var = np.zeros(2), np.ones(2)
    y = ops.batch_norm(Var(x), Var(gamma), Var(beta), mean, var, train=True).value
    assert np.allclose(y.mean(axis=(0, 2, 3)), beta)
    assert np.allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))
    _fd_check(lambda x, g, b: ops.batch_norm(x, g, b, np.zeros(2), np.ones(2), train=True,
                                              update_stats=False), [x, gamma, beta])


def test_batch_norm_inference_uses_running_stats():
    x = np.full((1, 1, 2, 2), 3.0)
    y = ops.batch_norm(Var(x), Var(np.ones(1)), Var(np.zeros(1)), np.array([1.0]), np.array([4.0]),
                       train=False).value
    assert np.allclose(y, 2.0 / np.sqrt(4.0 + 1e-5))


def test_zero_variance_input_stays_finite():
    y = ops.batch_norm(Var(np.zeros((2, 1, 3, 3))), Var(np.ones(1)), Var(np.zeros(1)),
                       np.zeros(1), np.ones(1), train=True).value
    assert np.all(y == 0)


def test_elementwise_and_structural_gradients():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3, 2, 2))
    a[np.abs(a) < 0.05] = 0.3
    _fd_check(lambda a: ops.relu(a), [a])
    _fd_check(lambda a: ops.sigmoid(a), [a])
    _fd_check(lambda a, b: ops.add(a, b), [a, b])
    _fd_check(lambda a, b: ops.concat([a, b], axis=1), [a, b])
    _fd_check(lambda a: ops.split_batch(a, 1, 2), [a])
    _fd_check(lambda a: ops.upsample2x(a), [a])
    s = rng.uniform(0, 1, size=(2, 3, 1, 1))
    _fd_check(lambda a, s: ops.channel_scale(a, s), [a, s])


def test_spatial_max_matches_loop_and_routes_gradient():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4, 5))
    y = ops.spatial_max(Var(x)).value
    for n in range(2):
        for c in range(3):
            best = -np.inf
            for i in range(4):
                for j in range(5):
                    best = max(best, x[n, c, i, j])
            assert y[n, c, 0, 0] == best
    _fd_check(lambda a: ops.spatial_max(a), [x])
    chan = Var(np.array([-1.0, 3.0, 2.0]).reshape(1, 1, 1, 3))
    assert ops.spatial_max(chan).value.item() == 3.0


def test_upsample_of_constant_is_constant():
    y = ops.upsample2x(Var(np.full((1, 1, 3, 3), 2.5))).value
    assert y.shape == (1, 1, 6, 6) and np.allclose(y, 2.5)


def test_bilinear_rows_sum_to_one():
    m = ops.bilinear_matrix(8, 3)
    assert np.allclose(m.sum(axis=1), 1.0)


def test_nonfinite_is_a_hard_error():
    with pytest.raises(ops.NonFiniteError):
        ops.add(Var(np.array([np.inf])), Var(np.array([1.0])))


def test_no_grad_records_nothing():
    with ops.no_grad():
        y = ops.relu(Var(np.ones(3)))
    assert y.parents == () and ops.grad_enabled()


def test_shared_leaf_accumulates_both_paths():
    x = Var(np.array([2.0]))
    y = ops.add(x, x)
    assert ops.backprop(y, np.ones(1))[id(x)][1].item() == 2.0


def test_pattern_replay_freezes_relu_mask():
    with ops.record_pattern() as pattern:
        ops.relu(Var(np.array([1.0, -1.0])))
    with ops.replay_pattern(pattern):
        y = ops.relu(Var(np.array([-1.0, 1.0])))
    assert np.array_equal(y.value, [-1.0, 0.0])
