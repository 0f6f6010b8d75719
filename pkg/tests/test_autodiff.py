import numpy as np
import pytest

from lmk3d import autodiff as ad
from lmk3d.errors import DegenerateBatch, NonScalarLoss, ShapeMismatch


def _leaf(a):
    return ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def check_grads(build, leaves, eps=1e-6, tol=1e-4):
    """Compare tape gradients of the scalar ``build()`` with central differences."""
    for t in leaves:
        t.grad = None
    with ad.Tape():
        out = build()
        ad.backward(out)
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        num = np.zeros_like(t.data)
        for idx in np.ndindex(t.data.shape):
            old = t.data[idx]
            t.data[idx] = old + eps
            up = float(build().data)
            t.data[idx] = old - eps
            dn = float(build().data)
            t.data[idx] = old
            num[idx] = (up - dn) / (2 * eps)
        scale = max(np.abs(num).max(), 1e-8)
        assert np.abs(analytic - num).max() / scale <= tol, t.name


def test_conv_gradients():
    rng = np.random.default_rng(0)
    x = _leaf(rng.standard_normal((2, 2, 4, 4, 4)))
    w = _leaf(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3)
    b = _leaf(rng.standard_normal(3))
    r = rng.standard_normal((2, 3, 4, 4, 4))
    for d in (1, 2):
        check_grads(lambda: ad.sum_all(_mul_const(ad.conv3d(x, w, b, d), r)), [x, w, b])


def _mul_const(t, c):
    # weighted sum helper built from supported ops: select-free linear probe
    return ad._maybe_record("probe", (t,), t.data * c, lambda g: (g * c,))


def test_batchnorm_gradients_and_stats():
    rng = np.random.default_rng(1)
    x = _leaf(rng.standard_normal((2, 2, 4, 4, 4)) * 3 + 1)
    gamma = _leaf([1.3, 0.7])
    beta = _leaf([0.1, -0.2])
    r = rng.standard_normal((2, 2, 4, 4, 4))

    def build():
        st = ad.BatchNormState(np.zeros(2), np.ones(2))
        return ad.sum_all(_mul_const(ad.batchnorm(x, gamma, beta, st, "train"), r))

    check_grads(build, [x, gamma, beta])
    st = ad.BatchNormState(np.zeros(2), np.ones(2))
    y = ad.batchnorm(x, _leaf([1, 1]), _leaf([0, 0]), st, "train").data
    assert np.abs(y.mean(axis=(0, 2, 3, 4))).max() <= 1e-5
    assert np.abs(y.var(axis=(0, 2, 3, 4)) - 1).max() <= 1e-4
    assert np.allclose(st.running_mean, 0.1 * x.data.mean(axis=(0, 2, 3, 4)))


def test_batchnorm_standardised_input_passthrough():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((2, 1, 6, 6, 6))
    z = (z - z.mean()) / z.std()
    st = ad.BatchNormState(np.zeros(1), np.ones(1))
    y = ad.batchnorm(ad.Tensor(z), ad.Tensor(np.ones(1)), ad.Tensor(np.zeros(1)), st, "train").data
    assert np.abs(y - z).max() <= 1e-4


def test_batchnorm_eval_uses_running_stats():
    st = ad.BatchNormState(np.array([2.0]), np.array([4.0]))
    x = ad.Tensor(np.full((1, 1, 2, 2, 2), 6.0))
    y = ad.batchnorm(x, ad.Tensor(np.ones(1)), ad.Tensor(np.zeros(1)), st, "eval", eps=0.0).data
    assert np.allclose(y, 2.0)


def test_batchnorm_degenerate():
    st = ad.BatchNormState(np.zeros(1), np.ones(1))
    with pytest.raises(DegenerateBatch):
        ad.batchnorm(ad.Tensor(np.ones((1, 1, 1, 1, 1))), ad.Tensor(np.ones(1)), ad.Tensor(np.zeros(1)), st, "train")


def test_relu_dropout_add():
    assert np.array_equal(ad.relu(ad.Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])
    x = ad.Tensor(np.ones((3, 3)))
    assert ad.dropout(x, 0.5, "eval") is x
    assert ad.dropout(x, 0.0, "train") is x
    rng = np.random.default_rng(3)
    big = ad.Tensor(np.ones(10000))
    out = ad.dropout(big, 0.3, "train", rng).data
    se = np.sqrt(0.3 / 0.7) / np.sqrt(10000)
    assert abs(out.mean() - 1.0) <= 3 * se
    with pytest.raises(ShapeMismatch):
        ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0)


def test_relu_add_dropout_gradients():
    rng = np.random.default_rng(4)
    a = _leaf(rng.standard_normal((2, 3, 4)))
    b = _leaf(rng.standard_normal((2, 3, 4)))
    r = rng.standard_normal((2, 3, 4))
    check_grads(lambda: ad.sum_all(_mul_const(ad.relu(ad.add(a, b)), r)), [a, b])
    check_grads(lambda: ad.sum_all(_mul_const(ad.dropout(a, 0.4, "train", np.random.default_rng(9)), r)), [a])


def test_select_gradient():
    a = _leaf(np.arange(24.0).reshape(2, 3, 4))
    with ad.Tape():
        y = ad.select(a, (1, 2, 3))
        ad.backward(y)
    assert y.data == 23.0
    assert a.grad[1, 2, 3] == 1.0 and a.grad.sum() == 1.0


def test_non_scalar_loss():
    a = _leaf(np.ones(3))
    with ad.Tape():
        y = ad.relu(a)
        with pytest.raises(NonScalarLoss):
            ad.backward(y)


def test_unused_parameter_gets_no_gradient():
    a, unused = _leaf(np.ones(3)), _leaf(np.ones(3))
    with ad.Tape():
        ad.backward(ad.sum_all(ad.relu(a)))
    assert unused.grad is None
    assert np.array_equal(a.grad, np.ones(3))


def test_backward_deterministic():
    rng = np.random.default_rng(5)
    x = _leaf(rng.standard_normal((1, 2, 5, 5, 5)))
    w = _leaf(rng.standard_normal((2, 2, 3, 3, 3)))
    grads = []
    for _ in range(2):
        w.grad = None
        with ad.Tape():
            ad.backward(ad.sum_all(ad.relu(ad.conv3d(x, w, None, 2))))
        grads.append(w.grad.copy())
    assert grads[0].tobytes() == grads[1].tobytes()


def test_wrt_limits_leaf_accumulation():
    a, b = _leaf(np.ones(3)), _leaf(np.full(3, 2.0))
    with ad.Tape():
        ad.backward(ad.sum_all(ad.add(a, b)), wrt=[a])
    assert a.grad is not None and b.grad is None


def test_conv_preserves_spatial_shape():
    for d in (1, 2, 4):
        y = ad.conv3d(ad.Tensor(np.ones((1, 1, 5, 6, 7))), ad.Tensor(np.ones((2, 1, 3, 3, 3))), None, d)
        assert y.shape == (1, 2, 5, 6, 7)
    with pytest.raises(ShapeMismatch):
        ad.conv3d(ad.Tensor(np.ones((1, 5, 6, 7))), ad.Tensor(np.ones((2, 1, 3, 3, 3))))
