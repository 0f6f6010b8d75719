import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmk3d.core import LandmarkSet
from lmk3d.errors import EmptyMask
from lmk3d.heatmap import (
    gen_gt_heatmap,
    loss_coord,
    loss_heatmap,
    loss_mixed,
    loss_mixed_backward,
    spatial_softmax,
)


def _lms(points, oob=()):
    return LandmarkSet(tuple(range(1, len(points) + 1)), points, oob)


def test_gt_heatmap_examples():
    H, mask = gen_gt_heatmap(_lms([[3.2, 4.0, 5.7], [6, 1, 2]]), (8, 8, 8), 1.5)
    assert np.allclose(H.reshape(2, -1).sum(axis=1), 1.0, atol=1e-6)
    assert np.unravel_index(np.argmax(H[0]), (8, 8, 8)) == (3, 4, 6)
    assert mask.all()
    H, _ = gen_gt_heatmap(_lms([[4, 4, 4]]), (9, 9, 9), 1.0)
    assert H[0, 5, 4, 4] / H[0, 4, 4, 4] == pytest.approx(np.exp(-0.5), abs=1e-6)


def test_gt_heatmap_oob_uniform():
    H, mask = gen_gt_heatmap(_lms([[1, 1, 1], [40, 0, 0]], (False, True)), (4, 4, 4))
    assert np.allclose(H[1], 1 / 64)
    assert list(mask) == [True, False]


def test_softmax_examples():
    phi, p = spatial_softmax(np.zeros((1, 4, 5, 6)))
    assert np.allclose(phi, 1 / 120)
    assert np.allclose(p, [[1.5, 2.0, 2.5]])
    h = np.zeros((1, 8, 8, 8))
    h[0, 3, 5, 7] = 1000.0
    assert np.allclose(spatial_softmax(h)[1], [[3, 5, 7]], atol=1e-3)
    h = np.random.default_rng(0).standard_normal((2, 5, 5, 5))
    a, pa = spatial_softmax(h)
    b, pb = spatial_softmax(h + 7.5)
    assert np.abs(a - b).max() <= 1e-9 and np.abs(pa - pb).max() <= 1e-9


def test_coord_loss_examples():
    assert loss_coord([[1, 2, 3]], [[1, 2, 3]]) == 0.0
    assert loss_coord([[1, 2, 2]], [[0, 0, 0]]) == 9.0
    assert loss_coord([[3, 0, 0], [1, 1, 1]], [[0, 0, 0], [1, 1, 1]]) == 4.5
    assert loss_coord([[3, 0, 0], [1, 1, 1]], [[0, 0, 0], [0, 0, 0]], [True, False]) == 9.0
    with pytest.raises(EmptyMask):
        loss_coord([[0, 0, 0]], [[1, 1, 1]], [False])


def test_heatmap_loss_examples():
    H = np.zeros((1, 2, 2, 2))
    H[0, 1, 0, 1] = 1.0
    phi = np.full((1, 2, 2, 2), 1 / 8)
    assert loss_heatmap(H, phi) == pytest.approx(np.log(8))
    u = np.full((1, 3, 4, 5), 1 / 60)
    assert loss_heatmap(u, u) == pytest.approx(np.log(60))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gibbs_inequality(seed):
    rng = np.random.default_rng(seed)
    H = rng.random((2, 3, 3, 3))
    H /= H.reshape(2, -1).sum(axis=1).reshape(2, 1, 1, 1)
    phi = spatial_softmax(rng.standard_normal((2, 3, 3, 3)))[0]
    assert loss_heatmap(H, phi) >= loss_heatmap(H, H) - 1e-9


def test_mixed_examples():
    rng = np.random.default_rng(1)
    h = rng.standard_normal((2, 4, 4, 4))
    H, _ = gen_gt_heatmap(_lms([[1, 1, 1], [2, 3, 1]]), (4, 4, 4))
    p = np.array([[1.0, 1.0, 1.0], [2.0, 3.0, 1.0]])
    v0 = loss_mixed(H, h, p, 0.0)
    v1 = loss_mixed(H, h, p, 1.0)
    assert v0.total == v0.coord and v1.total == v1.heatmap
    v = loss_mixed(H, h, p, 0.4)
    assert v.total == pytest.approx(0.4 * v.heatmap + 0.6 * v.coord, abs=1e-12)
    assert 0.4 * 2 + 0.6 * 5 == pytest.approx(3.8)
    with pytest.raises(ValueError):
        loss_mixed(H, h, p, 1.5)


def _fd_grad(H, h, p, alpha, mask=None, eps=1e-4):
    g = np.zeros_like(h)
    for idx in np.ndindex(h.shape):
        hp, hm = h.copy(), h.copy()
        hp[idx] += eps
        hm[idx] -= eps
        g[idx] = (loss_mixed(H, hp, p, alpha, mask).total - loss_mixed(H, hm, p, alpha, mask).total) / (2 * eps)
    return g


@pytest.mark.parametrize("alpha", [0.0, 0.4, 1.0])
def test_backward_matches_finite_differences(alpha):
    rng = np.random.default_rng(2)
    h = rng.standard_normal((2, 4, 4, 4))
    lms = _lms([[1.2, 2.5, 0.7], [2.9, 1.1, 2.2]])
    H, mask = gen_gt_heatmap(lms, (4, 4, 4), 1.0)
    g = loss_mixed_backward(H, h, lms.points, alpha, mask)
    fd = _fd_grad(H, h, lms.points, alpha, mask)
    assert np.abs(g - fd).max() / np.abs(fd).max() <= 1e-5


def test_backward_masked_channel_zero():
    rng = np.random.default_rng(3)
    h = rng.standard_normal((2, 3, 3, 3))
    lms = _lms([[1, 1, 1], [1, 2, 0]])
    H, _ = gen_gt_heatmap(lms, (3, 3, 3))
    g = loss_mixed_backward(H, h, lms.points, 0.4, [True, False])
    assert np.all(g[1] == 0)
    fd = _fd_grad(H, h, lms.points, 0.4, [True, False])
    assert np.abs(g - fd).max() <= 1e-7


def test_heatmap_term_gradient_sums_to_zero():
    rng = np.random.default_rng(4)
    h = rng.standard_normal((3, 4, 4, 4))
    H, _ = gen_gt_heatmap(_lms([[1, 1, 1], [2, 2, 2], [3, 0, 1]]), (4, 4, 4))
    g = loss_mixed_backward(H, h, np.zeros((3, 3)), 1.0)
    assert np.allclose(g.reshape(3, -1).sum(axis=1), 0.0, atol=1e-12)
    g0 = loss_mixed_backward(H, h, np.ones((3, 3)), 0.0)
    assert np.abs(g0.reshape(3, -1).sum(axis=1)).max() <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_softmax_properties(seed):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((3, 4, 5, 3)) * 5
    phi, p = spatial_softmax(h)
    assert np.allclose(phi.reshape(3, -1).sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p >= 0) and np.all(p <= np.array([3, 4, 2]) + 1e-12)
