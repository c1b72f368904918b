import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ndsnn.errors import ConfigError, CountError, DimensionError
from ndsnn.tensor import bottom_k_abs, conv2d, conv2d_backward, conv2d_batch, matmul, top_k_abs


def naive_matmul(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def naive_conv(x, k, stride, pad):
    c, h, w = x.shape
    f, _, kk, _ = k.shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    xp[:, pad : pad + h, pad : pad + w] = x
    oh = (h + 2 * pad - kk) // stride + 1
    ow = (w + 2 * pad - kk) // stride + 1
    out = np.zeros((f, oh, ow))
    for o in range(f):
        for i in range(oh):
            for j in range(ow):
                for ci in range(c):
                    for a in range(kk):
                        for b in range(kk):
                            out[o, i, j] += k[o, ci, a, b] * xp[ci, i * stride + a, j * stride + b]
    return out


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(matmul([[1, 0], [0, 1]], [[3], [4]]), [[3], [4]])

    def test_hand_example(self):
        a, b = [[1, 2], [3, 4]], [[5], [6]]
        assert naive_matmul(a, b) == [[17], [39]]
        np.testing.assert_array_equal(matmul(a, b), [[17], [39]])

    def test_zero_annihilates(self):
        b = np.random.default_rng(0).normal(size=(3, 5))
        assert not matmul(np.zeros((2, 3)), b).any()

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_float32(self):
        assert matmul([[1.0]], [[2.0]]).dtype == np.float32


class TestConv2d:
    def test_scaling_kernel(self):
        out = conv2d(np.ones((1, 3, 3)), np.full((1, 1, 1, 1), 2.0))
        np.testing.assert_array_equal(out, np.full((1, 3, 3), 2.0))

    def test_hand_example(self):
        x = np.arange(1, 10, dtype=np.float32).reshape(1, 3, 3)
        k = np.ones((1, 1, 2, 2))
        expected = naive_conv(x, k, 1, 0)
        np.testing.assert_array_equal(expected, [[[12, 16], [24, 28]]])
        np.testing.assert_array_equal(conv2d(x, k), expected)

    def test_zero_kernel(self):
        x = np.random.default_rng(1).normal(size=(2, 5, 5))
        assert not conv2d(x, np.zeros((3, 2, 3, 3)), 1, 1).any()

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_matches_naive_loops(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(2, 7, 7)).astype(np.float32)
        k = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        if (7 + 2 * pad - 3) % stride:
            with pytest.raises(ConfigError):
                conv2d(x, k, stride, pad)
        else:
            np.testing.assert_allclose(conv2d(x, k, stride, pad), naive_conv(x, k, stride, pad), atol=1e-5)

    def test_inexact_output_size(self):
        with pytest.raises(ConfigError, match="not exact"):
            conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 3, 3)), stride=2)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ConfigError):
            conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        g = rng.normal(size=(2, 3, 3, 3))  # stride 2, pad 1 -> 3x3
        gx, gk = conv2d_backward(x, k, g, 2, 1)
        h = 1e-6
        for idx in [(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 4, 4)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd = ((conv2d_batch(xp, k, 2, 1) - conv2d_batch(xm, k, 2, 1)) * g).sum() / (2 * h)
            assert gx[idx] == pytest.approx(fd, rel=1e-6, abs=1e-8)
        for idx in [(0, 0, 0, 0), (2, 1, 1, 2)]:
            kp, km = k.copy(), k.copy()
            kp[idx] += h
            km[idx] -= h
            fd = ((conv2d_batch(x, kp, 2, 1) - conv2d_batch(x, km, 2, 1)) * g).sum() / (2 * h)
            assert gk[idx] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def brute_select(t, k, among, largest):
    cand = list(range(len(t))) if among is None else list(among)
    key = (lambda i: (-abs(t[i]), i)) if largest else (lambda i: (abs(t[i]), i))
    return sorted(sorted(cand, key=key)[:k])


class TestTopK:
    def test_largest_magnitude(self):
        assert brute_select([3, -5, 1], 1, None, True) == [1]
        assert top_k_abs(np.array([3, -5, 1.0]), 1).tolist() == [1]

    def test_tie_break_lowest_index(self):
        assert top_k_abs(np.array([2, 2, 2.0]), 2).tolist() == [0, 1]

    def test_k_zero(self):
        assert top_k_abs(np.array([1.0, 2.0]), 0).size == 0

    def test_k_too_large(self):
        with pytest.raises(CountError):
            top_k_abs(np.array([1.0, 2.0]), 2, among=[1])

    def test_among_restricts(self):
        assert top_k_abs(np.array([9.0, 1.0, 3.0, 2.0]), 2, among=[1, 2, 3]).tolist() == [2, 3]


class TestBottomK:
    def test_smallest_magnitude(self):
        assert brute_select([3, -0.1, 1], 1, None, False) == [1]
        assert bottom_k_abs(np.array([3, -0.1, 1.0]), 1).tolist() == [1]

    def test_full_set(self):
        among = [4, 0, 2]
        assert set(bottom_k_abs(np.arange(5.0), 3, among=among).tolist()) == set(among)

    def test_tie_break(self):
        assert bottom_k_abs(np.array([-1.0, 1.0]), 1).tolist() == [0]


small_floats = st.floats(-1, 1, allow_nan=False, width=32)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.integers(1, 30), elements=st.sampled_from([-2.0, -1.0, 0.0, 0.5, 1.0, 2.0, 3.0])), st.data())
def test_selection_matches_brute_force_and_partitions(t, data):
    among = sorted(data.draw(st.sets(st.integers(0, t.size - 1), min_size=0, max_size=t.size)))
    k = data.draw(st.integers(0, len(among)))
    top = top_k_abs(t, k, among)
    bottom = bottom_k_abs(t, len(among) - k, among)
    assert top.tolist() == brute_select(t.tolist(), k, among, True)
    assert bottom.tolist() == brute_select(t.tolist(), len(among) - k, among, False)
    # top and bottom of the complementary sizes partition the candidates only
    # when magnitudes are distinct; ties may place an index on both sides
    mags = np.abs(t[among])
    if np.unique(mags).size == mags.size:
        assert sorted(top.tolist() + bottom.tolist()) == among


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (3, 4), elements=small_floats), arrays(np.float32, (3, 4), elements=small_floats),
       arrays(np.float32, (4, 2), elements=small_floats))
def test_matmul_linearity(a, b, c):
    np.testing.assert_allclose(matmul(a + b, c), matmul(a, c) + matmul(b, c), atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (2, 4, 4), elements=small_floats), arrays(np.float32, (2, 4, 4), elements=small_floats),
       arrays(np.float32, (2, 2, 3, 3), elements=small_floats))
def test_conv_linearity(a, b, k):
    np.testing.assert_allclose(conv2d(a + b, k, 1, 1), conv2d(a, k, 1, 1) + conv2d(b, k, 1, 1), atol=1e-5)


def test_determinism():
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(2, 6, 6)), rng.normal(size=(4, 2, 3, 3))
    assert conv2d(x, k, 1, 1).tobytes() == conv2d(x, k, 1, 1).tobytes()
    t = rng.normal(size=50)
    assert top_k_abs(t, 10).tobytes() == top_k_abs(t, 10).tobytes()
