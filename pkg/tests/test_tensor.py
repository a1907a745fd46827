import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from cardioxnet import tensor as T
from cardioxnet.errors import NumericalError, ShapeError


# --------------------------------------------------------------------------
# conv1d

def test_conv1d_ones_kernel_moving_sum(backend):
    spec = T.conv_spec_1d(3, 1, "valid", 1, 1)
    y = T.conv1d(np.array([[1.0, 2, 3, 4, 5]]), spec, np.ones((1, 1, 3)), np.zeros(1))
    np.testing.assert_array_equal(y, [[6.0, 9.0, 12.0]])


def test_conv1d_is_cross_correlation(backend):
    spec = T.conv_spec_1d(2, 1, "valid", 1, 1)
    y = T.conv1d(np.array([[1.0, 2.0, 3.0]]), spec, np.array([[[1.0, 0.0]]]), np.zeros(1))
    np.testing.assert_array_equal(y, [[1.0, 2.0]])


def test_conv1d_stride_and_bias(backend):
    spec = T.conv_spec_1d(2, 2, "valid", 1, 1)
    y = T.conv1d(np.arange(6.0)[None], spec, np.array([[[1.0, 1.0]]]), np.array([0.5]))
    np.testing.assert_array_equal(y, [[1.5, 5.5, 9.5]])


def test_conv1d_same_padding_length_and_split(backend):
    spec = T.conv_spec_1d(4, 1, "same", 1, 1)
    x = np.arange(1.0, 6.0)[None]
    y = T.conv1d(x, spec, np.ones((1, 1, 4)), np.zeros(1))
    # total pad 3: one on the left, two on the right
    np.testing.assert_array_equal(y, [[6.0, 10.0, 14.0, 12.0, 9.0]])


def test_conv1d_same_stride_output_length(backend):
    spec = T.conv_spec_1d(2250, 1000, "same", 1, 2)
    w = np.zeros(spec.weight_shape)
    y = T.conv1d(np.zeros((1, 2250)), spec, w, np.zeros(2))
    assert y.shape == (2, 3)


def test_conv1d_batched_matches_unbatched(backend, rng):
    spec = T.conv_spec_1d(3, 2, "same", 2, 3)
    x = rng.standard_normal((4, 2, 11))
    w, b = rng.standard_normal(spec.weight_shape), rng.standard_normal(3)
    y = T.conv1d(x, spec, w, b)
    for i in range(4):
        np.testing.assert_array_equal(y[i], T.conv1d(x[i], spec, w, b))


def test_conv1d_rejects_kernel_longer_than_input(backend):
    spec = T.conv_spec_1d(5, 1, "valid", 1, 1)
    with pytest.raises(ShapeError):
        T.conv1d(np.zeros((1, 4)), spec, np.zeros((1, 1, 5)), np.zeros(1))


def test_conv1d_rejects_mismatched_weights(backend):
    spec = T.conv_spec_1d(3, 1, "valid", 2, 1)
    with pytest.raises(ShapeError):
        T.conv1d(np.zeros((2, 8)), spec, np.zeros((1, 1, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        T.conv1d(np.zeros((3, 8)), spec, np.zeros((1, 2, 3)), np.zeros(1))


def test_conv_spec_rejects_bad_geometry():
    with pytest.raises(ShapeError):
        T.conv_spec_1d(0, 1, "valid", 1, 1)
    with pytest.raises(ShapeError):
        T.conv_spec_1d(3, 0, "valid", 1, 1)
    with pytest.raises(ShapeError):
        T.conv_spec_1d(3, 1, "valid", 0, 1)


@pytest.mark.parametrize("seed", range(10))
def test_conv1d_matches_loop_oracle_bitwise(backend, seed):
    r = np.random.default_rng(seed)
    C, O, m = r.integers(1, 4), r.integers(1, 4), r.integers(1, 7)
    s = int(r.integers(1, 4))
    L = int(r.integers(m, m + 15))
    pad = ("valid", "same")[seed % 2]
    spec = T.conv_spec_1d(int(m), s, pad, int(C), int(O))
    x = r.standard_normal((2, C, L))
    w, b = r.standard_normal(spec.weight_shape), r.standard_normal(O)
    np.testing.assert_array_equal(T.conv1d(x, spec, w, b), oracles.conv1d_loop(x, w, b, s, pad))


def test_conv1d_linearity(backend, rng):
    spec = T.conv_spec_1d(5, 2, "same", 3, 4)
    w, zero = rng.standard_normal(spec.weight_shape), np.zeros(4)
    x, y = rng.standard_normal((2, 3, 40)), rng.standard_normal((2, 3, 40))
    a, b = 1.7, -0.3
    lhs = T.conv1d(a * x + b * y, spec, w, zero)
    rhs = a * T.conv1d(x, spec, w, zero) + b * T.conv1d(y, spec, w, zero)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_conv1d_shift_equivariance(backend, rng):
    spec = T.conv_spec_1d(4, 1, "valid", 1, 2)
    w, b = rng.standard_normal(spec.weight_shape), rng.standard_normal(2)
    x = rng.standard_normal((1, 30))
    y = T.conv1d(x, spec, w, b)
    y_shift = T.conv1d(x[:, 3:], spec, w, b)
    np.testing.assert_allclose(y_shift, y[:, 3:], rtol=0, atol=1e-14)


def test_conv1d_float32_path(backend, rng):
    spec = T.conv_spec_1d(3, 1, "same", 1, 2)
    x = rng.standard_normal((1, 16)).astype(np.float32)
    w, b = rng.standard_normal(spec.weight_shape), rng.standard_normal(2)
    y = T.conv1d(x, spec, w, b)
    assert y.dtype == np.float32
    np.testing.assert_allclose(y, T.conv1d(x.astype(np.float64), spec, w, b), atol=1e-5)


# --------------------------------------------------------------------------
# conv2d

def test_conv2d_identity_kernel(backend, rng):
    spec = T.conv_spec_2d(1, 1, "valid", 1, 1)
    x = rng.standard_normal((1, 5, 6))
    np.testing.assert_array_equal(T.conv2d(x, spec, np.ones((1, 1, 1, 1)), np.zeros(1)), x)


def test_conv2d_same_padding_shape(backend):
    spec = T.conv_spec_2d(3, 1, "same", 1, 8)
    y = T.conv2d(np.zeros((1, 45, 50)), spec, np.zeros(spec.weight_shape), np.zeros(8))
    assert y.shape == (8, 45, 50)


@pytest.mark.parametrize("seed", range(6))
def test_conv2d_matches_loop_oracle_bitwise(backend, seed):
    r = np.random.default_rng(100 + seed)
    C, O = int(r.integers(1, 3)), int(r.integers(1, 3))
    kh, kw = int(r.integers(1, 4)), int(r.integers(1, 4))
    sh, sw = int(r.integers(1, 3)), int(r.integers(1, 3))
    H, W = int(r.integers(kh, kh + 6)), int(r.integers(kw, kw + 6))
    pad = ("valid", "same")[seed % 2]
    spec = T.conv_spec_2d((kh, kw), (sh, sw), pad, C, O)
    x = r.standard_normal((2, C, H, W))
    w, b = r.standard_normal(spec.weight_shape), r.standard_normal(O)
    np.testing.assert_array_equal(T.conv2d(x, spec, w, b), oracles.conv2d_loop(x, w, b, (sh, sw), pad))


# --------------------------------------------------------------------------
# pooling

def test_maxpool_example(backend):
    np.testing.assert_array_equal(T.maxpool(np.array([1.0, 3, 2, 5, 4, 0]), 2), [3.0, 5.0, 4.0])


def test_maxpool_same_pads_with_neg_inf(backend):
    np.testing.assert_array_equal(T.maxpool(np.array([-1.0, -2.0, -3.0]), 2, padding="same"), [-1.0, -3.0])


def test_maxpool_tie_routes_gradient_to_first(backend):
    x = np.array([[[2.0, 2.0, 1.0, 1.0]]])
    y, idx = T.maxpool_with_indices(x, 2)
    dx = T.maxpool_backward(np.ones_like(y), idx, x.shape, 2)
    np.testing.assert_array_equal(dx, [[[1.0, 0.0, 1.0, 0.0]]])


def test_maxpool_window_larger_than_input_rejected(backend):
    with pytest.raises(ShapeError):
        T.maxpool(np.zeros(3), 4)


@pytest.mark.parametrize("seed", range(8))
def test_maxpool1d_matches_loop_oracle(backend, seed):
    r = np.random.default_rng(200 + seed)
    k, s = int(r.integers(1, 5)), int(r.integers(1, 4))
    L = int(r.integers(k, k + 12))
    pad = ("valid", "same")[seed % 2]
    x = r.standard_normal((2, 3, L))
    x[0, 0, :2] = 0.5  # a tie
    np.testing.assert_array_equal(T.maxpool(x, k, s, pad), oracles.maxpool1d_loop(x, k, s, pad))


@pytest.mark.parametrize("seed", range(6))
def test_maxpool2d_matches_loop_oracle(backend, seed):
    r = np.random.default_rng(300 + seed)
    kh, kw, sh, sw = (int(v) for v in r.integers(1, 4, size=4))
    H, W = int(r.integers(kh, kh + 7)), int(r.integers(kw, kw + 7))
    pad = ("valid", "same")[seed % 2]
    x = r.standard_normal((2, 2, H, W))
    np.testing.assert_array_equal(T.maxpool(x, (kh, kw), (sh, sw), pad),
                                  oracles.maxpool2d_loop(x, (kh, kw), (sh, sw), pad))


def test_global_max_and_backward(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    y, idx = T.global_max(x)
    np.testing.assert_array_equal(y, x.reshape(2, 3, -1).max(-1))
    dx = T.global_max_backward(np.ones_like(y), idx, x.shape)
    assert dx.sum() == 6 and np.all(dx[dx != 0] == 1)


# --------------------------------------------------------------------------
# affine

def test_affine_examples():
    np.testing.assert_array_equal(T.affine(np.array([1.0, 2.0]), np.eye(2), np.array([0.5, -0.5])), [1.5, 1.5])
    np.testing.assert_array_equal(T.affine(np.zeros(3), np.ones((2, 3)), np.array([1.0, 2.0])), [1.0, 2.0])


def test_affine_shape_mismatch():
    with pytest.raises(ShapeError):
        T.affine(np.zeros(3), np.zeros((2, 4)), np.zeros(2))


# --------------------------------------------------------------------------
# shape law

@settings(max_examples=300, deadline=None)
@given(d=st.integers(1, 64), data=st.data())
def test_valid_conv_length_law(d, data):
    m = data.draw(st.integers(1, d))
    s = data.draw(st.integers(1, 8))
    spec = T.conv_spec_1d(m, s, "valid", 1, 1)
    assert spec.output_shape((d,)) == ((d - m) // s + 1,)
    y = T.conv1d(np.zeros((1, d)), spec, np.zeros((1, 1, m)), np.zeros(1))
    assert y.shape == (1, (d - m) // s + 1)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 80), k=st.integers(1, 12), s=st.integers(1, 6))
def test_same_padding_law(n, k, s):
    n_out, left, right = T.pad_amounts(n, k, s, "same")
    assert n_out == -(-n // s)
    assert left + right == max((n_out - 1) * s + k - n, 0)
    assert right - left in (0, 1)


# --------------------------------------------------------------------------
# gradient checking

def _conv1d_op(spec):
    def op(x, w, b):
        y = T.conv1d(x, spec, w, b)
        return y, lambda dy: T.conv_backward(dy, x, spec, w)
    return op


def test_grad_check_passes_on_conv1d(backend, rng):
    spec = T.conv_spec_1d(3, 2, "same", 2, 3)
    report = T.grad_check(_conv1d_op(spec), {"x": rng.standard_normal((2, 2, 9)),
                                             "w": rng.standard_normal(spec.weight_shape),
                                             "b": rng.standard_normal(3)})
    assert report.passed and report.max_relative_error < 1e-7
    assert set(report.errors) == {"x", "w", "b"}


def test_grad_check_catches_doubled_gradient(rng):
    spec = T.conv_spec_1d(3, 1, "valid", 1, 2)

    def bad(x, w, b):
        y, back = _conv1d_op(spec)(x, w, b)
        return y, lambda dy: [2.0 * g for g in back(dy)]

    report = T.grad_check(bad, [rng.standard_normal((1, 8)), rng.standard_normal(spec.weight_shape),
                                rng.standard_normal(2)])
    assert not report.passed
    assert report.max_relative_error > 0.1


def test_grad_check_flags_non_finite_gradient(rng):
    def op(x):
        return x * 2.0, lambda dy: [np.full_like(dy, np.nan)]

    report = T.grad_check(op, {"x": rng.standard_normal(4)})
    assert not report.passed
    assert "x" in report.location


def test_grad_check_rejects_non_finite_inputs():
    with pytest.raises(NumericalError):
        T.grad_check(lambda x: (x, lambda dy: [dy]), [np.array([1.0, np.inf])])


def test_check_finite_reports_index():
    with pytest.raises(NumericalError, match=r"\(1, 0\)"):
        T.check_finite(np.array([[1.0], [np.nan]]), "probe")
