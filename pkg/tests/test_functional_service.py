import math

import numpy as np
import pytest

from models.errors import DimensionError
from services import functional_service as F
from services.tensor_service import Tensor


def test_conv2d_stem_shape(rng):
    x = Tensor(rng.standard_normal((1, 3, 224, 224)).astype(np.float32))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    assert F.conv2d(x, w, stride=2, padding=1).shape == (1, 4, 112, 112)


def test_conv2d_odd_input_floor_division(rng):
    x = Tensor(rng.standard_normal((1, 8, 7, 7)))
    w = Tensor(rng.standard_normal((8, 8, 3, 3)))
    assert F.conv2d(x, w, stride=2, padding=1).shape[2:] == (4, 4)


def test_conv2d_output_size_sweep():
    sweep = np.random.default_rng(17)
    for _ in range(60):
        k = int(sweep.integers(1, 6))
        s = int(sweep.integers(1, 4))
        p = int(sweep.integers(0, 3))
        h, w = (int(v) for v in sweep.integers(1, 21, size=2))
        x = Tensor(sweep.standard_normal((1, 2, h, w)))
        kernel = Tensor(sweep.standard_normal((3, 2, k, k)))
        if h + 2 * p < k or w + 2 * p < k:
            with pytest.raises(DimensionError):
                F.conv2d(x, kernel, stride=s, padding=p)
            continue
        expected = ((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        assert F.conv2d(x, kernel, stride=s, padding=p).shape == (1, 3, *expected)


def test_conv2d_identity_kernel(rng):
    x = Tensor(rng.standard_normal((1, 1, 5, 5)))
    out = F.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_matches_direct_loop(rng):
    x = rng.standard_normal((2, 4, 6, 5))
    w = rng.standard_normal((6, 2, 3, 3))
    b = rng.standard_normal(6)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1, groups=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros_like(out)
    for n in range(2):
        for o in range(6):
            g = o // 3
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = xp[n, 2 * g:2 * g + 2, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    expected[n, o, i, j] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_conv2d_errors():
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_adaptive_pool_constant_and_identity(rng):
    ones = Tensor(np.ones((1, 1, 4, 4)))
    np.testing.assert_array_equal(F.adaptive_avgpool2d(ones, 2, 2).data, np.ones((1, 1, 2, 2)))
    x = Tensor(rng.standard_normal((1, 2, 5, 3)))
    np.testing.assert_allclose(F.adaptive_avgpool2d(x, 5, 3).data, x.data)


def test_adaptive_pool_bin_means(rng):
    x = rng.standard_normal((1, 1, 7, 7))
    out = F.adaptive_avgpool2d(Tensor(x), 4, 4).data
    for a in range(4):
        r0, r1 = (a * 7) // 4, math.ceil((a + 1) * 7 / 4)
        for b in range(4):
            c0, c1 = (b * 7) // 4, math.ceil((b + 1) * 7 / 4)
            assert out[0, 0, a, b] == pytest.approx(x[0, 0, r0:r1, c0:c1].mean(), abs=1e-12)


def test_adaptive_pool_rejects_growth():
    with pytest.raises(DimensionError):
        F.adaptive_avgpool2d(Tensor(np.zeros((1, 1, 3, 3))), 4, 3)


def test_linear_identity_and_shape(rng):
    x = Tensor(rng.standard_normal((2, 3)))
    np.testing.assert_allclose(F.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x.data)
    assert F.linear(x, Tensor(np.zeros((3, 4)))).shape == (2, 4)
    with pytest.raises(DimensionError):
        F.linear(x, Tensor(np.zeros((4, 4))))


def test_softmax_values():
    uniform = F.softmax(Tensor(np.full((1, 4), 2.5)), axis=-1).data
    np.testing.assert_allclose(uniform, np.full((1, 4), 0.25))
    out = F.softmax(Tensor(np.array([0.0, math.log(2.0)])), axis=-1).data
    np.testing.assert_allclose(out, [1 / 3, 2 / 3], atol=1e-12)


def test_softmax_shift_invariance(rng):
    x = rng.standard_normal((3, 5))
    a = F.softmax(Tensor(x), axis=-1).data
    b = F.softmax(Tensor(x + 123.0), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_layer_norm_cases():
    x = np.array([[1.0, -1.0, 1.0, -1.0]])
    out = F.layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    np.testing.assert_allclose(out, x, atol=1e-4)
    beta = np.array([0.5, -1.0, 2.0])
    out = F.layer_norm(Tensor(np.full((2, 3), 7.0)), Tensor(np.ones(3)), Tensor(beta)).data
    np.testing.assert_allclose(out, np.tile(beta, (2, 1)))


def test_activations():
    x = Tensor(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(F.relu(x).data, [0.0, 0.0, 2.0])
    assert F.sigmoid(x).data[1] == 0.5
    assert F.gelu(x).data[1] == 0.0
    assert F.gelu(x).data[2] == pytest.approx(2.0 * 0.5 * (1 + math.erf(2.0 / math.sqrt(2.0))))


def test_sigmoid_stays_finite_for_large_inputs():
    out = F.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 1.0])


def test_bilinear_constant_and_identity(rng):
    const = Tensor(np.full((1, 2, 3, 3), 0.7))
    np.testing.assert_allclose(F.bilinear_upsample(const, 2).data, np.full((1, 2, 6, 6), 0.7))
    x = Tensor(rng.standard_normal((1, 1, 3, 3)))
    assert F.bilinear_upsample(x, 1) is x


def test_bilinear_ramp_matches_kernel():
    x = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = F.bilinear_upsample(Tensor(x[None, None]), 2).data[0, 0]
    r = np.array([[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]])
    np.testing.assert_allclose(out, r @ x @ r.T, atol=1e-12)
    assert out[1, 1] == pytest.approx(0.75)


def test_batch_norm_updates_running_stats(rng):
    x = Tensor(rng.standard_normal((4, 2, 3, 3)) * 2 + 1)
    mean, var = np.zeros(2), np.ones(2)
    out = F.batch_norm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(mean, 0.1 * x.data.mean(axis=(0, 2, 3)))
