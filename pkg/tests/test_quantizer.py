import numpy as np
import pytest

from dqss.core.errors import NonFiniteInputError, QuantRangeError
from dqss.schemas.quant_schema import QuantParams
from dqss.services.quantizer import dequantize, fake_quant, fake_quant_array, quantize, ste_backward, surrogate_rounding
from dqss.tensor import ops
from dqss.tensor.gradcheck import gradcheck
from dqss.tensor.tensor import Tensor, default_dtype


@pytest.fixture
def p8():
    return QuantParams.from_threshold(2.0, 8)


def test_quantize_known_values(p8):
    x = np.array([0.0, 0.5, 3.0, -3.0], dtype=np.float32)
    np.testing.assert_array_equal(quantize(x, p8), [0, 32, 127, -127])


def test_dequantize_known_values(p8):
    out = dequantize(np.array([0, 127, 32]), p8)
    assert out[0] == 0.0
    assert out[1] == pytest.approx(2.0, rel=1e-6)
    assert out[2] == pytest.approx(0.503937, rel=1e-5)


def test_dequantize_rejects_out_of_range(p8):
    with pytest.raises(QuantRangeError):
        dequantize(np.array([128]), p8)


def test_quantize_rejects_non_finite(p8):
    with pytest.raises(NonFiniteInputError, match=r"\(2,\)"):
        quantize(np.array([0.0, 1.0, np.nan], dtype=np.float32), p8)


def test_grid_points_are_fixed(p8):
    grid = (np.arange(-127, 128) * np.float32(p8.scale)).astype(np.float32)
    np.testing.assert_array_equal(fake_quant_array(grid, p8), grid)


def test_clamps_to_threshold(p8):
    out = fake_quant_array(np.array([5.0, -7.0], dtype=np.float32), p8)
    np.testing.assert_allclose(out, [2.0, -2.0], rtol=1e-6)


@pytest.mark.parametrize("bits", [4, 8])
def test_fake_quant_properties(bits):
    rng = np.random.default_rng(bits)
    p = QuantParams.from_threshold(1.5, bits)
    x = rng.uniform(-2.0, 2.0, 10_000).astype(np.float32)
    y = fake_quant_array(x, p)

    # idempotent, bitwise
    np.testing.assert_array_equal(fake_quant_array(y, p), y)
    # odd symmetry
    np.testing.assert_array_equal(fake_quant_array(-x, p), -y)
    # monotone
    order = np.argsort(x)
    assert np.all(np.diff(y[order]) >= 0)
    # half-step error inside the clip range
    inside = np.abs(x) <= np.float32(p.threshold)
    assert np.all(np.abs(x[inside] - y[inside]) <= np.float32(p.scale) / 2 * (1 + 1e-4))


def test_ste_masks(p8):
    g = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    np.testing.assert_array_equal(ste_backward(g, np.array([0.1, -1.9, 2.0], dtype=np.float32), p8), g)
    np.testing.assert_array_equal(ste_backward(g, np.array([2.5, -9.0, 2.1], dtype=np.float32), p8), 0 * g)
    np.testing.assert_array_equal(ste_backward(g, np.array([0.5, 3.0, -0.5], dtype=np.float32), p8), [1.0, 0.0, 3.0])


def test_ste_matches_clamp_finite_differences(p8):
    rng = np.random.default_rng(5)
    with default_dtype(np.float64):
        data = rng.uniform(-3.0, 3.0, 50)
        # stay away from the clip corners
        data[np.abs(np.abs(data) - 2.0) < 0.01] = 0.3
        x = Tensor(data, requires_grad=True)
        r = rng.standard_normal(50)
        with surrogate_rounding():
            errors = gradcheck(lambda: ops.sum(ops.mul(fake_quant(x, p8), r)), [x], h=1e-6)
    assert errors[0] < 1e-6


def test_fake_quant_keeps_dtype(p8):
    with default_dtype(np.float64):
        x = Tensor(np.array([0.25, -0.75]))
    assert fake_quant(x, p8).data.dtype == np.float64
