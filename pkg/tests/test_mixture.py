import numpy as np
import pytest

from dqss.core.errors import DimensionError
from dqss.schemas.quant_schema import CalibratorKind, LayerQParams, QParamTable, QuantParams
from dqss.services.mixture import (
    MixtureLayer,
    ThetaState,
    branch_mixture,
    mixture_forward_efficient,
    mixture_forward_naive,
    softmax_theta,
    track_buffers,
)
from dqss.services.quantizer import fake_quant, surrogate_rounding
from dqss.services.search_service import build_search_model
from dqss.services.toy_data import conv_node, linear_node
from dqss.tensor import ops
from dqss.tensor.gradcheck import gradcheck
from dqss.tensor.graph import Graph, LayerNode, apply_layer
from dqss.tensor.tensor import Tensor, default_dtype, op_counter


def _params(rng, n, bits=8):
    return [QuantParams.from_threshold(float(rng.uniform(0.5, 3.0)), bits) for _ in range(n)]


def _mixture(rng, n, conv=True):
    node = conv_node("c", rng, 3, 2) if conv else linear_node("f", rng, 3, 5)
    alpha = Tensor(rng.standard_normal(n), requires_grad=True)
    beta = Tensor(rng.standard_normal(n), requires_grad=True)
    return MixtureLayer(node, _params(rng, n), _params(rng, n), alpha, beta)


def _input(rng, conv=True, batch=2):
    shape = (batch, 2, 5, 5) if conv else (batch, 5)
    return Tensor((rng.standard_normal(shape) * 1.5).astype(np.float32))


def test_softmax_theta_known_values():
    np.testing.assert_allclose(softmax_theta([0.1] * 4), [0.25] * 4, atol=1e-7)
    np.testing.assert_allclose(softmax_theta([1.0, 0.0, 0.0, 0.0]), [0.47536, 0.17488, 0.17488, 0.17488], atol=1e-5)
    raw = np.array([0.25, -1.5, 3.0])
    np.testing.assert_array_equal(softmax_theta(raw), softmax_theta(raw + 8.0))
    assert softmax_theta(np.random.default_rng(0).standard_normal(7)).sum() == pytest.approx(1.0, abs=1e-6)


def test_softmax_theta_rejects_empty():
    with pytest.raises(DimensionError):
        softmax_theta([])


@pytest.mark.parametrize("seed", range(25))
def test_efficient_matches_naive(seed):
    rng = np.random.default_rng(seed)
    for conv in (True, False):
        for n in (1, 2, 4) if seed % 2 else (4,):
            layer = _mixture(rng, n, conv)
            x = _input(rng, conv, batch=int(rng.choice([1, 2, 4])))
            fast = mixture_forward_efficient(layer, x).data
            slow = mixture_forward_naive(layer, x).data
            assert np.abs(fast - slow).max() <= 1e-4 * max(np.abs(slow).max(), 1e-6)


def test_efficient_path_runs_one_convolution():
    rng = np.random.default_rng(1)
    layer = _mixture(rng, 4)
    x = _input(rng)
    with op_counter() as fast, track_buffers() as buffers:
        mixture_forward_efficient(layer, x)
    assert fast["conv2d"] == 1
    assert buffers.peak == 1
    with op_counter() as slow, track_buffers() as buffers:
        mixture_forward_naive(layer, x)
    assert slow["conv2d"] == 16
    assert buffers.peak == 8


def test_efficient_backward_keeps_one_branch_alive():
    rng = np.random.default_rng(2)
    layer = _mixture(rng, 4)
    with track_buffers() as buffers:
        ops.sum(mixture_forward_efficient(layer, _input(rng))).backward()
    assert buffers.peak == 1
    assert buffers.live == 0
    assert layer.alpha.grad.shape == (4,) and layer.beta.grad.shape == (4,)


def test_single_branch_is_static_layer():
    rng = np.random.default_rng(3)
    layer = _mixture(rng, 1)
    x = _input(rng)
    expected = apply_layer(layer.layer, fake_quant(x, layer.act_params[0]),
                           fake_quant(layer.layer.weight, layer.weight_params[0])).data
    np.testing.assert_allclose(mixture_forward_efficient(layer, x).data, expected, rtol=1e-5, atol=1e-6)


def test_identical_branches_collapse():
    rng = np.random.default_rng(4)
    p = _params(rng, 1)[0]
    q = _params(rng, 1)[0]
    node = conv_node("c", rng, 3, 2)
    layer = MixtureLayer(node, [p] * 4, [q] * 4, Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4)))
    x = _input(rng)
    expected = apply_layer(node, fake_quant(x, p), fake_quant(node.weight, q)).data
    np.testing.assert_allclose(mixture_forward_efficient(layer, x).data, expected, rtol=1e-5, atol=1e-5)


def test_one_hot_theta_selects_branch_pair():
    rng = np.random.default_rng(5)
    layer = _mixture(rng, 4)
    layer.alpha.data[...] = [-50, -50, 50, -50]
    layer.beta.data[...] = [50, -50, -50, -50]
    x = _input(rng)
    expected = apply_layer(layer.layer, fake_quant(x, layer.act_params[2]),
                           fake_quant(layer.layer.weight, layer.weight_params[0])).data
    np.testing.assert_allclose(mixture_forward_naive(layer, x).data, expected, rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(mixture_forward_efficient(layer, x).data, expected, rtol=1e-5, atol=1e-5)


def test_branch_mixture_theta_gradient():
    rng = np.random.default_rng(6)
    params = _params(rng, 3)
    x = Tensor(rng.standard_normal(20).astype(np.float32))
    theta = Tensor(np.array([0.2, 0.3, 0.5], dtype=np.float32), requires_grad=True)
    r = rng.standard_normal(20).astype(np.float32)
    ops.sum(ops.mul(branch_mixture(x, theta, params), r)).backward()
    expected = [np.sum(r * fake_quant(x, p).data) for p in params]
    np.testing.assert_allclose(theta.grad, expected, rtol=1e-5)


def test_branch_mixture_checks_branch_count():
    with pytest.raises(DimensionError):
        branch_mixture(Tensor(np.zeros(3)), Tensor(np.ones(2)), _params(np.random.default_rng(0), 3))


def test_mixture_layer_checks_pool_size():
    rng = np.random.default_rng(7)
    with pytest.raises(DimensionError):
        MixtureLayer(linear_node("f", rng, 2, 2), _params(rng, 3), _params(rng, 4), Tensor(np.zeros(4)),
                     Tensor(np.zeros(4)))


def _two_layer(rng):
    nodes = [
        linear_node("fc1", rng, 6, 4),
        LayerNode(kind="relu", name="relu"),
        linear_node("fc2", rng, 3, 6),
        LayerNode(kind="softmax_cross_entropy", name="head"),
    ]
    pool = list(CalibratorKind)
    table = QParamTable(bits=4, layers={
        name: LayerQParams(act=dict(zip(pool, _params(rng, 4, bits=4))), weight=dict(zip(pool, _params(rng, 4, bits=4))))
        for name in ("fc1", "fc2")
    })
    return Graph(nodes, (4,), 3), pool, table


@pytest.mark.parametrize("seed", range(10))
def test_importance_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        graph, pool, table = _two_layer(rng)
        search_graph, theta = build_search_model(graph, pool, table)
        for t in theta.parameters():
            t.data[...] = rng.standard_normal(4)
        x = rng.standard_normal((8, 4)) * 2.0
        labels = rng.integers(0, 3, size=8)
        with surrogate_rounding():
            errors = gradcheck(lambda: ops.cross_entropy(search_graph.forward(Tensor(x)), labels),
                               theta.parameters(), h=1e-6)
    assert max(errors) < 1e-3


def test_theta_state_counts_and_init():
    theta = ThetaState(list(CalibratorKind), ["a", "b", "c"])
    assert theta.parameter_count() == 2 * 3 * 4
    for a, b in theta.snapshot().values():
        np.testing.assert_allclose(a, 0.25, atol=1e-7)
        np.testing.assert_allclose(b, 0.25, atol=1e-7)
    assert theta.mean_entropy() == pytest.approx(np.log(4.0), rel=1e-6)
