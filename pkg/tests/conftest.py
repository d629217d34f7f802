import numpy as np
import pytest

from dqss.services.toy_data import outlier_images, toy_cnn, toy_mlp, two_moons
from dqss.tensor.graph import Graph, LayerNode
from dqss.tensor.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def cnn():
    return toy_cnn(seed=7)


@pytest.fixture
def mlp():
    return toy_mlp(seed=7)


@pytest.fixture
def images():
    return outlier_images(64, seed=3)


@pytest.fixture
def moons():
    return two_moons(128, seed=3)


@pytest.fixture
def single_linear(rng):
    """One linear layer, 4 -> 3, no bias."""
    node = LayerNode(kind="linear", name="fc",
                     params={"weight": Tensor(rng.standard_normal((3, 4)).astype(np.float32), name="fc.weight")})
    return Graph([node, LayerNode(kind="softmax_cross_entropy", name="head")], (4,), 3)
