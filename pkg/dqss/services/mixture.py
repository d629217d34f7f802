"""
Softmax-relaxed mixtures of quantized branches.

A mixture layer keeps, per searchable layer, raw activation importances
alpha[N] and raw weight importances beta[N]. Their softmax theta weights the
N fake-quantized copies of the layer input and of the layer weight. The
efficient path reduces the branches to A^ = sum_i theta_a[i] A_i and
W^ = sum_j theta_b[j] W_j before running one convolution; by bilinearity this
equals the N x N branch sum of the naive path, which stays available as the
oracle.

Branch tensors are materialized one at a time and folded into the running
sum; the backward recomputes them instead of keeping N copies alive.
"""
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from dqss.core.errors import DimensionError
from dqss.schemas.quant_schema import QuantParams, TensorClass
from dqss.services.quantizer import clip_mask, fake_quant, fake_quant_array
from dqss.tensor import ops
from dqss.tensor.graph import LayerNode, apply_layer
from dqss.tensor.tensor import Tensor, count_op

INIT_RAW = 0.1


class BufferStats:
    """Live / peak count of full-size branch tensors."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.live = 0
        self.peak = 0
        self.allocated = 0

    def acquire(self, count: int = 1) -> None:
        with self._lock:
            self.live += count
            self.allocated += count
            self.peak = max(self.peak, self.live)

    def release(self, count: int = 1) -> None:
        with self._lock:
            self.live -= count

    def reset(self) -> None:
        with self._lock:
            self.live = self.peak = self.allocated = 0


branch_buffers = BufferStats()


@contextmanager
def track_buffers() -> Iterator[BufferStats]:
    branch_buffers.reset()
    yield branch_buffers


def softmax_theta(raw: Sequence[float]) -> np.ndarray:
    """theta_i = exp(raw_i) / sum_k exp(raw_k), max-subtracted."""
    raw = np.asarray(raw)
    if raw.ndim != 1 or raw.size == 0:
        raise DimensionError(f"importance parameters must be a non-empty vector, got shape {raw.shape}")
    e = np.exp(raw - raw.max())
    return e / e.sum()


def branch_mixture(x: Tensor, theta: Tensor, params: Sequence[QuantParams]) -> Tensor:
    """sum_i theta[i] * fake_quant(x, params[i]) with STE through every branch."""
    if theta.shape != (len(params),):
        raise DimensionError(f"theta has shape {theta.shape} but there are {len(params)} branches")
    count_op("branch_mixture")
    data = x.data
    acc = np.zeros_like(data)
    for weight, p in zip(theta.data, params):
        branch_buffers.acquire()
        branch = fake_quant_array(data, p)
        acc += weight * branch
        del branch
        branch_buffers.release()

    def _backward(g):
        grad_theta = np.empty_like(theta.data)
        grad_x = np.zeros_like(data) if x.requires_grad else None
        for k, p in enumerate(params):
            branch_buffers.acquire()
            branch = fake_quant_array(data, p)
            grad_theta[k] = np.sum(g * branch)
            del branch
            branch_buffers.release()
            if grad_x is not None:
                grad_x += theta.data[k] * np.where(clip_mask(data, p), g, 0)
        return grad_x, grad_theta

    return Tensor.from_op(acc, (x, theta), _backward, name="branch_mixture")


class ThetaState:
    """Raw importance parameters alpha (activations) and beta (weights) per searchable layer."""

    def __init__(self, pool: Sequence, layers: Sequence[str], init: float = INIT_RAW):
        self.pool = list(pool)
        n = len(self.pool)
        self.alpha: Dict[str, Tensor] = OrderedDict(
            (name, Tensor(np.full(n, init), requires_grad=True, name=f"{name}.alpha")) for name in layers
        )
        self.beta: Dict[str, Tensor] = OrderedDict(
            (name, Tensor(np.full(n, init), requires_grad=True, name=f"{name}.beta")) for name in layers
        )

    @property
    def layers(self) -> List[str]:
        return list(self.alpha)

    def raw(self, layer: str, tensor_class: TensorClass) -> Tensor:
        return self.alpha[layer] if tensor_class == TensorClass.ACT else self.beta[layer]

    def theta(self, layer: str) -> Tuple[np.ndarray, np.ndarray]:
        return softmax_theta(self.alpha[layer].data), softmax_theta(self.beta[layer].data)

    def parameters(self) -> List[Tensor]:
        return [t for name in self.alpha for t in (self.alpha[name], self.beta[name])]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def snapshot(self) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        return {name: self.theta(name) for name in self.alpha}

    def set_raw(self, layer: str, tensor_class: TensorClass, values: Sequence[float]) -> None:
        self.raw(layer, tensor_class).data[...] = np.asarray(values)

    def mean_entropy(self) -> float:
        values = []
        for a, b in self.snapshot().values():
            for theta in (a, b):
                values.append(float(-(theta * np.log(np.maximum(theta, 1e-30))).sum()))
        return float(np.mean(values)) if values else 0.0


@dataclass
class MixtureLayer:
    """A conv/linear layer evaluated as a mixture of quantized branches."""

    layer: LayerNode
    act_params: List[QuantParams]
    weight_params: List[QuantParams]
    alpha: Tensor
    beta: Tensor
    naive: bool = False

    def __post_init__(self) -> None:
        n = self.alpha.shape[0]
        if len(self.act_params) != n or len(self.weight_params) != n or self.beta.shape[0] != n:
            raise DimensionError(
                f"{self.layer.name}: {len(self.act_params)} act / {len(self.weight_params)} weight "
                f"branches for a pool of {n}"
            )

    def forward(self, x: Tensor) -> Tensor:
        if self.naive:
            return mixture_forward_naive(self, x)
        return mixture_forward_efficient(self, x)


def mixture_forward_efficient(layer: MixtureLayer, A: Tensor) -> Tensor:
    theta_a = ops.softmax(layer.alpha)
    theta_b = ops.softmax(layer.beta)
    a_hat = branch_mixture(A, theta_a, layer.act_params)
    w_hat = branch_mixture(layer.layer.weight, theta_b, layer.weight_params)
    return apply_layer(layer.layer, a_hat, w_hat)


def mixture_forward_naive(layer: MixtureLayer, A: Tensor) -> Tensor:
    """sum_i theta_a[i] sum_j theta_b[j] layer(W_j, A_i): N^2 layer evaluations."""
    theta_a = ops.softmax(layer.alpha)
    theta_b = ops.softmax(layer.beta)
    acts = []
    for p in layer.act_params:
        branch_buffers.acquire()
        acts.append(fake_quant(A, p))
    weights = []
    for p in layer.weight_params:
        branch_buffers.acquire()
        weights.append(fake_quant(layer.layer.weight, p))
    out: Optional[Tensor] = None
    for i, a_i in enumerate(acts):
        for j, w_j in enumerate(weights):
            coeff = ops.mul(ops.select(theta_a, i), ops.select(theta_b, j))
            term = ops.mul(apply_layer(layer.layer, a_i, w_j), coeff)
            out = term if out is None else ops.add(out, term)
    branch_buffers.release(len(acts) + len(weights))
    return out
