"""
Sequential layer graph of the toy models and its forward pass.

Nodes are frozen; a node's `inputs` names the node it reads from (the
previous node by default, the graph input as "input"), so the edge list is
explicit but always points backwards and the graph is acyclic by
construction. Conv and linear nodes may carry a `quant` object that replaces
their plain evaluation (a search mixture, a static quantized layer or a QAT
mixture); everything else runs unquantized.
"""
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from dqss.core.errors import DimensionError, ShapeMismatchError, UnknownLayerKindError
from dqss.tensor import ops
from dqss.tensor.tensor import Tensor

LAYER_KINDS = (
    "conv2d",
    "linear",
    "batchnorm",
    "relu",
    "avgpool",
    "maxpool",
    "flatten",
    "softmax_cross_entropy",
)
SEARCHABLE_KINDS = ("conv2d", "linear")
GRAPH_INPUT = "input"

# parameter tensors each kind must carry (bias is optional)
REQUIRED_PARAMS = {
    "conv2d": ("weight",),
    "linear": ("weight",),
    "batchnorm": ("gamma", "beta", "running_mean", "running_var"),
}


class LayerQuant(Protocol):
    def forward(self, x: Tensor) -> Tensor:
        ...


@dataclass(frozen=True)
class LayerNode:
    kind: str
    name: str
    hyper: Dict[str, Any] = field(default_factory=dict)
    params: Dict[str, Tensor] = field(default_factory=dict)
    inputs: Optional[str] = None
    quant: Optional[LayerQuant] = None

    @property
    def searchable(self) -> bool:
        return self.kind in SEARCHABLE_KINDS

    @property
    def weight(self) -> Tensor:
        return self.params["weight"]

    @property
    def bias(self) -> Optional[Tensor]:
        return self.params.get("bias")


def apply_layer(node: LayerNode, x: Tensor, weight: Optional[Tensor] = None) -> Tensor:
    """Plain evaluation of a conv/linear node, optionally with a substitute weight."""
    weight = node.weight if weight is None else weight
    if node.kind == "conv2d":
        return ops.conv2d(
            x, weight, node.bias,
            stride=int(node.hyper.get("stride", 1)),
            padding=int(node.hyper.get("padding", 0)),
        )
    if node.kind == "linear":
        return ops.linear(x, weight, node.bias)
    raise UnknownLayerKindError(f"layer {node.name!r} of kind {node.kind!r} has no weight to apply")


def _run_node(node: LayerNode, x: Tensor) -> Tensor:
    kind = node.kind
    if kind in SEARCHABLE_KINDS:
        if node.quant is not None:
            return node.quant.forward(x)
        return apply_layer(node, x)
    if kind == "batchnorm":
        p = node.params
        return ops.batch_norm_inference(
            x, p["gamma"], p["beta"], p["running_mean"], p["running_var"],
            eps=float(node.hyper.get("eps", 1e-5)),
        )
    if kind == "relu":
        return ops.relu(x)
    if kind == "avgpool":
        return ops.avg_pool2d(x, int(node.hyper["kernel"]), node.hyper.get("stride"))
    if kind == "maxpool":
        return ops.max_pool2d(x, int(node.hyper["kernel"]), node.hyper.get("stride"))
    if kind == "flatten":
        return ops.flatten(x)
    if kind == "softmax_cross_entropy":
        # head: logits pass through, the loss is taken by Graph.loss
        return x
    raise UnknownLayerKindError(f"unknown layer kind {kind!r} at node {node.name!r}")


def _out_shape(node: LayerNode, shape: Tuple[int, ...]) -> Tuple[int, ...]:
    kind = node.kind
    if kind == "conv2d":
        if len(shape) != 3:
            raise DimensionError(f"{node.name}: conv2d needs C x H x W input, got {shape}")
        o, c, kh, kw = node.weight.shape
        if c != shape[0]:
            raise DimensionError(f"{node.name}: input channels (axis 1) = {shape[0]} but weight in-channels = {c}")
        stride = int(node.hyper.get("stride", 1))
        pad = int(node.hyper.get("padding", 0))
        return (o, (shape[1] + 2 * pad - kh) // stride + 1, (shape[2] + 2 * pad - kw) // stride + 1)
    if kind == "linear":
        if len(shape) != 1 or shape[0] != node.weight.shape[1]:
            raise DimensionError(
                f"{node.name}: linear expects {node.weight.shape[1]} features (axis 1), got {shape}"
            )
        return (node.weight.shape[0],)
    if kind == "batchnorm":
        if shape[0] != node.params["gamma"].shape[0]:
            raise DimensionError(f"{node.name}: batchnorm channels (axis 1) {shape[0]} vs {node.params['gamma'].shape[0]}")
        return shape
    if kind in ("relu", "softmax_cross_entropy"):
        return shape
    if kind in ("avgpool", "maxpool"):
        k = int(node.hyper["kernel"])
        s = int(node.hyper.get("stride") or k)
        return (shape[0], (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    raise UnknownLayerKindError(f"unknown layer kind {kind!r} at node {node.name!r}")


class Graph:
    """Ordered layer nodes with a declared per-sample input shape."""

    def __init__(self, nodes: Sequence[LayerNode], input_shape: Sequence[int], num_classes: int):
        self.nodes: List[LayerNode] = list(nodes)
        self.input_shape: Tuple[int, ...] = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self._validate()

    def _validate(self) -> None:
        seen: Dict[str, Tuple[int, ...]] = {GRAPH_INPUT: self.input_shape}
        previous = GRAPH_INPUT
        for node in self.nodes:
            if node.kind not in LAYER_KINDS:
                raise UnknownLayerKindError(f"unknown layer kind {node.kind!r} at node {node.name!r}")
            if node.name in seen:
                raise DimensionError(f"duplicate layer name {node.name!r}")
            for required in REQUIRED_PARAMS.get(node.kind, ()):
                if required not in node.params:
                    raise DimensionError(f"{node.name}: missing parameter {required!r}")
            source = node.inputs or previous
            if source not in seen:
                raise DimensionError(f"{node.name}: input {source!r} is not an earlier node")
            seen[node.name] = _out_shape(node, seen[source])
            previous = node.name
        self.output_shape = seen[previous]

    def __iter__(self):
        return iter(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, name: str) -> LayerNode:
        for node in self.nodes:
            if node.name == name:
                return node
        raise KeyError(name)

    def searchable_layers(self) -> List[str]:
        return [n.name for n in self.nodes if n.searchable]

    def parameters(self) -> List[Tensor]:
        return [t for n in self.nodes for t in n.params.values()]

    def with_quant(self, quant: Mapping[str, Optional[LayerQuant]]) -> "Graph":
        nodes = [replace(n, quant=quant[n.name]) if n.name in quant else n for n in self.nodes]
        return Graph(nodes, self.input_shape, self.num_classes)

    def stripped(self) -> "Graph":
        """Same layers and parameters with every quantization removed."""
        return self.with_quant({n.name: None for n in self.nodes if n.quant is not None})

    def forward(self, x: Tensor, capture: Optional[Dict[str, List[np.ndarray]]] = None) -> Tensor:
        return forward(self, x, capture)

    def loss(self, logits: Tensor, labels: np.ndarray) -> Tensor:
        return ops.cross_entropy(logits, labels)


def forward(graph: Graph, x: Tensor, capture: Optional[Dict[str, List[np.ndarray]]] = None) -> Tensor:
    """Run the graph; `capture` collects the input of every searchable layer."""
    if tuple(x.shape[1:]) != graph.input_shape:
        raise ShapeMismatchError(
            f"graph expects per-sample input shape {graph.input_shape}, got {tuple(x.shape[1:])}"
        )
    values: Dict[str, Tensor] = {GRAPH_INPUT: x}
    current = GRAPH_INPUT
    for node in graph.nodes:
        inp = values[node.inputs or current]
        if capture is not None and node.searchable:
            capture.setdefault(node.name, []).append(inp.data.copy())
        values[node.name] = _run_node(node, inp)
        current = node.name
    return values[current]
