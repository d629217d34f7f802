import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from dqss.core.errors import (
    AssignmentError,
    DegenerateCalibrationError,
    MissingQParamsError,
    NonFiniteLossError,
)
from dqss.schemas.config_schema import SearchConfig
from dqss.schemas.quant_schema import (
    Assignment,
    CalibratorKind,
    LayerAssignment,
    QParamTable,
    QuantParams,
    TensorClass,
)
from dqss.services.mixture import MixtureLayer, ThetaState
from dqss.services.quantizer import fake_quant
from dqss.storage.calibration_store import CalibrationSet
from dqss.tensor import ops
from dqss.tensor.graph import Graph, LayerNode, apply_layer
from dqss.tensor.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

Snapshot = Dict[str, Tuple[np.ndarray, np.ndarray]]


@dataclass
class StaticQuantLayer:
    """Conv/linear layer with fixed fake-quantized input and weight."""

    layer: LayerNode
    act: QuantParams
    weight: QuantParams

    def forward(self, x: Tensor) -> Tensor:
        return apply_layer(self.layer, fake_quant(x, self.act), fake_quant(self.layer.weight, self.weight))


def _lookup(qparams: QParamTable, layer: str, tensor_class: TensorClass, kind: CalibratorKind) -> QuantParams:
    try:
        return qparams.get(layer, tensor_class, kind)
    except KeyError:
        raise MissingQParamsError(
            f"no {tensor_class.value} qparams for layer {layer!r} and strategy {kind.value!r}",
            {"layer": layer, "strategy": kind.value, "tensor_class": tensor_class.value},
        )


def build_search_model(graph: Graph, pool: Sequence[CalibratorKind],
                       qparams: QParamTable) -> Tuple[Graph, ThetaState]:
    """
    Wrap every conv/linear layer in a MixtureLayer over the strategy pool.

    Args:
        graph (Graph): FP32 model; any quantization already attached is dropped.
        pool (Sequence[CalibratorKind]): candidate strategies, in branch order.
        qparams (QParamTable): calibrated params for every layer x strategy x tensor class.

    Raises:
        MissingQParamsError: naming the first layer / strategy without params.

    Returns:
        Tuple[Graph, ThetaState]: the searchable graph and its importance parameters,
            all raw values initialized to 0.1.
    """
    base = graph.stripped()
    layers = base.searchable_layers()
    theta = ThetaState(pool, layers)
    mixtures = {}
    for name in layers:
        node = base.node(name)
        mixtures[name] = MixtureLayer(
            layer=node,
            act_params=[_lookup(qparams, name, TensorClass.ACT, k) for k in pool],
            weight_params=[_lookup(qparams, name, TensorClass.WEIGHT, k) for k in pool],
            alpha=theta.alpha[name],
            beta=theta.beta[name],
        )
    return base.with_quant(mixtures), theta


def set_naive(search_graph: Graph, naive: bool) -> None:
    for node in search_graph.nodes:
        if isinstance(node.quant, MixtureLayer):
            node.quant.naive = naive


@dataclass
class SearchTrace:
    """theta after every epoch; entry 0 is the state at start_epoch."""

    pool: List[CalibratorKind]
    start_epoch: int = 0
    snapshots: List[Snapshot] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)

    def rows(self) -> Iterator[Tuple[int, str, str, str, float]]:
        for epoch, snapshot in enumerate(self.snapshots, self.start_epoch):
            for layer, (theta_a, theta_b) in snapshot.items():
                for tensor_class, theta in ((TensorClass.ACT, theta_a), (TensorClass.WEIGHT, theta_b)):
                    for kind, value in zip(self.pool, theta):
                        yield epoch, layer, tensor_class.value, kind.value, float(value)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _forward_batches(graph: Graph, inputs: np.ndarray, batch_size: int, threads: int) -> List[np.ndarray]:
    """Logits of consecutive input batches, in batch order; one tape per worker."""
    def run(start: int) -> np.ndarray:
        with no_grad():
            return graph.forward(Tensor(inputs[start:start + batch_size])).data

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool_exec:
        return list(pool_exec.map(run, range(0, len(inputs), batch_size)))


def _reference_logits(graph: Graph, inputs: np.ndarray, batch_size: int = 256, threads: int = 1) -> np.ndarray:
    return np.concatenate(_forward_batches(graph.stripped(), inputs, batch_size, threads))


def search_loss(search_graph: Graph, x: np.ndarray, labels: np.ndarray, loss: str,
                targets: Optional[np.ndarray] = None) -> Tensor:
    logits = search_graph.forward(Tensor(x))
    if loss == "mse":
        return ops.mse(logits, targets)
    return ops.cross_entropy(logits, labels)


def _theta_diagnostics(theta: ThetaState) -> Dict[str, Dict[str, List[float]]]:
    return {
        name: {"act": [float(v) for v in a], "weight": [float(v) for v in b]}
        for name, (a, b) in theta.snapshot().items()
    }


def search(search_graph: Graph, theta: ThetaState, calib: CalibrationSet, cfg: SearchConfig,
           threads: int = 1) -> SearchTrace:
    """
    Optimize the raw importance parameters by plain SGD on the calibration set.

    Weights stay frozen; only alpha and beta receive updates. The learning rate
    is divided by cfg.lr_decay at the beginning of every milestone epoch.

    Args:
        search_graph (Graph): graph returned by build_search_model.
        theta (ThetaState): its importance parameters, updated in place.
        calib (CalibrationSet): labeled calibration samples.
        cfg (SearchConfig): lr, epochs, milestones, batch size, loss kind, seed.
        threads (int): workers for the FP32 reference logits of the mse loss.

    Raises:
        NonFiniteLossError: with epoch, batch and the current theta values.

    Returns:
        SearchTrace: theta snapshots (initialization + one per epoch) and mean epoch losses.
    """
    if len(calib) == 0:
        raise DegenerateCalibrationError("search needs a non-empty calibration set")
    # weights may be shared with the source graph; freeze only for the duration of the search
    frozen = [(t, t.requires_grad) for t in search_graph.parameters()]
    for t, _ in frozen:
        t.requires_grad = False
    try:
        return _run_search(search_graph, theta, calib, cfg, threads)
    finally:
        for t, flag in frozen:
            t.requires_grad = flag


def _run_search(search_graph: Graph, theta: ThetaState, calib: CalibrationSet, cfg: SearchConfig,
                threads: int) -> SearchTrace:
    params = theta.parameters()
    batch_size = cfg.batch_size or max(1, len(calib) // 8)
    targets = _reference_logits(search_graph, calib.inputs, threads=threads) if cfg.loss == "mse" else None
    rng = np.random.default_rng(cfg.seed)

    trace = SearchTrace(pool=list(theta.pool))
    trace.snapshots.append(theta.snapshot())
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        epoch_losses = []
        for batch_index, idx in enumerate(batches(len(calib), batch_size, rng)):
            for p in params:
                p.zero_grad()
            loss = search_loss(
                search_graph, calib.inputs[idx], calib.labels[idx], cfg.loss,
                None if targets is None else targets[idx],
            )
            value = loss.item()
            if not np.isfinite(value):
                diagnostics = {"epoch": epoch, "batch": batch_index, "theta": _theta_diagnostics(theta)}
                logger.error(f"non-finite search loss: {diagnostics}")
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}", diagnostics
                )
            loss.backward()
            for p in params:
                if p.grad is not None:
                    p.data -= p.data.dtype.type(lr) * p.grad
            epoch_losses.append(value * len(idx))
        mean_loss = float(np.sum(epoch_losses) / len(calib))
        trace.losses.append(mean_loss)
        trace.snapshots.append(theta.snapshot())
        logger.info(f"epoch={epoch} loss={mean_loss:.6f} theta_entropy={theta.mean_entropy():.6f} lr={lr:g}")
    return trace


def finalize(theta: ThetaState) -> Assignment:
    """Winner-take-all: per layer argmax of theta_a and theta_b, ties to the lowest pool index."""
    layers = {}
    for name, (theta_a, theta_b) in theta.snapshot().items():
        layers[name] = LayerAssignment(act=theta.pool[int(np.argmax(theta_a))],
                                       weight=theta.pool[int(np.argmax(theta_b))])
    return Assignment(layers=layers)


def apply_assignment(graph: Graph, assignment: Assignment, qparams: QParamTable) -> Graph:
    base = graph.stripped()
    static = {}
    for name in base.searchable_layers():
        if name not in assignment.layers:
            raise AssignmentError(f"assignment has no entry for layer {name!r}", {"layer": name})
        choice = assignment.layers[name]
        static[name] = StaticQuantLayer(
            layer=base.node(name),
            act=_lookup(qparams, name, TensorClass.ACT, choice.act),
            weight=_lookup(qparams, name, TensorClass.WEIGHT, choice.weight),
        )
    return base.with_quant(static)


def report_distribution(assignment: Assignment,
                        pool: Sequence[CalibratorKind]) -> Dict[TensorClass, Dict[CalibratorKind, int]]:
    counts = {tc: {kind: 0 for kind in pool} for tc in TensorClass}
    for choice in assignment.layers.values():
        counts[TensorClass.ACT][choice.act] = counts[TensorClass.ACT].get(choice.act, 0) + 1
        counts[TensorClass.WEIGHT][choice.weight] = counts[TensorClass.WEIGHT].get(choice.weight, 0) + 1
    return counts


def evaluate(graph: Graph, inputs: np.ndarray, labels: np.ndarray, batch_size: int = 256,
             threads: int = 1) -> Tuple[float, float]:
    """(top-1 accuracy in percent, mean cross-entropy) of a graph; batches may run on `threads` workers."""
    if len(inputs) == 0:
        return 0.0, 0.0
    correct, total_loss = 0, 0.0
    for start, logits in zip(range(0, len(inputs), batch_size), _forward_batches(graph, inputs, batch_size, threads)):
        y = labels[start:start + batch_size]
        correct += int((logits.argmax(axis=1) == y).sum())
        total_loss += ops.cross_entropy(Tensor(logits), y).item() * len(y)
    return 100.0 * correct / len(inputs), total_loss / len(inputs)
