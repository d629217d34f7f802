"""
Strategy search under quantization-aware training.

Every conv/linear layer keeps one universal weight tensor W. Each pool
strategy quantizes that same W (and the layer input) with its own trainable
quantizer; the branches are mixed with softmax(beta) (softmax(alpha) for the
input) and the layer runs once on the mixed tensors. One optimizer step is
one forward and one backward pass that updates W, the importance parameters
and the quantizer scalars together.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from dqss.core.errors import AssignmentError, DimensionError, NonFiniteLossError, TrainingDivergedError
from dqss.schemas.config_schema import QatConfig
from dqss.schemas.qat_schema import LayerQatState, QatCheckpoint, ThetaSnapshot
from dqss.schemas.quant_schema import Assignment, QatStrategyKind, TensorClass
from dqss.services.mixture import ThetaState, branch_buffers
from dqss.services.qat_quantizers import QatQuantizer, make_quantizer, qat_quantize
from dqss.services.search_service import SearchTrace, batches, finalize
from dqss.storage.calibration_store import CalibrationSet
from dqss.tensor import ops
from dqss.tensor.graph import Graph, LayerNode, apply_layer
from dqss.tensor.tensor import Tensor, count_op, no_grad

logger = logging.getLogger(__name__)


@dataclass
class PassCounter:
    steps: int = 0
    forwards: int = 0
    backwards: int = 0
    warmup_forwards: int = 0


def qat_branch_mixture(x: Tensor, theta: Tensor, quantizers: Sequence[QatQuantizer]) -> Tensor:
    """sum_k theta[k] * q_k(x); the backward recomputes each branch instead of storing it."""
    if theta.shape != (len(quantizers),):
        raise DimensionError(f"theta has shape {theta.shape} but there are {len(quantizers)} branches")
    count_op("qat_branch_mixture")
    for q in quantizers:
        q.project()
    data = x.data
    acc = np.zeros_like(data)
    for weight, q in zip(theta.data, quantizers):
        branch_buffers.acquire()
        acc += weight * q.quantize_array(data)
        branch_buffers.release()
    scalars = [p for q in quantizers for p in q.parameters()]

    def _backward(g):
        grad_theta = np.empty_like(theta.data)
        grad_x = np.zeros_like(data)
        scalar_grads = []
        for k, q in enumerate(quantizers):
            branch_buffers.acquire()
            grad_theta[k] = np.sum(g * q.quantize_array(data))
            branch_buffers.release()
            weighted = theta.data[k] * g
            grad_x += q.input_grad(data, weighted)
            scalar_grads.extend(q.param_grads(data, weighted))
        return (grad_x, grad_theta, *scalar_grads)

    return Tensor.from_op(acc, (x, theta, *scalars), _backward, name="qat_branch_mixture")


@dataclass
class SharedWeightMixture:
    """QAT layer whose weight branches all quantize the one universal weight tensor."""

    layer: LayerNode
    act_quantizers: List[QatQuantizer]
    weight_quantizers: List[QatQuantizer]
    alpha: Tensor
    beta: Tensor

    def forward(self, x: Tensor) -> Tensor:
        return shared_mixture_forward(self, x)

    def weight_storage(self) -> int:
        """Distinct weight-shaped arrays held by the layer and its quantizers."""
        shape = self.layer.weight.shape
        arrays = {id(self.layer.weight.data)}
        for q in self.act_quantizers + self.weight_quantizers:
            for value in vars(q).values():
                data = value.data if isinstance(value, Tensor) else value
                if isinstance(data, np.ndarray) and data.shape == shape:
                    arrays.add(id(data))
        return len(arrays)


def shared_mixture_forward(layer: SharedWeightMixture, A: Tensor, theta_a: Optional[Tensor] = None,
                           theta_b: Optional[Tensor] = None) -> Tensor:
    theta_a = ops.softmax(layer.alpha) if theta_a is None else theta_a
    theta_b = ops.softmax(layer.beta) if theta_b is None else theta_b
    a_hat = qat_branch_mixture(A, theta_a, layer.act_quantizers)
    w_hat = qat_branch_mixture(layer.layer.weight, theta_b, layer.weight_quantizers)
    return apply_layer(layer.layer, a_hat, w_hat)


@dataclass
class StaticQatLayer:
    """Finalized QAT layer: one activation and one weight quantizer."""

    layer: LayerNode
    act: QatQuantizer
    weight: QatQuantizer

    def forward(self, x: Tensor) -> Tensor:
        return apply_layer(self.layer, qat_quantize(x, self.act), qat_quantize(self.layer.weight, self.weight))


def _trainable_copy(graph: Graph) -> Graph:
    nodes = []
    for node in graph.stripped().nodes:
        params = {
            key: Tensor(t.data.copy(), requires_grad=node.searchable and key in ("weight", "bias"), name=t.name)
            for key, t in node.params.items()
        }
        nodes.append(replace(node, params=params))
    return Graph(nodes, graph.input_shape, graph.num_classes)


def _trace_fields(trace: Optional[SearchTrace]) -> Dict[str, object]:
    if trace is None:
        return {}
    history = [
        {name: ThetaSnapshot(act=[float(v) for v in a], weight=[float(v) for v in b])
         for name, (a, b) in snapshot.items()}
        for snapshot in trace.snapshots
    ]
    return {"history_start": trace.start_epoch, "history": history, "losses": list(trace.losses)}


def restore_trace(state: QatCheckpoint) -> SearchTrace:
    """The theta / loss trace recorded up to a checkpoint, ready to be extended."""
    trace = SearchTrace(pool=list(state.pool), start_epoch=state.history_start, losses=list(state.losses))
    for entry in state.history:
        trace.snapshots.append({name: (np.asarray(s.act), np.asarray(s.weight)) for name, s in entry.items()})
    return trace


@dataclass
class QatModel:
    graph: Graph
    pool: List[QatStrategyKind]
    bits: int
    theta: Optional[ThetaState] = None
    mixtures: Dict[str, SharedWeightMixture] = field(default_factory=dict)

    @property
    def quantized(self) -> bool:
        return self.theta is not None

    def weight_parameters(self) -> List[Tensor]:
        return [t for t in self.graph.parameters() if t.requires_grad]

    def quantizer_parameters(self) -> List[Tensor]:
        return [p for m in self.mixtures.values()
                for q in m.act_quantizers + m.weight_quantizers for p in q.parameters()]

    def hyper_parameters(self) -> List[Tensor]:
        theta = self.theta.parameters() if self.theta is not None else []
        return theta + self.quantizer_parameters()

    def project(self) -> None:
        for m in self.mixtures.values():
            for q in m.act_quantizers + m.weight_quantizers:
                q.project()

    def observe(self, capture: Dict[str, List[np.ndarray]], momentum: float) -> None:
        for name, mixture in self.mixtures.items():
            for chunk in capture.get(name, []):
                for q in mixture.act_quantizers:
                    q.observe(chunk, momentum)

    def checkpoint(self, epoch: int, counter: PassCounter, initial_loss: Optional[float],
                   trace: Optional[SearchTrace] = None) -> QatCheckpoint:
        layers = {}
        for name, m in self.mixtures.items():
            layers[name] = LayerQatState(
                alpha=[float(v) for v in m.alpha.data],
                beta=[float(v) for v in m.beta.data],
                act=[q.state() for q in m.act_quantizers],
                weight=[q.state() for q in m.weight_quantizers],
            )
        return QatCheckpoint(epoch=epoch, pool=self.pool, bits=self.bits, quantize=self.quantized,
                             initial_loss=initial_loss, steps=counter.steps, forwards=counter.forwards,
                             backwards=counter.backwards, layers=layers,
                             **_trace_fields(trace))

    def restore(self, state: QatCheckpoint) -> None:
        if list(state.pool) != list(self.pool) or set(state.layers) != set(self.mixtures):
            raise DimensionError("checkpoint pool or layers do not match the model")
        for name, m in self.mixtures.items():
            entry = state.layers[name]
            m.alpha.data[...] = np.asarray(entry.alpha)
            m.beta.data[...] = np.asarray(entry.beta)
            for q, s in zip(m.act_quantizers, entry.act):
                q.load_state(s)
            for q, s in zip(m.weight_quantizers, entry.weight):
                q.load_state(s)


def build_qat_model(graph: Graph, cfg: QatConfig) -> QatModel:
    """
    Copy the graph's parameters and wrap every conv/linear layer in a SharedWeightMixture.

    Weight quantizers are initialized from max |W|; activation quantizers wait
    for the warm-up. With cfg.quantize off the copy stays a plain FP32 model.
    """
    base = _trainable_copy(graph)
    pool = list(cfg.pool)
    if not cfg.quantize:
        return QatModel(graph=base, pool=pool, bits=cfg.bits)
    layers = base.searchable_layers()
    theta = ThetaState(pool, layers)
    mixtures = {}
    for name in layers:
        node = base.node(name)
        weight_quantizers = [make_quantizer(k, TensorClass.WEIGHT, cfg.bits, f"{name}.weight.{k.value}") for k in pool]
        peak = float(np.abs(node.weight.data).max()) if node.weight.size else 0.0
        for q in weight_quantizers:
            q.initialize(peak)
        mixtures[name] = SharedWeightMixture(
            layer=node,
            act_quantizers=[make_quantizer(k, TensorClass.ACT, cfg.bits, f"{name}.act.{k.value}") for k in pool],
            weight_quantizers=weight_quantizers,
            alpha=theta.alpha[name],
            beta=theta.beta[name],
        )
    return QatModel(graph=base.with_quant(mixtures), pool=pool, bits=cfg.bits, theta=theta, mixtures=mixtures)


@dataclass
class QatResult:
    model: QatModel
    trace: SearchTrace
    counter: PassCounter
    epoch: int
    initial_loss: Optional[float]


def warmup_epoch(model: QatModel, train: CalibrationSet, cfg: QatConfig, counter: PassCounter) -> None:
    """Forward-only pass of the FP32 layers feeding running max |x| into the activation quantizers."""
    plain = model.graph.stripped()
    with no_grad():
        for start in range(0, len(train), cfg.batch_size):
            capture: Dict[str, List[np.ndarray]] = {}
            plain.forward(Tensor(train.inputs[start:start + cfg.batch_size]), capture=capture)
            counter.warmup_forwards += 1
            model.observe(capture, cfg.ema_momentum)


def _sgd(params: Sequence[Tensor], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data -= p.data.dtype.type(lr) * p.grad


def qat_train(model: QatModel, train: CalibrationSet, cfg: QatConfig, start_epoch: int = 0,
              counter: Optional[PassCounter] = None, initial_loss: Optional[float] = None,
              trace: Optional[SearchTrace] = None) -> QatResult:
    """
    Warm-up, then joint SGD of weights, importance parameters and quantizer scalars.

    Epochs 1..cfg.warmup_epochs only observe activation ranges. Every later
    step is one forward and one backward pass followed by one update of all
    trainable tensors; learning rates are divided by cfg.lr_decay from each
    milestone epoch on. Batches are drawn from a generator seeded with
    (seed, epoch), so resuming at an epoch boundary reproduces an
    uninterrupted run.

    Args:
        model (QatModel): from build_qat_model, optionally restored from a checkpoint.
        train (CalibrationSet): labeled training samples.
        cfg (QatConfig): protocol and learning rates.
        start_epoch (int): number of epochs already completed.
        counter (PassCounter, optional): pass counts carried over from a checkpoint.
        initial_loss (float, optional): divergence reference carried over from a checkpoint.
        trace (SearchTrace, optional): theta / loss history carried over from a checkpoint;
            it must end with the state at start_epoch.

    Raises:
        TrainingDivergedError: loss above cfg.divergence_factor x the first step's loss;
            the error context holds the training state at the failing step.
        NonFiniteLossError: non-finite loss.

    Returns:
        QatResult: the trained model, per-epoch theta / loss trace and pass counters.
    """
    counter = counter or PassCounter()
    if trace is None:
        trace = SearchTrace(pool=list(model.pool), start_epoch=start_epoch)
        if model.theta is not None:
            trace.snapshots.append(model.theta.snapshot())
    weights = model.weight_parameters()
    hyper = model.hyper_parameters()
    epoch = start_epoch

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        if epoch <= cfg.warmup_epochs:
            warmup_epoch(model, train, cfg, counter)
            if model.theta is not None:
                trace.snapshots.append(model.theta.snapshot())
            logger.info(f"epoch={epoch} warmup=1 batches={counter.warmup_forwards}")
            continue

        scale = cfg.lr_scale_at(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        total = 0.0
        for batch_index, idx in enumerate(batches(len(train), cfg.batch_size, rng)):
            for p in weights + hyper:
                p.zero_grad()
            loss = ops.cross_entropy(model.graph.forward(Tensor(train.inputs[idx])), train.labels[idx])
            counter.forwards += 1
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite QAT loss at epoch {epoch}, batch {batch_index}",
                    {"epoch": epoch, "batch": batch_index,
                     "state": model.checkpoint(epoch - 1, counter, initial_loss, trace).model_dump(mode="json")},
                )
            if initial_loss is None:
                initial_loss = value
            elif initial_loss > 0 and value > cfg.divergence_factor * initial_loss:
                raise TrainingDivergedError(
                    f"QAT diverged at epoch {epoch}, batch {batch_index}: loss {value:g} "
                    f"> {cfg.divergence_factor:g} x initial {initial_loss:g}",
                    {"epoch": epoch, "batch": batch_index, "loss": value, "initial_loss": initial_loss,
                     "state": model.checkpoint(epoch - 1, counter, initial_loss, trace).model_dump(mode="json")},
                )
            loss.backward()
            counter.backwards += 1
            _sgd(weights, cfg.weight_lr * scale)
            _sgd(hyper, cfg.theta_lr * scale)
            model.project()
            counter.steps += 1
            total += value * len(idx)

        mean_loss = total / max(len(train), 1)
        trace.losses.append(mean_loss)
        entropy = 0.0
        if model.theta is not None:
            trace.snapshots.append(model.theta.snapshot())
            entropy = model.theta.mean_entropy()
        logger.info(f"epoch={epoch} loss={mean_loss:.6f} theta_entropy={entropy:.6f} lr={cfg.weight_lr * scale:g}")

    return QatResult(model=model, trace=trace, counter=counter, epoch=epoch, initial_loss=initial_loss)


def train_fp32(graph: Graph, train: CalibrationSet, cfg: QatConfig) -> QatResult:
    """The FP32 twin: same loop, schedule and batch order with quantization off."""
    return qat_train(build_qat_model(graph, cfg.model_copy(update={"quantize": False})), train, cfg)


def finalize_qat(model: QatModel) -> Assignment:
    if model.theta is None:
        raise DimensionError("an FP32 model has no strategies to finalize")
    return finalize(model.theta)


def freeze_qat_model(model: QatModel, assignment: Assignment) -> Graph:
    """Keep only the assigned quantizer per layer and tensor class."""
    static = {}
    for name, mixture in model.mixtures.items():
        choice = assignment.layers.get(name)
        if choice is None or choice.act not in model.pool or choice.weight not in model.pool:
            raise AssignmentError(f"assignment has no QAT strategy of the pool for layer {name!r}", {"layer": name})
        static[name] = StaticQatLayer(
            layer=mixture.layer,
            act=mixture.act_quantizers[model.pool.index(choice.act)],
            weight=mixture.weight_quantizers[model.pool.index(choice.weight)],
        )
    return model.graph.stripped().with_quant(static)
