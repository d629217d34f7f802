"""
PTQ calibrators: each maps a tensor (plus layer context for EQ) to QuantParams.

- maxabs: threshold = max |x|
- kl:     threshold minimizing KL(P || Q) over histogram bin boundaries
- eq:     scale maximizing the mean cosine similarity of the layer outputs
- admm:   alternating least squares on || W - s Q ||^2 started from maxabs
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from dqss.core.errors import CalibrationConfigError, DegenerateCalibrationError, NonFiniteInputError
from dqss.schemas.quant_schema import (
    CalibratorKind,
    LayerQParams,
    QParamTable,
    QuantParams,
    TensorClass,
    qmax_for,
)
from dqss.services.quantizer import fake_quant_array
from dqss.tensor.graph import Graph, LayerNode, apply_layer
from dqss.tensor.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

KL_BINS = 2048
KL_EPS = 1e-9
EQ_GRID = 100
EQ_RANGE = (0.5, 1.2)
ADMM_ITERS = 50
ADMM_TOL = 1e-6

LayerFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _finite(x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        index = tuple(int(i) for i in np.argwhere(~np.isfinite(x))[0])
        raise NonFiniteInputError(f"calibration input has a non-finite value at index {index}")
    return x


def calibrate_maxabs(T: Union[Tensor, np.ndarray], bits: int) -> QuantParams:
    x = _finite(T.data if isinstance(T, Tensor) else np.asarray(T))
    t = float(np.abs(x).max()) if x.size else 0.0
    return QuantParams.from_threshold(t, bits)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @classmethod
    def of(cls, magnitudes: np.ndarray, bins: int) -> "Histogram":
        top = float(magnitudes.max()) if magnitudes.size else 0.0
        counts, edges = np.histogram(magnitudes, bins=bins, range=(0.0, top if top > 0 else 1.0))
        return cls(edges=edges, counts=counts.astype(np.int64))


def kl_divergence_at(counts: np.ndarray, i: int, levels: int) -> float:
    """KL(P || Q) when clipping after bin i; inf when bin i-1 is empty."""
    if counts[i - 1] == 0:
        return float("inf")
    p = counts[:i].astype(np.float64)
    p[i - 1] += counts[i:].sum()
    merged = i // levels
    starts = np.arange(levels) * merged
    totals = np.add.reduceat(p, starts)
    occupied = np.add.reduceat((p > 0).astype(np.float64), starts)
    group = np.minimum(np.arange(i) // merged, levels - 1)
    nonzero = p > 0
    q = np.zeros_like(p)
    q[nonzero] = totals[group[nonzero]] / occupied[group[nonzero]]
    p /= p.sum()
    q /= q.sum()
    q = np.where(nonzero & (q == 0), KL_EPS, q)
    return float(np.sum(p[nonzero] * np.log(p[nonzero] / q[nonzero])))


def calibrate_kl(samples: Union[np.ndarray, Iterable[np.ndarray]], bits: int, bins: int = KL_BINS) -> QuantParams:
    levels = qmax_for(bits)
    if bins < levels:
        raise CalibrationConfigError(f"KL needs at least {levels} histogram bins at {bits} bits, got {bins}")
    if isinstance(samples, np.ndarray):
        magnitudes = np.abs(_finite(samples)).ravel()
    else:
        magnitudes = np.concatenate([np.abs(_finite(np.asarray(s))).ravel() for s in samples] or [np.zeros(0)])
    if not magnitudes.size or magnitudes.max() == 0:
        return QuantParams.from_threshold(0.0, bits)

    hist = Histogram.of(magnitudes, bins)
    best_i, best_kl = 0, float("inf")
    for i in range(levels, bins + 1):
        kl = kl_divergence_at(hist.counts, i, levels)
        if kl < best_kl:
            best_i, best_kl = i, kl
    return QuantParams.from_threshold(float(hist.edges[best_i]), bits)


def eq_candidates(scales: Sequence[float], bits: int) -> List[QuantParams]:
    """The params EQ scores and returns, one per distinct float32 scale, ascending."""
    return sorted({QuantParams.from_scale(float(s), bits) for s in scales}, key=lambda p: p.scale)


def eq_grid(base_scale: float, bits: int, grid: int = EQ_GRID) -> List[QuantParams]:
    lo, hi = EQ_RANGE
    return eq_candidates(base_scale * np.linspace(lo, hi, grid), bits)


def mean_cosine(reference: np.ndarray, candidate: np.ndarray) -> float:
    """Mean per-sample cosine similarity, skipping zero-norm samples."""
    a = reference.reshape(reference.shape[0], -1).astype(np.float64)
    b = candidate.reshape(candidate.shape[0], -1).astype(np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    keep = (na > 0) & (nb > 0)
    if not keep.any():
        raise DegenerateCalibrationError("every calibration output has zero norm")
    return float(np.mean((a[keep] * b[keep]).sum(axis=1) / (na[keep] * nb[keep])))


def eq_score(weight: np.ndarray, activations: np.ndarray, layer_fn: LayerFn,
             target: TensorClass, p: QuantParams) -> float:
    reference = layer_fn(activations, weight)
    if target == TensorClass.ACT:
        candidate = layer_fn(fake_quant_array(activations, p), weight)
    else:
        candidate = layer_fn(activations, fake_quant_array(weight, p))
    return mean_cosine(reference, candidate)


def calibrate_eq(weight: np.ndarray, activations: np.ndarray, bits: int, target: TensorClass,
                 layer_fn: LayerFn, grid: int = EQ_GRID,
                 scales: Optional[Sequence[float]] = None) -> QuantParams:
    """Scale from the grid with the best mean output cosine; ties keep the smaller scale."""
    if activations.shape[0] == 0:
        raise DegenerateCalibrationError("EQ needs a non-empty calibration batch")
    tensor = activations if target == TensorClass.ACT else weight
    if scales is None:
        base = calibrate_maxabs(tensor, bits)
        if base.degenerate:
            return base
        candidates = eq_grid(base.scale, bits, grid)
    else:
        candidates = eq_candidates(scales, bits)

    reference = layer_fn(activations, weight)
    best, best_score = None, -np.inf
    for p in candidates:
        if target == TensorClass.ACT:
            out = layer_fn(fake_quant_array(activations, p), weight)
        else:
            out = layer_fn(activations, fake_quant_array(weight, p))
        score = mean_cosine(reference, out)
        if score > best_score:
            best, best_score = p, score
    return best


def _reconstruction_error(w: np.ndarray, s: float, n_max: int) -> Tuple[float, np.ndarray]:
    q = np.clip(np.rint(w / s), -n_max, n_max)
    r = w - s * q
    return float((r * r).sum()), q


def admm_trace(W: Union[Tensor, np.ndarray], bits: int, iters: int = ADMM_ITERS,
               tol: float = ADMM_TOL) -> Tuple[QuantParams, List[float]]:
    """Alternate Q = clamp(round(W/s)) and s = <W,Q>/<Q,Q>; returns params and the objective per iterate."""
    x = _finite(W.data if isinstance(W, Tensor) else np.asarray(W))
    init = calibrate_maxabs(x, bits)
    if init.degenerate:
        return init, [0.0]
    n_max = qmax_for(bits)
    w = x.astype(np.float64).ravel()
    s = float(init.scale)
    objective, q = _reconstruction_error(w, s, n_max)
    history = [objective]
    for _ in range(iters):
        qq = float((q * q).sum())
        if qq == 0:
            break
        s_new = float((w * q).sum()) / qq
        if not s_new > 0:
            break
        obj_new, q_new = _reconstruction_error(w, s_new, n_max)
        if obj_new > objective:
            # float noise only; keep the monotone iterate
            break
        history.append(obj_new)
        converged = abs(s_new - s) / s < tol
        s, objective, q = s_new, obj_new, q_new
        if converged:
            break

    params = QuantParams.from_scale(s, bits)
    # the float32 round-trip of s must not undo the descent
    ref = x.astype(np.float32)
    err = float(np.sum((ref - fake_quant_array(ref, params)).astype(np.float64) ** 2))
    err_init = float(np.sum((ref - fake_quant_array(ref, init)).astype(np.float64) ** 2))
    if err > err_init:
        params = init
    return params, history


def calibrate_admm(W: Union[Tensor, np.ndarray], bits: int, iters: int = ADMM_ITERS,
                   tol: float = ADMM_TOL) -> QuantParams:
    return admm_trace(W, bits, iters, tol)[0]


@dataclass
class CalibrationOptions:
    bits: int = 8
    kl_bins: int = KL_BINS
    eq_grid: int = EQ_GRID
    admm_iters: int = ADMM_ITERS
    admm_tol: float = ADMM_TOL


def layer_fn_for(node: LayerNode) -> LayerFn:
    def _fn(a: np.ndarray, w: np.ndarray) -> np.ndarray:
        with no_grad():
            return apply_layer(node, Tensor(a), Tensor(w)).data
    return _fn


def calibrate_tensor(kind: CalibratorKind, target: TensorClass, node: LayerNode,
                     activations: np.ndarray, options: CalibrationOptions) -> QuantParams:
    weight = node.weight.data
    tensor = activations if target == TensorClass.ACT else weight
    if kind == CalibratorKind.MAXABS:
        return calibrate_maxabs(tensor, options.bits)
    if kind == CalibratorKind.KL:
        return calibrate_kl(tensor, options.bits, options.kl_bins)
    if kind == CalibratorKind.EQ:
        return calibrate_eq(weight, activations, options.bits, target, layer_fn_for(node), options.eq_grid)
    if kind == CalibratorKind.ADMM:
        return calibrate_admm(tensor, options.bits, options.admm_iters, options.admm_tol)
    raise CalibrationConfigError(f"unknown calibrator {kind!r}")


def collect_activations(graph: Graph, inputs: np.ndarray, batch_size: int = 64) -> Dict[str, np.ndarray]:
    """FP32 inputs of every searchable layer over the whole calibration set."""
    capture: Dict[str, List[np.ndarray]] = {}
    plain = graph.stripped()
    with no_grad():
        for start in range(0, inputs.shape[0], batch_size):
            plain.forward(Tensor(inputs[start:start + batch_size]), capture=capture)
    return {name: np.concatenate(chunks) for name, chunks in capture.items()}


def calibrate_layer(node: LayerNode, activations: np.ndarray, pool: Sequence[CalibratorKind],
                    options: CalibrationOptions) -> LayerQParams:
    entry = LayerQParams()
    for kind in pool:
        entry.act[kind] = calibrate_tensor(kind, TensorClass.ACT, node, activations, options)
        entry.weight[kind] = calibrate_tensor(kind, TensorClass.WEIGHT, node, activations, options)
    logger.debug(f"calibrated {node.name}: " + ", ".join(
        f"{k.value} act_t={entry.act[k].threshold:.5g} w_t={entry.weight[k].threshold:.5g}" for k in pool
    ))
    return entry


def calibrate_graph(graph: Graph, inputs: np.ndarray, pool: Sequence[CalibratorKind],
                    options: Optional[CalibrationOptions] = None, threads: int = 1) -> QParamTable:
    """
    Calibrate every searchable layer with every strategy of the pool.

    Args:
        graph (Graph): FP32 model.
        inputs (np.ndarray): calibration inputs, N x per-sample shape.
        pool (Sequence[CalibratorKind]): strategies to calibrate.
        options (CalibrationOptions, optional): bit width and per-calibrator knobs.
        threads (int): layers calibrated concurrently.

    Raises:
        DegenerateCalibrationError: If the calibration set is empty.

    Returns:
        QParamTable: per layer, per tensor class, per strategy QuantParams.
    """
    options = options or CalibrationOptions()
    if inputs.shape[0] == 0:
        raise DegenerateCalibrationError("calibration set is empty")
    activations = collect_activations(graph, inputs)
    layers = [graph.node(name) for name in graph.searchable_layers()]
    logger.info(f"calibrating {len(layers)} layers x {len(pool)} strategies on {inputs.shape[0]} samples")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool_exec:
        entries = list(pool_exec.map(
            lambda node: calibrate_layer(node, activations[node.name], pool, options), layers
        ))
    return QParamTable(bits=options.bits, layers={node.name: e for node, e in zip(layers, entries)})
