import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from pydantic import ValidationError

from dqss.core.config import get_settings
from dqss.core.errors import AssignmentError, ConfigError, QuantRangeError, TrainingDivergedError
from dqss.schemas.config_schema import PipelineConfig, QatConfig
from dqss.schemas.quant_schema import Assignment, QParamTable, Strategy, TensorClass
from dqss.services.calibrators import CalibrationOptions, calibrate_graph
from dqss.services.qat_service import (
    PassCounter,
    QatModel,
    QatResult,
    build_qat_model,
    finalize_qat,
    freeze_qat_model,
    qat_train,
    restore_trace,
    train_fp32,
)
from dqss.services.search_service import (
    apply_assignment,
    build_search_model,
    evaluate,
    finalize,
    report_distribution,
    search,
)
from dqss.services.toy_data import class_templates, outlier_images, toy_cnn, toy_mlp, two_moons
from dqss.storage.artifact_store import (
    MetricRow,
    load_assignment,
    load_qat_state,
    load_qparams,
    read_metrics,
    save_assignment,
    save_qat_state,
    save_qparams,
    write_distribution,
    write_metrics,
    write_theta_trace,
)
from dqss.storage.calibration_store import load_calibration, save_calibration
from dqss.storage.codec import PathLike, write_json
from dqss.storage.model_store import MANIFEST_NAME, load_model, save_model
from dqss.tensor.graph import Graph

logger = logging.getLogger(__name__)

QPARAMS_FILE = "qparams.json"
ASSIGNMENT_FILE = "assignment.json"
TRACE_FILE = "theta_trace.csv"
DISTRIBUTION_FILE = "distribution.csv"
METRICS_FILE = "metrics.csv"
QAT_DIR = "qat"
QAT_STATE_FILE = "qat_state.json"
DIVERGED_STATE_FILE = "diverged_state.json"

Distribution = Dict[TensorClass, Dict[Strategy, int]]


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        elif value is not None:
            merged[key] = value
    return merged


def load_config(path: Optional[PathLike] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    Build the pipeline configuration.

    Precedence, highest first: `overrides` (CLI flags, None meaning unset),
    keys of the YAML file at `path`, DQSS_* environment settings, defaults.

    Raises:
        ConfigError: unreadable YAML or a value outside its allowed range,
            with the offending field named.
    """
    settings = get_settings()
    values: Dict[str, Any] = {"seed": settings.seed, "threads": settings.threads}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping of keys to values")
        values = _merge(values, loaded)
    values = _merge(values, overrides or {})
    try:
        return PipelineConfig.model_validate(values)
    except ValidationError as exc:
        fields = "; ".join(".".join(str(p) for p in e["loc"]) + f": {e['msg']}" for e in exc.errors())
        raise ConfigError(f"invalid configuration: {fields}")


def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required for this command")
    return value


def _out(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_inputs(cfg: PipelineConfig, data: Optional[str] = None, limit: Optional[int] = None):
    graph = load_model(_require(cfg.model, "--model"))
    calib = load_calibration(
        _require(data or cfg.data, "--data"),
        cfg.calib_limit if limit is None else limit,
        graph.input_shape,
        graph.num_classes,
    )
    return graph, calib


def _qparams(cfg: PipelineConfig) -> QParamTable:
    path = cfg.qparams or Path(cfg.out) / QPARAMS_FILE
    table = load_qparams(path)
    # a bit width given explicitly must match the one the table was calibrated at
    if "bits" in cfg.model_fields_set and table.bits != cfg.bits:
        raise QuantRangeError(f"{path} was calibrated at {table.bits} bits, not {cfg.bits}",
                              {"calibrated": table.bits, "requested": cfg.bits})
    return table


def run_calibrate(cfg: PipelineConfig) -> Path:
    """Calibrate every searchable layer with every pool strategy and write qparams.json."""
    graph, calib = _load_inputs(cfg)
    options = CalibrationOptions(bits=cfg.bits, kl_bins=cfg.kl_bins, eq_grid=cfg.eq_grid,
                                 admm_iters=cfg.admm_iters, admm_tol=cfg.admm_tol)
    table = calibrate_graph(graph, calib.inputs, cfg.pool, options, threads=cfg.threads)
    path = save_qparams(table, _out(cfg) / QPARAMS_FILE)
    logger.info(f"wrote {path}")
    return path


@dataclass
class SearchOutputs:
    assignment: Assignment
    distribution: Distribution
    losses: List[float]
    paths: Dict[str, Path] = field(default_factory=dict)


def run_search(cfg: PipelineConfig) -> SearchOutputs:
    """Search importance parameters on the calibration set, finalize, and write the artifacts."""
    graph, calib = _load_inputs(cfg)
    search_graph, theta = build_search_model(graph, cfg.pool, _qparams(cfg))
    trace = search(search_graph, theta, calib, cfg.search, threads=cfg.threads)
    assignment = finalize(theta)
    distribution = report_distribution(assignment, cfg.pool)
    out = _out(cfg)
    paths = {
        "assignment": save_assignment(assignment, out / ASSIGNMENT_FILE),
        "trace": write_theta_trace(trace.rows(), out / TRACE_FILE),
        "distribution": write_distribution(distribution, out / DISTRIBUTION_FILE),
    }
    return SearchOutputs(assignment=assignment, distribution=distribution, losses=trace.losses, paths=paths)


def _assignment_for_eval(cfg: PipelineConfig, graph: Graph) -> Assignment:
    if cfg.assignment:
        return load_assignment(cfg.assignment, pool=cfg.pool, layers=graph.searchable_layers())
    default = Path(cfg.out) / ASSIGNMENT_FILE
    if not default.is_file():
        raise AssignmentError(f"no assignment: run search first or pass --assignment (looked for {default})")
    return load_assignment(default, pool=cfg.pool, layers=graph.searchable_layers())


def run_eval(cfg: PipelineConfig) -> List[MetricRow]:
    """
    Evaluate FP32, every uniform strategy, the DQSS assignment and, with
    uniform_theta, the unsearched DQSS-None mixture; write metrics.csv.

    Raises:
        AssignmentError: no assignment available, or one that does not cover the model.
        MissingQParamsError: qparams do not cover the pool.
        QuantRangeError: an explicit bit width differs from the qparams one.
    """
    graph, data = _load_inputs(cfg, data=cfg.eval_data, limit=sys.maxsize)
    qparams = _qparams(cfg)
    layers = graph.searchable_layers()
    assignment = _assignment_for_eval(cfg, graph)

    def score(variant: str, model: Graph) -> MetricRow:
        return MetricRow(variant, *evaluate(model, data.inputs, data.labels, threads=cfg.threads))

    rows = [score("fp32", graph)]
    for kind in cfg.pool:
        rows.append(score(f"uniform:{kind.value}", apply_assignment(graph, Assignment.uniform(layers, kind), qparams)))
    rows.append(score("dqss", apply_assignment(graph, assignment, qparams)))
    if cfg.uniform_theta:
        rows.append(score("dqss-none", build_search_model(graph, cfg.pool, qparams)[0]))
    write_metrics(rows, _out(cfg) / METRICS_FILE)
    for row in rows:
        logger.info(f"variant={row.variant} accuracy={row.accuracy:.3f} loss={row.loss:.6f}")
    return rows


@dataclass
class Report:
    distribution: Distribution
    metrics: List[MetricRow]


def run_report(cfg: PipelineConfig) -> Report:
    """Strategy distribution of the current assignment plus any metrics already written."""
    path = Path(cfg.assignment or Path(cfg.out) / ASSIGNMENT_FILE)
    if not path.is_file():
        raise AssignmentError(f"no assignment to report on: {path}")
    assignment = load_assignment(path, pool=cfg.pool)
    distribution = report_distribution(assignment, cfg.pool)
    write_distribution(distribution, _out(cfg) / DISTRIBUTION_FILE)
    metrics_path = Path(cfg.out) / METRICS_FILE
    metrics = read_metrics(metrics_path) if metrics_path.is_file() else []
    return Report(distribution=distribution, metrics=metrics)


def save_checkpoint(model: QatModel, result: QatResult, directory: PathLike) -> Path:
    directory = Path(directory)
    save_model(model.graph.stripped(), directory)
    return save_qat_state(model.checkpoint(result.epoch, result.counter, result.initial_loss, result.trace),
                          directory / QAT_STATE_FILE)


def run_qat_train(cfg: PipelineConfig, resume: Optional[PathLike] = None) -> QatResult:
    """
    Train the shared-weight QAT mixture and write a checkpoint, trace, assignment and metrics.

    `resume` names a checkpoint directory; training continues from its epoch.
    On divergence the training state is written to qat/diverged_state.json
    before the error propagates.
    """
    qat_cfg: QatConfig = cfg.qat
    out = _out(cfg) / QAT_DIR
    if resume is not None:
        graph = load_model(Path(resume) / MANIFEST_NAME)
        state = load_qat_state(Path(resume) / QAT_STATE_FILE)
        train = load_calibration(_require(cfg.data, "--data"), sys.maxsize, graph.input_shape, graph.num_classes)
        model = build_qat_model(graph, qat_cfg)
        model.restore(state)
        start, counter = state.epoch, PassCounter(steps=state.steps, forwards=state.forwards,
                                                  backwards=state.backwards)
        initial_loss = state.initial_loss
        trace = restore_trace(state) if state.history or not model.quantized else None
        logger.info(f"resuming QAT from {resume} at epoch {start}")
    else:
        graph, train = _load_inputs(cfg, limit=sys.maxsize)
        model = build_qat_model(graph, qat_cfg)
        start, counter, initial_loss, trace = 0, None, None, None

    try:
        result = qat_train(model, train, qat_cfg, start_epoch=start, counter=counter, initial_loss=initial_loss,
                           trace=trace)
    except TrainingDivergedError as exc:
        dump = write_json(out / DIVERGED_STATE_FILE, exc.context.get("state", {}))
        logger.error(f"training state written to {dump}")
        raise

    save_checkpoint(model, result, out)
    write_theta_trace(result.trace.rows(), out / TRACE_FILE)
    rows = [MetricRow("qat-mixture", *evaluate(model.graph, train.inputs, train.labels))]
    if model.quantized:
        assignment = finalize_qat(model)
        save_assignment(assignment, out / ASSIGNMENT_FILE)
        write_distribution(report_distribution(assignment, model.pool), out / DISTRIBUTION_FILE)
        frozen = freeze_qat_model(model, assignment)
        rows.append(MetricRow("qat-final", *evaluate(frozen, train.inputs, train.labels)))
    write_metrics(rows, out / METRICS_FILE)
    logger.info(f"QAT checkpoint written to {out} (epoch {result.epoch}, {result.counter.steps} steps)")
    return result


@dataclass
class ToyPaths:
    model: Path
    train: Path
    calib: Path
    eval: Path
    fp32_accuracy: float


def run_make_toy(kind: str, out_dir: PathLike, seed: int = 42, train_size: int = 1024, calib_size: int = 256,
                 eval_size: int = 512, epochs: int = 20, lr: float = 0.05) -> ToyPaths:
    """Write a trained FP32 toy model with train, calibration and evaluation sets."""
    if kind == "cnn":
        templates = class_templates(seed)
        graph = toy_cnn(seed)
        sets = [outlier_images(n, seed + i, templates) for i, n in enumerate((train_size, calib_size, eval_size), 1)]
    elif kind == "mlp":
        graph = toy_mlp(seed)
        sets = [two_moons(n, seed + i) for i, n in enumerate((train_size, calib_size, eval_size), 1)]
    else:
        raise ConfigError(f"unknown toy kind {kind!r} (expected cnn or mlp)")
    train, calib, evaluation = sets

    cfg = QatConfig(quantize=False, epochs=epochs, warmup_epochs=0, weight_lr=lr, lr_milestones=[], seed=seed)
    result = train_fp32(graph, train, cfg)
    trained = result.model.graph
    accuracy, _ = evaluate(trained, evaluation.inputs, evaluation.labels)
    logger.info(f"toy {kind}: FP32 eval accuracy {accuracy:.2f}%")

    root = Path(out_dir)
    save_model(trained, root / "model")
    for name, data in (("train", train), ("calib", calib), ("eval", evaluation)):
        save_calibration(data, root / name)
    return ToyPaths(model=root / "model" / MANIFEST_NAME, train=root / "train", calib=root / "calib",
                    eval=root / "eval", fp32_accuracy=accuracy)
