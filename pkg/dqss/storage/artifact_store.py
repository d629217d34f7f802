"""
Pipeline artifacts: qparams, assignments, QAT state (JSON) and the CSV reports.

Float fields of the JSON artifacts are written as binary32 bit patterns so
every value survives a save/load cycle unchanged; CSV reports print floats
with 9 significant digits, enough to recover a float32.
"""
import csv
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

from pydantic import BaseModel, ValidationError

from dqss.core.errors import AssignmentError, ManifestValidationError, ManifestVersionError, UnknownStrategyError
from dqss.schemas.qat_schema import QAT_STATE_VERSION, QatCheckpoint
from dqss.schemas.quant_schema import (
    Assignment,
    CalibratorKind,
    QatStrategyKind,
    QParamTable,
    Strategy,
    TensorClass,
)
from dqss.storage.codec import PathLike, read_json, write_json

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["epoch", "layer", "tensor_class", "strategy", "theta"]
DISTRIBUTION_COLUMNS = ["tensor_class", "strategy", "count"]
METRIC_COLUMNS = ["variant", "accuracy", "loss"]


class MetricRow(NamedTuple):
    variant: str
    accuracy: float
    loss: float


def parse_strategy(name: Any) -> Strategy:
    for enum in (CalibratorKind, QatStrategyKind):
        try:
            return enum(name)
        except ValueError:
            continue
    raise UnknownStrategyError(f"unknown strategy {name!r}", {"strategy": name})


def _validate(model: type, raw: Any, path: PathLike) -> BaseModel:
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        fields = "; ".join(".".join(str(p) for p in e["loc"]) + f": {e['msg']}" for e in exc.errors())
        raise ManifestValidationError(f"{Path(path).name}: {fields}")


def save_qparams(table: QParamTable, path: PathLike) -> Path:
    return write_json(path, table.model_dump(mode="json"))


def load_qparams(path: PathLike) -> QParamTable:
    """
    Load a qparams file written by save_qparams.

    Raises:
        MissingBlobError: the file does not exist.
        DuplicateKeyError: a JSON object repeats a key (e.g. a layer name).
        UnknownStrategyError: a strategy name outside maxabs|kl|eq|admm.
        ManifestValidationError: any other schema violation.
    """
    raw = read_json(path)
    layers = raw.get("layers", {}) if isinstance(raw, dict) else None
    if not isinstance(layers, dict):
        raise ManifestValidationError(f"{Path(path).name}: expected an object with a 'layers' map")
    for layer, entry in layers.items():
        if not isinstance(entry, dict):
            continue
        for tensor_class in TensorClass:
            for name in entry.get(tensor_class.value) or {}:
                if name not in {k.value for k in CalibratorKind}:
                    raise UnknownStrategyError(
                        f"layer {layer!r}: unknown {tensor_class.value} strategy {name!r}",
                        {"layer": layer, "strategy": name},
                    )
    return _validate(QParamTable, raw, path)


def save_assignment(assignment: Assignment, path: PathLike) -> Path:
    return write_json(path, assignment.model_dump(mode="json"))


def load_assignment(path: PathLike, pool: Optional[Sequence[Strategy]] = None,
                    layers: Optional[Sequence[str]] = None) -> Assignment:
    """Load an assignment, optionally checking it against a pool and a layer list."""
    raw = read_json(path)
    entries = raw.get("layers") if isinstance(raw, dict) else None
    if not isinstance(entries, dict):
        raise ManifestValidationError(f"{Path(path).name}: expected an object with a 'layers' map")
    parsed = {}
    for layer, choice in entries.items():
        if not isinstance(choice, dict) or set(choice) != {"act", "weight"}:
            raise ManifestValidationError(f"{Path(path).name}: layer {layer!r} needs exactly 'act' and 'weight'")
        parsed[layer] = {key: parse_strategy(value) for key, value in choice.items()}
    assignment = _validate(Assignment, {"layers": parsed}, path)

    if pool is not None:
        allowed = set(pool)
        for layer, choice in assignment.layers.items():
            for strategy in (choice.act, choice.weight):
                if strategy not in allowed:
                    raise AssignmentError(
                        f"layer {layer!r} uses {strategy.value!r}, which is not in the pool",
                        {"layer": layer, "strategy": strategy.value},
                    )
    if layers is not None:
        missing = [name for name in layers if name not in assignment.layers]
        extra = sorted(set(assignment.layers) - set(layers))
        if missing or extra:
            raise AssignmentError(
                f"assignment does not match the model: missing {missing}, unknown {extra}",
                {"missing": missing, "unknown": extra},
            )
    return assignment


def save_qat_state(state: QatCheckpoint, path: PathLike) -> Path:
    return write_json(path, state.model_dump(mode="json"))


def load_qat_state(path: PathLike) -> QatCheckpoint:
    raw = read_json(path)
    version = raw.get("format_version") if isinstance(raw, dict) else None
    if version != QAT_STATE_VERSION:
        raise ManifestVersionError(f"QAT state format_version {version!r} is not supported")
    return _validate(QatCheckpoint, raw, path)


def _write_csv(path: PathLike, header: List[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _fmt(value: float) -> str:
    return "%.9g" % value


def write_theta_trace(rows: Iterable[Tuple[int, str, str, str, float]], path: PathLike) -> Path:
    return _write_csv(
        path, TRACE_COLUMNS,
        ((epoch, layer, tc, strategy, _fmt(theta)) for epoch, layer, tc, strategy, theta in rows),
    )


def write_distribution(counts: Dict[TensorClass, Dict[Strategy, int]], path: PathLike) -> Path:
    rows = [
        (tensor_class.value, strategy.value, count)
        for tensor_class in TensorClass
        for strategy, count in counts.get(tensor_class, {}).items()
    ]
    return _write_csv(path, DISTRIBUTION_COLUMNS, rows)


def write_metrics(rows: Iterable[MetricRow], path: PathLike) -> Path:
    return _write_csv(path, METRIC_COLUMNS, ((r.variant, _fmt(r.accuracy), _fmt(r.loss)) for r in rows))


def read_metrics(path: PathLike) -> List[MetricRow]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return [MetricRow(r["variant"], float(r["accuracy"]), float(r["loss"])) for r in csv.DictReader(handle)]
