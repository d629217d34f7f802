import logging
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import typer
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from dqss.core.errors import DqssError
from dqss.core.logging import configure_logging
from dqss.services import pipeline_service
from dqss.services.pipeline_service import Distribution, load_config
from dqss.storage.artifact_store import MetricRow

logger = logging.getLogger(__name__)

app = typer.Typer(name="dqss", help="Differentiable quantization strategy search.", no_args_is_help=True,
                  add_completion=False)
console = Console()
err_console = Console(stderr=True)


class LossChoice(str, Enum):
    ce = "ce"
    mse = "mse"


def _pool(value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    return [name.strip() for name in value.split(",") if name.strip()]


def _run(action: Callable[[], Any], log_level: Optional[str]) -> Any:
    configure_logging(log_level)
    try:
        return action()
    except DqssError as exc:
        err_console.print(f"[bold red]{type(exc).__name__}[/bold red]: {escape(exc.detail)}")
        raise typer.Exit(exc.exit_code)
    except Exception as exc:
        logger.exception("unexpected failure")
        err_console.print(f"[bold red]internal error[/bold red]: {escape(str(exc))}")
        raise typer.Exit(1)


def _config(config: Optional[Path], overrides: Dict[str, Any]):
    return load_config(config, overrides)


def show_distribution(distribution: Distribution, title: str = "Strategy distribution") -> None:
    table = Table(title=title)
    table.add_column("tensor class")
    strategies = []
    for counts in distribution.values():
        strategies.extend(s for s in counts if s not in strategies)
    for strategy in strategies:
        table.add_column(strategy.value, justify="right")
    for tensor_class, counts in distribution.items():
        table.add_row(tensor_class.value, *(str(counts.get(s, 0)) for s in strategies))
    console.print(table)


def show_metrics(rows: List[MetricRow]) -> None:
    table = Table(title="Evaluation")
    table.add_column("variant")
    table.add_column("top-1 %", justify="right")
    table.add_column("loss", justify="right")
    for row in rows:
        table.add_row(row.variant, f"{row.accuracy:.2f}", f"{row.loss:.4f}")
    console.print(table)


ConfigOpt = typer.Option(None, "--config", help="YAML pipeline config; flags override its keys.")
ModelOpt = typer.Option(None, "--model", help="Path of the model manifest.json.")
DataOpt = typer.Option(None, "--data", help="Calibration / training directory with index.csv.")
PoolOpt = typer.Option(None, "--pool", help="Comma-separated strategies, e.g. maxabs,kl,eq,admm.")
BitsOpt = typer.Option(None, "--bits", help="Quantization bit width (2..8).")
SeedOpt = typer.Option(None, "--seed")
ThreadsOpt = typer.Option(None, "--threads", help="Upper bound on internal parallelism.")
OutOpt = typer.Option(None, "--out", help="Output directory.")
QParamsOpt = typer.Option(None, "--qparams", help="qparams file (default: <out>/qparams.json).")
LogOpt = typer.Option(None, "--log-level")


@app.command()
def calibrate(
    config: Optional[Path] = ConfigOpt,
    model: Optional[str] = ModelOpt,
    data: Optional[str] = DataOpt,
    pool: Optional[str] = PoolOpt,
    bits: Optional[int] = BitsOpt,
    seed: Optional[int] = SeedOpt,
    threads: Optional[int] = ThreadsOpt,
    limit: Optional[int] = typer.Option(None, "--limit", help="Calibration samples to use (default 256)."),
    out: Optional[str] = OutOpt,
    log_level: Optional[str] = LogOpt,
):
    """Calibrate every conv/linear layer with every strategy of the pool."""
    def action():
        cfg = _config(config, {"model": model, "data": data, "pool": _pool(pool), "bits": bits, "seed": seed,
                               "threads": threads, "calib_limit": limit, "out": out})
        path = pipeline_service.run_calibrate(cfg)
        console.print(f"qparams written to {path}")

    _run(action, log_level)


@app.command()
def search(
    config: Optional[Path] = ConfigOpt,
    model: Optional[str] = ModelOpt,
    data: Optional[str] = DataOpt,
    pool: Optional[str] = PoolOpt,
    bits: Optional[int] = BitsOpt,
    seed: Optional[int] = SeedOpt,
    threads: Optional[int] = ThreadsOpt,
    epochs: Optional[int] = typer.Option(None, "--epochs"),
    lr: Optional[float] = typer.Option(None, "--lr"),
    loss: Optional[LossChoice] = typer.Option(None, "--loss", help="ce (labels) or mse (match FP32 logits)."),
    qparams: Optional[str] = QParamsOpt,
    out: Optional[str] = OutOpt,
    log_level: Optional[str] = LogOpt,
):
    """Search per-layer strategies and write the assignment, theta trace and distribution."""
    def action():
        cfg = _config(config, {"model": model, "data": data, "pool": _pool(pool), "bits": bits, "seed": seed,
                               "threads": threads, "qparams": qparams, "out": out,
                               "search": {"epochs": epochs, "lr": lr, "loss": loss.value if loss else None}})
        result = pipeline_service.run_search(cfg)
        show_distribution(result.distribution)
        console.print(f"assignment written to {result.paths['assignment']}")

    _run(action, log_level)


@app.command("eval")
def evaluate(
    config: Optional[Path] = ConfigOpt,
    model: Optional[str] = ModelOpt,
    data: Optional[str] = DataOpt,
    eval_data: Optional[str] = typer.Option(None, "--eval-data", help="Evaluation set (default: --data)."),
    pool: Optional[str] = PoolOpt,
    bits: Optional[int] = BitsOpt,
    seed: Optional[int] = SeedOpt,
    threads: Optional[int] = ThreadsOpt,
    qparams: Optional[str] = QParamsOpt,
    assignment: Optional[str] = typer.Option(None, "--assignment", help="Searched or hand-written assignment."),
    uniform_theta: bool = typer.Option(False, "--uniform-theta", help="Also evaluate the unsearched mixture."),
    out: Optional[str] = OutOpt,
    log_level: Optional[str] = LogOpt,
):
    """Compare FP32, uniform strategies, the DQSS assignment and optionally DQSS-None."""
    def action():
        cfg = _config(config, {"model": model, "data": data, "eval_data": eval_data, "pool": _pool(pool),
                               "bits": bits, "seed": seed, "threads": threads, "qparams": qparams,
                               "assignment": assignment, "uniform_theta": uniform_theta or None, "out": out})
        show_metrics(pipeline_service.run_eval(cfg))

    _run(action, log_level)


@app.command("qat-train")
def qat_train(
    config: Optional[Path] = ConfigOpt,
    model: Optional[str] = ModelOpt,
    data: Optional[str] = DataOpt,
    pool: Optional[str] = typer.Option(None, "--pool", help="Comma-separated QAT strategies: dorefa,pact,lsq."),
    bits: Optional[int] = BitsOpt,
    seed: Optional[int] = SeedOpt,
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Total epochs including the warm-up."),
    lr: Optional[float] = typer.Option(None, "--lr", help="Weight learning rate."),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint directory to continue from."),
    out: Optional[str] = OutOpt,
    log_level: Optional[str] = LogOpt,
):
    """Train the shared-weight QAT mixture and write a checkpoint."""
    def action():
        cfg = _config(config, {"model": model, "data": data, "seed": seed, "out": out,
                               "qat": {"pool": _pool(pool), "bits": bits, "epochs": epochs, "weight_lr": lr}})
        result = pipeline_service.run_qat_train(cfg, resume=resume)
        console.print(f"trained to epoch {result.epoch}: {result.counter.steps} steps, "
                      f"{result.counter.forwards} forwards, {result.counter.backwards} backwards")

    _run(action, log_level)


@app.command()
def report(
    config: Optional[Path] = ConfigOpt,
    pool: Optional[str] = PoolOpt,
    assignment: Optional[str] = typer.Option(None, "--assignment"),
    out: Optional[str] = OutOpt,
    log_level: Optional[str] = LogOpt,
):
    """Print the strategy distribution and any evaluation metrics already written."""
    def action():
        cfg = _config(config, {"pool": _pool(pool), "assignment": assignment, "out": out})
        result = pipeline_service.run_report(cfg)
        show_distribution(result.distribution)
        if result.metrics:
            show_metrics(result.metrics)

    _run(action, log_level)


@app.command("make-toy")
def make_toy(
    kind: str = typer.Option("cnn", "--kind", help="cnn (outlier images) or mlp (two moons)."),
    out: Path = typer.Option(Path("toy"), "--out"),
    seed: int = typer.Option(42, "--seed"),
    epochs: int = typer.Option(20, "--epochs"),
    train_size: int = typer.Option(1024, "--train-size"),
    calib_size: int = typer.Option(256, "--calib-size"),
    eval_size: int = typer.Option(512, "--eval-size"),
    log_level: Optional[str] = LogOpt,
):
    """Write a trained FP32 toy model with train, calibration and evaluation sets."""
    def action():
        paths = pipeline_service.run_make_toy(kind, out, seed=seed, train_size=train_size,
                                              calib_size=calib_size, eval_size=eval_size, epochs=epochs)
        console.print(f"model {paths.model} (FP32 eval accuracy {paths.fp32_accuracy:.2f}%)")

    _run(action, log_level)
