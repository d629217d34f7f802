import json

import pytest
import yaml

from dqss.core.config import get_settings
from dqss.core.errors import AssignmentError, ConfigError
from dqss.schemas.quant_schema import CalibratorKind, QatStrategyKind
from dqss.services import pipeline_service
from dqss.services.pipeline_service import load_config
from dqss.services.search_service import evaluate
from dqss.storage.artifact_store import load_assignment, load_qat_state, load_qparams
from dqss.storage.calibration_store import load_calibration
from dqss.storage.model_store import load_model


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return pipeline_service.run_make_toy("mlp", root, seed=3, train_size=256, calib_size=64, eval_size=128, epochs=5)


def _cfg(toy, out, **extra):
    values = {"model": str(toy.model), "data": str(toy.calib), "eval_data": str(toy.eval), "out": str(out),
              "kl_bins": 512, "eq_grid": 20}
    values.update(extra)
    return load_config(overrides=values)


def test_make_toy_layout(toy):
    graph = load_model(toy.model)
    assert graph.searchable_layers() == ["fc1", "fc2", "fc3"]
    assert len(load_calibration(toy.train, 10_000, graph.input_shape)) == 256
    assert len(load_calibration(toy.calib, 10_000, graph.input_shape)) == 64
    assert toy.fp32_accuracy > 50.0


def test_make_toy_rejects_unknown_kind(tmp_path):
    with pytest.raises(ConfigError):
        pipeline_service.run_make_toy("rnn", tmp_path)


def test_config_precedence(tmp_path, monkeypatch):
    path = tmp_path / "dqss.yaml"
    path.write_text(yaml.safe_dump({"bits": 6, "seed": 3, "search": {"lr": 0.01}}))
    monkeypatch.setenv("DQSS_SEED", "17")
    monkeypatch.setenv("DQSS_THREADS", "2")
    get_settings.cache_clear()
    try:
        cfg = load_config(path, {"seed": 9, "bits": None, "search": {"epochs": 5, "lr": None}})
    finally:
        get_settings.cache_clear()
    assert cfg.seed == 9 and cfg.bits == 6 and cfg.threads == 2
    assert cfg.search.lr == 0.01 and cfg.search.epochs == 5
    assert cfg.search.seed == 9 and cfg.qat.seed == 9


def test_config_errors_name_field(tmp_path):
    with pytest.raises(ConfigError, match="bits"):
        load_config(overrides={"bits": 12})
    with pytest.raises(ConfigError, match="pool"):
        load_config(overrides={"pool": ["maxabs", "median"]})
    broken = tmp_path / "broken.yaml"
    broken.write_text("bits: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(broken)


def test_calibrate_single_strategy(toy, tmp_path):
    path = pipeline_service.run_calibrate(_cfg(toy, tmp_path, pool=["maxabs"]))
    table = load_qparams(path)
    assert sorted(table.layers) == ["fc1", "fc2", "fc3"]
    assert sum(len(e.act) + len(e.weight) for e in table.layers.values()) == 3 * 1 * 2


def test_calibrate_is_byte_identical(toy, tmp_path):
    first = pipeline_service.run_calibrate(_cfg(toy, tmp_path / "a"))
    second = pipeline_service.run_calibrate(_cfg(toy, tmp_path / "b"))
    assert first.read_bytes() == second.read_bytes()


def test_search_eval_report(toy, tmp_path):
    cfg = _cfg(toy, tmp_path, uniform_theta=True, search={"lr": 0.01})
    pipeline_service.run_calibrate(cfg)
    outputs = pipeline_service.run_search(cfg)
    assignment = load_assignment(outputs.paths["assignment"], pool=cfg.pool, layers=["fc1", "fc2", "fc3"])
    assert assignment == outputs.assignment
    assert len(outputs.losses) == 3
    trace_lines = outputs.paths["trace"].read_text().splitlines()
    assert trace_lines[0] == "epoch,layer,tensor_class,strategy,theta"
    assert len(trace_lines) == 1 + 4 * 3 * 2 * 4

    rows = pipeline_service.run_eval(cfg)
    variants = [r.variant for r in rows]
    assert variants == ["fp32", "uniform:maxabs", "uniform:kl", "uniform:eq", "uniform:admm", "dqss", "dqss-none"]
    graph = load_model(toy.model)
    data = load_calibration(toy.eval, 10_000, graph.input_shape)
    assert rows[0].accuracy == pytest.approx(evaluate(graph, data.inputs, data.labels)[0])

    report = pipeline_service.run_report(cfg)
    assert sum(report.distribution[next(iter(report.distribution))].values()) == 3
    assert [r.variant for r in report.metrics] == variants


def test_search_epochs_zero_and_single_pool(toy, tmp_path):
    cfg = _cfg(toy, tmp_path, pool=["kl", "eq"], search={"epochs": 0})
    pipeline_service.run_calibrate(cfg)
    outputs = pipeline_service.run_search(cfg)
    assert all(c.act == CalibratorKind.KL and c.weight == CalibratorKind.KL for c in outputs.assignment.layers.values())

    single = _cfg(toy, tmp_path, pool=["eq"], search={"epochs": 1})
    outputs = pipeline_service.run_search(single)
    assert all(c.act == CalibratorKind.EQ for c in outputs.assignment.layers.values())
    assert set(outputs.paths["trace"].read_text().splitlines()[1:][0].split(",")[3:]) == {"eq", "1"}


def test_eval_without_assignment(toy, tmp_path):
    cfg = _cfg(toy, tmp_path)
    pipeline_service.run_calibrate(cfg)
    with pytest.raises(AssignmentError):
        pipeline_service.run_eval(cfg)


def test_qat_train_and_resume(toy, tmp_path):
    qat = {"epochs": 3, "bits": 4, "batch_size": 64, "weight_lr": 0.02, "theta_lr": 0.01, "lr_milestones": []}
    straight = _cfg(toy, tmp_path / "straight", data=str(toy.train), qat=qat)
    result = pipeline_service.run_qat_train(straight)
    assert result.counter.steps == result.counter.forwards == result.counter.backwards == 2 * 4

    qat_dir = tmp_path / "straight" / "qat"
    state = load_qat_state(qat_dir / "qat_state.json")
    assert state.epoch == 3 and state.pool == list(QatStrategyKind)
    assert set(load_assignment(qat_dir / "assignment.json").layers) == {"fc1", "fc2", "fc3"}
    assert (qat_dir / "metrics.csv").read_text().splitlines()[1].startswith("qat-mixture,")

    partial = _cfg(toy, tmp_path / "split", data=str(toy.train), qat={**qat, "epochs": 2})
    pipeline_service.run_qat_train(partial)
    resumed_cfg = _cfg(toy, tmp_path / "resumed", data=str(toy.train), qat=qat)
    pipeline_service.run_qat_train(resumed_cfg, resume=tmp_path / "split" / "qat")

    resumed_dir = tmp_path / "resumed" / "qat"
    assert (resumed_dir / "qat_state.json").read_bytes() == (qat_dir / "qat_state.json").read_bytes()
    for name in ("theta_trace.csv", "assignment.json", "metrics.csv", "distribution.csv"):
        assert (resumed_dir / name).read_bytes() == (qat_dir / name).read_bytes(), name
    epochs = [line.split(",")[0] for line in (resumed_dir / "theta_trace.csv").read_text().splitlines()[1:]]
    assert sorted(set(epochs), key=int) == ["0", "1", "2", "3"]
    for blob in qat_dir.glob("*.bin"):
        assert (resumed_dir / blob.name).read_bytes() == blob.read_bytes()


def test_qat_divergence_dumps_state(toy, tmp_path, monkeypatch):
    from dqss.core.errors import TrainingDivergedError

    def diverge(*args, **kwargs):
        raise TrainingDivergedError("diverged", {"state": {"epoch": 1}})

    monkeypatch.setattr(pipeline_service, "qat_train", diverge)
    cfg = _cfg(toy, tmp_path, data=str(toy.train), qat={"epochs": 2})
    with pytest.raises(TrainingDivergedError):
        pipeline_service.run_qat_train(cfg)
    assert json.loads((tmp_path / "qat" / "diverged_state.json").read_text()) == {"epoch": 1}
