import logging

import numpy as np
import pytest

from dqss.core.errors import AssignmentError, DimensionError, NonFiniteLossError, TrainingDivergedError
from dqss.schemas.config_schema import QatConfig
from dqss.schemas.qat_schema import QatCheckpoint
from dqss.schemas.quant_schema import Assignment, CalibratorKind, QatStrategyKind, TensorClass
from dqss.services.qat_quantizers import (
    MIN_SCALAR,
    DoReFaQuantizer,
    LsqQuantizer,
    PactQuantizer,
    make_quantizer,
    qat_quantize,
)
from dqss.services.qat_service import (
    PassCounter,
    StaticQatLayer,
    build_qat_model,
    finalize_qat,
    freeze_qat_model,
    qat_branch_mixture,
    qat_train,
    restore_trace,
    shared_mixture_forward,
    train_fp32,
)
from dqss.services.search_service import evaluate
from dqss.tensor import ops
from dqss.tensor.tensor import Tensor, default_dtype


def _cfg(**overrides):
    values = dict(bits=4, epochs=3, warmup_epochs=1, weight_lr=0.05, theta_lr=0.01, lr_milestones=[],
                  batch_size=32, seed=5)
    values.update(overrides)
    return QatConfig(**values)


def test_dorefa_weight_zeros_and_symmetry(rng):
    q = DoReFaQuantizer(TensorClass.WEIGHT, 4)
    np.testing.assert_array_equal(q.quantize_array(np.zeros(6, dtype=np.float32)), np.zeros(6))
    w = rng.standard_normal(40).astype(np.float32)
    np.testing.assert_array_equal(q.quantize_array(-w), -q.quantize_array(w))
    assert np.abs(q.quantize_array(w)).max() == pytest.approx(np.abs(w).max(), rel=1e-6)


def test_dorefa_activation_grid():
    q = DoReFaQuantizer(TensorClass.ACT, 2)
    out = q.quantize_array(np.array([-0.5, 0.2, 0.5, 2.0], dtype=np.float32))
    np.testing.assert_allclose(out, [0.0, 1 / 3, 2 / 3, 1.0], rtol=1e-6)


def test_pact_clip_gradient():
    q = PactQuantizer(TensorClass.ACT, 4, "a")
    q.clip.data[...] = 1.5
    x = Tensor(np.array([2.0, 3.0, 0.7, -0.2], dtype=np.float32), requires_grad=True)
    out = qat_quantize(x, q)
    np.testing.assert_allclose(out.data[:2], [1.5, 1.5], rtol=1e-6)
    assert out.data[3] == 0.0
    ops.sum(out).backward()
    assert q.clip.grad[0] == 2.0
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0, 0.0])


def test_pact_signed_lower_clip():
    q = PactQuantizer(TensorClass.ACT, 4, "a")
    q.observe(np.array([-2.0, 1.0], dtype=np.float32), momentum=0.9)
    assert q.signed and q.scalar() == 2.0
    g = np.ones(3, dtype=np.float32)
    assert q.param_grads(np.array([3.0, -3.0, -2.5], dtype=np.float32), g)[0][0] == -1.0


@pytest.mark.parametrize("seed", range(5))
def test_lsq_step_gradient_matches_surrogate(seed):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        q = LsqQuantizer(TensorClass.WEIGHT, 4, "w")
        x = rng.standard_normal(50) * 1.5
        s0 = float(rng.uniform(0.1, 0.4))
        q.step.data[...] = s0
        r = rng.standard_normal(50)
        # rounding residual frozen at s0
        c = np.rint(x / s0) - x / s0

        def surrogate(s):
            v = x / s
            return np.sum(r * np.where(v < -q.q_neg, -q.q_neg * s, np.where(v > q.levels, q.levels * s, x + s * c)))

        h = 1e-6
        numeric = (surrogate(s0 + h) - surrogate(s0 - h)) / (2 * h)
        analytic = q.param_grads(x, r)[0][0] / q.grad_scale(x)
    assert abs(analytic - numeric) <= 1e-2 * max(abs(numeric), 1e-8)


def test_lsq_gradient_scale():
    w = LsqQuantizer(TensorClass.WEIGHT, 4)
    a = LsqQuantizer(TensorClass.ACT, 4)
    assert w.grad_scale(np.zeros((8, 3, 3, 3))) == pytest.approx(1 / np.sqrt(216 * 7))
    assert a.grad_scale(np.zeros((16, 10))) == pytest.approx(1 / np.sqrt(10 * 15))


def test_projection_warns(caplog):
    q = LsqQuantizer(TensorClass.ACT, 4, "fc.act.lsq")
    q.step.data[...] = -0.5
    with caplog.at_level(logging.WARNING, logger="dqss"):
        q.project()
    assert q.scalar() == pytest.approx(MIN_SCALAR)
    assert "fc.act.lsq" in caplog.text


def test_observe_ema():
    q = make_quantizer(QatStrategyKind.LSQ, TensorClass.ACT, 4)
    q.observe(np.array([0.0, 2.0], dtype=np.float32), 0.9)
    q.observe(np.array([1.0, 4.0], dtype=np.float32), 0.9)
    assert q.observed == float(np.float32(0.9) * np.float32(2.0) + np.float32(0.1) * np.float32(4.0))
    assert not q.signed
    assert q.scalar() == pytest.approx(q.observed / 15, rel=1e-6)


def test_quantizer_state_round_trip():
    q = make_quantizer(QatStrategyKind.PACT, TensorClass.ACT, 3, "x")
    q.observe(np.array([-0.3, 0.7], dtype=np.float32), 0.9)
    state = q.state()
    fresh = make_quantizer(QatStrategyKind.PACT, TensorClass.ACT, 3, "x")
    fresh.load_state(state.model_validate(state.model_dump(mode="json")))
    assert fresh.state() == state


def test_gradient_accumulates_into_universal_weight(rng):
    W = Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    quantizers = [make_quantizer(k, TensorClass.WEIGHT, 4) for k in QatStrategyKind]
    for q in quantizers:
        q.initialize(float(np.abs(W.data).max()))
    theta = Tensor(np.array([0.5, 0.3, 0.2], dtype=np.float32), requires_grad=True)
    r = rng.standard_normal((3, 4)).astype(np.float32)
    ops.sum(ops.mul(qat_branch_mixture(W, theta, quantizers), r)).backward()
    manual = sum(t * q.input_grad(W.data, r) for t, q in zip(theta.data, quantizers))
    np.testing.assert_allclose(W.grad, manual, atol=1e-5)


@pytest.mark.parametrize("pool_size", [1, 2, 3])
def test_one_weight_tensor_per_layer(mlp, pool_size):
    model = build_qat_model(mlp, _cfg(pool=list(QatStrategyKind)[:pool_size]))
    assert all(m.weight_storage() == 1 for m in model.mixtures.values())
    assert all(m.layer.weight is model.graph.node(name).weight for name, m in model.mixtures.items())


def test_single_strategy_mixture_is_static_layer(mlp, moons):
    model = build_qat_model(mlp, _cfg(pool=[QatStrategyKind.LSQ]))
    mixture = model.mixtures["fc1"]
    for q in mixture.act_quantizers:
        q.observe(moons.inputs, 0.9)
    x = Tensor(moons.inputs[:8])
    static = StaticQatLayer(mixture.layer, mixture.act_quantizers[0], mixture.weight_quantizers[0])
    np.testing.assert_allclose(shared_mixture_forward(mixture, x).data, static.forward(x).data, rtol=1e-6)


def test_pass_counters(mlp, moons):
    result = qat_train(build_qat_model(mlp, _cfg()), moons, _cfg())
    counter = result.counter
    assert counter.steps == counter.forwards == counter.backwards == 2 * 4
    assert counter.warmup_forwards == 4
    assert len(result.trace.losses) == 2
    assert len(result.trace.snapshots) == 4


def test_zero_lr_keeps_parameters(mlp, moons):
    cfg = _cfg(weight_lr=0.0, theta_lr=0.0)
    model = build_qat_model(mlp, cfg)
    qat_train(model, moons, cfg.model_copy(update={"epochs": 1}))
    before = [t.data.copy() for t in model.weight_parameters() + model.hyper_parameters()]
    qat_train(model, moons, cfg, start_epoch=1)
    for old, t in zip(before, model.weight_parameters() + model.hyper_parameters()):
        np.testing.assert_array_equal(old, t.data)


def test_warmup_only_populates_ranges(mlp, moons):
    cfg = _cfg(epochs=1)
    model = build_qat_model(mlp, cfg)
    weights = [t.data.copy() for t in model.weight_parameters()]
    result = qat_train(model, moons, cfg)
    assert result.counter.steps == 0
    for old, t in zip(weights, model.weight_parameters()):
        np.testing.assert_array_equal(old, t.data)
    for mixture in model.mixtures.values():
        assert all(q.observed is not None and q.observed > 0 for q in mixture.act_quantizers)
    # moons inputs are signed
    assert all(q.signed for q in model.mixtures["fc1"].act_quantizers)


def test_resume_matches_uninterrupted_run(mlp, moons):
    cfg = _cfg(epochs=4)
    straight = qat_train(build_qat_model(mlp, cfg), moons, cfg)

    first = qat_train(build_qat_model(mlp, cfg), moons, cfg.model_copy(update={"epochs": 2}))
    state = first.model.checkpoint(first.epoch, first.counter, first.initial_loss, first.trace)
    state = QatCheckpoint.model_validate(state.model_dump(mode="json"))
    resumed_model = build_qat_model(first.model.graph.stripped(), cfg)
    resumed_model.restore(state)
    counter = PassCounter(steps=state.steps, forwards=state.forwards, backwards=state.backwards)
    resumed = qat_train(resumed_model, moons, cfg, start_epoch=state.epoch, counter=counter,
                        initial_loss=state.initial_loss, trace=restore_trace(state))

    assert resumed.counter.steps == straight.counter.steps
    assert list(resumed.trace.rows()) == list(straight.trace.rows())
    assert resumed.trace.losses == straight.trace.losses
    for a, b in zip(straight.model.graph.parameters(), resumed.model.graph.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    for a, b in zip(straight.model.hyper_parameters(), resumed.model.hyper_parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_restore_rejects_other_pool(mlp):
    model = build_qat_model(mlp, _cfg())
    state = model.checkpoint(0, PassCounter(), None)
    other = build_qat_model(mlp, _cfg(pool=[QatStrategyKind.PACT]))
    with pytest.raises(DimensionError):
        other.restore(state)


def test_divergence_carries_state(mlp, moons):
    cfg = _cfg(warmup_epochs=0, divergence_factor=2.0)
    with pytest.raises(TrainingDivergedError) as err:
        qat_train(build_qat_model(mlp, cfg), moons, cfg, initial_loss=1e-9)
    assert err.value.exit_code == 7
    assert err.value.context["epoch"] == 1
    assert set(err.value.context["state"]["layers"]) == {"fc1", "fc2", "fc3"}


def test_non_finite_loss(mlp, moons):
    cfg = _cfg(warmup_epochs=0)
    model = build_qat_model(mlp, cfg)
    model.theta.alpha["fc2"].data[0] = np.nan
    with pytest.raises(NonFiniteLossError):
        qat_train(model, moons, cfg)


def test_finalize_and_freeze(mlp, moons):
    cfg = _cfg()
    result = qat_train(build_qat_model(mlp, cfg), moons, cfg)
    assignment = finalize_qat(result.model)
    assert set(assignment.layers) == {"fc1", "fc2", "fc3"}
    frozen = freeze_qat_model(result.model, assignment)
    assert isinstance(frozen.node("fc2").quant, StaticQatLayer)
    accuracy, loss = evaluate(frozen, moons.inputs, moons.labels)
    assert 0.0 <= accuracy <= 100.0 and np.isfinite(loss)
    with pytest.raises(AssignmentError):
        freeze_qat_model(result.model, Assignment.uniform(["fc1", "fc2", "fc3"], CalibratorKind.KL))


def test_fp32_twin_has_no_strategies(mlp, moons):
    twin = train_fp32(mlp, moons, _cfg(epochs=2))
    assert twin.model.theta is None
    assert twin.counter.steps == 4
    with pytest.raises(DimensionError):
        finalize_qat(twin.model)
    # the source graph is never trained in place
    assert not any(t.requires_grad for t in mlp.parameters())


def test_trace_without_history_counts_from_start_epoch(mlp, moons):
    cfg = _cfg(epochs=3)
    first = qat_train(build_qat_model(mlp, cfg), moons, cfg.model_copy(update={"epochs": 2}))
    state = first.model.checkpoint(first.epoch, first.counter, first.initial_loss)
    assert state.history == [] and state.losses == []
    model = build_qat_model(first.model.graph.stripped(), cfg)
    model.restore(state)
    resumed = qat_train(model, moons, cfg, start_epoch=state.epoch, initial_loss=state.initial_loss)
    assert sorted({row[0] for row in resumed.trace.rows()}) == [2, 3]
