import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resadapt.adapters import AdapterSpec, Placement, count_adapter_params
from resadapt.autodiff import Tensor
from resadapt.conformer import ConformerConfig, encoder_tensors
from resadapt.errors import ConfigError, IntegrityError, NumericError
from resadapt import finetune as ft
from resadapt.finetune import Adam, Mode, Split, SyntheticTask, TrainConfig

CFG = ConformerConfig(num_blocks=2, d_model=8, heads=2, conv_kernel=3, ffn_expansion=2)


def small_task(seed=1, **kw):
    args = dict(num_classes=3, seq_len=6, d_model=8, train_sequences=64, eval_sequences=32, heads=2,
                conv_kernel=3, ffn_expansion=2)
    args.update(kw)
    return SyntheticTask(seed, **args)


def adapter_model(spec=AdapterSpec(Placement.TPA, 4)):
    return ft.attach(CFG, ft.build_model(CFG, 3).encoder, 3, spec, 0)


# partition ------------------------------------------------------------------------

def test_adapter_partition_on_default_encoder():
    cfg = ConformerConfig()
    spec = AdapterSpec(Placement.TPA, 8)
    m = ft.attach(cfg, ft.build_model(cfg, 4).encoder, 4, spec, 0)
    part = ft.make_partition(m, Mode.ADAPTER)
    params = m.named_parameters()
    pc = count_adapter_params(spec, cfg, 4)
    assert sum(params[n].data.size for n in part.trainable) == pc.adapter + pc.head
    assert all(n.startswith("encoder.") for n in part.frozen)


@pytest.mark.parametrize("mode", list(Mode))
def test_partition_is_a_partition(mode):
    m = adapter_model()
    part = ft.make_partition(m, mode)
    assert part.frozen | part.trainable == set(m.named_parameters())
    assert not part.frozen & part.trainable
    if mode is Mode.FULL_FINETUNE:
        assert not part.frozen
    if mode is Mode.HEAD_ONLY:
        assert all(n.startswith("head.") for n in part.trainable)


def test_overlapping_partition_rejected():
    with pytest.raises(IntegrityError):
        ft.ParamPartition({"a"}, {"a", "b"})


def test_mismatched_partition_rejected():
    m = adapter_model()
    with pytest.raises(IntegrityError):
        ft.train_step(m, ft.ParamPartition(set(), {"head.projection.weight"}),
                      small_task().train, Adam())


# Adam -----------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(1e-5, 1e-1))
def test_adam_first_steps_match_closed_form(p0, g, lr):
    t = Tensor(np.array([p0]))
    opt = Adam(lr)
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = v = 0.0
    want = p0
    for k in (1, 2):
        t.grad = np.array([g * k])
        opt.step({"p": t})
        m = b1 * m + (1 - b1) * g * k
        v = b2 * v + (1 - b2) * (g * k) ** 2
        want -= lr * (m / (1 - b1**k)) / (np.sqrt(v / (1 - b2**k)) + eps)
    assert abs(t.data[0] - want) <= 1e-12


@pytest.mark.parametrize("kw", [dict(lr=-1.0), dict(beta1=1.0), dict(beta2=0.0), dict(eps=0.0)])
def test_adam_rejects_bad_hyperparameters(kw):
    with pytest.raises(ConfigError):
        Adam(**kw)


@pytest.mark.parametrize("kw", [dict(steps=-1), dict(batch_size=0), dict(beta1=1.5), dict(mode="partial")])
def test_train_config_validation(kw):
    with pytest.raises((ConfigError, ValueError)):
        TrainConfig(**kw)


# training -------------------------------------------------------------------------

def test_zero_lr_changes_nothing():
    m = adapter_model()
    task = small_task()
    before = {n: p.data.copy() for n, p in m.named_parameters().items()}
    batch = Split(task.eval.inputs, task.eval.labels)
    loss = ft.train_step(m, ft.make_partition(m, Mode.ADAPTER), batch, Adam(lr=0.0))
    assert loss == ft.evaluate(m, task)[0]
    for n, p in m.named_parameters().items():
        assert p.data.tobytes() == before[n].tobytes(), n


def test_frozen_parameters_are_bit_identical_after_training():
    m = adapter_model()
    frozen = {n: p.data.copy() for n, p in encoder_tensors(m.encoder)}
    trainable_before = {n: p.data.copy() for n, p in m.named_parameters().items() if not n.startswith("encoder.")}
    ft.train(m, small_task(), TrainConfig(steps=100, lr=1e-2))
    for n, p in encoder_tensors(m.encoder):
        assert p.data.tobytes() == frozen[n].tobytes(), n
    moved = [n for n, p in m.named_parameters().items() if n in trainable_before
             and not np.array_equal(p.data, trainable_before[n])]
    assert any(n.startswith("adapters.") for n in moved) and any(n.startswith("head.") for n in moved)


def test_head_only_training_touches_only_head():
    m = adapter_model()
    before = {n: p.data.copy() for n, p in m.named_parameters().items()}
    ft.train(m, small_task(), TrainConfig(steps=20, lr=1e-2, mode=Mode.HEAD_ONLY))
    for n, p in m.named_parameters().items():
        assert np.array_equal(p.data, before[n]) != n.startswith("head."), n


def test_loss_decreases_and_runs_are_deterministic():
    def run():
        m = adapter_model()
        curve = ft.train(m, small_task(), TrainConfig(steps=150, lr=5e-3))
        return [pt.loss for pt in curve]
    a, b = run(), run()
    assert a == b
    assert np.mean(a[-20:]) < np.mean(a[:20])


def test_non_finite_loss_names_step():
    m = adapter_model()
    m.head.projection.weight.data[0, 0] = np.nan
    with pytest.raises(NumericError, match="step 0"):
        ft.train(m, small_task(), TrainConfig(steps=3))


def test_curve_csv(tmp_path):
    m = adapter_model()
    curve = ft.train(m, small_task(), TrainConfig(steps=4), eval_every=2)
    ft.write_curve(curve, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "step,loss,accuracy,mode"
    assert len(lines) == 1 + 4 + 2
    assert lines[-1].endswith("adapter/eval")


# tasks and evaluation -------------------------------------------------------------

def test_task_is_deterministic_and_splits_differ():
    a, b = small_task(3), small_task(3)
    assert np.array_equal(a.train.inputs, b.train.inputs) and np.array_equal(a.eval.labels, b.eval.labels)
    assert not np.array_equal(a.train.inputs[: len(a.eval.inputs)], a.eval.inputs)
    assert not np.array_equal(small_task(4).train.labels, a.train.labels)


def test_task_classes_are_roughly_balanced():
    t = small_task(5, train_sequences=256)
    freq = np.bincount(t.train.labels.ravel(), minlength=3) / t.train.labels.size
    assert freq.min() > 0.2


def test_teacher_as_model_is_perfect():
    t = small_task()
    assert ft.evaluate(t.teacher, t) == (ft.evaluate(t.teacher, t)[0], 1.0)


def test_random_head_is_at_chance():
    task = small_task(6, num_classes=4, eval_sequences=400)
    assert task.eval.frames >= 2000
    m = ft.build_model(CFG, 4, head_seed=3)
    loss, acc = ft.evaluate(m, task)
    assert abs(acc - 0.25) < 0.05
    assert ft.evaluate(m, task) == (loss, acc)


def test_unknown_split():
    with pytest.raises(ConfigError):
        small_task().split("test")


def test_wide_adapter_beats_head_only_on_training_loss():
    base = ft.build_model(CFG, 3)
    task = small_task(7)
    cfg = TrainConfig(steps=150, lr=1e-2)
    wide = ft.attach(CFG, base.encoder, 3, AdapterSpec(Placement.TPA, CFG.d_model), 0)
    ft.train(wide, task, cfg)
    head = ft.attach(CFG, base.encoder, 3, None, 0)
    ft.train(head, task, TrainConfig(**{**cfg.to_dict(), "mode": Mode.HEAD_ONLY}))
    assert ft.evaluate(wide, task, "train")[0] < ft.evaluate(head, task, "train")[0]


def test_finetune_reports_system_and_fraction():
    base = ft.build_model(CFG, 3)
    task = small_task()
    cfg = TrainConfig(steps=2)
    _, full = ft.finetune(CFG, base.encoder, task, Mode.FULL_FINETUNE, AdapterSpec(), cfg)
    _, tpa = ft.finetune(CFG, base.encoder, task, Mode.ADAPTER, AdapterSpec(Placement.TPA, 4), cfg)
    _, head = ft.finetune(CFG, base.encoder, task, Mode.HEAD_ONLY, None, cfg)
    assert (full.system, full.trainable_fraction, full.width) == ("finetune", 1.0, 0)
    assert tpa.system == "tpa(4)" and head.system == "head-only"
    pc = count_adapter_params(AdapterSpec(Placement.TPA, 4), CFG, 3)
    assert tpa.trainable_fraction == pytest.approx(pc.trainable_fraction, rel=1e-12)
    assert head.trainable_fraction < tpa.trainable_fraction < 1.0


def test_finetune_does_not_touch_the_source_encoder():
    base = ft.build_model(CFG, 3)
    snapshot = copy.deepcopy(base.encoder)
    ft.finetune(CFG, base.encoder, small_task(), Mode.FULL_FINETUNE, None, TrainConfig(steps=3, lr=1e-2))
    for (n, a), (_, b) in zip(encoder_tensors(base.encoder), encoder_tensors(snapshot)):
        assert np.array_equal(a.data, b.data), n
