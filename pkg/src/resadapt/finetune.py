"""Frozen-encoder finetuning: models, synthetic tasks, Adam, training and evaluation."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .adapters import AdapterSet, AdapterSpec, Placement, build_adapter_set, iter_adapter_tensors
from .autodiff import Tensor
from .conformer import BlockParams, ConformerConfig, EncoderProbe, encoder_forward, encoder_tensors, init_encoder
from .errors import ConfigError, IntegrityError, NumericError
from .layers import LinearParams, init_linear, linear_forward, named_parameters

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    FULL_FINETUNE = "full"
    ADAPTER = "adapter"
    HEAD_ONLY = "head-only"

    def __str__(self) -> str:
        return self.value


@dataclass
class HeadParams:
    projection: LinearParams

    @property
    def num_classes(self) -> int:
        return self.projection.out_features


def init_head(d: int, num_classes: int, seed: int) -> HeadParams:
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    return HeadParams(init_linear(np.random.default_rng(seed), d, num_classes))


@dataclass
class Model:
    config: ConformerConfig
    encoder: list[BlockParams]
    head: HeadParams
    adapters: AdapterSet | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(encoder_tensors(self.encoder))
        if self.adapters is not None:
            out.update(iter_adapter_tensors(self.adapters))
        out.update(named_parameters(self.head, "head"))
        return out

    def features(self, x: Tensor, probe: EncoderProbe = None) -> Tensor:
        return encoder_forward(self.encoder, x, self.adapters, probe)

    def forward(self, x, probe: EncoderProbe = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return linear_forward(self.head.projection, self.features(x, probe))


def build_model(cfg: ConformerConfig, num_classes: int, head_seed: int = 0) -> Model:
    return Model(cfg, init_encoder(cfg), init_head(cfg.d_model, num_classes, head_seed))


# synthetic tasks ----------------------------------------------------------

@dataclass
class Split:
    inputs: np.ndarray  # [N, T, d]
    labels: np.ndarray  # [N, T]

    @property
    def frames(self) -> int:
        return self.labels.size


@dataclass
class SyntheticTask:
    """Frame classification labelled by a fixed random one-block conformer.

    Inputs are i.i.d. Gaussian frames. The teacher's per-class logit offsets
    are calibrated on a held-out sample so every class is roughly equally
    frequent.
    """

    seed: int
    num_classes: int = 4
    seq_len: int = 16
    d_model: int = 32
    train_sequences: int = 256
    eval_sequences: int = 128
    heads: int = 4
    conv_kernel: int = 7
    ffn_expansion: int = 4
    teacher_gain: float = 2.0
    name: str = ""
    teacher: Model = field(init=False, repr=False)
    train: Split = field(init=False, repr=False)
    eval: Split = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.name:
            self.name = f"task{self.seed}"
        root = np.random.SeedSequence(self.seed)
        teacher_ss, calib_ss, train_ss, eval_ss = root.spawn(4)
        tcfg = ConformerConfig(
            num_blocks=1,
            d_model=self.d_model,
            heads=self.heads,
            conv_kernel=self.conv_kernel,
            ffn_expansion=self.ffn_expansion,
            seed=int(teacher_ss.generate_state(1)[0]),
        )
        rng = np.random.default_rng(teacher_ss)
        proj = LinearParams(
            Tensor(self.teacher_gain * rng.standard_normal((self.d_model, self.num_classes))),
            Tensor(np.zeros(self.num_classes)),
        )
        self.teacher = Model(tcfg, init_encoder(tcfg), HeadParams(proj))
        self._calibrate(np.random.default_rng(calib_ss))
        self.train = self._sample(np.random.default_rng(train_ss), self.train_sequences)
        self.eval = self._sample(np.random.default_rng(eval_ss), self.eval_sequences)

    def _inputs(self, rng, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.seq_len, self.d_model))

    def _calibrate(self, rng, iters: int = 100) -> None:
        with ad.no_grad():
            logits = self.teacher.forward(self._inputs(rng, 256)).data.reshape(-1, self.num_classes)
        bias = np.zeros(self.num_classes)
        for _ in range(iters):
            freq = np.bincount(np.argmax(logits + bias, axis=1), minlength=self.num_classes) / len(logits)
            bias -= 0.5 * np.log(np.maximum(freq, 1e-3) * self.num_classes)
        self.teacher.head.projection.bias.data[:] = bias

    def label(self, inputs: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return np.argmax(self.teacher.forward(inputs).data, axis=-1)

    def _sample(self, rng, n: int) -> Split:
        x = self._inputs(rng, n)
        return Split(x, self.label(x))

    def split(self, name: str) -> Split:
        if name not in ("train", "eval"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


# partition and optimiser -------------------------------------------------------

@dataclass
class ParamPartition:
    frozen: set[str]
    trainable: set[str]

    def __post_init__(self):
        overlap = self.frozen & self.trainable
        if overlap:
            raise IntegrityError(f"parameters both frozen and trainable: {sorted(overlap)}")


def make_partition(model: Model, mode: Mode | str) -> ParamPartition:
    mode = Mode(mode)
    names = model.named_parameters()
    if any(not n for n in names):
        raise IntegrityError("model contains an unnamed parameter")
    frozen, trainable = set(), set()
    for n in names:
        if mode is Mode.FULL_FINETUNE:
            trainable.add(n)
        elif n.startswith("head."):
            trainable.add(n)
        elif n.startswith("adapters.") and mode is Mode.ADAPTER:
            trainable.add(n)
        else:
            frozen.add(n)
    return ParamPartition(frozen, trainable)


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0 or not 0 < beta1 < 1 or not 0 < beta2 < 1 or eps <= 0:
            raise ConfigError(f"invalid Adam hyperparameters lr={lr} beta1={beta1} beta2={beta2} eps={eps}")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: Mode = Mode.ADAPTER
    seed: int = 0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError(f"invalid train config: {self}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1 or self.eps <= 0:
            raise ConfigError(f"invalid Adam settings in train config: {self}")

    def optimizer(self) -> Adam:
        return Adam(self.lr, self.beta1, self.beta2, self.eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


def _prepare(model: Model, partition: ParamPartition) -> dict[str, Tensor]:
    params = model.named_parameters()
    missing = (partition.frozen | partition.trainable) ^ set(params)
    if missing:
        raise IntegrityError(f"partition does not match model parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        p.requires_grad = name in partition.trainable
        p.grad = None
    return {n: params[n] for n in sorted(partition.trainable)}


def _update(model: Model, batch: Split, opt: Adam, step: int, trainable: dict[str, Tensor]) -> tuple[float, float]:
    logits = model.forward(batch.inputs)
    loss = ad.cross_entropy(logits, batch.labels)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at step {step}")
    loss.backward()
    opt.step(trainable)
    for p in trainable.values():
        p.grad = None
    return value, float(np.mean(np.argmax(logits.data, axis=-1) == batch.labels))


def train_step(model: Model, partition: ParamPartition, batch: Split, opt: Adam, step: int = 0,
               trainable: dict[str, Tensor] | None = None) -> float:
    """One Adam update of the trainable set on mean per-frame cross-entropy."""
    if trainable is None:
        trainable = _prepare(model, partition)
    return _update(model, batch, opt, step, trainable)[0]


def evaluate(model: Model, task: SyntheticTask, split: str = "eval") -> tuple[float, float]:
    data = task.split(split)
    with ad.no_grad():
        logits = model.forward(data.inputs)
    loss = float(ad.cross_entropy(logits, data.labels).data)
    acc = float(np.mean(np.argmax(logits.data, axis=-1) == data.labels))
    return loss, acc


@dataclass
class CurvePoint:
    step: int
    loss: float
    accuracy: float
    mode: str


def train(model: Model, task: SyntheticTask, cfg: TrainConfig, eval_every: int = 0) -> list[CurvePoint]:
    """Run ``cfg.steps`` Adam steps; returns the loss curve.

    The curve holds the training-batch loss and accuracy of every step plus, when
    ``eval_every`` is set, the eval-split metrics at that cadence (``mode``
    suffixed with ``/eval``).
    """
    partition = make_partition(model, cfg.mode)
    trainable = _prepare(model, partition)
    opt = cfg.optimizer()
    rng = np.random.default_rng(cfg.seed)
    n = task.train.inputs.shape[0]
    curve: list[CurvePoint] = []
    for step in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = Split(task.train.inputs[idx], task.train.labels[idx])
        loss, acc = _update(model, batch, opt, step, trainable)
        curve.append(CurvePoint(step, loss, acc, cfg.mode.value))
        if eval_every and (step + 1) % eval_every == 0:
            el, ea = evaluate(model, task)
            curve.append(CurvePoint(step + 1, el, ea, f"{cfg.mode.value}/eval"))
    for p in model.named_parameters().values():
        p.requires_grad = False
    return curve


def write_curve(curve: Iterable[CurvePoint], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "accuracy", "mode"])
        for pt in curve:
            w.writerow([pt.step, repr(pt.loss), repr(pt.accuracy), pt.mode])


# the pretrain -> adapt protocol ------------------------------------------------

def clone_encoder(blocks: list[BlockParams]) -> list[BlockParams]:
    return copy.deepcopy(blocks)


def attach(model_cfg: ConformerConfig, encoder: list[BlockParams], num_classes: int,
           spec: AdapterSpec | None, seed: int) -> Model:
    """Fresh head (and adapters, when ``spec`` has sites) on a copy of ``encoder``."""
    adapters = None
    if spec is not None and spec.placement is not Placement.NONE:
        adapters = build_adapter_set(spec, model_cfg, seed)
    head = init_head(model_cfg.d_model, num_classes, seed + 1)
    return Model(model_cfg, clone_encoder(encoder), head, adapters)


@dataclass
class RunResult:
    system: str
    width: int
    trainable_fraction: float
    eval_loss: float
    eval_accuracy: float
    seed: int = 0
    curve: list[CurvePoint] = field(default_factory=list, repr=False)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("curve")
        return d


def system_name(mode: Mode, spec: AdapterSpec | None) -> str:
    if mode is Mode.FULL_FINETUNE:
        return "finetune"
    if mode is Mode.HEAD_ONLY or spec is None or spec.placement is Placement.NONE:
        return "head-only"
    return f"{spec.placement.value}({spec.width})" + ("+ln" if spec.use_layer_norm else "")


def finetune(encoder_cfg: ConformerConfig, encoder: list[BlockParams], task: SyntheticTask,
             mode: Mode | str, spec: AdapterSpec | None, train_cfg: TrainConfig) -> tuple[Model, RunResult]:
    """Train one system on ``task`` starting from a copy of ``encoder``."""
    mode = Mode(mode)
    if mode is not Mode.ADAPTER:
        spec = None
    model = attach(encoder_cfg, encoder, task.num_classes, spec, train_cfg.seed)
    cfg = TrainConfig(**{**train_cfg.to_dict(), "mode": mode})
    curve = train(model, task, cfg)
    partition = make_partition(model, mode)
    params = model.named_parameters()
    n_train = sum(params[n].data.size for n in partition.trainable)
    n_total = sum(p.data.size for p in params.values())
    loss, acc = evaluate(model, task)
    result = RunResult(system_name(mode, spec), spec.width if spec else 0, n_train / n_total,
                       loss, acc, train_cfg.seed, curve)
    return model, result


@dataclass
class ProtocolConfig:
    encoder: ConformerConfig = field(default_factory=ConformerConfig)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(steps=600, lr=2e-3, mode=Mode.FULL_FINETUNE))
    adapt: TrainConfig = field(default_factory=lambda: TrainConfig(steps=400, lr=2e-3))
    task_a_seed: int = 1
    task_b_seed: int = 2
    num_classes: int = 4
    seq_len: int = 16
    train_sequences: int = 4096
    eval_sequences: int = 256

    def task(self, seed: int, name: str) -> SyntheticTask:
        e = self.encoder
        return SyntheticTask(seed, self.num_classes, self.seq_len, e.d_model, self.train_sequences,
                             self.eval_sequences, e.heads, e.conv_kernel, e.ffn_expansion, name=name)


def pretrain(cfg: ProtocolConfig, task: SyntheticTask | None = None) -> tuple[Model, RunResult]:
    task = task or cfg.task(cfg.task_a_seed, "A")
    model = build_model(cfg.encoder, task.num_classes, head_seed=cfg.pretrain.seed + 1)
    pcfg = TrainConfig(**{**cfg.pretrain.to_dict(), "mode": Mode.FULL_FINETUNE})
    curve = train(model, task, pcfg)
    loss, acc = evaluate(model, task)
    return model, RunResult("pretrain", 0, 1.0, loss, acc, pcfg.seed, curve)


def pretrain_then_adapt(cfg: ProtocolConfig) -> dict:
    """Pretrain on task A, then compare adapter / head-only / full finetuning on task B."""
    task_a = cfg.task(cfg.task_a_seed, "A")
    task_b = cfg.task(cfg.task_b_seed, "B")
    base, pre = pretrain(cfg, task_a)
    a_metrics = evaluate(base, task_a)
    logger.info("pretrain on A: loss %.4f acc %.4f", *a_metrics)

    adapted, adapter_run = finetune(cfg.encoder, base.encoder, task_b, Mode.ADAPTER, cfg.adapter, cfg.adapt)
    _, head_run = finetune(cfg.encoder, base.encoder, task_b, Mode.HEAD_ONLY, None, cfg.adapt)
    _, full_run = finetune(cfg.encoder, base.encoder, task_b, Mode.FULL_FINETUNE, None, cfg.adapt)

    # forgetting probe: the adapted model's frozen encoder with the A head restored
    probe = Model(cfg.encoder, adapted.encoder, base.head, None)
    restored = evaluate(probe, task_a)
    return {
        "pretrain": pre,
        "adapter": adapter_run,
        "head_only": head_run,
        "full": full_run,
        "task_a_metrics": a_metrics,
        "task_a_restored": restored,
    }
