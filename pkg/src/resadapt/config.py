"""YAML run configuration with strict key checking."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .adapters import AdapterSpec
from .conformer import ConformerConfig
from .errors import ConfigError
from .finetune import Mode, ProtocolConfig, TrainConfig

DEFAULT_CONFIG = """\
encoder:
  num_blocks: 4
  d_model: 32
  heads: 4
  conv_kernel: 7
  ffn_expansion: 4
  seed: 0
adapter:
  placement: tpa
  width: 8
  use_layer_norm: false
  bias_init: xavier
pretrain:
  steps: 600
  batch_size: 8
  lr: 0.002
  seed: 0
adapt:
  steps: 400
  batch_size: 8
  lr: 0.002
  seed: 0
task:
  a_seed: 1
  b_seed: 2
  num_classes: 4
  seq_len: 16
  train_sequences: 4096
  eval_sequences: 256
gradcheck:
  num_blocks: 2
  d_model: 8
  heads: 2
  conv_kernel: 3
  ffn_expansion: 2
  seq_len: 5
  width: 4
  num_classes: 3
  step: 1.0e-5
  tol: 1.0e-4
  seed: 0
report:
  widths: [2, 4, 8, 16]
"""


@dataclass
class GradcheckConfig:
    num_blocks: int = 2
    d_model: int = 8
    heads: int = 2
    conv_kernel: int = 3
    ffn_expansion: int = 2
    seq_len: int = 5
    width: int = 4
    num_classes: int = 3
    step: float = 1e-5
    tol: float = 1e-4
    seed: int = 0


@dataclass
class ReportConfig:
    widths: list[int] = field(default_factory=lambda: [2, 4, 8, 16])


@dataclass
class RunConfig:
    protocol: ProtocolConfig
    gradcheck: GradcheckConfig
    report: ReportConfig


_SECTIONS = {"encoder", "adapter", "pretrain", "adapt", "task", "gradcheck", "report"}
_TASK_KEYS = {"a_seed", "b_seed", "num_classes", "seq_len", "train_sequences", "eval_sequences"}


def _check_keys(section: str, got: dict, allowed) -> None:
    if not isinstance(got, dict):
        raise ConfigError(f"section [{section}] must be a mapping, got {type(got).__name__}")
    unknown = set(got) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def parse_config(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping of sections")
    _check_keys("top level", raw, _SECTIONS)
    enc = raw.get("encoder", {})
    _check_keys("encoder", enc, _names(ConformerConfig))
    ada = raw.get("adapter", {})
    _check_keys("adapter", ada, _names(AdapterSpec))
    train_keys = _names(TrainConfig) - {"mode"}
    pre = raw.get("pretrain", {})
    _check_keys("pretrain", pre, train_keys)
    adapt = raw.get("adapt", {})
    _check_keys("adapt", adapt, train_keys)
    task = raw.get("task", {})
    _check_keys("task", task, _TASK_KEYS)
    gc = raw.get("gradcheck", {})
    _check_keys("gradcheck", gc, _names(GradcheckConfig))
    rep = raw.get("report", {})
    _check_keys("report", rep, _names(ReportConfig))
    merged = yaml.safe_load(DEFAULT_CONFIG)
    for section, values in raw.items():
        merged[section].update(values or {})
    enc, ada, pre, adapt = merged["encoder"], merged["adapter"], merged["pretrain"], merged["adapt"]
    task, gc, rep = merged["task"], merged["gradcheck"], merged["report"]
    try:
        protocol = ProtocolConfig(
            encoder=ConformerConfig(**enc),
            adapter=AdapterSpec(**ada),
            pretrain=TrainConfig(**pre, mode=Mode.FULL_FINETUNE),
            adapt=TrainConfig(**adapt),
            task_a_seed=task["a_seed"],
            task_b_seed=task["b_seed"],
            num_classes=task["num_classes"],
            seq_len=task["seq_len"],
            train_sequences=task["train_sequences"],
            eval_sequences=task["eval_sequences"],
        )
        result = RunConfig(protocol, GradcheckConfig(**gc), ReportConfig(**rep))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration value: {exc}") from None
    if protocol.num_classes < 2:
        raise ConfigError(f"task.num_classes must be >= 2, got {protocol.num_classes}")
    return result


def default_config() -> RunConfig:
    return parse_config(yaml.safe_load(DEFAULT_CONFIG))


def load_config(path) -> RunConfig:
    """Read and validate a YAML run configuration.

    Sections omitted from the file take the desk-scale defaults.
    """
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return parse_config(raw)
