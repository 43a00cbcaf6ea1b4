"""Conformer encoder built from half-step FFN / attention / conv / half-step FFN blocks."""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .adapters import AdapterParams, AdapterSet, apply_parallel, apply_serial
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .layers import (
    ConvModuleParams,
    FFNParams,
    LayerNormParams,
    MHSAParams,
    Probe,
    conv_forward,
    ffn_forward,
    init_conv,
    init_ffn,
    init_layernorm,
    init_mhsa,
    layernorm_forward,
    mhsa_forward,
    named_parameters,
)
from .sites import Site

FFN_COEF = 0.5
CONV_COEF = 1.0

# (block_index, tag, pre-activation array)
EncoderProbe = Optional[Callable[[int, str, np.ndarray], None]]


@dataclass(frozen=True)
class ConformerConfig:
    num_blocks: int = 4
    d_model: int = 32
    heads: int = 4
    conv_kernel: int = 7
    ffn_expansion: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("num_blocks", "d_model", "heads", "conv_kernel", "ffn_expansion"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < (0 if name == "num_blocks" else 1):
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide d_model={self.d_model}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ConformerConfig":
        return cls(**d)


@dataclass
class BlockParams:
    ffn1: FFNParams
    mhsa: MHSAParams
    conv: ConvModuleParams
    ffn2: FFNParams
    final_norm: LayerNormParams


def init_block(rng: np.random.Generator, cfg: ConformerConfig) -> BlockParams:
    d = cfg.d_model
    return BlockParams(
        ffn1=init_ffn(rng, d, cfg.ffn_expansion),
        mhsa=init_mhsa(rng, d, cfg.heads),
        conv=init_conv(rng, d, cfg.conv_kernel),
        ffn2=init_ffn(rng, d, cfg.ffn_expansion),
        final_norm=init_layernorm(d),
    )


def init_encoder(cfg: ConformerConfig) -> list[BlockParams]:
    rng = np.random.default_rng(cfg.seed)
    return [init_block(rng, cfg) for _ in range(cfg.num_blocks)]


def encoder_param_count(cfg: ConformerConfig) -> int:
    d, e, k = cfg.d_model, cfg.ffn_expansion, cfg.conv_kernel
    ln = 2 * d
    ffn = ln + (d * e * d + e * d) + (e * d * d + d)
    mhsa = ln + 4 * (d * d + d)
    conv = ln + (d * 2 * d + 2 * d) + k * d + ln + (d * d + d)
    return cfg.num_blocks * (2 * ffn + mhsa + conv + ln)


def block_forward(
    p: BlockParams,
    x: Tensor,
    hooks: dict[Site, AdapterParams] | None = None,
    probe: Probe = None,
) -> Tensor:
    d = p.final_norm.gamma.shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"block: expected width {d}, got input shape {x.shape}")
    hooks = hooks or {}

    def tag(site: Site) -> str:
        return f"adapter.{site.value}"

    ffn1 = functools.partial(ffn_forward, p.ffn1, probe=probe, tag="ffn.ffn1")
    ffn2 = functools.partial(ffn_forward, p.ffn2, probe=probe, tag="ffn.ffn2")
    conv = functools.partial(conv_forward, p.conv)

    y = apply_parallel(x, FFN_COEF, ffn1, hooks.get(Site.FFN1), probe, tag(Site.FFN1))
    y = y + mhsa_forward(p.mhsa, y)
    y = apply_parallel(y, CONV_COEF, conv, hooks.get(Site.CONV), probe, tag(Site.CONV))
    y = apply_parallel(y, FFN_COEF, ffn2, hooks.get(Site.FFN2), probe, tag(Site.FFN2))
    out = layernorm_forward(p.final_norm, y)
    if Site.AFTER_BLOCK in hooks:
        out = apply_serial(out, hooks[Site.AFTER_BLOCK], probe, tag(Site.AFTER_BLOCK))
    return out


def encoder_forward(
    blocks: Sequence[BlockParams],
    x: Tensor,
    adapters: AdapterSet | None = None,
    probe: EncoderProbe = None,
) -> Tensor:
    if adapters is not None and adapters.blocks and len(adapters.blocks) != len(blocks):
        raise ConfigError(f"adapter set covers {len(adapters.blocks)} blocks, encoder has {len(blocks)}")
    for i, block in enumerate(blocks):
        hooks = adapters.for_block(i) if adapters is not None else None
        block_probe = functools.partial(probe, i) if probe is not None else None
        x = block_forward(block, x, hooks, block_probe)
    return x


def encoder_tensors(blocks: Sequence[BlockParams], prefix: str = "encoder"):
    return named_parameters(list(blocks), prefix)
