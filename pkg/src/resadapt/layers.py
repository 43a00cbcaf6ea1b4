"""Conformer sub-block layers: linear, layer norm, feed-forward, attention, conv.

Every forward maps ``[..., T, d_in]`` to ``[..., T, d_out]`` and is residual
free; residual wiring lives in :mod:`resadapt.conformer`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

# Called with (tag, pre-activation array) by layers that own a nonlinearity.
Probe = Optional[Callable[[str, np.ndarray], None]]


@dataclass
class LinearParams:
    weight: Tensor  # [in, out]
    bias: Tensor  # [out]

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-6

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"layer norm epsilon must be positive, got {self.eps}")


@dataclass
class FFNParams:
    pre_norm: LayerNormParams
    inner: LinearParams  # d -> e*d
    outer: LinearParams  # e*d -> d


@dataclass
class MHSAParams:
    pre_norm: LayerNormParams
    query: LinearParams
    key: LinearParams
    value: LinearParams
    output: LinearParams
    heads: int

    def __post_init__(self):
        d = self.query.in_features
        if self.heads < 1 or d % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide model width {d}")


@dataclass
class ConvModuleParams:
    pre_norm: LayerNormParams
    pointwise_in: LinearParams  # d -> 2d, feeds the gated linear unit
    depthwise: Tensor  # [k, d]
    post_norm: LayerNormParams
    pointwise_out: LinearParams  # d -> d

    def __post_init__(self):
        k = self.depthwise.shape[0]
        if k % 2 == 0:
            raise ConfigError(f"conv kernel size must be odd, got {k}")


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every tensor reachable from ``obj``.

    Walks dataclass fields, lists and dicts in declaration order, which is
    also the canonical order used for hashing and archiving.
    """
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, _join(prefix, str(i)))
    elif isinstance(obj, dict):
        for key, item in obj.items():
            yield from named_parameters(item, _join(prefix, str(key)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def num_parameters(obj) -> int:
    return sum(t.data.size for _, t in named_parameters(obj))


# initialisation ---------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> LinearParams:
    w = gain * xavier_uniform(rng, n_in, n_out, (n_in, n_out))
    return LinearParams(Tensor(w), Tensor(np.zeros(n_out)))


def init_layernorm(d: int, eps: float = 1e-6) -> LayerNormParams:
    return LayerNormParams(Tensor(np.ones(d)), Tensor(np.zeros(d)), eps)


def init_ffn(rng, d: int, expansion: int) -> FFNParams:
    if expansion < 1:
        raise ConfigError(f"ffn expansion must be >= 1, got {expansion}")
    return FFNParams(init_layernorm(d), init_linear(rng, d, expansion * d), init_linear(rng, expansion * d, d))


def init_mhsa(rng, d: int, heads: int) -> MHSAParams:
    return MHSAParams(
        init_layernorm(d),
        init_linear(rng, d, d),
        init_linear(rng, d, d),
        init_linear(rng, d, d),
        init_linear(rng, d, d),
        heads,
    )


def init_conv(rng, d: int, kernel: int) -> ConvModuleParams:
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"conv kernel size must be odd, got {kernel}")
    bound = 1.0 / math.sqrt(kernel)
    return ConvModuleParams(
        init_layernorm(d),
        init_linear(rng, d, 2 * d),
        Tensor(rng.uniform(-bound, bound, size=(kernel, d))),
        init_layernorm(d),
        init_linear(rng, d, d),
    )


# forwards -------------------------------------------------------------------

def _check_width(x: Tensor, d: int, what: str) -> None:
    if x.ndim < 1 or x.shape[-1] != d:
        raise DimensionError(f"{what}: expected last extent {d}, got input shape {x.shape}")


def linear_forward(p: LinearParams, x: Tensor) -> Tensor:
    _check_width(x, p.in_features, "linear")
    return ad.matmul(x, p.weight) + p.bias


def layernorm_forward(p: LayerNormParams, x: Tensor) -> Tensor:
    _check_width(x, p.gamma.shape[0], "layer norm")
    centered = x - ad.mean(x, axis=-1, keepdims=True)
    inv_std = ad.power(ad.var(x, axis=-1, keepdims=True) + p.eps, -0.5)
    return centered * inv_std * p.gamma + p.beta


def ffn_forward(p: FFNParams, x: Tensor, probe: Probe = None, tag: str = "ffn") -> Tensor:
    """``outer(swish(inner(norm(x))))``; the caller applies the 0.5 residual."""
    h = linear_forward(p.inner, layernorm_forward(p.pre_norm, x))
    if probe is not None:
        probe(tag, h.data)
    return linear_forward(p.outer, ad.swish(h))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, T, d = t.shape
    t = ad.reshape(t, (*lead, T, heads, d // heads))
    n = t.ndim
    return ad.transpose(t, (*range(n - 3), n - 2, n - 3, n - 1))


def _merge_heads(t: Tensor) -> Tensor:
    n = t.ndim
    t = ad.transpose(t, (*range(n - 3), n - 2, n - 3, n - 1))
    *lead, T, heads, dh = t.shape
    return ad.reshape(t, (*lead, T, heads * dh))


def attention_weights(p: MHSAParams, x: Tensor) -> Tensor:
    """Per-head attention matrix ``[..., heads, T, T]``."""
    n = layernorm_forward(p.pre_norm, x)
    q = _split_heads(linear_forward(p.query, n), p.heads)
    k = _split_heads(linear_forward(p.key, n), p.heads)
    dh = x.shape[-1] // p.heads
    return ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh)))


def mhsa_forward(p: MHSAParams, x: Tensor) -> Tensor:
    _check_width(x, p.query.in_features, "attention")
    n = layernorm_forward(p.pre_norm, x)
    q = _split_heads(linear_forward(p.query, n), p.heads)
    k = _split_heads(linear_forward(p.key, n), p.heads)
    v = _split_heads(linear_forward(p.value, n), p.heads)
    dh = x.shape[-1] // p.heads
    weights = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh)))
    return linear_forward(p.output, _merge_heads(ad.matmul(weights, v)))


def conv_forward(p: ConvModuleParams, x: Tensor) -> Tensor:
    d = p.depthwise.shape[1]
    _check_width(x, d, "conv module")
    h = linear_forward(p.pointwise_in, layernorm_forward(p.pre_norm, x))
    gated = h[..., :d] * ad.sigmoid(h[..., d:])
    h = ad.depthwise_conv1d(gated, p.depthwise)
    h = ad.swish(layernorm_forward(p.post_norm, h))
    return linear_forward(p.pointwise_out, h)
