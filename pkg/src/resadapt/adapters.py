"""Residual adapters and where they attach inside a conformer block.

A residual adapter is ``x + up(relu(down(g(x))))`` with ``g`` either a layer
norm or the identity. Placements:

* ``SERIAL``: applied to each block's output.
* ``PARALLEL_FFN1``: a parallel branch beside the first half-step FFN.
* ``TPA``: one parallel branch beside each of the two FFNs.
* ``PARALLEL_CONV``: a parallel branch beside the whole conv module.
* ``NONE``: no adapters (head-only finetuning).

A parallel site computes ``x + c * F(x) + (adapter(x) - x)``. The adapter's
own skip connection and the subtracted ``x`` cancel algebraically, so the
implementation adds the residual-free branch directly; this keeps the
identity-at-init property bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DegenerateAdapterError, DimensionError
from .layers import (
    LayerNormParams,
    LinearParams,
    Probe,
    init_layernorm,
    layernorm_forward,
    linear_forward,
    named_parameters,
    num_parameters,
)
from .sites import Site


class Placement(str, Enum):
    SERIAL = "serial"
    PARALLEL_FFN1 = "parallel"
    TPA = "tpa"
    PARALLEL_CONV = "conv"
    NONE = "none"

    def __str__(self) -> str:
        return self.value

    @property
    def sites(self) -> tuple[Site, ...]:
        return _PLACEMENT_SITES[self]


_PLACEMENT_SITES = {
    Placement.SERIAL: (Site.AFTER_BLOCK,),
    Placement.PARALLEL_FFN1: (Site.FFN1,),
    Placement.TPA: (Site.FFN1, Site.FFN2),
    Placement.PARALLEL_CONV: (Site.CONV,),
    Placement.NONE: (),
}


@dataclass(frozen=True)
class AdapterSpec:
    placement: Placement = Placement.TPA
    width: int = 8
    use_layer_norm: bool = False
    activation: str = "relu"
    bias_init: str = "xavier"

    def __post_init__(self):
        object.__setattr__(self, "placement", Placement(self.placement))
        if self.placement is not Placement.NONE and self.width < 1:
            raise ConfigError(f"adapter width must be >= 1, got {self.width}")
        if self.activation != "relu":
            raise ConfigError(f"only relu adapters are supported, got {self.activation!r}")
        if self.bias_init not in ("xavier", "zero"):
            raise ConfigError(f"bias_init must be 'xavier' or 'zero', got {self.bias_init!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["placement"] = self.placement.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterSpec":
        return cls(**d)


@dataclass
class AdapterParams:
    """One adapter. ``down`` holds W_1/b_1 and ``up`` holds W_2/b_2.

    A fully pruned adapter keeps only its output bias in ``offset`` and
    reduces to ``x + b_2``.
    """

    down: LinearParams | None
    up: LinearParams | None
    norm: LayerNormParams | None = None
    offset: Tensor | None = None

    @property
    def collapsed(self) -> bool:
        return self.down is None

    @property
    def width(self) -> int:
        return 0 if self.down is None else self.down.out_features

    @property
    def d_model(self) -> int:
        return self.offset.shape[0] if self.down is None else self.down.in_features

    @property
    def output_bias(self) -> Tensor:
        return self.offset if self.down is None else self.up.bias


@dataclass
class AdapterSet:
    spec: AdapterSpec
    blocks: list[dict[Site, AdapterParams]] = field(default_factory=list)

    def __post_init__(self):
        want = set(self.spec.placement.sites)
        for i, sites in enumerate(self.blocks):
            if set(sites) != want:
                raise ConfigError(
                    f"block {i}: adapter sites {sorted(map(str, sites))} do not match "
                    f"placement {self.spec.placement.value} ({sorted(map(str, want))})"
                )

    def for_block(self, i: int) -> dict[Site, AdapterParams]:
        return self.blocks[i] if i < len(self.blocks) else {}

    def items(self):
        for i, sites in enumerate(self.blocks):
            for site, p in sites.items():
                yield i, site, p


# forward --------------------------------------------------------------------

def adapter_branch(p: AdapterParams, x: Tensor, probe: Probe = None, tag: str = "adapter") -> Tensor:
    """Residual-free adapter output ``up(relu(down(g(x))))``."""
    if x.shape[-1] != p.d_model:
        raise DimensionError(f"adapter: expected width {p.d_model}, got input shape {x.shape}")
    if p.collapsed:
        return ad.add(Tensor(np.zeros(x.shape)), p.offset)
    h = layernorm_forward(p.norm, x) if p.norm is not None else x
    pre = linear_forward(p.down, h)
    if probe is not None:
        probe(tag, pre.data)
    return linear_forward(p.up, ad.relu(pre))


def adapter_forward(p: AdapterParams, x: Tensor, probe: Probe = None, tag: str = "adapter") -> Tensor:
    return x + adapter_branch(p, x, probe, tag)


def apply_serial(block_out: Tensor, p: AdapterParams, probe: Probe = None, tag: str = "adapter") -> Tensor:
    # the adapter's own skip connection already carries block_out through
    return adapter_forward(p, block_out, probe, tag)


def apply_parallel(
    x: Tensor,
    c: float,
    F: Callable[[Tensor], Tensor],
    p: AdapterParams | None,
    probe: Probe = None,
    tag: str = "adapter",
) -> Tensor:
    """Sum of the input, the scaled main branch and the adapter branch.

    With ``p`` None this is the plain residual ``x + c * F(x)``.
    """
    out = x + ad.scale(F(x), c)
    if p is None:
        return out
    return out + adapter_branch(p, x, probe, tag)


# construction --------------------------------------------------------------

def _bias_bound(n: int) -> float:
    # a length-n bias treated as fan_in=n, fan_out=1
    return math.sqrt(6.0 / (n + 1))


def init_adapter(rng: np.random.Generator, d: int, spec: AdapterSpec) -> AdapterParams:
    w = spec.width
    w1 = rng.uniform(-math.sqrt(6.0 / (d + w)), math.sqrt(6.0 / (d + w)), size=(d, w))
    b1 = rng.uniform(-_bias_bound(w), _bias_bound(w), size=w)
    b2 = rng.uniform(-_bias_bound(d), _bias_bound(d), size=d)
    if spec.bias_init == "zero":
        b2 = np.zeros(d)
    return AdapterParams(
        down=LinearParams(Tensor(w1), Tensor(b1)),
        up=LinearParams(Tensor(np.zeros((w, d))), Tensor(b2)),
        norm=init_layernorm(d) if spec.use_layer_norm else None,
    )


def build_adapter_set(spec: AdapterSpec, cfg, seed: int) -> AdapterSet:
    """One freshly initialised adapter per required site per block.

    W_2 starts at zero; W_1, b_1 and b_2 are Xavier-uniform (b_2 zero when
    ``spec.bias_init == "zero"``). Identical seeds give identical parameters.
    """
    rng = np.random.default_rng(seed)
    blocks = [
        {site: init_adapter(rng, cfg.d_model, spec) for site in spec.placement.sites}
        for _ in range(cfg.num_blocks)
    ]
    return AdapterSet(spec, blocks)


# parameter accounting ---------------------------------------------------------

def params_per_adapter(d: int, w: int, use_layer_norm: bool = False) -> int:
    return d * w + w + w * d + d + (2 * d if use_layer_norm else 0)


@dataclass(frozen=True)
class ParamCount:
    adapter: int
    encoder: int
    head: int

    @property
    def total(self) -> int:
        return self.adapter + self.encoder + self.head

    @property
    def adapter_fraction(self) -> float:
        """Adapter parameters over every parameter in the model."""
        return self.adapter / self.total

    @property
    def trainable_fraction(self) -> float:
        """Adapter plus head parameters over every parameter in the model."""
        return (self.adapter + self.head) / self.total


def count_adapter_params(spec: AdapterSpec, cfg, num_classes: int = 0) -> ParamCount:
    from .conformer import encoder_param_count

    per_block = len(spec.placement.sites) * (
        params_per_adapter(cfg.d_model, spec.width, spec.use_layer_norm) if spec.placement.sites else 0
    )
    head = cfg.d_model * num_classes + num_classes if num_classes else 0
    return ParamCount(cfg.num_blocks * per_block, encoder_param_count(cfg), head)


def adapter_set_param_count(adapters: AdapterSet) -> int:
    return num_parameters(adapters)


# pruning helpers used by resadapt.stats ------------------------------------------

def prune_adapter(p: AdapterParams, keep, allow_empty: bool = False) -> AdapterParams:
    """Drop bottleneck neurons where ``keep`` is False.

    Removes the matching entries of W_1's columns, b_1, and W_2's rows. With
    every neuron dropped the adapter collapses to ``x + b_2``, which is only
    allowed when ``allow_empty`` is set.
    """
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (p.width,):
        raise DimensionError(f"prune mask has shape {keep.shape}, adapter width is {p.width}")
    if p.collapsed:
        return p
    norm = None
    if p.norm is not None:
        norm = LayerNormParams(Tensor(p.norm.gamma.data), Tensor(p.norm.beta.data), p.norm.eps)
    if not keep.any():
        if not allow_empty:
            raise DegenerateAdapterError("pruning would remove every neuron of the adapter")
        return AdapterParams(down=None, up=None, norm=None, offset=Tensor(p.up.bias.data))
    return AdapterParams(
        down=LinearParams(Tensor(p.down.weight.data[:, keep]), Tensor(p.down.bias.data[keep])),
        up=LinearParams(Tensor(p.up.weight.data[keep, :]), Tensor(p.up.bias.data)),
        norm=norm,
    )


def iter_adapter_tensors(adapters: AdapterSet, prefix: str = "adapters"):
    for i, sites in enumerate(adapters.blocks):
        for site, p in sites.items():
            yield from named_parameters(p, f"{prefix}.{i}.{site.value}")
