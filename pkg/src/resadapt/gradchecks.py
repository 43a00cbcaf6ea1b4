"""Finite-difference checks for every op, layer and adapter placement."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from . import layers as L
from .adapters import AdapterSpec, Placement, adapter_forward, build_adapter_set
from .autodiff import GradCheckReport, Tensor
from .conformer import ConformerConfig, init_encoder
from .finetune import Model, init_head


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _weighted(out: Tensor, rng) -> Tensor:
    # a random projection avoids sums that are identically constant (e.g. softmax rows)
    return ad.sum_(ad.mul(out, Tensor(rng.standard_normal(out.shape))))


def _away_from_zero(rng, shape, margin=1e-2) -> np.ndarray:
    x = rng.standard_normal(shape)
    return x + np.where(x >= 0, margin, -margin)


def op_cases(rng) -> Iterator[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((4, 2)))
    yield "matmul", lambda: ad.sum_(ad.matmul(a, b)), {"a": a, "b": b}

    x = Tensor(rng.standard_normal((2, 3, 4)))
    y = Tensor(rng.standard_normal((2, 3, 4)))
    row = Tensor(rng.standard_normal(4))
    pos = Tensor(np.abs(rng.standard_normal((2, 3, 4))) + 0.5)
    unary = {
        "relu": lambda: ad.relu(xr),
        "sigmoid": lambda: ad.sigmoid(x),
        "swish": lambda: ad.swish(x),
        "softmax": lambda: ad.softmax(x),
        "scale": lambda: ad.scale(x, 0.5),
        "power": lambda: ad.power(pos, -0.5),
        "mean": lambda: ad.mean(x, axis=-1, keepdims=True),
        "var": lambda: ad.var(x, axis=-1, keepdims=True),
        "transpose": lambda: ad.transpose(x),
        "reshape": lambda: ad.reshape(x, (6, 4)),
        "slice": lambda: x[..., 1:3],
    }
    xr = Tensor(_away_from_zero(rng, (2, 3, 4)))
    for name, fn in unary.items():
        leaf = {"relu": xr, "power": pos}.get(name, x)
        yield name, (lambda fn=fn: _weighted(fn(), np.random.default_rng(7))), {"x": leaf}
    binary = {
        "add": lambda: ad.add(x, row),
        "sub": lambda: ad.sub(x, y),
        "mul": lambda: ad.mul(x, y),
        "concat": lambda: ad.concat([x, y], axis=-1),
    }
    for name, fn in binary.items():
        params = {"x": x, "row": row} if name == "add" else {"x": x, "y": y}
        yield name, (lambda fn=fn: _weighted(fn(), np.random.default_rng(7))), params

    k = Tensor(rng.standard_normal((3, 4)))
    yield "depthwise_conv1d", lambda: _weighted(ad.depthwise_conv1d(x, k), np.random.default_rng(7)), {"x": x, "k": k}
    labels = rng.integers(0, 4, size=(2, 3))
    yield "cross_entropy", lambda: ad.cross_entropy(x, labels), {"x": x}


def _randomize(obj, rng, scale=0.3) -> None:
    for _, t in L.named_parameters(obj):
        t.data[...] = t.data + scale * rng.standard_normal(t.shape)


def layer_cases(cfg, rng) -> Iterator[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    d, T = cfg.d_model, cfg.seq_len
    x = Tensor(rng.standard_normal((T, d)))
    w = np.random.default_rng(11)
    R = lambda out: _weighted(out, np.random.default_rng(11))  # noqa: E731

    lin = L.init_linear(w, d, d)
    ln = L.init_layernorm(d)
    ffn = L.init_ffn(w, d, cfg.ffn_expansion)
    mhsa = L.init_mhsa(w, d, cfg.heads)
    conv = L.init_conv(w, d, cfg.conv_kernel)
    for obj in (lin, ln, ffn, mhsa, conv):
        _randomize(obj, w)
    layers = {
        "linear": (lin, L.linear_forward),
        "layernorm": (ln, L.layernorm_forward),
        "ffn": (ffn, L.ffn_forward),
        "mhsa": (mhsa, L.mhsa_forward),
        "conv": (conv, L.conv_forward),
    }
    for name, (p, fwd) in layers.items():
        params = dict(L.named_parameters(p, name))
        params["x"] = x
        yield name, (lambda p=p, fwd=fwd: R(fwd(p, x))), params

    for use_ln in (False, True):
        spec = AdapterSpec(Placement.SERIAL, cfg.width, use_layer_norm=use_ln)
        aset = build_adapter_set(spec, ConformerConfig(1, d, cfg.heads, cfg.conv_kernel, cfg.ffn_expansion), 5)
        p = aset.blocks[0][spec.placement.sites[0]]
        _randomize(p.up, w)
        params = dict(L.named_parameters(p, "adapter"))
        params["x"] = x
        yield f"adapter{'+ln' if use_ln else ''}", (lambda p=p: R(adapter_forward(p, x))), params


def placement_cases(cfg, rng) -> Iterator[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    ccfg = ConformerConfig(cfg.num_blocks, cfg.d_model, cfg.heads, cfg.conv_kernel, cfg.ffn_expansion, cfg.seed)
    x = rng.standard_normal((cfg.seq_len, cfg.d_model))
    labels = rng.integers(0, cfg.num_classes, size=cfg.seq_len)
    for placement in (Placement.SERIAL, Placement.PARALLEL_FFN1, Placement.TPA, Placement.PARALLEL_CONV):
        adapters = build_adapter_set(AdapterSpec(placement, cfg.width), ccfg, cfg.seed + 1)
        for _, _, p in adapters.items():
            # W_2 starts at zero; give the check non-trivial paths through W_1
            _randomize(p.up, np.random.default_rng(cfg.seed + 2))
        model = Model(ccfg, init_encoder(ccfg), init_head(cfg.d_model, cfg.num_classes, cfg.seed + 3), adapters)
        params = model.named_parameters()
        yield f"model[{placement.value}]", (lambda m=model: ad.cross_entropy(m.forward(x), labels)), params


def run_gradchecks(cfg, tol: float | None = None, step: float | None = None,
                   groups=("ops", "layers", "placements")) -> list[CheckResult]:
    tol = cfg.tol if tol is None else tol
    step = cfg.step if step is None else step
    rng = np.random.default_rng(cfg.seed)
    makers = {"ops": lambda: op_cases(rng), "layers": lambda: layer_cases(cfg, rng),
              "placements": lambda: placement_cases(cfg, rng)}
    results = []
    for group in groups:
        for name, f, params in makers[group]():
            t0 = time.perf_counter()
            report = ad.grad_check(f, params, step=step, tol=tol)
            for p in params.values():
                p.requires_grad = False
                p.grad = None
            results.append(CheckResult(name, report, time.perf_counter() - t0))
    return results
