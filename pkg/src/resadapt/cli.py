"""Command line entry point: ``resadapt <command> ...``.

Exit codes: 0 success, 2 configuration/usage, 3 I/O or archive format,
4 numeric (including failed gradient checks), 5 encoder/pack compatibility.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path


from . import finetune as ft
from . import persistence as io
from . import reports, stats
from .adapters import AdapterSpec, Placement
from .config import RunConfig, default_config, load_config
from .errors import CompatibilityError, ConfigError, NumericError, ResAdaptError
from .gradchecks import run_gradchecks
from .plotting import plot_activation

logger = logging.getLogger("resadapt")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_COMPAT = 0, 2, 3, 4, 5


def _config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else default_config()


def _guard_outputs(inputs, outputs) -> None:
    ins = {Path(p).resolve() for p in inputs if p}
    for out in outputs:
        if out and Path(out).resolve() in ins:
            raise ConfigError(f"refusing to overwrite input file {out}")


def _task(rc: RunConfig, enc_cfg, seed: int, name: str = "") -> ft.SyntheticTask:
    proto = replace(rc.protocol, encoder=enc_cfg)
    return proto.task(seed, name or f"task{seed}")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--data expects comma-separated integer task seeds, got {text!r}") from None


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# commands -----------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    rc = _config(args)
    proto = rc.protocol
    if args.steps is not None:
        proto = replace(proto, pretrain=replace(proto.pretrain, steps=args.steps))
    t0 = time.perf_counter()
    model, result = ft.pretrain(proto)
    io.save_encoder(model, args.out, dtype=args.dtype)
    if args.head_out:
        enc = io.load_encoder(args.out)
        io.save_adapter_pack(model, args.head_out, task="A", mode=ft.Mode.HEAD_ONLY, base_fingerprint=enc.fingerprint)
    if args.curve:
        ft.write_curve(result.curve, args.curve)
    _emit({"command": "pretrain", "eval_loss": result.eval_loss, "eval_accuracy": result.eval_accuracy,
           "steps": proto.pretrain.steps, "seconds": round(time.perf_counter() - t0, 2), "out": str(args.out)})
    return EXIT_OK


def cmd_finetune(args) -> int:
    rc = _config(args)
    _guard_outputs([args.encoder, args.config], [args.out, args.curve])
    enc = io.load_encoder(args.encoder)
    mode = ft.Mode(args.mode)
    spec = rc.protocol.adapter
    spec = AdapterSpec(
        Placement(args.adapter) if args.adapter else spec.placement,
        args.width if args.width is not None else spec.width,
        args.layernorm or spec.use_layer_norm,
        spec.activation,
        spec.bias_init,
    )
    train_cfg = rc.protocol.adapt
    if args.steps is not None:
        train_cfg = replace(train_cfg, steps=args.steps)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    seed = rc.protocol.task_b_seed if args.task_seed is None else args.task_seed
    task = _task(rc, enc.config, seed, "B")
    model, result = ft.finetune(enc.config, enc.blocks, task, mode, spec, train_cfg)
    nbytes = io.save_adapter_pack(model, args.out, task=task.name, mode=mode, base_fingerprint=enc.fingerprint)
    if args.curve:
        ft.write_curve(result.curve, args.curve)
    row = {**result.row(),
           "placement": spec.placement.value if mode is ft.Mode.ADAPTER else Placement.NONE.value,
           "mode": mode.value, "pack_bytes": nbytes, "task": seed}
    reports.append_comparison_row(args.runs, row)
    _emit({"command": "finetune", **row, "out": str(args.out)})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rc = _config(args)
    enc = io.load_encoder(args.encoder)
    model = io.load_adapter_pack(args.pack, enc)
    seed = rc.protocol.task_b_seed if args.data is None else int(args.data)
    task = _task(rc, enc.config, seed)
    loss, acc = ft.evaluate(model, task, args.split)
    _emit({"command": "evaluate", "loss": loss, "accuracy": acc, "split": args.split, "task": seed,
           "frames": task.split(args.split).frames})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rc = _config(args)
    t0 = time.perf_counter()
    results = run_gradchecks(rc.gradcheck, tol=args.tol, step=args.step)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<22} max_rel_error={r.report.max_rel_error:.3e} tol={r.report.tol:.0e}"
              f" ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


def _neuron_path(out: Path) -> Path:
    return out.with_name(out.stem + ".neurons.csv")


def cmd_stats(args) -> int:
    rc = _config(args)
    out = Path(args.out)
    _guard_outputs([args.encoder, args.pack, args.config], [out, _neuron_path(out)])
    enc = io.load_encoder(args.encoder)
    pack = io.read_pack(args.pack)
    model = io.attach_pack(enc, pack, str(args.pack))
    sites = stats.available_sites(model, include_ffn=args.include_ffn)
    if not sites:
        raise ConfigError(f"{args.pack}: pack has no adapter neurons to measure (use --include-ffn)")
    per_task = []
    for seed in _seeds(args.data):
        task = _task(rc, enc.config, seed)
        per_task.append(stats.collect_stats(model, task.split(args.split).inputs, sites))
    merged = per_task[0]
    for extra in per_task[1:]:
        merged = stats.merge_stats(merged, extra)
    rows = stats.activation_report(merged, per_task, cutoff=args.cutoff)
    out.parent.mkdir(parents=True, exist_ok=True)
    stats.write_rows(rows, out, stats.REPORT_COLUMNS)
    ident = {"encoder_fingerprint": enc.fingerprint, "pack_digest": pack.digest}
    stats.write_rows(stats.neuron_rows(merged, **ident), _neuron_path(out), [*stats.NEURON_COLUMNS, *ident])
    plot_activation(rows, out.with_suffix(".png"))
    for r in rows:
        print(f"block {r['block_index']} {r['site']:<18} {r['neurons_active']}/{r['neurons_total']} active"
              f" ({r['scope']})")
    return EXIT_OK


def cmd_prune(args) -> int:
    src = Path(args.stats)
    neuron_file = src if src.name.endswith(".neurons.csv") else _neuron_path(src)
    _guard_outputs([args.input, args.stats, neuron_file], [args.out])
    pack = io.read_pack(args.input)
    st, rows = stats.read_neuron_stats(neuron_file)
    digests = {r.get("pack_digest") for r in rows}
    fingerprints = {r.get("encoder_fingerprint") for r in rows}
    if digests != {pack.digest} or fingerprints != {pack.fingerprint}:
        raise CompatibilityError(f"{neuron_file}: statistics were collected for a different pack or encoder")
    adapter_stats = {s: v for s, v in st.items() if s.kind == "adapter"}
    if not adapter_stats:
        raise ConfigError(f"{neuron_file}: no adapter statistics to prune with")
    adapters = io.pack_adapters(pack, str(args.input))
    if adapters is None:
        raise ConfigError(f"{args.input}: pack has no adapters to prune")
    pruned, summary = stats.prune_adapter_set(adapters, adapter_stats, args.threshold, args.allow_empty)
    out = io.with_adapters(pack, pruned, pruned={"threshold": args.threshold, "source_digest": pack.digest})
    io.write_pack(out, args.out)
    kept = total = 0
    for s in summary:
        print(f"block {s.site.block_index} {s.site.tag:<18} kept {s.kept}/{s.total}")
        kept, total = kept + s.kept, total + s.total
    print(f"kept {kept}/{total} adapter neurons")
    return EXIT_OK


def cmd_report(args) -> int:
    rc = _config(args)
    rows = reports.read_comparison(args.runs)
    rep = reports.build_report(rows, rc.report.widths)
    paths = reports.write_report(rep, args.out)
    for s in rep["systems"]:
        print(f"{s['system']:<16} runs={s['runs']} trainable={100 * s['trainable_fraction']:.2f}%"
              f" loss={s['median_eval_loss']:.4f} acc={s['median_eval_accuracy']:.4f}")
    print(f"width sweep monotone (band {rep['seed_noise_band']:.4f}): {rep['width_monotone']}")
    for p in paths.values():
        print(f"wrote {p}")
    return EXIT_OK


# parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="resadapt", description="Residual adapters for frozen conformer encoders.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("pretrain", help="train encoder + head on task A and write the encoder archive")
    c.add_argument("--config")
    c.add_argument("--out", required=True)
    c.add_argument("--steps", type=int)
    c.add_argument("--head-out", help="also write task A's head as a head-only pack")
    c.add_argument("--curve", help="write the training curve CSV here")
    c.add_argument("--dtype", choices=["f64", "f32"], default="f64")
    c.set_defaults(func=cmd_pretrain)

    c = sub.add_parser("finetune", help="adapt a frozen encoder to task B and write a pack")
    c.add_argument("--config")
    c.add_argument("--encoder", required=True)
    c.add_argument("--adapter", choices=[pl.value for pl in Placement if pl is not Placement.NONE])
    c.add_argument("--width", type=int)
    c.add_argument("--layernorm", action="store_true")
    c.add_argument("--mode", choices=[m.value for m in ft.Mode], default="adapter")
    c.add_argument("--out", required=True)
    c.add_argument("--runs", default="runs", help="directory holding comparison.csv")
    c.add_argument("--seed", type=int)
    c.add_argument("--steps", type=int)
    c.add_argument("--task-seed", type=int)
    c.add_argument("--curve")
    c.set_defaults(func=cmd_finetune)

    c = sub.add_parser("evaluate", help="evaluate encoder + pack on a task split")
    c.add_argument("--config")
    c.add_argument("--encoder", required=True)
    c.add_argument("--pack", required=True)
    c.add_argument("--data", help="task seed (default: task B)")
    c.add_argument("--split", choices=["train", "eval"], default="eval")
    c.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op, layer and placement")
    c.add_argument("--config")
    c.add_argument("--tol", type=float)
    c.add_argument("--step", type=float)
    c.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("stats", help="collect adapter activation statistics")
    c.add_argument("--config")
    c.add_argument("--encoder", required=True)
    c.add_argument("--pack", required=True)
    c.add_argument("--data", required=True, help="comma-separated task seeds")
    c.add_argument("--split", choices=["train", "eval"], default="train")
    c.add_argument("--out", required=True)
    c.add_argument("--include-ffn", action="store_true", help="also measure the frozen FFN inner layers")
    c.add_argument("--cutoff", type=float, default=0.0, help="rate above which a neuron counts as active")
    c.set_defaults(func=cmd_stats)

    c = sub.add_parser("prune", help="drop adapter neurons whose activation rate is <= threshold")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--stats", required=True)
    c.add_argument("--threshold", type=float, default=0.0)
    c.add_argument("--out", required=True)
    c.add_argument("--allow-empty", action="store_true", help="collapse fully pruned adapters to x + b_2")
    c.set_defaults(func=cmd_prune)

    c = sub.add_parser("report", help="aggregate finetune runs into tables and figures")
    c.add_argument("--config")
    c.add_argument("--runs", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ResAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
