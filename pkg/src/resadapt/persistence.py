"""Single-file tensor archives for frozen encoders and per-task adapter packs.

Byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"TPA1"
    4       2     u16 format version (currently 1)
    6       4     u32 metadata length M
    10      M     metadata, UTF-8 JSON with sorted keys and no whitespace
    10+M    4     u32 tensor count N
    ...           N table entries, each:
                    u16 name length L, L bytes UTF-8 name,
                    u8 dtype code (1 = f32, 2 = f64), u8 rank R,
                    R x u32 extents, u64 byte offset into the payload
    ...           payload: tensors back to back in table order, row-major

Offsets must tile the payload exactly (no gaps, no overlap) and the file
must end where the last tensor ends. An encoder archive's fingerprint is
the SHA-256 of its configuration and float64 parameter bytes in canonical
order; packs record the fingerprint of the encoder they were trained on.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .adapters import AdapterParams, AdapterSet, AdapterSpec, Placement
from .autodiff import Tensor
from .conformer import BlockParams, ConformerConfig, encoder_tensors, init_encoder
from .errors import CompatibilityError, FormatError
from .finetune import HeadParams, Mode, Model
from .layers import LayerNormParams, LinearParams, named_parameters
from .sites import Site

MAGIC = b"TPA1"
VERSION = 1
_DTYPES = {"f32": (1, np.dtype("<f4")), "f64": (2, np.dtype("<f8"))}
_CODES = {code: (name, dt) for name, (code, dt) in _DTYPES.items()}


def _canonical_json(meta: Mapping) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_archive(tensors: Mapping[str, np.ndarray], metadata: Mapping, dtype: str = "f64") -> bytes:
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}; expected one of {sorted(_DTYPES)}")
    code, dt = _DTYPES[dtype]
    meta = _canonical_json(metadata)
    table = bytearray()
    payload = bytearray()
    names = set()
    for name, arr in tensors.items():
        if name in names:
            raise FormatError(f"duplicate tensor name {name!r}")
        names.add(name)
        arr = np.asarray(arr)
        if arr.ndim == 0 or 0 in arr.shape:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}; extents must be positive")
        raw = name.encode("utf-8")
        table += struct.pack("<H", len(raw)) + raw
        table += struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", len(payload))
        payload += np.ascontiguousarray(arr, dtype=dt).tobytes()
    head = MAGIC + struct.pack("<HI", VERSION, len(meta)) + meta + struct.pack("<I", len(tensors))
    return bytes(head + table + payload)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.source}: truncated at offset {self.pos} reading {what} ({n} bytes needed, "
                              f"{len(self.buf) - self.pos} left)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


@dataclass
class Archive:
    metadata: dict
    tensors: dict[str, np.ndarray]
    dtype: str


def decode_archive(buf: bytes, source: str = "<bytes>") -> Archive:
    r = _Reader(buf, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at offset 0")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported format version {version} at offset 4")
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_at = r.pos
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable metadata at offset {meta_at}: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    entries = []
    dtypes = set()
    for _ in range(count):
        entry_at = r.pos
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "tensor name").decode("utf-8", errors="strict")
        code, rank = r.unpack("<BB", "dtype and rank")
        if code not in _CODES:
            raise FormatError(f"{source}: unknown dtype code {code} for {name!r} at offset {entry_at}")
        shape = r.unpack(f"<{rank}I", "extents") if rank else ()
        (offset,) = r.unpack("<Q", "payload offset")
        if rank == 0 or 0 in shape:
            raise FormatError(f"{source}: tensor {name!r} at offset {entry_at} has invalid shape {shape}")
        entries.append((name, _CODES[code], tuple(shape), offset, entry_at))
        dtypes.add(_CODES[code][0])
    base = r.pos
    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for name, (_, dt), shape, offset, entry_at in entries:
        if name in tensors:
            raise FormatError(f"{source}: duplicate tensor name {name!r} at offset {entry_at}")
        if offset != expected:
            raise FormatError(f"{source}: tensor {name!r} declares payload offset {offset}, expected {expected} "
                              f"(file offset {base + offset})")
        nbytes = int(np.prod(shape)) * dt.itemsize
        r.pos = base + offset
        raw = r.take(nbytes, f"payload of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dt).astype(np.float64).reshape(shape)
        expected += nbytes
    if base + expected != len(buf):
        raise FormatError(f"{source}: {len(buf) - base - expected} trailing bytes after offset {base + expected}")
    dtype = dtypes.pop() if len(dtypes) == 1 else "f64"
    return Archive(metadata, tensors, dtype)


def write_archive(path, tensors: Mapping[str, np.ndarray], metadata: Mapping, dtype: str = "f64") -> int:
    data = encode_archive(tensors, metadata, dtype)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


def read_archive(path) -> Archive:
    return decode_archive(Path(path).read_bytes(), str(path))


# encoders ---------------------------------------------------------------------

@dataclass
class Encoder:
    config: ConformerConfig
    blocks: list[BlockParams]
    metadata: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return encoder_fingerprint(self.config, self.blocks)


def encoder_fingerprint(cfg: ConformerConfig, blocks) -> str:
    h = hashlib.sha256()
    h.update(_canonical_json(cfg.to_dict()))
    for name, t in encoder_tensors(blocks):
        h.update(name.encode("utf-8"))
        h.update(struct.pack(f"<{t.ndim}I", *t.shape))
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def _tensor_dict(pairs) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in pairs}


def save_encoder(model, path, dtype: str = "f64") -> int:
    """Write the encoder (not the head or adapters) of ``model``."""
    cfg, blocks = model.config, (model.encoder if isinstance(model, Model) else model.blocks)
    meta = {"kind": "encoder", "config": cfg.to_dict(), "storage_dtype": dtype}
    return write_archive(path, _tensor_dict(encoder_tensors(blocks)), meta, dtype)


def _assign(root, dotted: str, values: np.ndarray, source: str) -> None:
    parts = dotted.split(".")
    obj = root
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(obj, list):
            idx = int(part)
            if last:
                obj[idx] = Tensor(values)
            else:
                obj = obj[idx]
        elif isinstance(obj, dict):
            key = Site(part)
            if last:
                obj[key] = Tensor(values)
            else:
                obj = obj[key]
        elif dataclasses.is_dataclass(obj) and hasattr(obj, part):
            if last:
                setattr(obj, part, Tensor(values))
            else:
                obj = getattr(obj, part)
        else:
            raise FormatError(f"{source}: tensor {dotted!r} does not match the model structure")


def load_encoder(path) -> Encoder:
    arc = read_archive(path)
    if arc.metadata.get("kind") != "encoder":
        raise FormatError(f"{path}: not an encoder archive (kind={arc.metadata.get('kind')!r})")
    cfg = ConformerConfig.from_dict(arc.metadata["config"])
    blocks = init_encoder(cfg)
    want = [n for n, _ in encoder_tensors(blocks)]
    if list(arc.tensors) != want:
        missing = set(want) ^ set(arc.tensors)
        raise FormatError(f"{path}: encoder tensor table does not match its config ({sorted(missing)[:3]}...)")
    for name, values in arc.tensors.items():
        _assign(blocks, name.removeprefix("encoder."), values, str(path))
    return Encoder(cfg, blocks, arc.metadata)


# adapter packs -------------------------------------------------------------------

def save_adapter_pack(model: Model, path, task: str, mode: Mode | str = Mode.ADAPTER,
                      base_fingerprint: str | None = None, dtype: str = "f64", extra: Mapping | None = None) -> int:
    """Write the task-specific parameters of ``model``.

    Adapter and head-only packs hold adapters and head; a full-finetune pack
    also carries the whole retrained encoder. ``base_fingerprint`` names the
    frozen encoder the pack belongs to (defaults to ``model``'s encoder).
    """
    mode = Mode(mode)
    adapters = model.adapters
    spec = adapters.spec if adapters is not None and mode is Mode.ADAPTER else AdapterSpec(Placement.NONE, 0)
    tensors: dict[str, np.ndarray] = {}
    if mode is Mode.FULL_FINETUNE:
        tensors.update(_tensor_dict(encoder_tensors(model.encoder)))
    if adapters is not None and mode is Mode.ADAPTER:
        for i, site, p in adapters.items():
            tensors.update(_tensor_dict(named_parameters(p, f"adapters.{i}.{site.value}")))
    tensors.update(_tensor_dict(named_parameters(model.head, "head")))
    eps = None
    if adapters is not None:
        eps = next((p.norm.eps for _, _, p in adapters.items() if p.norm is not None), None)
    meta = {
        "kind": "adapter_pack",
        "task": task,
        "mode": mode.value,
        "spec": spec.to_dict(),
        "encoder_fingerprint": base_fingerprint or encoder_fingerprint(model.config, model.encoder),
        "num_blocks": model.config.num_blocks,
        "num_classes": model.head.num_classes,
        "layer_norm_eps": eps,
        "storage_dtype": dtype,
        **(dict(extra) if extra else {}),
    }
    return write_archive(path, tensors, meta, dtype)


@dataclass
class Pack:
    metadata: dict
    tensors: dict[str, np.ndarray]

    @property
    def spec(self) -> AdapterSpec:
        return AdapterSpec.from_dict(self.metadata["spec"])

    @property
    def mode(self) -> Mode:
        return Mode(self.metadata["mode"])

    @property
    def fingerprint(self) -> str:
        return self.metadata["encoder_fingerprint"]

    @property
    def digest(self) -> str:
        """SHA-256 over the pack's tensors, used to bind statistics files to a pack."""
        h = hashlib.sha256()
        for name, arr in self.tensors.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def read_pack(path) -> Pack:
    arc = read_archive(path)
    if arc.metadata.get("kind") != "adapter_pack":
        raise FormatError(f"{path}: not an adapter pack (kind={arc.metadata.get('kind')!r})")
    return Pack(arc.metadata, arc.tensors)


def _build_adapters(pack: Pack, num_blocks: int, source: str) -> AdapterSet | None:
    spec = pack.spec
    if spec.placement is Placement.NONE:
        return None
    eps = pack.metadata.get("layer_norm_eps") or 1e-6
    groups: dict[tuple[int, Site], dict[str, np.ndarray]] = {}
    for name, arr in pack.tensors.items():
        if not name.startswith("adapters."):
            continue
        _, block, site, *rest = name.split(".")
        groups.setdefault((int(block), Site(site)), {})[".".join(rest)] = arr
    blocks: list[dict[Site, AdapterParams]] = [dict() for _ in range(num_blocks)]
    for (i, site), t in sorted(groups.items()):
        if i >= num_blocks:
            raise FormatError(f"{source}: adapter for block {i} but encoder has {num_blocks} blocks")
        norm = None
        if "norm.gamma" in t:
            norm = LayerNormParams(Tensor(t["norm.gamma"]), Tensor(t["norm.beta"]), eps)
        if "offset" in t:
            blocks[i][site] = AdapterParams(None, None, None, Tensor(t["offset"]))
        else:
            try:
                blocks[i][site] = AdapterParams(
                    LinearParams(Tensor(t["down.weight"]), Tensor(t["down.bias"])),
                    LinearParams(Tensor(t["up.weight"]), Tensor(t["up.bias"])),
                    norm,
                )
            except KeyError as exc:
                raise FormatError(f"{source}: adapter {i}.{site.value} is missing tensor {exc}") from None
    return AdapterSet(spec, blocks)


def attach_pack(encoder: Encoder, pack: Pack, source: str = "<pack>") -> Model:
    """Combine a frozen encoder with a pack, refusing mismatched fingerprints."""
    if pack.fingerprint != encoder.fingerprint:
        raise CompatibilityError(
            f"{source}: pack was built for encoder {pack.fingerprint[:12]}..., "
            f"but the encoder fingerprint is {encoder.fingerprint[:12]}..."
        )
    blocks = copy.deepcopy(encoder.blocks)
    if pack.mode is Mode.FULL_FINETUNE:
        for name, values in pack.tensors.items():
            if name.startswith("encoder."):
                _assign(blocks, name.removeprefix("encoder."), values, source)
    try:
        head = HeadParams(LinearParams(Tensor(pack.tensors["head.projection.weight"]),
                                       Tensor(pack.tensors["head.projection.bias"])))
    except KeyError:
        raise FormatError(f"{source}: pack has no head tensors") from None
    return Model(encoder.config, blocks, head, _build_adapters(pack, encoder.config.num_blocks, source))


def load_adapter_pack(path, encoder: Encoder) -> Model:
    return attach_pack(encoder, read_pack(path), str(path))


def pack_adapters(pack: Pack, source: str = "<pack>") -> AdapterSet | None:
    """The pack's adapters on their own, or None for head-only and full packs."""
    return _build_adapters(pack, pack.metadata["num_blocks"], source)


def with_adapters(pack: Pack, adapters: AdapterSet, **extra) -> Pack:
    """A copy of ``pack`` whose adapter tensors are replaced by ``adapters``."""
    tensors = {n: a for n, a in pack.tensors.items() if n.startswith("encoder.")}
    for i, site, p in adapters.items():
        tensors.update(_tensor_dict(named_parameters(p, f"adapters.{i}.{site.value}")))
    tensors.update({n: a for n, a in pack.tensors.items() if n.startswith("head.")})
    return Pack({**pack.metadata, **extra}, tensors)


def write_pack(pack: Pack, path) -> int:
    return write_archive(path, pack.tensors, pack.metadata, pack.metadata.get("storage_dtype", "f64"))
