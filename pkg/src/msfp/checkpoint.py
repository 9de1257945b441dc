"""Checkpoint files: a JSON manifest followed by a float64 little-endian blob.

Layout::

    8 bytes   manifest length n (unsigned, little-endian)
    n bytes   manifest, UTF-8 JSON with sorted keys
    rest      tensors back to back, in manifest order

The manifest lists every tensor with its shape, byte offset and byte length;
the entries must tile the blob exactly. Encoding is deterministic, so
``encode(decode(b)) == b``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fpq import FpQuantizerParams
from .lora import LoraAdapter, LoraHub, QuantizedDenoiser, Router
from .nn import DenoiserModel

VERSION = "msfp-ckpt/1"
_LEN = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")

__all__ = [
    "VERSION",
    "Checkpoint",
    "CheckpointError",
    "encode",
    "decode",
    "save",
    "load",
    "pack_model",
    "unpack_model",
]


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode(ckpt: Checkpoint) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = _dumps({"version": VERSION, "meta": ckpt.meta, "tensors": index})
    return _LEN.pack(len(manifest)) + manifest + b"".join(chunks)


def decode(raw: bytes) -> Checkpoint:
    if len(raw) < _LEN.size:
        raise CheckpointError("file too short for a checkpoint header")
    (n,) = _LEN.unpack_from(raw)
    if _LEN.size + n > len(raw):
        raise CheckpointError("manifest length exceeds file size")
    try:
        manifest = json.loads(raw[_LEN.size : _LEN.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}, expected {VERSION!r}")
    blob = raw[_LEN.size + n :]
    tensors = {}
    pos = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        length = entry["length"]
        if entry["offset"] != pos or length != _DTYPE.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {entry['name']!r} does not tile the blob")
        if pos + length > len(blob):
            raise CheckpointError(f"tensor {entry['name']!r} runs past the end of the file")
        tensors[entry["name"]] = np.frombuffer(blob, dtype=_DTYPE, count=length // 8, offset=pos).reshape(shape).copy()
        pos += length
    if pos != len(blob):
        raise CheckpointError(f"blob holds {len(blob) - pos} trailing bytes")
    return Checkpoint(manifest["meta"], tensors)


def save(path, ckpt: Checkpoint) -> bytes:
    raw = encode(ckpt)
    Path(path).write_bytes(raw)
    return raw


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# --- model packing ------------------------------------------------------------


def pack_model(model: DenoiserModel, qmodel: QuantizedDenoiser | None = None, hub: LoraHub | None = None,
               router: Router | None = None, extra: dict | None = None) -> Checkpoint:
    """Everything needed to rebuild the (quantized, adapted) denoiser."""
    meta = {
        "architecture": {
            "input_dim": model.input_dim,
            "n_hidden": model.n_hidden,
            "hidden": model.layers[0].out_features,
            "time_embed_dim": model.time_embed_dim,
        },
        "extra": extra or {},
    }
    tensors = dict(model.named_parameters())
    if qmodel is not None:
        meta["quantizers"] = {site: None if p is None else p.to_dict() for site, p in qmodel.sites().items()}
    if hub is not None:
        ad = next(iter(hub.adapters.values()))[0]
        meta["hub"] = {"layers": hub.layers, "hub_size": hub.hub_size, "rank": ad.rank, "alpha": ad.alpha}
        tensors.update(hub.named_parameters())
    if router is not None:
        meta["router"] = {"n_layers": router.n_layers, "hub_size": router.hub_size, "embed_dim": router.embed_dim}
        tensors.update(router.named_parameters())
    return Checkpoint(meta, tensors)


def unpack_model(ckpt: Checkpoint):
    """Inverse of :func:`pack_model`: ``(model, qmodel, hub, router)``; absent parts are ``None``."""
    arch = ckpt.meta.get("architecture")
    if arch is None:
        raise CheckpointError("checkpoint has no architecture")
    t = ckpt.tensors
    try:
        model = DenoiserModel.init(arch["input_dim"], arch["hidden"], arch["n_hidden"], arch["time_embed_dim"], zero=True)
        for name, _ in model.named_parameters():
            model.set_parameter(name, t[name])
        qmodel = None
        quant = ckpt.meta.get("quantizers")
        if quant is not None:
            n = len(model.layers)
            get = lambda key: None if quant[key] is None else FpQuantizerParams.from_dict(quant[key])
            qmodel = QuantizedDenoiser(model, [get(f"layer{i}.weight") for i in range(n)],
                                       [get(f"layer{i}.act") for i in range(n)])
        hub = None
        if "hub" in ckpt.meta:
            h = ckpt.meta["hub"]
            hub = LoraHub({
                i: [LoraAdapter(t[f"lora.{i}.{k}.A"], t[f"lora.{i}.{k}.B"], h["alpha"]) for k in range(h["hub_size"])]
                for i in h["layers"]
            })
        router = None
        if "router" in ckpt.meta:
            r = ckpt.meta["router"]
            router = Router(t["router.w1"], t["router.b1"], t["router.w2"], t["router.b2"], r["n_layers"], r["hub_size"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing {exc}") from None
    return model, qmodel, hub, router
