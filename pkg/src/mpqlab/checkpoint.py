"""MPQ1 checkpoint files.

Layout::

    b"MPQ1" | uint32 LE header length | UTF-8 JSON header | float64 LE blobs

The header holds the model config and an ordered manifest with one entry per
parameter tensor (name, layer_id, kind, shape, byte offset into the blob area).
Blobs are contiguous in manifest order. A quantized export stores the
dequantized weights as floats and adds the per-layer bits and ranges under
``"quant"`` in the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ToyViT, layer_param_name, param_shapes
from .quantizer import QuantizedModel

MAGIC = b"MPQ1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def _manifest(model: ToyViT) -> list[dict]:
    layer_of = {}
    for r in model.layers:
        for part in ("weight", "bias"):
            layer_of[layer_param_name(r.layer_id, part)] = (r.layer_id, r.kind.value)
    entries, offset = [], 0
    for name, shape in param_shapes(model.config).items():
        lid, kind = layer_of.get(name, (None, None))
        entries.append({"name": name, "layer_id": lid, "kind": kind, "shape": list(shape), "offset": offset})
        offset += 8 * int(np.prod(shape, dtype=np.int64))
    return entries


def _encode(header: dict, arrays: list[np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return MAGIC + _LEN.pack(len(head)) + head + body


def dumps(model: ToyViT, quant: QuantizedModel | None = None) -> bytes:
    """Serialize ``model``; with ``quant``, store its fake-quantized weights."""
    manifest = _manifest(model)
    header: dict = {"format": "MPQ1", "version": FORMAT_VERSION, "config": model.config.to_dict(), "manifest": manifest}
    arrays = []
    for entry in manifest:
        value = model.params[entry["name"]]
        if quant is not None and entry["layer_id"] is not None and entry["name"].endswith(".weight"):
            value = quant.weight(entry["layer_id"])
        arrays.append(value)
    if quant is not None:
        header["quant"] = {
            str(i): {"weight": quant.weight_params(i).to_dict(), "act": quant.act_params(i).to_dict()}
            for i in range(model.num_layers)
        }
    return _encode(header, arrays)


def loads(data: bytes) -> tuple[ToyViT, dict | None]:
    """Parse a checkpoint; returns the model and the ``"quant"`` header (or None)."""
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError("not an MPQ1 checkpoint (bad magic)")
    (n,) = _LEN.unpack_from(data, 4)
    if len(data) < 8 + n:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {header.get('version')!r}")
    cfg = ModelConfig(**header["config"])
    cfg.validate()
    expected = param_shapes(cfg)
    body = memoryview(data)[8 + n :]
    params = {}
    for entry in header["manifest"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise CheckpointError(f"manifest entry {name} {shape} does not match the config")
        start = entry["offset"]
        stop = start + 8 * int(np.prod(shape, dtype=np.int64))
        if stop > len(body):
            raise CheckpointError(f"truncated blob for {name}")
        params[name] = np.frombuffer(body[start:stop], dtype="<f8").astype(np.float64).reshape(shape)
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint is missing {sorted(missing)}")
    return ToyViT(cfg, params), header.get("quant")


def save(path, model: ToyViT, quant: QuantizedModel | None = None) -> None:
    Path(path).write_bytes(dumps(model, quant))


def load(path) -> tuple[ToyViT, dict | None]:
    return loads(Path(path).read_bytes())


def load_quantized(path) -> QuantizedModel:
    """Rebuild a QuantizedModel from a quantized export."""
    model, quant = load(path)
    if quant is None:
        raise CheckpointError("checkpoint carries no quantization parameters")
    bits, wr, ar = {}, {}, {}
    for key, q in quant.items():
        i = int(key)
        bits[i] = int(q["weight"]["bits"])
        wr[i] = (q["weight"]["r_min"], q["weight"]["r_max"])
        ar[i] = (q["act"]["r_min"], q["act"]["r_max"])
    return QuantizedModel(model, bits, wr, ar)
