"""Single-file model container for FP and quantized toy detectors.

Layout: 8-byte magic ``DETPTQM1``, little-endian u64 manifest length,
UTF-8 JSON manifest, then a blob of little-endian float32 tensors.
The manifest lists every tensor by name, shape and byte offset, plus
the architecture config and (for quantized models) the quantizer
records and the names of frozen rounding masks, which are stored in the
blob as 0/1 float32 tensors named ``rounding/<layer>``.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .qmodel import QuantizedDetector, QuantState
from .quantizer import AffineQuantizer
from .toydet.model import ToyDetector, ToyDetectorConfig

MAGIC = b"DETPTQM1"
FORMAT_VERSION = 1
DTYPE = "<f4"


class ContainerError(ValueError):
    pass


def _pack(tensors: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=DTYPE)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": DTYPE})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def save_model(model, path: os.PathLike, meta: dict | None = None) -> None:
    """Write a :class:`ToyDetector` or :class:`QuantizedDetector`."""
    if isinstance(model, QuantizedDetector):
        det, state = model.model, model.state
    else:
        det, state = model, QuantState()
    tensors = dict(det.params)
    tensors.update({f"rounding/{k}": v.astype(np.float32) for k, v in state.rounding.items()})
    entries, blob = _pack(tensors)
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": det.config.to_dict(),
        "tensors": entries,
        "weight_quantizers": {k: q.to_record() for k, q in sorted(state.weight_q.items())},
        "act_quantizers": {k: q.to_record() for k, q in sorted(state.act_q.items())},
        "rounding_masks": sorted(state.rounding),
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(blob)


def read_manifest(path: os.PathLike) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise ContainerError(f"{path}: not a model container (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise ContainerError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[16 : 16 + n])
    except json.JSONDecodeError as e:
        raise ContainerError(f"{path}: corrupt manifest ({e})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: format_version {version} unsupported (expected {FORMAT_VERSION})")
    return manifest, data[16 + n :]


def _unpack(entries: list[dict], blob: bytes, path) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        if e.get("dtype") != DTYPE:
            raise ContainerError(f"{path}: tensor {e['name']} has unsupported dtype {e.get('dtype')}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        start, stop = e["offset"], e["offset"] + 4 * count
        if start < 0 or stop > len(blob):
            raise ContainerError(f"{path}: tensor {e['name']} lies outside the data blob (truncated file?)")
        arr = np.frombuffer(blob[start:stop], dtype=DTYPE).reshape(e["shape"])
        out[e["name"]] = arr.astype(np.float64)
    return out


def load_model(path: os.PathLike) -> QuantizedDetector:
    """Read a container; FP models come back with an empty :class:`QuantState`."""
    manifest, blob = read_manifest(path)
    tensors = _unpack(manifest["tensors"], blob, path)
    config = ToyDetectorConfig.from_dict(manifest["architecture"])
    params = {k: v for k, v in tensors.items() if not k.startswith("rounding/")}
    det = ToyDetector(config, params)
    missing = set(ToyDetector(config).params) - set(params)
    if missing:
        raise ContainerError(f"{path}: missing tensors {sorted(missing)}")
    rounding = {}
    for name in manifest["rounding_masks"]:
        key = f"rounding/{name}"
        if key not in tensors:
            raise ContainerError(f"{path}: rounding mask {name} listed but not stored")
        rounding[name] = tensors[key] > 0.5
    state = QuantState(
        {k: AffineQuantizer.from_record(r) for k, r in manifest["weight_quantizers"].items()},
        {k: AffineQuantizer.from_record(r) for k, r in manifest["act_quantizers"].items()},
        rounding,
    )
    return QuantizedDetector(det, state)
