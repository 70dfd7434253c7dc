"""Model snapshot container.

Layout: 8-byte magic, little-endian u64 manifest length, UTF-8 JSON
manifest, then the raw tensor payload. Tensors are little-endian float32
in C order, concatenated in the order listed by the manifest. The JSON
is dumped with sorted keys and fixed separators, so saving the same
state twice produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .engine import LayerSpec, Network
from .errors import DataFormatError

MAGIC = b"CLECKPT1"
FORMAT_VERSION = 1


def _manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    """Write named float32 tensors plus a JSON-serializable meta block."""
    entries = []
    offset = 0
    names = sorted(tensors)
    for name in names:
        t = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": t.nbytes})
        offset += t.nbytes
    manifest = {
        "format": "cle-checkpoint",
        "version": FORMAT_VERSION,
        "tensors": entries,
        "meta": meta,
    }
    blob = _manifest_bytes(manifest)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in names:
            f.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors, meta). Corruption raises DataFormatError."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 8:
        raise DataFormatError(f"{path}: truncated checkpoint header")
    if data[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path}: bad magic; not a checkpoint file")
    (mlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    header_end = len(MAGIC) + 8
    if header_end + mlen > len(data):
        raise DataFormatError(f"{path}: manifest extends past end of file")
    try:
        manifest = json.loads(data[header_end : header_end + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: unreadable manifest: {e}") from e
    if manifest.get("format") != "cle-checkpoint":
        raise DataFormatError(f"{path}: unknown container format {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {manifest.get('version')!r}")
    payload = data[header_end + mlen :]
    tensors = {}
    expected = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(entry["nbytes"])
        if int(np.prod(shape, dtype=np.int64)) * 4 != nbytes:
            raise DataFormatError(f"{path}: tensor {entry['name']} shape {shape} does not match {nbytes} bytes")
        offset = int(entry["offset"])
        if offset != expected:
            raise DataFormatError(f"{path}: tensor {entry['name']} offset {offset} is not contiguous")
        expected = offset + nbytes
        raw = payload[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise DataFormatError(f"{path}: tensor {entry['name']} payload truncated")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if expected != len(payload):
        raise DataFormatError(f"{path}: {len(payload) - expected} trailing payload bytes")
    return tensors, manifest["meta"]


def save_network(path, net: Network, seed, step: int, extra: dict | None = None) -> None:
    """Snapshot a network with its provenance (build seed, optimizer step)."""
    meta = {
        "kind": "network",
        "specs": [s.to_dict() for s in net.specs],
        "input_shape": list(net.input_shape),
        "seed": seed,
        "step": int(step),
    }
    if extra:
        overlap = set(extra) & set(meta)
        if overlap:
            raise DataFormatError(f"extra meta keys collide with reserved keys: {sorted(overlap)}")
        meta.update(extra)
    save_checkpoint(path, net.params, meta)


def load_network(path):
    """Rebuild a Network from a snapshot; returns (net, meta)."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "network":
        raise DataFormatError(f"{path}: checkpoint does not hold a network (kind={meta.get('kind')!r})")
    specs = [LayerSpec.from_dict(d) for d in meta["specs"]]
    net = Network(specs, tensors, tuple(meta["input_shape"]))
    for i, spec in enumerate(specs):
        if spec.kind in ("conv2d", "fullyconnected"):
            for suffix in ("w", "b"):
                if f"L{i}.{suffix}" not in tensors:
                    raise DataFormatError(f"{path}: missing parameter L{i}.{suffix}")
    return net, meta
