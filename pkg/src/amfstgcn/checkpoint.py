"""Binary checkpoints: magic, version, JSON header, float32 payload, sha256 trailer.

Layout (all integers little-endian)::

    b"AMFSTCK\\0"   8 bytes
    version        uint32
    header_len     uint64
    header         UTF-8 JSON (sorted keys)
    payload        float32 '<f4', parameters back to back in header order
    digest         sha256 of every preceding byte
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Bounds
from .model import ModelConfig, Params
from .engine import Tensor

MAGIC = b"AMFSTCK\0"
VERSION = 1
_PRE = struct.Struct("<8sIQ")
_DIGEST = 32


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: Params
    model_config: ModelConfig
    bounds: Bounds
    graph_fingerprint: str
    config: dict = field(default_factory=dict)      # echo of the run configuration
    node_ids: list[str] = field(default_factory=list)

    def check_graph(self, fingerprint: str) -> None:
        if fingerprint != self.graph_fingerprint:
            raise CheckpointError(f"graph fingerprint {fingerprint[:12]}... does not match "
                                  f"checkpoint graph {self.graph_fingerprint[:12]}...")


def encode_checkpoint(ck: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name, t in ck.params.items():
        buf = t.data.astype("<f4").tobytes()
        index.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "version": VERSION,
        "model_config": ck.model_config.to_dict(),
        "config": ck.config,
        "params": index,
        "payload_bytes": offset,
        "bounds": [ck.bounds.lo, ck.bounds.hi],
        "graph_fingerprint": ck.graph_fingerprint,
        "node_ids": list(ck.node_ids),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = _PRE.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _PRE.size + _DIGEST:
        raise CheckpointError("truncated checkpoint")
    magic, version, hlen = _PRE.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if _PRE.size + hlen > len(body):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(body[_PRE.size:_PRE.size + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header ({exc})") from None
    payload = body[_PRE.size + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(f"truncated payload: {len(payload)} of {header.get('payload_bytes')} bytes")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch (corrupt checkpoint)")
    tensors = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = Tensor(arr.astype(np.float64).reshape(shape), requires_grad=True,
                                        name=entry["name"])
    return Checkpoint(Params(tensors), ModelConfig(**header["model_config"]), Bounds(*header["bounds"]),
                      header["graph_fingerprint"], header["config"], header["node_ids"])


def save_checkpoint(ck: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ck))
    tmp.replace(path)


def load_checkpoint(path, fingerprint: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    ck = decode_checkpoint(blob)
    if fingerprint is not None:
        ck.check_graph(fingerprint)
    return ck
