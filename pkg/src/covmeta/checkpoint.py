"""Binary checkpoints.

Layout::

    b"CVMCKPT1" | uint64 LE header length | UTF-8 JSON header | float64 LE payload

The payload is the flattened meta-parameters followed by the Adam first and
second moments, each in the header's parameter layout.  The header is written
with sorted keys and no whitespace so that save -> load -> save reproduces the
file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nets
from .config import RunConfig
from .optim import AdamState

MAGIC = b"CVMCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def layout_hash(layout) -> str:
    desc = json.dumps([[k, list(s)] for k, s in layout], separators=(",", ":"))
    return hashlib.sha256(desc.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict
    adam: AdamState
    step: int

    @property
    def layout(self):
        return [(k, tuple(np.shape(v))) for k, v in self.params.items()]


def encode(ck: Checkpoint) -> bytes:
    layout = ck.layout
    expected = nets.meta_layout(ck.config.architecture(), ck.config.algorithm)
    if [(k, tuple(s)) for k, s in expected] != layout:
        raise CheckpointError("parameters do not match the configured architecture")
    n = nets.layout_size(layout)
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": ck.config.architecture().to_dict(),
        "config": ck.config.to_dict(),
        "layout": [[k, list(s)] for k, s in layout],
        "layout_hash": layout_hash(layout),
        "parameter_count": n,
        "payload_count": 3 * n,
        "step": int(ck.step),
        "adam": {"step": int(ck.adam.step), "learning_rate": ck.adam.learning_rate,
                 "beta1": ck.adam.beta1, "beta2": ck.adam.beta2, "epsilon": ck.adam.epsilon},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.concatenate([nets.flatten(ck.params, layout), ck.adam.m, ck.adam.v]).astype("<f8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload.tobytes()


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("checkpoint: bad magic")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("checkpoint: unreadable header") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint: unsupported format version {header.get('format_version')}")
    layout = [(k, tuple(s)) for k, s in header["layout"]]
    if layout_hash(layout) != header["layout_hash"]:
        raise CheckpointError("checkpoint: layout hash mismatch")
    config = RunConfig.from_dict(header["config"])
    expected = [(k, tuple(s)) for k, s in nets.meta_layout(config.architecture(), config.algorithm)]
    if expected != layout:
        raise CheckpointError("checkpoint: layout does not match the stored architecture")
    n = nets.layout_size(layout)
    body = blob[16 + hlen:]
    if len(body) != 8 * header["payload_count"] or header["payload_count"] != 3 * n:
        raise CheckpointError("checkpoint: payload length mismatch (truncated or corrupt file)")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    a = header["adam"]
    adam = AdamState(a["learning_rate"], flat[n:2 * n].copy(), flat[2 * n:].copy(), a["step"],
                     a["beta1"], a["beta2"], a["epsilon"])
    return Checkpoint(config, nets.unflatten(flat[:n], layout), adam, header["step"])


def save(path, ck: Checkpoint) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode(ck))
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e.strerror}") from e


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
