"""Versioned binary checkpoints for trained fields and mixture models.

Byte layout, in order:

* 8-byte magic ``MOEFLOW\\x00``;
* 4-byte little-endian uint32 format version (currently 1);
* 4-byte little-endian uint32 header length ``L``;
* ``L`` bytes of UTF-8 JSON with sorted keys and no whitespace, describing
  the payload (kind, net layer sizes and activations, sigma, seed);
* raw little-endian float64 parameter blocks, one per layer, weights
  before biases, nets in declared order (vfm: the single field; moefm:
  experts 0..K-1 then the gate).

Everything that determines the bytes is canonicalized, so saving the same
model twice produces identical files; the round trip preserves parameters
bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointFormatError, NonFiniteError, ValidationError
from .moefm import MoeFlowModel
from .nnet import MlpNet

MAGIC = b"MOEFLOW\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str                        # "vfm" or "moefm"
    payload: MlpNet | MoeFlowModel
    seed: int | None = None

    @property
    def net(self) -> MlpNet:
        if self.kind != "vfm":
            raise ValidationError(f"checkpoint holds a {self.kind} model, not a field")
        return self.payload

    @property
    def model(self) -> MoeFlowModel:
        if self.kind != "moefm":
            raise ValidationError(f"checkpoint holds a {self.kind} field, not a mixture")
        return self.payload


def _net_header(net: MlpNet) -> dict:
    return {"layer_sizes": list(net.layer_sizes), "activation": net.activation}


def _net_blocks(net: MlpNet) -> list:
    blocks = []
    for w, b in zip(net.weights, net.biases):
        blocks.append(np.ascontiguousarray(w, dtype="<f8"))
        blocks.append(np.ascontiguousarray(b, dtype="<f8"))
    return blocks


def _checkpoint_bytes(cp: Checkpoint) -> bytes:
    if cp.kind == "vfm":
        header = {"kind": "vfm", "net": _net_header(cp.payload), "seed": cp.seed}
        blocks = _net_blocks(cp.payload)
    elif cp.kind == "moefm":
        model = cp.payload
        header = {
            "kind": "moefm",
            "experts": [_net_header(ex) for ex in model.experts],
            "gate": _net_header(model.gate),
            "sigma": model.sigma,
            "seed": cp.seed,
        }
        blocks = [blk for ex in model.experts for blk in _net_blocks(ex)]
        blocks += _net_blocks(model.gate)
    else:
        raise ValidationError(f"unknown checkpoint kind {cp.kind!r}")
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, np.uint32(FORMAT_VERSION).tobytes(), np.uint32(len(head)).tobytes(), head]
    out.extend(blk.tobytes() for blk in blocks)
    return b"".join(out)


def save_checkpoint(path, payload, seed: int | None = None) -> Checkpoint:
    """Write a field net or mixture model; returns the checkpoint record."""
    if isinstance(payload, MlpNet):
        cp = Checkpoint("vfm", payload, seed)
    elif isinstance(payload, MoeFlowModel):
        cp = Checkpoint("moefm", payload, seed)
    else:
        raise ValidationError("checkpoint payload must be MlpNet or MoeFlowModel")
    with open(path, "wb") as fh:
        fh.write(_checkpoint_bytes(cp))
    return cp


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out


def _read_net(reader: _Reader, desc, where: str) -> MlpNet:
    try:
        sizes = tuple(int(s) for s in desc["layer_sizes"])
        activation = desc["activation"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"malformed net descriptor for {where}") from exc
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        shape = (sizes[i], sizes[i + 1])
        w = reader.take(8 * shape[0] * shape[1], f"{where} layer {i} weights")
        b = reader.take(8 * shape[1], f"{where} layer {i} biases")
        weights.append(np.frombuffer(w, dtype="<f8").reshape(shape).copy())
        biases.append(np.frombuffer(b, dtype="<f8").copy())
    try:
        return MlpNet(sizes, weights, biases, activation)
    except (ValidationError, NonFiniteError) as exc:
        raise CheckpointFormatError(f"invalid {where} parameters: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint; raises CheckpointFormatError on any malformation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("not a moeflow checkpoint (bad magic)")
    version = int(np.frombuffer(reader.take(4, "version"), dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    head_len = int(np.frombuffer(reader.take(4, "header length"), dtype="<u4")[0])
    try:
        header = json.loads(reader.take(head_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError("unreadable checkpoint header") from exc
    kind = header.get("kind")
    seed = header.get("seed")
    if kind == "vfm":
        net = _read_net(reader, header.get("net", {}), "field")
        cp = Checkpoint("vfm", net, seed)
    elif kind == "moefm":
        experts = [
            _read_net(reader, desc, f"expert {i}")
            for i, desc in enumerate(header.get("experts", []))
        ]
        gate = _read_net(reader, header.get("gate", {}), "gate")
        sigma = header.get("sigma")
        if not isinstance(sigma, (int, float)):
            raise CheckpointFormatError("moefm checkpoint is missing sigma")
        try:
            model = MoeFlowModel(experts, gate, float(sigma))
        except ValidationError as exc:
            raise CheckpointFormatError(f"inconsistent mixture model: {exc}") from exc
        cp = Checkpoint("moefm", model, seed)
    else:
        raise CheckpointFormatError(f"unknown checkpoint kind {kind!r}")
    if reader.off != len(blob):
        raise CheckpointFormatError(
            f"{len(blob) - reader.off} trailing bytes after checkpoint payload"
        )
    return cp
