"""Binary checkpoints.

Layout (all integers little-endian)::

    b"NSN1"  uint32 version  uint32 header_len  header (UTF-8 JSON)  payload

The header holds the network spec, the per-layer similarity kinds, the
optimizer kind and hyperparameters, and a table of ``{name, shape}``
entries in payload order.  The payload is the concatenation of every
tensor as little-endian float64.  Model entries use the names of
``Network.state``; optimizer entries are prefixed ``optim:``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from .network import Network, NetworkSpec
from .optim import Optimizer, make_optimizer

MAGIC = b"NSN1"
VERSION = 1
_LE = np.dtype("<f8")


@dataclass
class Checkpoint:
    spec: NetworkSpec
    state: dict
    similarity: dict = field(default_factory=dict)
    optimizer: dict | None = None
    optimizer_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: Network, optimizer: Optimizer | None = None, meta: dict | None = None) -> "Checkpoint":
        kinds = {str(i): k for i, k in net.similarity_kinds().items() if k != "none"}
        opt = None
        opt_state = {}
        if optimizer is not None:
            opt = {"kind": optimizer.kind, "hyper": optimizer.hyper(), "params": list(optimizer.params)}
            opt_state = optimizer.state_arrays()
        return cls(net.spec, {k: np.array(v) for k, v in net.state().items()}, kinds, opt, opt_state, dict(meta or {}))

    def build(self, seed: int = 0) -> Network:
        """A network of the stored spec holding the stored values."""
        net = Network(self.spec, seed)
        self.restore(net)
        return net

    def restore(self, net: Network) -> None:
        """Load into an existing network; fails before mutating on any mismatch."""
        if net.spec.to_dict() != self.spec.to_dict():
            raise ConfigurationError("checkpoint spec does not match the network spec")
        net.load_state(self.state)

    def restore_optimizer(self, net: Network) -> Optimizer | None:
        if self.optimizer is None:
            return None
        opt = make_optimizer(self.optimizer["kind"], {n: net.params[n] for n in self.optimizer["params"]},
                             **self.optimizer["hyper"])
        opt.load_state_arrays(self.optimizer_state)
        return opt

    def to_bytes(self) -> bytes:
        entries = [(k, v) for k, v in self.state.items()] + [(f"optim:{k}", v) for k, v in self.optimizer_state.items()]
        header = {
            "spec": self.spec.to_dict(),
            "similarity": self.similarity,
            "optimizer": self.optimizer,
            "meta": self.meta,
            "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in entries],
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(v, dtype=_LE).tobytes() for _, v in entries)
        return MAGIC + struct.pack("<II", VERSION, len(head)) + head + payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != MAGIC:
            raise FormatError(f"not a checkpoint: magic {raw[:4]!r}, expected {MAGIC!r}")
        if len(raw) < 12:
            raise FormatError("checkpoint truncated inside the preamble")
        version, hlen = struct.unpack("<II", raw[4:12])
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        if len(raw) < 12 + hlen:
            raise FormatError(f"checkpoint header truncated: {len(raw) - 12} of {hlen} bytes")
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
        offset = 12 + hlen
        need = sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in header["tensors"])
        if len(raw) - offset != need:
            raise FormatError(f"checkpoint payload has {len(raw) - offset} bytes, header requires {need}")
        state, opt_state = {}, {}
        for e in header["tensors"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            arr = np.frombuffer(raw, dtype=_LE, count=count, offset=offset).reshape(e["shape"]).astype(np.float64)
            offset += 8 * count
            if e["name"].startswith("optim:"):
                opt_state[e["name"][6:]] = arr
            else:
                state[e["name"]] = arr
        return cls(NetworkSpec.from_dict(header["spec"]), state, header["similarity"], header["optimizer"],
                   opt_state, header["meta"])


def save_checkpoint(path, net: Network, optimizer: Optimizer | None = None, meta: dict | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_network(net, optimizer, meta)
    Path(path).write_bytes(ckpt.to_bytes())
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def fold_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    """Checkpoint of the folded plain-convolution network (no similarity metadata, no optimizer)."""
    folded = ckpt.build().fold()
    return Checkpoint.from_network(folded, meta={**ckpt.meta, "folded": True})
