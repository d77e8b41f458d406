"""Versioned binary container: magic, JSON header, little-endian float32 blocks.

Layout::

    b"GNETPACK"  | uint32 version | uint32 header length | header (UTF-8 JSON)
    | block 0 | block 1 | ...     (float32 little-endian, declaration order)

The header lists each block as ``{"name", "shape"}``.  Writes go through a
temporary file and an atomic rename.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"GNETPACK"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def atomic_write_bytes(path, data: bytes) -> None:
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


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def pack(header: dict, blocks) -> bytes:
    """Serialise ``header`` plus ``[(name, array), ...]`` into container bytes."""
    header = dict(header)
    header["blocks"] = [{"name": name, "shape": list(np.shape(arr))} for name, arr in blocks]
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    for _, arr in blocks:
        parts.append(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
    return b"".join(parts)


def unpack(data: bytes):
    if data[:8] != MAGIC:
        raise ValueError("not a GNETPACK container")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    blocks = {}
    for spec in header["blocks"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise ValueError(f"container truncated in block {spec['name']!r}")
        blocks[spec["name"]] = np.frombuffer(data[offset:end], dtype=_LE_F32).reshape(spec["shape"]).astype(np.float32)
        offset = end
    if offset != len(data):
        raise ValueError("trailing bytes after last block")
    return header, blocks


def write_container(path, header: dict, blocks) -> None:
    atomic_write_bytes(path, pack(header, blocks))


def read_container(path):
    return unpack(Path(path).read_bytes())


# ----------------------------------------------------------------------------- networks


def network_blocks(net):
    return list(net.parameters().items())


def save_network(path, net, state=None, meta: dict | None = None) -> None:
    """Checkpoint = architecture header + weights (+ ADAM moments)."""
    from .layers import describe

    header = {"kind": "network", "network": describe(net), "meta": meta or {}}
    blocks = network_blocks(net)
    if state is not None:
        header["adam"] = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
                          "epsilon": state.epsilon, "step": state.step}
        blocks += [(f"adam.m.{k}", v) for k, v in state.first_moment.items()]
        blocks += [(f"adam.v.{k}", v) for k, v in state.second_moment.items()]
    write_container(path, header, blocks)


def load_network(path):
    """Return ``(net, adam_state_or_None, meta)``."""
    from .layers import build_network
    from .train import AdamState

    header, blocks = read_container(path)
    if header.get("kind") != "network":
        raise ValueError("container does not hold a network")
    net = build_network(header["network"], seed=0)
    params = {k: blocks[k] for k in net.parameters()}
    net = net.with_parameters(params)
    state = None
    if "adam" in header:
        names = list(params)
        state = AdamState(**header["adam"],
                          first_moment={k: blocks[f"adam.m.{k}"] for k in names},
                          second_moment={k: blocks[f"adam.v.{k}"] for k in names})
    return net, state, header.get("meta", {})
