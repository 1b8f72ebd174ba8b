"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GFTLAB01"
    u64 metadata length, then that many bytes of UTF-8 JSON
    u32 entry count
    per entry: u32 name length, name (UTF-8), u32 ndim, ndim * u64 dims,
               prod(dims) float64 values in row-major order

EMA shadow parameters are stored as extra entries prefixed ``ema/``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .diffusion import ConditionalMixture2D
from .discrete import build_toy_joint
from .models import ARLogitNet, ExactTableNet, NoisePredictor, OracleDenoiser, TabularLogits

MAGIC = b"GFTLAB01"
EMA_PREFIX = "ema/"


class CheckpointError(ValueError):
    pass


def encode(metadata: dict, arrays: dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<Q", len(meta)), meta, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes):
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic; not a GFTLAB01 checkpoint")
    (meta_len,) = r.unpack("<Q")
    try:
        metadata = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after the last entry")
    return metadata, arrays


def build_network(model_cfg: dict):
    cfg = dict(model_cfg)
    kind = cfg.pop("kind")
    if kind == NoisePredictor.kind:
        return NoisePredictor(**cfg)
    if kind == ARLogitNet.kind:
        return ARLogitNet(**cfg)
    if kind == TabularLogits.kind:
        return TabularLogits(**cfg)
    if kind == OracleDenoiser.kind:
        return OracleDenoiser(ConditionalMixture2D.from_config(cfg["mixture"]))
    if kind == ExactTableNet.kind:
        return ExactTableNet(build_toy_joint(**cfg["joint"]), guided=cfg["guided"])
    raise CheckpointError(f"unknown network kind {kind!r}")


def save(path, net, metadata: dict | None = None, ema=None):
    meta = dict(metadata or {})
    meta["model"] = net.config()
    meta["ema"] = ema is not None
    arrays = dict(net.state_arrays())
    if ema is not None:
        meta["ema_decay"] = ema.decay
        arrays.update({EMA_PREFIX + k: v for k, v in ema.shadow.items()})
    Path(path).write_bytes(encode(meta, arrays))


def load(path, use_ema=False):
    """Return (net, metadata, ema_arrays_or_None); nothing is built on error."""
    metadata, arrays = decode(Path(path).read_bytes())
    live = {k: v for k, v in arrays.items() if not k.startswith(EMA_PREFIX)}
    shadow = {k[len(EMA_PREFIX):]: v for k, v in arrays.items() if k.startswith(EMA_PREFIX)}
    net = build_network(metadata["model"])
    try:
        net.load_arrays(live)
        if shadow:
            probe = build_network(metadata["model"])
            probe.load_arrays(shadow)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    if use_ema:
        if not shadow:
            raise CheckpointError("checkpoint carries no EMA parameters")
        net.load_arrays(shadow)
    return net, metadata, (shadow or None)
