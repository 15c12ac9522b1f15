"""Binary weight container with a fixed, versioned layout.

Layout (all integers little-endian):

    magic   4 bytes  b"RAVT"
    version u32      currently 1
    arch    u32 x (7 + 2B): branch count, patch, channels, embed_dim,
            hidden_dim, heads, num_classes, then B branch sides, then B
            branch layer counts
    tensors repeated to EOF: name length u16, name bytes (utf-8), rank u8,
            dims u32 each, payload float64 little-endian

Only architecture integers are stored; exit thresholds, loss weights, and
the resize mode live in run configs. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .model import RavitConfig, RavitParams, build_ravit_params
from .numerics import Tensor

MAGIC = b"RAVT"
VERSION = 1


def _arch_fields(cfg: RavitConfig) -> list[int]:
    return [
        cfg.branches,
        cfg.patch,
        cfg.channels,
        cfg.embed_dim,
        cfg.hidden_dim,
        cfg.heads,
        cfg.num_classes,
        *cfg.sides,
        *cfg.layers,
    ]


def save_checkpoint(path, cfg: RavitConfig, params: RavitParams) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    fields = _arch_fields(cfg)
    chunks.append(struct.pack(f"<{len(fields)}I", *fields))
    for name, tensor in params.named_tensors():
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(tensor.array.astype("<f8", copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise DataFormatError(
                f"{self.path}: truncated while reading {what} at byte offset {self.off}"
            )
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32s(self, n: int, what: str) -> tuple[int, ...]:
        return struct.unpack(f"<{n}I", self.take(4 * n, what))


def load_checkpoint(path) -> tuple[RavitConfig, RavitParams]:
    """Read a container; the returned config carries default exit/loss fields."""
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    if r.take(4, "magic") != MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a checkpoint")
    (version,) = r.u32s(1, "version")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    (branches,) = r.u32s(1, "branch count")
    patch, channels, embed_dim, hidden_dim, heads, num_classes = r.u32s(6, "architecture")
    sides = r.u32s(branches, "branch sides")
    layers = r.u32s(branches, "branch layers")
    cfg = RavitConfig(
        sides=sides,
        layers=layers,
        patch=patch,
        embed_dim=embed_dim,
        hidden_dim=hidden_dim,
        heads=heads,
        num_classes=num_classes,
        channels=channels,
    )

    tensors: dict[str, Tensor] = {}
    while r.off < len(blob):
        (name_len,) = struct.unpack("<H", r.take(2, "tensor name length"))
        name = r.take(name_len, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1, "tensor rank"))
        dims = r.u32s(rank, f"dims of {name}") if rank else ()
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(8 * count, f"payload of {name}")
        arr = np.frombuffer(payload, dtype="<f8").reshape(dims)
        tensors[name] = Tensor._wrap(arr.copy())

    def fetch(name: str, shape: tuple[int, ...]) -> Tensor:
        t = tensors.pop(name, None)
        if t is None:
            raise DataFormatError(f"{path}: missing tensor {name}")
        if t.shape != shape:
            raise DataFormatError(f"{path}: tensor {name} has shape {t.shape}, expected {shape}")
        return t

    params = build_ravit_params(cfg, fetch)
    if tensors:
        raise DataFormatError(f"{path}: unexpected tensors {sorted(tensors)}")
    return cfg, params


def arch_mismatch(cfg_a: RavitConfig, cfg_b: RavitConfig) -> list[str]:
    """Names of architecture fields on which two configs disagree."""
    fields = ("sides", "layers", "patch", "channels", "embed_dim", "hidden_dim", "heads", "num_classes")
    return [
        f"{f}: {getattr(cfg_a, f)!r} != {getattr(cfg_b, f)!r}"
        for f in fields
        if getattr(cfg_a, f) != getattr(cfg_b, f)
    ]
