"""Named parameter collections, deterministic init, and checkpoint files.

Checkpoint container (little-endian throughout):

    magic "ISPW" | u32 version=1 | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 rank | u32 dim per axis
               | float32 data, C order

Entries are written sorted by name so files are byte-identical for equal
contents. Optimizer state rides in the same container under "opt." names.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import FormatError, ShapeError

CHECKPOINT_MAGIC = b"ISPW"
CHECKPOINT_VERSION = 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class SplitMix64:
    """Counter-based splitmix64 stream; identical output for identical seeds."""

    def __init__(self, seed: int):
        self._state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = self._state + steps * _GOLDEN
            self._state = z[-1] if n > 0 else self._state
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) from the top 53 bits of each word."""
        return (self.next_u64(n) >> np.uint64(11)) * (2.0 ** -53)


class ParamSet:
    """Insertion-ordered name -> Tensor mapping with unique, fixed shapes."""

    def __init__(self):
        from .engine import Tensor  # local import to avoid a cycle at import time
        self._tensor_cls = Tensor
        self._params: dict = {}

    def add(self, name: str, data: np.ndarray):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = self._tensor_cls(np.ascontiguousarray(data), name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str):
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
        return out

    def state_dict(self) -> dict:
        return {name: t.data for name, t in self._params.items()}

    def load_values(self, values: dict) -> None:
        for name, t in self._params.items():
            if name not in values:
                raise KeyError(f"missing parameter {name!r} in loaded state")
            arr = np.asarray(values[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"parameter {name!r}: stored shape {arr.shape}, expected {t.data.shape}")
            t.data[...] = arr


def kaiming_uniform(rng: SplitMix64, shape: tuple, fan_in: int) -> np.ndarray:
    """Uniform in [-sqrt(6/fan_in), +sqrt(6/fan_in)], float32, C order."""
    bound = float(np.sqrt(6.0 / fan_in))
    n = int(np.prod(shape))
    u = rng.uniform(n)
    return ((2.0 * u - 1.0) * bound).astype(np.float32).reshape(shape)


def save_checkpoint(path, entries: dict) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name in sorted(entries):
            arr = np.ascontiguousarray(np.asarray(entries[name], dtype=np.float32))
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic in {path}", offset=0)
    if len(blob) < 12:
        raise FormatError(f"truncated checkpoint header in {path}", offset=len(blob))
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    pos = 12
    entries: dict = {}
    for _ in range(count):
        if pos + 2 > len(blob):
            raise FormatError("truncated entry header", offset=pos)
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 1 > len(blob):
            raise FormatError(f"truncated rank for {name!r}", offset=pos)
        rank = blob[pos]
        pos += 1
        dims = []
        for _ in range(rank):
            (d,) = struct.unpack_from("<I", blob, pos)
            dims.append(d)
            pos += 4
        size = int(np.prod(dims)) if dims else 1
        nbytes = 4 * size
        if pos + nbytes > len(blob):
            raise FormatError(f"truncated data for {name!r}", offset=pos)
        arr = np.frombuffer(blob[pos:pos + nbytes], dtype="<f4").reshape(dims)
        entries[name] = arr.astype(np.float32)
        pos += nbytes
    if pos != len(blob):
        raise FormatError("trailing bytes after last checkpoint entry", offset=pos)
    return entries
