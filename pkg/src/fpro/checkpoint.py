"""Binary checkpoint format.

Little-endian layout::

    b"FPRO" | u32 version | u32 len | key=value lines (utf-8)
    u32 record count
    per record: u16 name len | name | u8 dtype | u8 rank | u32 dims[rank] | raw data
    u32 crc32 of everything before it

Config keys are stored bare; bookkeeping keys carry a ``meta.`` prefix.
Record names are ``param:``, ``buffer:``, ``adam.m:`` or ``adam.v:`` plus the
dotted parameter name.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import FPro, ModelConfig
from .tensor import ShapeError

MAGIC = b"FPRO"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<u8")}
_CODES = {dt.newbyteorder("="): code for code, dt in _DTYPES.items()}


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    """Payload does not match its CRC32."""


class CheckpointShapeError(CheckpointError, ShapeError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    meta: dict[str, str] = field(default_factory=dict)
    version: int = VERSION

    @property
    def dtype(self):
        first = next(iter(self.params.values()), None)
        return np.float64 if first is None else first.dtype

    @property
    def rng_state(self) -> dict | None:
        raw = self.meta.get("rng")
        return None if raw is None else json.loads(raw)

    def apply_to(self, model: FPro) -> FPro:
        """Copy parameters and buffers into ``model``; both name sets must agree."""
        _match("parameter", dict(model.named_parameters()), self.params)
        _match("buffer", dict(model.named_buffers()), self.buffers)
        for name, p in model.named_parameters():
            p.data = self.params[name].copy()
            p.grad = None
        for name, value in self.buffers.items():
            model.set_buffer(name, value.copy())
        return model

    def build_model(self) -> FPro:
        return self.apply_to(FPro(self.config))


def _match(kind: str, live: dict, stored: dict) -> None:
    for name, t in live.items():
        if name not in stored:
            raise CheckpointShapeError(f"{kind} {name!r} missing from checkpoint")
        if tuple(np.shape(t)) != stored[name].shape:
            raise CheckpointShapeError(
                f"{kind} {name!r}: model shape {tuple(np.shape(t))} vs checkpoint {stored[name].shape}")
    for name in stored:
        if name not in live:
            raise CheckpointShapeError(f"checkpoint {kind} {name!r} has no counterpart in the model")


def from_model(model: FPro, iteration: int = 0, optimizer=None, rng_state: dict | None = None,
               meta: dict[str, str] | None = None) -> Checkpoint:
    ck = Checkpoint(
        config=model.config,
        params={n: p.data.copy() for n, p in model.named_parameters()},
        buffers={n: np.array(b, copy=True) for n, b in model.named_buffers()},
        iteration=iteration,
        meta=dict(meta or {}),
    )
    if optimizer is not None:
        ck.adam_m = {n: m.copy() for n, m in optimizer.m.items()}
        ck.adam_v = {n: v.copy() for n, v in optimizer.v.items()}
        ck.meta["adam_step"] = str(optimizer.step)
    if rng_state is not None:
        ck.meta["rng"] = json.dumps(rng_state, sort_keys=True, default=_jsonable)
    return ck


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    raise TypeError(type(obj))


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def encode(ck: Checkpoint) -> bytes:
    items = dict(ck.config.to_items())
    items["meta.iteration"] = str(ck.iteration)
    for k, v in sorted(ck.meta.items()):
        items["meta." + k] = v
    text = "".join(f"{k}={v}\n" for k, v in items.items()).encode("utf-8")
    records = [("param:" + n, a) for n, a in ck.params.items()]
    records += [("buffer:" + n, a) for n, a in ck.buffers.items()]
    records += [("adam.m:" + n, a) for n, a in ck.adam_m.items()]
    records += [("adam.v:" + n, a) for n, a in ck.adam_v.items()]
    parts = [MAGIC, struct.pack("<II", ck.version, len(text)), text, struct.pack("<I", len(records))]
    parts += [_record(n, a) for n, a in records]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, ck_or_model, **kwargs) -> Checkpoint:
    ck = ck_or_model if isinstance(ck_or_model, Checkpoint) else from_model(ck_or_model, **kwargs)
    Path(path).write_bytes(encode(ck))
    return ck


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 4:
        raise CheckpointTruncatedError(f"only {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    (n_text,) = r.unpack("<I")
    try:
        text = r.take(n_text).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"config block is not utf-8: {exc}") from None
    (count,) = r.unpack("<I")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "adam.m": {}, "adam.v": {}}
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode("utf-8", errors="replace")
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code} for {name!r}")
        dims = r.unpack(f"<{rank}I")
        dt = _DTYPES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(n_bytes), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        kind, _, key = name.partition(":")
        if kind not in groups:
            raise CheckpointFormatError(f"unknown record kind in {name!r}")
        groups[kind][key] = arr
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after checksum")
    actual = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if crc != actual:
        raise CheckpointCorruptError(f"crc32 mismatch: stored {crc:08x}, computed {actual:08x}")

    items, meta = {}, {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointFormatError(f"malformed config line {line!r}")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            items[key] = value
    try:
        config = ModelConfig.from_items(items)
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"bad config block: {exc}") from None
    iteration = int(meta.pop("iteration", "0"))
    return Checkpoint(config, groups["param"], groups["buffer"], groups["adam.m"], groups["adam.v"],
                      iteration, meta, version)


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def load_model(path, config: ModelConfig | None = None) -> FPro:
    """Rebuild the stored model; with ``config`` the weights are loaded into that architecture."""
    ck = load_checkpoint(path)
    return ck.apply_to(FPro(config or ck.config))
