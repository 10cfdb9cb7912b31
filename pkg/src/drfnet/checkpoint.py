"""Binary checkpoint format.

Byte layout, all integers little-endian::

    0   8   magic  b"DRFCKPT\\0"
    8   4   u32 format version
    12  8   u64 config length n, then n bytes of UTF-8 TOML (resolved run config)
    .   8   u64 rng seed
    .   8   u64 rng counter
    .   8   u64 global step
    .   8   u64 optimizer step
    .   4   u32 array count, then per array in declaration order:
                u16 name length, name bytes (ASCII),
                u8 ndim, ndim x u64 dims,
                prod(dims) x f64 payload
    .   4   u32 CRC-32 of every preceding byte

Arrays are the model parameters in declaration order, then the Adam first
moments (``adam.m.<name>``), then the second moments (``adam.v.<name>``).
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .core import DRFError, MissingFile, SplitMixRNG, dumps_config, loads_config
from .network import Model
from .trainer import AdamState, TrainState

MAGIC = b"DRFCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(DRFError):
    pass


class VersionMismatch(CheckpointError):
    def __init__(self, found: int, expected: int = FORMAT_VERSION):
        self.found = found
        self.expected = expected
        super().__init__(f"checkpoint format version {found}, this build reads {expected}")


class CorruptPayload(CheckpointError):
    def __init__(self, offset: int, reason: str = "truncated or corrupt"):
        self.offset = offset
        super().__init__(f"corrupt checkpoint at byte {offset}: {reason}")


def _arrays(state: TrainState):
    params = state.model.params
    yield from params.items()
    for k in params:
        yield f"adam.m.{k}", state.opt.m[k]
    for k in params:
        yield f"adam.v.{k}", state.opt.v[k]


def encode_checkpoint(state: TrainState) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    text = dumps_config(state.config).encode("utf-8")
    out += struct.pack("<Q", len(text)) + text
    seed, counter = state.rng.state
    out += struct.pack("<QQQQ", seed, counter, state.step, state.opt.step)
    arrays = list(_arrays(state))
    out += struct.pack("<I", len(arrays))
    for name, a in arrays:
        raw = name.encode("ascii")
        a = np.asarray(a)
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
        out += np.ascontiguousarray(a, dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.blob):
            raise CorruptPayload(self.pos)
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob: bytes) -> TrainState:
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptPayload(0, "bad magic")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatch(version)
    (n,) = r.unpack("<Q")
    at = r.pos
    try:
        config = loads_config(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, DRFError) as err:
        raise CorruptPayload(at, f"config echo unreadable: {err}") from None
    seed, counter, step, opt_step = r.unpack("<QQQQ")
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("ascii", errors="replace")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}Q")
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(blob):
        raise CorruptPayload(r.pos, "trailing bytes")
    if crc != zlib.crc32(blob[:body_end]) & 0xFFFFFFFF:
        raise CorruptPayload(body_end, "checksum mismatch")

    names = [k for k in arrays if not k.startswith("adam.")]
    dtype = config.dtype
    params = {k: arrays[k].astype(dtype) for k in names}
    try:
        opt = AdamState({k: arrays[f"adam.m.{k}"].astype(dtype) for k in names},
                        {k: arrays[f"adam.v.{k}"].astype(dtype) for k in names}, opt_step)
        input_channels = params["layer0.w"].shape[1]
        classes = params["readout.w"].shape[0]
    except KeyError as err:
        raise CorruptPayload(body_end, f"missing array {err}") from None
    model = Model(input_channels, tuple(config.widths), config.n, config.n_a, classes,
                  config.grid, config.neuron.v_pre, params)
    return TrainState(config, model, opt, SplitMixRNG(seed, counter), step)


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    return decode_checkpoint(path.read_bytes())


def load_model(path) -> Model:
    return load_checkpoint(path).model
