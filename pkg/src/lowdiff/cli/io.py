"""Binary containers: checkpoints ("LDIF") and raw tensors ("LDTN").

All integers and payloads are little-endian.

Checkpoint layout::

    b"LDIF" | u32 version | 32-byte config digest | u64 step
    u32 n_params, then per parameter: tensor record
    u32 n_opt, then per entry: u16 name_len | name | u64 t | m record | v record
    u32 rng_len | rng state (UTF-8 JSON, may be empty)

    tensor record = u16 name_len | name | u8 dtype | u8 rank | u32 shape[rank] | payload

TensorFile layout::

    b"LDTN" | u32 version | u8 dtype | u8 rank | u32 shape[rank] | payload
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..numerics import AdamState, ParamStore

CKPT_MAGIC = b"LDIF"
TENSOR_MAGIC = b"LDTN"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    """Malformed, truncated or incompatible file."""


class DigestMismatch(FormatError):
    """Checkpoint was written under a different architecture configuration."""


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.buf = memoryview(data)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.what}: truncated at byte {self.pos} (needed {n} more, {len(self.buf) - self.pos} left)"
            )
        out = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes")


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return DTYPE_CODES[dt]


def _write_array(out: io.BytesIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _dtype_code(arr)
    if arr.ndim > 255:
        raise FormatError("rank above 255")
    out.write(struct.pack("<BB", code, arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype=CODE_DTYPES[code]).tobytes())


def _read_array(r: _Reader) -> np.ndarray:
    code, rank = r.unpack("BB")
    if code not in CODE_DTYPES:
        raise FormatError(f"{r.what}: unknown dtype code {code}")
    shape = r.unpack(f"{rank}I") if rank else ()
    dt = CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    payload = r.take(count * dt.itemsize)
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def _write_name(out: io.BytesIO, name: str) -> None:
    raw = name.encode("utf-8")
    out.write(struct.pack("<H", len(raw)))
    out.write(raw)


def _read_name(r: _Reader) -> str:
    (n,) = r.unpack("H")
    try:
        return r.take(n).decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{r.what}: invalid name bytes") from e


# -- tensor files ----------------------------------------------------------------------


def tensor_bytes(arr: np.ndarray) -> bytes:
    out = io.BytesIO()
    out.write(TENSOR_MAGIC)
    out.write(struct.pack("<I", VERSION))
    _write_array(out, arr)
    return out.getvalue()


def tensor_from_bytes(data: bytes, what: str = "tensor file") -> np.ndarray:
    r = _Reader(data, what)
    if r.take(4) != TENSOR_MAGIC:
        raise FormatError(f"{what}: bad magic (not an LDTN tensor file)")
    (version,) = r.unpack("I")
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    arr = _read_array(r)
    r.done()
    return arr


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    return tensor_from_bytes(data, str(path))


# -- checkpoints -----------------------------------------------------------------------------


@dataclass
class Checkpoint:
    digest: bytes
    step: int
    params: dict  # name -> array, in insertion order
    optim: dict = field(default_factory=dict)  # name -> AdamState
    rng_state: Optional[dict] = None

    @classmethod
    def from_store(cls, store: ParamStore, digest: bytes, step: int, rng: Optional[np.random.Generator] = None):
        return cls(
            digest,
            step,
            {k: t.data for k, t in store.params.items()},
            dict(store.state),
            None if rng is None else rng.bit_generator.state,
        )

    def restore(self, store: ParamStore) -> None:
        """Copy parameters and optimizer moments into a store of the same layout."""
        missing = set(store.names()) ^ set(self.params)
        if missing:
            raise FormatError(f"checkpoint/network parameter names differ: {sorted(missing)[:5]}")
        for k, v in self.params.items():
            if store[k].shape != v.shape or store[k].dtype != v.dtype:
                raise FormatError(f"{k}: checkpoint {v.dtype}{v.shape} vs network {store[k].dtype}{store[k].shape}")
        for k, v in self.params.items():
            store.set(k, v.copy())
        store.state = {k: AdamState(s.m.copy(), s.v.copy(), s.t) for k, s in self.optim.items()}

    def rng(self) -> Optional[np.random.Generator]:
        if self.rng_state is None:
            return None
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    if len(ck.digest) != 32:
        raise FormatError("digest must be 32 bytes")
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(ck.digest)
    out.write(struct.pack("<Q", ck.step))
    out.write(struct.pack("<I", len(ck.params)))
    for name, arr in ck.params.items():
        _write_name(out, name)
        _write_array(out, arr)
    out.write(struct.pack("<I", len(ck.optim)))
    for name, st in ck.optim.items():
        _write_name(out, name)
        out.write(struct.pack("<Q", st.t))
        _write_array(out, st.m)
        _write_array(out, st.v)
    rng = b"" if ck.rng_state is None else json.dumps(ck.rng_state, sort_keys=True).encode()
    out.write(struct.pack("<I", len(rng)))
    out.write(rng)
    return out.getvalue()


def checkpoint_from_bytes(data: bytes, expect_digest: Optional[bytes] = None, what: str = "checkpoint") -> Checkpoint:
    """Parse a checkpoint; with ``expect_digest`` set, refuse a different one."""
    r = _Reader(data, what)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{what}: bad magic (not an LDIF checkpoint)")
    (version,) = r.unpack("I")
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    digest = r.take(32)
    if expect_digest is not None and digest != expect_digest:
        raise DigestMismatch(
            f"{what}: config digest {digest.hex()[:12]} does not match {expect_digest.hex()[:12]}"
        )
    (step,) = r.unpack("Q")
    (n,) = r.unpack("I")
    params = {}
    for _ in range(n):
        name = _read_name(r)
        if name in params:
            raise FormatError(f"{what}: duplicate parameter {name!r}")
        params[name] = _read_array(r)
    (n,) = r.unpack("I")
    optim = {}
    for _ in range(n):
        name = _read_name(r)
        (t,) = r.unpack("Q")
        optim[name] = AdamState(_read_array(r), _read_array(r), t)
    (n,) = r.unpack("I")
    raw = r.take(n)
    r.done()
    rng_state = None
    if raw:
        try:
            rng_state = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{what}: corrupt RNG state") from e
    return Checkpoint(digest, step, params, optim, rng_state)


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path, expect_digest: Optional[bytes] = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    return checkpoint_from_bytes(data, expect_digest, str(path))
