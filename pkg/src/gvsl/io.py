"""Binary volume files, checkpoints and JSON manifests.

Volume file (little-endian)::

    magic  "GVOL"   4 bytes
    version         u16
    dtype tag       u8   (1 = f32, 2 = f64, 3 = i32)
    Z, Y, X         3 x u32
    spacing         3 x f64
    channels        u32
    payload         C-order [channels, Z, Y, X], x fastest

Checkpoint file::

    magic  "GVCK"   4 bytes
    version         u16
    meta length     u32
    meta            UTF-8 JSON, sorted keys (arch, tensor table, scalars)
    payload         tensors back to back, little-endian f64/i64
    sha256          32 bytes over everything before it
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"GVOL"
VOLUME_VERSION = 1
CHECKPOINT_MAGIC = b"GVCK"
CHECKPOINT_VERSION = 1
MAX_PAYLOAD = 1 << 31  # bytes; reads refuse larger headers before allocating

_HEADER = struct.Struct("<4sHB3I3dI")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int32"): 3}
_CK_HEADER = struct.Struct("<4sHI")


class FormatError(ValueError):
    """Bad magic, unsupported version or malformed header."""


class LengthError(FormatError):
    def __init__(self, path, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{path}: payload is {actual} bytes, expected {expected}")


class IntegrityError(ValueError):
    pass


class ArchMismatchError(ValueError):
    def __init__(self, name, detail):
        self.name = name
        super().__init__(f"checkpoint does not match architecture at tensor {name!r}: {detail}")


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- volumes -----------------------------------------------------------------

@dataclass
class Volume:
    data: np.ndarray  # [C, Z, Y, X]
    spacing: tuple = (1.0, 1.0, 1.0)

    @property
    def array(self):
        """The data with a singleton channel axis dropped."""
        return self.data[0] if self.data.shape[0] == 1 else self.data


def encode_volume(data, spacing=(1.0, 1.0, 1.0)):
    a = np.asarray(data)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise FormatError(f"volume must be [Z,Y,X] or [C,Z,Y,X], got shape {a.shape}")
    if a.dtype not in _TAGS:
        raise FormatError(f"unsupported dtype {a.dtype}")
    tag = _TAGS[a.dtype]
    C, Z, Y, X = a.shape
    head = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, tag, Z, Y, X, *map(float, spacing), C)
    return head + np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes()


def decode_volume(buf, path="<bytes>", max_payload=MAX_PAYLOAD):
    if len(buf) < _HEADER.size:
        raise LengthError(path, _HEADER.size, len(buf))
    magic, version, tag, Z, Y, X, sz, sy, sx, C = _HEADER.unpack_from(buf)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
    if version != VOLUME_VERSION:
        raise FormatError(f"{path}: unsupported volume version {version}")
    if tag not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    expected = C * Z * Y * X * dt.itemsize
    if expected > max_payload:
        raise FormatError(f"{path}: header claims {expected} bytes, above limit {max_payload}")
    actual = len(buf) - _HEADER.size
    if actual != expected:
        raise LengthError(path, expected, actual)
    data = np.frombuffer(buf, dtype=dt, offset=_HEADER.size).reshape(C, Z, Y, X)
    return Volume(data.astype(dt.newbyteorder("="), copy=True), (sz, sy, sx))


def write_volume(path, data, spacing=(1.0, 1.0, 1.0)):
    atomic_write(path, encode_volume(data, spacing))


def read_volume(path, max_payload=MAX_PAYLOAD):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) == _HEADER.size:
            # refuse oversized claims before reading the payload
            magic, _, tag, Z, Y, X, _, _, _, C = _HEADER.unpack(head)
            if magic == VOLUME_MAGIC and tag in _DTYPES:
                claimed = C * Z * Y * X * _DTYPES[tag].itemsize
                if claimed > max_payload:
                    raise FormatError(f"{path}: header claims {claimed} bytes, above limit {max_payload}")
        buf = head + f.read()
    return decode_volume(buf, path, max_payload)


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    """Everything needed to resume training bit-exactly."""

    arch: dict
    params: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: dict = field(default_factory=dict)
    lr: float = 1e-4
    rng_state: dict | None = None
    iteration: int = 0
    history: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))
    config: dict = field(default_factory=dict)


def _tensor_items(ck):
    yield from ((f"param/{k}", v) for k, v in sorted(ck.params.items()))
    yield from ((f"adam.m/{k}", v) for k, v in sorted(ck.adam_m.items()))
    yield from ((f"adam.v/{k}", v) for k, v in sorted(ck.adam_v.items()))
    yield "history", np.asarray(ck.history, dtype=np.float64).reshape(-1, 5)


def encode_checkpoint(ck: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in _tensor_items(ck):
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = a.tobytes()
        table.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    meta = {
        "arch": ck.arch,
        "tensors": table,
        "adam_t": {k: int(v) for k, v in sorted(ck.adam_t.items())},
        "lr": float(ck.lr),
        "rng_state": ck.rng_state,
        "iteration": int(ck.iteration),
        "config": ck.config,
    }
    mb = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    body = _CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(mb)) + mb + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(buf, path="<bytes>", max_payload=MAX_PAYLOAD) -> Checkpoint:
    if len(buf) < _CK_HEADER.size + 32:
        raise LengthError(path, _CK_HEADER.size + 32, len(buf))
    magic, version, mlen = _CK_HEADER.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch, file is corrupted")
    start = _CK_HEADER.size
    try:
        meta = json.loads(body[start:start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable metadata ({exc})") from None
    payload = body[start + mlen:]
    total = sum(t["nbytes"] for t in meta["tensors"])
    if total > max_payload:
        raise FormatError(f"{path}: tensors claim {total} bytes, above limit {max_payload}")
    if total != len(payload):
        raise LengthError(path, total, len(payload))
    groups = {"param": {}, "adam.m": {}, "adam.v": {}}
    history = np.zeros((0, 5))
    for t in meta["tensors"]:
        a = np.frombuffer(payload, dtype="<f8", count=t["nbytes"] // 8, offset=t["offset"])
        a = a.astype(np.float64).reshape(t["shape"])
        if t["name"] == "history":
            history = a
        else:
            kind, name = t["name"].split("/", 1)
            groups[kind][name] = a
    return Checkpoint(
        arch=meta["arch"], params=groups["param"], adam_m=groups["adam.m"], adam_v=groups["adam.v"],
        adam_t=meta["adam_t"], lr=meta["lr"], rng_state=meta["rng_state"],
        iteration=meta["iteration"], history=history, config=meta.get("config", {}),
    )


def save_checkpoint(path, ck: Checkpoint):
    atomic_write(path, encode_checkpoint(ck))


def load_checkpoint(path, expect_shapes=None, max_payload=MAX_PAYLOAD) -> Checkpoint:
    """Read and verify a checkpoint.

    ``expect_shapes`` (name -> shape) is the parameter table of the
    architecture the caller is about to load into; the first name (in
    sorted order) whose presence or shape differs raises
    :class:`ArchMismatchError`.
    """
    ck = decode_checkpoint(Path(path).read_bytes(), path, max_payload)
    if expect_shapes is not None:
        check_shapes(ck.params, expect_shapes)
    return ck


def check_shapes(params, expect_shapes):
    for name in sorted(set(params) | set(expect_shapes)):
        if name not in params:
            raise ArchMismatchError(name, "missing from checkpoint")
        if name not in expect_shapes:
            raise ArchMismatchError(name, "not part of the expected architecture")
        got, want = tuple(params[name].shape), tuple(expect_shapes[name])
        if got != want:
            raise ArchMismatchError(name, f"shape {got}, expected {want}")


# -- manifests ---------------------------------------------------------------------

def write_json(path, obj):
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    return json.loads(Path(path).read_text())
