"""Binary tensor container used by model checkpoints and session exports.

Layout: magic (4 bytes), format version (u32), entry count (u32), then a
directory of (name, dtype, shape, byte offset) entries, then raw
little-endian float64 payloads. Offsets are relative to the start of the
payload block. All integers are little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC_CHECKPOINT = b"ADMT"
MAGIC_SESSION = b"ADMS"
FORMAT_VERSION = 1
_DTYPE_F64 = 0


class FormatError(ValueError):
    """Corrupt or unexpected bytes in a container file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def pack_tensors(tensors: dict[str, np.ndarray], magic: bytes = MAGIC_CHECKPOINT) -> bytes:
    """Serialize named float64 arrays into one container blob."""
    directory = bytearray()
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        directory += struct.pack("<H", len(raw)) + raw
        directory += struct.pack("<BB", _DTYPE_F64, arr.ndim)
        for dim in arr.shape:
            directory += struct.pack("<I", dim)
        directory += struct.pack("<Q", len(payload))
        payload += arr.tobytes(order="C")
    head = magic + struct.pack("<II", FORMAT_VERSION, len(tensors))
    return bytes(head) + bytes(directory) + bytes(payload)


def unpack_tensors(blob: bytes, magic: bytes = MAGIC_CHECKPOINT) -> dict[str, np.ndarray]:
    """Parse a container blob back into named float64 arrays."""
    if len(blob) < 12:
        raise FormatError("container shorter than its fixed header", len(blob))
    if blob[:4] != magic:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {magic!r}", 0)
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    pos = 12
    entries = []
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            dtype, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            if dtype != _DTYPE_F64:
                raise FormatError(f"unsupported dtype code {dtype}", pos - 2)
            shape = struct.unpack_from(f"<{ndim}I", blob, pos) if ndim else ()
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
        except struct.error as exc:
            raise FormatError(f"truncated directory entry: {exc}", pos) from None
        entries.append((name, shape, offset))
    base = pos
    out: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = base + offset
        end = start + 8 * size
        if end > len(blob):
            raise FormatError(f"payload for {name!r} runs past end of file", start)
        arr = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape)
        out[name] = np.ascontiguousarray(arr)
    return out


def write_container(path, tensors: dict[str, np.ndarray], magic: bytes = MAGIC_CHECKPOINT) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_tensors(tensors, magic=magic))


def read_container(path, magic: bytes = MAGIC_CHECKPOINT) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return unpack_tensors(fh.read(), magic=magic)
