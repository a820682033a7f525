"""Little-endian binary containers for feature maps, label maps, banks and models.

Layouts::

    SRFT  magic | version u32 | h u32 | w u32 | d u32 | h_img u32 | w_img u32 | h*w*d float32
    SRLB  same header as SRFT, u8 payload (0 normal, 1 anomaly, 255 ignored/unknown)
    SRBK  magic | version u32 | T u32 | d u32 | seed u64 | ratio float32 | T*d float32
    SRMD  magic | version u32 | n u32 | n hyperparameters u32
          | sections u32 | per section: name_len u16, name utf-8, ndim u32, dims u32..., float32 payload
"""
import struct
from pathlib import Path

import numpy as np

from .errors import HeaderError, MagicMismatchError, TruncatedPayloadError

VERSION = 1
LABEL_IGNORED = 255

_MAP_HEADER = struct.Struct("<4s6I")
_BANK_HEADER = struct.Struct("<4s3IQf")


def _check_magic(buf, magic):
    if len(buf) < 4:
        raise HeaderError(f"file too short for {magic!r} header ({len(buf)} bytes)")
    if buf[:4] != magic:
        raise MagicMismatchError(f"expected magic {magic!r}, found {bytes(buf[:4])!r}")


def _unpack_header(buf, header, magic):
    _check_magic(buf, magic)
    if len(buf) < header.size:
        raise HeaderError(f"truncated {magic!r} header")
    fields = header.unpack_from(buf)
    if fields[1] != VERSION:
        raise HeaderError(f"unsupported {magic!r} version {fields[1]}")
    return fields


def _take_payload(buf, offset, count, dtype, magic):
    nbytes = count * np.dtype(dtype).itemsize
    have = len(buf) - offset
    if have < nbytes:
        raise TruncatedPayloadError(f"{magic!r} payload has {have} bytes, expected {nbytes}")
    if have > nbytes:
        raise HeaderError(f"{magic!r} payload has {have - nbytes} trailing bytes")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).copy()


def encode_map(arr, image_extent=None, magic=b"SRFT"):
    """Serialize an ``h x w`` or ``h x w x d`` array to bytes."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("map containers hold 2-D or 3-D arrays")
    dtype = "<f4" if magic == b"SRFT" else "u1"
    h, w, d = arr.shape
    h_img, w_img = image_extent if image_extent is not None else (h, w)
    head = _MAP_HEADER.pack(magic, VERSION, h, w, d, int(h_img), int(w_img))
    return head + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def decode_map(buf, magic=b"SRFT"):
    """Inverse of :func:`encode_map`; returns ``(array h x w x d, (h_img, w_img))``."""
    _, _, h, w, d, h_img, w_img = _unpack_header(buf, _MAP_HEADER, magic)
    if min(h, w, d) < 1:
        raise HeaderError(f"non-positive extent {h}x{w}x{d}")
    dtype = "<f4" if magic == b"SRFT" else "u1"
    data = _take_payload(buf, _MAP_HEADER.size, h * w * d, dtype, magic)
    data = data.reshape(h, w, d)
    if magic == b"SRFT":
        data = data.astype(np.float32)
    return data, (h_img, w_img)


def write_map(path, arr, image_extent=None, magic=b"SRFT"):
    Path(path).write_bytes(encode_map(arr, image_extent, magic))


def read_map(path, magic=b"SRFT"):
    return decode_map(Path(path).read_bytes(), magic)


def write_label_map(path, labels, image_extent=None):
    """Write an integer label map; -1 and the ignored sentinel both become 255."""
    labels = np.asarray(labels)
    out = np.where(labels < 0, LABEL_IGNORED, labels).astype(np.uint8)
    write_map(path, out, image_extent, magic=b"SRLB")


def read_label_map(path):
    data, extent = read_map(path, magic=b"SRLB")
    return data[:, :, 0], extent


def encode_bank(entries, seed, ratio):
    entries = np.ascontiguousarray(entries, dtype="<f4")
    t, d = entries.shape
    return _BANK_HEADER.pack(b"SRBK", VERSION, t, d, int(seed), float(ratio)) + entries.tobytes()


def decode_bank(buf):
    _, _, t, d, seed, ratio = _unpack_header(buf, _BANK_HEADER, b"SRBK")
    if t < 1 or d < 1:
        raise HeaderError(f"bank with non-positive extent {t}x{d}")
    data = _take_payload(buf, _BANK_HEADER.size, t * d, "<f4", b"SRBK")
    return data.reshape(t, d).astype(np.float32), seed, ratio


def encode_model(hparams, sections):
    """Serialize integer hyperparameters and named float32 arrays.

    ``sections`` is an ordered mapping of name -> array.
    """
    parts = [struct.pack("<4sII", b"SRMD", VERSION, len(hparams))]
    parts.append(struct.pack(f"<{len(hparams)}I", *[int(v) for v in hparams]))
    parts.append(struct.pack("<I", len(sections)))
    for name, arr in sections.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_model(buf):
    _check_magic(buf, b"SRMD")
    view = memoryview(buf)
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise TruncatedPayloadError("SRMD container ends inside a field")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    version, n = take("<II")
    if version != VERSION:
        raise HeaderError(f"unsupported 'SRMD' version {version}")
    hparams = list(take(f"<{n}I"))
    (n_sections,) = take("<I")
    sections = {}
    for _ in range(n_sections):
        (name_len,) = take("<H")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        nbytes = 4 * count
        if pos + nbytes > len(buf):
            raise TruncatedPayloadError(f"SRMD section {name!r} is truncated")
        sections[name] = np.frombuffer(buf, "<f4", count, pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(buf):
        raise HeaderError("SRMD container has trailing bytes")
    return hparams, sections
