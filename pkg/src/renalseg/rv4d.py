"""RV4D: self-describing binary container for volumes and label maps.

Layout (all integers little-endian): magic "RV4D"; u32 version=1; u32 ndims;
u32 per dim; u8 dtype code (1 = float32, 2 = uint8 labels); three f32 voxel
spacings (x, y, z) in mm; u32 n_timepoints followed by that many f32 seconds
(0 for static label maps); payload row-major; trailing CRC-32 of everything
before it.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .binio import atomic_write_bytes
from .preprocess import Volume4D

MAGIC = b"RV4D"
VERSION = 1
DTYPE_FLOAT32 = 1
DTYPE_UINT8 = 2
_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_UINT8: np.dtype(np.uint8)}


class Rv4dError(Exception):
    pass


def write_rv4d(path, data, voxel_spacing_mm, time_points_sec=None):
    """Serialize a float32 volume or uint8 label map (atomic write)."""
    data = np.asarray(data)
    if data.dtype == np.uint8:
        code = DTYPE_UINT8
        payload = np.ascontiguousarray(data).tobytes()
    else:
        code = DTYPE_FLOAT32
        payload = np.ascontiguousarray(data, dtype="<f4").tobytes()

    times = np.asarray([] if time_points_sec is None else time_points_sec, dtype="<f4")
    chunks = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", data.ndim),
        struct.pack(f"<{data.ndim}I", *data.shape),
        struct.pack("<B", code),
        struct.pack("<3f", *voxel_spacing_mm),
        struct.pack("<I", times.size),
        times.tobytes(),
        payload,
    ]
    body = b"".join(chunks)
    atomic_write_bytes(path, body + struct.pack("<I", zlib.crc32(body)))


def read_rv4d(path):
    """Parse an RV4D file; returns (data, voxel_spacing_mm, time_points_sec).

    ``time_points_sec`` is None for static files. Corruption (bad magic,
    truncation, CRC mismatch) raises Rv4dError naming the file.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise Rv4dError(f"{path}: truncated file ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise Rv4dError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4])
    if stored_crc != actual_crc:
        raise Rv4dError(
            f"{path}: CRC mismatch at byte offset {len(blob) - 4} "
            f"(stored {stored_crc:#010x}, computed {actual_crc:#010x})"
        )

    offset = 4
    try:
        (version,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if version != VERSION:
            raise Rv4dError(f"{path}: unsupported version {version}")
        (ndims,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndims}I", blob, offset)
        offset += 4 * ndims
        (code,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        spacing = struct.unpack_from("<3f", blob, offset)
        offset += 12
        (n_times,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        times = np.frombuffer(blob, dtype="<f4", count=n_times, offset=offset).copy()
        offset += 4 * n_times
    except struct.error as exc:
        raise Rv4dError(f"{path}: truncated header: {exc}") from None

    if code not in _DTYPES:
        raise Rv4dError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPES[code]
    size = int(np.prod(dims, dtype=np.int64)) if ndims else 1
    expected = size * dtype.itemsize
    payload = blob[offset : offset + expected]
    if len(payload) != expected or offset + expected != len(blob) - 4:
        raise Rv4dError(
            f"{path}: payload length mismatch (expected {expected} bytes, "
            f"found {len(blob) - 4 - offset})"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if code == DTYPE_FLOAT32:
        data = data.astype(np.float32, copy=False)
    return data, tuple(float(s) for s in spacing), (times if n_times else None)


def write_volume(path, vol):
    write_rv4d(path, vol.data, vol.voxel_spacing_mm, vol.time_points_sec)


def read_volume(path):
    """Read a 4D float volume into a Volume4D."""
    data, spacing, times = read_rv4d(path)
    if data.ndim != 4 or times is None:
        raise Rv4dError(f"{path}: not a 4D time-resolved volume")
    return Volume4D(data, spacing, times.astype(np.float64))


def write_labels(path, labels, voxel_spacing_mm):
    write_rv4d(path, np.asarray(labels, dtype=np.uint8), voxel_spacing_mm)


def read_labels(path):
    data, spacing, _ = read_rv4d(path)
    if data.dtype != np.uint8 or data.ndim != 3:
        raise Rv4dError(f"{path}: not a 3D label map")
    return data, spacing
