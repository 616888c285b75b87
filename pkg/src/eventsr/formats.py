"""Binary and text containers used across the pipeline.

Event record layout (shared by the in-memory arrays and the EVT1 file):
little-endian, packed, 13 bytes per event:

    u64 t (microseconds), u16 x, u16 y, i8 p

EVT1 file: magic ``EVT1``, u16 width, u16 height, u64 event count, then the
packed records.

TNS1 file (dense tensors): magic ``TNS1``, u8 dtype code, u8 ndim, ndim u32
dims, then the row-major little-endian payload. Dtype codes: 1 = float32,
2 = float64, 3 = int64.

CSV event text: one ``t,x,y,p`` line per event; lines starting with ``#``
are comments/headers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])

_EVT1_MAGIC = b"EVT1"
_EVT1_HEADER = struct.Struct("<HHQ")

_TNS1_MAGIC = b"TNS1"
_TNS1_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_TNS1_CODE_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}


def write_evt1(path: str | Path, events: np.ndarray, width: int, height: int) -> None:
    """Write a packed EVT1 file. ``events`` must use EVENT_DTYPE."""
    if events.dtype != EVENT_DTYPE:
        raise ValueError(f"events dtype must be {EVENT_DTYPE}, got {events.dtype}")
    if not (0 < width <= 0xFFFF and 0 < height <= 0xFFFF):
        raise ValueError(f"sensor size {width}x{height} does not fit u16 fields")
    with open(path, "wb") as fh:
        fh.write(_EVT1_MAGIC)
        fh.write(_EVT1_HEADER.pack(width, height, len(events)))
        fh.write(np.ascontiguousarray(events).tobytes())


def read_evt1(path: str | Path) -> tuple[np.ndarray, int, int]:
    """Read an EVT1 file; returns (events array, width, height)."""
    raw = Path(path).read_bytes()
    if raw[:4] != _EVT1_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}, expected EVT1")
    width, height, count = _EVT1_HEADER.unpack_from(raw, 4)
    body = raw[4 + _EVT1_HEADER.size:]
    expected = count * EVENT_DTYPE.itemsize
    if len(body) != expected:
        raise DataError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    events = np.frombuffer(body, dtype=EVENT_DTYPE).copy()
    return events, width, height


def write_events_csv(path: str | Path, events: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("# t_us,x,y,p\n")
        for t, x, y, p in zip(events["t"], events["x"], events["y"], events["p"]):
            fh.write(f"{t},{x},{y},{p}\n")


def read_events_csv(path: str | Path) -> np.ndarray:
    """Parse ``t,x,y,p`` lines into an EVENT_DTYPE array (bounds unchecked)."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                t, x, y, p = (int(v) for v in parts)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-integer field ({exc})") from None
            rows.append((t, x, y, p))
    out = np.zeros(len(rows), dtype=EVENT_DTYPE)
    for i, (t, x, y, p) in enumerate(rows):
        if p not in (-1, 1):
            raise DataError(f"{path}: event {i}: polarity {p} not in {{-1,1}}")
        if t < 0 or x < 0 or y < 0:
            raise DataError(f"{path}: event {i}: negative field")
        out[i] = (t, x, y, p)
    return out


def write_tns1(path: str | Path, array: np.ndarray) -> None:
    """Write a dense tensor. Dtype must be float32, float64, or int64."""
    arr = np.ascontiguousarray(array)
    code = _TNS1_CODE_OF.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported TNS1 dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    header = _TNS1_MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tns1(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _TNS1_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}, expected TNS1")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    if code not in _TNS1_CODES:
        raise DataError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 6)
    dtype = _TNS1_CODES[code]
    offset = 6 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = count * dtype.itemsize
    body = raw[offset:]
    if len(body) != expected:
        raise DataError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    return np.frombuffer(body, dtype=dtype).reshape(dims).copy()


def save_png(path: str | Path, image: np.ndarray, bits: int = 8) -> None:
    """Save a [0,1] grayscale image as an 8- or 16-bit PNG."""
    if image.ndim != 2:
        raise ValueError(f"expected 2D grayscale image, got shape {image.shape}")
    if bits == 8:
        data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(data, mode="L").save(path)
    elif bits == 16:
        data = np.clip(np.rint(image * 65535.0), 0, 65535).astype(np.uint16)
        Image.fromarray(data, mode="I;16").save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def load_png(path: str | Path) -> np.ndarray:
    """Load a grayscale PNG into a float32 [0,1] array."""
    img = Image.open(path)
    if img.mode == "I;16":
        return (np.asarray(img, dtype=np.float32) / 65535.0).astype(np.float32)
    if img.mode != "L":
        img = img.convert("L")
    return (np.asarray(img, dtype=np.float32) / 255.0).astype(np.float32)
