"""Raster stacks in, label maps and images out.

RSK1 layout (little-endian)::

    b"RSK1" | u16 version | u32 C | u32 H | u32 W | C*H*W float32

Payload is channel-major then row-major; NaN marks a missing cell.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .labeling import LabelMap
from .pipeline import RasterStack, boundary_mask

RSK_MAGIC = b"RSK1"
RSK_VERSION = 1
_HEADER = struct.Struct("<4sHIII")


class RasterFormatError(ValueError):
    pass


def write_raster_stack(stack: RasterStack, path) -> None:
    data = np.asarray(stack.data)
    c, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RSK_MAGIC, RSK_VERSION, c, h, w))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_rsk(path) -> RasterStack:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise RasterFormatError(f"{path}: truncated header ({len(blob)} of {_HEADER.size} bytes)")
    magic, version, c, h, w = _HEADER.unpack_from(blob, 0)
    if magic != RSK_MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != RSK_VERSION:
        raise RasterFormatError(f"{path}: unsupported version {version} at byte 4")
    expected = c * h * w * 4
    payload = len(blob) - _HEADER.size
    if payload != expected:
        raise RasterFormatError(
            f"{path}: payload is {payload} bytes from byte {_HEADER.size}, expected {expected}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(c, h, w)
    stem = Path(path).stem
    return RasterStack(data.astype(np.float64), [f"{stem}_{i}" for i in range(c)])


def read_csv_grid(path) -> np.ndarray:
    """Numeric grid, one row per line, comma separated; empty cells are NaN."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            row = []
            for col, cell in enumerate(line.split(","), start=1):
                cell = cell.strip()
                try:
                    row.append(float(cell) if cell else np.nan)
                except ValueError:
                    raise RasterFormatError(f"{path}: row {lineno}, column {col}: not a number: {cell!r}")
            if rows and len(row) != len(rows[0]):
                raise RasterFormatError(
                    f"{path}: row {lineno} has {len(row)} cells, expected {len(rows[0])}"
                )
            rows.append(row)
    if not rows:
        raise RasterFormatError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def read_raster_stack(paths) -> RasterStack:
    """Read one RSK1 file, or a list of single-channel CSV grids of equal size."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    paths = [Path(p) for p in paths]
    if len(paths) == 1 and paths[0].suffix.lower() != ".csv":
        return _read_rsk(paths[0])
    grids = []
    for p in paths:
        g = read_csv_grid(p)
        if grids and g.shape != grids[0].shape:
            raise RasterFormatError(f"{p}: grid is {g.shape}, expected {grids[0].shape}")
        grids.append(g)
    return RasterStack(np.stack(grids), [p.stem for p in paths])


def write_csv_grid(grid: np.ndarray, path) -> None:
    grid = np.asarray(grid)
    with open(path, "w") as fh:
        for row in grid:
            if np.issubdtype(grid.dtype, np.integer):
                fh.write(",".join(str(int(v)) for v in row))
            else:
                fh.write(",".join("" if np.isnan(v) else repr(float(v)) for v in row))
            fh.write("\n")


def write_label_map(labels: LabelMap, path, format: str | None = None) -> None:  # noqa: A002
    fmt = format or ("csv" if str(path).lower().endswith(".csv") else "pgm16")
    lab = np.asarray(labels.labels)
    if fmt == "csv":
        write_csv_grid(lab.astype(np.int64), path)
    elif fmt == "pgm16":
        if labels.num_labels > 65536 or (lab.size and lab.max() > 65535):
            raise ValueError(f"{labels.num_labels} labels do not fit in a 16-bit PGM")
        h, w = lab.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
            fh.write(lab.astype(">u2").tobytes())
    else:
        raise ValueError(f"unknown label format {fmt!r}")


def read_label_map(path) -> LabelMap:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        lab = read_csv_grid(path).astype(np.int64)
    else:
        lab = _read_pgm16(path)
    return LabelMap(lab, int(lab.max()) + 1 if lab.size else 0)


def _read_pgm16(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RasterFormatError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise RasterFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    if len(blob) - pos != need:
        raise RasterFormatError(f"{path}: pixel data is {len(blob) - pos} bytes from byte {pos}, expected {need}")
    return np.frombuffer(blob, dtype=dtype, offset=pos).reshape(h, w).astype(np.int64)


def to_uint8(channel: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; constant channels map to mid-grey 128."""
    ch = np.asarray(channel, dtype=np.float64)
    finite = np.isfinite(ch)
    if not finite.any():
        return np.full(ch.shape, 128, dtype=np.uint8)
    lo, hi = ch[finite].min(), ch[finite].max()
    if hi == lo:
        return np.full(ch.shape, 128, dtype=np.uint8)
    scaled = np.where(finite, (ch - lo) / (hi - lo), 0.0)
    return np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8)


def write_image(channel: np.ndarray, path, boundaries: np.ndarray | None = None) -> None:
    """8-bit PNG of one channel (H x W) or an RGB triple (3 x H x W).

    ``boundaries`` is an H x W label grid; its region borders are drawn white.
    """
    arr = np.asarray(channel)
    if arr.ndim == 3 and arr.shape[0] == 3:
        pix = np.stack([to_uint8(c) for c in arr], axis=-1)
    elif arr.ndim == 2:
        pix = to_uint8(arr)
    elif arr.ndim == 3 and arr.shape[0] == 1:
        pix = to_uint8(arr[0])
    else:
        raise ValueError(f"cannot render array of shape {arr.shape}")
    if boundaries is not None:
        pix = pix.copy()
        pix[boundary_mask(boundaries)] = 255
    Image.fromarray(pix).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    return np.asarray(Image.open(path))
