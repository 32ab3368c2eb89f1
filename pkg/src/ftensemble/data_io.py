"""Dataset file formats (External interface).

FTE1 binary tensors: magic b"FTE1", u32 version, u32 count, u32 C, H, W
(H = W = 0 means flat vectors of length C), count * C*H*W (or C)
little-endian float32 values, then count u32 labels. Values are stored as
float32, so a save/load round trip is bit-exact for data that is already
float32-representable (the synthetic generator rounds accordingly).

Manifest CSV: one ``relative_path,label`` row per item (an optional header
row with exactly those names is tolerated), paths relative to the manifest,
images as binary P6 PPM with maxval <= 255; pixel bytes are scaled to
[0, 1] by maxval, so byte 255 maps to 1.0. All images in a manifest must
share one shape.

Malformed input raises DataError with the byte offset of the problem.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .episodes import Dataset
from .errors import DataError

__all__ = ["save_dataset", "load_dataset"]

MAGIC = b"FTE1"
VERSION = 1


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset as FTE1 binary tensors."""
    inputs = dataset.inputs
    count = inputs.shape[0]
    if inputs.ndim == 4:
        c, h, w = inputs.shape[1:]
    else:
        c, h, w = inputs.shape[1], 0, 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIII", VERSION, count, c, h, w))
        fh.write(np.ascontiguousarray(inputs, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())


def _load_fte1(path, role: str) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r} at byte 0")
    if len(raw) < 24:
        raise DataError(f"{path}: truncated header at byte {len(raw)}")
    version, count, c, h, w = struct.unpack_from("<IIIII", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version} at byte 4")
    if count == 0:
        raise DataError(f"{path}: empty dataset (count=0 at byte 8)")
    if c == 0 or (h == 0) != (w == 0):
        raise DataError(f"{path}: invalid shape C={c} H={h} W={w} at byte 12")
    item = c if h == 0 else c * h * w
    data_off = 24
    data_bytes = count * item * 4
    labels_off = data_off + data_bytes
    if len(raw) < labels_off + count * 4:
        raise DataError(
            f"{path}: truncated payload at byte {len(raw)} "
            f"(need {labels_off + count * 4})"
        )
    values = np.frombuffer(raw, dtype="<f4", count=count * item, offset=data_off)
    labels = np.frombuffer(raw, dtype="<u4", count=count, offset=labels_off)
    shape = (count, c) if h == 0 else (count, c, h, w)
    inputs = values.astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(inputs)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise DataError(f"{path}: non-finite value at byte {data_off + 4 * bad}")
    return Dataset(inputs=inputs, labels=labels.astype(np.int64), role=role)


def _read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise DataError(f"{path}: not a P6 PPM (magic {raw[:2]!r} at byte 0)")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise DataError(f"{path}: truncated header at byte {pos}")
        ch = raw[pos : pos + 1]
        if ch == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(raw) and raw[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(raw[start:pos]))
        else:
            raise DataError(f"{path}: unexpected byte {ch!r} at byte {pos}")
    width, height, maxval = fields
    if not 1 <= maxval <= 255:
        raise DataError(f"{path}: unsupported maxval {maxval} at byte {pos}")
    pos += 1  # the single whitespace byte after maxval
    need = width * height * 3
    if len(raw) < pos + need:
        raise DataError(
            f"{path}: truncated pixel data at byte {len(raw)} (need {pos + need})"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    img = pixels.astype(np.float64).reshape(height, width, 3) / maxval
    return img.transpose(2, 0, 1)


def _load_manifest(path, role: str) -> Dataset:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise DataError(f"{path}: expected 'relative_path,label' rows, got {row!r}")
            rows.append((row[0].strip(), row[1].strip()))
    if rows and rows[0] == ("relative_path", "label"):
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: empty manifest")
    images, labels = [], []
    for rel, label_text in rows:
        try:
            labels.append(int(label_text))
        except ValueError:
            raise DataError(f"{path}: non-integer label {label_text!r} for {rel!r}")
        images.append(_read_ppm(path.parent / rel))
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise DataError(f"{path}: images disagree on shape: {sorted(shapes)}")
    return Dataset(inputs=np.stack(images), labels=np.asarray(labels), role=role)


def load_dataset(path, role: str = "source") -> Dataset:
    """Load FTE1 binary tensors, or a PPM manifest when the path ends .csv."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    if path.suffix.lower() == ".csv":
        return _load_manifest(path, role)
    return _load_fte1(path, role)
