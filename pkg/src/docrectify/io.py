"""File formats: binary PPM images, Middlebury ``.flo`` flows and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"DRCKPT\\0\\0"          8-byte magic
    uint32 version
    uint32 header_length
    header                 UTF-8 JSON, keys sorted
    payload                float32 little-endian tensors, row-major

The header carries a ``tensors`` directory of ``[name, shape, offset]``
entries (offsets relative to the start of the payload, in bytes) along with
arbitrary JSON metadata such as the run configuration.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

CHECKPOINT_MAGIC = b"DRCKPT\0\0"
CHECKPOINT_VERSION = 1
FLO_MAGIC = b"PIEH"  # float32 202021.25


def to_uint8(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_ppm(path, image) -> None:
    """Write ``[H, W, 3]`` values in [0, 1] (or uint8) as binary P6."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"PPM needs an [H, W, 3] image, got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    H, W, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # a single whitespace byte ends the header


def read_ppm(path, as_float: bool = True) -> np.ndarray:
    buf = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), offset = _ppm_tokens(buf, 4)
        W, H, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise ValidationError(f"{path}: malformed PPM header") from exc
    if magic != b"P6" or maxval != 255:
        raise ValidationError(f"{path}: only binary P6 with maxval 255 is supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=H * W * 3, offset=offset)
    img = data.reshape(H, W, 3)
    return (img.astype(np.float32) / 255.0) if as_float else img.copy()


def write_flo(path, flow) -> None:
    """Middlebury container: magic, int32 width, int32 height, float32 pairs."""
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValidationError(f"flow needs shape [H, W, 2], got {flow.shape}")
    H, W, _ = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", W, H))
        fh.write(np.ascontiguousarray(flow).tobytes())


def read_flo(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != FLO_MAGIC:
        raise ValidationError(f"{path}: not a .flo file")
    W, H = struct.unpack("<ii", buf[4:12])
    if W < 1 or H < 1 or len(buf) != 12 + W * H * 8:
        raise ValidationError(f"{path}: truncated or inconsistent .flo file")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(H, W, 2).astype(np.float32)


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    directory = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")  # tobytes() is C order; keeps 0-d shapes
        directory.append([name, list(a.shape), offset])
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = _dumps({"meta": meta or {}, "tensors": directory})
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, tensors)`` with tensors in file order."""
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", buf[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    payload_len = len(buf) - base
    tensors = {}
    end_prev = 0
    for name, shape, offset in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset < end_prev or offset + nbytes > payload_len:
            raise ValidationError(f"{path}: tensor {name} overlaps or runs past the payload")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=base + offset)
        tensors[name] = arr.reshape(tuple(shape)).astype(np.float32)
        end_prev = offset + nbytes
    return header["meta"], tensors
