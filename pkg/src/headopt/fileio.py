"""File formats: chunked binary containers, raw tensor dumps, PNG, OBJ.

Chunked container layout (little-endian throughout):

    magic (4 bytes) | u32 field count | fields...
    field: u16 name length | name utf-8 | u8 dtype tag length | dtype tag ascii
           | u8 ndim | u32 per dimension | raw row-major payload

Dtype tags: f32, f64, i32, i64, u8, b8.  The same container backs model
files (magic ``HDM1``) and checkpoints (``CKP1``).  Single tensors are
dumped with magic ``TNS1`` followed by one field body without a name.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ModelFormatError

MAGIC_MODEL = b"HDM1"
MAGIC_CHECKPOINT = b"CKP1"
MAGIC_TENSOR = b"TNS1"

_DTYPE_TAGS = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
    "b8": np.dtype("?"),
}
_TAG_FOR_KIND = {
    ("f", 4): "f32",
    ("f", 8): "f64",
    ("i", 4): "i32",
    ("i", 8): "i64",
    ("u", 1): "u8",
    ("b", 1): "b8",
}


def _dtype_tag(arr: np.ndarray) -> str:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _TAG_FOR_KIND:
        raise ModelFormatError(f"unsupported dtype {arr.dtype}")
    return _TAG_FOR_KIND[key]


def _write_array_body(fh, arr: np.ndarray) -> None:
    tag = _dtype_tag(arr)
    # astype (not ascontiguousarray) keeps 0-d shapes intact
    arr = np.asarray(arr).astype(_DTYPE_TAGS[tag], copy=False)
    fh.write(struct.pack("<B", len(tag)))
    fh.write(tag.encode("ascii"))
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ModelFormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_array_body(fh) -> np.ndarray:
    (tag_len,) = struct.unpack("<B", _read_exact(fh, 1))
    tag = _read_exact(fh, tag_len).decode("ascii")
    if tag not in _DTYPE_TAGS:
        raise ModelFormatError(f"unknown dtype tag {tag!r}")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = _read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def write_chunked(path, magic: bytes, arrays: dict[str, np.ndarray]) -> None:
    """Write a named-tensor container."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            _write_array_body(fh, np.asarray(arr))


def read_chunked(path, magic: bytes) -> dict[str, np.ndarray]:
    """Read a named-tensor container, verifying the magic."""
    path = Path(path)
    with path.open("rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise ModelFormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            out[name] = _read_array_body(fh)
        extra = fh.read(1)
        if extra:
            raise ModelFormatError(f"{path}: trailing bytes after {count} fields")
    return out


def save_tensor(path, arr: np.ndarray) -> None:
    """Raw tensor dump: magic TNS1, dtype tag, shape, little-endian payload."""
    with Path(path).open("wb") as fh:
        fh.write(MAGIC_TENSOR)
        _write_array_body(fh, np.asarray(arr))


def load_tensor(path) -> np.ndarray:
    with Path(path).open("rb") as fh:
        got = fh.read(4)
        if got != MAGIC_TENSOR:
            raise ModelFormatError(f"{path}: bad magic {got!r}")
        return _read_array_body(fh)


def save_png(path, image: np.ndarray) -> None:
    """8-bit PNG export.

    [H,W] float in [0,1] or bool -> greyscale (masks become 0/255);
    [3,H,W] float in [0,1] -> RGB.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        if image.dtype == bool:
            pix = np.where(image, 255, 0).astype(np.uint8)
        else:
            pix = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pix, mode="L").save(path)
    elif image.ndim == 3 and image.shape[0] == 3:
        pix = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(np.transpose(pix, (1, 2, 0)), mode="RGB").save(path)
    else:
        raise ModelFormatError(f"cannot export image of shape {image.shape}")


def load_png(path) -> np.ndarray:
    """Inverse of save_png: greyscale -> [H,W], RGB -> [3,H,W], floats in [0,1]."""
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        return arr
    return np.transpose(arr[:, :, :3], (2, 0, 1))


def export_obj(path, vertices: np.ndarray, faces: np.ndarray, uv: np.ndarray | None = None) -> None:
    """Wavefront OBJ with per-vertex UVs (vt index equals v index)."""
    with Path(path).open("w") as fh:
        for v in np.asarray(vertices, dtype=np.float64):
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        if uv is not None:
            for t in np.asarray(uv, dtype=np.float64):
                fh.write(f"vt {t[0]:.8f} {t[1]:.8f}\n")
        for f in np.asarray(faces):
            a, b, c = int(f[0]) + 1, int(f[1]) + 1, int(f[2]) + 1
            if uv is not None:
                fh.write(f"f {a}/{a} {b}/{b} {c}/{c}\n")
            else:
                fh.write(f"f {a} {b} {c}\n")
