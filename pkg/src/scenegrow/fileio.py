"""Artifact persistence: PNG codecs, PLY point clouds, atomic writes, hashing."""

from __future__ import annotations

import hashlib
import io
import os
import tempfile

import numpy as np
from PIL import Image

from .errors import EmptyCloudError, OutputError
from .geometry import PointCloud, ValidityMask


def color_to_u8(values: np.ndarray) -> np.ndarray:
    """[0,1] floats to uint8, rounding half away from zero."""
    return np.clip(np.floor(np.asarray(values) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def u8_to_color(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) / 255.0


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OutputError(f"failed to write {path}: {exc}", path=path) from exc


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# PNG codecs (also used for the remote provider wire format)

def encode_png_rgb(rgb: np.ndarray) -> bytes:
    img = Image.fromarray(color_to_u8(rgb), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()

def decode_png_rgb(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data)).convert("RGB")
    return u8_to_color(np.asarray(img))

def encode_png_mask(mask: ValidityMask) -> bytes:
    """1-bit PNG; bit set where mask == 1."""
    img = Image.fromarray(mask.mask * np.uint8(255), mode="L").convert("1")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()

def decode_png_mask(data: bytes) -> ValidityMask:
    img = Image.open(io.BytesIO(data)).convert("L")
    return ValidityMask((np.asarray(img) > 127).astype(np.uint8))

def encode_png_depth16(depth_m: np.ndarray) -> bytes:
    """Depth in meters to 16-bit millimeter PNG; invalid (NaN) maps to 0."""
    mm = np.where(np.isfinite(depth_m), np.clip(np.rint(depth_m * 1000.0), 1, 65535), 0)
    img = Image.fromarray(mm.astype(np.uint16))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()

def decode_png_depth16(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data))
    mm = np.asarray(img, dtype=np.float64)
    return np.where(mm > 0, mm / 1000.0, np.nan)


def save_png_rgb(path: str, rgb: np.ndarray) -> None:
    atomic_write_bytes(path, encode_png_rgb(rgb))

def load_png_rgb(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_png_rgb(fh.read())

def save_png_mask(path: str, mask: ValidityMask) -> None:
    atomic_write_bytes(path, encode_png_mask(mask))

def load_png_mask(path: str) -> ValidityMask:
    with open(path, "rb") as fh:
        return decode_png_mask(fh.read())

def save_png_depth16(path: str, depth_m: np.ndarray) -> None:
    atomic_write_bytes(path, encode_png_depth16(depth_m))

def load_png_depth16(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_png_depth16(fh.read())

def save_depth_npy(path: str, depth_m: np.ndarray) -> None:
    """Lossless float32 sidecar for exact replay."""
    buf = io.BytesIO()
    np.save(buf, depth_m.astype(np.float32))
    atomic_write_bytes(path, buf.getvalue())

def load_depth_npy(path: str) -> np.ndarray:
    return np.load(path).astype(np.float64)


# ---------------------------------------------------------------------------
# PLY interchange

def _fmt_f32(value: float) -> str:
    f = float(np.float32(value))
    if f == int(f) and abs(f) < 1e15:
        return str(int(f))
    return np.format_float_positional(np.float32(value), unique=True, trim="-")


def export_ply(cloud: PointCloud, path: str, binary: bool = False) -> None:
    """Write the cloud as PLY: float x,y,z plus uchar red,green,blue per vertex.

    Row order follows point index order. ASCII by default for byte-stable
    golden files; binary_little_endian behind the flag.
    """
    if len(cloud) == 0:
        raise EmptyCloudError("refusing to export an empty point cloud")
    colors = color_to_u8(cloud.colors)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    if binary:
        dtype = np.dtype(
            [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1")]
        )
        rows = np.empty(len(cloud), dtype=dtype)
        rows["x"], rows["y"], rows["z"] = cloud.positions.T.astype(np.float32)
        rows["r"], rows["g"], rows["b"] = colors.T
        atomic_write_bytes(path, header.encode() + rows.tobytes())
        return
    lines = [header]
    for pos, col in zip(cloud.positions, colors):
        lines.append(
            f"{_fmt_f32(pos[0])} {_fmt_f32(pos[1])} {_fmt_f32(pos[2])} "
            f"{col[0]} {col[1]} {col[2]}\n"
        )
    atomic_write_bytes(path, "".join(lines).encode())


def load_ply(path: str) -> PointCloud:
    """Read PLY files produced by :func:`export_ply` (both variants)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise OutputError(f"failed to read {path}: {exc}", path=path) from exc
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise OutputError(f"{path} is not a PLY file", path=path)
    header_lines = data[:end].decode("ascii", "replace").splitlines()
    body = data[end + len(b"end_header\n"):]
    fmt = next((ln.split()[1] for ln in header_lines if ln.startswith("format ")), None)
    count_line = next((ln for ln in header_lines if ln.startswith("element vertex")), None)
    if fmt is None or count_line is None:
        raise OutputError(f"{path}: malformed PLY header", path=path)
    count = int(count_line.split()[2])
    if fmt == "binary_little_endian":
        dtype = np.dtype(
            [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1")]
        )
        rows = np.frombuffer(body, dtype=dtype, count=count)
        positions = np.column_stack([rows["x"], rows["y"], rows["z"]]).astype(np.float64)
        colors = u8_to_color(np.column_stack([rows["r"], rows["g"], rows["b"]]))
    elif fmt == "ascii":
        fields = np.array(body.decode("ascii").split(), dtype=np.float64).reshape(count, 6)
        # Written digits are shortest float32 reprs; route through float32.
        positions = fields[:, :3].astype(np.float32).astype(np.float64)
        colors = u8_to_color(fields[:, 3:].astype(np.uint8))
    else:
        raise OutputError(f"{path}: unsupported PLY format {fmt!r}", path=path)
    return PointCloud(positions, colors, np.zeros(count, dtype=np.int32))
