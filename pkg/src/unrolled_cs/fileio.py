"""On-disk formats: images, masks, measurements, checkpoints and configs.

All binary formats are little-endian except 16-bit PGM, which is big-endian
by definition of the format.
"""

from __future__ import annotations

import io
import re
import struct
from pathlib import Path

import numpy as np

from .operators import SamplingMask

__all__ = [
    "FormatError",
    "read_pgm",
    "write_pgm",
    "load_image",
    "save_image",
    "save_mask_pgm",
    "load_mask_pgm",
    "save_mask_bits",
    "load_mask_bits",
    "load_mask",
    "save_measurements",
    "load_measurements",
    "encode_tensors",
    "decode_tensors",
    "save_tensors",
    "load_tensors",
    "read_config",
    "write_config",
    "parse_config_text",
    "format_config",
]


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


# ---------------------------------------------------------------------------
# PGM / PNG
# ---------------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(data: bytes) -> tuple[np.ndarray, int, list[str]]:
    """Parse binary PGM (P5) bytes into ``(pixels, maxval, comments)``."""
    if not data.startswith(b"P5"):
        raise FormatError("not a binary PGM (missing P5 magic)")
    pos = 2
    header = []
    comments = [c.decode("ascii", "replace").strip() for c in re.findall(rb"#([^\n]*)\n", data[: min(len(data), 4096)])]
    for _ in range(3):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError("truncated PGM header")
        try:
            header.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"bad PGM header token {m.group(1)!r}") from None
        pos = m.end()
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("truncated PGM header")
    pos += 1
    width, height, maxval = header
    if width <= 0 or height <= 0:
        raise FormatError(f"bad PGM dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = width * height * dtype.itemsize
    if len(data) - pos < nbytes:
        raise FormatError(f"truncated PGM raster: need {nbytes} bytes, have {len(data) - pos}")
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos).reshape(height, width)
    return pixels.astype(np.uint16 if maxval > 255 else np.uint8), maxval, comments


def write_pgm(pixels: np.ndarray, maxval: int = 255, comments=()) -> bytes:
    if pixels.ndim != 2:
        raise FormatError(f"PGM holds a single 2-d channel, got shape {pixels.shape}")
    h, w = pixels.shape
    head = b"P5\n" + b"".join(f"# {c}\n".encode("ascii") for c in comments) + f"{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    return head + np.ascontiguousarray(pixels, dtype=dtype).tobytes()


def _quantize(image: np.ndarray, bits: int) -> np.ndarray:
    if bits not in (8, 16):
        raise FormatError(f"unsupported bit depth {bits}")
    maxval = (1 << bits) - 1
    q = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    return q.astype(np.uint16 if bits == 16 else np.uint8)


def save_image(path, image: np.ndarray, format: str | None = None, bits: int = 16):
    """Write a ``[0, 1]`` grayscale (H, W) or RGB (3, H, W) image.

    PGM supports grayscale only. Values are clipped then quantized to
    ``bits`` bits, so a round trip is exact to ``0.5 / (2**bits - 1)``.
    """
    path = Path(path)
    format = (format or path.suffix.lstrip(".")).lower()
    image = np.asarray(image, dtype=np.float64)
    q = _quantize(image, bits)
    if format == "pgm":
        path.write_bytes(write_pgm(q, (1 << bits) - 1))
    elif format == "png":
        from PIL import Image

        if q.ndim == 2:
            img = Image.fromarray(q)  # uint8 -> "L", uint16 -> "I;16"
        elif q.ndim == 3 and q.shape[0] == 3:
            if bits != 8:
                raise FormatError("RGB PNG output supports 8 bits only")
            img = Image.fromarray(np.ascontiguousarray(q.transpose(1, 2, 0)))
        else:
            raise FormatError(f"cannot store image of shape {image.shape} as PNG")
        img.save(path, format="PNG")
    else:
        raise FormatError(f"unsupported image format {format!r}")


def load_image(path, format: str | None = None) -> np.ndarray:
    """Read an image back into ``[0, 1]`` floats (H, W) or (3, H, W)."""
    path = Path(path)
    format = (format or path.suffix.lstrip(".")).lower()
    if format == "pgm":
        pixels, maxval, _ = read_pgm(path.read_bytes())
        return pixels.astype(np.float64) / maxval
    if format == "png":
        from PIL import Image, UnidentifiedImageError

        try:
            with Image.open(path) as img:
                img.load()
                mode = img.mode
                arr = np.asarray(img)
        except (UnidentifiedImageError, OSError, SyntaxError) as exc:
            raise FormatError(f"cannot read PNG {path}: {exc}") from None
        if mode in ("I;16", "I;16B", "I"):
            return arr.astype(np.float64) / 65535.0
        if mode == "L":
            return arr.astype(np.float64) / 255.0
        if mode in ("RGB", "RGBA"):
            return arr[..., :3].transpose(2, 0, 1).astype(np.float64) / 255.0
        raise FormatError(f"unsupported PNG mode {mode}")
    raise FormatError(f"unsupported image format {format!r}")


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

_MASK_MAGIC = b"UCSMASK1"


def save_mask_pgm(path, mask: SamplingMask):
    pixels = mask.included.astype(np.uint8) * 255
    Path(path).write_bytes(write_pgm(pixels, 255, comments=[f"fraction={mask.fraction!r}"]))


def load_mask_pgm(path) -> SamplingMask:
    pixels, _, comments = read_pgm(Path(path).read_bytes())
    fraction = None
    for c in comments:
        if c.startswith("fraction="):
            fraction = float(c.split("=", 1)[1])
    included = pixels > 127
    if fraction is None:
        fraction = included.mean()
    return SamplingMask(included, fraction)


def save_mask_bits(path, mask: SamplingMask):
    h, w = mask.shape
    blob = _MASK_MAGIC + struct.pack("<IId", h, w, mask.fraction) + np.packbits(mask.included.reshape(-1)).tobytes()
    Path(path).write_bytes(blob)


def load_mask_bits(path) -> SamplingMask:
    data = Path(path).read_bytes()
    if not data.startswith(_MASK_MAGIC) or len(data) < len(_MASK_MAGIC) + 16:
        raise FormatError("not a mask bitset file")
    h, w, fraction = struct.unpack_from("<IId", data, len(_MASK_MAGIC))
    bits = np.frombuffer(data, np.uint8, offset=len(_MASK_MAGIC) + 16)
    if bits.size * 8 < h * w:
        raise FormatError("truncated mask bitset")
    included = np.unpackbits(bits)[: h * w].reshape(h, w).astype(bool)
    return SamplingMask(included, fraction)


def load_mask(path) -> SamplingMask:
    path = Path(path)
    return load_mask_pgm(path) if path.suffix.lower() == ".pgm" else load_mask_bits(path)


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------

_MEAS_MAGIC = b"UCSMEAS1"
_MEAS_HEADER = struct.Struct("<II16sdI")


def save_measurements(path, y: np.ndarray, mask: SamplingMask, sigma: float):
    """Store one k-space measurement vector (values over the mask, row-major order)."""
    y = np.asarray(y).reshape(-1)
    if y.size != mask.count:
        raise FormatError(f"{y.size} values for a mask with {mask.count} samples")
    h, w = mask.shape
    pairs = np.empty((y.size, 2), dtype="<f4")
    pairs[:, 0] = y.real
    pairs[:, 1] = y.imag
    blob = _MEAS_MAGIC + _MEAS_HEADER.pack(h, w, mask.mask_id.encode("ascii"), float(sigma), y.size)
    Path(path).write_bytes(blob + pairs.tobytes())


def load_measurements(path) -> dict:
    """Returns a dict with ``H, W, mask_id, sigma, y``."""
    data = Path(path).read_bytes()
    if not data.startswith(_MEAS_MAGIC) or len(data) < len(_MEAS_MAGIC) + _MEAS_HEADER.size:
        raise FormatError("not a measurement file")
    h, w, mask_id, sigma, m = _MEAS_HEADER.unpack_from(data, len(_MEAS_MAGIC))
    off = len(_MEAS_MAGIC) + _MEAS_HEADER.size
    if len(data) - off != 8 * m:
        raise FormatError(f"measurement payload holds {len(data) - off} bytes, expected {8 * m}")
    pairs = np.frombuffer(data, dtype="<f4", offset=off).reshape(m, 2)
    y = pairs[:, 0].astype(np.complex64) + 1j * pairs[:, 1].astype(np.complex64)
    return {"H": h, "W": w, "mask_id": mask_id.decode("ascii"), "sigma": sigma, "y": y.astype(np.complex64)}


# ---------------------------------------------------------------------------
# Tensor checkpoints
# ---------------------------------------------------------------------------

_TENSOR_MAGIC = b"UCSTNSR"
TENSOR_FORMAT_VERSION = 1


def encode_tensors(named: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(_TENSOR_MAGIC)
    out.write(struct.pack("<II", TENSOR_FORMAT_VERSION, len(named)))
    for name, arr in named.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if not data.startswith(_TENSOR_MAGIC):
        raise FormatError("not a tensor checkpoint")
    try:
        pos = len(_TENSOR_MAGIC)
        version, count = struct.unpack_from("<II", data, pos)
        if version != TENSOR_FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos += 8
        named = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            if pos + 4 * size > len(data):
                raise FormatError(f"truncated tensor {name!r}")
            named[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    return named


def save_tensors(path, named):
    Path(path).write_bytes(encode_tensors(named))


def load_tensors(path):
    return decode_tensors(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# key=value configs
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def format_config(values: dict) -> str:
    return "".join(f"{k}={'none' if v is None else v}\n" for k, v in values.items())


def read_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def write_config(path, values: dict):
    Path(path).write_text(format_config(values))
