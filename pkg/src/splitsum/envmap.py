"""Equirectangular radiance maps: RGBE codec, Radiance HDR I/O, direction
mapping, bilinear sampling, per-row solid angles, and tone-mapped PNG export.

Conventions: linear RGB radiance, y-up world. The vertical texture coordinate
is v = acos(d.y) / pi (v=0 at the +y pole), the horizontal one is
u = fract(0.5 + atan2(d.x, -d.z) / 2pi), so the map center (u=0.5) looks
down -z. Environment maps are 2:1 (width = 2 * height); ordinary rendered
images reuse RadianceMap without that constraint, which is checked only by
the direction-indexed operations.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import HdrHeaderError, HdrOrientationError, HdrTruncatedError

_RESOLUTION_RE = re.compile(rb"^-Y (\d+) \+X (\d+)\s*$")
# Any other axis-pair line is a legal Radiance orientation we do not support.
_OTHER_ORIENTATION_RE = re.compile(rb"^[+-][XY] \d+ [+-][XY] \d+\s*$")


@dataclass
class RadianceMap:
    """Linear-RGB raster. texels has shape (height, width, 3), float32."""

    texels: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.texels, dtype=np.float32)
        if t.ndim != 3 or t.shape[2] != 3 or t.shape[0] < 1 or t.shape[1] < 1:
            raise ValueError(f"texels must be (h, w, 3), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("texels must be finite")
        if np.any(t < 0):
            raise ValueError("texels must be non-negative")
        self.texels = t

    @property
    def height(self) -> int:
        return self.texels.shape[0]

    @property
    def width(self) -> int:
        return self.texels.shape[1]

    @property
    def is_equirect(self) -> bool:
        return self.width == 2 * self.height


def _require_equirect(m: RadianceMap) -> None:
    if not m.is_equirect:
        raise ValueError(
            f"operation needs a 2:1 equirectangular map, got {m.width}x{m.height}"
        )


# ---------------------------------------------------------------------------
# RGBE codec (shared 8-bit exponent, 8-bit mantissas)

def decode_rgbe(data) -> np.ndarray:
    """Decode RGBE bytes to linear RGB.

    Accepts a length-4 byte string / sequence for one pixel or a uint8 array
    of shape (..., 4). A zero exponent byte decodes to black; otherwise
    channel = (mantissa / 256) * 2**(e - 128).
    """
    arr = np.frombuffer(bytes(data), dtype=np.uint8) if isinstance(data, (bytes, bytearray)) else np.asarray(data, dtype=np.uint8)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 4:
        raise ValueError("RGBE pixels are 4 bytes")
    e = arr[..., 3].astype(np.int32)
    scale = np.where(e == 0, 0.0, np.ldexp(1.0, e - 136))  # 1/256 * 2**(e-128)
    rgb = arr[..., :3].astype(np.float64) * scale[..., None]
    rgb = rgb.astype(np.float32)
    return rgb[0] if single else rgb


def encode_rgbe(rgb) -> np.ndarray:
    """Encode linear RGB to RGBE, inverse of decode_rgbe up to quantization.

    Accepts (3,) or (..., 3) arrays; returns uint8 of shape (..., 4). The
    shared exponent tracks the max channel, so per-channel absolute error is
    bounded by max_channel / 128. Non-positive or denormal-small pixels
    encode to all-zero bytes.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    single = rgb.ndim == 1
    rgb = np.atleast_2d(rgb)
    if rgb.shape[-1] != 3:
        raise ValueError("expected RGB triples")
    v = rgb.max(axis=-1)
    mant, exp = np.frexp(v)  # v = mant * 2**exp, mant in [0.5, 1)
    valid = v >= 1e-38
    # scale = 256 / 2**exp; max channel lands in [128, 255]
    scale = np.where(valid, np.ldexp(1.0, np.where(valid, 8 - exp, 0)), 0.0)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    mantissas = np.floor(rgb * scale[..., None]).clip(0, 255)
    out[..., :3] = np.where(valid[..., None], mantissas, 0).astype(np.uint8)
    out[..., 3] = np.where(valid, exp + 128, 0).astype(np.uint8)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Radiance HDR files

def load_hdr(path) -> RadianceMap:
    """Read a Radiance .hdr file with `-Y h +X w` orientation.

    Flat and adaptive-RLE scanlines are both handled. Raises HdrHeaderError,
    HdrOrientationError, or HdrTruncatedError for the respective defects.
    """
    with open(path, "rb") as f:
        raw = f.read()

    if not raw.startswith(b"#?"):
        raise HdrHeaderError("missing #? magic")
    pos = 0
    saw_format = False
    lines = []
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise HdrHeaderError("header never terminated by a blank line")
        line = raw[pos:nl]
        pos = nl + 1
        if line == b"":
            break
        lines.append(line)
        if line.startswith(b"FORMAT="):
            if line.strip() != b"FORMAT=32-bit_rle_rgbe":
                raise HdrHeaderError(f"unsupported format {line!r}")
            saw_format = True
    if not saw_format:
        raise HdrHeaderError("header lacks FORMAT=32-bit_rle_rgbe")

    nl = raw.find(b"\n", pos)
    if nl < 0:
        raise HdrHeaderError("missing resolution line")
    res_line = raw[pos:nl]
    pos = nl + 1
    m = _RESOLUTION_RE.match(res_line)
    if m is None:
        if _OTHER_ORIENTATION_RE.match(res_line):
            raise HdrOrientationError(f"unsupported orientation {res_line!r}")
        raise HdrHeaderError(f"bad resolution line {res_line!r}")
    height, width = int(m.group(1)), int(m.group(2))
    if height < 1 or width < 1:
        raise HdrHeaderError("zero-sized image")

    data = raw[pos:]
    rgbe = np.empty((height, width, 4), dtype=np.uint8)
    off = 0
    for y in range(height):
        off = _read_scanline(data, off, rgbe[y])
    return RadianceMap(decode_rgbe(rgbe))


def _read_scanline(data: bytes, off: int, out: np.ndarray) -> int:
    """Fill one scanline (out: (w, 4) uint8), returning the new offset."""
    width = out.shape[0]
    if off + 4 > len(data):
        raise HdrTruncatedError("scanline header past end of data")
    h0, h1, h2, h3 = data[off], data[off + 1], data[off + 2], data[off + 3]
    if h0 == 2 and h1 == 2 and ((h2 << 8) | h3) == width and 8 <= width <= 0x7FFF:
        off += 4
        for c in range(4):
            x = 0
            while x < width:
                if off >= len(data):
                    raise HdrTruncatedError("RLE scanline ran out of data")
                code = data[off]
                off += 1
                if code > 128:  # run of (code - 128) copies
                    run = code - 128
                    if x + run > width or off >= len(data):
                        raise HdrTruncatedError("RLE run overflows scanline")
                    out[x : x + run, c] = data[off]
                    off += 1
                    x += run
                else:  # `code` literal bytes
                    if code == 0 or x + code > width or off + code > len(data):
                        raise HdrTruncatedError("RLE literal overflows scanline")
                    out[x : x + code, c] = np.frombuffer(data, np.uint8, code, off)
                    off += code
                    x += code
        return off
    # Flat scanline; the 4 peeked bytes are its first pixel.
    need = 4 * width
    if off + need > len(data):
        raise HdrTruncatedError("flat scanline truncated")
    out[:] = np.frombuffer(data, np.uint8, need, off).reshape(width, 4)
    return off + need


def save_hdr(m: RadianceMap, path) -> None:
    """Write a Radiance .hdr file with flat (uncompressed) scanlines."""
    rgbe = encode_rgbe(m.texels)
    header = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n" + (
        f"-Y {m.height} +X {m.width}\n".encode()
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(rgbe.tobytes())


# ---------------------------------------------------------------------------
# Direction <-> texture coordinates

def dir_to_uv(d) -> tuple[np.ndarray, np.ndarray]:
    """Map unit directions (..., 3) to equirect (u, v) in [0, 1)."""
    d = np.asarray(d, dtype=np.float64)
    v = np.arccos(np.clip(d[..., 1], -1.0, 1.0)) / np.pi
    u = 0.5 + np.arctan2(d[..., 0], -d[..., 2]) / (2.0 * np.pi)
    u = u - np.floor(u)
    return u, v


def uv_to_dir(u, v) -> np.ndarray:
    """Inverse of dir_to_uv; returns unit directions (..., 3)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    theta = v * np.pi
    phi = (u - 0.5) * 2.0 * np.pi
    sin_t = np.sin(theta)
    return np.stack(
        [sin_t * np.sin(phi), np.cos(theta), -sin_t * np.cos(phi)], axis=-1
    )


def texel_center_dirs(m: RadianceMap) -> np.ndarray:
    """Directions through every texel center, shape (h, w, 3)."""
    _require_equirect(m)
    u = (np.arange(m.width) + 0.5) / m.width
    v = (np.arange(m.height) + 0.5) / m.height
    uu, vv = np.meshgrid(u, v)
    return uv_to_dir(uu, vv)


def sample_bilinear(m: RadianceMap, d) -> np.ndarray:
    """Bilinear radiance lookup for unit directions (..., 3).

    Wraps horizontally, clamps vertically (poles do not filter across).
    """
    _require_equirect(m)
    u, v = dir_to_uv(d)
    x = u * m.width - 0.5
    y = v * m.height - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = (x0 + 1) % m.width
    x0 = x0 % m.width
    y1 = np.clip(y0 + 1, 0, m.height - 1)
    y0 = np.clip(y0, 0, m.height - 1)
    t = m.texels.astype(np.float64)
    fx = fx[..., None]
    fy = fy[..., None]
    top = t[y0, x0] * (1 - fx) + t[y0, x1] * fx
    bot = t[y1, x0] * (1 - fx) + t[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def texel_solid_angle(m: RadianceMap, row: int) -> float:
    """Solid angle of one texel in the given row; rows sum to 4pi."""
    _require_equirect(m)
    if not 0 <= row < m.height:
        raise ValueError(f"row {row} outside [0, {m.height})")
    t0 = row * np.pi / m.height
    t1 = (row + 1) * np.pi / m.height
    return float((2.0 * np.pi / m.width) * (np.cos(t0) - np.cos(t1)))


def texel_solid_angles(m: RadianceMap) -> np.ndarray:
    """Per-row texel solid angles, shape (h,)."""
    _require_equirect(m)
    edges = np.arange(m.height + 1) * np.pi / m.height
    return (2.0 * np.pi / m.width) * (np.cos(edges[:-1]) - np.cos(edges[1:]))


# ---------------------------------------------------------------------------
# Display transfer

def linear_to_srgb(x) -> np.ndarray:
    """Linear [0,1] to sRGB [0,1], piecewise gamma."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(
        x <= 0.0031308, 12.92 * x, 1.055 * np.power(np.maximum(x, 1e-12), 1 / 2.4) - 0.055
    )


def save_png_srgb(m: RadianceMap, path, exposure: float = 1.0) -> None:
    """Tone-map (clamp then sRGB) and write an 8-bit PNG."""
    from PIL import Image

    x = np.clip(m.texels.astype(np.float64) * exposure, 0.0, 1.0)
    b = np.round(linear_to_srgb(x) * 255.0).astype(np.uint8)
    Image.fromarray(b, mode="RGB").save(path, format="PNG")
