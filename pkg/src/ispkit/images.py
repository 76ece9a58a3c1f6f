"""Image buffer types, resampling, blurring, coordinate maps and file I/O.

All images are planar float32 arrays of shape (planes, H, W), row-major.
Interchange formats are fully pinned down so files round-trip bit-exactly:

* PPM (P6, maxval 255) for 8-bit RGB; value v is stored as round(v * 255).
* PGM (P5, maxval 255) for binary masks; 0 <-> 0 and 1 <-> 255.
* RAW4, a little-endian container for 4-plane sensor data:
  magic b"RAW4", u32 height, u32 width, then 4*H*W float32 values,
  planar, plane order R, Gr, Gb, B.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError


def _validate_planes(data: np.ndarray, planes: int, kind: str) -> np.ndarray:
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 3 or data.shape[0] != planes:
        raise ShapeError(f"{kind} expects shape ({planes}, H, W), got {data.shape}")
    if data.shape[1] < 1 or data.shape[2] < 1:
        raise ShapeError(f"{kind} needs height/width >= 1, got {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError(f"{kind} contains non-finite values")
    return data


@dataclass(frozen=True)
class RgbImage:
    """3-plane RGB intensities, nominally in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _validate_planes(self.data, 3, "RgbImage"))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class RawImage:
    """4-plane half-resolution sensor data, plane order R, Gr, Gb, B; values >= 0."""

    data: np.ndarray

    def __post_init__(self):
        data = _validate_planes(self.data, 4, "RawImage")
        if (data < 0).any():
            raise ValueError("RawImage values must be non-negative")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class MaskImage:
    """Single plane of exactly {0, 1} values."""

    data: np.ndarray

    def __post_init__(self):
        data = _validate_planes(self.data, 1, "MaskImage")
        if not np.isin(data, (0.0, 1.0)).all():
            raise ValueError("MaskImage values must be exactly 0 or 1")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class CoordMap:
    """2-plane normalized pixel coordinates.

    Plane 0 holds the column coordinate and plane 1 the row coordinate, each
    running linearly from -1 at the first pixel to +1 at the last (0 for a
    degenerate 1-pixel axis).
    """

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _validate_planes(self.data, 2, "CoordMap"))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def make_coord_map(height: int, width: int) -> CoordMap:
    xs = np.linspace(-1.0, 1.0, width, dtype=np.float32) if width > 1 else np.zeros(1, np.float32)
    ys = np.linspace(-1.0, 1.0, height, dtype=np.float32) if height > 1 else np.zeros(1, np.float32)
    grid = np.empty((2, height, width), dtype=np.float32)
    grid[0] = xs[None, :]
    grid[1] = ys[:, None]
    return CoordMap(grid)


# ---------------------------------------------------------------------------
# Resampling and blurring
# ---------------------------------------------------------------------------

def downsample_2x_planes(data: np.ndarray) -> np.ndarray:
    """2x bilinear downsample of (C, H, W) planes; the mean of each 2x2 block."""
    c, h, w = data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x downsample needs even dims, got {h}x{w}")
    blocks = data.reshape(c, h // 2, 2, w // 2, 2)
    return blocks.mean(axis=(2, 4), dtype=np.float64).astype(data.dtype)


def downsample_bilinear_2x(img: RgbImage) -> RgbImage:
    return RgbImage(downsample_2x_planes(img.data))


def upsample_nearest_2x_planes(data: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(data, 2, axis=1), 2, axis=2)


def upsample_nearest_2x(img):
    """Nearest-neighbour 2x upsample; accepts RgbImage or MaskImage."""
    if isinstance(img, RgbImage):
        return RgbImage(upsample_nearest_2x_planes(img.data))
    if isinstance(img, MaskImage):
        return MaskImage(upsample_nearest_2x_planes(img.data))
    raise TypeError(f"cannot upsample {type(img).__name__}")


def gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps, float64."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def blur_planes(data: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with replicate-border padding, dims unchanged."""
    k = gaussian_kernel_1d(size, sigma)
    r = size // 2
    work = data.astype(np.float64)
    if r > 0:
        padded = np.pad(work, ((0, 0), (r, r), (0, 0)), mode="edge")
        work = sum(k[i] * padded[:, i:i + data.shape[1], :] for i in range(size))
        padded = np.pad(work, ((0, 0), (0, 0), (r, r)), mode="edge")
        work = sum(k[i] * padded[:, :, i:i + data.shape[2]] for i in range(size))
    return work.astype(data.dtype)


def gaussian_blur(img: RgbImage, size: int = 9, sigma: float = 2.0) -> RgbImage:
    return RgbImage(blur_planes(img.data, size, sigma))


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _read_netpbm_header(blob: bytes, magic: bytes, path: str):
    """Parse 'P6/P5 <w> <h> <maxval><ws>' and return (w, h, payload offset)."""
    if blob[:2] != magic:
        raise FormatError(f"{path}: bad magic {blob[:2]!r}, expected {magic!r}", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header", offset=pos)
        token = blob[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: non-numeric header token {token!r}", offset=start)
        fields.append(int(token))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}", offset=start)
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}", offset=2)
    return width, height, pos


def write_ppm(path, img: RgbImage) -> None:
    """Write P6 binary PPM; intensities quantized as round(v * 255)."""
    quant = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    interleaved = np.ascontiguousarray(quant.transpose(1, 2, 0))
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.width, img.height))
        f.write(interleaved.tobytes())


def read_ppm(path) -> RgbImage:
    with open(path, "rb") as f:
        blob = f.read()
    width, height, pos = _read_netpbm_header(blob, b"P6", str(path))
    need = height * width * 3
    payload = blob[pos:pos + need]
    if len(payload) != need:
        raise FormatError(f"{path}: payload {len(payload)} bytes, expected {need}",
                          offset=pos + len(payload))
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return RgbImage(pixels.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_pgm(path, mask: MaskImage) -> None:
    """Write P5 binary PGM; mask value 1 stored as 255."""
    quant = (mask.data[0] * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (mask.width, mask.height))
        f.write(np.ascontiguousarray(quant).tobytes())


def read_pgm(path) -> MaskImage:
    with open(path, "rb") as f:
        blob = f.read()
    width, height, pos = _read_netpbm_header(blob, b"P5", str(path))
    need = height * width
    payload = blob[pos:pos + need]
    if len(payload) != need:
        raise FormatError(f"{path}: payload {len(payload)} bytes, expected {need}",
                          offset=pos + len(payload))
    gray = np.frombuffer(payload, dtype=np.uint8).reshape(1, height, width)
    return MaskImage((gray >= 128).astype(np.float32))


RAW4_MAGIC = b"RAW4"


def write_raw4(path, raw: RawImage) -> None:
    with open(path, "wb") as f:
        f.write(RAW4_MAGIC)
        f.write(struct.pack("<II", raw.height, raw.width))
        f.write(raw.data.astype("<f4").tobytes())


def read_raw4(path) -> RawImage:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != RAW4_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}", offset=0)
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header", offset=len(blob))
    height, width = struct.unpack("<II", blob[4:12])
    need = 4 * height * width * 4
    if len(blob) - 12 != need:
        raise FormatError(f"{path}: payload {len(blob) - 12} bytes, header says {need}",
                          offset=12)
    data = np.frombuffer(blob, dtype="<f4", offset=12).reshape(4, height, width)
    return RawImage(data.copy())
