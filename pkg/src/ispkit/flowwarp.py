"""Dense flow fields: warping, consistency masking, file I/O, synthesis.

Flow convention: a field f assigns each destination pixel p the displacement
to its source sample, so warp(img, f)(p) = img(p + f(p)) with bilinear
interpolation and replicate clamping outside the image. Plane 0 is the
horizontal component u (+right), plane 1 vertical v (+down).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError
from .images import MaskImage, RgbImage

FLO_MAGIC = 202021.25

ALPHA1_DEFAULT = 0.01
ALPHA2_DEFAULT = 0.5


@dataclass(frozen=True)
class FlowField:
    data: np.ndarray  # (2, H, W) float32: u, v

    def __post_init__(self):
        d = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32))
        if d.ndim != 3 or d.shape[0] != 2:
            raise ShapeError(f"flow field needs shape (2, H, W), got {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("non-finite flow values")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def sample_bilinear(planes: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) planes at real coordinates, replicate-clamped."""
    _, h, w = planes.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(planes.dtype)
    fy = (ys - y0).astype(planes.dtype)
    top = planes[:, y0, x0] * (1 - fx) + planes[:, y0, x1] * fx
    bot = planes[:, y1, x0] * (1 - fx) + planes[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _grid(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def warp(img, flow: FlowField):
    """Pull-warp an image by a flow field of the same dimensions."""
    planes = img.data if isinstance(img, (RgbImage, MaskImage)) else np.asarray(img)
    if planes.shape[1:] != flow.data.shape[1:]:
        raise ShapeError(
            f"image {planes.shape} and flow {flow.data.shape} dims differ")
    xs, ys = _grid(flow.height, flow.width)
    out = sample_bilinear(planes, xs + flow.data[0], ys + flow.data[1])
    out = out.astype(planes.dtype, copy=False)
    if isinstance(img, RgbImage):
        return RgbImage(np.clip(out, 0.0, 1.0))
    return out


def fb_mask(fwd: FlowField, bwd: FlowField,
            alpha1: float = ALPHA1_DEFAULT, alpha2: float = ALPHA2_DEFAULT,
            displaced: bool = False) -> MaskImage:
    """Consistency mask: 1 where |fwd + bwd|^2 < a1 (|fwd|^2 + |bwd|^2) + a2.

    By default the backward flow is read at the same pixel (it was computed
    from the already-aligned image); displaced=True instead samples it at
    p + fwd(p).
    """
    if fwd.data.shape != bwd.data.shape:
        raise ShapeError(
            f"forward {fwd.data.shape} and backward {bwd.data.shape} dims differ")
    f = fwd.data.astype(np.float64)
    if displaced:
        xs, ys = _grid(fwd.height, fwd.width)
        b = sample_bilinear(bwd.data.astype(np.float64), xs + f[0], ys + f[1])
    else:
        b = bwd.data.astype(np.float64)
    lhs = (f[0] + b[0]) ** 2 + (f[1] + b[1]) ** 2
    mag = f[0] ** 2 + f[1] ** 2 + b[0] ** 2 + b[1] ** 2
    mask = (lhs < alpha1 * mag + alpha2).astype(np.float32)
    return MaskImage(mask[None])


# ---------------------------------------------------------------------------
# Middlebury .flo interchange


def write_flo(path, flow: FlowField) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", flow.width, flow.height))
        interleaved = np.stack([flow.data[0], flow.data[1]], axis=-1)  # (H, W, 2)
        f.write(np.ascontiguousarray(interleaved, dtype="<f4").tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise FormatError(f"flow file too short: {len(blob)} bytes", offset=0)
    (magic,) = struct.unpack_from("<f", blob, 0)
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"bad flow magic {magic!r}", offset=0)
    width, height = struct.unpack_from("<ii", blob, 4)
    if width <= 0 or height <= 0:
        raise FormatError(f"bad flow dimensions {width}x{height}", offset=4)
    expect = 12 + 8 * width * height
    if len(blob) != expect:
        raise FormatError(
            f"flow payload is {len(blob)} bytes, expected {expect}", offset=12)
    arr = np.frombuffer(blob, dtype="<f4", offset=12).reshape(height, width, 2)
    return FlowField(np.stack([arr[:, :, 0], arr[:, :, 1]]))


# ---------------------------------------------------------------------------
# synthetic flows with analytic inverses


def synth_flow(kind: str, height: int, width: int, **params) -> tuple:
    """Build (forward, backward) flow fields for a parametric motion.

    translation: dx, dy. rotation: angle (radians, about the image center).
    zoom: factor (> 0; content magnification about the center).
    """
    xs, ys = _grid(height, width)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    rx, ry = xs - cx, ys - cy
    if kind == "translation":
        dx = float(params.get("dx", 0.0))
        dy = float(params.get("dy", 0.0))
        fwd = np.stack([np.full_like(xs, dx), np.full_like(ys, dy)])
        bwd = -fwd
    elif kind == "rotation":
        theta = float(params.get("angle", 0.0))
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        # destination p samples the source rotated by -theta about the center
        fwd = np.stack([cos_t * rx + sin_t * ry - rx,
                        -sin_t * rx + cos_t * ry - ry])
        bwd = np.stack([cos_t * rx - sin_t * ry - rx,
                        sin_t * rx + cos_t * ry - ry])
    elif kind == "zoom":
        factor = float(params.get("factor", 1.0))
        if factor <= 0.0:
            raise ValueError(f"zoom factor must be positive, got {factor}")
        fwd = np.stack([rx / factor - rx, ry / factor - ry])
        bwd = np.stack([rx * factor - rx, ry * factor - ry])
    else:
        raise ValueError(f"unknown synthetic flow kind {kind!r}")
    return FlowField(fwd.astype(np.float32)), FlowField(bwd.astype(np.float32))


def downscale_flow_2x(flow: FlowField) -> FlowField:
    """Flow for the 2x-downsampled grid: average each 2x2 block, halve vectors."""
    d = flow.data
    if d.shape[1] % 2 or d.shape[2] % 2:
        raise ShapeError(f"flow dims must be even to downscale, got {d.shape}")
    h2, w2 = d.shape[1] // 2, d.shape[2] // 2
    block = d.reshape(2, h2, 2, w2, 2).mean(axis=(2, 4), dtype=np.float64)
    return FlowField((block * 0.5).astype(np.float32))
