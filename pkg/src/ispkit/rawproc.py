"""RAW visualization and the learned pre-processing stage.

`gamma_process` turns a 4-plane RGGB mosaic into a viewable 3-channel image
at RAW resolution: plane Gr is dropped (Gb is the retained green, per the
scaling formula), each kept plane is normalized by max(plane max, floor)
and gamma-compressed by 1/2.2. It is deterministic and runs outside the
gradient graph.

`preprocess_forward` computes x_tilde = x' - eta(concat(x', coords)) where
eta is a small convolutional noise estimator; the subtraction itself is the
residual connection, so eta has no internal skip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .grad import ParamSet, SplitMix64, Tensor, kaiming_uniform, ops
from .grad.engine import value_of
from .images import CoordMap, RawImage, RgbImage

# Per-channel normalizer floors for (R, Gb, B); divisors below these values
# are clamped up so dim frames do not blow out.
GAMMA_FLOORS = (1.0 / 2.5, 1.0, 1.0 / 1.4)
GAMMA_EXPONENT = 2.2
KEPT_PLANES = (0, 2, 3)  # R, Gb, B out of (R, Gr, Gb, B)


@dataclass(frozen=True)
class GammaConfig:
    floors: tuple = GAMMA_FLOORS
    gamma: float = GAMMA_EXPONENT
    kept_planes: tuple = KEPT_PLANES


def gamma_process(x: RawImage, cfg: GammaConfig = GammaConfig()) -> RgbImage:
    """Scale kept planes by max(plane max, floor), apply 1/gamma, clamp to [0,1]."""
    out = np.empty((3, x.height, x.width), dtype=np.float32)
    for out_idx, plane_idx in enumerate(cfg.kept_planes):
        plane = x.data[plane_idx].astype(np.float64)
        divisor = max(float(plane.max()), cfg.floors[out_idx])
        out[out_idx] = np.clip((plane / divisor) ** (1.0 / cfg.gamma), 0.0, 1.0)
    return RgbImage(out)


# ---------------------------------------------------------------------------
# pre-processing network eta


def init_preprocess_params(seed: int, hidden: int = 16, layers: int = 3,
                           in_channels: int = 5,
                           params: ParamSet | None = None,
                           prefix: str = "eta.") -> ParamSet:
    """Conv stack in_channels -> hidden -> ... -> 3, 3x3 kernels throughout."""
    if layers < 2:
        raise ValueError("preprocess net needs at least an input and an output layer")
    ps = params if params is not None else ParamSet()
    rng = SplitMix64(seed)
    widths = [in_channels] + [hidden] * (layers - 1) + [3]
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
        fan_in = cin * 9
        ps.add(f"{prefix}conv{i}.w", kaiming_uniform(rng, (cout, cin, 3, 3), fan_in))
        ps.add(f"{prefix}conv{i}.b", np.zeros(cout, dtype=np.float32))
    return ps


def eta_forward(inp, params: ParamSet, prefix: str = "eta."):
    """Apply the conv stack; leaky-ReLU 0.2 between layers, linear last layer."""
    h = inp
    i = 0
    while f"{prefix}conv{i}.w" in params:
        h = ops.conv2d(h, params[f"{prefix}conv{i}.w"], params[f"{prefix}conv{i}.b"])
        i += 1
        if f"{prefix}conv{i}.w" in params:
            h = ops.leaky_relu(h, 0.2)
    if i == 0:
        raise KeyError(f"no parameters found under prefix {prefix!r}")
    return h


def preprocess_forward(xp, coords, params: ParamSet, prefix: str = "eta.") -> Tensor:
    """x_tilde = x' - eta([x', coords]); returns a graph tensor."""
    xv = xp.data if isinstance(xp, RgbImage) else xp
    cv = coords.data if isinstance(coords, CoordMap) else coords
    xs = value_of(xv)
    if value_of(cv).shape[1:] != xs.shape[1:]:
        raise ShapeError(
            f"coordinate map {value_of(cv).shape} does not match image {xs.shape}")
    stacked = ops.concat([xv, np.asarray(cv, dtype=xs.dtype)], axis=0)
    return ops.sub(xv, eta_forward(stacked, params, prefix))


def preprocess_image(xp: RgbImage, coords: CoordMap, params: ParamSet,
                     prefix: str = "eta.") -> RgbImage:
    """Inference wrapper; output may leave [0,1] slightly and is not clamped."""
    out = preprocess_forward(xp, coords, params, prefix)
    return RgbImage(np.asarray(out.data, dtype=np.float32))
