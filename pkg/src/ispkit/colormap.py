"""Parametric color mapping between a processed RAW image and a target.

Pixels are softly assigned to B equally spaced intensity bins per channel;
each (channel, bin) gets an affine map fitted in closed form by weighted
least squares, and application blends the per-bin maps with the soft
assignment weights. Ablation variants restrict the per-bin map (constant
value, single-channel affine) or replace the scheme entirely (one global
3x3 matrix, blurred target).

Fitting runs in float64 and is never differentiated through; `apply_graph`
provides the gradient path with respect to the source image only, with the
fitted parameters held constant.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError
from .grad import Tensor, ops
from .images import RgbImage, gaussian_blur

VARIANTS = ("linear3x3", "const_val", "affine_indep", "affine_dep", "color_blur")

RIDGE_COEFF = 1e-6  # diagonal loading scale; multiplied by (sum of weights + 1)


@dataclass(frozen=True)
class ColorMapModel:
    variant: str
    bins: int
    temperature: float
    height: int
    width: int
    centroids: np.ndarray | None  # (3, B) float64
    params: np.ndarray | None     # variant-specific, float64
    blur_size: int = 9
    blur_sigma: float = 2.0

    def param_shape(self) -> tuple:
        return {
            "affine_dep": (3, self.bins, 4),
            "affine_indep": (3, self.bins, 2),
            "const_val": (3, self.bins),
            "linear3x3": (3, 3),
            "color_blur": None,
        }[self.variant]


def _as_planes(img) -> np.ndarray:
    data = img.data if isinstance(img, RgbImage) else np.asarray(img)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ShapeError(f"expected 3-plane image, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("non-finite values in color-map input")
    return data.astype(np.float64)


def default_temperature(bins: int) -> float:
    return (1.0 / bins) ** 2


def make_bins(x, bins: int) -> np.ndarray:
    """Per-channel centroids at the cell centers of an equal range partition."""
    if bins < 1:
        raise ValueError(f"bin count must be >= 1, got {bins}")
    data = _as_planes(x)
    lo = data.min(axis=(1, 2))
    hi = data.max(axis=(1, 2))
    b = np.arange(1, bins + 1, dtype=np.float64)
    return lo[:, None] + (b[None, :] - 0.5) * ((hi - lo)[:, None] / bins)


def soft_weights(x, centroids: np.ndarray, temperature: float,
                 axis: str = "bins") -> np.ndarray:
    """Softmax of -(intensity - centroid)^2 / T, shape (3, N, B).

    axis="bins": each pixel's weights over bins sum to 1 (w-hat).
    axis="pixels": each bin's weights over pixels sum to 1 (w).
    """
    data = _as_planes(x)
    flat = data.reshape(3, -1)                                # (3, N)
    d = flat[:, :, None] - np.asarray(centroids)[:, None, :]  # (3, N, B)
    logits = -(d * d) / temperature
    ax = 2 if axis == "bins" else 1
    if axis not in ("bins", "pixels"):
        raise ValueError(f"axis must be 'bins' or 'pixels', got {axis!r}")
    logits -= logits.max(axis=ax, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=ax, keepdims=True)


def _wls_solve(design: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-bin ridge-stabilized weighted normal equations.

    design: (N, D); targets: (N,); weights: (N, B). Returns (B, D).
    """
    n, d = design.shape
    bins = weights.shape[1]
    gram = np.einsum("nb,ni,nk->bik", weights, design, design, optimize=True)
    rhs = np.einsum("nb,ni,n->bi", weights, design, targets, optimize=True)
    lam = RIDGE_COEFF * (weights.sum(axis=0) + 1.0)           # (B,)
    gram = gram + lam[:, None, None] * np.eye(d)[None]
    try:
        return np.linalg.solve(gram, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        out = np.empty((bins, d))
        for b in range(bins):
            out[b] = np.linalg.pinv(gram[b]) @ rhs[b]
        return out


def fit(x, c, variant: str = "affine_dep", bins: int = 15,
        temperature: float | None = None, blur_size: int = 9,
        blur_sigma: float = 2.0) -> ColorMapModel:
    """Closed-form fit of the color mapping from x to c for one pair."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    xd = _as_planes(x)
    cd = _as_planes(c)
    if xd.shape != cd.shape:
        raise ShapeError(f"source {xd.shape} and target {cd.shape} differ")
    h, w = xd.shape[1:]
    if h * w < 4:
        raise ShapeError(f"need at least 4 pixels to fit, got {h}x{w}")
    temp = default_temperature(bins) if temperature is None else float(temperature)
    base = dict(variant=variant, bins=bins, temperature=temp, height=h, width=w,
                blur_size=blur_size, blur_sigma=blur_sigma)

    if variant == "color_blur":
        return ColorMapModel(centroids=None, params=None, **base)

    if variant == "linear3x3":
        design = xd.reshape(3, -1).T                           # (N, 3)
        target = cd.reshape(3, -1).T                           # (N, 3)
        m, *_ = np.linalg.lstsq(design, target, rcond=None)    # (3, 3), maps rows
        return ColorMapModel(centroids=None, params=m.T, **base)

    centroids = make_bins(xd, bins)
    w_pix = soft_weights(xd, centroids, temp, axis="pixels")   # (3, N, B)
    flat_x = xd.reshape(3, -1)
    flat_c = cd.reshape(3, -1)
    n = flat_x.shape[1]

    if variant == "const_val":
        # weighted mean per (channel, bin); pixel weights sum to 1 per bin
        params = np.einsum("jnb,jn->jb", w_pix, flat_c)
    elif variant == "affine_indep":
        params = np.empty((3, bins, 2))
        for j in range(3):
            design = np.stack([flat_x[j], np.ones(n)], axis=1)
            params[j] = _wls_solve(design, flat_c[j], w_pix[j])
    else:  # affine_dep
        design = np.concatenate([flat_x.T, np.ones((n, 1))], axis=1)  # (N, 4)
        params = np.empty((3, bins, 4))
        for j in range(3):
            params[j] = _wls_solve(design, flat_c[j], w_pix[j])
    return ColorMapModel(centroids=centroids, params=params, **base)


def _bin_predictions(model: ColorMapModel, flat_x: np.ndarray) -> np.ndarray:
    """Per-bin predictions, shape (3, N, B), before blending."""
    if model.variant == "const_val":
        return np.broadcast_to(model.params[:, None, :],
                               (3, flat_x.shape[1], model.bins))
    if model.variant == "affine_indep":
        a = model.params[:, :, 0]   # (3, B)
        t = model.params[:, :, 1]
        return flat_x[:, :, None] * a[:, None, :] + t[:, None, :]
    if model.variant == "affine_dep":
        a = model.params[:, :, :3]  # (3, B, 3)
        t = model.params[:, :, 3]
        return np.einsum("jbk,kn->jnb", a, flat_x) + t[:, None, :]
    raise ValueError(f"no per-bin predictions for variant {model.variant!r}")


def apply_model(x, model: ColorMapModel, target=None) -> np.ndarray:
    """Map x through the fitted model; float64 (3, H, W) output.

    The color_blur variant ignores x and returns the blurred target, which
    must be supplied.
    """
    xd = _as_planes(x)
    if model.variant == "color_blur":
        if target is None:
            raise ValueError("color_blur application requires the target image")
        td = _as_planes(target).astype(np.float32)
        return gaussian_blur(RgbImage(np.clip(td, 0.0, 1.0)),
                             model.blur_size, model.blur_sigma).data.astype(np.float64)
    if model.params is None:
        raise ValueError("model has no fitted parameters")
    flat_x = xd.reshape(3, -1)
    if model.variant == "linear3x3":
        return (model.params @ flat_x).reshape(xd.shape)
    w_hat = soft_weights(xd, model.centroids, model.temperature, axis="bins")
    preds = _bin_predictions(model, flat_x)
    return np.einsum("jnb,jnb->jn", w_hat, preds).reshape(xd.shape)


def apply_graph(x, model: ColorMapModel) -> Tensor:
    """Differentiable application; gradients flow into x only.

    Mirrors apply_model for every variant that reads x; color_blur has no
    x dependence and therefore no graph form.
    """
    if model.variant == "color_blur":
        raise ValueError("color_blur has no differentiable application")
    from .grad.engine import value_of
    xv = value_of(x)
    dt = xv.dtype
    if model.variant == "linear3x3":
        return ops.conv2d(x, model.params.reshape(3, 3, 1, 1).astype(dt))
    channels = []
    for j in range(3):
        xj = ops.narrow(x, 0, j, 1)                                # (1, H, W)
        k = model.centroids[j].astype(dt).reshape(-1, 1, 1)        # (B, 1, 1)
        logits = ops.scalar_mul(ops.square(ops.sub(xj, k)), -1.0 / model.temperature)
        w_hat = ops.softmax(logits, axis=0)                        # (B, H, W)
        if model.variant == "const_val":
            v = model.params[j].astype(dt).reshape(-1, 1, 1)
            blended = ops.sum_(ops.mul(w_hat, v), axis=0, keepdims=True)
        elif model.variant == "affine_indep":
            a = model.params[j, :, 0].astype(dt).reshape(-1, 1, 1, 1)
            t = model.params[j, :, 1].astype(dt)
            lin = ops.conv2d(xj, a, t)                             # (B, H, W)
            blended = ops.sum_(ops.mul(w_hat, lin), axis=0, keepdims=True)
        else:  # affine_dep
            a = model.params[j, :, :3].astype(dt).reshape(model.bins, 3, 1, 1)
            t = model.params[j, :, 3].astype(dt)
            lin = ops.conv2d(x, a, t)
            blended = ops.sum_(ops.mul(w_hat, lin), axis=0, keepdims=True)
        channels.append(blended)
    return ops.concat(channels, axis=0)


def fit_objective(x, c, model: ColorMapModel) -> float:
    """The weighted squared-error value the per-bin fits minimize.

    Sum over channels, bins, pixels of w * (per-bin prediction - target)^2,
    with the over-pixels weights. Restricting the per-bin map class can only
    raise this value, so it orders const_val >= affine_indep >= affine_dep
    per pair up to ridge slack.
    """
    xd = _as_planes(x)
    cd = _as_planes(c)
    w_pix = soft_weights(xd, model.centroids, model.temperature, axis="pixels")
    preds = _bin_predictions(model, xd.reshape(3, -1))
    resid = preds - cd.reshape(3, -1)[:, :, None]
    return float((w_pix * resid * resid).sum())


def l1_residual(x, c, model: ColorMapModel, target=None) -> float:
    """Mean absolute error between apply_model(x) and c."""
    mapped = apply_model(x, model, target=target)
    return float(np.abs(mapped - _as_planes(c)).mean())


# ---------------------------------------------------------------------------
# serialization


def _encode_array(arr: np.ndarray, inline: bool) -> dict:
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    if inline:
        return {"encoding": "inline", "shape": list(arr.shape),
                "values": [float(v) for v in arr32.reshape(-1)]}
    return {"encoding": "base64", "shape": list(arr.shape),
            "data": base64.b64encode(arr32.tobytes()).decode("ascii")}


def _decode_array(obj: dict) -> np.ndarray:
    shape = tuple(obj["shape"])
    if obj["encoding"] == "inline":
        arr = np.asarray(obj["values"], dtype=np.float32)
    elif obj["encoding"] == "base64":
        arr = np.frombuffer(base64.b64decode(obj["data"]), dtype="<f4").copy()
    else:
        raise ValueError(f"unknown array encoding {obj['encoding']!r}")
    return arr.reshape(shape).astype(np.float64)


def save_model(path, model: ColorMapModel) -> None:
    inline = model.bins <= 16
    doc = {
        "variant": model.variant,
        "bins": model.bins,
        "temperature": model.temperature,
        "height": model.height,
        "width": model.width,
        "blur_size": model.blur_size,
        "blur_sigma": model.blur_sigma,
    }
    if model.centroids is not None:
        doc["centroids"] = _encode_array(model.centroids, inline)
    if model.params is not None:
        doc["params"] = _encode_array(model.params, inline)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_model(path) -> ColorMapModel:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("variant") not in VARIANTS:
        raise ValueError(f"unknown variant in model file: {doc.get('variant')!r}")
    model = ColorMapModel(
        variant=doc["variant"], bins=int(doc["bins"]),
        temperature=float(doc["temperature"]),
        height=int(doc["height"]), width=int(doc["width"]),
        centroids=_decode_array(doc["centroids"]) if "centroids" in doc else None,
        params=_decode_array(doc["params"]) if "params" in doc else None,
        blur_size=int(doc.get("blur_size", 9)),
        blur_sigma=float(doc.get("blur_sigma", 2.0)),
    )
    expect = model.param_shape()
    if expect is not None and (model.params is None or model.params.shape != expect):
        got = None if model.params is None else model.params.shape
        raise ShapeError(f"model params shape {got} does not match variant "
                         f"{model.variant!r} expectation {expect}")
    return model


def with_params(model: ColorMapModel, params: np.ndarray) -> ColorMapModel:
    return replace(model, params=params)
