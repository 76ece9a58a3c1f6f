"""Losses, augmentation, the optimizer, and the training loops.

Training is deterministic: every random draw comes from a generator keyed
by (seed, step), so runs are bitwise reproducible at one thread and a
checkpoint resume continues exactly where the saved run left off.

Alignment modes for the reconstruction loss:
  "mask"    warp ground truth onto the RAW grid with the known backward
            flow and exclude pixels failing forward-backward consistency
  "aligned" warp, but keep every pixel
  "noalign" use the misaligned ground truth as-is

Hue jitter rotates colors about the gray axis n = (1,1,1)/sqrt(3):
R(theta) = cos(theta) I + (1 - cos(theta)) n n^T + sin(theta) [n]_x,
which preserves R+G+B exactly, so gray pixels are fixed points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import colormap
from .datapipe import Manifest, TrainSample, load_sample
from .errors import ShapeError
from .flowwarp import FlowField, warp
from .grad import ParamSet, Tape, backward, load_checkpoint, ops, save_checkpoint
from .grad.engine import value_of
from .images import (
    RawImage,
    RgbImage,
    downsample_bilinear_2x,
    gaussian_kernel_1d,
    make_coord_map,
)
from .models import (
    IspNetConfig,
    UNetConfig,
    color_predictor_forward,
    init_color_predictor_params,
    init_ispnet_params,
    ispnet_forward,
)
from .rawproc import gamma_process, init_preprocess_params, preprocess_forward

JITTER_RANGE = 0.2
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
CONSTRAINT_BLUR_SIZE = 9
CONSTRAINT_BLUR_SIGMA = 2.0


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class LossWeights:
    pred: float = 1.0
    map: float = 1.0
    constraint: float = 1.0
    clr_pred: float = 1.0
    reconstruct: float = 1.0

    def __post_init__(self):
        for name in ("pred", "map", "constraint", "clr_pred", "reconstruct"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    base_lr: float = 2e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def state_entries(self) -> dict:
        entries = {"opt.step": np.float32(self.step)}
        for name, arr in self.m.items():
            entries[f"opt.m.{name}"] = arr
        for name, arr in self.v.items():
            entries[f"opt.v.{name}"] = arr
        return entries

    def load_entries(self, entries: dict) -> None:
        self.step = int(np.asarray(entries["opt.step"]).reshape(-1)[0])
        self.m = {k[len("opt.m."):]: np.array(v, dtype=np.float32)
                  for k, v in entries.items() if k.startswith("opt.m.")}
        self.v = {k[len("opt.v."):]: np.array(v, dtype=np.float32)
                  for k, v in entries.items() if k.startswith("opt.v.")}


def adam_step(params: ParamSet, grads: dict, state: AdamState,
              lr_multiplier: float = 1.0) -> None:
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    lr = state.base_lr * lr_multiplier
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        if g.shape != tensor.data.shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {g.shape}, expected "
                f"{tensor.data.shape}")
        g = g.astype(np.float32, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        tensor.data[...] = tensor.data - update


@dataclass(frozen=True)
class LrSchedule:
    """Rate multiplier: halves at 50, 75, 90, and 95 percent of the run."""

    total: int

    def multiplier(self, index: int) -> float:
        f = index / self.total
        if f < 0.50:
            return 1.0
        if f < 0.75:
            return 0.5
        if f < 0.90:
            return 0.25
        if f < 0.95:
            return 0.125
        return 0.0625


# ---------------------------------------------------------------------------
# losses


def loss_isp(y_hat, y_aligned, mask_up):
    """Masked L1 between prediction and the aligned ground truth."""
    return ops.masked_l1(y_hat, y_aligned, mask_up)


_BLUR_W = None


def _constraint_blur_weights(channels: int = 3) -> np.ndarray:
    global _BLUR_W
    if _BLUR_W is None or _BLUR_W.shape[0] != channels:
        k = gaussian_kernel_1d(CONSTRAINT_BLUR_SIZE, CONSTRAINT_BLUR_SIGMA)
        k2 = np.outer(k, k).astype(np.float32)
        w = np.zeros((channels, channels, CONSTRAINT_BLUR_SIZE,
                      CONSTRAINT_BLUR_SIZE), dtype=np.float32)
        for c in range(channels):
            w[c, c] = k2
        _BLUR_W = w
    return _BLUR_W


def loss_preprocess(x_tilde, x_prime, c_xp, mask,
                    variant: str = "affine_dep", bins: int = 15):
    """(L_map, L_constraint) for the preprocessing network.

    The color-map fit is treated as a constant: gradients reach x_tilde
    only through the map application, never through the closed-form solve.
    """
    xt_const = np.asarray(value_of(x_tilde), dtype=np.float64)
    c_np = np.asarray(value_of(c_xp), dtype=np.float64)
    model = colormap.fit(xt_const, c_np, variant=variant, bins=bins)
    mapped = colormap.apply_graph(x_tilde, model)
    l_map = ops.masked_l1(mapped, c_np.astype(np.float32), mask)
    w = _constraint_blur_weights()
    xp_np = np.asarray(value_of(x_prime))
    l_constraint = ops.l1_mean(ops.conv2d(x_tilde, w),
                               value_of(ops.conv2d(xp_np, w)))
    return l_map, l_constraint


def loss_color_predictor(y_clr_hat, c_xp, mask, x_hat, x):
    """(masked color prediction L1, plain RAW reconstruction L1)."""
    l_clr = ops.masked_l1(y_clr_hat, c_xp, mask)
    l_rec = ops.l1_mean(x_hat, x)
    return l_clr, l_rec


# ---------------------------------------------------------------------------
# augmentation


def _hue_rotation_matrix(theta: float) -> np.ndarray:
    n = np.ones(3) / np.sqrt(3.0)
    cross = np.array([[0.0, -n[2], n[1]],
                      [n[2], 0.0, -n[0]],
                      [-n[1], n[0], 0.0]])
    return (np.cos(theta) * np.eye(3)
            + (1.0 - np.cos(theta)) * np.outer(n, n)
            + np.sin(theta) * cross)


def color_jitter(y, seed: int, deltas=None):
    """Brightness, contrast, saturation, then hue; each delta in [-0.2, 0.2]."""
    data = (y.data if isinstance(y, RgbImage) else np.asarray(y)).astype(np.float64)
    if deltas is None:
        rng = np.random.default_rng(seed)
        d_b, d_c, d_s, d_h = rng.uniform(-JITTER_RANGE, JITTER_RANGE, 4)
    else:
        d_b, d_c, d_s, d_h = deltas
    out = data + d_b
    mean = out.mean()
    out = (out - mean) * (1.0 + d_c) + mean
    luma = np.tensordot(LUMA_WEIGHTS, out, axes=(0, 0))
    out = out * (1.0 - d_s) + luma[None] * d_s
    rot = _hue_rotation_matrix(d_h * np.pi)
    out = np.einsum("ij,jhw->ihw", rot, out)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return RgbImage(out) if isinstance(y, RgbImage) else out


# Rotating or flipping a mosaic permutes which plane sits on which site.
# Color classes stay put: rotating or flipping the packed planes keeps red
# in plane 0 and blue in plane 3, each sample landing within half a RAW
# pixel of its ideal site. A 90-degree rotation exchanges the roles of the
# two green planes (row-green becomes column-green); a horizontal flip
# leaves all four in place.
_ROT_PERM = (0, 2, 1, 3)


def _rot90_raw(planes: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(planes[list(_ROT_PERM)], axes=(1, 2)))


def _fliph_raw(planes: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(planes[:, :, ::-1])


def _rot90_flow(flow: np.ndarray) -> np.ndarray:
    u, v = flow
    return np.ascontiguousarray(
        np.stack([np.rot90(v), -np.rot90(u)]))


def _fliph_flow(flow: np.ndarray) -> np.ndarray:
    u, v = flow
    return np.ascontiguousarray(np.stack([-u[:, ::-1], v[:, ::-1]]))


def augment_arrays(raw: np.ndarray, target: np.ndarray, flows: list,
                   mask: np.ndarray | None, k_rot: int, flip: bool):
    """Consistent rotation/flip of a RAW+target pair with its flows."""
    flows = [None if f is None else np.asarray(f, dtype=np.float32)
             for f in flows]
    for _ in range(k_rot % 4):
        raw = _rot90_raw(raw)
        target = np.ascontiguousarray(np.rot90(target, axes=(1, 2)))
        flows = [f if f is None else _rot90_flow(f) for f in flows]
        if mask is not None:
            mask = np.ascontiguousarray(np.rot90(mask))
    if flip:
        raw = _fliph_raw(raw)
        target = np.ascontiguousarray(target[:, :, ::-1])
        flows = [f if f is None else _fliph_flow(f) for f in flows]
        if mask is not None:
            mask = np.ascontiguousarray(mask[:, ::-1])
    return raw, target, flows, mask


# ---------------------------------------------------------------------------
# training configuration and loops


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 200
    batch_size: int = 16
    lr: float = 2e-4
    align_mode: str = "mask"           # mask | aligned | noalign
    colormap_variant: str = "affine_dep"
    bins: int = 15
    no_color_pred: bool = False        # condition the ISP net on zeros
    weights: LossWeights = field(default_factory=LossWeights)
    augment: bool = True
    jitter: bool = True
    checkpoint_interval: int = 0
    checkpoint_dir: str | None = None
    isp: IspNetConfig = field(default_factory=IspNetConfig)
    unet: UNetConfig = field(default_factory=UNetConfig.toy)
    eta_hidden: int = 16
    split: str = "train"

    def __post_init__(self):
        if self.align_mode not in ("mask", "aligned", "noalign"):
            raise ValueError(f"unknown align_mode {self.align_mode!r}")
        if self.colormap_variant not in colormap.VARIANTS:
            raise ValueError(f"unknown colormap variant {self.colormap_variant!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")


@dataclass
class TrainResult:
    params: ParamSet
    state: AdamState
    losses: list
    events: list


class _EventLog:
    def __init__(self, log_fn=None):
        self.events = []
        self.log_fn = log_fn

    def emit(self, **payload):
        self.events.append(payload)
        if self.log_fn is not None:
            self.log_fn(payload)


def _prepared_samples(manifest: Manifest, cfg: TrainConfig) -> list:
    records = manifest.split(cfg.split)
    if not records:
        raise ValueError(f"no samples in split {cfg.split!r}")
    return [load_sample(manifest, r) for r in records]


def _isp_inputs(sample: TrainSample, cfg: TrainConfig, step_rng):
    """Per-sample arrays for one ISP training step, after augmentation."""
    raw = sample.raw.data
    target = sample.target.data
    fwd = None if sample.flow_fwd is None else sample.flow_fwd.data
    bwd = None if sample.flow_bwd is None else sample.flow_bwd.data
    mask = None if sample.mask is None else sample.mask.data[0]

    if cfg.jitter:
        target = color_jitter(target, int(step_rng.integers(0, 2 ** 31)))
    if cfg.augment:
        k_rot = int(step_rng.integers(0, 4))
        flip = bool(step_rng.integers(0, 2))
        raw, target, (fwd, bwd), mask = augment_arrays(
            raw, target, [fwd, bwd], mask, k_rot, flip)

    h, w = raw.shape[1:]
    if cfg.align_mode in ("mask", "aligned") and bwd is not None:
        y = warp(RgbImage(target), FlowField(bwd)).data
    else:
        y = target
    if cfg.align_mode == "mask" and mask is not None:
        m = mask.astype(np.float32)
    else:
        m = np.ones((h, w), dtype=np.float32)
    c = downsample_bilinear_2x(RgbImage(y)).data
    xprime = gamma_process(RawImage(raw)).data
    return {
        "x": raw, "xprime": xprime, "coords": make_coord_map(h, w).data,
        "c": c, "y": y, "mask": m,
        "mask_up": np.repeat(np.repeat(m, 2, axis=0), 2, axis=1),
    }


def _conditioning(x_tilde, prep: dict, cfg: TrainConfig):
    """The color image fed to the ISP net; constant w.r.t. the tape."""
    xt = np.asarray(value_of(x_tilde), dtype=np.float64)
    return _conditioning_from_arrays(xt, prep["c"], cfg)


def _batch_indices(n: int, cfg: TrainConfig, step: int) -> np.ndarray:
    rng = np.random.default_rng((cfg.seed, step, 0xBA7C4))
    return rng.integers(0, n, size=min(cfg.batch_size, n))


def _weighted_total(terms: list):
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.scalar_mul(total, 1.0 / len(terms))


def _checkpoint(path, params: ParamSet, state: AdamState) -> None:
    entries = dict(params.state_dict())
    entries.update(state.state_entries())
    save_checkpoint(path, entries)


def _restore(path, params: ParamSet, state: AdamState) -> None:
    entries = load_checkpoint(path)
    params.load_values({k: v for k, v in entries.items()
                        if not k.startswith("opt.")})
    state.load_entries(entries)


def _grads_of(params: ParamSet) -> dict:
    return {name: t.grad for name, t in params.items() if t.grad is not None}


def _emit_steps(cfg: TrainConfig, params, state, step_fn, log: _EventLog,
                label: str):
    schedule = LrSchedule(cfg.steps)
    losses = []
    start = state.step
    for step in range(start, cfg.steps):
        params.zero_grad()
        try:
            with Tape() as tape:
                loss = step_fn(step)
                backward(tape, loss)
        except FloatingPointError as exc:
            raise FloatingPointError(
                f"{label}: non-finite loss at step {step}: {exc}") from exc
        loss_value = float(value_of(loss))
        if not np.isfinite(loss_value):
            raise FloatingPointError(
                f"{label}: non-finite loss at step {step}")
        adam_step(params, _grads_of(params), state, schedule.multiplier(step))
        losses.append(loss_value)
        log.emit(event="step", label=label, step=step, loss=loss_value,
                 lr_multiplier=schedule.multiplier(step))
        if (cfg.checkpoint_interval and cfg.checkpoint_dir
                and (step + 1) % cfg.checkpoint_interval == 0):
            path = Path(cfg.checkpoint_dir) / f"{label}_step{step + 1:06d}.ispw"
            _checkpoint(path, params, state)
            log.emit(event="checkpoint", label=label, step=step,
                     path=str(path))
    return losses


def train_isp(manifest: Manifest, cfg: TrainConfig, log_fn=None,
              resume_from=None) -> TrainResult:
    """Joint loop for the ISP net and the preprocessing net."""
    samples = _prepared_samples(manifest, cfg)
    params = ParamSet()
    init_ispnet_params(cfg.seed, cfg.isp, params, "f.")
    init_preprocess_params(cfg.seed + 1, hidden=cfg.eta_hidden, params=params,
                           prefix="eta.")
    state = AdamState(base_lr=cfg.lr)
    if resume_from is not None:
        _restore(resume_from, params, state)
    log = _EventLog(log_fn)
    use_prep = cfg.weights.map > 0 or cfg.weights.constraint > 0

    def step_fn(step):
        idx = _batch_indices(len(samples), cfg, step)
        terms = []
        for j, i in enumerate(idx):
            rng = np.random.default_rng((cfg.seed, step, j))
            prep = _isp_inputs(samples[i], cfg, rng)
            if use_prep:
                x_tilde = preprocess_forward(prep["xprime"], prep["coords"],
                                             params, "eta.")
                l_map, l_con = loss_preprocess(
                    x_tilde, prep["xprime"], prep["c"], prep["mask"],
                    variant=cfg.colormap_variant, bins=cfg.bins)
                chat = _conditioning(x_tilde, prep, cfg)
            else:
                chat = _conditioning(prep["xprime"], prep, cfg)
            y_hat = ispnet_forward(prep["x"], chat, params, cfg.isp, "f.")
            if prep["mask"].sum() == 0:
                log.emit(event="warning", kind="empty_mask", step=step,
                         sample=samples[i].record.id)
            l_pred = loss_isp(y_hat, prep["y"], prep["mask_up"])
            term = ops.scalar_mul(l_pred, cfg.weights.pred)
            if use_prep:
                term = ops.add(term, ops.scalar_mul(l_map, cfg.weights.map))
                term = ops.add(term, ops.scalar_mul(l_con, cfg.weights.constraint))
            terms.append(term)
        return _weighted_total(terms)

    losses = _emit_steps(cfg, params, state, step_fn, log, "isp")
    return TrainResult(params, state, losses, log.events)


def train_color_predictor(manifest: Manifest, cfg: TrainConfig, log_fn=None,
                          resume_from=None) -> TrainResult:
    samples = _prepared_samples(manifest, cfg)
    params = init_color_predictor_params(cfg.seed, cfg.unet, prefix="g.")
    state = AdamState(base_lr=cfg.lr)
    if resume_from is not None:
        _restore(resume_from, params, state)
    log = _EventLog(log_fn)

    def step_fn(step):
        idx = _batch_indices(len(samples), cfg, step)
        terms = []
        for j, i in enumerate(idx):
            rng = np.random.default_rng((cfg.seed, step, j))
            prep = _isp_inputs(samples[i], cfg, rng)
            xp64 = prep["xprime"].astype(np.float64)
            model = colormap.fit(xp64, prep["c"].astype(np.float64),
                                 variant=cfg.colormap_variant, bins=cfg.bins)
            if cfg.colormap_variant == "color_blur":
                c_target = colormap.apply_model(
                    xp64, model, target=prep["c"].astype(np.float64))
            else:
                c_target = colormap.apply_model(xp64, model)
            c_pred, x_hat = color_predictor_forward(
                prep["x"], prep["coords"], params, cfg.unet, "g.")
            l_clr, l_rec = loss_color_predictor(
                c_pred, c_target.astype(np.float32), prep["mask"],
                x_hat, prep["x"])
            terms.append(ops.add(ops.scalar_mul(l_clr, cfg.weights.clr_pred),
                                 ops.scalar_mul(l_rec, cfg.weights.reconstruct)))
        return _weighted_total(terms)

    losses = _emit_steps(cfg, params, state, step_fn, log, "color")
    return TrainResult(params, state, losses, log.events)


def train_joint(manifest: Manifest, cfg: TrainConfig, isp_checkpoint,
                color_checkpoint, log_fn=None) -> TrainResult:
    """Fine-tune the composed pipeline F(x, G(x)) end to end."""
    samples = _prepared_samples(manifest, cfg)
    params = ParamSet()
    init_ispnet_params(cfg.seed, cfg.isp, params, "f.")
    init_preprocess_params(cfg.seed + 1, hidden=cfg.eta_hidden, params=params,
                           prefix="eta.")
    init_color_predictor_params(cfg.seed, cfg.unet, params, "g.")
    isp_entries = load_checkpoint(isp_checkpoint)
    color_entries = load_checkpoint(color_checkpoint)
    merged = {**{k: v for k, v in isp_entries.items() if not k.startswith("opt.")},
              **{k: v for k, v in color_entries.items() if not k.startswith("opt.")}}
    params.load_values(merged)
    state = AdamState(base_lr=cfg.lr)
    log = _EventLog(log_fn)

    def step_fn(step):
        idx = _batch_indices(len(samples), cfg, step)
        terms = []
        for j, i in enumerate(idx):
            rng = np.random.default_rng((cfg.seed, step, j))
            prep = _isp_inputs(samples[i], cfg, rng)
            c_pred, _ = color_predictor_forward(
                prep["x"], prep["coords"], params, cfg.unet, "g.")
            y_hat = ispnet_forward(prep["x"], c_pred, params, cfg.isp, "f.")
            terms.append(ops.scalar_mul(
                loss_isp(y_hat, prep["y"], prep["mask_up"]), cfg.weights.pred))
        return _weighted_total(terms)

    losses = _emit_steps(cfg, params, state, step_fn, log, "joint")
    return TrainResult(params, state, losses, log.events)


# ---------------------------------------------------------------------------
# inference


def infer_pipeline(raw, params: ParamSet, cfg: TrainConfig,
                   use_color_net: bool = True) -> RgbImage:
    """Full pipeline on one RAW frame; outputs clipped sRGB at 2x size."""
    x = raw.data if hasattr(raw, "data") else np.asarray(raw)
    h, w = x.shape[1:]
    if use_color_net and not cfg.no_color_pred:
        c_pred, _ = color_predictor_forward(x, make_coord_map(h, w).data,
                                            params, cfg.unet, "g.")
        chat = np.asarray(value_of(c_pred), dtype=np.float32)
    else:
        chat = np.zeros((3, h, w), dtype=np.float32)
    y_hat = ispnet_forward(x, chat, params, cfg.isp, "f.")
    return RgbImage(np.clip(value_of(y_hat), 0.0, 1.0).astype(np.float32))


def infer_with_reference(raw: RawImage, reference: RgbImage, flow_bwd,
                         params: ParamSet, cfg: TrainConfig) -> RgbImage:
    """Pipeline output conditioned on a map fitted against a reference.

    Mirrors the training-time conditioning: the reference (the ground
    truth during ablations) is aligned with the known flow, downsampled,
    and a color map fitted on the preprocessed visualization provides
    the conditioning image.
    """
    x = raw.data
    h, w = x.shape[1:]
    aligned = warp(reference, flow_bwd) if flow_bwd is not None else reference
    c = downsample_bilinear_2x(aligned).data
    xprime = gamma_process(raw).data
    if "eta.conv0.w" in params:
        xt = preprocess_forward(xprime, make_coord_map(h, w).data, params, "eta.")
        xt_np = np.asarray(value_of(xt), dtype=np.float64)
    else:
        xt_np = xprime.astype(np.float64)
    chat = _conditioning_from_arrays(xt_np, c, cfg)
    y_hat = ispnet_forward(x, chat, params, cfg.isp, "f.")
    return RgbImage(np.clip(value_of(y_hat), 0.0, 1.0).astype(np.float32))


def _conditioning_from_arrays(xt_np: np.ndarray, c: np.ndarray,
                              cfg: TrainConfig) -> np.ndarray:
    if cfg.no_color_pred:
        return np.zeros_like(c, dtype=np.float32)
    model = colormap.fit(xt_np, c.astype(np.float64),
                         variant=cfg.colormap_variant, bins=cfg.bins)
    if cfg.colormap_variant == "color_blur":
        chat = colormap.apply_model(xt_np, model, target=c.astype(np.float64))
    else:
        chat = colormap.apply_model(xt_np, model)
    return chat.astype(np.float32)
