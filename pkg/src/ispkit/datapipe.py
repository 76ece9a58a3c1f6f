"""Weakly-paired data preparation and a fully synthetic stand-in dataset.

The generator renders smooth scenes, derives a phone-style RAW mosaic from
them (inverse gamma, per-channel gains, RGGB sampling, read and shot
noise) and a DSLR-style target (global color matrix, gamma, then a known
misalignment). Ground-truth forward/backward flows of the misalignment are
emitted alongside, so alignment and masking can be tested without an
optical-flow network. Optional distractor patches inject target content
that no flow explains; the emitted backward flow is made inconsistent
there, so the forward-backward mask excludes those pixels.

warp(target, flow_bwd) puts the stored (misaligned) target back onto the
scene/RAW grid exactly, away from distractors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .flowwarp import FlowField, downscale_flow_2x, fb_mask, read_flo, sample_bilinear, write_flo
from .images import (
    MaskImage,
    RawImage,
    RgbImage,
    read_pgm,
    read_ppm,
    read_raw4,
    upsample_nearest_2x,
    write_pgm,
    write_ppm,
    write_raw4,
)
from .rawproc import gamma_process

NCC_THRESHOLD_DEFAULT = 0.5


def sliding_crops(dims, crop: int, stride: int) -> list:
    """Origins (row, col) of a sliding window; empty when crop > dims."""
    if hasattr(dims, "height"):
        h, w = dims.height, dims.width
    else:
        h, w = dims
    if crop <= 0 or stride <= 0:
        raise ValueError(f"crop and stride must be positive, got {crop}, {stride}")
    if crop > h or crop > w:
        return []
    rows = range(0, h - crop + 1, stride)
    cols = range(0, w - crop + 1, stride)
    return [(r, c) for r in rows for c in cols]


def ncc(a, b) -> float:
    """Zero-mean normalized cross-correlation over all channels jointly."""
    av = (a.data if isinstance(a, RgbImage) else np.asarray(a)).astype(np.float64)
    bv = (b.data if isinstance(b, RgbImage) else np.asarray(b)).astype(np.float64)
    if av.shape != bv.shape:
        raise ShapeError(f"ncc shapes differ: {av.shape} vs {bv.shape}")
    ac = av - av.mean()
    bc = bv - bv.mean()
    denom = np.sqrt((ac * ac).sum() * (bc * bc).sum())
    if denom == 0.0:
        return 0.0  # constant image carries no alignment evidence
    return float((ac * bc).sum() / denom)


# ---------------------------------------------------------------------------
# homographies


def _normalization_transform(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    scale = np.sqrt(2.0) / dist if dist > 0 else 1.0
    return np.array([
        [scale, 0.0, -scale * centroid[0]],
        [0.0, scale, -scale * centroid[1]],
        [0.0, 0.0, 1.0],
    ])


def homography_dlt(point_pairs) -> np.ndarray:
    """Direct linear transform from [x1, y1, x2, y2] correspondences."""
    pts = np.asarray(point_pairs, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ShapeError(f"expected (N, 4) point pairs, got {pts.shape}")
    if pts.shape[0] < 4:
        raise ValueError(f"need at least 4 correspondences, got {pts.shape[0]}")
    src, dst = pts[:, :2], pts[:, 2:]
    t_src = _normalization_transform(src)
    t_dst = _normalization_transform(dst)

    def apply_t(t, p):
        ph = np.concatenate([p, np.ones((p.shape[0], 1))], axis=1)
        out = ph @ t.T
        return out[:, :2] / out[:, 2:3]

    sn = apply_t(t_src, src)
    dn = apply_t(t_dst, dst)
    rows = []
    for (x, y), (u, v) in zip(sn, dn):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    a = np.asarray(rows)
    _, s, vt = np.linalg.svd(a)
    if s[-2] < 1e-10 * s[0]:
        raise ValueError("degenerate correspondence configuration (rank deficient)")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_norm @ t_src
    if abs(h[2, 2]) > 1e-12:
        h = h / h[2, 2]
    return h


def warp_homography(img, h: np.ndarray):
    """Inverse-map bilinear warp: out(p) = img(H^-1 p), replicate border."""
    planes = img.data if isinstance(img, RgbImage) else np.asarray(img)
    hm = np.asarray(h, dtype=np.float64)
    if hm.shape != (3, 3):
        raise ShapeError(f"homography must be 3x3, got {hm.shape}")
    try:
        hinv = np.linalg.inv(hm)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"homography is singular: {e}") from e
    _, height, width = planes.shape
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    denom = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / denom
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / denom
    out = sample_bilinear(planes, sx, sy).astype(planes.dtype, copy=False)
    if isinstance(img, RgbImage):
        return RgbImage(np.clip(out, 0.0, 1.0))
    return out


def homography_flow(h: np.ndarray, height: int, width: int) -> FlowField:
    """Dense sampling flow of warp_homography: fwd(p) = H^-1 p - p."""
    hinv = np.linalg.inv(np.asarray(h, dtype=np.float64))
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    denom = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / denom
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / denom
    return FlowField(np.stack([sx - xs, sy - ys]).astype(np.float32))


# ---------------------------------------------------------------------------
# manifest


@dataclass
class SampleRecord:
    id: str
    capture: str
    split: str
    raw: str
    target: str
    ncc: float
    flow_fwd: str | None = None
    flow_bwd: str | None = None
    mask: str | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "capture": self.capture, "split": self.split,
             "raw": self.raw, "target": self.target, "ncc": self.ncc}
        for key in ("flow_fwd", "flow_bwd", "mask"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value
        return d


@dataclass
class Manifest:
    root: Path
    samples: list = field(default_factory=list)
    rejected_count: int = 0

    def split(self, tag: str) -> list:
        return [s for s in self.samples if s.split == tag]

    def save(self, path) -> None:
        doc = {
            "version": 1,
            "rejected_count": self.rejected_count,
            "samples": [s.to_dict() for s in self.samples],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        root = path.parent
        samples = []
        known = {"id", "capture", "split", "raw", "target", "ncc",
                 "flow_fwd", "flow_bwd", "mask"}
        for rec in doc["samples"]:
            extra = set(rec) - known
            if extra:
                raise ValueError(f"unknown manifest keys {sorted(extra)}")
            samples.append(SampleRecord(**rec))
        m = cls(root=root, samples=samples,
                rejected_count=int(doc.get("rejected_count", 0)))
        m.validate()
        return m

    def validate(self) -> None:
        split_of_capture: dict = {}
        for s in self.samples:
            for attr in ("raw", "target", "flow_fwd", "flow_bwd", "mask"):
                rel = getattr(s, attr)
                if rel is not None and not (self.root / rel).exists():
                    raise FileNotFoundError(f"manifest entry {s.id}: missing {rel}")
            seen = split_of_capture.setdefault(s.capture, s.split)
            if seen != s.split:
                raise ValueError(
                    f"capture {s.capture!r} appears in splits {seen!r} and {s.split!r}")


@dataclass
class TrainSample:
    record: SampleRecord
    raw: RawImage
    target: RgbImage
    flow_fwd: FlowField | None = None
    flow_bwd: FlowField | None = None
    mask: MaskImage | None = None


def load_sample(manifest: Manifest, record: SampleRecord) -> TrainSample:
    root = manifest.root
    return TrainSample(
        record=record,
        raw=read_raw4(root / record.raw),
        target=read_ppm(root / record.target),
        flow_fwd=read_flo(root / record.flow_fwd) if record.flow_fwd else None,
        flow_bwd=read_flo(root / record.flow_bwd) if record.flow_bwd else None,
        mask=read_pgm(root / record.mask) if record.mask else None,
    )


def filter_pairs(manifest: Manifest,
                 ncc_threshold: float = NCC_THRESHOLD_DEFAULT) -> Manifest:
    kept = [s for s in manifest.samples if s.ncc >= ncc_threshold]
    return replace(manifest, samples=kept,
                   rejected_count=manifest.rejected_count
                   + len(manifest.samples) - len(kept))


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthConfig:
    raw_size: int = 40             # RAW is square; target is 2x this
    blobs: int = 4
    gradients: int = 2
    edges: int = 2
    blob_radius_range: tuple = (0.1, 0.35)   # fraction of image extent
    blob_amp_range: tuple = (0.1, 0.8)
    peak_range: tuple = (0.92, 1.0)          # per-channel maximum after rescale
    scene_base: float = 0.15                 # ambient level under blobs and ramps
    white_patch: bool = False                # 2x2 reference patch on a mosaic block
    identity_color: bool = False   # target equals the clean scene
    color_strength: float = 0.25   # off-diagonal amplitude of the color matrix
    gamma_range: tuple = (0.85, 1.2)
    gains_range: tuple = (1.05, 1.5)
    read_noise: float = 0.005
    shot_noise: float = 0.01
    misalign: str = "translation"  # none | translation | homography
    min_shift: float = 1.0
    max_shift: float = 3.0
    distractors: int = 0
    distractor_size: int = 16      # in target pixels, kept even
    samples_per_capture: int = 4
    split_fractions: tuple = (0.8, 0.1, 0.1)

    @classmethod
    def identity_oracle(cls) -> "SynthConfig":
        """Noise-free, aligned, untransformed pairs on gentle scenes.

        With this configuration the visualization of the RAW equals the
        downsampled target up to the mosaic phase gap and 8-bit rounding,
        which stays below 1e-2.
        """
        return cls(identity_color=True, read_noise=0.0, shot_noise=0.0,
                   misalign="none", blobs=3, gradients=0, edges=0,
                   white_patch=True, scene_base=0.5,
                   blob_radius_range=(0.4, 0.55), blob_amp_range=(0.05, 0.15),
                   peak_range=(1.0, 1.0))


def render_scene(rng: np.random.Generator, height: int, width: int,
                 blobs: int = 4, gradients: int = 2, edges: int = 2,
                 blob_radius_range=(0.1, 0.35), blob_amp_range=(0.1, 0.8),
                 peak_range=(0.92, 1.0), base: float = 0.15) -> np.ndarray:
    """Smooth blobs + linear gradients + optional half-plane steps, (3, H, W)."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    img = np.full((3, height, width), base)
    for _ in range(blobs):
        cx, cy = rng.uniform(0.0, 1.0, 2)
        radius = rng.uniform(*blob_radius_range)
        amp = rng.uniform(*blob_amp_range, 3)
        blob = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * radius * radius)))
        img += amp[:, None, None] * blob
    for _ in range(gradients):
        phi = rng.uniform(0.0, 2 * np.pi)
        amp = rng.uniform(0.0, 0.3, 3)
        ramp = np.cos(phi) * xx + np.sin(phi) * yy
        img += amp[:, None, None] * (ramp - ramp.min())
    for _ in range(edges):
        step = rng.uniform(-0.3, 0.3, 3)
        if rng.uniform() < 0.5:
            cut = rng.integers(width // 4, 3 * width // 4)
            img[:, :, :cut] += step[:, None, None]
        else:
            cut = rng.integers(height // 4, 3 * height // 4)
            img[:, :cut, :] += step[:, None, None]
    img = np.clip(img, 0.01, None)
    peak = rng.uniform(*peak_range, 3)
    img *= (peak / img.max(axis=(1, 2)))[:, None, None]
    return np.clip(img, 0.0, 1.0)


def _mosaic_rggb(linear: np.ndarray) -> np.ndarray:
    """Sample the RGGB sites of a full-resolution linear image into 4 planes."""
    r = linear[0, 0::2, 0::2]
    gr = linear[1, 0::2, 1::2]
    gb = linear[1, 1::2, 0::2]
    b = linear[2, 1::2, 1::2]
    return np.stack([r, gr, gb, b])


def _random_color_matrix(rng: np.random.Generator, strength: float) -> np.ndarray:
    for _ in range(32):
        m = np.eye(3) + rng.uniform(-strength, strength, (3, 3))
        if abs(np.linalg.det(m)) > 0.2:
            return m
    return np.eye(3)


def _sample_misalignment(rng: np.random.Generator, cfg: SynthConfig,
                         height: int, width: int):
    if cfg.misalign == "none":
        return None, None
    if cfg.misalign == "translation":
        mag = rng.uniform(cfg.min_shift, cfg.max_shift, 2)
        sign = np.where(rng.uniform(size=2) < 0.5, -1.0, 1.0)
        dx, dy = mag * sign
        fwd = FlowField(np.stack([
            np.full((height, width), dx, dtype=np.float32),
            np.full((height, width), dy, dtype=np.float32)]))
        bwd = FlowField(-fwd.data)
        return fwd, bwd
    if cfg.misalign == "homography":
        corners = np.array([[0, 0], [width - 1.0, 0], [0, height - 1.0],
                            [width - 1.0, height - 1.0]])
        jitter = rng.uniform(cfg.min_shift, cfg.max_shift, (4, 2)) \
            * np.where(rng.uniform(size=(4, 2)) < 0.5, -1.0, 1.0)
        pairs = np.concatenate([corners, corners + jitter], axis=1)
        h = homography_dlt(pairs)
        fwd = homography_flow(h, height, width)
        bwd = homography_flow(np.linalg.inv(h), height, width)
        return fwd, bwd
    raise ValueError(f"unknown misalignment kind {cfg.misalign!r}")


def synth_dataset(n: int, seed: int, out_dir, cfg: SynthConfig = SynthConfig()) -> Manifest:
    """Write n samples plus a manifest under out_dir; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = cfg.raw_size
    full = 2 * size
    if size % 2:
        raise ValueError(f"raw_size must be even, got {size}")

    captures = max(1, (n + cfg.samples_per_capture - 1) // cfg.samples_per_capture)
    f_train, f_val, _ = cfg.split_fractions
    n_train_caps = int(round(captures * f_train))
    n_val_caps = int(round(captures * f_val))

    def split_of(capture_idx: int) -> str:
        if capture_idx < n_train_caps:
            return "train"
        if capture_idx < n_train_caps + n_val_caps:
            return "val"
        return "test"

    samples = []
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        sample_id = f"sample{i:04d}"
        sample_dir = out_dir / sample_id
        sample_dir.mkdir(exist_ok=True)

        scene = render_scene(rng, full, full, cfg.blobs, cfg.gradients, cfg.edges,
                             cfg.blob_radius_range, cfg.blob_amp_range,
                             cfg.peak_range, cfg.scene_base)
        if cfg.white_patch:
            # saturated reference covering one whole mosaic block: every RAW
            # plane then attains its maximum at an exactly known site value
            scene[:, full // 2:full // 2 + 2, full // 2:full // 2 + 2] = 1.0

        # phone RAW branch: inverse display gamma, gains, mosaic, noise
        linear = scene ** 2.2
        gains = rng.uniform(*cfg.gains_range, 3)
        raw_planes = _mosaic_rggb(linear * gains[:, None, None])
        if cfg.read_noise > 0 or cfg.shot_noise > 0:
            noise = rng.normal(0.0, 1.0, raw_planes.shape)
            shot = rng.normal(0.0, 1.0, raw_planes.shape)
            raw_planes = raw_planes + cfg.read_noise * noise \
                + cfg.shot_noise * np.sqrt(np.clip(raw_planes, 0.0, None)) * shot
        raw = RawImage(np.clip(raw_planes, 0.0, None).astype(np.float32))

        # DSLR branch: color matrix + gamma, then the known misalignment
        if cfg.identity_color:
            target = scene.copy()
        else:
            m = _random_color_matrix(rng, cfg.color_strength)
            g = rng.uniform(*cfg.gamma_range)
            target = np.clip(np.einsum("ij,jhw->ihw", m, scene), 0.0, None) ** g
            target = np.clip(target, 0.0, 1.0)

        fwd, bwd = _sample_misalignment(rng, cfg, full, full)
        if fwd is not None:
            target = sample_bilinear(
                target, *_flow_grid(fwd)).astype(np.float64)
        target = np.clip(target, 0.0, 1.0)

        if cfg.distractors > 0 and bwd is not None:
            bwd_data = bwd.data.copy()
            s = cfg.distractor_size - cfg.distractor_size % 2
            for _ in range(cfg.distractors):
                r0 = 2 * int(rng.integers(2, (full - s) // 2 - 1))
                c0 = 2 * int(rng.integers(2, (full - s) // 2 - 1))
                patch = render_scene(rng, s, s, blobs=2, gradients=1, edges=0)
                target[:, r0:r0 + s, c0:c0 + s] = patch
                # backward flow over the patch contradicts the forward flow,
                # so the consistency mask drops these pixels
                bwd_data[:, r0:r0 + s, c0:c0 + s] += 4.0
            bwd = FlowField(bwd_data)

        target_img = RgbImage(target.astype(np.float32))
        write_raw4(sample_dir / "raw.raw4", raw)
        write_ppm(sample_dir / "target.ppm", target_img)
        # score the stored pair for the weak-pairing filter
        vis = upsample_nearest_2x(gamma_process(raw))
        pair_ncc = ncc(vis, read_ppm(sample_dir / "target.ppm"))

        record = SampleRecord(
            id=sample_id, capture=f"cap{i // cfg.samples_per_capture:03d}",
            split=split_of(i // cfg.samples_per_capture),
            raw=f"{sample_id}/raw.raw4", target=f"{sample_id}/target.ppm",
            ncc=pair_ncc)
        if fwd is not None:
            write_flo(sample_dir / "flow_fwd.flo", fwd)
            write_flo(sample_dir / "flow_bwd.flo", bwd)
            mask = fb_mask(downscale_flow_2x(fwd), downscale_flow_2x(bwd))
            write_pgm(sample_dir / "mask.pgm", mask)
            record.flow_fwd = f"{sample_id}/flow_fwd.flo"
            record.flow_bwd = f"{sample_id}/flow_bwd.flo"
            record.mask = f"{sample_id}/mask.pgm"
        samples.append(record)

    manifest = Manifest(root=out_dir, samples=samples)
    manifest.save(out_dir / "manifest.json")
    return manifest


def _flow_grid(flow: FlowField):
    ys, xs = np.mgrid[0:flow.height, 0:flow.width].astype(np.float64)
    return xs + flow.data[0], ys + flow.data[1]
