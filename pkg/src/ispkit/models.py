"""The three trainable networks, scalable from toy to paper-sized configs.

- A global-context attention block that routes image tokens through a small
  learned latent array. Cost is linear in token count: the latents attend to
  the tokens (cross-attention), process among themselves (self-attention),
  and are read back through token-derived queries. The final read-out
  projection starts at zero, so the block is an exact identity at init.
- A U-Net color predictor with one shared encoder and two decoders: one
  emits the low-resolution color target estimate, the other reconstructs
  the RAW input as a self-supervision signal.
- A dense-residual ISP network mapping RAW plus a color image to sRGB at
  twice the RAW resolution.

All forwards build nodes on the active gradient tape and take a parameter
name prefix, so several networks can live in one ParamSet.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .grad import ParamSet, SplitMix64, kaiming_uniform, ops
from .grad.engine import value_of
from .images import CoordMap, RawImage, RgbImage

LEAKY_SLOPE = 0.2
RESIDUAL_SCALE = 0.2  # dense-block and block-chain residual scaling


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class GctConfig:
    latent_count: int
    latent_dim: int
    input_dim: int
    heads: int = 4
    self_attn_layers: int = 2

    def __post_init__(self):
        if self.latent_count < 1:
            raise ValueError(f"latent_count must be >= 1, got {self.latent_count}")
        if self.latent_dim % self.heads:
            raise ValueError(
                f"latent_dim {self.latent_dim} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 4
    channels: tuple = (64, 128, 256, 512)
    gct: tuple = ()
    head_growth: int = 32

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.channels) != self.levels:
            raise ValueError(
                f"{self.levels} levels need {self.levels} channel widths, "
                f"got {len(self.channels)}")
        if not self.gct:
            # paper-scale schedule: token dim doubles per level while the
            # latent array halves in count and doubles in width
            sched = tuple(
                GctConfig(latent_count=1024 // (1 << l), latent_dim=1 << (l + 7),
                          input_dim=self.channels[l])
                for l in range(self.levels))
            object.__setattr__(self, "gct", sched)
        if len(self.gct) != self.levels:
            raise ValueError("need one latent config per level")
        for l, g in enumerate(self.gct):
            if g.input_dim != self.channels[l]:
                raise ValueError(
                    f"level {l}: latent input_dim {g.input_dim} != channels "
                    f"{self.channels[l]}")

    @classmethod
    def toy(cls) -> "UNetConfig":
        gct = tuple(GctConfig(latent_count=8, latent_dim=16, input_dim=c,
                              heads=1, self_attn_layers=1) for c in (8, 16))
        return cls(levels=2, channels=(8, 16), gct=gct, head_growth=8)

    @classmethod
    def full_scale(cls) -> "UNetConfig":
        return cls()


@dataclass(frozen=True)
class IspNetConfig:
    rrdb_blocks: int = 2
    channels: int = 16
    growth: int = 8
    in_channels: int = 7  # 4 RAW planes + 3 color channels

    @classmethod
    def full_scale(cls) -> "IspNetConfig":
        return cls(rrdb_blocks=8, channels=64, growth=32)


# ---------------------------------------------------------------------------
# attention block


def init_gct_params(rng: SplitMix64, cfg: GctConfig, params: ParamSet,
                    prefix: str) -> ParamSet:
    k, c, d = cfg.latent_count, cfg.latent_dim, cfg.input_dim

    def linear(name, nin, nout, zero=False):
        w = np.zeros((nin, nout), dtype=np.float32) if zero \
            else kaiming_uniform(rng, (nin, nout), nin)
        params.add(f"{prefix}{name}.w", w)
        params.add(f"{prefix}{name}.b", np.zeros(nout, dtype=np.float32))

    def norm(name, dim):
        params.add(f"{prefix}{name}.g", np.ones(dim, dtype=np.float32))
        params.add(f"{prefix}{name}.b", np.zeros(dim, dtype=np.float32))

    params.add(f"{prefix}z", kaiming_uniform(rng, (k, c), c))
    norm("cross.ln_tok", d)
    norm("cross.ln_lat", c)
    linear("cross.q", c, c)
    linear("cross.k", d, c)
    linear("cross.v", d, c)
    linear("cross.out", c, c)
    for j in range(cfg.self_attn_layers):
        norm(f"self{j}.ln", c)
        for nm in ("q", "k", "v", "out"):
            linear(f"self{j}.{nm}", c, c)
        norm(f"ff{j}.ln", c)
        linear(f"ff{j}.w1", c, 2 * c)
        linear(f"ff{j}.w2", 2 * c, c)
    norm("dec.ln_tok", d)
    norm("dec.ln_lat", c)
    linear("dec.q", d, c)
    linear("dec.k", c, c)
    linear("dec.v", c, c)
    linear("dec.out", c, d, zero=True)  # residual identity at init
    return params


def _linear(x, params, prefix, name):
    return ops.add(ops.matmul(x, params[f"{prefix}{name}.w"]),
                   params[f"{prefix}{name}.b"])


def _norm(x, params, prefix, name):
    return ops.layer_norm(x, params[f"{prefix}{name}.g"], params[f"{prefix}{name}.b"])


def _attention(q, kk, v, heads: int):
    """Scaled dot-product attention, heads split along the feature axis."""
    c = value_of(q).shape[1]
    dh = c // heads
    scale = 1.0 / float(np.sqrt(dh))
    outs = []
    for h in range(heads):
        qh = ops.narrow(q, 1, h * dh, dh)
        kh = ops.narrow(kk, 1, h * dh, dh)
        vh = ops.narrow(v, 1, h * dh, dh)
        weights = ops.softmax(ops.scalar_mul(ops.matmul(qh, kh, transpose_b=True),
                                             scale), axis=-1)
        outs.append(ops.matmul(weights, vh))
    return outs[0] if heads == 1 else ops.concat(outs, axis=1)


def gct_forward(i_l, params: ParamSet, cfg: GctConfig, prefix: str = "gct."):
    """Token map (H, W, D) -> same shape; residual skip around the block."""
    val = value_of(i_l)
    if val.ndim != 3 or val.shape[2] != cfg.input_dim:
        raise ShapeError(
            f"expected (H, W, {cfg.input_dim}) token map, got {val.shape}")
    h, w, d = val.shape
    tokens = ops.reshape(i_l, (h * w, d))

    tok_n = _norm(tokens, params, prefix, "cross.ln_tok")
    keys = _linear(tok_n, params, prefix, "cross.k")
    vals = _linear(tok_n, params, prefix, "cross.v")
    lat = params[f"{prefix}z"]
    queries = _linear(_norm(lat, params, prefix, "cross.ln_lat"),
                      params, prefix, "cross.q")
    gathered = _attention(queries, keys, vals, cfg.heads)
    z = ops.add(lat, _linear(gathered, params, prefix, "cross.out"))

    for j in range(cfg.self_attn_layers):
        zn = _norm(z, params, prefix, f"self{j}.ln")
        attn = _attention(_linear(zn, params, prefix, f"self{j}.q"),
                          _linear(zn, params, prefix, f"self{j}.k"),
                          _linear(zn, params, prefix, f"self{j}.v"),
                          cfg.heads)
        z = ops.add(z, _linear(attn, params, prefix, f"self{j}.out"))
        fn = _norm(z, params, prefix, f"ff{j}.ln")
        hmid = ops.leaky_relu(_linear(fn, params, prefix, f"ff{j}.w1"), LEAKY_SLOPE)
        z = ops.add(z, _linear(hmid, params, prefix, f"ff{j}.w2"))

    # read-out: token-derived queries against the processed latents
    q_i = _linear(_norm(tokens, params, prefix, "dec.ln_tok"), params, prefix, "dec.q")
    zn = _norm(z, params, prefix, "dec.ln_lat")
    decoded = _attention(q_i, _linear(zn, params, prefix, "dec.k"),
                         _linear(zn, params, prefix, "dec.v"), cfg.heads)
    out = _linear(decoded, params, prefix, "dec.out")
    return ops.reshape(ops.add(tokens, out), (h, w, d))


def gct_flops(cfg: GctConfig, n_tokens: int) -> int:
    """Matrix-multiply FLOPs of one block (2 per multiply-accumulate).

    Cross-attention and read-out scale with the token count; latent
    self-attention does not, which is what makes the whole block linear
    in input size.
    """
    n, k, c, d = n_tokens, cfg.latent_count, cfg.latent_dim, cfg.input_dim
    cross = 2 * n * d * c + k * c * c + 2 * k * n * c + k * c * c
    self_layers = cfg.self_attn_layers * (4 * k * c * c + 2 * k * k * c
                                          + 4 * k * c * c)
    dec = n * d * c + 2 * n * k * c + n * c * d
    return 2 * (cross + self_layers + dec)


# ---------------------------------------------------------------------------
# dense residual blocks (shared by the ISP net and the color-predictor head)


def init_rrdb_params(rng: SplitMix64, params: ParamSet, prefix: str,
                     channels: int, growth: int) -> None:
    for d in range(3):
        for i in range(5):
            cin = channels + i * growth
            cout = growth if i < 4 else channels
            params.add(f"{prefix}db{d}.conv{i}.w",
                       kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9))
            params.add(f"{prefix}db{d}.conv{i}.b", np.zeros(cout, dtype=np.float32))


def _dense_block(x, params: ParamSet, prefix: str):
    feats = [x]
    for i in range(4):
        inp = feats[0] if i == 0 else ops.concat(feats, axis=0)
        c = ops.conv2d(inp, params[f"{prefix}conv{i}.w"], params[f"{prefix}conv{i}.b"])
        feats.append(ops.leaky_relu(c, LEAKY_SLOPE))
    last = ops.conv2d(ops.concat(feats, axis=0), params[f"{prefix}conv4.w"],
                      params[f"{prefix}conv4.b"])
    return ops.add(x, ops.scalar_mul(last, RESIDUAL_SCALE))


def rrdb_forward(x, params: ParamSet, prefix: str):
    out = x
    for d in range(3):
        out = _dense_block(out, params, f"{prefix}db{d}.")
    return ops.add(x, ops.scalar_mul(out, RESIDUAL_SCALE))


# ---------------------------------------------------------------------------
# color predictor


def init_color_predictor_params(seed: int, cfg: UNetConfig,
                                params: ParamSet | None = None,
                                prefix: str = "g.") -> ParamSet:
    ps = params if params is not None else ParamSet()
    rng = SplitMix64(seed)

    def conv(name, cout, cin, ksize=3):
        ps.add(f"{prefix}{name}.w",
               kaiming_uniform(rng, (cout, cin, ksize, ksize), cin * ksize * ksize))
        ps.add(f"{prefix}{name}.b", np.zeros(cout, dtype=np.float32))

    for l in range(cfg.levels):
        cin = 6 if l == 0 else cfg.channels[l - 1]
        ch = cfg.channels[l]
        conv(f"enc{l}.conv0", ch, cin)
        conv(f"enc{l}.conv1", ch, ch)
        init_gct_params(rng, cfg.gct[l], ps, f"{prefix}enc{l}.gct.")

    for head in ("dslr", "phone"):
        for l in reversed(range(cfg.levels)):
            cin = cfg.channels[l + 1] if l + 1 < cfg.levels else cfg.channels[-1]
            ch = cfg.channels[l]
            ps.add(f"{prefix}{head}.up{l}.w",
                   kaiming_uniform(rng, (cin, ch, 2, 2), cin * 4))
            ps.add(f"{prefix}{head}.up{l}.b", np.zeros(ch, dtype=np.float32))
            conv(f"{head}.conv{l}a", ch, 2 * ch)
            conv(f"{head}.conv{l}b", ch, ch)
    init_rrdb_params(rng, ps, f"{prefix}dslr.rrdb.", cfg.channels[0],
                     cfg.head_growth)
    conv("dslr.out", 3, cfg.channels[0])
    conv("phone.out", 4, cfg.channels[0])
    return ps


def _check_divisible(h: int, w: int, levels: int) -> None:
    for l in range(levels):
        if (h >> l) & 1 or (w >> l) & 1:
            raise ShapeError(
                f"input {h}x{w} not divisible by 2 at pyramid level {l}")


def color_predictor_forward(x, coords, params: ParamSet, cfg: UNetConfig,
                            prefix: str = "g."):
    """RAW + coordinate planes -> (color estimate (3,H,W), RAW recon (4,H,W))."""
    xv = x.data if isinstance(x, RawImage) else x
    cv = coords.data if isinstance(coords, CoordMap) else coords
    h, w = value_of(xv).shape[1:]
    if value_of(cv).shape[1:] != (h, w):
        raise ShapeError(
            f"coordinate map {value_of(cv).shape} does not match RAW {(4, h, w)}")
    _check_divisible(h, w, cfg.levels)

    feat = ops.concat([xv, np.asarray(value_of(cv), dtype=value_of(xv).dtype)],
                      axis=0)
    skips = []
    for l in range(cfg.levels):
        p = f"{prefix}enc{l}."
        feat = ops.leaky_relu(ops.conv2d(feat, params[p + "conv0.w"],
                                         params[p + "conv0.b"]), LEAKY_SLOPE)
        feat = ops.leaky_relu(ops.conv2d(feat, params[p + "conv1.w"],
                                         params[p + "conv1.b"]), LEAKY_SLOPE)
        tok = ops.permute(feat, (1, 2, 0))
        tok = gct_forward(tok, params, cfg.gct[l], prefix=p + "gct.")
        feat = ops.permute(tok, (2, 0, 1))
        skips.append(feat)
        feat = ops.avg_pool_2x2(feat)

    def decode(head: str):
        hf = feat
        for l in reversed(range(cfg.levels)):
            p = f"{prefix}{head}."
            hf = ops.transposed_conv2d(hf, params[f"{p}up{l}.w"],
                                       params[f"{p}up{l}.b"])
            hf = ops.concat([hf, skips[l]], axis=0)
            hf = ops.leaky_relu(ops.conv2d(hf, params[f"{p}conv{l}a.w"],
                                           params[f"{p}conv{l}a.b"]), LEAKY_SLOPE)
            hf = ops.leaky_relu(ops.conv2d(hf, params[f"{p}conv{l}b.w"],
                                           params[f"{p}conv{l}b.b"]), LEAKY_SLOPE)
        return hf

    dslr = rrdb_forward(decode("dslr"), params, f"{prefix}dslr.rrdb.")
    c = ops.conv2d(dslr, params[f"{prefix}dslr.out.w"], params[f"{prefix}dslr.out.b"])
    phone = decode("phone")
    xhat = ops.conv2d(phone, params[f"{prefix}phone.out.w"],
                      params[f"{prefix}phone.out.b"])
    return c, xhat


# ---------------------------------------------------------------------------
# ISP network


def init_ispnet_params(seed: int, cfg: IspNetConfig,
                       params: ParamSet | None = None,
                       prefix: str = "f.") -> ParamSet:
    ps = params if params is not None else ParamSet()
    rng = SplitMix64(seed)
    ch = cfg.channels
    ps.add(f"{prefix}head.w",
           kaiming_uniform(rng, (ch, cfg.in_channels, 3, 3), cfg.in_channels * 9))
    ps.add(f"{prefix}head.b", np.zeros(ch, dtype=np.float32))
    for j in range(cfg.rrdb_blocks):
        init_rrdb_params(rng, ps, f"{prefix}rrdb{j}.", ch, cfg.growth)
    ps.add(f"{prefix}up.w", kaiming_uniform(rng, (ch, ch, 3, 3), ch * 9))
    ps.add(f"{prefix}up.b", np.zeros(ch, dtype=np.float32))
    ps.add(f"{prefix}out.w", kaiming_uniform(rng, (3, ch, 3, 3), ch * 9))
    ps.add(f"{prefix}out.b", np.zeros(3, dtype=np.float32))
    return ps


def ispnet_forward(x, c_hat, params: ParamSet, cfg: IspNetConfig,
                   prefix: str = "f."):
    """RAW (4,H,W) + color (3,H,W) -> sRGB estimate (3,2H,2W)."""
    xv = x.data if isinstance(x, RawImage) else x
    cv = c_hat.data if isinstance(c_hat, RgbImage) else c_hat
    xs, cs = value_of(xv).shape, value_of(cv).shape
    if xs[0] != 4 or cs[0] != 3 or xs[1:] != cs[1:]:
        raise ShapeError(
            f"need RAW (4,H,W) and color (3,H,W) on the same grid, "
            f"got {xs} and {cs}")
    feat = ops.conv2d(ops.concat([xv, cv], axis=0), params[f"{prefix}head.w"],
                      params[f"{prefix}head.b"])
    for j in range(cfg.rrdb_blocks):
        feat = rrdb_forward(feat, params, f"{prefix}rrdb{j}.")
    feat = ops.nearest_upsample_2x(feat)
    feat = ops.leaky_relu(ops.conv2d(feat, params[f"{prefix}up.w"],
                                     params[f"{prefix}up.b"]), LEAKY_SLOPE)
    return ops.conv2d(feat, params[f"{prefix}out.w"], params[f"{prefix}out.b"])
