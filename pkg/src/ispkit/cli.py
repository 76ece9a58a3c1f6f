"""Command-line interface exposing every pipeline stage.

One subcommand per stage; artifacts are written under an output directory
with fixed names (xprime.ppm, xtilde.ppm, c.ppm, chat.ppm, yhat.ppm,
mask.pgm). Progress is reported as line-delimited JSON on stdout. Exit
codes: 0 success, 1 validation error, 2 runtime error, each failure
printing a single JSON line on stderr.

Training writes a JSON sidecar next to the weights file recording the
model configuration, which `infer` and `eval` read back so checkpoints
are self-describing.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path


class UsageError(Exception):
    """Raised for bad flags or malformed inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(payload: dict) -> None:
    print(json.dumps(payload), flush=True)


def _fail(code: int, reason: str) -> int:
    print(json.dumps({"error": reason.replace("\n", " "), "code": code}),
          file=sys.stderr, flush=True)
    return code


def _apply_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(args, allowed: set) -> dict:
    if not getattr(args, "config", None):
        return {}
    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return data


def _value(args, config: dict, name: str, default):
    """Explicit flag beats config file beats built-in default."""
    explicit = getattr(args, name, None)
    if explicit is not None:
        return explicit
    if name in config:
        return config[name]
    return default


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# model config sidecar


def _sidecar_path(weights_path) -> Path:
    return Path(str(weights_path) + ".json")


def _write_sidecar(weights_path, cfg) -> None:
    doc = {
        "isp": asdict(cfg.isp),
        "unet": asdict(cfg.unet),
        "eta_hidden": cfg.eta_hidden,
        "colormap_variant": cfg.colormap_variant,
        "bins": cfg.bins,
        "no_color_pred": cfg.no_color_pred,
    }
    _sidecar_path(weights_path).write_text(json.dumps(doc, indent=1))


def _config_from_sidecar(weights_path):
    from .models import GctConfig, IspNetConfig, UNetConfig
    from .train import TrainConfig

    side = _sidecar_path(weights_path)
    if not side.exists():
        raise UsageError(f"missing model sidecar: {side}")
    doc = json.loads(side.read_text())
    unet_doc = dict(doc["unet"])
    unet_doc["channels"] = tuple(unet_doc["channels"])
    unet_doc["gct"] = [GctConfig(**g) for g in unet_doc["gct"]]
    return TrainConfig(
        isp=IspNetConfig(**doc["isp"]),
        unet=UNetConfig(**unet_doc),
        eta_hidden=doc["eta_hidden"],
        colormap_variant=doc["colormap_variant"],
        bins=doc["bins"],
        no_color_pred=doc["no_color_pred"],
    )


def _load_params(weights_path):
    from .grad import ParamSet, load_checkpoint

    entries = load_checkpoint(_require_file(weights_path, "weights file"))
    params = ParamSet()
    for name, arr in entries.items():
        if not name.startswith("opt."):
            params.add(name, arr)
    return params


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_preprocess(args):
    from .images import read_raw4, write_ppm
    from .rawproc import gamma_process

    raw = read_raw4(_require_file(args.raw, "raw file"))
    out = _out_dir(args.out_dir)
    xprime = gamma_process(raw)
    write_ppm(out / "xprime.ppm", xprime)
    artifacts = {"xprime": str(out / "xprime.ppm")}
    if args.weights:
        from .images import make_coord_map
        from .rawproc import preprocess_image

        params = _load_params(args.weights)
        coords = make_coord_map(*xprime.data.shape[1:])
        xtilde = preprocess_image(xprime, coords, params)
        write_ppm(out / "xtilde.ppm", xtilde)
        artifacts["xtilde"] = str(out / "xtilde.ppm")
    _emit({"event": "done", "command": "preprocess", "artifacts": artifacts})


def cmd_colormap_fit(args):
    from . import colormap
    from .images import downsample_bilinear_2x, read_ppm

    source = read_ppm(_require_file(args.source, "source image"))
    target = read_ppm(_require_file(args.target, "target image"))
    halved = False
    if target.data.shape[1:] == tuple(2 * d for d in source.data.shape[1:]):
        # the usual pairing: fit at the source's (RAW) resolution against
        # the double-size target, as the training loop does
        target = downsample_bilinear_2x(target)
        halved = True
    model = colormap.fit(source, target, variant=args.variant, bins=args.bins)
    colormap.save_model(args.out, model)
    _emit({"event": "done", "command": "colormap fit", "model": str(args.out),
           "variant": args.variant, "bins": args.bins,
           "target_downsampled": halved})


def cmd_colormap_apply(args):
    import numpy as np

    from . import colormap
    from .images import RgbImage, read_ppm, write_ppm

    source = read_ppm(_require_file(args.source, "source image"))
    model = colormap.load_model(_require_file(args.model, "model file"))
    target = None
    if model.variant == "color_blur":
        if not args.target:
            raise UsageError("color_blur apply needs --target")
        target = read_ppm(_require_file(args.target, "target image")).data
    mapped = colormap.apply_model(source, model, target=target)
    out = RgbImage(np.clip(mapped, 0.0, 1.0).astype(np.float32))
    write_ppm(args.out, out)
    _emit({"event": "done", "command": "colormap apply", "out": str(args.out)})


def cmd_colormap_bench(args):
    import time

    import numpy as np

    from . import colormap

    rng = np.random.default_rng(args.seed or 0)
    size = args.size
    fit_s, apply_s = 0.0, 0.0
    for _ in range(args.pairs):
        x = rng.uniform(0, 1, (3, size, size))
        c = rng.uniform(0, 1, (3, size, size))
        t0 = time.perf_counter()
        model = colormap.fit(x, c, variant=args.variant, bins=args.bins)
        t1 = time.perf_counter()
        colormap.apply_model(x, model)
        t2 = time.perf_counter()
        fit_s += t1 - t0
        apply_s += t2 - t1
    _emit({"event": "bench", "command": "colormap bench",
           "variant": args.variant, "bins": args.bins, "size": size,
           "pairs": args.pairs, "fit_seconds_per_pair": fit_s / args.pairs,
           "apply_seconds_per_pair": apply_s / args.pairs})


def cmd_flowmask(args):
    from .flowwarp import fb_mask, read_flo
    from .images import write_pgm

    fwd = read_flo(_require_file(args.fwd, "forward flow"))
    bwd = read_flo(_require_file(args.bwd, "backward flow"))
    mask = fb_mask(fwd, bwd, alpha1=args.alpha1, alpha2=args.alpha2)
    write_pgm(args.out, mask)
    _emit({"event": "done", "command": "flowmask", "out": str(args.out),
           "kept_fraction": float(mask.data.mean())})


def cmd_warp(args):
    from .flowwarp import read_flo, warp
    from .images import read_ppm, write_ppm

    img = read_ppm(_require_file(args.image, "image"))
    flow = read_flo(_require_file(args.flow, "flow"))
    write_ppm(args.out, warp(img, flow))
    _emit({"event": "done", "command": "warp", "out": str(args.out)})


def cmd_synth(args):
    from . import datapipe as dp

    config = _load_config(args, {"raw_size", "misalign", "distractors",
                                 "samples_per_capture", "n", "seed"})
    if args.preset == "identity":
        cfg = dp.SynthConfig.identity_oracle()
    else:
        cfg = dp.SynthConfig()
    overrides = {}
    for key in ("raw_size", "misalign", "distractors", "samples_per_capture"):
        val = _value(args, config, key, None)
        if val is not None:
            overrides[key] = val
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    n = _value(args, config, "n", 8)
    seed = _value(args, config, "seed", 0)
    manifest = dp.synth_dataset(n, seed, _out_dir(args.out), cfg)
    _emit({"event": "done", "command": "synth", "out": str(args.out),
           "samples": len(manifest.samples), "seed": seed})


def cmd_crops(args):
    from .datapipe import sliding_crops

    origins = sliding_crops((args.height, args.width), args.crop, args.stride)
    _emit({"event": "done", "command": "crops", "count": len(origins),
           "origins": [list(o) for o in origins]})


def _train_config(args, kind: str):
    from .models import IspNetConfig, UNetConfig
    from .train import LossWeights, TrainConfig

    allowed = {"steps", "batch_size", "seed", "lr", "align_mode",
               "colormap_variant", "bins", "rrdb_blocks", "channels",
               "growth", "eta_hidden", "unet", "checkpoint_interval",
               "no_color_pred", "augment", "jitter",
               "w_pred", "w_map", "w_constraint", "w_clr_pred",
               "w_reconstruct"}
    config = _load_config(args, allowed)

    def val(name, default):
        return _value(args, config, name, default)

    unet_name = val("unet", "toy")
    if unet_name not in ("toy", "full"):
        raise UsageError(f"--unet must be toy or full, got {unet_name!r}")
    unet = UNetConfig.toy() if unet_name == "toy" else UNetConfig.full_scale()
    isp = IspNetConfig(rrdb_blocks=val("rrdb_blocks", 2),
                       channels=val("channels", 16),
                       growth=val("growth", 8))
    weights = LossWeights(pred=val("w_pred", 1.0), map=val("w_map", 1.0),
                          constraint=val("w_constraint", 1.0),
                          clr_pred=val("w_clr_pred", 1.0),
                          reconstruct=val("w_reconstruct", 1.0))
    return TrainConfig(
        seed=val("seed", 0),
        steps=val("steps", 200),
        batch_size=val("batch_size", 16),
        lr=val("lr", 2e-4),
        align_mode=val("align_mode", "mask"),
        colormap_variant=val("colormap_variant", "affine_dep"),
        bins=val("bins", 15),
        no_color_pred=bool(val("no_color_pred", False)),
        weights=weights,
        augment=not args.no_augment if args.no_augment is not None
        else bool(val("augment", True)),
        jitter=not args.no_jitter if args.no_jitter is not None
        else bool(val("jitter", True)),
        checkpoint_interval=val("checkpoint_interval", 0),
        checkpoint_dir=args.checkpoint_dir,
        isp=isp,
        unet=unet,
        eta_hidden=val("eta_hidden", 16),
    )


def _load_manifest(data_path):
    from .datapipe import Manifest

    p = Path(data_path)
    if p.is_dir():
        p = p / "manifest.json"
    return Manifest.load(_require_file(p, "manifest"))


def cmd_train(args):
    from .grad import save_checkpoint
    from .train import train_color_predictor, train_isp, train_joint

    cfg = _train_config(args, args.net)
    manifest = _load_manifest(args.data)
    if args.net == "isp":
        result = train_isp(manifest, cfg, log_fn=_emit,
                           resume_from=args.resume)
    elif args.net == "color":
        result = train_color_predictor(manifest, cfg, log_fn=_emit,
                                       resume_from=args.resume)
    else:
        if not (args.isp_checkpoint and args.color_checkpoint):
            raise UsageError(
                "train joint needs --isp-checkpoint and --color-checkpoint")
        result = train_joint(manifest, cfg,
                             _require_file(args.isp_checkpoint,
                                           "isp checkpoint"),
                             _require_file(args.color_checkpoint,
                                           "color checkpoint"),
                             log_fn=_emit)
    entries = {name: t.data for name, t in result.params.items()}
    entries.update(result.state.state_entries())
    save_checkpoint(args.out, entries)
    _write_sidecar(args.out, cfg)
    _emit({"event": "done", "command": f"train {args.net}",
           "out": str(args.out), "steps": len(result.losses),
           "final_loss": result.losses[-1] if result.losses else None})


def cmd_infer(args):
    import numpy as np

    from .flowwarp import read_flo, warp
    from .images import (downsample_bilinear_2x, make_coord_map, read_ppm,
                         read_raw4, write_ppm)
    from .rawproc import gamma_process, preprocess_image
    from .train import infer_pipeline, infer_with_reference

    raw = read_raw4(_require_file(args.raw, "raw file"))
    params = _load_params(args.weights)
    cfg = _config_from_sidecar(args.weights)
    out = _out_dir(args.out_dir)
    artifacts = {}

    xprime = gamma_process(raw)
    write_ppm(out / "xprime.ppm", xprime)
    artifacts["xprime"] = str(out / "xprime.ppm")
    if "eta.conv0.w" in params:
        coords = make_coord_map(*xprime.data.shape[1:])
        xtilde = preprocess_image(xprime, coords, params)
        write_ppm(out / "xtilde.ppm", xtilde)
        artifacts["xtilde"] = str(out / "xtilde.ppm")

    if args.reference:
        reference = read_ppm(_require_file(args.reference, "reference image"))
        flow = None
        if args.flow_bwd:
            flow = read_flo(_require_file(args.flow_bwd, "backward flow"))
        aligned = warp(reference, flow) if flow is not None else reference
        c = downsample_bilinear_2x(aligned)
        write_ppm(out / "c.ppm", c)
        artifacts["c"] = str(out / "c.ppm")
        y_hat = infer_with_reference(raw, reference, flow, params, cfg)
    else:
        has_g = any(name.startswith("g.") for name in params.names())
        use_net = not args.no_color_net and has_g
        y_hat = infer_pipeline(raw, params, cfg, use_color_net=use_net)
        if use_net:
            from .grad.engine import value_of
            from .images import RgbImage
            from .models import color_predictor_forward

            h, w = raw.data.shape[1:]
            c_pred, _ = color_predictor_forward(
                raw.data, make_coord_map(h, w).data, params, cfg.unet, "g.")
            chat = RgbImage(np.clip(value_of(c_pred), 0.0, 1.0)
                            .astype(np.float32))
            write_ppm(out / "chat.ppm", chat)
            artifacts["chat"] = str(out / "chat.ppm")
    write_ppm(out / "yhat.ppm", y_hat)
    artifacts["yhat"] = str(out / "yhat.ppm")
    _emit({"event": "done", "command": "infer", "artifacts": artifacts,
           "output_shape": list(y_hat.data.shape)})


def cmd_eval(args):
    from .experiments import (evaluate_net_conditioned,
                              evaluate_reference_conditioned,
                              evaluate_unconditioned)

    manifest = _load_manifest(args.data)
    params = _load_params(args.weights)
    cfg = _config_from_sidecar(args.weights)
    runners = {"zeros": evaluate_unconditioned,
               "net": evaluate_net_conditioned,
               "reference": evaluate_reference_conditioned}
    report = runners[args.conditioning](manifest, params, cfg,
                                        split=args.split)
    if report.count == 0:
        raise UsageError(f"no samples in split {args.split!r}")
    _emit({"event": "done", "command": "eval", "split": args.split,
           "conditioning": args.conditioning, **report.to_dict()})


def cmd_ablate(args):
    from .experiments import (alignment_mode_grid, colormap_variant_grid,
                              rows_to_json, rows_to_markdown)

    seeds = tuple(int(s) for s in args.seeds.split(","))
    out = _out_dir(args.out_dir)
    kwargs = {"seeds": seeds, "log_fn": _emit}
    if args.steps is not None:
        kwargs["steps"] = args.steps
    if args.train_n is not None:
        kwargs["train_n"] = args.train_n
    if args.test_n is not None:
        kwargs["test_n"] = args.test_n
    if args.grid == "colormap":
        rows = colormap_variant_grid(out / "data", **kwargs)
    else:
        rows = alignment_mode_grid(out / "data", **kwargs)
    (out / "ablate.json").write_text(rows_to_json(rows))
    (out / "ablate.md").write_text(rows_to_markdown(rows) + "\n")
    _emit({"event": "done", "command": "ablate", "grid": args.grid,
           "rows": [r.to_dict() for r in rows],
           "json": str(out / "ablate.json"), "md": str(out / "ablate.md")})


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--config", help="JSON config merged under explicit flags")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> _Parser:
    parser = _Parser(prog="ispkit",
                     description="RAW-to-sRGB pipeline tools")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("preprocess", help="write the gamma visualization of a RAW frame")
    p.add_argument("--raw", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--weights", help="optional weights for x-tilde")
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    cm = sub.add_parser("colormap", help="color map fitting and application")
    cmsub = cm.add_subparsers(dest="subcommand")
    p = cmsub.add_parser("fit")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--variant", default="affine_dep")
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_colormap_fit)
    p = cmsub.add_parser("apply")
    p.add_argument("--source", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--target", help="needed by the color_blur variant")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_colormap_apply)
    p = cmsub.add_parser("bench")
    p.add_argument("--variant", default="affine_dep")
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--pairs", type=int, default=10)
    _add_common(p)
    p.set_defaults(func=cmd_colormap_bench)

    p = sub.add_parser("flowmask", help="forward-backward consistency mask")
    p.add_argument("--fwd", required=True)
    p.add_argument("--bwd", required=True)
    p.add_argument("--alpha1", type=float, default=0.01)
    p.add_argument("--alpha2", type=float, default=0.5)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_flowmask)

    p = sub.add_parser("warp", help="pull-warp an image by a flow field")
    p.add_argument("--image", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("default", "identity"),
                   default="default")
    p.add_argument("--raw-size", dest="raw_size", type=int, default=None)
    p.add_argument("--misalign",
                   choices=("none", "translation", "homography"),
                   default=None)
    p.add_argument("--distractors", type=int, default=None)
    p.add_argument("--samples-per-capture", dest="samples_per_capture",
                   type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("crops", help="sliding-window crop origins")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--crop", type=int, required=True)
    p.add_argument("--stride", type=int, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_crops)

    tr_p = sub.add_parser("train", help="train the networks")
    trsub = tr_p.add_subparsers(dest="net")
    for net in ("isp", "color", "joint"):
        p = trsub.add_parser(net)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int,
                       default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--align-mode", dest="align_mode",
                       choices=("mask", "aligned", "noalign"), default=None)
        p.add_argument("--variant", dest="colormap_variant", default=None)
        p.add_argument("--bins", type=int, default=None)
        p.add_argument("--no-color-pred", dest="no_color_pred",
                       action="store_const", const=True, default=None)
        p.add_argument("--no-augment", action="store_const", const=True,
                       default=None)
        p.add_argument("--no-jitter", action="store_const", const=True,
                       default=None)
        p.add_argument("--rrdb-blocks", dest="rrdb_blocks", type=int,
                       default=None)
        p.add_argument("--channels", type=int, default=None)
        p.add_argument("--growth", type=int, default=None)
        p.add_argument("--eta-hidden", dest="eta_hidden", type=int,
                       default=None)
        p.add_argument("--unet", choices=("toy", "full"), default=None)
        p.add_argument("--checkpoint-dir", dest="checkpoint_dir",
                       default=None)
        p.add_argument("--checkpoint-interval", dest="checkpoint_interval",
                       type=int, default=None)
        p.add_argument("--resume", default=None)
        if net == "joint":
            p.add_argument("--isp-checkpoint", dest="isp_checkpoint")
            p.add_argument("--color-checkpoint", dest="color_checkpoint")
        _add_common(p)
        p.set_defaults(func=cmd_train, net=net)

    p = sub.add_parser("infer", help="full pipeline on one RAW frame")
    p.add_argument("--raw", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--reference", help="condition on a reference image")
    p.add_argument("--flow-bwd", dest="flow_bwd",
                   help="flow aligning the reference to the RAW frame")
    p.add_argument("--no-color-net", dest="no_color_net",
                   action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM over a manifest split")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--conditioning", choices=("zeros", "net", "reference"),
                   default="zeros")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a variant grid and tabulate")
    p.add_argument("--grid", choices=("colormap", "alignment"),
                   required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--train-n", dest="train_n", type=int, default=None)
    p.add_argument("--test-n", dest="test_n", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(1, str(exc))
    if not hasattr(args, "func"):
        parser.print_help()
        return 1
    _apply_threads(getattr(args, "threads", 1) or 1)
    try:
        args.func(args)
    except UsageError as exc:
        return _fail(1, str(exc))
    except (OSError, ValueError, KeyError) as exc:
        return _fail(1, f"{type(exc).__name__}: {exc}")
    except (ArithmeticError, RuntimeError) as exc:
        return _fail(2, f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
