"""Command-line interface: ``ttdsr <command> [options]``.

Every command writes ``run_record.json`` (resolved settings, seed, package
and library versions) into its output directory. Settings may also come from
a flat ``key = value`` file given with ``--config``; flags override it.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 training
diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, data, metrics, network, tcheb, training
from .autodiff import checkpoint

log = logging.getLogger("ttdsr")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
OUTPUT_ENV = "TTDSR_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- parsing

def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", type=Path, help="key = value settings file; flags take precedence")
    p.add_argument("--out", type=Path, help=f"{out_help} (default: ${OUTPUT_ENV})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scale", type=int, default=3, choices=(2, 3, 4), help="upscaling factor")
    p.add_argument("--split", type=int, default=5, help="zig-zag split point T")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--lam", type=float, default=0.01, help="L2 weight penalty")
    p.add_argument("--alpha", type=float, default=0.1, help="leaky ReLU slope")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch", type=int, default=32, help="HR patch side (rounded down to a multiple of scale)")
    p.add_argument("--stride", type=int, default=16)
    p.add_argument("--limit-patches", type=int, default=0, help="use only the first N shuffled patches (0: all)")
    p.add_argument("--no-augment", action="store_true", help="skip the 12-way augmentation")
    p.add_argument("--no-local-residual", action="store_true", help="drop the high-path local residual")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--train-dir", type=Path, help="directory of PNG/BMP training images")
    src.add_argument("--manifest", type=Path,
                     help="file listing image paths; a hashed 20%% split becomes the validation set")
    p.add_argument("--val-dir", type=Path, help="held-out HR images scored after training")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttdsr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-basis", help="dump the polynomial matrix and the kernel tile grid")
    _common(p, "output directory")
    p.add_argument("--n", type=int, default=8, help="number of polynomial sample points")
    p.add_argument("--tile-scale", type=int, default=8, help="pixels per kernel tap in the tile grid")

    p = sub.add_parser("analyze-freq", help="per-channel HR/LR coefficient loss of one image")
    _common(p, "output directory")
    p.add_argument("image", type=Path)
    p.add_argument("--scale", type=int, default=3, help="degradation factor (1: none)")

    p = sub.add_parser("train", help="train a model on image patches")
    _common(p, "output directory")
    _model_flags(p)

    p = sub.add_parser("sr", help="super-resolve one image")
    _common(p, "directory for the run record (default: next to --output)")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="low-resolution PNG/BMP")
    p.add_argument("--output", type=Path, required=True, help="PNG to write")
    p.add_argument("--scale", type=int, default=3, choices=(2, 3, 4))

    p = sub.add_parser("eval", help="PSNR/SSIM of a model and of bicubic on an HR directory")
    _common(p, "output directory")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--hr-dir", type=Path, required=True)
    p.add_argument("--scale", type=int, default=3, choices=(2, 3, 4))
    p.add_argument("--border", type=int, help="pixels cropped before scoring (default: scale)")

    p = sub.add_parser("sweep-t", help="train one model per split point and score each")
    _common(p, "output directory")
    _model_flags(p)
    p.add_argument("--t-list", default="3,5,8", help="comma-separated split points")
    return parser


def _coerce(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ConfigError(f"{action.dest}: expected a boolean, got {raw!r}")
        value = low in ("1", "true", "yes", "on")
        return value if isinstance(action, argparse._StoreTrueAction) else not value
    value = action.type(raw) if action.type else raw
    if action.choices is not None and value not in action.choices:
        raise ConfigError(f"{action.dest}: {value!r} not in {list(action.choices)}")
    return value


def read_config_file(path: Path, sub: argparse.ArgumentParser) -> dict:
    """Parse ``key = value`` lines; keys are flag names with or without dashes."""
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        if dest not in actions or dest in ("config", "help", "version"):
            raise ConfigError(f"{path}:{lineno}: unknown setting {key!r}")
        try:
            values[dest] = _coerce(actions[dest], raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return values


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**read_config_file(args.config, sub))
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------- helpers

def _out_dir(args) -> Path:
    out = args.out or (Path(os.environ[OUTPUT_ENV]) if os.environ.get(OUTPUT_ENV) else None)
    if out is None:
        raise ConfigError(f"no output directory: pass --out or set {OUTPUT_ENV}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_record(out: Path, args, extra: dict | None = None) -> None:
    settings = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    record = {
        "command": args.command,
        "settings": settings,
        "seed": settings.get("seed"),
        "versions": {"ttdsr": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    if extra:
        record["results"] = extra
    (out / "run_record.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _training_paths(args) -> tuple[list[Path], list[Path]]:
    """(train, validation) image lists from --train-dir/--val-dir or --manifest."""
    if args.manifest is not None:
        train, val = data.split_manifest(data.read_manifest(args.manifest))
        if args.val_dir is not None:
            val = data.list_images(args.val_dir)
    elif args.train_dir is not None:
        train = data.list_images(args.train_dir)
        val = data.list_images(args.val_dir) if args.val_dir is not None else []
    else:
        raise ConfigError("training needs --train-dir or --manifest")
    if not train:
        raise ConfigError("no training images found")
    return train, val


def _training_arrays(args, paths) -> tuple[np.ndarray, np.ndarray]:
    planes = data.load_training_planes(paths, augmentation=not args.no_augment)
    pairs = data.extract_patches(planes, args.patch, args.stride, args.scale, args.seed)
    if args.limit_patches:
        pairs = pairs[:args.limit_patches]
    if not pairs:
        raise ConfigError("no training patches: images are smaller than the patch size")
    log.info("%d training patches from %d images", len(pairs), len(paths))
    return data.stack_pairs(pairs)


def _net_config(args, split: int | None = None) -> network.NetConfig:
    return network.NetConfig(split_point=args.split if split is None else split,
                             leaky_alpha=args.alpha, local_residual=not args.no_local_residual,
                             seed=args.seed)


def _check_hyper(args) -> None:
    if args.epochs < 1 or args.batch_size < 1:
        raise ConfigError("epochs and batch size must be positive")
    if args.lr <= 0 or args.lam < 0:
        raise ConfigError("learning rate must be positive and lambda non-negative")
    if args.limit_patches < 0:
        raise ConfigError("--limit-patches must be >= 0")


def _train_one(args, config, lr, hr, loss_log: Path | None):
    params = network.build_model(config)
    fh = open(loss_log, "w") if loss_log else None
    try:
        if fh:
            fh.write("epoch\tloss\n")

        def on_epoch(epoch, loss):
            if fh:
                fh.write(f"{epoch}\t{loss:.17g}\n")
                fh.flush()

        result = training.fit(params, lr, hr, args.epochs, args.batch_size, args.lr, args.lam,
                              args.seed, on_epoch)
    finally:
        if fh:
            fh.close()
    return params, result


def _model_upscaler(params):
    return lambda small, scale: network.super_resolve(params, small, scale)


# ---------------------------------------------------------------- commands

def cmd_gen_basis(args) -> dict:
    out = _out_dir(args)
    basis = tcheb.make_basis(args.n)
    basis.save_text(out / "basis.txt")
    result = {"n_points": args.n}
    if basis.kernels is not None:
        grid = tcheb.kernel_tile_grid(basis.kernels, cols=8, tile_scale=args.tile_scale)
        data.write_image(out / "kernels.png", grid)
        result["tiles"] = len(basis.kernels)
    print(f"wrote {out / 'basis.txt'}" + (f" and {out / 'kernels.png'}" if "tiles" in result else ""))
    return result


def cmd_analyze_freq(args) -> dict:
    if args.scale < 1:
        raise ConfigError("--scale must be >= 1")
    out = _out_dir(args)
    hr = data.crop_to_multiple(data.luminance(data.read_image(args.image)), args.scale)
    lr = data.degrade(hr, args.scale).lr
    basis = tcheb.make_basis(tcheb.KERNEL_SIZE)
    profile = tcheb.coefficient_loss_profile(hr, lr, basis)
    with open(out / "coefficient_loss.tsv", "w") as fh:
        fh.write("channel\tp\tq\tloss\tabs_loss\n")
        for i, ((p, q), v) in enumerate(zip(basis.order, profile)):
            fh.write(f"{i}\t{p}\t{q}\t{v:.10g}\t{abs(v):.10g}\n")
    low = float(np.mean(np.abs(profile[:6])))
    high = float(np.mean(np.abs(profile[6:])))
    print(f"mean |loss| channels 0-5: {low:.6g}\nmean |loss| channels 6-63: {high:.6g}")
    return {"mean_abs_low": low, "mean_abs_high": high}


def cmd_train(args) -> dict:
    _check_hyper(args)
    out = _out_dir(args)
    train_paths, val_paths = _training_paths(args)
    lr, hr = _training_arrays(args, train_paths)
    params, result = _train_one(args, _net_config(args), lr, hr, out / "loss_log.tsv")
    params.save(out / "checkpoint.ttdsr")
    data.write_image(out / "itcl_kernels.png", network.itcl_kernel_strip(params))
    summary = {"patches": int(lr.shape[0]), "epochs": args.epochs,
               "first_epoch_loss": result.epoch_losses[0], "final_loss": result.epoch_losses[-1]}
    print(f"trained {args.epochs} epochs on {lr.shape[0]} patches: "
          f"loss {summary['first_epoch_loss']:.6g} -> {summary['final_loss']:.6g}")
    if val_paths:
        model = metrics.evaluate_paths(_model_upscaler(params), val_paths, args.scale)
        base = metrics.evaluate_paths(metrics.bicubic_upscaler, val_paths, args.scale)
        summary.update(val_psnr=model.mean_psnr, val_ssim=model.mean_ssim,
                       bicubic_psnr=base.mean_psnr, bicubic_ssim=base.mean_ssim)
        print(f"validation x{args.scale}: PSNR {model.mean_psnr:.4f} dB (bicubic {base.mean_psnr:.4f}), "
              f"SSIM {model.mean_ssim:.4f} (bicubic {base.mean_ssim:.4f})")
    return summary


def cmd_sr(args) -> dict:
    params = network.ModelParams.load(args.checkpoint)
    img = data.read_image(args.input)
    if img.ndim == 2:
        y = network.super_resolve(params, img / 255.0, args.scale)
        result = y * 255.0
    else:
        y, cb, cr = data.rgb_to_ycbcr(img)
        h, w = y.shape
        th, tw = h * args.scale, w * args.scale
        y_sr = network.super_resolve(params, y / 255.0, args.scale) * 255.0
        result = data.ycbcr_to_rgb(y_sr, data.bicubic_resize(cb, th, tw), data.bicubic_resize(cr, th, tw))
    args.output.parent.mkdir(parents=True, exist_ok=True)
    data.write_image(args.output, result)
    print(f"wrote {args.output} ({result.shape[1]}x{result.shape[0]})")
    if args.out is None and not os.environ.get(OUTPUT_ENV):
        args.out = args.output.parent
    return {"output_shape": list(result.shape)}


def cmd_eval(args) -> dict:
    params = network.ModelParams.load(args.checkpoint)
    out = _out_dir(args)
    model = metrics.evaluate_dir(_model_upscaler(params), args.hr_dir, args.scale, args.border)
    base = metrics.evaluate_dir(metrics.bicubic_upscaler, args.hr_dir, args.scale, args.border)
    model.write_table(out / "scores.tsv")
    base.write_table(out / "scores_bicubic.tsv")
    sys.stdout.write(model.to_text())
    print(f"bicubic baseline\tPSNR {base.mean_psnr:.4f} dB\tSSIM {base.mean_ssim:.4f}")
    return {"psnr": model.mean_psnr, "ssim": model.mean_ssim,
            "bicubic_psnr": base.mean_psnr, "bicubic_ssim": base.mean_ssim}


def cmd_sweep_t(args) -> dict:
    _check_hyper(args)
    try:
        t_list = [int(t) for t in str(args.t_list).split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--t-list must be comma-separated integers, got {args.t_list!r}") from None
    if not t_list:
        raise ConfigError("--t-list is empty")
    out = _out_dir(args)
    train_paths, val_paths = _training_paths(args)
    if not val_paths:
        raise ConfigError("sweep-t needs validation images (--val-dir or a manifest)")
    lr, hr = _training_arrays(args, train_paths)
    base = metrics.evaluate_paths(metrics.bicubic_upscaler, val_paths, args.scale)
    rows = []
    for t in t_list:
        log.info("split point T=%d", t)
        params, result = _train_one(args, _net_config(args, split=t), lr, hr, None)
        rep = metrics.evaluate_paths(_model_upscaler(params), val_paths, args.scale)
        rows.append((t, rep.mean_psnr, rep.mean_ssim, result.epoch_losses[-1]))
        print(f"T={t}\tPSNR {rep.mean_psnr:.4f} dB\tSSIM {rep.mean_ssim:.4f}")
    with open(out / "sweep_t.tsv", "w") as fh:
        fh.write("T\tpsnr\tssim\tfinal_loss\tbicubic_psnr\n")
        for t, p, s, loss in rows:
            fh.write(f"{t}\t{p:.6f}\t{s:.6f}\t{loss:.10g}\t{base.mean_psnr:.6f}\n")
    return {"rows": [{"T": t, "psnr": p, "ssim": s} for t, p, s, _ in rows],
            "bicubic_psnr": base.mean_psnr}


COMMANDS = {"gen-basis": cmd_gen_basis, "analyze-freq": cmd_analyze_freq, "train": cmd_train,
            "sr": cmd_sr, "eval": cmd_eval, "sweep-t": cmd_sweep_t}


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    return obj


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"ttdsr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        extra = COMMANDS[args.command](args)
        write_run_record(_out_dir(args), args, _jsonable(extra))
    except network.TrainingDiverged as exc:
        print(f"ttdsr: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, network.ModelStateError) as exc:
        print(f"ttdsr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, checkpoint.CheckpointError) as exc:
        print(f"ttdsr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"ttdsr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
