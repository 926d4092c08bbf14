"""Command-line entry point.

Subcommands: train, infer, eval, attack, visualize, gen-data.  Every run
resolves one RunConfig (defaults < config file < FORGELOC_SEED < explicit
flags), writes it next to its outputs, and exits 0 only if every declared
output landed on disk; partially written outputs are deleted on failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings

import cv2
import numpy as np

from . import dataforge as df
from . import metrics as mx
from .autograd import Tensor, conv2d, no_grad
from .checkpoint import load_checkpoint, restore_model
from .config import RunConfig
from .hpf import PAD, kernel_bank
from .network import CoarseToFineModel
from .training import Trainer, fgsm


class _Outputs:
    """Declared output files of one run: verified present on success,
    removed on failure."""

    def __init__(self):
        self.paths = []

    def register(self, *parts) -> str:
        path = os.path.join(*parts)
        self.paths.append(path)
        return path

    def verify(self):
        missing = [p for p in self.paths if not os.path.exists(p)]
        if missing:
            raise RuntimeError(f"outputs not written: {missing}")

    def cleanup(self):
        for p in self.paths:
            if os.path.isfile(p):
                os.remove(p)


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) \
        else RunConfig()
    cfg.apply_env()
    overrides = {
        "seed": "seed", "manifest": "manifest", "output_dir": "output_dir",
        "iterations": "iterations", "batch_size": "batch_size",
        "n_train": "n_train", "n_test": "n_test",
    }
    for arg_name, field in overrides.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            setattr(cfg, field, value)
    if getattr(args, "size", None) is not None:
        cfg.input_height = cfg.input_width = args.size
    if getattr(args, "no_sat", False):
        cfg.sat_enabled = False
    if getattr(args, "no_attention", False):
        cfg.attention_enabled = False
    if getattr(args, "no_cwhpf", False):
        cfg.coarse_feature_mode = "hpf"
        cfg.refined_feature_mode = "hpf"
    if getattr(args, "no_coarse_to_fine", False):
        cfg.coarse_enabled = False
    return cfg


def _require_output_dir(cfg: RunConfig) -> str:
    if not cfg.output_dir:
        raise ValueError("an output directory is required "
                         "(--output-dir or output_dir in the config)")
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


def _sync_from_model(cfg: RunConfig, model: CoarseToFineModel):
    """Make the resolved config reflect the loaded checkpoint's topology."""
    mc = model.cfg
    cfg.nbf, cfg.k = mc.nbf, mc.k
    cfg.convs_per_block = mc.convs_per_block
    cfg.input_height, cfg.input_width = mc.input_size
    cfg.coarse_feature_mode = mc.coarse_feature_mode
    cfg.refined_feature_mode = mc.refined_feature_mode
    cfg.attention_enabled = mc.attention_enabled
    cfg.coarse_enabled = mc.coarse_enabled
    cfg.dtype = mc.dtype


def _load_model(path) -> CoarseToFineModel:
    return restore_model(load_checkpoint(path))


def _read_image_for(model: CoarseToFineModel, path):
    """Image from disk, resized to the model's input dims if they differ
    (area resampling, with a warning); returns (image, original_dims)."""
    image = df.read_png(path)
    if image.ndim != 3:
        raise ValueError(f"{path}: expected an RGB image")
    original = image.shape[1:]
    expected = model.cfg.input_size
    if original != expected:
        warnings.warn(f"{path}: dims {original} differ from the model's "
                      f"{expected}; resizing")
        image = df.resize_image(image, expected)
    return image, original


def _stem(path) -> str:
    return os.path.splitext(os.path.basename(path))[0]


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args, out: _Outputs):
    cfg = _resolve_config(args)
    out_dir = _require_output_dir(cfg)
    if not cfg.manifest:
        raise ValueError("train needs a manifest "
                         "(--manifest or manifest in the config)")
    entries = df.load_manifest(cfg.manifest)
    images, masks = df.load_split(entries, "train")
    expected = (cfg.input_height, cfg.input_width)
    if images.shape[2:] != expected:
        warnings.warn(f"training images are {images.shape[2:]}, resizing "
                      f"to the configured {expected}")
        images = np.stack([df.resize_image(im, expected) for im in images])
        masks = np.stack([df.resize_mask(m[0], expected)[None]
                          for m in masks])

    config_path = out.register(out_dir, "resolved_config.txt")
    log_path = out.register(out_dir, "train.log")
    ckpt_path = out.register(out_dir, "checkpoint.ckpt")
    cfg.save(config_path)
    open(log_path, "w").close()     # truncate any previous run's log

    if args.resume:
        trainer = Trainer.load(args.resume, log_path=log_path)
        if args.iterations is not None:
            trainer.cfg.iterations = trainer.iteration + args.iterations
    else:
        model = CoarseToFineModel(cfg.model_config(), seed=cfg.seed)
        trainer = Trainer(model, cfg.sat_config(), log_path=log_path)
    trainer.train(images, masks)
    trainer.save(ckpt_path)
    final = trainer.loss_history[-1] if trainer.loss_history else float("nan")
    print(f"trained {trainer.iteration} iterations, final loss "
          f"{final:.6f}, checkpoint {ckpt_path}")


def cmd_infer(args, out: _Outputs):
    cfg = _resolve_config(args)
    out_dir = _require_output_dir(cfg)
    model = _load_model(args.checkpoint)
    if args.coarse and not model.cfg.coarse_enabled:
        raise ValueError("--coarse: this checkpoint has no coarse stage")
    _sync_from_model(cfg, model)
    cfg.save(out.register(out_dir, "resolved_config.txt"))
    image, original = _read_image_for(model, args.image)

    with no_grad():
        coarse, refined = model(Tensor(image[None]
                                       .astype(model.cfg.np_dtype)))

    def emit(pred, suffix):
        raster = pred.data[0, 0].astype(np.float64)
        if raster.shape != original:
            raster = cv2.resize(raster, (original[1], original[0]),
                                interpolation=cv2.INTER_NEAREST)
        df.write_png(raster, out.register(out_dir,
                                          f"{_stem(args.image)}{suffix}.png"))

    emit(refined, "_mask")
    if args.coarse:
        emit(coarse, "_coarse_mask")
    print(f"wrote mask(s) for {args.image} to {out_dir}")


def cmd_eval(args, out: _Outputs):
    cfg = _resolve_config(args)
    out_dir = _require_output_dir(cfg)
    if not cfg.manifest:
        raise ValueError("eval needs a manifest "
                         "(--manifest or manifest in the config)")
    model = _load_model(args.checkpoint)
    _sync_from_model(cfg, model)
    cfg.save(out.register(out_dir, "resolved_config.txt"))
    specs = [mx.parse_perturbation(s) for s in (args.perturb or [])]
    report = mx.evaluate(model, cfg.manifest, specs, split=args.split,
                         seed=cfg.seed)
    text = mx.format_report(report)
    report_path = out.register(out_dir, "report.txt")
    with open(report_path, "w") as f:
        f.write(text)
    print(text, end="")
    print(f"report written to {report_path}")


def cmd_attack(args, out: _Outputs):
    cfg = _resolve_config(args)
    out_dir = _require_output_dir(cfg)
    if args.eps <= 0:
        raise ValueError(f"eps must be > 0, got {args.eps}")
    model = _load_model(args.checkpoint)
    _sync_from_model(cfg, model)
    cfg.save(out.register(out_dir, "resolved_config.txt"))
    image, _ = _read_image_for(model, args.image)
    mask = df.read_png(args.mask)
    if mask.ndim != 2:
        raise ValueError(f"{args.mask}: expected a grayscale mask")
    if mask.shape != model.cfg.input_size:
        mask = df.resize_mask(mask, model.cfg.input_size)

    adv = fgsm(model, image[None], mask[None, None], args.eps)[0]
    delta = adv.astype(np.float64) - image.astype(np.float64)
    residual = np.clip(np.abs(delta) * 20.0, 0.0, 1.0)
    stem = _stem(args.image)
    df.write_png(adv, out.register(out_dir, f"{stem}_adv.png"))
    df.write_png(residual, out.register(out_dir, f"{stem}_residual.png"))
    print(f"linf_delta={np.abs(delta).max():.6g}")


def _edge_padded_noise_map(image: np.ndarray, dtype) -> np.ndarray:
    """Mean absolute high-pass response with edge-replicated borders, so a
    constant image maps to exactly zero everywhere."""
    padded = np.pad(image, ((0, 0), (PAD, PAD), (PAD, PAD)), mode="edge")
    c = image.shape[0]
    x = Tensor(padded[:, None].astype(dtype), requires_grad=False)
    with no_grad():
        response = conv2d(x, Tensor(kernel_bank(dtype),
                                    requires_grad=False), padding=0)
    return np.abs(response.data.reshape(3 * c, *image.shape[1:])) \
        .mean(axis=0)


def _heatmap_overlay(image: np.ndarray, activation: np.ndarray) -> np.ndarray:
    """Blue-to-red colormap over the activation's [min, max], blended onto
    the image at half opacity; a flat map renders at the blue end."""
    span = activation.max() - activation.min()
    if span == 0:
        v = np.zeros_like(activation)
    else:
        v = (activation - activation.min()) / span
    heat = np.stack([v, np.zeros_like(v), 1.0 - v])
    return np.clip(0.5 * image.astype(np.float64) + 0.5 * heat, 0.0, 1.0)


def cmd_visualize(args, out: _Outputs):
    cfg = _resolve_config(args)
    out_dir = _require_output_dir(cfg)
    model = _load_model(args.checkpoint)
    _sync_from_model(cfg, model)
    cfg.save(out.register(out_dir, "resolved_config.txt"))
    image, _ = _read_image_for(model, args.image)
    h, w = model.cfg.input_size

    maps = {"cwhpf": _edge_padded_noise_map(image, model.cfg.np_dtype)}
    if model.cfg.attention_enabled:
        record = {}
        with no_grad():
            model(Tensor(image[None].astype(model.cfg.np_dtype)),
                  record=record)
        for name, key in (("spatial_attention", "spatial_out"),
                          ("channel_attention", "channel_out")):
            act = np.abs(record[key][0]).mean(axis=0).astype(np.float64)
            maps[name] = cv2.resize(act, (w, h),
                                    interpolation=cv2.INTER_LINEAR)
    else:
        warnings.warn("checkpoint has attention disabled; only the cwhpf "
                      "heatmap is produced")

    stem = _stem(args.image)
    for name, activation in maps.items():
        if activation.max() <= 1e-6:    # below display resolution: flat map
            activation = np.zeros_like(activation)
        print(f"map={name} variance={activation.var():.6g}")
        overlay = _heatmap_overlay(image, activation)
        df.write_png(overlay, out.register(out_dir, f"{stem}_{name}.png"))


def cmd_gen_data(args, out: _Outputs):
    cfg = _resolve_config(args)
    out_dir = _require_output_dir(cfg)
    cfg.save(out.register(out_dir, "resolved_config.txt"))
    counts = [("train", cfg.n_train), ("test", cfg.n_test)]
    index = 0
    for split, count in counts:
        for _ in range(count):
            for path in df.sample_paths(out_dir, split, index):
                out.register(path)
            index += 1
    manifest = out.register(out_dir, "manifest.tsv")
    df.generate_dataset(out_dir, cfg.n_train, cfg.n_test,
                        size=(cfg.input_height, cfg.input_width),
                        seed=cfg.seed)
    print(f"wrote {cfg.n_train} train / {cfg.n_test} test samples, "
          f"manifest {manifest}")


# ---------------------------------------------------------------------------
# argument wiring

def _add_common(parser, *names):
    if "config" in names:
        parser.add_argument("--config", help="key = value run config file")
    if "output_dir" in names:
        parser.add_argument("--output-dir", dest="output_dir",
                            help="directory for this run's outputs")
    if "seed" in names:
        parser.add_argument("--seed", type=int, help="master seed")
    if "manifest" in names:
        parser.add_argument("--manifest", help="dataset manifest path")
    if "checkpoint" in names:
        parser.add_argument("--checkpoint", required=True,
                            help="model checkpoint path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forgeloc",
        description="Train, attack, and evaluate a pixel-level image "
                    "forgery localizer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a manifest")
    _add_common(p, "config", "output_dir", "seed", "manifest")
    p.add_argument("--iterations", type=int, help="training iterations")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-sat", action="store_true",
                   help="disable the adversarial second phase")
    p.add_argument("--no-attention", action="store_true",
                   help="disable the dual attention module")
    p.add_argument("--no-cwhpf", action="store_true",
                   help="use plain high-pass features in both stages")
    p.add_argument("--no-coarse-to-fine", action="store_true",
                   help="train the refined stage alone")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict a mask for one image")
    _add_common(p, "config", "output_dir", "checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--coarse", action="store_true",
                   help="also write the coarse stage's mask")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    _add_common(p, "config", "output_dir", "seed", "manifest", "checkpoint")
    p.add_argument("--perturb", action="append",
                   help="kind:value, e.g. gaussian_noise:15 (repeatable)")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack", help="write an adversarial image and its "
                                      "amplified residual")
    _add_common(p, "config", "output_dir", "checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("visualize", help="write activation heatmaps")
    _add_common(p, "config", "output_dir", "checkpoint")
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p, "config", "output_dir", "seed")
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--size", type=int, help="square sample side length")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = _Outputs()
    try:
        args.func(args, out)
        out.verify()
        return 0
    except Exception as err:     # CLI boundary: report, clean up, exit 1
        out.cleanup()
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
