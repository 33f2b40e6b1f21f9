"""Command-line front end: describe / flops / gradcheck / train / eval /
visualize.

Exit codes are a stable contract:
    0 success, 1 check failure, 2 config error, 3 I/O error, 4 numerical abort.

Commands that write files put a `manifest.json` in the output directory before
any compute happens; `train --from-manifest` replays one for a bitwise-equal
rerun.
"""

import argparse
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import configio, flops
from . import tensor as T
from .data import cifar10_root, load_cifar10, resize_nearest, synthetic_set
from .errors import ConfigError, DataFormatError, NumericsError
from .merging import export_weight_grids
from .model import (ModelConfig, build_model, load_model, presets,
                    save_checkpoint)
from .pgm import read_pgm, read_ppm
from .seeding import substream
from .tensor import Tensor
from .train import TrainConfig, evaluate, train

GRADCHECK_THRESHOLD = 1e-4
DESK_PRESETS = ("desk-32", "desk-64")
SYNTHETIC_CLASSES = {"two_gaussians": 2, "grid_patterns": 4}


# ------------------------------------------------------------------ manifests

@dataclass(frozen=True)
class RunManifest:
    """Everything needed to replay a run, written before any compute."""

    subcommand: str
    seed: int
    output_dir: str
    config_path: str | None
    model: dict
    train: dict | None = None
    data: dict | None = None

    def to_dict(self) -> dict:
        return {"subcommand": self.subcommand, "seed": self.seed,
                "output_dir": self.output_dir, "config_path": self.config_path,
                "model": self.model, "train": self.train, "data": self.data}

    @staticmethod
    def from_dict(d: dict) -> "RunManifest":
        configio.check_keys(d, required={"subcommand", "seed", "output_dir",
                                         "config_path", "model"},
                            optional={"train", "data"}, context="run manifest")
        return RunManifest(subcommand=str(d["subcommand"]), seed=int(d["seed"]),
                           output_dir=str(d["output_dir"]),
                           config_path=d["config_path"], model=dict(d["model"]),
                           train=d.get("train"), data=d.get("data"))

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        configio.save_json(os.path.join(out_dir, "manifest.json"), self.to_dict())


# -------------------------------------------------------------- config lookup

def resolve_model_config(preset: str | None, config_path: str | None) -> ModelConfig:
    if (preset is None) == (config_path is None):
        raise ConfigError("exactly one of --preset/--config is required")
    if preset is not None:
        table = presets()
        if preset not in table:
            raise ConfigError(f"unknown preset {preset!r}; "
                              f"available: {', '.join(sorted(table))}")
        return table[preset]
    return ModelConfig.from_dict(configio.load_json(config_path))


def default_out_dir(tag: str) -> str:
    return os.path.join(os.environ.get("MVT_OUT_DIR", "runs"), tag)


# ------------------------------------------------------------------- describe

def cmd_describe(args) -> int:
    cfg = resolve_model_config(args.preset, args.config)
    report = flops.count(cfg)
    print(f"preset={cfg.preset_name} input={cfg.input_size} classes={cfg.num_classes}")
    print(f"channel={cfg.channel} depth={cfg.depth} heads={cfg.heads} "
          f"mlp_ratio={cfg.mlp_ratio}")
    print(f"embed={cfg.embed.kind} tokens={cfg.token_count} "
          f"layout={cfg.token_layout()} seq={cfg.seq_len}")
    print(f"merge={cfg.merge} positional={'on' if cfg.positional else 'off'} "
          f"droppath_max={cfg.droppath_max}")
    print(f"params={report.total_params} macs={report.total_macs}")
    return 0


def cmd_flops(args) -> int:
    cfg = resolve_model_config(args.preset, args.config)
    report = flops.count(cfg)
    if args.format == "structured":
        sys.stdout.write(configio.dump_json(report.as_dict()))
    else:
        print(report.render_table())
    return 0


# ------------------------------------------------------------------ gradcheck

def _away_from_kinks(rng, *shape) -> Tensor:
    d = rng.normal(size=shape)
    return Tensor(d + np.where(d >= 0, 0.25, -0.25), requires_grad=True)


def _positive(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(0.5, 1.5, size=shape), requires_grad=True)


def _normal(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def gradcheck_cases(seed: int) -> dict:
    """Name -> (f, xs, step). Fresh tensors per call; order is report order."""
    r = lambda name: substream(seed, "gradcheck", name)

    def conv_case(name, groups):
        rng = r(name)
        cin = 4
        x = _normal(rng, 2, cin, 6, 6)
        w = _normal(rng, 4, cin // groups, 3, 3)
        return lambda a, b: T.conv2d(a, b, stride=1, padding=1, groups=groups), [x, w]

    cases = {
        "add": (T.add, [_normal(r("add"), 2, 3), _normal(r("add2"), 2, 3)]),
        "sub": (T.sub, [_normal(r("sub"), 2, 3), _normal(r("sub2"), 2, 3)]),
        "mul": (T.mul, [_normal(r("mul"), 2, 3), _normal(r("mul2"), 2, 3)]),
        "div": (T.div, [_normal(r("div"), 2, 3), _positive(r("div2"), 2, 3)]),
        "square": (T.square, [_normal(r("square"), 3, 3)]),
        "exp": (T.exp, [_normal(r("exp"), 2, 4)]),
        "log": (T.log, [_positive(r("log"), 2, 4)]),
        "relu": (T.relu, [_away_from_kinks(r("relu"), 3, 4)]),
        "gelu": (T.gelu, [_normal(r("gelu"), 3, 4)]),
        "sigmoid": (T.sigmoid, [_normal(r("sigmoid"), 3, 4)]),
        # sum(softmax) is constant, so project onto fixed coefficients first
        "softmax": (lambda x, _c=Tensor(r("softmaxproj").normal(size=(3, 5))):
                    T.softmax(x, axis=-1) * _c, [_normal(r("softmax"), 3, 5)]),
        "log_softmax": (lambda x: T.log_softmax(x, axis=-1),
                        [_normal(r("log_softmax"), 3, 5)]),
        "matmul": (T.matmul, [_normal(r("matmul"), 3, 4), _normal(r("matmul2"), 4, 2)]),
        "linear": (T.linear, [_normal(r("linear"), 3, 4), _normal(r("linw"), 5, 4),
                              _normal(r("linb"), 5)]),
        "layernorm": (T.layernorm, [_normal(r("ln"), 2, 3, 6), _positive(r("lng"), 6),
                                    _normal(r("lnb"), 6)]),
        "conv2d": conv_case("conv2d", groups=1),
        "depthwise_conv": conv_case("depthwise_conv", groups=4),
        "sum": (lambda x: T.tsum(x, axis=1), [_normal(r("sum"), 3, 4)]),
        "mean": (lambda x: T.tmean(x, axis=0), [_normal(r("mean"), 3, 4)]),
        "reshape": (lambda x: T.reshape(x, (6, 2)), [_normal(r("reshape"), 3, 4)]),
        "transpose": (lambda x: T.transpose(x, (1, 0, 2)), [_normal(r("transpose"), 2, 3, 4)]),
        "broadcast": (lambda x: T.broadcast_to(x, (4, 3, 5)), [_normal(r("broadcast"), 3, 1)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1),
                   [_normal(r("concat"), 2, 3), _normal(r("concat2"), 2, 4)]),
        "slice": (lambda x: T.slice_axis(x, 1, 1, 3), [_normal(r("slice"), 2, 5)]),
        "take": (lambda x: T.take(x, np.array([2, 0, 2]), axis=1),
                 [_normal(r("take"), 2, 4)]),
        "global_avg_pool": (T.global_avg_pool, [_normal(r("gap"), 2, 3, 4, 4)]),
        "adaptive_avg_pool": (lambda x: T.adaptive_avg_pool(x, (2, 2)),
                              [_normal(r("aap"), 2, 3, 6, 6)]),
    }
    return {name: (f, xs, 1e-5) for name, (f, xs) in cases.items()}


def _skewed_backward(t: Tensor) -> Tensor:
    """Identity whose backward is off by 1%: the gradcheck negative control."""
    out = T.mul(t, Tensor(1.0))
    orig = out._backward
    out._backward = lambda g: orig(g * 1.01)
    return out


def _model_gradcheck(seed: int, preset: str, corrupt: bool) -> float:
    cfg = presets()[preset]
    model = build_model(cfg, seed=seed)
    rng = substream(seed, "gradcheck", "model")
    image = Tensor(rng.normal(size=(1, 3, cfg.input_size, cfg.input_size)),
                   requires_grad=True)

    def f(x):
        if corrupt:
            x = _skewed_backward(x)
        logits, _ = model.forward(x)
        return logits

    return T.gradcheck(f, [image], step=1e-5, max_entries=12,
                       rng=substream(seed, "gradcheck", "model-entries"))


def cmd_gradcheck(args) -> int:
    if args.preset not in DESK_PRESETS:
        raise ConfigError(f"gradcheck is desk-only (cost guard); "
                          f"choose one of {', '.join(DESK_PRESETS)}")
    cases = gradcheck_cases(args.seed)
    wanted = list(cases) + ["model"] if args.ops == "all" else args.ops.split(",")
    unknown = [w for w in wanted if w != "model" and w not in cases]
    if unknown:
        raise ConfigError(f"unknown op(s) {unknown}; "
                          f"available: {', '.join(list(cases) + ['model'])}")
    failures = 0
    for name in wanted:
        try:
            if name == "model":
                err = _model_gradcheck(args.seed, args.preset, args.corrupt)
            else:
                f, xs, step = cases[name]
                if args.corrupt:
                    plain = f
                    f = lambda *ts, _p=plain: _p(*(_skewed_backward(t) for t in ts))
                err = T.gradcheck(f, xs, step=step,
                                  rng=substream(args.seed, "entries", name))
        except NumericsError:
            err = float("inf")
        ok = err < GRADCHECK_THRESHOLD
        failures += 0 if ok else 1
        print(f"gradcheck {name:<18} max_rel_err={err:.3e}  {'PASS' if ok else 'FAIL'}")
    if failures:
        print(f"{failures}/{len(wanted)} checks failed", file=sys.stderr)
        return 1
    return 0


# ----------------------------------------------------------------- train/eval

def build_dataset(kind: str, size: int, data_dir: str | None,
                  train_size: int, val_size: int, seed: int):
    """Returns (train_images, val_images, num_classes)."""
    if kind == "cifar10":
        root = data_dir or cifar10_root()
        if root is None:
            raise DataFormatError(
                "cifar10 batches not found; pass --data-dir or set MVT_CIFAR10_DIR")
        train_images = load_cifar10(root, "train")[:train_size] if train_size else []
        val_images = load_cifar10(root, "test")[:val_size] if val_size else []
        return train_images, val_images, 10
    if kind not in SYNTHETIC_CLASSES:
        raise ConfigError(f"unknown dataset {kind!r}")
    k = SYNTHETIC_CLASSES[kind]
    train_images = synthetic_set(kind, train_size, size, k, seed=seed) if train_size else []
    val_images = synthetic_set(kind, val_size, size, k, seed=seed + 1) if val_size else []
    return train_images, val_images, k


def _train_from_manifest(manifest: RunManifest, out_dir: str) -> int:
    model_cfg = ModelConfig.from_dict(manifest.model)
    train_cfg = TrainConfig.from_dict(manifest.train)
    data = dict(manifest.data)
    configio.check_keys(data, required={"kind", "train_size", "val_size"},
                        optional={"dir"}, context="manifest data block")
    manifest = RunManifest(subcommand="train", seed=manifest.seed,
                           output_dir=out_dir, config_path=manifest.config_path,
                           model=model_cfg.to_dict(), train=train_cfg.to_dict(),
                           data=data)
    manifest.write(out_dir)
    train_images, val_images, k = build_dataset(
        data["kind"], model_cfg.input_size, data.get("dir"),
        int(data["train_size"]), int(data["val_size"]), manifest.seed)
    if k != model_cfg.num_classes:
        raise ConfigError(f"dataset has {k} classes, model expects "
                          f"{model_cfg.num_classes}")
    model = build_model(model_cfg, seed=manifest.seed)
    history = train(model, train_images, val_images, train_cfg, out_dir=out_dir)
    for rec in history:
        print(f"epoch={rec.epoch} train_loss={rec.train_loss:.6f} "
              f"val_accuracy={rec.val_accuracy:.4f}")
    print(f"best checkpoint: {os.path.join(out_dir, 'best.ckpt')}")
    return 0


def cmd_train(args) -> int:
    if args.from_manifest is not None:
        manifest = RunManifest.from_dict(configio.load_json(args.from_manifest))
        out_dir = args.out or manifest.output_dir
        return _train_from_manifest(manifest, out_dir)
    from dataclasses import replace as _replace
    model_cfg = resolve_model_config(args.preset, args.config)
    model_cfg = _replace(model_cfg, num_classes=SYNTHETIC_CLASSES.get(args.data, 10))
    if args.flip == "auto":
        # quadrant labels are not mirror-invariant; flips would corrupt them
        flip = args.data != "grid_patterns"
    else:
        flip = args.flip == "on"
    train_cfg = TrainConfig(epochs=args.epochs, batch=args.batch, lr=args.lr,
                            weight_decay=args.weight_decay,
                            warmup_epochs=args.warmup_epochs,
                            label_smoothing=args.label_smoothing,
                            mixup_alpha=args.mixup, cutmix_alpha=args.cutmix,
                            seed=args.seed, augment_flip=flip,
                            augment_crop=args.crop == "on")
    train_cfg.validate()
    out_dir = args.out or default_out_dir(
        f"train-{model_cfg.preset_name}-{args.data}-s{args.seed}")
    data = {"kind": args.data, "dir": args.data_dir,
            "train_size": args.train_size, "val_size": args.val_size}
    manifest = RunManifest(subcommand="train", seed=args.seed, output_dir=out_dir,
                           config_path=args.config, model=model_cfg.to_dict(),
                           train=train_cfg.to_dict(), data=data)
    return _train_from_manifest(manifest, out_dir)


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    _, val_images, k = build_dataset(args.data, model.cfg.input_size,
                                     args.data_dir, 0, args.val_size, args.seed)
    if k != model.cfg.num_classes:
        raise ConfigError(f"dataset has {k} classes, checkpoint expects "
                          f"{model.cfg.num_classes}")
    acc = evaluate(model, val_images, batch=args.batch)
    print(f"top1={acc:.4f} n={len(val_images)}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        configio.save_json(os.path.join(args.out, "metrics.json"),
                           {"top1": acc, "n": len(val_images),
                            "checkpoint": os.path.basename(args.checkpoint)})
    return 0


# ------------------------------------------------------------------ visualize

IMAGE_SUFFIXES = (".ppm", ".pgm", ".npy")


def _load_raster(path: str, size: int) -> np.ndarray:
    if path.endswith(".npy"):
        arr = np.load(path)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise DataFormatError(f"{path}: expected (3, H, W) array, got {arr.shape}")
        arr = arr.astype(np.float64)
    elif path.endswith(".ppm"):
        arr = read_ppm(path).astype(np.float64) / 255.0
    else:
        gray = read_pgm(path).astype(np.float64) / 255.0
        arr = np.stack([gray, gray, gray])
    return resize_nearest(arr, size)


def cmd_visualize(args) -> int:
    model = load_model(args.checkpoint)
    if model.cfg.merge != "apm":
        raise ConfigError(
            f"checkpoint merges by {model.cfg.merge!r}; token-weight heatmaps "
            "exist only for adaptive merging (apm)")
    names = sorted(n for n in os.listdir(args.images)
                   if n.endswith(IMAGE_SUFFIXES))
    if not names:
        raise DataFormatError(f"no {'/'.join(IMAGE_SUFFIXES)} images in {args.images}")
    os.makedirs(args.out, exist_ok=True)
    written = []
    for name in names:
        pixels = _load_raster(os.path.join(args.images, name), model.cfg.input_size)
        _, records = model.forward(pixels[None])
        weights = records[0].weights
        image_id = os.path.splitext(name)[0]
        written += export_weight_grids(weights, model.embed.provenance,
                                       args.out, image_id, scale=args.scale)
    for path in written:
        print(path)
    return 0


# ----------------------------------------------------------------- dispatcher

def _add_config_flags(sp):
    sp.add_argument("--preset", help="named architecture, e.g. 880M or desk-32")
    sp.add_argument("--config", help="path to a model-config json")
    sp.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvt", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sp = sub.add_parser("describe", help="architecture summary")
    _add_config_flags(sp)
    sp.set_defaults(handler=cmd_describe)

    sp = sub.add_parser("flops", help="per-layer MAC/param audit")
    _add_config_flags(sp)
    sp.add_argument("--format", choices=("table", "structured"), default="table")
    sp.set_defaults(handler=cmd_flops)

    sp = sub.add_parser("gradcheck", help="central-difference gradient audit")
    sp.add_argument("--preset", default="desk-32")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--ops", default="all", help="'all' or comma-separated names")
    sp.add_argument("--corrupt", action="store_true",
                    help="negative control: mis-scale one backward by 1%%")
    sp.set_defaults(handler=cmd_gradcheck)

    sp = sub.add_parser("train", help="optimize a model on a dataset")
    _add_config_flags(sp)
    sp.add_argument("--data", default="two_gaussians",
                    choices=("two_gaussians", "grid_patterns", "cifar10"))
    sp.add_argument("--data-dir")
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--lr", type=float, default=5e-4)
    sp.add_argument("--weight-decay", type=float, default=0.05)
    sp.add_argument("--warmup-epochs", type=int, default=1)
    sp.add_argument("--label-smoothing", type=float, default=0.1)
    sp.add_argument("--mixup", type=float, default=0.0)
    sp.add_argument("--cutmix", type=float, default=0.0)
    sp.add_argument("--train-size", type=int, default=256)
    sp.add_argument("--val-size", type=int, default=64)
    sp.add_argument("--flip", choices=("auto", "on", "off"), default="auto",
                    help="horizontal-flip augmentation; auto disables it for "
                         "position-labeled data (grid_patterns)")
    sp.add_argument("--crop", choices=("on", "off"), default="on")
    sp.add_argument("--out", help="output dir (default under $MVT_OUT_DIR or runs/)")
    sp.add_argument("--from-manifest", help="replay a previous run's manifest")
    sp.set_defaults(handler=cmd_train)

    sp = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", default="two_gaussians",
                    choices=("two_gaussians", "grid_patterns", "cifar10"))
    sp.add_argument("--data-dir")
    sp.add_argument("--val-size", type=int, default=64)
    sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="also write metrics.json here")
    sp.set_defaults(handler=cmd_eval)

    sp = sub.add_parser("visualize", help="token-weight heatmaps as PGM grids")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", required=True, help="dir of .ppm/.pgm/.npy inputs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--scale", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(handler=cmd_visualize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


def console_entry() -> None:
    sys.exit(main())
