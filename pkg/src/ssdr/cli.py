"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or weights error,
3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import container
from .data import (
    AugmentationPlan,
    DataError,
    NoiseSpec,
    preprocess,
    synth_dataset,
    write_image_tree,
)
from .experiments import (
    ExperimentConfig,
    ExperimentContext,
    run_noise,
    run_single,
    run_table1,
    run_table3,
    run_table4,
    write_feature_cache,
)
from .kernels import NumericError
from .network import (
    build_classifier,
    build_full_network,
    build_feature_extractor,
    dump_feature_maps,
    load_weights,
)
from .training import (
    InitMethod,
    TrainConfig,
    evaluate,
    gradient_check,
    init_params,
    train,
)

AUG_CHOICES = ("none", "brightness", "flips", "rotations", "combined")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _plan(name: str) -> AugmentationPlan:
    if name == "none":
        return AugmentationPlan()
    if name == "combined":
        return AugmentationPlan(brightness=True, flips=True, rotations=True)
    return AugmentationPlan(**{name: True})


def _int_list(text: str):
    return tuple(int(v) for v in text.split(",") if v)


def build_parser() -> _Parser:
    parser = _Parser(prog="ssdr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, weights=False):
        p.add_argument("--data", default="synthetic",
                       help="dataset root directory, or 'synthetic'")
        if weights:
            p.add_argument("--weights", help="extractor weight container")
        p.add_argument("--seed", type=int, action="append",
                       help="run seed; repeat for several seeds")
        p.add_argument("--out", default="results", help="output directory")
        p.add_argument("--cache", help="feature cache directory (default <out>/cache)")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--updates", type=int, help="max optimizer updates per run")
        p.add_argument("--split-seed", type=int, default=0)
        p.add_argument("--split-per-class", type=int, default=150,
                       help="train/test images per class in the split")
        p.add_argument("--synth-per-class", type=int,
                       help="generated images per class when --data synthetic")

    p = sub.add_parser("synth", help="generate a synthetic dataset tree")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("extract", help="cache frozen-extractor features to disk")
    common(p, weights=True)
    p.add_argument("--features-out", required=True, help="feature container path")
    p.add_argument("--side", choices=("train", "test"), default="train")

    p = sub.add_parser("train", help="one configured train+evaluate run")
    common(p, weights=True)
    p.add_argument("--n", type=int, default=150, help="training images per class")
    p.add_argument("--mode", choices=("transfer", "scratch"), default="transfer")
    p.add_argument("--init", choices=("gaussian", "uniform", "xavier", "msra"),
                   default="gaussian")
    p.add_argument("--aug", choices=AUG_CHOICES, default="none")
    p.add_argument("--snr", type=float, help="add Gaussian noise at this SNR (dB)")

    p = sub.add_parser("eval", help="evaluate trained classifier weights on the test split")
    common(p, weights=True)
    p.add_argument("--classifier", required=True, help="trained classifier container")

    for name in ("table1", "table3", "table4", "noise"):
        p = sub.add_parser(name, help=f"run the {name} study")
        common(p, weights=True)
        if name in ("table1", "noise"):
            p.add_argument("--n-values", type=_int_list,
                           help="comma-separated training sizes per class")
        if name == "table1":
            p.add_argument("--modes", type=lambda s: tuple(s.split(",")),
                           help="comma-separated subset of transfer,scratch")
            p.add_argument("--scratch-updates", type=int)
        if name == "noise":
            p.add_argument("--snrs", help="comma-separated SNRs in dB; 'none' for clean")
            p.add_argument("--aug", choices=AUG_CHOICES,
                           help="override the default combined augmentation")
        if name in ("table3", "table4"):
            p.add_argument("--n", type=int, default=10, help="images per class")

    p = sub.add_parser("featmaps", help="dump per-channel feature map images")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True, help="a 200x200 grayscale image")
    p.add_argument("--pool", type=int, choices=(1, 2, 3), default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--raw", help="also write the raw activation tensor here")

    p = sub.add_parser("gradhist", help="capture gradient histograms during a scratch run")
    common(p)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--every", type=int, default=50, help="capture interval in updates")

    p = sub.add_parser("check", help="finite-difference gradient check suite")
    p.add_argument("--samples", type=int, default=60, help="sampled parameters per layer")
    p.add_argument("--full", action="store_true",
                   help="also check the whole network on a toy input")

    return parser


def _load_image(path) -> np.ndarray:
    from PIL import Image

    from .data import LabeledImage

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L")).astype(np.uint8)
    if arr.shape != (200, 200):
        raise DataError(f"{path}: expected a 200x200 image, got {arr.shape}")
    return preprocess(LabeledImage(arr, 0))


def _cmd_synth(args) -> int:
    ds = synth_dataset(args.per_class, args.seed)
    write_image_tree(ds, args.out)
    print(f"wrote {len(ds)} images under {args.out}")
    return 0


def _cmd_extract(args, cfg) -> int:
    ctx = ExperimentContext(cfg)
    side = ctx.train_pool if args.side == "train" else ctx.test_set
    write_feature_cache(args.features_out, side.images, ctx.extractor_params)
    print(f"cached {len(side)} feature maps to {args.features_out}")
    return 0


def _cmd_train(args, cfg) -> int:
    cfg.n = args.n
    cfg.mode = args.mode
    cfg.init = args.init
    cfg.augmentation = _plan(args.aug)
    if args.snr is not None:
        cfg.noise = NoiseSpec(args.snr)
    record = run_single(cfg)
    print(f"accuracy {record.accuracy:.4f} -> {cfg.out_dir}/single/record.json")
    return 0


def _cmd_eval(args, cfg) -> int:
    ctx = ExperimentContext(cfg)
    spec = build_classifier()
    params = load_weights(args.classifier, spec)
    feats, labels = ctx.features_for(ctx.test_set)
    accuracy, confusion = evaluate(spec, params, feats, labels)
    print(json.dumps({"accuracy": accuracy, "confusion": confusion.tolist()}, indent=2))
    return 0


def _cmd_gradhist(args, cfg) -> int:
    ctx = ExperimentContext(cfg)
    spec = build_full_network()
    seed = cfg.seeds[0]
    from .experiments import cell_rng

    rng = cell_rng(seed, f"gradhist;n={args.n}")
    sample = ctx.sample_train(args.n, seed)
    params = init_params(spec, InitMethod(cfg.init), rng)
    from .experiments import ImageInputs

    tc = TrainConfig(
        max_updates=cfg.max_updates, seed=seed, transfer=False,
        record_grad_hist=True, hist_every=args.every,
        hist_layers=("conv1_1", "conv3_3", "cls.conv1", "cls.conv3"),
    )
    _, history = train(spec, params, ImageInputs(sample.images), sample.labels(), tc, rng)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    history.write_hist_csv(out / "gradhist.csv")
    history.write_csv(out / "history.csv")
    medians = {}
    for h in history.grad_hists:
        medians.setdefault(h.layer, h.median)
    for layer, med in medians.items():
        print(f"{layer}: first-capture median |g| = {med:.3e}")
    print(f"wrote {out / 'gradhist.csv'}")
    return 0


def _cmd_featmaps(args) -> int:
    params = load_weights(args.weights, build_feature_extractor(), trainable=False)
    image = _load_image(args.image)
    paths = dump_feature_maps(params, image, args.pool, args.out, raw_path=args.raw)
    print(f"wrote {len(paths)} feature maps to {args.out}")
    return 0


def _cmd_check(args) -> int:
    rng = np.random.default_rng(0)
    spec = build_classifier()
    params = init_params(spec, InitMethod("xavier"), rng)
    x = rng.standard_normal((2, 256, 4, 4)).astype(np.float32)
    result = gradient_check(spec, params, x, [0, 5], samples_per_layer=args.samples,
                            rng=np.random.default_rng(1))
    per_layer = dict(result.per_layer)
    if args.full:
        full = build_full_network()
        fparams = init_params(full, InitMethod("msra"), rng)
        fx = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
        fres = gradient_check(full, fparams, fx, [3], samples_per_layer=8,
                              rng=np.random.default_rng(2))
        for k, v in fres.per_layer.items():
            per_layer[f"full/{k}"] = v
    ok = True
    for layer, err in per_layer.items():
        status = "ok" if err < 1e-2 else "FAIL"
        ok &= err < 1e-2
        print(f"{layer:18s} max relative error {err:.3e}  {status}")
    return 0 if ok else 3


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "featmaps":
            return _cmd_featmaps(args)
        if args.command == "check":
            return _cmd_check(args)

        cfg_kind = args.command if args.command in ("table1", "table3", "table4", "noise") else "single"
        cfg = _make_config(args, cfg_kind)
        if args.command == "extract":
            return _cmd_extract(args, cfg)
        if args.command == "train":
            return _cmd_train(args, cfg)
        if args.command == "eval":
            return _cmd_eval(args, cfg)
        if args.command == "gradhist":
            return _cmd_gradhist(args, cfg)

        runner = {"table1": run_table1, "table3": run_table3,
                  "table4": run_table4, "noise": run_noise}[args.command]
        records = runner(cfg)
        print(f"{args.command}: {len(records)} cells -> {cfg.out_dir}/{args.command}.csv")
        return 0
    except (DataError, container.ContainerError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


def _make_config(args, kind) -> ExperimentConfig:
    cfg = ExperimentConfig(kind=kind, data=args.data, out_dir=args.out,
                           threads=args.threads,
                           split_seed=args.split_seed,
                           per_class_train=args.split_per_class,
                           per_class_test=args.split_per_class)
    cfg.weights = getattr(args, "weights", None)
    cfg.cache_dir = getattr(args, "cache", None)
    if args.seed:
        cfg.seeds = tuple(args.seed)
    if getattr(args, "updates", None):
        cfg.max_updates = args.updates
        cfg.scratch_updates = args.updates
    if getattr(args, "synth_per_class", None):
        cfg.synth_per_class = args.synth_per_class
    if getattr(args, "n_values", None):
        cfg.n_values = args.n_values
    if getattr(args, "modes", None):
        cfg.modes = args.modes
    if getattr(args, "scratch_updates", None):
        cfg.scratch_updates = args.scratch_updates
    if getattr(args, "n", None) and kind in ("table3", "table4"):
        cfg.n_small = args.n
    if getattr(args, "snrs", None):
        cfg.snrs = tuple(None if v == "none" else float(v)
                         for v in args.snrs.split(","))
    if kind == "noise" and getattr(args, "aug", None):
        cfg.noise_augmentation = _plan(args.aug)
    return cfg


if __name__ == "__main__":
    raise SystemExit(main())
