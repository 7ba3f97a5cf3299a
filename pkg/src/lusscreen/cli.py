"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 data/validation or file error,
4 model/weight error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import weights as lsw
from .architectures import UnetConfig, Vgg16Config, build_unet, build_vgg16, init_weights, summarize
from .dataset import FoldPlan, load_manifest, make_folds, select_frames
from .errors import DataError, ModelError
from .imageio import read_image, write_image
from .imaging import PROCESSING_SIZE, AugmentConfig, augment, preprocess, resize_mask, to_grayscale
from .pipeline import bench, evaluate, infer_single
from .training import TrainConfig, train_head

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4

log = logging.getLogger("lusscreen")


def _models(args):
    vgg = build_vgg16(Vgg16Config(head_width=args.head_width))
    unet = build_unet(UnetConfig(base_channels=args.unet_base))
    return vgg, unet


def _load_weights(path, what):
    try:
        return lsw.load(path)
    except OSError as exc:
        raise ModelError(f"cannot read {what} weights {path}: {exc.strerror}") from None


def _classifier_weights(args, vgg):
    if args.weights_cls is None:
        raise ModelError("--weights-cls is required")
    weights = _load_weights(args.weights_cls, "classifier")
    if getattr(args, "head", None):
        weights = weights.updated(_load_weights(args.head, "head"))
    return weights


def _seg_weights(args):
    if args.weights_seg is None:
        raise ModelError("--weights-seg is required")
    return _load_weights(args.weights_seg, "segmenter")


def _fold_plan(args, manifest):
    if getattr(args, "folds", None):
        return FoldPlan.load(args.folds)
    return make_folds(manifest, args.k, args.seed)


def _train_cfg(args):
    return TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        momentum=args.momentum,
        batch_size=args.batch_size,
        seed=args.seed,
        augment=not args.no_augment,
    )


def _emit(obj, out_path=None):
    text = json.dumps(obj, indent=2)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_infer(args):
    vgg, unet = _models(args)
    report = infer_single(
        args.image, vgg, _classifier_weights(args, vgg), unet, _seg_weights(args), args.out_dir,
        sample_id=args.id, mask_path=args.mask, threshold=args.threshold, overlay_format=args.overlay_format,
    )
    _emit(report.to_dict(), Path(args.out_dir) / f"{report.id}_report.json")


def cmd_evaluate(args):
    vgg, unet = _models(args)
    manifest = load_manifest(args.manifest)
    plan = _fold_plan(args, manifest)
    heads = None
    if args.heads_dir:
        heads = {f: _load_weights(Path(args.heads_dir) / f"head_fold{f}.lsw", "head") for f in range(plan.k)}
    result = evaluate(
        manifest, plan, vgg, _classifier_weights(args, vgg), unet, _seg_weights(args), heads, args.out_dir,
        train_cfg=_train_cfg(args), threshold=args.threshold, workers=args.workers,
        overlay_format=args.overlay_format,
    )
    if result.training is not None:
        for tf in result.training.folds:
            lsw.save(tf.head, Path(args.out_dir) / f"head_fold{tf.fold}.lsw")
    out = {"report_path": result.report_path, **result.report.to_dict()}
    print(json.dumps(out, indent=2))


def cmd_train_head(args):
    vgg, _ = _models(args)
    manifest = load_manifest(args.manifest)
    plan = _fold_plan(args, manifest)
    result = train_head(manifest, plan, vgg, _classifier_weights(args, vgg), _train_cfg(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "folds.json")
    folds = []
    for tf in result.folds:
        path = out / f"head_fold{tf.fold}.lsw"
        lsw.save(tf.head, path)
        folds.append({
            "fold": tf.fold,
            "head_path": str(path),
            "train_accuracy": tf.train_accuracy,
            "loss_history": tf.loss_history,
            "n_train_samples": len(tf.trained_on),
            "n_test_samples": len(tf.test_ids),
        })
    _emit({"folds": folds, "heldout": result.report.to_dict()}, out / "train_report.json")


def cmd_augment(args):
    image = to_grayscale(read_image(args.image))
    mask = read_image(args.mask) if args.mask else None
    if args.resize:
        image = preprocess(image)
        if mask is not None:
            mask = resize_mask(mask, PROCESSING_SIZE)
    cfg = AugmentConfig(shift_fraction=args.shift_fraction, noise_sigma=args.noise_sigma)
    sample_id = args.id or Path(args.image).stem
    out = Path(args.out_dir)
    written = []
    for i, (img, msk) in enumerate(augment(image, mask, cfg, args.seed, sample_id)):
        name = "+".join(cfg.plan[i]) or "original"
        path = out / f"{sample_id}_v{i:02d}.pgm"
        write_image(path, img)
        entry = {"variant": i, "ops": name, "image": str(path)}
        if msk is not None:
            mpath = out / f"{sample_id}_v{i:02d}_mask.pgm"
            write_image(mpath, msk)
            entry["mask"] = str(mpath)
        written.append(entry)
    _emit(written)


def cmd_split(args):
    manifest = load_manifest(args.manifest, check_files=not args.skip_file_check)
    plan = make_folds(manifest, args.k, args.seed)
    out = Path(args.out) if args.out else Path(args.out_dir) / "folds.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    plan.save(out)
    print(json.dumps(plan.to_dict(), indent=2))


def cmd_select_frames(args):
    if args.frames_dir:
        files = sorted(p for p in Path(args.frames_dir).iterdir() if p.is_file())
        chosen = [str(files[i]) for i in select_frames(len(files), args.stride)]
        print(json.dumps(chosen, indent=2))
    elif args.frame_count is not None:
        print(json.dumps(select_frames(args.frame_count, args.stride)))
    else:
        raise DataError("give --frame-count or --frames-dir")


def cmd_bench(args):
    vgg, unet = _models(args)
    model = vgg if args.model == "vgg16" else unet
    weights = _load_weights(args.weights, args.model) if args.weights else init_weights(model, args.seed)
    report = bench(model, weights, args.iterations, args.warmup, args.seed)
    print(report.table(), file=sys.stderr)
    _emit(report.to_dict(), Path(args.out_dir) / f"bench_{args.model}.json" if args.out_dir else None)


def cmd_summarize(args):
    vgg, unet = _models(args)
    print(summarize(vgg if args.model == "vgg16" else unet))


def cmd_init_weights(args):
    vgg, unet = _models(args)
    model = vgg if args.model == "vgg16" else unet
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    lsw.save(init_weights(model, args.seed), args.out)
    print(args.out)


def cmd_synth(args):
    from .synthetic import make_dataset

    print(make_dataset(args.out_dir, args.videos, args.frames, args.size, args.seed))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="64-bit seed for every random stream")
    common.add_argument("--out-dir", default="out", help="directory for reports, overlays and archives")
    common.add_argument("-v", "--verbose", action="store_true")

    models = argparse.ArgumentParser(add_help=False)
    models.add_argument("--head-width", type=int, default=64, help="VGG-16 hidden dense width")
    models.add_argument("--unet-base", type=int, default=64, help="U-Net first-level channels")

    weights = argparse.ArgumentParser(add_help=False)
    weights.add_argument("--weights-cls", help="LSW1 archive for the VGG-16 classifier (backbone, optional head)")
    weights.add_argument("--head", help="LSW1 archive with head.* slots merged over --weights-cls")
    weights.add_argument("--weights-seg", help="LSW1 archive for the U-Net")
    weights.add_argument("--threshold", type=float, default=0.5, help="mask probability cut (inclusive)")
    weights.add_argument("--overlay-format", choices=("ppm", "png"), default="ppm")

    folds = argparse.ArgumentParser(add_help=False)
    folds.add_argument("--manifest", required=True, help="JSONL dataset manifest")
    folds.add_argument("--folds", help="saved fold plan JSON (default: make one from --k/--seed)")
    folds.add_argument("--k", type=int, default=5)

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    train.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    train.add_argument("--momentum", type=float, default=TrainConfig.momentum)
    train.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    train.add_argument("--no-augment", action="store_true", help="train on original frames only")

    parser = argparse.ArgumentParser(prog="lusscreen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", parents=[common, models, weights], help="screen one frame")
    p.add_argument("image")
    p.add_argument("--mask", help="ground-truth mask for IoU")
    p.add_argument("--id", help="sample id (default: image file stem)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common, models, weights, folds, train], help="k-fold evaluation")
    p.add_argument("--heads-dir", help="directory of head_fold{i}.lsw (default: train inline)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train-head", parents=[common, models, weights, folds, train], help="k-fold head training")
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("augment", parents=[common], help="write the augmentation variants of one frame")
    p.add_argument("image")
    p.add_argument("--mask")
    p.add_argument("--id", help="sample id keying the noise stream (default: file stem)")
    p.add_argument("--resize", action="store_true", help="preprocess to 224x224 first")
    p.add_argument("--shift-fraction", type=float, default=AugmentConfig.shift_fraction)
    p.add_argument("--noise-sigma", type=float, default=AugmentConfig.noise_sigma)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("split", parents=[common], help="video-grouped k-fold plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", help="fold plan path (default: OUT_DIR/folds.json)")
    p.add_argument("--skip-file-check", action="store_true")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("select-frames", parents=[common], help="strided frame selection")
    p.add_argument("--stride", type=int, required=True)
    p.add_argument("--frame-count", type=int)
    p.add_argument("--frames-dir", help="directory of ordered frame files")
    p.set_defaults(func=cmd_select_frames)

    p = sub.add_parser("bench", parents=[common, models], help="per-layer latency benchmark")
    p.add_argument("--model", choices=("vgg16", "unet"), default="vgg16")
    p.add_argument("--weights", help="LSW1 archive (default: seeded random init)")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("summarize", parents=[models], help="layer table of a model")
    p.add_argument("--model", choices=("vgg16", "unet"), default="vgg16")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("init-weights", parents=[common, models], help="write He-uniform random weights")
    p.add_argument("--model", choices=("vgg16", "unet"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic ultrasound-like dataset")
    p.add_argument("--videos", type=int, default=4)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--size", type=int, default=512)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
