"""Command-line frontend.

Every command accepts ``--config FILE`` (UTF-8 ``key=value``) and
``--set key=value``; explicit flags win over ``--set``, which wins over the
file. Each command writes the fully resolved configuration next to its
outputs so a run can be repeated with ``--config <run>/config.cfg``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor
from .config import ConfigError, coerce, dump_kv, format_value, read_kv
from .data import (DatasetError, SceneSpec, generate_images, generate_video, read_dataset, read_video_set,
                   write_dataset, write_video_set)
from .evaluation import class_curve, evaluate, write_pr_csv, write_pr_svg
from .model import Model, ModelConfig, build, forward
from .postprocess import Detection, detect_batch, read_detections, write_detections
from .temporal import KeyFrameSchedule, PostConfig, stream_many, sweep, write_sweep_csv, write_sweep_svg
from .training import TrainConfig, train

logger = logging.getLogger("drnet")

CONFIG_NAME = "config.cfg"


@dataclasses.dataclass(frozen=True)
class GenConfig:
    images: int = 500
    videos: int = 0
    frames: int = 32


@dataclasses.dataclass(frozen=True)
class InferConfig:
    score_threshold: float = 0.01
    nms_threshold: float = 0.45
    top_k: int = 200
    batch_size: int = 16
    k: int = 1
    e: float = 1.0
    offsets_from_scaled: bool = False
    soft_on_key: bool = True


@dataclasses.dataclass(frozen=True)
class SweepConfig:
    ks: tuple = (1, 2, 4, 8)
    es: tuple = (1.0, 0.75, 0.5)
    timing_repeats: int = 1
    # wall-clock timing is the one non-reproducible column; off writes nan
    timing: bool = True


class CliError(Exception):
    pass


# ------------------------------------------------------------------ config resolution

def _defaults(classes) -> Dict[str, Tuple[object, object]]:
    """key -> (dataclass, default) over the given config classes."""
    out = {}
    for cls in classes:
        for f in dataclasses.fields(cls):
            if f.name in out:
                continue
            out[f.name] = (cls, f.default)
    return out


def resolve(classes, config_path: Optional[str], sets: Sequence[str], flags: Dict[str, object]):
    """Merge file, ``--set`` pairs and flags; return one instance per class."""
    raw: Dict[str, str] = {}
    if config_path:
        raw.update(read_kv(config_path))
    for item in sets or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    for key, value in flags.items():
        if value is not None:
            raw[key] = format_value(value)
    known = _defaults(classes)
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}; valid keys: {sorted(known)}")
    out = []
    for cls in classes:
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in raw:
                try:
                    kwargs[f.name] = coerce(raw[f.name], f.type, f.default)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad value for {f.name}: {raw[f.name]!r} ({exc})") from exc
        try:
            out.append(cls(**kwargs))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return out


def echo_config(out_dir: Path, objs) -> None:
    values: Dict[str, object] = {}
    for obj in objs:
        for f in dataclasses.fields(obj):
            values.setdefault(f.name, getattr(obj, f.name))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_NAME).write_text(dump_kv(values), encoding="utf-8")


def _int_list(s: str) -> tuple:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _float_list(s: str) -> tuple:
    return tuple(float(p) for p in s.split(",") if p.strip())


# ------------------------------------------------------------------ data helpers

def load_frames(root) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray], List[int]]:
    """Images, boxes, labels and clip lengths (one clip per image for still sets)."""
    root = Path(root)
    manifest = root / "manifest.json"
    if not manifest.exists():
        raise CliError(f"{root}: not a dataset directory (no manifest.json)")
    kind = json.loads(manifest.read_text(encoding="utf-8")).get("kind")
    if kind == "videos":
        videos = read_video_set(root)
        frames = np.concatenate([v.frames for v in videos])
        boxes = [b for v in videos for b in v.boxes]
        labels = [l for v in videos for l in v.labels]
        return frames, boxes, labels, [len(v) for v in videos]
    ds = read_dataset(root)
    return ds.images, ds.boxes, ds.labels, [1] * len(ds)


def load_model(path) -> Model:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.afw"
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    return Model.load(path)


def run_detection(model: Model, root, infer: InferConfig) -> Tuple[List[Detection], list, list]:
    post = PostConfig(infer.score_threshold, infer.nms_threshold, infer.top_k)
    root = Path(root)
    kind = json.loads((root / "manifest.json").read_text(encoding="utf-8")).get("kind")
    dets: List[Detection] = []
    if kind == "videos" and model.config.is_pair:
        videos = read_video_set(root)
        per_clip = stream_many(model, videos, KeyFrameSchedule(infer.k, infer.e), post,
                               infer.offsets_from_scaled, infer.soft_on_key)[0]
        dets = [d for clip in per_clip for frame in clip for d in frame]
        return dets, [b for v in videos for b in v.boxes], [l for v in videos for l in v.labels]
    images, boxes, labels, _ = load_frames(root)
    for i in range(0, len(images), infer.batch_size):
        _, det = forward(model, Tensor(images[i : i + infer.batch_size]))
        for frame_dets in detect_batch(det, post.score_threshold, post.nms_threshold, post.top_k, first_frame=i):
            dets.extend(frame_dets)
    return dets, boxes, labels


def write_eval(out_dir: Path, dets, boxes, labels, num_classes: int) -> Dict[str, object]:
    from .data import CLASSES

    result = evaluate(dets, boxes, labels, num_classes)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = {}
    for c in range(num_classes):
        curve = class_curve(dets, boxes, labels, c)
        if curve is None:
            continue
        name = CLASSES[c] if c < len(CLASSES) else f"class{c}"
        curves[name] = curve
        write_pr_csv(out_dir / f"pr_{name}.csv", curve)
    if curves:
        write_pr_svg(out_dir / "pr.svg", curves)
    summary = {"map": result["map"], "ap": {str(k): v for k, v in result["ap"].items()}}
    (out_dir / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    spec, gen = resolve([SceneSpec, GenConfig], args.config, args.set,
                        {"seed": args.seed, "images": args.images, "videos": args.videos, "frames": args.frames})
    out = Path(args.out)
    echo_config(out, [spec, gen])
    if gen.images:
        images, boxes, labels = generate_images(spec, gen.images)
        write_dataset(out, images, boxes, labels, spec)
    if gen.videos:
        videos = [generate_video(spec, gen.frames, i) for i in range(gen.videos)]
        write_video_set(out / "videos", videos, spec)
    logger.info("wrote %d images and %d videos to %s", gen.images, gen.videos, out)
    return 0


def _ablation_flags(args) -> Dict[str, object]:
    flags: Dict[str, object] = {"variant": args.variant, "feature_refine": args.feature_refine}
    if args.no_feature_refine:
        flags["feature_refine"] = "none"
    if args.no_deform_head:
        flags["deformable_head"] = False
    if args.head == "single":
        flags["head_paths"] = ((3, 1),)
    elif args.head == "multi":
        flags["head_paths"] = ((3, 1), (5, 1))
    return flags


def cmd_train(args) -> int:
    flags = _ablation_flags(args)
    flags.update({"steps": args.steps, "seed": args.seed, "lr": args.lr, "batch_size": args.batch_size})
    mcfg, tcfg = resolve([ModelConfig, TrainConfig], args.config, args.set, flags)
    images, boxes, labels, _ = load_frames(args.data)
    if images.shape[1:] != (mcfg.in_channels, mcfg.input_size, mcfg.input_size):
        raise CliError(f"dataset images have shape {images.shape[1:]}, model expects "
                       f"{(mcfg.in_channels, mcfg.input_size, mcfg.input_size)}")
    out = Path(args.out)
    echo_config(out, [mcfg, tcfg])
    model = build(mcfg, tcfg.seed)

    def progress(step, parts):
        logger.info("step %d loss %.4f (pos %d)", step, parts.total, parts.n_odm)

    train(model, images, boxes, labels, tcfg, out / "metrics.csv", progress)
    model.save(out / "checkpoint.afw")
    logger.info("saved %s", out / "checkpoint.afw")
    return 0


def _infer_flags(args) -> Dict[str, object]:
    return {"k": getattr(args, "k", None), "e": getattr(args, "e", None)}


def cmd_detect(args) -> int:
    (infer,) = resolve([InferConfig], args.config, args.set, _infer_flags(args))
    model = load_model(args.checkpoint)
    dets, _, _ = run_detection(model, args.data, infer)
    out = Path(args.out)
    echo_config(out, [infer])
    write_detections(out / "detections.jsonl", dets)
    logger.info("wrote %d detections", len(dets))
    return 0


def cmd_eval(args) -> int:
    (infer,) = resolve([InferConfig], args.config, args.set, _infer_flags(args))
    out = Path(args.out)
    if args.detections:
        if not Path(args.detections).exists():
            raise CliError(f"detections file not found: {args.detections}")
        dets = read_detections(args.detections)
        _, boxes, labels, _ = load_frames(args.data)
        num_classes = args.num_classes
    elif args.checkpoint:
        model = load_model(args.checkpoint)
        dets, boxes, labels = run_detection(model, args.data, infer)
        num_classes = model.config.num_classes
        echo_config(out, [infer])
        write_detections(out / "detections.jsonl", dets)
    else:
        raise CliError("eval needs --checkpoint or --detections")
    result = write_eval(out, dets, boxes, labels, num_classes)
    print(f"mAP {result['map']:.6f}")
    for c, ap in result["ap"].items():
        print(f"AP[{c}] {'n/a' if ap is None else f'{ap:.6f}'}")
    return 0


def cmd_sweep(args) -> int:
    infer, scfg = resolve([InferConfig, SweepConfig], args.config, args.set,
                          {"ks": args.k, "es": args.e, "timing_repeats": args.timing_repeats,
                           "timing": False if args.no_timing else None})
    model = load_model(args.checkpoint)
    if not model.config.is_pair:
        raise CliError(f"sweep needs a trnet/tdrnet checkpoint, got {model.config.variant}")
    videos = read_video_set(args.data)
    post = PostConfig(infer.score_threshold, infer.nms_threshold, infer.top_k)
    rows = sweep(model, videos, scfg.ks, scfg.es, post, infer.offsets_from_scaled, scfg.timing_repeats,
                 infer.soft_on_key, scfg.timing)
    out = Path(args.out)
    echo_config(out, [infer, scfg])
    write_sweep_csv(out / "sweep.csv", rows)
    write_sweep_svg(out / "sweep.svg", rows, f"{model.config.variant}: mAP vs k")
    for r in rows:
        print(f"k={r.k} e={r.e:g} mAP={r.map:.4f} rg={r.rg_calls} rd={r.rd_calls} ms/frame={r.ms_per_frame:.2f}")
    return 0


def cmd_export_offsets(args) -> int:
    from .deform import export_sampling_centers
    from .model import forward_drnet, forward_rg

    model = load_model(args.checkpoint)
    cfg = model.config
    if not cfg.uses_offsets:
        raise CliError(f"model {cfg.variant} has no sampling offsets to export")
    if not 0 <= args.path < len(cfg.head_paths):
        raise CliError(f"path index {args.path} out of range for {len(cfg.head_paths)} paths")
    images, _, _, _ = load_frames(args.data)
    if not 0 <= args.index < len(images):
        raise CliError(f"image index {args.index} out of range for {len(images)} images")
    image = Tensor(images[args.index : args.index + 1])
    state = forward_rg(model, image) if cfg.is_pair else forward_drnet(model, image)[0]
    offsets = [level[args.path].data for level in state.dp]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = export_sampling_centers(out, offsets, list(cfg.strides), cfg.head_paths[args.path][0])
    logger.info("wrote %d sampling centers to %s", n, out)
    return 0


# ------------------------------------------------------------------ parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drnet", description="Dual refinement detectors on synthetic shapes")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic image and/or video dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--images", type=int)
    p.add_argument("--videos", type=int)
    p.add_argument("--frames", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=["drnet", "ssd4s", "trnet", "tdrnet"])
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--feature-refine", choices=["anchor", "feature", "none"])
    p.add_argument("--no-feature-refine", action="store_true", help="zero sampling offsets")
    p.add_argument("--no-deform-head", action="store_true", help="plain convolution heads")
    heads = p.add_mutually_exclusive_group()
    heads.add_argument("--single-head", dest="head", action="store_const", const="single")
    heads.add_argument("--multi-head", dest="head", action="store_const", const="multi")
    p.set_defaults(func=cmd_train, head=None)

    for name, func, helptext in (("detect", cmd_detect, "write detections for a dataset"),
                                 ("eval", cmd_eval, "AP@0.5 per class and mAP")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--k", type=int, help="key frame duration for video sets")
        p.add_argument("--e", type=float, help="soft coefficient for video sets")
        if name == "eval":
            p.add_argument("--checkpoint")
            p.add_argument("--detections", help="evaluate a saved detections file instead of a model")
            p.add_argument("--num-classes", type=int, default=3)
        else:
            p.add_argument("--checkpoint", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="mAP and cost over key frame duration and soft coefficient")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="video set directory")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=_int_list)
    p.add_argument("--e", type=_float_list)
    p.add_argument("--timing-repeats", type=int)
    p.add_argument("--no-timing", action="store_true", help="leave ms_per_frame as nan for byte-stable CSVs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-offsets", help="CSV of original and refined sampling centers")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--path", type=int, default=0, help="detection path whose offsets are exported")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_offsets)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
