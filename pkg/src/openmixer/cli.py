"""Command-line entry points: synth, split, train, eval, detect."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_config, save_config, synthetic_run_config
from .data import (SyntheticConfig, build_vocabulary, generate_synthetic, load_annotations, load_detections,
                   load_prompts, load_split, make_split, save_dataset, save_detections, save_split)
from .errors import InputError, OpenMixerError
from .evaluation import EvalProtocol, score_detection_file
from .head import HeadConfig
from .model import Inference, evaluate_detector, external_priors_by_frame
from .training import Trainer, TrainingSet, restore_detector

PROTOCOLS = {"base": "base_only", "novel": "novel_only", "generalized": "generalized"}
PRIOR_FLAGS = {"attention": "attention", "gt": "ground_truth", "random": "random", "external": "external"}
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def configure_torch(deterministic=True):
    """Single-threaded, denormal-free numerics so fixed seeds give identical runs."""
    torch.set_flush_denormal(True)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def read_video(path):
    """Frames from a ``.npy`` array (F x H x W x 3 in [0, 1]) or a directory of images."""
    from PIL import Image

    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise InputError(f"no frames found in {path}")
        return np.stack([np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0 for p in files])
    if path.suffix == ".npy" and path.exists():
        frames = np.load(path)
        if frames.ndim != 4 or frames.shape[0] == 0:
            raise InputError(f"{path}: expected a non-empty F x H x W x 3 array")
        return frames.astype(np.float32)
    raise InputError(f"cannot read video {path}")


def _data_root(cfg):
    if not cfg.data.root:
        raise InputError("config needs data.root")
    return Path(cfg.data.root)


def load_run_data(cfg):
    """(records, split, vocabulary) for a run; prompts default to the template."""
    root = _data_root(cfg)
    records = load_annotations(cfg.data.annotations or root / "annotations.jsonl")
    split = load_split(cfg.data.split or root / "split.json")
    known = sorted({t.label for r in records for t in r.tubes} | set(split.classes))
    prompts = load_prompts(cfg.data.prompts, known) if cfg.data.prompts else None
    vocab = build_vocabulary(split.classes, prompts, cfg.data.template, novel=split.novel)
    return records, split, vocab


def load_record_videos(cfg, records):
    root = _data_root(cfg) / "videos"
    videos = {}
    for r in records:
        npy, folder = root / f"{r.video_id}.npy", root / r.video_id
        videos[r.video_id] = read_video(npy if npy.exists() else folder)
    return videos


def _apply_overrides(cfg: RunConfig, args):
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    if getattr(args, "prior_source", None):
        cfg.model.prior_source = PRIOR_FLAGS[args.prior_source]
    if getattr(args, "condition_mode", None):
        cfg.head.condition_mode = args.condition_mode
    if getattr(args, "fusion_mode", None):
        cfg.head.fusion_mode = args.fusion_mode
    if getattr(args, "fixed_lambda", None) is not None:
        cfg.head.fixed_lambda = args.fixed_lambda
    if getattr(args, "training_mode", None):
        cfg.training_mode = args.training_mode
    if getattr(args, "protocol", None):
        cfg.eval.protocol = PROTOCOLS[args.protocol]
    if getattr(args, "person_threshold", None) is not None:
        cfg.eval.person_threshold = args.person_threshold
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "data", None):
        cfg.data.root = args.data
    cfg.head = HeadConfig(**vars(cfg.head))
    cfg.validate()
    return cfg


def cmd_synth(args):
    syn = SyntheticConfig(size=args.size, frames_per_video=args.frames, train_videos=args.train_videos,
                          test_videos=args.test_videos, test_classes=args.test_classes)
    ds = generate_synthetic(syn, seed=args.seed)
    out = Path(args.out)
    save_dataset(ds, out)
    cfg = synthetic_run_config(ds.text_codes, root=out, seed=args.seed)
    save_config(cfg, out / "config.yaml")
    print(f"wrote {len(ds.records)} videos to {out} (config: {out / 'config.yaml'})")
    return 0


def cmd_split(args):
    if args.classes:
        classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    elif args.annotations:
        classes = sorted({t.label for r in load_annotations(args.annotations) for t in r.tubes})
    else:
        raise InputError("give --classes or --annotations")
    split = make_split(classes, args.ratio, args.seed, args.dataset)
    save_split(split, args.out)
    print(f"{len(split.base)} base / {len(split.novel)} novel -> {args.out}")
    return 0


def cmd_train(args):
    cfg = _apply_overrides(load_config(args.config), args)
    configure_torch(cfg.deterministic)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.train.checkpoint_dir = str(out)
    cfg.train.log_path = str(out / "train_log.jsonl")
    records, split, vocab = load_run_data(cfg)
    train_records = [r for r in records if r.split_tag == "train"]
    videos = load_record_videos(cfg, train_records)
    train_set = TrainingSet(train_records, videos, split.base, split.novel, cfg.data.keyframe_stride)
    trainer = Trainer(cfg, train_set, vocab.subset(split.base))
    if args.resume:
        trainer.resume(args.resume)
    save_config(cfg, out / "config.yaml")
    trainer.fit(callback=lambda e, loss, dt: print(f"epoch {e}: loss {loss:.4f} ({dt:.1f}s)", flush=True))
    print(f"checkpoint: {out / 'last.pt'}")
    return 0


def _protocol(cfg):
    e = cfg.eval
    return EvalProtocol(e.protocol, e.iou_threshold, e.person_threshold, e.temporal_only)


def _write_report(report, path):
    print(report.format_table())
    if path:
        report.to_json(path)


def cmd_eval(args):
    if args.detections:
        if not args.config:
            raise InputError("scoring a detection file needs --config for the annotations and split")
        cfg = _apply_overrides(load_config(args.config), args)
        records, split, _ = load_run_data(cfg)
        records = [r for r in records if args.split_tag in (None, "all") or r.split_tag == args.split_tag]
        classes = _protocol(cfg).evaluated_classes(split.base, split.novel)
        gt = [t for r in records for t in r.gt_tubes() if t.label in classes]
        report = score_detection_file(args.detections, gt, _protocol(cfg), split.base, split.novel,
                                      cfg.eval.continuity_iou)
        _write_report(report, args.report)
        return 0
    if not args.checkpoint:
        raise InputError("give --checkpoint or --detections")
    detector, cfg = restore_detector(args.checkpoint)
    if args.config:
        ckpt_cfg = cfg
        cfg = load_config(args.config)
        cfg.head, cfg.backend = ckpt_cfg.head, ckpt_cfg.backend
    cfg = _apply_overrides(cfg, args)
    configure_torch(cfg.deterministic)
    records, split, vocab = load_run_data(cfg)
    records = [r for r in records if args.split_tag in (None, "all") or r.split_tag == args.split_tag]
    videos = load_record_videos(cfg, records)
    external = None
    if cfg.model.prior_source == "external":
        if not cfg.model.external_boxes:
            raise InputError("external priors need model.external_boxes")
        external = external_priors_by_frame(load_detections(cfg.model.external_boxes), records)
    report, detections = evaluate_detector(detector, cfg, records, videos, vocab, _protocol(cfg), external)
    if args.save_detections:
        save_detections(detections, args.save_detections)
    _write_report(report, args.report)
    return 0


def render_detections(frames, detections, out_dir, gt_boxes=None):
    """Write one PNG per frame: detections in blue with "class: score", ground truth in yellow."""
    from PIL import Image, ImageDraw

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_frame = {}
    for d in detections:
        by_frame.setdefault(d.frame_index, []).append(d)
    paths = []
    for k, frame in enumerate(frames):
        img = Image.fromarray((np.clip(frame, 0, 1) * 255).astype(np.uint8)).convert("RGB")
        draw = ImageDraw.Draw(img)
        for box in (gt_boxes or {}).get(k, []):
            draw.rectangle(box, outline=(255, 220, 0))
        for d in by_frame.get(k, []):
            draw.rectangle(d.box, outline=(40, 90, 255))
            draw.text((d.box[0] + 1, d.box[1] + 1), f"{d.label}: {d.score:.2f}", fill=(40, 90, 255))
        path = out_dir / f"frame_{k:05d}.png"
        img.save(path)
        paths.append(path)
    return paths


def cmd_detect(args):
    detector, cfg = restore_detector(args.checkpoint)
    cfg = _apply_overrides(cfg, args)
    configure_torch(cfg.deterministic)
    if cfg.model.prior_source in ("ground_truth", "external"):
        raise InputError("detect runs without annotations; use attention or random priors")
    frames = read_video(args.video)
    if args.classes:
        names = [c.strip() for c in args.classes.split(",") if c.strip()]
        prompts = load_prompts(args.prompts, names) if args.prompts else None
        vocab = build_vocabulary(names, prompts, cfg.data.template)
    else:
        _, _, vocab = load_run_data(cfg)
        protocol = _protocol(cfg)
        base = [c.name for c in vocab.classes if not c.is_novel]
        novel = [c.name for c in vocab.classes if c.is_novel]
        vocab = vocab.subset(protocol.evaluated_classes(base, novel))
    video_id = args.video_id or Path(args.video).stem
    detections = Inference(detector, cfg, vocab).detect_video(frames, video_id)
    save_detections(detections, args.out)
    print(f"{len(detections)} detections -> {args.out}")
    if args.render:
        render_detections(frames, detections, args.render)
    return 0


def _common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="YAML run config")
    p.add_argument("--data", help="dataset root (overrides data.root)")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", help="single-threaded deterministic numerics")
    p.add_argument("--protocol", choices=sorted(PROTOCOLS))
    p.add_argument("--prior-source", choices=sorted(PRIOR_FLAGS))
    p.add_argument("--condition-mode", choices=["pre_video", "post_video", "pre_text", "none"])
    p.add_argument("--fusion-mode", choices=["dynamic", "fixed"])
    p.add_argument("--fixed-lambda", type=float)
    p.add_argument("--training-mode", choices=["e2e", "zsr_tl"])
    p.add_argument("--person-threshold", type=float, help="keep queries whose person score exceeds this")


def build_parser():
    parser = argparse.ArgumentParser(prog="openmixer", description="Open-vocabulary action detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic moving-shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--train-videos", type=int, default=20)
    p.add_argument("--test-videos", type=int, default=10)
    p.add_argument("--test-classes", choices=["novel", "all"], default="novel")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="seeded base/novel class split")
    p.add_argument("--classes", help="comma-separated class names")
    p.add_argument("--annotations", help="take class names from an annotation file")
    p.add_argument("--ratio", default="50/50")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", default="custom")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train on base classes")
    _common(p)
    p.add_argument("--out", required=True, help="directory for checkpoints and the step log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="video mAP of a checkpoint or a detection file")
    _common(p, config_required=False)
    p.add_argument("--checkpoint")
    p.add_argument("--detections", help="score this detection file instead of running the model")
    p.add_argument("--split-tag", default="test", help="records to evaluate (train, test or all)")
    p.add_argument("--report", help="write the metrics as JSON here")
    p.add_argument("--save-detections", help="write the per-frame detections here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="detect actions in one video")
    _common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True, help=".npy frame array or directory of images")
    p.add_argument("--video-id")
    p.add_argument("--classes", help="comma-separated vocabulary (default: the run's split)")
    p.add_argument("--prompts", help="prompt file for --classes")
    p.add_argument("--out", required=True, help="detection CSV")
    p.add_argument("--render", help="directory for annotated frames")
    p.set_defaults(func=cmd_detect)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OpenMixerError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
