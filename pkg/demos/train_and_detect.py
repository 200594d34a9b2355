"""
Train on base actions, detect a novel one
=========================================

Train the detector on the two base classes of the synthetic set, then run it on
held-out clips of the novel class with the full vocabulary offered. Prints the
video-mAP tables and renders one held-out clip with its detections.

    python demos/train_and_detect.py --epochs 30 --render frames/

A full 30-epoch run takes about four minutes on one CPU core.
"""

import argparse
import time

import torch

from openmixer.cli import render_detections
from openmixer.config import synthetic_run_config
from openmixer.data import SyntheticConfig, build_vocabulary, generate_synthetic
from openmixer.evaluation import EvalProtocol
from openmixer.model import evaluate_detector
from openmixer.training import Trainer, TrainingSet

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=30)
parser.add_argument("--render", default=None, help="directory for rendered frames of one held-out clip")
args = parser.parse_args()

# denormals show up once the softmax saturates; flushing them keeps CPU training fast
torch.set_flush_denormal(True)

ds = generate_synthetic(SyntheticConfig(), seed=0)
cfg = synthetic_run_config(ds.text_codes)
cfg.train.epochs = args.epochs
vocab = build_vocabulary(ds.class_names, ds.prompts, novel=ds.novel_classes)
print(f"base classes {ds.base_classes}, novel {ds.novel_classes}")

# the training set refuses novel annotations, so the novel class is never seen
train_records = ds.records_for("train")
train_set = TrainingSet(train_records, ds.videos, ds.base_classes, ds.novel_classes, cfg.data.keyframe_stride)
trainer = Trainer(cfg, train_set, vocab.subset(ds.base_classes))
start = time.time()
history = trainer.fit()
print(f"trained {args.epochs} epochs in {time.time() - start:.0f}s, final loss {history[-1]['total']:.3f}")

# base classes on the clips the model trained on
report, _ = evaluate_detector(trainer.detector, cfg, train_records, ds.videos, vocab, EvalProtocol("base_only"))
print(report.format_table())

# held-out novel clips, classified against every class
test_records = ds.records_for("test")
report, detections = evaluate_detector(trainer.detector, cfg, test_records, ds.videos, vocab,
                                       EvalProtocol("generalized"))
print(report.format_table())

# where the per-query fusion weights ended up, one stage at a time
for stage, fusion in enumerate(trainer.detector.fusions()):
    lam = fusion.lam.detach()
    print(f"stage {stage}: fusion weight mean {lam.mean():.3f}, range [{lam.min():.3f}, {lam.max():.3f}]")

if args.render:
    record = test_records[0]
    dets = [d for d in detections if d.video_id == record.video_id]
    gt = {}
    for tube in record.tubes:
        for frame, box in tube.boxes.items():
            gt.setdefault(frame, []).append(box)
    paths = render_detections(ds.videos[record.video_id], dets, args.render, gt)
    print(f"rendered {len(paths)} frames of {record.video_id} to {args.render}")
