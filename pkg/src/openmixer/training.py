"""Training loop: base-class-only sample set, AdamW with gradient clipping, per-step JSON
logs, checkpoints and deterministic resume.
"""
from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backend import make_backend, stable_seed
from .config import RunConfig
from .criterion import CostWeights, total_loss
from .data import sample_frames
from .errors import ConfigError, InputError, ValidationError
from .model import Detector, make_batch, prior_boxes

CHECKPOINT_SCHEMA = 1


@dataclass
class TrainingSample:
    video_id: str
    keyframe: int
    target: object  # criterion.Target


class TrainingSet:
    """Keyframe samples drawn from base-class videos only.

    ``label_reads`` counts every tube label consumed while building targets, so tests
    can assert that no novel-class annotation was ever read.
    """

    def __init__(self, records, videos, base_classes, novel_classes=(), keyframe_stride=1):
        self.base_classes = list(base_classes)
        self.novel_classes = list(novel_classes)
        novel = set(novel_classes)
        offenders = sorted({f"{r.video_id}:{t.label}" for r in records for t in r.tubes if t.label in novel})
        if offenders:
            raise ValidationError("novel-class annotations in the training set", offenders)
        unknown = sorted({t.label for r in records for t in r.tubes} - set(self.base_classes))
        if unknown:
            raise ValidationError("training labels missing from the base vocabulary", unknown)
        self.label_reads = Counter()
        self.videos = videos
        self.samples = []
        for r in records:
            if r.video_id not in videos:
                raise InputError(f"no frames for training video {r.video_id}")
            for f in r.annotated_frames()[::keyframe_stride]:
                for t in r.tubes:
                    if f in t.boxes:
                        self.label_reads[t.label] += 1
                self.samples.append(TrainingSample(r.video_id, f, r.keyframe_target(f, self.base_classes)))
        if not self.samples:
            raise InputError("training set is empty")

    @property
    def novel_reads(self):
        return sum(self.label_reads[c] for c in self.novel_classes)

    def __len__(self):
        return len(self.samples)


def apply_training_mode(config: RunConfig):
    """zsr_tl pins every stage's fusion weight to 1 (pure zero-shot recognition)."""
    if config.training_mode == "zsr_tl":
        config.head.fusion_mode = "fixed"
        config.head.fixed_lambda = 1.0
    return config


class Trainer:
    def __init__(self, config: RunConfig, train_set: TrainingSet, vocabulary, detector=None):
        self.config = apply_training_mode(config)
        self.train_set = train_set
        self.backend = make_backend(config.backend)
        if vocabulary.text_features is None:
            vocabulary.text_features = self.backend.encode_text(vocabulary)
        if vocabulary.names != train_set.base_classes:
            raise ConfigError("training vocabulary must list exactly the base classes, in order")
        self.vocabulary = vocabulary
        torch.manual_seed(config.seed)
        self.detector = detector or Detector(config.head, config.backend.dim)
        if config.training_mode == "zsr_tl":
            for fusion in self.detector.fusions():
                fusion.requires_grad_(False)
        params = [p for p in self.detector.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(params, lr=config.train.lr, weight_decay=config.train.weight_decay)
        self.cost_weights = CostWeights(config.train.cost_score, config.train.cost_l1, config.train.cost_giou)
        self.epoch = 0
        self.step = 0
        self.history = []
        self._bundles = {}

    def bundle(self, sample):
        key = (sample.video_id, sample.keyframe)
        if key not in self._bundles:
            clip = sample_frames(self.train_set.videos[sample.video_id], sample.keyframe,
                                 self.config.data.clip_len, self.config.data.frame_stride)
            self._bundles[key] = self.backend.encode_clip(clip, self.vocabulary, self.vocabulary.text_features)
        return self._bundles[key]

    def priors(self, sample, bundle):
        cfg = self.config
        seed = stable_seed(cfg.seed, "train-prior", sample.video_id, sample.keyframe, self.epoch)
        gt = sample.target.boxes.numpy() if cfg.model.prior_source == "ground_truth" else None
        ext = None
        if cfg.model.prior_source == "external":
            # training has no detector output to ingest; annotated boxes stand in
            ext = np.concatenate([sample.target.boxes.numpy(), np.ones((len(sample.target), 1))], axis=1)
        return prior_boxes(bundle, cfg.head.num_queries, cfg.model, gt, ext, seed)

    def _lr(self):
        t = self.config.train
        if t.lr_schedule == "step" and self.epoch >= t.lr_drop_epoch:
            return t.lr * 0.1
        return t.lr

    def train_epoch(self, log=None):
        cfg = self.config
        order = np.random.default_rng([cfg.seed, self.epoch]).permutation(len(self.train_set))
        lr = self._lr()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.detector.train()
        losses = []
        bs = cfg.train.batch_size
        for start in range(0, len(order), bs):
            samples = [self.train_set.samples[i] for i in order[start:start + bs]]
            bundles = [self.bundle(s) for s in samples]
            batch = make_batch(bundles, [self.priors(s, b) for s, b in zip(samples, bundles)])
            states = self.detector(batch)
            breakdown = total_loss(states, [s.target for s in samples], cfg.train.w1, cfg.train.w2,
                                   self.cost_weights)
            self.optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            torch.nn.utils.clip_grad_norm_(self.detector.parameters(), cfg.train.grad_clip)
            self.optimizer.step()
            record = {"step": self.step, "epoch": self.epoch, "lr": lr, **breakdown.as_floats()}
            self.history.append(record)
            losses.append(record["total"])
            if log is not None:
                log.write(json.dumps(record) + "\n")
            self.step += 1
        self.epoch += 1
        return float(np.mean(losses))

    def fit(self, epochs=None, callback=None):
        cfg = self.config
        target = cfg.train.epochs if epochs is None else epochs
        log = open(cfg.train.log_path, "a") if cfg.train.log_path else None
        try:
            while self.epoch < target:
                t0 = time.perf_counter()
                mean_loss = self.train_epoch(log)
                if callback is not None:
                    callback(self.epoch, mean_loss, time.perf_counter() - t0)
                ckpt_dir = cfg.train.checkpoint_dir
                if ckpt_dir and (self.epoch % cfg.train.checkpoint_every == 0 or self.epoch == target):
                    Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
                    self.save_checkpoint(Path(ckpt_dir) / f"epoch_{self.epoch:03d}.pt")
                    self.save_checkpoint(Path(ckpt_dir) / "last.pt")
        finally:
            if log is not None:
                log.close()
        return self.history

    def save_checkpoint(self, path):
        save_checkpoint(path, self.detector, self.config, self.epoch, self.optimizer, self.step)

    def resume(self, path):
        state = load_checkpoint(path)
        self.detector.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.epoch = state["epoch"]
        self.step = state.get("step", 0)
        torch.set_rng_state(state["torch_rng"])


def save_checkpoint(path, detector, config, epoch, optimizer=None, step=0):
    torch.save({
        "schema_version": CHECKPOINT_SCHEMA,
        "model": detector.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "config": config.to_dict(),
        "epoch": epoch,
        "step": step,
        "torch_rng": torch.get_rng_state(),
    }, path)


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("schema_version") != CHECKPOINT_SCHEMA:
        raise InputError(f"{path}: unsupported checkpoint schema {state.get('schema_version')}")
    return state


def restore_detector(path):
    """Rebuild (detector, config) from a checkpoint."""
    state = load_checkpoint(path)
    config = RunConfig.from_dict(state["config"])
    detector = Detector(config.head, config.backend.dim)
    detector.load_state_dict(state["model"])
    detector.eval()
    return detector, config
