"""
Where the priors come from
==========================

Encode one held-out synthetic clip, match it to a class prompt, and look at the
patch-text attention map that places the initial query boxes. Writes a PNG with
the keyframe, the attention map and the prior centres side by side.

    python demos/priors_from_attention.py --out attention.png
"""

import argparse

import numpy as np
from PIL import Image, ImageDraw

from openmixer.backend import make_backend
from openmixer.config import synthetic_run_config
from openmixer.data import SyntheticConfig, build_vocabulary, generate_synthetic, sample_frames
from openmixer.prior import attention_map, prematch_text, sample_prior_locations

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="attention.png")
parser.add_argument("--queries", type=int, default=20)
args = parser.parse_args()

# a small synthetic set; the held-out clips show the novel class only
ds = generate_synthetic(SyntheticConfig(), seed=0)
cfg = synthetic_run_config(ds.text_codes)
vocab = build_vocabulary(ds.class_names, ds.prompts, novel=ds.novel_classes)
backend = make_backend(cfg.backend)

record = ds.records_for("test")[0]
keyframe = record.frame_count // 2
clip = sample_frames(ds.videos[record.video_id], keyframe, cfg.data.clip_len)
bundle = backend.encode_clip(clip, vocab)

# the video feature picks one class prompt before any training happens
index, _ = prematch_text(bundle.video_feature, bundle.text_features)
print(f"clip {record.video_id}: true class {record.tubes[0].label}, matched prompt {vocab.classes[index].name}")

# attention on the keyframe, and the top cells that become prior box centres
attn = attention_map(bundle)
centres = sample_prior_locations(attn, args.queries)
gx1, gy1, gx2, gy2 = record.tubes[0].boxes[keyframe]
inside = [(gx1 <= cx * record.width <= gx2) and (gy1 <= cy * record.height <= gy2) for cx, cy in centres]
print(f"{sum(inside)}/{len(centres)} prior centres fall inside the annotated actor")

# render: keyframe | attention | keyframe with prior centres and the annotated box
frame = ds.videos[record.video_id][keyframe]
scale = 4
size = (record.width * scale, record.height * scale)
left = Image.fromarray((frame * 255).astype(np.uint8)).resize(size, Image.NEAREST)
key = attn.keyframe.numpy()
key = (key - key.min()) / max(float(key.max() - key.min()), 1e-12)
middle = Image.fromarray((key * 255).astype(np.uint8)).resize(size, Image.NEAREST).convert("RGB")
right = left.copy()
draw = ImageDraw.Draw(right)
draw.rectangle([v * scale for v in (gx1, gy1, gx2, gy2)], outline=(255, 220, 0))
for cx, cy in centres:
    x, y = cx * size[0], cy * size[1]
    draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=(255, 60, 60))

panel = Image.new("RGB", (3 * size[0], size[1]))
for i, img in enumerate((left, middle, right)):
    panel.paste(img, (i * size[0], 0))
panel.save(args.out)
print(f"wrote {args.out}")
