"""Denoise a jittery sequence of per-frame pose estimates.

Per-frame estimators are noisy: run one on five consecutive frames and the
reconstructed hand trembles even when the true motion is nearly still. The
temporal encoder attends across the window and regresses per-frame angle
values; bone proportions are averaged into a single shared vector (a hand
does not change size between frames), and the root trajectory gets a short
moving average. The result is a sequence with strictly constant bone
lengths and visibly lower jitter, measured here as mean frame-to-frame
joint acceleration.
"""

import os
import tempfile

import numpy as np

from handkin import canonical_hand_topology, gen_poses, gen_sequences
from handkin.config import config_from_dict
from handkin.evaluation import jitter_metric, smooth_one
from handkin.training import (
    load_pose_models,
    load_temporal_model,
    train_denoiser,
    train_temporal,
)

cfg = config_from_dict(
    {
        "train": {
            "epochs": 10,
            "temporal_epochs": 300,
            "batch_size": 32,
            "lr": 4e-3,
            "val_fraction": 0.2,
            "seed": 1,
        },
        "denoiser": {"hidden": 64, "depth": 2, "time_dim": 16},
        "ik_head": {"hidden": 64, "depth": 2},
        "temporal": {"dim": 48, "heads": 2, "layers": 2, "ffn_hidden": 96},
        "schedule": {"train_steps": 50, "sample_steps": 10},
        "data": {"n_poses": 300, "n_sequences": 30, "seq_len": 5, "seed": 4},
    }
)
g = canonical_hand_topology()

out = tempfile.mkdtemp(prefix="handkin_demo_")
_, pose_records = gen_poses(cfg, g)
train_denoiser(cfg, g, pose_records, out)
seq_header, seq_records = gen_sequences(cfg, g)
res = train_temporal(cfg, g, seq_records, out)
print(f"temporal encoder: {res.epochs_run} epochs, best val {res.best_val:.4f}")

_, ik, _, _ = load_pose_models(os.path.join(out, "pose_best"), g)
enc, _ = load_temporal_model(os.path.join(out, "temporal_best"), g)

# one sequence, by hand: observed = true positions + per-frame noise
frames = [r for r in seq_records if r.sequence_id == seq_records[0].sequence_id]
observed = np.stack([r.observed_positions for r in frames])
true = np.stack([r.positions for r in frames])

smoothed, bones = smooth_one(enc, ik, g, observed)
print(f"\nsequence of {len(frames)} frames:")
print(f"  jitter raw:      {jitter_metric(observed):.5f}")
print(f"  jitter true:     {jitter_metric(true):.5f}  (motion floor)")
print(f"  jitter smoothed: {jitter_metric(smoothed):.5f}")

# bone lengths are one shared vector; per-frame variance is exactly zero
per_frame = np.tile(bones, (len(frames), 1))
bone_var = float(np.var(per_frame - per_frame[0], axis=0).max())
print(f"  bone-length variance across frames: {bone_var!r}")

err_raw = np.linalg.norm(observed - true, axis=-1).mean() * 1000
err_s = np.linalg.norm(smoothed - true, axis=-1).mean() * 1000
print(f"  mean joint error: raw {err_raw:.1f} mm, smoothed {err_s:.1f} mm")
print(
    "\nat this toy scale the reconstruction error is dominated by the tiny"
    "\nIK head, so smoothing buys coherence, not absolute accuracy; what it"
    "\nguarantees is the jitter drop above and exactly constant bone lengths."
)
print("(shell equivalent: handkin smooth --pose-checkpoint ... --temporal-checkpoint ...)")
