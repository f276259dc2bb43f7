"""Synthetic dataset generation and JSONL persistence.

Records store raw pose parameters, FK positions in the camera frame, and the
conditioning feature vector, each reproducible from the stored seeds. The
left-hand convention is an IO-level flag: a flipped dataset holds mirrored
positions/features on disk, and loading mirrors them back, so every consumer
works in right-hand space.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, config_hash
from .errors import ValidationError
from .geometry import Camera
from .kinematics import fk_core
from .models import synth_features
from .skeleton import (
    PoseParams,
    SkeletonGraph,
    pose_from_dict,
    pose_to_dict,
    skeleton_hash,
)


@dataclass
class DatasetRecord:
    index: int
    feature_seed: int
    params: PoseParams
    positions: np.ndarray  # (N, 3) camera frame
    features: np.ndarray  # (2N,)
    sequence_id: int | None = None
    frame_index: int | None = None
    observed_positions: np.ndarray | None = None  # per-frame noisy estimates


def camera_from_config(cfg: RunConfig) -> Camera:
    c = cfg.camera
    k = np.array([[c.fx, 0.0, c.cx], [0.0, c.fy, c.cy], [0.0, 0.0, 1.0]])
    return Camera(k, np.eye(3), np.zeros(3))


def _feature_seed(base: int, index: int) -> int:
    return base * 1_000_003 + index


def _draw_params(cfg: RunConfig, g: SkeletonGraph, rng, n: int):
    d = cfg.data
    root_raw = np.eye(3) + d.rotation_spread * rng.standard_normal((n, 3, 3))
    offset = np.empty((n, 3))
    offset[:, :2] = d.lateral_spread * rng.standard_normal((n, 2))
    offset[:, 2] = d.depth_mean + d.depth_spread * rng.uniform(-1, 1, size=n)
    angles = d.angle_scale * rng.standard_normal((n, g.num_angles))
    props = rng.standard_normal((n, g.num_props))
    anchor = rng.uniform(0.08, 0.12, size=n)
    return root_raw, offset, angles, props, anchor


def _flip_positions(pos: np.ndarray) -> np.ndarray:
    out = np.array(pos, dtype=np.float64)
    out[..., 0] *= -1.0
    return out


def _flip_features(f: np.ndarray) -> np.ndarray:
    out = np.array(f, dtype=np.float64)
    out[..., 0::2] *= -1.0
    return out


def gen_poses(cfg: RunConfig, g: SkeletonGraph) -> tuple[dict, list[DatasetRecord]]:
    d = cfg.data
    cam = camera_from_config(cfg)
    rng = np.random.default_rng(d.seed)
    n = d.n_poses
    root_raw, offset, angles, props, anchor = _draw_params(cfg, g, rng, n)
    positions = np.asarray(fk_core(g, root_raw, offset, angles, props, anchor))
    records = []
    for i in range(n):
        fs = _feature_seed(d.seed, i)
        feats = synth_features(
            positions[i], cam, d.noise_sigma, np.random.default_rng(fs)
        )
        records.append(
            DatasetRecord(
                index=i,
                feature_seed=fs,
                params=PoseParams(
                    root_raw[i], offset[i], angles[i], props[i], float(anchor[i])
                ),
                positions=positions[i],
                features=feats,
            )
        )
    header = {
        "kind": "poses",
        "count": n,
        "seed": d.seed,
        "noise_sigma": d.noise_sigma,
        "flip_x": d.flip_x,
        "config_hash": config_hash(cfg),
        "skeleton_hash": skeleton_hash(g),
    }
    return header, records


def gen_sequences(cfg: RunConfig, g: SkeletonGraph) -> tuple[dict, list[DatasetRecord]]:
    """Kinematically coherent sequences: stationary AR(1) walks in raw angles.

    Root pose, proportions, and anchor length stay constant inside a sequence;
    per-frame noisy position estimates are attached for smoothing experiments.
    """
    d = cfg.data
    cam = camera_from_config(cfg)
    rng = np.random.default_rng(d.seed + 1)
    phi = d.walk_smoothing
    records = []
    idx = 0
    for s in range(d.n_sequences):
        root_raw, offset, _, props, anchor = _draw_params(cfg, g, rng, 1)
        state = d.angle_scale * rng.standard_normal(g.num_angles)
        frames = []
        for _ in range(d.seq_len):
            frames.append(state.copy())
            state = phi * state + np.sqrt(1 - phi**2) * d.angle_scale * rng.standard_normal(
                g.num_angles
            )
        angles = np.stack(frames)
        positions = np.asarray(
            fk_core(
                g,
                np.repeat(root_raw, d.seq_len, axis=0),
                np.repeat(offset, d.seq_len, axis=0),
                angles,
                np.repeat(props, d.seq_len, axis=0),
                np.repeat(anchor, d.seq_len),
            )
        )
        noise = d.estimate_noise * float(anchor[0]) * rng.standard_normal(positions.shape)
        observed = positions + noise
        for t in range(d.seq_len):
            fs = _feature_seed(d.seed + 1, idx)
            feats = synth_features(
                positions[t], cam, d.noise_sigma, np.random.default_rng(fs)
            )
            records.append(
                DatasetRecord(
                    index=idx,
                    feature_seed=fs,
                    params=PoseParams(
                        root_raw[0], offset[0], angles[t], props[0], float(anchor[0])
                    ),
                    positions=positions[t],
                    features=feats,
                    sequence_id=s,
                    frame_index=t,
                    observed_positions=observed[t],
                )
            )
            idx += 1
    header = {
        "kind": "sequences",
        "count": len(records),
        "n_sequences": d.n_sequences,
        "seq_len": d.seq_len,
        "seed": d.seed + 1,
        "noise_sigma": d.noise_sigma,
        "estimate_noise": d.estimate_noise,
        "flip_x": d.flip_x,
        "config_hash": config_hash(cfg),
        "skeleton_hash": skeleton_hash(g),
    }
    return header, records


def _record_to_dict(r: DatasetRecord, flip: bool) -> dict:
    pos = _flip_positions(r.positions) if flip else r.positions
    feats = _flip_features(r.features) if flip else r.features
    d = {
        "index": r.index,
        "feature_seed": r.feature_seed,
        "params": pose_to_dict(r.params),
        "positions": [[float(v) for v in row] for row in pos],
        "features": [float(v) for v in feats],
    }
    if r.sequence_id is not None:
        d["sequence_id"] = r.sequence_id
        d["frame_index"] = r.frame_index
    if r.observed_positions is not None:
        obs = _flip_positions(r.observed_positions) if flip else r.observed_positions
        d["observed_positions"] = [[float(v) for v in row] for row in obs]
    return d


def _record_from_dict(d: dict, flip: bool) -> DatasetRecord:
    pos = np.array(d["positions"], dtype=np.float64)
    feats = np.array(d["features"], dtype=np.float64)
    obs = d.get("observed_positions")
    if obs is not None:
        obs = np.array(obs, dtype=np.float64)
    if flip:
        pos = _flip_positions(pos)
        feats = _flip_features(feats)
        obs = _flip_positions(obs) if obs is not None else None
    return DatasetRecord(
        index=int(d["index"]),
        feature_seed=int(d["feature_seed"]),
        params=pose_from_dict(d["params"]),
        positions=pos,
        features=feats,
        sequence_id=d.get("sequence_id"),
        frame_index=d.get("frame_index"),
        observed_positions=obs,
    )


def save_dataset(path: str, header: dict, records: list[DatasetRecord]) -> None:
    flip = bool(header.get("flip_x"))
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(_record_to_dict(r, flip), sort_keys=True) for r in records)
    text = "\n".join(lines) + "\n"
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path: str) -> tuple[dict, list[DatasetRecord]]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValidationError(f"{os.path.basename(path)} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ValidationError(f"{os.path.basename(path)}:1 bad header: {e}") from e
    if "kind" not in header or "count" not in header:
        raise ValidationError(f"{os.path.basename(path)} missing dataset header")
    flip = bool(header.get("flip_x"))
    records = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(_record_from_dict(json.loads(line), flip))
        except (json.JSONDecodeError, KeyError, TypeError, IndexError) as e:
            raise ValidationError(f"{os.path.basename(path)}:{i} bad record: {e}") from e
    if len(records) != header["count"]:
        raise ValidationError(
            f"{os.path.basename(path)} header promises {header['count']} records, "
            f"found {len(records)}"
        )
    return header, records


def stack_records(records: list[DatasetRecord]) -> dict:
    """Columnar views used by training and evaluation."""
    return {
        "positions": np.stack([r.positions for r in records]),
        "features": np.stack([r.features for r in records]),
        "root_offset": np.stack([r.params.root_offset for r in records]),
        "anchor": np.array([r.params.anchor_length for r in records]),
        "angles_raw": np.stack([r.params.angles for r in records]),
        "props_raw": np.stack([r.params.proportions_raw for r in records]),
    }


def group_sequences(records: list[DatasetRecord]) -> dict[int, list[DatasetRecord]]:
    groups: dict[int, list[DatasetRecord]] = {}
    for r in records:
        if r.sequence_id is None:
            raise ValidationError("record without sequence_id in sequence dataset")
        groups.setdefault(r.sequence_id, []).append(r)
    for seq in groups.values():
        seq.sort(key=lambda r: r.frame_index)
    return groups
