"""Optimization loops: joint denoiser/IK-head training and the temporal encoder.

Both loops are plain minibatch SGD with momentum, deterministic under a seed:
every stochastic draw (shuffling, diffusion steps, noise, dropout, hide masks)
comes from one generator whose state is stored in each checkpoint, so a resumed
run continues the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import RunConfig, config_hash
from .data import DatasetRecord, camera_from_config, group_sequences, stack_records
from .diffusion import (
    Schedule,
    forward_noise,
    make_schedule,
    schedule_from_dict,
    schedule_to_dict,
)
from .errors import NumericalError, ValidationError
from .geometry import (
    Camera,
    loss_l1_3d,
    loss_l1_canonical,
    loss_reprojection,
    normalize_positions,
    world_to_camera,
)
from .kinematics import sine_normalize
from .models import DenoiserNet, IkHead, TemporalEncoder, ik_forward, make_training_mask
from .skeleton import SkeletonGraph, skeleton_hash


@dataclass
class TrainResult:
    epochs_run: int
    best_val: float
    final_loss: float
    checkpoint_base: str
    log_path: str


def _scalar(x) -> float:
    return float(x.data) if isinstance(x, ad.Tensor) else float(x)


def split_indices(n: int, val_fraction: float, seed: int):
    """Deterministic train/val split; the validation part may be empty."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValidationError(f"val_fraction must be in [0, 1), got {val_fraction}")
    if n < 1:
        raise ValidationError("cannot split an empty dataset")
    perm = np.random.default_rng(seed + 101).permutation(n)
    n_val = min(int(round(n * val_fraction)), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def prepare_pose_arrays(
    records: list[DatasetRecord], graph: SkeletonGraph, cam: Camera
) -> dict:
    """Columnar training arrays in normalized pose space plus placement data."""
    from .geometry import project

    cols = stack_records(records)
    pos = cols["positions"]
    norm, root, anchor = normalize_positions(pos)
    n = pos.shape[0]
    gt_rot = np.asarray(
        ad.svd_orthogonalize(np.stack([r.params.root_rotation_raw for r in records]))
    )
    uv = np.asarray(project(np.asarray(world_to_camera(pos, cam)), cam.K))
    return {
        "x0": np.asarray(norm).reshape(n, -1),
        "f": cols["features"],
        "uv": uv,
        "root": root,
        "anchor": anchor,
        "gt_rot": gt_rot,
    }


def _take(data: dict, idx: np.ndarray) -> dict:
    return {k: v[idx] for k, v in data.items()}


def pose_objective(den, ik, graph, cam, batch, t, eps, schedule, weights):
    """Joint objective: noise prediction plus IK-projected supervision.

    The clean-pose estimate implied by the predicted noise is pushed through
    the IK head and FK, so the auxiliary terms compare constraint-satisfying
    poses against ground truth in normalized space (L1), and optionally in
    pixels after teacher-forced placement at the true root and scale.
    """
    x0, f = batch["x0"], batch["f"]
    x_t = forward_noise(x0, t, eps, schedule)
    eps_hat = den.forward(x_t, t, f)
    r = eps - eps_hat
    l_eps = ad.mean_(ad.sum_(r * r, axis=-1))
    total = weights.w_eps * l_eps
    parts = {"loss_eps": _scalar(l_eps)}
    gt = x0.reshape(x0.shape[0], -1, 3)
    if weights.w_ik_clean > 0:
        # sampling feeds the head clean poses, so give it that regime
        # directly; x0 is data, so only head parameters receive gradient
        _, _, _, rec = ik_forward(ik, x0, graph)
        lic = loss_l1_3d(rec, gt)
        total = total + weights.w_ik_clean * lic
        parts["loss_ik_clean"] = _scalar(lic)
    aux = weights.w_l1_3d > 0 or weights.w_reprojection > 0 or weights.w_l1_canonical > 0
    if aux:
        abar = schedule.alpha_bars[t - 1]
        c1 = np.sqrt(1.0 - abar)[:, None]
        inv_c0 = (1.0 / np.sqrt(abar))[:, None]
        x0_hat = (x_t - eps_hat * c1) * inv_c0
        # clamp the implied clean pose to the data range: near t = T the
        # 1/sqrt(abar) amplification would otherwise feed the IK head inputs
        # two orders of magnitude outside anything a hand can produce
        if weights.x0_clip > 0:
            x0_hat = ad.clip(x0_hat, -weights.x0_clip, weights.x0_clip)
        root_raw, _, _, pred = ik_forward(ik, x0_hat, graph)
        if weights.w_l1_3d > 0:
            l1 = loss_l1_3d(pred, gt)
            total = total + weights.w_l1_3d * l1
            parts["loss_l1"] = _scalar(l1)
        if weights.w_reprojection > 0:
            world = pred * batch["anchor"][:, None, None] + batch["root"][:, None, :]
            # smoothed norm: the teacher-forced wrist lands on its target
            # exactly, where the plain pixel distance has no gradient
            lp = loss_reprojection(
                world_to_camera(world, cam), batch["uv"], cam.K, smooth=1e-12
            )
            total = total + weights.w_reprojection * lp
            parts["loss_reproj"] = _scalar(lp)
        if weights.w_l1_canonical > 0:
            lc = loss_l1_canonical(
                pred, ad.svd_orthogonalize(root_raw), gt, batch["gt_rot"]
            )
            total = total + weights.w_l1_canonical * lc
            parts["loss_canon"] = _scalar(lc)
    return total, parts


# -- checkpoint files: <base>.bin holds arrays, <base>.json the metadata ------


def _atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(base: str, arrays: dict, meta: dict) -> None:
    ad.save_arrays(base + ".bin", arrays)
    _atomic_write(base + ".json", (json.dumps(meta, sort_keys=True) + "\n").encode())


def copy_checkpoint(src_base: str, dst_base: str) -> None:
    for ext in (".bin", ".json"):
        with open(src_base + ext, "rb") as f:
            _atomic_write(dst_base + ext, f.read())


def load_checkpoint(base: str) -> tuple[dict, dict]:
    meta_path = base + ".json"
    if not os.path.exists(meta_path):
        raise ValidationError(f"no checkpoint at {base}(.json/.bin)")
    with open(meta_path) as f:
        meta = json.load(f)
    return ad.load_arrays(base + ".bin"), meta


def _check_kind(meta: dict, kind: str, base: str) -> None:
    if meta.get("kind") != kind:
        raise ValidationError(
            f"checkpoint {base} has kind {meta.get('kind')!r}, expected {kind!r}"
        )


def _check_skeleton(meta: dict, graph: SkeletonGraph, base: str) -> None:
    if meta.get("skeleton_hash") != skeleton_hash(graph):
        raise ValidationError(
            f"checkpoint {base} was trained against a different skeleton "
            f"({meta.get('skeleton_hash', 'missing')[:12]}... vs "
            f"{skeleton_hash(graph)[:12]}...)"
        )


def load_pose_models(base: str, graph: SkeletonGraph):
    """Rebuild (denoiser, ik_head, schedule, meta) from a pose checkpoint."""
    arrays, meta = load_checkpoint(base)
    _check_kind(meta, "pose", base)
    _check_skeleton(meta, graph, base)
    dn = meta["denoiser"]
    den = DenoiserNet(
        dn["data_dim"], dn["feature_dim"], dn["time_dim"], dn["hidden"], dn["depth"],
        rng=np.random.default_rng(0),
    )
    ih = meta["ik_head"]
    ik = IkHead(
        graph, dn["data_dim"], ih["hidden"], ih["depth"], rng=np.random.default_rng(0)
    )
    den.params.load_state(arrays, "den.")
    ik.params.load_state(arrays, "ik.")
    return den, ik, schedule_from_dict(meta["schedule"]), meta


def load_temporal_model(base: str, graph: SkeletonGraph):
    """Rebuild (encoder, meta) from a temporal checkpoint."""
    arrays, meta = load_checkpoint(base)
    _check_kind(meta, "temporal", base)
    _check_skeleton(meta, graph, base)
    e = meta["encoder"]
    enc = TemporalEncoder(
        window=e["window"],
        data_dim=e["data_dim"],
        out_dim=e["out_dim"],
        dim=e["dim"],
        heads=e["heads"],
        layers=e["layers"],
        ffn_hidden=e["ffn_hidden"],
        dropout=e["dropout"],
        rng=np.random.default_rng(0),
    )
    enc.params.load_state(arrays, "enc.")
    return enc, meta


def _append_log(path: str, entry: dict, fresh: bool = False) -> None:
    with open(path, "w" if fresh else "a") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


def _best_or_none(v: float):
    return None if math.isinf(v) or math.isnan(v) else v


def train_denoiser(
    cfg: RunConfig,
    graph: SkeletonGraph,
    records: list[DatasetRecord],
    out_dir: str,
    resume: bool = False,
    epochs: int | None = None,
) -> TrainResult:
    """Train the conditional denoiser and IK head jointly.

    Writes pose_last (every epoch) and pose_best (lowest validation loss)
    checkpoint pairs plus an epoch JSONL log under out_dir.
    """
    if len(records) < 2:
        raise ValidationError("training needs at least 2 records")
    os.makedirs(out_dir, exist_ok=True)
    cam = camera_from_config(cfg)
    sc = cfg.schedule
    schedule = make_schedule(sc.train_steps, sc.beta_start, sc.beta_end, sc.kind)
    data = prepare_pose_arrays(records, graph, cam)
    n, d_pose = data["x0"].shape
    tr_idx, va_idx = split_indices(n, cfg.train.val_fraction, cfg.train.seed)

    den = DenoiserNet(
        d_pose,
        data["f"].shape[1],
        cfg.denoiser.time_dim,
        cfg.denoiser.hidden,
        cfg.denoiser.depth,
        rng=np.random.default_rng(cfg.train.seed + 1),
    )
    ik = IkHead(
        graph,
        d_pose,
        cfg.ik_head.hidden,
        cfg.ik_head.depth,
        rng=np.random.default_rng(cfg.train.seed + 2),
    )
    opt_den = ad.SgdMomentum(den.params, cfg.train.lr, cfg.train.momentum)
    opt_ik = ad.SgdMomentum(ik.params, cfg.train.lr, cfg.train.momentum)
    rng = np.random.default_rng(cfg.train.seed)
    train_mean = data["x0"][tr_idx].mean(axis=0)

    # validation noise is frozen (separate stream) so the metric is comparable
    # across epochs and consumes nothing from the training generator
    vr = np.random.default_rng(cfg.train.seed + 7)
    val_t = vr.integers(1, schedule.T + 1, size=va_idx.size)
    val_eps = vr.standard_normal((va_idx.size, d_pose))
    val_batch = _take(data, va_idx) if va_idx.size else None

    last = os.path.join(out_dir, "pose_last")
    best = os.path.join(out_dir, "pose_best")
    log_path = os.path.join(out_dir, "train_log.jsonl")
    start_epoch = 0
    best_val = math.inf

    if resume:
        arrays, meta = load_checkpoint(last)
        _check_kind(meta, "pose", last)
        _check_skeleton(meta, graph, last)
        den.params.load_state(arrays, "den.")
        ik.params.load_state(arrays, "ik.")
        opt_den.load_state(arrays, "opt.den.")
        opt_ik.load_state(arrays, "opt.ik.")
        rng.bit_generator.state = meta["rng_state"]
        start_epoch = int(meta["epoch"])
        if meta["best_val"] is not None:
            best_val = float(meta["best_val"])

    def validation_loss() -> float:
        if val_batch is None:
            return math.nan
        loss, _ = pose_objective(
            den, ik, graph, cam, val_batch, val_t, val_eps, schedule, cfg.loss
        )
        return _scalar(loss)

    def snapshot(epoch: int, val_loss: float) -> None:
        arrays = {f"den.{k}": v for k, v in den.params.state().items()}
        arrays.update({f"ik.{k}": v for k, v in ik.params.state().items()})
        arrays.update({f"opt.den.{k}": v for k, v in opt_den.state().items()})
        arrays.update({f"opt.ik.{k}": v for k, v in opt_ik.state().items()})
        meta = {
            "kind": "pose",
            "epoch": epoch,
            "val_loss": _best_or_none(val_loss),
            "best_val": _best_or_none(best_val),
            "config_hash": config_hash(cfg),
            "skeleton_hash": skeleton_hash(graph),
            "schedule": schedule_to_dict(schedule),
            "denoiser": {
                "data_dim": d_pose,
                "feature_dim": data["f"].shape[1],
                "time_dim": cfg.denoiser.time_dim,
                "hidden": cfg.denoiser.hidden,
                "depth": cfg.denoiser.depth,
            },
            "ik_head": {"hidden": cfg.ik_head.hidden, "depth": cfg.ik_head.depth},
            "train_mean_pose": [float(v) for v in train_mean],
            "rng_state": rng.bit_generator.state,
        }
        save_checkpoint(last, arrays, meta)

    total_epochs = cfg.train.epochs if epochs is None else epochs
    if total_epochs < 0:
        raise ValidationError("epochs must be >= 0")

    if not resume:
        v0 = validation_loss()
        best_val = v0 if not math.isnan(v0) else math.inf
        snapshot(0, v0)
        copy_checkpoint(last, best)
        _append_log(
            log_path,
            {"epoch": 0, "val_loss": _best_or_none(v0), "best_val": _best_or_none(best_val)},
            fresh=True,
        )

    last_epoch_loss = math.nan
    for ep in range(start_epoch + 1, total_epochs + 1):
        perm = rng.permutation(tr_idx.size)
        sums: dict[str, float] = {}
        seen = 0
        for s0 in range(0, tr_idx.size, cfg.train.batch_size):
            sel = tr_idx[perm[s0 : s0 + cfg.train.batch_size]]
            t = rng.integers(1, schedule.T + 1, size=sel.size)
            eps = rng.standard_normal((sel.size, d_pose))
            den.params.zero_grad()
            ik.params.zero_grad()
            with ad.Tape() as tape:
                try:
                    loss, parts = pose_objective(
                        den, ik, graph, cam, _take(data, sel), t, eps, schedule, cfg.loss
                    )
                except NumericalError as e:
                    raise NumericalError(
                        f"{e} (epoch {ep}, batch offset {s0})"
                    ) from e
                tape.backward(loss)
            opt_den.step()
            opt_ik.step()
            parts["loss"] = _scalar(loss)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * sel.size
            seen += sel.size
        means = {k: v / seen for k, v in sums.items()}
        val = validation_loss()
        metric = means["loss"] if math.isnan(val) else val
        improved = metric < best_val
        if improved:
            best_val = metric
        snapshot(ep, val)
        if improved:
            copy_checkpoint(last, best)
        _append_log(
            log_path,
            {
                "epoch": ep,
                **{k: means[k] for k in sorted(means)},
                "val_loss": _best_or_none(val),
                "best_val": _best_or_none(best_val),
            },
        )
        last_epoch_loss = means["loss"]
    return TrainResult(
        epochs_run=max(total_epochs - start_epoch, 0),
        best_val=best_val,
        final_loss=last_epoch_loss,
        checkpoint_base=best,
        log_path=log_path,
    )


# -- temporal phase -----------------------------------------------------------


def prepare_sequence_arrays(
    records: list[DatasetRecord], graph: SkeletonGraph
) -> dict:
    """Stack sequences: normalized noisy inputs and true angle values."""
    groups = group_sequences(records)
    lengths = {len(seq) for seq in groups.values()}
    if len(lengths) != 1:
        raise ValidationError(f"sequences have mixed lengths {sorted(lengths)}")
    length = lengths.pop()
    lo, hi = graph.angle_limit_arrays()
    obs, angles = [], []
    for sid in sorted(groups):
        seq = groups[sid]
        if any(r.observed_positions is None for r in seq):
            raise ValidationError("sequence dataset lacks observed_positions")
        frames = np.stack([r.observed_positions for r in seq])
        norm, _, _ = normalize_positions(frames)
        obs.append(np.asarray(norm).reshape(length, -1))
        angles.append(np.stack([r.params.angles for r in seq]))
    gt_vals = np.asarray(sine_normalize(np.stack(angles), lo, hi))
    weights = np.ones(graph.num_angles)
    for slot, _ in graph.angle_slots[graph.root_id()]:
        weights[slot] = 0.0  # wrist slots are FK-inert, nothing to supervise
    return {
        "inputs": np.stack(obs),
        "gt_vals": gt_vals,
        "weights": weights,
        "length": length,
        "lo": lo,
        "hi": hi,
    }


def temporal_objective(enc, seq_in, gt_vals, weights, lo, hi, mask=None, rng=None, training=False):
    """Mean squared angle-value error over supervised slots."""
    out = enc.forward(seq_in, mask=mask, rng=rng, training=training)
    vals = sine_normalize(out, lo, hi)
    d = vals - gt_vals
    sq = d * d * weights
    denom = float(np.prod(gt_vals.shape[:-1]) * weights.sum())
    return ad.sum_(ad.reshape(sq, (-1,))) * (1.0 / denom)


def train_temporal(
    cfg: RunConfig,
    graph: SkeletonGraph,
    records: list[DatasetRecord],
    out_dir: str,
    resume: bool = False,
    epochs: int | None = None,
) -> TrainResult:
    """Train the temporal encoder on noisy sequences against true angles."""
    os.makedirs(out_dir, exist_ok=True)
    seq = prepare_sequence_arrays(records, graph)
    if seq["length"] > cfg.temporal.window:
        raise ValidationError(
            f"sequence length {seq['length']} exceeds encoder window "
            f"{cfg.temporal.window}"
        )
    n_seq = seq["inputs"].shape[0]
    if n_seq < 2:
        raise ValidationError("temporal training needs at least 2 sequences")
    tr_idx, va_idx = split_indices(n_seq, cfg.train.val_fraction, cfg.train.seed)

    enc = TemporalEncoder(
        window=cfg.temporal.window,
        data_dim=seq["inputs"].shape[-1],
        out_dim=graph.num_angles,
        dim=cfg.temporal.dim,
        heads=cfg.temporal.heads,
        layers=cfg.temporal.layers,
        ffn_hidden=cfg.temporal.ffn_hidden,
        dropout=cfg.temporal.dropout,
        rng=np.random.default_rng(cfg.train.seed + 3),
    )
    opt = ad.SgdMomentum(enc.params, cfg.train.temporal_lr, cfg.train.momentum)
    rng = np.random.default_rng(cfg.train.seed + 4)

    last = os.path.join(out_dir, "temporal_last")
    best = os.path.join(out_dir, "temporal_best")
    log_path = os.path.join(out_dir, "temporal_log.jsonl")
    start_epoch = 0
    best_val = math.inf

    if resume:
        arrays, meta = load_checkpoint(last)
        _check_kind(meta, "temporal", last)
        _check_skeleton(meta, graph, last)
        enc.params.load_state(arrays, "enc.")
        opt.load_state(arrays, "opt.enc.")
        rng.bit_generator.state = meta["rng_state"]
        start_epoch = int(meta["epoch"])
        if meta["best_val"] is not None:
            best_val = float(meta["best_val"])

    def validation_loss() -> float:
        if va_idx.size == 0:
            return math.nan
        loss = temporal_objective(
            enc,
            seq["inputs"][va_idx],
            seq["gt_vals"][va_idx],
            seq["weights"],
            seq["lo"],
            seq["hi"],
        )
        return _scalar(loss)

    def snapshot(epoch: int, val_loss: float) -> None:
        arrays = {f"enc.{k}": v for k, v in enc.params.state().items()}
        arrays.update({f"opt.enc.{k}": v for k, v in opt.state().items()})
        meta = {
            "kind": "temporal",
            "epoch": epoch,
            "val_loss": _best_or_none(val_loss),
            "best_val": _best_or_none(best_val),
            "config_hash": config_hash(cfg),
            "skeleton_hash": skeleton_hash(graph),
            "encoder": enc.config(),
            "rng_state": rng.bit_generator.state,
        }
        save_checkpoint(last, arrays, meta)

    total_epochs = cfg.train.temporal_epochs if epochs is None else epochs
    if total_epochs < 0:
        raise ValidationError("epochs must be >= 0")

    if not resume:
        v0 = validation_loss()
        best_val = v0 if not math.isnan(v0) else math.inf
        snapshot(0, v0)
        copy_checkpoint(last, best)
        _append_log(
            log_path,
            {"epoch": 0, "val_loss": _best_or_none(v0), "best_val": _best_or_none(best_val)},
            fresh=True,
        )

    last_epoch_loss = math.nan
    for ep in range(start_epoch + 1, total_epochs + 1):
        perm = rng.permutation(tr_idx.size)
        sel = tr_idx[perm]
        mask = make_training_mask(seq["length"], rng)
        enc.params.zero_grad()
        with ad.Tape() as tape:
            try:
                loss = temporal_objective(
                    enc,
                    seq["inputs"][sel],
                    seq["gt_vals"][sel],
                    seq["weights"],
                    seq["lo"],
                    seq["hi"],
                    mask=mask,
                    rng=rng,
                    training=True,
                )
            except NumericalError as e:
                raise NumericalError(f"{e} (temporal epoch {ep})") from e
            tape.backward(loss)
        opt.step()
        train_loss = _scalar(loss)
        val = validation_loss()
        metric = train_loss if math.isnan(val) else val
        improved = metric < best_val
        if improved:
            best_val = metric
        snapshot(ep, val)
        if improved:
            copy_checkpoint(last, best)
        _append_log(
            log_path,
            {
                "epoch": ep,
                "loss": train_loss,
                "val_loss": _best_or_none(val),
                "best_val": _best_or_none(best_val),
            },
        )
        last_epoch_loss = train_loss
    return TrainResult(
        epochs_run=max(total_epochs - start_epoch, 0),
        best_val=best_val,
        final_loss=last_epoch_loss,
        checkpoint_base=best,
        log_path=log_path,
    )
