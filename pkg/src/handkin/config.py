"""Run configuration: one validated document for every tunable."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

from .errors import ValidationError


@dataclass(frozen=True)
class ScheduleConfig:
    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"
    sample_steps: int = 50


@dataclass(frozen=True)
class DenoiserConfig:
    hidden: int = 256
    depth: int = 4
    time_dim: int = 32


@dataclass(frozen=True)
class IkHeadConfig:
    hidden: int = 256
    depth: int = 4


@dataclass(frozen=True)
class TemporalConfig:
    window: int = 5
    dim: int = 64
    heads: int = 2
    layers: int = 2
    ffn_hidden: int = 128
    dropout: float = 0.1


@dataclass(frozen=True)
class LossConfig:
    """Objective weights; pixel-unit terms get small weights by default."""

    w_eps: float = 1.0
    w_l1_3d: float = 1.0
    w_ik_clean: float = 1.0  # IK reconstruction of the clean pose (head only)
    w_reprojection: float = 0.01
    w_l1_canonical: float = 0.0
    x0_clip: float = 6.0  # clamp on the implied clean pose before the IK head


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 600
    temporal_epochs: int = 1500
    batch_size: int = 64
    lr: float = 4e-3
    temporal_lr: float = 2e-3
    momentum: float = 0.9
    val_fraction: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class CameraConfig:
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 128.0
    cy: float = 128.0


@dataclass(frozen=True)
class DataConfig:
    n_poses: int = 5000
    n_sequences: int = 50
    seq_len: int = 5
    noise_sigma: float = 0.5
    depth_mean: float = 1.0
    depth_spread: float = 0.1
    lateral_spread: float = 0.05
    rotation_spread: float = 0.6
    angle_scale: float = 1.0
    walk_smoothing: float = 0.999  # AR(1) autocorrelation of raw angles
    estimate_noise: float = 0.03
    flip_x: bool = False
    seed: int = 0


@dataclass(frozen=True)
class SolverConfig:
    restarts: int = 8
    percentile: float = 1.0
    pad: float = 0.05
    max_iters: int = 200


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    ik_head: IkHeadConfig = field(default_factory=IkHeadConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    data: DataConfig = field(default_factory=DataConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)


_SCALAR_OK = {
    int: (int,),
    float: (int, float),
    str: (str,),
    bool: (bool,),
}


def _from_dict(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ValidationError(f"config section '{path or 'root'}' must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValidationError(
            f"unknown config key '{(path + '.' if path else '') + sorted(unknown)[0]}'"
        )
    kwargs = {}
    for name, f in names.items():
        if name not in d:
            continue
        sub = f"{path}.{name}" if path else name
        v = d[name]
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, str) and f.type in _SECTIONS
        ):
            typ = _SECTIONS[f.type] if isinstance(f.type, str) else f.type
            kwargs[name] = _from_dict(typ, v, sub)
        else:
            typ = f.type if not isinstance(f.type, str) else _SCALAR_NAMES[f.type]
            if typ is bool and not isinstance(v, bool):
                raise ValidationError(f"config key '{sub}' must be a boolean")
            if not isinstance(v, _SCALAR_OK[typ]) or isinstance(v, bool) and typ is not bool:
                raise ValidationError(
                    f"config key '{sub}' must be of type {typ.__name__}"
                )
            kwargs[name] = typ(v)
    return cls(**kwargs)


_SECTIONS = {
    c.__name__: c
    for c in (
        ScheduleConfig,
        DenoiserConfig,
        IkHeadConfig,
        TemporalConfig,
        LossConfig,
        TrainConfig,
        CameraConfig,
        DataConfig,
        SolverConfig,
    )
}
_SCALAR_NAMES = {"int": int, "float": float, "str": str, "bool": bool}


def config_from_dict(d: dict) -> RunConfig:
    """Build a RunConfig; unknown keys or wrong types are rejected."""
    return _from_dict(RunConfig, d, "")


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    text = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def load_config(path: str) -> RunConfig:
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"config file {path} is not valid JSON: {e}") from e
    if isinstance(d, dict):
        d.pop("config_hash", None)  # written by save_config; not a tunable
    return config_from_dict(d)


def save_config(path: str, cfg: RunConfig) -> None:
    doc = {"config_hash": config_hash(cfg), **config_to_dict(cfg)}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
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
