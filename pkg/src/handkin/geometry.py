"""Pinhole camera model, supervision losses, and position-error metrics."""

from __future__ import annotations

import enum
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateInputError, ProjectionError, ValidationError
from .kinematics import JointPositions


class Alignment(enum.Enum):
    NONE = "none"
    ROOT_CENTERED = "root_centered"
    ROOT_CENTERED_SCALE_NORMALIZED = "root_centered_scale_normalized"


@dataclass(frozen=True)
class Camera:
    """Perspective camera with projection P = K [R | t]."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.K, dtype=np.float64)
        r = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if k.shape != (3, 3) or r.shape != (3, 3) or t.shape != (3,):
            raise ValidationError("camera fields must be K (3,3), R (3,3), t (3,)")
        if not np.allclose(k, np.triu(k)):
            raise ValidationError("camera K must be upper triangular")
        if np.any(np.diag(k) <= 0):
            raise ValidationError("camera K must have a positive diagonal")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or not np.isclose(
            np.linalg.det(r), 1.0, atol=1e-9
        ):
            raise ValidationError("camera R must be a rotation matrix")
        object.__setattr__(self, "K", k)
        object.__setattr__(self, "R", r)
        object.__setattr__(self, "t", t)


def identity_camera(k: np.ndarray | None = None) -> Camera:
    return Camera(np.eye(3) if k is None else k, np.eye(3), np.zeros(3))


def camera_to_dict(cam: Camera) -> dict:
    return {
        "K": [float(v) for v in cam.K.ravel()],
        "R": [float(v) for v in cam.R.ravel()],
        "t": [float(v) for v in cam.t],
    }


def camera_from_dict(d: dict) -> Camera:
    try:
        k = np.array(d["K"], dtype=np.float64).reshape(3, 3)
        r = np.array(d["R"], dtype=np.float64).reshape(3, 3)
        t = np.array(d["t"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"malformed camera record: {e}") from e
    return Camera(k, r, t)


def save_camera(path: str, cam: Camera) -> None:
    text = json.dumps(camera_to_dict(cam), indent=2) + "\n"
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


def load_camera(path: str) -> Camera:
    with open(path) as f:
        return camera_from_dict(json.load(f))


def _positions(x):
    if isinstance(x, JointPositions):
        return x.positions
    return x


def world_to_camera(points, cam: Camera):
    """Map world-frame points (..., N, 3) into the camera frame."""
    x = _positions(points)
    return ad.matmul(x, cam.R.T.copy()) + cam.t


def project(points, k: np.ndarray):
    """Pinhole-project camera-frame points (..., N, 3) to pixels (..., N, 2).

    Depths must be strictly positive; offending joint indices are reported.
    """
    x = _positions(points)
    raw = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
    z = raw[..., 2]
    if np.any(z <= 0):
        bad = sorted({int(i) for i in np.argwhere(z <= 0)[:, -1]})
        raise ProjectionError(
            f"non-positive depth at joint indices {bad}", joint_indices=bad
        )
    h = ad.matmul(x, np.asarray(k, dtype=np.float64).T.copy())
    return h[..., :2] / h[..., 2:3]


def loss_l1_3d(pred, gt):
    """Mean absolute coordinate error between two point sets."""
    diff = ad.absolute(_positions(pred) - _positions(gt))
    return ad.mean_(ad.reshape(diff, (-1,)))


def loss_reprojection(pred_3d, gt_2d, k: np.ndarray, smooth: float = 0.0):
    """Mean pixel distance between projected predictions and 2D targets.

    ``smooth`` is added inside the square root during training so the
    distance gradient stays bounded when a projected joint coincides with
    its target (the plain norm has an undefined gradient at zero).
    """
    uv = project(pred_3d, k)
    d2 = ad.sum_((uv - _positions(gt_2d)) ** 2.0, axis=-1)
    return ad.mean_(ad.reshape(ad.sqrt(d2 + smooth), (-1,)))


def loss_l1_canonical(pred, pred_root_rotation, gt, gt_root_rotation):
    """L1 between root-derotated, root-centered poses.

    Removes the global rotation so only articulation and shape are compared.
    Each pose is expressed as R_rootT (p - p_wrist) with its own root rotation.
    """

    def derotate(pos, rot):
        p = _positions(pos)
        centered = p - p[..., 0:1, :]
        return ad.matmul(centered, rot)  # right-multiply == apply R^T rowwise

    return loss_l1_3d(
        derotate(pred, pred_root_rotation), derotate(gt, gt_root_rotation)
    )


def per_joint_errors(
    pred, gt, align: Alignment = Alignment.ROOT_CENTERED_SCALE_NORMALIZED
) -> np.ndarray:
    """Euclidean error per joint after the requested alignment.

    Units follow the inputs (the evaluation pipeline reports millimeters).
    """
    p = np.asarray(_positions(pred), dtype=np.float64)
    g = np.asarray(_positions(gt), dtype=np.float64)
    if p.shape != g.shape or p.shape[-1] != 3:
        raise ValidationError(f"shape mismatch in mpjpe: {p.shape} vs {g.shape}")
    if align is not Alignment.NONE:
        p = p - p[..., 0:1, :]
        g = g - g[..., 0:1, :]
    if align is Alignment.ROOT_CENTERED_SCALE_NORMALIZED:
        ps = np.linalg.norm(p[..., 5, :], axis=-1)
        gs = np.linalg.norm(g[..., 5, :], axis=-1)
        if np.any(ps <= 1e-12):
            raise DegenerateInputError("predicted anchor bone has zero length")
        p = p * (gs / ps)[..., None, None]
    return np.linalg.norm(p - g, axis=-1)


def mpjpe(
    pred, gt, align: Alignment = Alignment.ROOT_CENTERED_SCALE_NORMALIZED
) -> float:
    """Mean per-joint position error in the units of the inputs."""
    return float(per_joint_errors(pred, gt, align).mean())


def normalize_positions(points):
    """Shift the wrist to the origin and rescale so the anchor bone has length 1.

    Returns (normalized, root, anchor_length); invert with
    root + anchor_length * normalized.
    """
    p = np.asarray(_positions(points), dtype=np.float64)
    root = p[..., 0:1, :]
    centered = p - root
    anchor = np.linalg.norm(centered[..., 5, :], axis=-1)
    if np.any(anchor <= 1e-12):
        raise DegenerateInputError("anchor bone has zero length")
    return centered / anchor[..., None, None], root[..., 0, :], anchor


def denormalize_positions(normalized, root, anchor_length):
    n = _positions(normalized)
    anchor = np.asarray(anchor_length)[..., None, None]
    return n * anchor + np.asarray(root)[..., None, :]
