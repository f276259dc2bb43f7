"""Forward kinematics with structural constraint satisfaction.

Every raw angle/proportion is squashed through a sine reparameterization into
its limit interval before use, so any real-valued input yields an in-range
pose. The root orientation is the nearest rotation (SVD projection) to a raw
3x3 matrix. Positions follow the relative-rotation recursion

    R_i = R_parent @ R'_i,    p_i = R_i @ o_i + p_parent,

with o_i = offset_direction * proportion_i * anchor_length, evaluated level
by level so all joints at a depth are computed in one vectorized step.

The implementation is written against the autodiff dispatch functions, so the
same code runs on plain numpy arrays (fast path) or on tracked tensors
(gradients / Jacobians).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .skeleton import PoseParams, SkeletonGraph, validate_graph


@dataclass
class JointPositions:
    """N x 3 joint positions in canonical joint-id order."""

    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValidationError(f"positions must be (N, 3), got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("positions contain non-finite values")


@dataclass
class RigidPose:
    """World-frame rotation + translation of one joint."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValidationError("RigidPose needs a 3x3 rotation and 3-vector translation")
        if np.linalg.norm(self.rotation @ self.rotation.T - np.eye(3)) > 1e-9:
            raise ValidationError("RigidPose rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise ValidationError("RigidPose rotation must have determinant +1")


def sine_normalize(x, a_min, a_max):
    """Map any raw value into [a_min, a_max] via a = (sin x + 1)/2 * range + min.

    The final clamp only trims float rounding at the interval ends; gradients
    pass through untouched in the interior.
    """
    u = (ad.sin(x) + 1.0) * 0.5
    a = u * (a_max - a_min) + a_min
    return ad.clip(a, a_min, a_max)


def sine_denormalize(a, a_min, a_max):
    """A raw preimage of ``a`` under sine_normalize (numpy only)."""
    a_min = np.asarray(a_min, dtype=np.float64)
    a_max = np.asarray(a_max, dtype=np.float64)
    rng = a_max - a_min
    safe = np.where(rng > 0, rng, 1.0)
    u = np.clip(2.0 * (np.asarray(a, dtype=np.float64) - a_min) / safe - 1.0, -1.0, 1.0)
    return np.where(rng > 0, np.arcsin(u), 0.0)


def euler_to_rotation(e, active_axes=None) -> np.ndarray:
    """Intrinsic x->y->z Euler angles to a rotation matrix (Rz @ Ry @ Rx)."""
    e = np.asarray(e, dtype=np.float64).reshape(3)
    if active_axes is not None:
        inactive = [i for i in range(3) if i not in tuple(active_axes)]
        if any(abs(e[i]) > 0 for i in inactive):
            raise ValidationError(f"inactive axes {inactive} must carry angle 0, got {e}")
    cx, sx = np.cos(e[0]), np.sin(e[0])
    cy, sy = np.cos(e[1]), np.sin(e[1])
    cz, sz = np.cos(e[2]), np.sin(e[2])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def svd_orthogonalize(m):
    """Nearest rotation to ``m`` (Frobenius norm); see the autodiff primitive."""
    return ad.svd_orthogonalize(m)


# ---------------------------------------------------------------------------
# level-vectorized FK core


class _FkConsts:
    """Per-graph constant gather matrices for the level-vectorized FK."""

    def __init__(self, g: SkeletonGraph):
        problems = validate_graph(g)
        if problems:
            raise ValidationError("invalid skeleton: " + "; ".join(problems))
        self.levels = g.bfs_levels()
        self.angle_lo, self.angle_hi = g.angle_limit_arrays()
        self.prop_lo, self.prop_hi = g.prop_limit_arrays()
        a, p = g.num_angles, g.num_props
        self.ge, self.gs, self.gp, self.dirs, self.psel = [], [], [], [], []
        prev = self.levels[0]
        for level in self.levels[1:]:
            n = len(level)
            ge = np.zeros((a, 3 * n))
            gs = np.zeros((a, 3 * n))
            has_splay = False
            gp = np.zeros((p, n))
            dirs = np.zeros((n, 3))
            psel = np.zeros((n, len(prev)))
            for k, jid in enumerate(level):
                j = g.joints[jid]
                for slot, axis in g.angle_slots[jid]:
                    ge[slot, 3 * k + axis] = 1.0
                if jid in g.splay_slots:
                    has_splay = True
                    for axis, slot in enumerate(g.splay_slots[jid]):
                        gs[slot, 3 * k + axis] = 1.0
                gp[g.prop_index[jid], k] = 1.0
                dirs[k] = j.offset_direction
                psel[k, prev.index(j.parent)] = 1.0
            self.ge.append(ge)
            self.gs.append(gs if has_splay else None)
            self.gp.append(gp)
            self.dirs.append(dirs)
            self.psel.append(psel)
            prev = level
        # permutation from BFS stacking order back to canonical id order
        order = [jid for level in self.levels for jid in level]
        n_all = len(order)
        self.perm = np.zeros((n_all, n_all))
        for pos, jid in enumerate(order):
            self.perm[jid, pos] = 1.0
        self.n_joints = n_all


def _fk_consts(g: SkeletonGraph) -> _FkConsts:
    consts = getattr(g, "_fk_consts", None)
    if consts is None:
        consts = _FkConsts(g)
        object.__setattr__(g, "_fk_consts", consts)
    return consts


def _euler_matrices(e, bshape, n):
    """(B, n, 3) euler angles -> (B, n, 3, 3) rotation matrices, Rz @ Ry @ Rx."""
    one = np.ones(bshape + (n, 1))
    zero = np.zeros(bshape + (n, 1))
    ex, ey, ez = e[..., 0:1], e[..., 1:2], e[..., 2:3]
    cx, sx = ad.cos(ex), ad.sin(ex)
    cy, sy = ad.cos(ey), ad.sin(ey)
    cz, sz = ad.cos(ez), ad.sin(ez)
    rx = ad.reshape(
        ad.concat([one, zero, zero, zero, cx, -sx, zero, sx, cx], axis=-1), bshape + (n, 3, 3)
    )
    ry = ad.reshape(
        ad.concat([cy, zero, sy, zero, one, zero, -sy, zero, cy], axis=-1), bshape + (n, 3, 3)
    )
    rz = ad.reshape(
        ad.concat([cz, -sz, zero, sz, cz, zero, zero, zero, one], axis=-1), bshape + (n, 3, 3)
    )
    return ad.matmul(ad.matmul(rz, ry), rx)


def fk_core(g: SkeletonGraph, root_raw, root_offset, angles, props, anchor, want_rotations=False):
    """Batched FK. Shapes: (B,3,3), (B,3), (B,A), (B,P), (B,).

    Returns positions (B, N, 3) in canonical joint order (and rotations
    (B, N, 3, 3) when requested). Accepts tensors or arrays.
    """
    c = _fk_consts(g)
    bshape = tuple(np.shape(root_offset))[:-1]
    r_root = ad.svd_orthogonalize(root_raw)
    ang_n = sine_normalize(angles, c.angle_lo, c.angle_hi)
    prop_n = sine_normalize(props, c.prop_lo, c.prop_hi)
    anchor_b = ad.reshape(anchor, bshape + (1, 1))

    r_prev = ad.reshape(r_root, bshape + (1, 3, 3))
    p_prev = ad.reshape(root_offset, bshape + (1, 3))
    pos_levels = [p_prev]
    rot_levels = [ad.reshape(r_prev, bshape + (1, 9))] if want_rotations else None

    for li, level in enumerate(c.levels[1:]):
        n = len(level)
        e = ad.reshape(ad.matmul(ang_n, c.ge[li]), bshape + (n, 3))
        r_rel = _euler_matrices(e, bshape, n)
        if c.gs[li] is not None:
            es = ad.reshape(ad.matmul(ang_n, c.gs[li]), bshape + (n, 3))
            r_rel = ad.matmul(_euler_matrices(es, bshape, n), r_rel)
        r_par = ad.reshape(
            ad.matmul(c.psel[li], ad.reshape(r_prev, bshape + (len(c.levels[li]), 9))),
            bshape + (n, 3, 3),
        )
        p_par = ad.matmul(c.psel[li], p_prev)
        r_cur = ad.matmul(r_par, r_rel)
        o = ad.reshape(ad.matmul(prop_n, c.gp[li]), bshape + (n, 1)) * c.dirs[li] * anchor_b
        p_cur = ad.reshape(ad.matmul(r_cur, ad.reshape(o, bshape + (n, 3, 1))), bshape + (n, 3)) + p_par
        pos_levels.append(p_cur)
        if want_rotations:
            rot_levels.append(ad.reshape(r_cur, bshape + (n, 9)))
        r_prev, p_prev = r_cur, p_cur

    pos_bfs = ad.concat(pos_levels, axis=-2)
    positions = ad.matmul(c.perm, pos_bfs)
    if not want_rotations:
        return positions
    rot_bfs = ad.concat(rot_levels, axis=-2)
    rotations = ad.reshape(ad.matmul(c.perm, rot_bfs), bshape + (c.n_joints, 3, 3))
    return positions, rotations


def _check_params(g: SkeletonGraph, params: PoseParams):
    if np.shape(params.root_rotation_raw) != (3, 3):
        raise ValidationError("root rotation raw must be 3x3")
    if np.shape(params.angles) != (g.num_angles,):
        raise ValidationError(
            f"angles length {np.shape(params.angles)} does not match graph ({g.num_angles})"
        )
    if np.shape(params.proportions_raw) != (g.num_props,):
        raise ValidationError(
            f"proportions length {np.shape(params.proportions_raw)} does not match graph ({g.num_props})"
        )


def forward_kinematics(g: SkeletonGraph, params: PoseParams):
    """Joint positions + per-joint rigid poses for one parameter bundle."""
    _check_params(g, params)
    pos, rot = fk_core(
        g,
        params.root_rotation_raw[None],
        params.root_offset[None],
        params.angles[None],
        np.asarray(params.proportions_raw)[None],
        np.array([params.anchor_length]),
        want_rotations=True,
    )
    joints = JointPositions(pos[0])
    poses = [RigidPose(rot[0, i], pos[0, i]) for i in range(rot.shape[1])]
    return joints, poses


def fk_jacobian(g: SkeletonGraph, params: PoseParams) -> np.ndarray:
    """d positions / d raw params in one reverse sweep.

    Rows: flattened positions (joint-major, xyz). Columns: root rotation raw
    (9, row-major), root offset (3), angles, proportions, anchor length.
    """
    _check_params(g, params)
    n = _fk_consts(g).n_joints
    root = ad.param(params.root_rotation_raw, "root_raw")
    off = ad.param(params.root_offset, "root_offset")
    ang = ad.param(params.angles, "angles")
    prop = ad.param(params.proportions_raw, "props")
    anchor = ad.param(np.array([params.anchor_length]), "anchor")
    with ad.Tape() as tape:
        pos = fk_core(
            g,
            ad.reshape(root, (1, 3, 3)),
            ad.reshape(off, (1, 3)),
            ad.reshape(ang, (1, g.num_angles)),
            ad.reshape(prop, (1, g.num_props)),
            anchor,
        )
        seed = np.eye(3 * n).reshape(3 * n, 1, n, 3)
        tape.backward(pos, seed)
    cols = [
        root.grad.reshape(3 * n, 9),
        off.grad.reshape(3 * n, 3),
        ang.grad.reshape(3 * n, g.num_angles),
        prop.grad.reshape(3 * n, g.num_props),
        anchor.grad.reshape(3 * n, 1),
    ]
    return np.concatenate(cols, axis=1)


# ---------------------------------------------------------------------------
# positions files: one frame per line


def save_positions_jsonl(path: str, frames, extra=None):
    """Write frames of (N, 3) positions as JSON lines."""
    with open(path, "w") as f:
        for i, frame in enumerate(frames):
            rec = {"positions": np.asarray(frame, dtype=np.float64).tolist()}
            if extra is not None:
                rec.update(extra[i])
            f.write(json.dumps(rec) + "\n")


def load_positions_jsonl(path: str):
    frames = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                frames.append(np.asarray(rec["positions"], dtype=np.float64))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValidationError(f"{path}:{line_no}: bad positions record: {exc!r}")
    return frames
