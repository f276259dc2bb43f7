"""Hand skeleton description: joint tree, angle/proportion slot layout, pose packing.

The canonical hand has 21 joints in the usual wrist / thumb(4) / index(4) /
middle(4) / ring(4) / pinky(4) order, 20 bones, 26 articulated degrees of
freedom, and 15 static splay angles (three per finger chain) for a 41-entry
angle vector. Each bone carries a length proportion relative to the anchor
bone (wrist -> index metacarpal head).

Angle slot layout (fixed, derived from the graph): joints in ascending id
order contribute ``dof`` slots each, then every child of the root contributes
three splay slots, again in ascending id order. The wrist's own three slots
exist for degree-of-freedom accounting but are inert in forward kinematics,
where the root orientation comes from the 9-value raw rotation instead.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

# axis activation convention by dof count: flexion about x first, then
# abduction about z, then twist about y
_AXES_BY_DOF = {0: (), 1: (0,), 2: (0, 2), 3: (0, 1, 2)}

DEG = math.pi / 180.0

JOINT_NAMES = [
    "wrist",
    "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
]


@dataclass
class JointSpec:
    """One joint: parentage, articulation, rest offset, and limits."""

    id: int
    parent: int | None
    dof: int
    # 3 entries (x, y, z); None marks an inactive axis
    euler_limits: tuple
    offset_direction: np.ndarray | None  # unit vector in parent frame; None for root
    proportion_limits: tuple | None  # (min, max); None for root
    splay_limits: tuple | None = None  # 3 x (min, max) for root children

    def active_axes(self) -> tuple:
        return tuple(i for i, lim in enumerate(self.euler_limits) if lim is not None)


@dataclass
class SkeletonGraph:
    """Joint tree plus the derived slot layout used by every other module."""

    joints: list  # list[JointSpec], indexed by id
    anchor_edge: int  # joint id whose incoming bone is the scale reference

    # derived layout (filled in __post_init__)
    angle_slots: dict = field(default_factory=dict, repr=False)  # joint id -> (slot, axis) list
    splay_slots: dict = field(default_factory=dict, repr=False)  # joint id -> [3 slots]
    prop_index: dict = field(default_factory=dict, repr=False)  # joint id -> proportion index
    num_angles: int = 0
    num_props: int = 0

    def __post_init__(self):
        self._build_layout()

    def _build_layout(self):
        slot = 0
        self.angle_slots = {}
        self.splay_slots = {}
        for j in self.joints:
            pairs = []
            for axis in j.active_axes():
                pairs.append((slot, axis))
                slot += 1
            self.angle_slots[j.id] = pairs
        for j in self.joints:
            if (
                j.parent is not None
                and self.joints[j.parent].parent is None
                and j.splay_limits is not None
            ):
                self.splay_slots[j.id] = [slot, slot + 1, slot + 2]
                slot += 3
        self.num_angles = slot
        self.prop_index = {}
        k = 0
        for j in self.joints:
            if j.parent is not None:
                self.prop_index[j.id] = k
                k += 1
        self.num_props = k

    # -- convenience views ------------------------------------------------
    def root_id(self) -> int:
        return next(j.id for j in self.joints if j.parent is None)

    def children(self, jid: int) -> list:
        return [j.id for j in self.joints if j.parent == jid]

    def bfs_levels(self) -> list:
        levels = [[self.root_id()]]
        while True:
            nxt = []
            for jid in levels[-1]:
                nxt.extend(self.children(jid))
            if not nxt:
                return levels
            levels.append(sorted(nxt))

    def angle_limit_arrays(self):
        """(lo, hi) arrays over the packed angle vector."""
        lo = np.zeros(self.num_angles)
        hi = np.zeros(self.num_angles)
        for j in self.joints:
            for slot, axis in self.angle_slots[j.id]:
                lo[slot], hi[slot] = j.euler_limits[axis]
        for jid, slots in self.splay_slots.items():
            for k, slot in enumerate(slots):
                lo[slot], hi[slot] = self.joints[jid].splay_limits[k]
        return lo, hi

    def prop_limit_arrays(self):
        lo = np.zeros(self.num_props)
        hi = np.zeros(self.num_props)
        for j in self.joints:
            if j.parent is None:
                continue
            k = self.prop_index[j.id]
            lo[k], hi[k] = j.proportion_limits
        return lo, hi


@dataclass
class PoseParams:
    """Raw (pre-normalization) pose parameters for one hand."""

    root_rotation_raw: np.ndarray  # (3, 3)
    root_offset: np.ndarray  # (3,)
    angles: np.ndarray  # (num_angles,)
    proportions_raw: np.ndarray  # (num_props,)
    anchor_length: float


def canonical_hand_topology() -> SkeletonGraph:
    """The 21-joint, 26-DoF hand with default limits."""
    pip_lim = (0.0, 100.0 * DEG)
    mcp_x = (-20.0 * DEG, 100.0 * DEG)
    mcp_z = (-25.0 * DEG, 25.0 * DEG)
    thumb3 = tuple((-45.0 * DEG, 45.0 * DEG) for _ in range(3))
    splay = tuple((-30.0 * DEG, 30.0 * DEG) for _ in range(3))
    wide = tuple((-math.pi, math.pi) for _ in range(3))
    prop = (0.3, 1.2)

    def unit(phi_deg: float, psi_deg: float) -> np.ndarray:
        # fan angle phi about z (toward +x), elevation psi toward +z
        phi, psi = phi_deg * DEG, psi_deg * DEG
        v = np.array([math.sin(phi) * math.cos(psi), math.cos(phi) * math.cos(psi), math.sin(psi)])
        return v / np.linalg.norm(v)

    y = np.array([0.0, 1.0, 0.0])
    base_dirs = {
        1: unit(55.0, -20.0),  # thumb leaves the palm plane
        5: unit(15.0, 0.0),
        9: unit(0.0, 0.0),
        13: unit(-12.0, 0.0),
        17: unit(-25.0, 0.0),
    }

    joints = [JointSpec(0, None, 3, wide, None, None)]

    def add(jid, parent, dof, limits, direction, prop_lim, splay_lim=None):
        joints.append(JointSpec(jid, parent, dof, limits, direction, prop_lim, splay_lim))

    # thumb: cmc(3) -> mcp(3) -> ip(1) -> tip(0)
    add(1, 0, 3, thumb3, base_dirs[1], prop, splay)
    add(2, 1, 3, thumb3, y, prop)
    add(3, 2, 1, (pip_lim, None, None), y, prop)
    add(4, 3, 0, (None, None, None), y, prop)
    # four fingers: mcp(2) -> pip(1) -> dip(1) -> tip(0)
    for base in (5, 9, 13, 17):
        add(base, 0, 2, (mcp_x, None, mcp_z), base_dirs[base], (1.0, 1.0) if base == 5 else prop, splay)
        add(base + 1, base, 1, (pip_lim, None, None), y, prop)
        add(base + 2, base + 1, 1, (pip_lim, None, None), y, prop)
        add(base + 3, base + 2, 0, (None, None, None), y, prop)

    return SkeletonGraph(joints=joints, anchor_edge=5)


def validate_graph(g: SkeletonGraph) -> list:
    """Structural checks; returns a list of violation strings (empty = ok)."""
    problems = []
    n = len(g.joints)
    ids = [j.id for j in g.joints]
    if ids != list(range(n)):
        problems.append(f"joint ids must be 0..{n - 1} in order, got {ids}")
        return problems
    roots = [j for j in g.joints if j.parent is None]
    if len(roots) != 1:
        problems.append(f"expected exactly one root, found {len(roots)}")
    for j in g.joints:
        if j.parent is not None:
            if not (0 <= j.parent < n):
                problems.append(f"joint {j.id}: parent {j.parent} out of range")
            elif j.parent >= j.id:
                problems.append(f"joint {j.id}: parent {j.parent} must have a smaller id")
        if j.dof not in _AXES_BY_DOF:
            problems.append(f"joint {j.id}: dof {j.dof} outside 0..3")
            continue
        active = j.active_axes()
        if len(active) != j.dof:
            problems.append(
                f"joint {j.id}: dof {j.dof} but {len(active)} active axes in limits"
            )
        for axis in active:
            lo, hi = j.euler_limits[axis]
            if not lo < hi:
                problems.append(f"joint {j.id}: axis {axis} limits ({lo}, {hi}) need min < max")
        if j.parent is None:
            if j.offset_direction is not None or j.proportion_limits is not None:
                problems.append(f"joint {j.id}: root carries no bone offset or proportion")
        else:
            if j.offset_direction is None:
                problems.append(f"joint {j.id}: missing offset direction")
            elif abs(np.linalg.norm(np.asarray(j.offset_direction, dtype=float)) - 1.0) > 1e-9:
                problems.append(f"joint {j.id}: offset direction is not unit length")
            if j.proportion_limits is None:
                problems.append(f"joint {j.id}: missing proportion limits")
            else:
                lo, hi = j.proportion_limits
                if not (lo > 0 and lo <= hi):
                    problems.append(
                        f"joint {j.id}: proportion limits ({lo}, {hi}) need 0 < min <= max"
                    )
        if j.splay_limits is not None:
            parent_ok = j.parent is not None and 0 <= j.parent < n
            if not parent_ok or g.joints[j.parent].parent is not None:
                problems.append(f"joint {j.id}: splay limits only apply to children of the root")
            if len(j.splay_limits) != 3:
                problems.append(f"joint {j.id}: splay limits must have 3 axes")
            else:
                for k, (lo, hi) in enumerate(j.splay_limits):
                    if not lo < hi:
                        problems.append(
                            f"joint {j.id}: splay axis {k} limits ({lo}, {hi}) need min < max"
                        )
    # parent-before-child ordering above rules out cycles; check connectivity
    if len(roots) == 1 and not problems:
        reachable = set()
        stack = [g.root_id()]
        while stack:
            jid = stack.pop()
            reachable.add(jid)
            stack.extend(g.children(jid))
        if len(reachable) != n:
            problems.append("graph is not a single connected tree")
    if not (0 <= g.anchor_edge < n) or g.joints[g.anchor_edge].parent is None:
        problems.append(f"anchor_edge {g.anchor_edge} must name a non-root joint")
    return problems


def pack_params(
    root_rotation_raw,
    root_offset,
    angles,
    proportions_raw,
    anchor_length,
    graph: SkeletonGraph | None = None,
) -> PoseParams:
    """Assemble and validate a PoseParams bundle for ``graph`` (canonical default)."""
    if graph is None:
        graph = canonical_hand_topology()
    rot = np.array(root_rotation_raw, dtype=np.float64)
    if rot.size == 9:
        rot = rot.reshape(3, 3)
    else:
        raise ValidationError(f"root rotation needs 9 values, got {rot.size}")
    off = np.array(root_offset, dtype=np.float64).reshape(-1)
    ang = np.array(angles, dtype=np.float64).reshape(-1)
    prop = np.array(proportions_raw, dtype=np.float64).reshape(-1)
    if off.shape != (3,):
        raise ValidationError(f"root offset needs 3 values, got {off.shape}")
    if ang.shape != (graph.num_angles,):
        raise ValidationError(f"angles needs {graph.num_angles} values, got {ang.shape[0]}")
    if prop.shape != (graph.num_props,):
        raise ValidationError(f"proportions needs {graph.num_props} values, got {prop.shape[0]}")
    anchor = float(anchor_length)
    if not np.isfinite(anchor):
        raise ValidationError("anchor length must be finite")
    return PoseParams(rot, off, ang, prop, anchor)


def unpack_params(params: PoseParams):
    """Inverse of pack_params: the raw component arrays."""
    return (
        params.root_rotation_raw,
        params.root_offset,
        params.angles,
        params.proportions_raw,
        params.anchor_length,
    )


# ---------------------------------------------------------------------------
# serialization


def _limits_to_json(limits) -> list:
    return [None if lim is None else [float(lim[0]), float(lim[1])] for lim in limits]


def graph_to_dict(g: SkeletonGraph) -> dict:
    joints = []
    for j in g.joints:
        entry = {
            "id": j.id,
            "parent": j.parent,
            "dof": j.dof,
            "limits": _limits_to_json(j.euler_limits),
            "offset_dir": None
            if j.offset_direction is None
            else [float(v) for v in j.offset_direction],
            "proportion_limits": None
            if j.proportion_limits is None
            else [float(j.proportion_limits[0]), float(j.proportion_limits[1])],
        }
        if j.splay_limits is not None:
            entry["splay_limits"] = _limits_to_json(j.splay_limits)
        joints.append(entry)
    return {"joints": joints, "anchor_edge": g.anchor_edge}


def graph_from_dict(doc: dict) -> SkeletonGraph:
    try:
        joints = []
        for e in doc["joints"]:
            limits = tuple(None if lim is None else (float(lim[0]), float(lim[1])) for lim in e["limits"])
            splay = e.get("splay_limits")
            if splay is not None:
                splay = tuple((float(lim[0]), float(lim[1])) for lim in splay)
            joints.append(
                JointSpec(
                    id=int(e["id"]),
                    parent=None if e["parent"] is None else int(e["parent"]),
                    dof=int(e["dof"]),
                    euler_limits=limits,
                    offset_direction=None
                    if e["offset_dir"] is None
                    else np.array(e["offset_dir"], dtype=np.float64),
                    proportion_limits=None
                    if e["proportion_limits"] is None
                    else (float(e["proportion_limits"][0]), float(e["proportion_limits"][1])),
                    splay_limits=splay,
                )
            )
        g = SkeletonGraph(joints=joints, anchor_edge=int(doc["anchor_edge"]))
    except (KeyError, TypeError, IndexError) as exc:
        raise ValidationError(f"malformed skeleton document: {exc!r}")
    problems = validate_graph(g)
    if problems:
        raise ValidationError("invalid skeleton: " + "; ".join(problems))
    return g


def save_skeleton(path: str, g: SkeletonGraph):
    problems = validate_graph(g)
    if problems:
        raise ValidationError("refusing to save invalid skeleton: " + "; ".join(problems))
    payload = json.dumps(graph_to_dict(g), indent=1)
    dir_ = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=dir_, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(payload + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_skeleton(path: str) -> SkeletonGraph:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"skeleton file {path} is not valid JSON: {exc}")
    return graph_from_dict(doc)


def skeleton_hash(g: SkeletonGraph) -> str:
    """Stable content hash used to pair datasets/checkpoints with a skeleton."""
    canon = json.dumps(graph_to_dict(g), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# -- pose file io ------------------------------------------------------------


def pose_to_dict(p: PoseParams) -> dict:
    return {
        "root_rotation": [float(v) for v in np.asarray(p.root_rotation_raw).reshape(9)],
        "root_offset": [float(v) for v in p.root_offset],
        "angles": [float(v) for v in p.angles],
        "proportions": [float(v) for v in p.proportions_raw],
        "anchor_length": float(p.anchor_length),
    }


def pose_from_dict(doc: dict, graph: SkeletonGraph | None = None) -> PoseParams:
    try:
        return pack_params(
            doc["root_rotation"],
            doc["root_offset"],
            doc["angles"],
            doc["proportions"],
            doc["anchor_length"],
            graph=graph,
        )
    except KeyError as exc:
        raise ValidationError(f"malformed pose document: missing {exc}")


def save_pose(path: str, p: PoseParams):
    with open(path, "w") as f:
        json.dump(pose_to_dict(p), f, indent=1)
        f.write("\n")


def load_pose(path: str, graph: SkeletonGraph | None = None) -> PoseParams:
    with open(path) as f:
        return pose_from_dict(json.load(f), graph=graph)
