"""Inverse kinematics by damped least squares, plus corpus limit extraction."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateInputError, NumericalError, ValidationError
from .kinematics import (
    JointPositions,
    fk_jacobian,
    forward_kinematics,
    sine_normalize,
    svd_orthogonalize,
)
from .skeleton import PoseParams, SkeletonGraph, pack_params


@dataclass(frozen=True)
class IkConfig:
    max_iters: int = 200
    lambda_init: float = 1e-3
    lambda_max: float = 1e15
    residual_tol: float = 1e-8
    grad_tol: float = 1e-10


@dataclass
class FitResult:
    params: PoseParams
    residual_mpjpe: float
    iterations: int
    converged: bool
    cost_history: list = field(default_factory=list)


def _theta_to_params(theta: np.ndarray, g: SkeletonGraph) -> PoseParams:
    a, p = g.num_angles, g.num_props
    return pack_params(
        theta[:9].reshape(3, 3),
        theta[9:12],
        theta[12 : 12 + a],
        theta[12 + a : 12 + a + p],
        float(np.exp(theta[-1])),
        graph=g,
    )


def _residual(g: SkeletonGraph, theta: np.ndarray, target: np.ndarray):
    params = _theta_to_params(theta, g)
    pos, _ = forward_kinematics(g, params)
    diff = pos.positions - target
    return diff.ravel(), float(np.linalg.norm(diff, axis=1).mean())


def default_init(g: SkeletonGraph, target: np.ndarray) -> np.ndarray:
    """Parameter vector aligned to the target's palm orientation.

    Estimates the root rotation by orthogonally aligning the rest pose's
    root-child directions with the target's, which puts the solver into the
    right basin far more often than an identity start.
    """
    n = 9 + 3 + g.num_angles + g.num_props + 1
    theta = np.zeros(n)
    rest = pack_params(
        np.eye(3), np.zeros(3), np.zeros(g.num_angles), np.zeros(g.num_props), 1.0, graph=g
    )
    rest_pos, _ = forward_kinematics(g, rest)
    root = g.root_id()
    bases = [j.id for j in g.joints if j.parent == root]
    a = rest_pos.positions[bases] - rest_pos.positions[root]
    b = target[bases] - target[root]
    try:
        r = svd_orthogonalize(b.T @ a)
    except (NumericalError, DegenerateInputError):
        r = np.eye(3)
    theta[:9] = r.ravel()
    theta[9:12] = target[root]
    return theta


def fit_pose(
    target,
    graph: SkeletonGraph,
    init: np.ndarray | None = None,
    config: IkConfig | None = None,
) -> FitResult:
    """Fit pose parameters to 21 target joint positions.

    Levenberg-Marquardt over raw (pre-normalization) parameters, so every
    candidate during optimization satisfies the skeleton constraints. The
    problem is solved in target-normalized coordinates (wrist at the origin,
    unit anchor bone) and rescaled afterwards; residual_mpjpe is reported in
    anchor-normalized units.
    """
    cfg = config or IkConfig()
    t_raw = np.asarray(
        target.positions if isinstance(target, JointPositions) else target,
        dtype=np.float64,
    )
    if t_raw.shape != (len(graph.joints), 3):
        raise ValidationError(f"target must have shape ({len(graph.joints)}, 3)")

    root = t_raw[graph.root_id()]
    scale = float(np.linalg.norm(t_raw[graph.anchor_edge] - root))
    if scale <= 1e-12:
        scale = 1.0  # degenerate target: fit in raw units, let the residual speak
    t_norm = (t_raw - root) / scale

    theta = default_init(graph, t_norm) if init is None else np.asarray(init, dtype=np.float64).copy()
    r, cost = _residual(graph, theta, t_norm)
    lam = cfg.lambda_init
    history = [cost]
    iters = 0
    grad_stop = False
    n = theta.size

    while iters < cfg.max_iters and cost >= cfg.residual_tol:
        iters += 1
        jac = fk_jacobian(graph, _theta_to_params(theta, graph))
        if not np.all(np.isfinite(jac)):
            raise NumericalError(f"non-finite IK Jacobian at iteration {iters}")
        # chain rule through anchor_length = exp(theta[-1])
        jac = jac.copy()
        jac[:, -1] *= np.exp(theta[-1])
        g_vec = jac.T @ r
        if np.abs(g_vec).max() < cfg.grad_tol:
            grad_stop = True
            break
        jtj = jac.T @ jac
        improved = False
        while lam <= cfg.lambda_max:
            try:
                delta = np.linalg.solve(jtj + lam * np.eye(n), -g_vec)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = theta + delta
            r_new, cost_new = _residual(graph, cand, t_norm)
            if cost_new < cost:
                theta, r, cost = cand, r_new, cost_new
                lam = max(lam / 10, 1e-12)
                history.append(cost)
                improved = True
                break
            lam *= 10
        if not improved:
            break

    params_norm = _theta_to_params(theta, graph)
    params = pack_params(
        params_norm.root_rotation_raw,
        params_norm.root_offset * scale + root,
        params_norm.angles,
        params_norm.proportions_raw,
        params_norm.anchor_length * scale,
        graph=graph,
    )
    # a fit that shrank the hand below 1% of the target scale solved a
    # degenerate problem (e.g. an all-origin target); report it unconverged
    scale_ok = params_norm.anchor_length > 1e-2
    converged = scale_ok and (cost < cfg.residual_tol or (grad_stop and cost < 1e-3))
    return FitResult(
        params=params,
        residual_mpjpe=cost,
        iterations=iters,
        converged=converged,
        cost_history=history,
    )


def restarts(
    target,
    graph: SkeletonGraph,
    n: int,
    rng: np.random.Generator,
    config: IkConfig | None = None,
    early_stop: float = 1e-6,
) -> FitResult:
    """Best of n fits from randomized initializations.

    The first attempt uses the aligned default start; later attempts perturb
    it. Stops early once a fit beats ``early_stop`` residual.
    """
    if n < 1:
        raise ValidationError("restarts needs n >= 1")
    t_raw = np.asarray(
        target.positions if isinstance(target, JointPositions) else target,
        dtype=np.float64,
    )
    best: FitResult | None = None
    for k in range(n):
        if k == 0:
            init = None
        else:
            root = t_raw[graph.root_id()]
            scale = float(np.linalg.norm(t_raw[graph.anchor_edge] - root))
            base = default_init(graph, (t_raw - root) / (scale if scale > 1e-12 else 1.0))
            init = base.copy()
            init[:9] += 0.7 * rng.standard_normal(9)
            init[12 : 12 + graph.num_angles] = rng.standard_normal(graph.num_angles)
            init[12 + graph.num_angles : -1] = 0.3 * rng.standard_normal(graph.num_props)
            init[-1] = 0.2 * rng.standard_normal()
        fit = fit_pose(target, graph, init=init, config=config)
        if best is None or fit.residual_mpjpe < best.residual_mpjpe:
            best = fit
        if best.residual_mpjpe < early_stop:
            break
    return best


@dataclass(frozen=True)
class LimitStats:
    """Empirical spread and chosen limits per angle slot and proportion."""

    angle_min: np.ndarray
    angle_max: np.ndarray
    angle_mean: np.ndarray
    angle_std: np.ndarray
    angle_limits: np.ndarray  # (A, 2)
    prop_min: np.ndarray
    prop_max: np.ndarray
    prop_mean: np.ndarray
    prop_std: np.ndarray
    prop_limits: np.ndarray  # (P, 2)


def _chosen_limits(values: np.ndarray, percentile: float, pad: float) -> np.ndarray:
    lo = np.percentile(values, percentile, axis=0)
    hi = np.percentile(values, 100.0 - percentile, axis=0)
    width = hi - lo
    abs_pad = max(pad, 1e-6)
    out = np.stack(
        [
            np.where(width > 1e-12, lo - pad * width, lo - abs_pad),
            np.where(width > 1e-12, hi + pad * width, hi + abs_pad),
        ],
        axis=-1,
    )
    return out


def extract_limits(
    fits: list[FitResult],
    graph: SkeletonGraph,
    percentile: float = 1.0,
    pad: float = 0.05,
):
    """Derive data-driven limits from a corpus of converged fits.

    Returns (LimitStats, new SkeletonGraph). Limits are percentile bands of
    the normalized fitted values, widened by ``pad`` of the band width (or by
    ``pad`` absolutely when the band collapses). Root-joint angle slots are
    kinematically inert and keep their configured limits, as does the pinned
    anchor proportion.
    """
    good = [f for f in fits if f.converged]
    if len(good) < 2:
        raise ValidationError("insufficient data: need at least 2 converged fits")
    if not (0.0 <= percentile < 50.0):
        raise ValidationError("percentile must lie in [0, 50)")
    lo_a, hi_a = graph.angle_limit_arrays()
    lo_p, hi_p = graph.prop_limit_arrays()
    angles = np.stack([sine_normalize(f.params.angles, lo_a, hi_a) for f in good])
    props = np.stack(
        [sine_normalize(f.params.proportions_raw, lo_p, hi_p) for f in good]
    )
    a_lim = _chosen_limits(angles, percentile, pad)
    p_lim = _chosen_limits(props, percentile, pad)

    stats = LimitStats(
        angle_min=angles.min(axis=0),
        angle_max=angles.max(axis=0),
        angle_mean=angles.mean(axis=0),
        angle_std=angles.std(axis=0),
        angle_limits=a_lim,
        prop_min=props.min(axis=0),
        prop_max=props.max(axis=0),
        prop_mean=props.mean(axis=0),
        prop_std=props.std(axis=0),
        prop_limits=p_lim,
    )
    new_graph = _apply_limits(graph, a_lim, p_lim)
    return stats, new_graph


def _apply_limits(
    graph: SkeletonGraph, a_lim: np.ndarray, p_lim: np.ndarray
) -> SkeletonGraph:
    root = graph.root_id()
    new_joints = []
    for j in graph.joints:
        euler = list(j.euler_limits)
        if j.id != root:
            for slot, axis in graph.angle_slots[j.id]:
                euler[axis] = (float(a_lim[slot, 0]), float(a_lim[slot, 1]))
        splay = j.splay_limits
        if j.id in graph.splay_slots:
            splay = tuple(
                (float(a_lim[s, 0]), float(a_lim[s, 1])) for s in graph.splay_slots[j.id]
            )
        prop = j.proportion_limits
        if j.parent is not None and j.id != graph.anchor_edge:
            s = graph.prop_index[j.id]
            prop = (float(p_lim[s, 0]), float(p_lim[s, 1]))
        new_joints.append(
            replace(j, euler_limits=tuple(euler), splay_limits=splay, proportion_limits=prop)
        )
    return SkeletonGraph(joints=new_joints, anchor_edge=graph.anchor_edge)
