"""Kinematics: normalization, rotations, FK against an independent reference."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handkin import kinematics as kin
from handkin import skeleton as sk
from handkin.errors import ValidationError

from fk_reference import reference_fk


def chain_graph():
    """root -> a -> b along +x, proportions pinned to 1, no articulation."""
    none3 = (None, None, None)
    x = np.array([1.0, 0.0, 0.0])
    joints = [
        sk.JointSpec(0, None, 0, none3, None, None),
        sk.JointSpec(1, 0, 0, none3, x, (1.0, 1.0)),
        sk.JointSpec(2, 1, 0, none3, x, (1.0, 1.0)),
    ]
    return sk.SkeletonGraph(joints=joints, anchor_edge=1)


def random_params(g, rng, root_scale=0.5, angle_scale=1.0):
    return sk.pack_params(
        np.eye(3) + root_scale * rng.normal(size=(3, 3)),
        rng.normal(size=3),
        angle_scale * rng.normal(size=g.num_angles),
        rng.normal(size=g.num_props),
        float(rng.uniform(0.05, 0.15)),
        graph=g,
    )


# -- sine normalization -------------------------------------------------------


def test_sine_normalize_landmarks():
    lo, hi = -0.2, 1.4
    assert kin.sine_normalize(0.0, lo, hi) == pytest.approx((lo + hi) / 2)
    assert kin.sine_normalize(math.pi / 2, lo, hi) == pytest.approx(hi)
    assert kin.sine_normalize(-math.pi / 2, lo, hi) == pytest.approx(lo)


def test_sine_normalize_monotone_between_saturations():
    xs = np.linspace(-math.pi / 2 + 1e-6, math.pi / 2 - 1e-6, 500)
    ys = kin.sine_normalize(xs, 0.0, 1.0)
    assert np.all(np.diff(ys) > 0)


@given(
    x=st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
    lo=st.floats(min_value=-3.0, max_value=1.0),
    width=st.floats(min_value=0.0, max_value=4.0),
)
@settings(max_examples=300, deadline=None)
def test_sine_normalize_always_in_bounds(x, lo, width):
    hi = lo + width
    a = float(kin.sine_normalize(np.array(x), lo, hi))
    assert lo <= a <= hi


def test_sine_denormalize_roundtrip():
    rng = np.random.default_rng(0)
    lo = np.array([-0.3, 0.0, 1.0, 2.0])
    hi = np.array([0.4, 1.7, 1.0, 2.5])  # one zero-width interval
    target = lo + (hi - lo) * rng.uniform(0, 1, size=4)
    raw = kin.sine_denormalize(target, lo, hi)
    back = kin.sine_normalize(raw, lo, hi)
    np.testing.assert_allclose(back, target, atol=1e-12)


# -- euler rotations ----------------------------------------------------------


def test_euler_example_x_quarter_turn():
    r = kin.euler_to_rotation([math.pi / 2, 0.0, 0.0])
    np.testing.assert_allclose(r @ np.array([0.0, 1.0, 0.0]), [0.0, 0.0, 1.0], atol=1e-12)


def test_euler_composition_order():
    e = np.array([0.3, 0.0, 0.8])
    want = kin.euler_to_rotation([0, 0, e[2]]) @ kin.euler_to_rotation([e[0], 0, 0])
    np.testing.assert_allclose(kin.euler_to_rotation(e), want, atol=1e-12)


def test_euler_orthonormal_property():
    rng = np.random.default_rng(3)
    for _ in range(25):
        r = kin.euler_to_rotation(rng.uniform(-math.pi, math.pi, size=3))
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)


def test_euler_active_axes_validation():
    with pytest.raises(ValidationError):
        kin.euler_to_rotation([0.1, 0.2, 0.0], active_axes=(0,))
    r = kin.euler_to_rotation([0.1, 0.0, 0.0], active_axes=(0,))
    assert r.shape == (3, 3)


# -- forward kinematics -------------------------------------------------------


def test_fk_straight_chain():
    g = chain_graph()
    p = sk.pack_params(np.eye(3), np.zeros(3), np.zeros(0), np.zeros(2), 1.0, graph=g)
    joints, poses = kin.forward_kinematics(g, p)
    np.testing.assert_allclose(
        joints.positions, [[0, 0, 0], [1, 0, 0], [2, 0, 0]], atol=1e-12
    )
    assert len(poses) == 3
    np.testing.assert_allclose(poses[2].rotation, np.eye(3), atol=1e-12)


def test_fk_chain_rotated_root():
    g = chain_graph()
    rz = kin.euler_to_rotation([0.0, 0.0, math.pi / 2])
    p = sk.pack_params(rz, np.zeros(3), np.zeros(0), np.zeros(2), 1.0, graph=g)
    joints, _ = kin.forward_kinematics(g, p)
    np.testing.assert_allclose(
        joints.positions, [[0, 0, 0], [0, 1, 0], [0, 2, 0]], atol=1e-12
    )


def test_fk_translation_invariance():
    g = sk.canonical_hand_topology()
    rng = np.random.default_rng(5)
    p = random_params(g, rng)
    j1, _ = kin.forward_kinematics(g, p)
    shifted = sk.pack_params(
        p.root_rotation_raw, p.root_offset + [1.0, -2.0, 3.0], p.angles,
        p.proportions_raw, p.anchor_length, graph=g,
    )
    j2, _ = kin.forward_kinematics(g, shifted)
    np.testing.assert_allclose(j2.positions - j1.positions, np.tile([1.0, -2.0, 3.0], (21, 1)), atol=1e-9)


def test_fk_matches_reference_on_canonical_graph():
    g = sk.canonical_hand_topology()
    rng = np.random.default_rng(7)
    for _ in range(50):
        p = random_params(g, rng, root_scale=0.8, angle_scale=2.0)
        got, _ = kin.forward_kinematics(g, p)
        want = reference_fk(g, p)
        err = np.abs(got.positions - want).max() / p.anchor_length
        assert err < 1e-9


def test_fk_wrist_slots_are_inert():
    g = sk.canonical_hand_topology()
    rng = np.random.default_rng(9)
    p = random_params(g, rng)
    moved = sk.pack_params(
        p.root_rotation_raw, p.root_offset,
        np.concatenate([rng.normal(size=3), p.angles[3:]]),
        p.proportions_raw, p.anchor_length, graph=g,
    )
    j1, _ = kin.forward_kinematics(g, p)
    j2, _ = kin.forward_kinematics(g, moved)
    np.testing.assert_array_equal(j1.positions, j2.positions)


def test_fk_batched_matches_single():
    g = sk.canonical_hand_topology()
    rng = np.random.default_rng(11)
    ps = [random_params(g, rng) for _ in range(4)]
    batched = kin.fk_core(
        g,
        np.stack([p.root_rotation_raw for p in ps]),
        np.stack([p.root_offset for p in ps]),
        np.stack([p.angles for p in ps]),
        np.stack([p.proportions_raw for p in ps]),
        np.array([p.anchor_length for p in ps]),
    )
    for i, p in enumerate(ps):
        single, _ = kin.forward_kinematics(g, p)
        np.testing.assert_allclose(batched[i], single.positions, atol=1e-12)


def test_fk_rejects_mismatched_params():
    g = sk.canonical_hand_topology()
    p = sk.pack_params(np.eye(3), np.zeros(3), np.zeros(41), np.zeros(20), 1.0, graph=g)
    p.angles = np.zeros(10)  # mutate behind the validator
    with pytest.raises(ValidationError, match="angles"):
        kin.forward_kinematics(g, p)


def test_constraints_hold_for_extreme_raw_values():
    g = sk.canonical_hand_topology()
    lo, hi = g.angle_limit_arrays()
    rng = np.random.default_rng(13)
    raw = rng.normal(size=(200, 41)) * np.exp(rng.uniform(0, np.log(1e6), size=(200, 1)))
    a = kin.sine_normalize(raw, lo, hi)
    assert np.all(a >= lo) and np.all(a <= hi)


# -- jacobian -----------------------------------------------------------------


def fd_jacobian(g, params, h=1e-6):
    def positions(p):
        j, _ = kin.forward_kinematics(g, p)
        return j.positions.ravel()

    base_vec = np.concatenate(
        [
            params.root_rotation_raw.ravel(),
            params.root_offset,
            params.angles,
            params.proportions_raw,
            [params.anchor_length],
        ]
    )

    def rebuild(vec):
        a = g.num_angles
        pr = g.num_props
        return sk.pack_params(
            vec[:9].reshape(3, 3), vec[9:12], vec[12 : 12 + a],
            vec[12 + a : 12 + a + pr], vec[-1], graph=g,
        )

    cols = []
    for i in range(base_vec.size):
        up = base_vec.copy()
        dn = base_vec.copy()
        up[i] += h
        dn[i] -= h
        cols.append((positions(rebuild(up)) - positions(rebuild(dn))) / (2 * h))
    return np.stack(cols, axis=1)


def test_fk_jacobian_matches_finite_differences():
    g = sk.canonical_hand_topology()
    rng = np.random.default_rng(17)
    p = random_params(g, rng)
    got = kin.fk_jacobian(g, p)
    want = fd_jacobian(g, p)
    assert got.shape == (63, 74)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-7)


def test_fk_jacobian_masked_and_anchor_columns():
    g = sk.canonical_hand_topology()
    rng = np.random.default_rng(19)
    p = random_params(g, rng)
    jac = kin.fk_jacobian(g, p)
    # wrist angle slots are dof-masked: exactly zero columns
    np.testing.assert_array_equal(jac[:, 12:15], np.zeros((63, 3)))
    # anchor proportion slot is pinned at (1, 1): zero column
    anchor_prop_col = 12 + 41 + g.prop_index[g.anchor_edge]
    np.testing.assert_array_equal(jac[:, anchor_prop_col], np.zeros(63))
    # anchor-length column is the scale direction (positions - root) / anchor
    joints, _ = kin.forward_kinematics(g, p)
    want = ((joints.positions - p.root_offset) / p.anchor_length).ravel()
    np.testing.assert_allclose(jac[:, -1], want, atol=1e-9)


# -- positions files ----------------------------------------------------------


def test_positions_jsonl_roundtrip(tmp_path):
    rng = np.random.default_rng(23)
    frames = [rng.normal(size=(21, 3)) for _ in range(3)]
    path = str(tmp_path / "pos.jsonl")
    kin.save_positions_jsonl(path, frames)
    back = kin.load_positions_jsonl(path)
    assert len(back) == 3
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a, b)
    with open(path, "a") as f:
        f.write("{bad json\n")
    with pytest.raises(ValidationError, match="pos.jsonl:4"):
        kin.load_positions_jsonl(path)
