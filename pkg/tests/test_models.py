"""Denoiser, IK head, temporal encoder, masks, and synthetic features."""

import numpy as np
import pytest

from handkin import autodiff as ad
from handkin import geometry as geo
from handkin import kinematics as kin
from handkin import models as mo
from handkin import skeleton as sk
from handkin.errors import ValidationError


@pytest.fixture(scope="module")
def graph():
    return sk.canonical_hand_topology()


# -- time embedding -----------------------------------------------------------


def test_time_embedding_at_zero():
    e = mo.time_embedding(0, 16)
    np.testing.assert_array_equal(e[:8], np.zeros(8))
    np.testing.assert_array_equal(e[8:], np.ones(8))


def test_time_embedding_rejects_odd_dim():
    with pytest.raises(ValidationError):
        mo.time_embedding(3, 7)


def test_time_embedding_pairwise_distinct():
    e = mo.time_embedding(np.arange(51), 16)
    assert e.shape == (51, 16)
    d = np.linalg.norm(e[:, None] - e[None, :], axis=-1)
    d[np.diag_indices(51)] = np.inf
    assert d.min() > 1e-3


# -- denoiser -----------------------------------------------------------------


def test_denoiser_zero_init_is_zero_map():
    net = mo.DenoiserNet(data_dim=8, feature_dim=4, time_dim=8, hidden=16, depth=3)
    for t in net.params.tensors():
        t.data[...] = 0.0
    out = net.forward(np.ones((5, 8)), np.arange(1, 6), np.ones((5, 4)))
    np.testing.assert_array_equal(out.data, np.zeros((5, 8)))


def test_denoiser_fresh_net_is_zero_map_by_final_layer_init():
    net = mo.DenoiserNet(data_dim=8, feature_dim=4, time_dim=8, hidden=16, depth=3,
                         rng=np.random.default_rng(0))
    out = net.forward(np.ones((2, 8)), np.array([1, 2]), np.zeros((2, 4)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 8)))


def test_denoiser_validates_widths():
    net = mo.DenoiserNet(data_dim=8, feature_dim=4, time_dim=8, hidden=16, depth=2)
    with pytest.raises(ValidationError, match="pose dim"):
        net.forward(np.ones((2, 9)), np.array([1, 1]), np.ones((2, 4)))
    with pytest.raises(ValidationError, match="feature dim"):
        net.forward(np.ones((2, 8)), np.array([1, 1]), np.ones((2, 5)))


def test_denoiser_feature_sensitivity():
    rng = np.random.default_rng(1)
    net = mo.DenoiserNet(data_dim=8, feature_dim=4, time_dim=8, hidden=16, depth=3, rng=rng)
    # make the output nontrivial: randomize the (zero-initialized) final layer
    for t in net.params.tensors():
        if not t.data.any():
            t.data[...] = rng.normal(size=t.data.shape) * 0.1
    x = rng.normal(size=(1, 8))
    a = net.forward(x, np.array([3]), np.zeros((1, 4))).data
    b = net.forward(x, np.array([3]), np.ones((1, 4))).data
    assert np.abs(a - b).max() > 1e-6


def test_denoiser_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    net = mo.DenoiserNet(data_dim=4, feature_dim=2, time_dim=4, hidden=8, depth=3, rng=rng)
    for t in net.params.tensors():
        if not t.data.any():
            t.data[...] = rng.normal(size=t.data.shape) * 0.2
    x = rng.normal(size=(3, 4))
    f = rng.normal(size=(3, 2))
    tt = np.array([1, 5, 9])

    def loss(*ps):
        out = net.forward(x, tt, f)
        return ad.mean_(out * out)

    report = ad.grad_check(loss, list(net.params.tensors()), tol=1e-5)
    assert report.passed, report


# -- ik head ------------------------------------------------------------------


def test_ik_project_fresh_head_gives_rest_pose(graph):
    head = mo.IkHead(graph, rng=np.random.default_rng(3))
    params, pos = mo.ik_project(head, np.zeros(63), graph)
    np.testing.assert_array_equal(params.root_rotation_raw, np.eye(3))
    np.testing.assert_array_equal(params.root_offset, np.zeros(3))
    assert params.anchor_length == 1.0
    # wrist at origin, anchor bone unit length: already normalized
    np.testing.assert_allclose(pos.positions[0], np.zeros(3), atol=1e-15)
    assert np.linalg.norm(pos.positions[5]) == pytest.approx(1.0)


def test_ik_project_always_satisfies_constraints(graph):
    rng = np.random.default_rng(4)
    head = mo.IkHead(graph, rng=rng)
    for t in head.params.tensors():
        t.data[...] = rng.normal(size=t.data.shape)  # garbage weights
    lo_a, hi_a = graph.angle_limit_arrays()
    lo_p, hi_p = graph.prop_limit_arrays()
    for scale in (1.0, 1e3, 1e6):
        x = rng.normal(size=63) * scale
        params, pos = mo.ik_project(head, x, graph)
        assert np.all(np.isfinite(pos.positions))
        ang = kin.sine_normalize(params.angles, lo_a, hi_a)
        prop = kin.sine_normalize(params.proportions_raw, lo_p, hi_p)
        assert np.all(ang >= lo_a) and np.all(ang <= hi_a)
        assert np.all(prop >= lo_p) and np.all(prop <= hi_p)
        r = kin.svd_orthogonalize(params.root_rotation_raw)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)


def test_ik_forward_gradients_through_fk(graph):
    rng = np.random.default_rng(5)
    head = mo.IkHead(graph, hidden=16, depth=2, rng=rng)
    for t in head.params.tensors():
        if not t.data.any():
            t.data[...] = rng.normal(size=t.data.shape) * 0.1
    x = rng.normal(size=(2, 63))
    target = rng.normal(size=(2, 21, 3))

    def loss(*ps):
        _, _, _, pos = mo.ik_forward(head, x, graph)
        return geo.loss_l1_3d(pos, target)

    report = ad.grad_check(loss, list(head.params.tensors()), tol=1e-4)
    assert report.passed, report


def test_ik_project_validates_shape(graph):
    head = mo.IkHead(graph)
    with pytest.raises(ValidationError):
        mo.ik_project(head, np.zeros(62), graph)


# -- temporal encoder ---------------------------------------------------------


def test_temporal_encoder_output_shape_and_determinism():
    enc = mo.TemporalEncoder(rng=np.random.default_rng(6))
    rng = np.random.default_rng(7)
    seq = rng.normal(size=(5, 63))
    a = enc.forward(seq).data
    b = enc.forward(seq).data
    assert a.shape == (5, 41)
    np.testing.assert_array_equal(a, b)


def test_temporal_encoder_single_frame_matches_window_of_one():
    enc = mo.TemporalEncoder(rng=np.random.default_rng(8))
    x = np.random.default_rng(9).normal(size=(1, 63))
    out = enc.forward(x).data
    assert out.shape == (1, 41)
    # the same frame inside a longer all-identical sequence yields the same
    # encoding when positions are disabled
    enc2 = mo.TemporalEncoder(positional=False, rng=np.random.default_rng(8))
    rep = enc2.forward(np.repeat(x, 5, axis=0)).data
    one = enc2.forward(x).data
    np.testing.assert_allclose(rep[0], one[0], atol=1e-12)


def test_temporal_encoder_constant_sequence_constant_output():
    enc = mo.TemporalEncoder(positional=False, rng=np.random.default_rng(10))
    x = np.random.default_rng(11).normal(size=(1, 63))
    out = enc.forward(np.repeat(x, 5, axis=0)).data
    assert np.abs(out - out[0]).max() < 1e-6


def test_temporal_encoder_hidden_frames_do_not_leak():
    enc = mo.TemporalEncoder(rng=np.random.default_rng(12))
    rng = np.random.default_rng(13)
    seq = rng.normal(size=(5, 63))
    mask = np.array([False, False, True, False, False])
    base = enc.forward(seq, mask=mask).data
    tampered = seq.copy()
    tampered[2] = rng.normal(size=63) * 10
    out = enc.forward(tampered, mask=mask).data
    visible = [0, 1, 3, 4]
    np.testing.assert_array_equal(out[visible], base[visible])
    assert np.abs(out[2] - base[2]).max() > 1e-9  # own stream still active


def test_temporal_encoder_batch_equivariance():
    enc = mo.TemporalEncoder(rng=np.random.default_rng(14))
    rng = np.random.default_rng(15)
    batch = rng.normal(size=(2, 5, 63))
    out = enc.forward(batch).data
    np.testing.assert_allclose(out[0], enc.forward(batch[0]).data, atol=1e-12)
    np.testing.assert_allclose(out[1], enc.forward(batch[1]).data, atol=1e-12)


def test_temporal_encoder_rejects_bad_inputs():
    enc = mo.TemporalEncoder(rng=np.random.default_rng(16))
    with pytest.raises(ValidationError, match="length"):
        enc.forward(np.zeros((6, 63)))
    with pytest.raises(ValidationError, match="every frame"):
        enc.forward(np.zeros((2, 63)), mask=np.array([True, True]))
    with pytest.raises(ValidationError, match="rng"):
        enc.forward(np.zeros((2, 63)), training=True)


def test_temporal_encoder_dropout_only_in_training():
    enc = mo.TemporalEncoder(rng=np.random.default_rng(17))
    seq = np.random.default_rng(18).normal(size=(3, 63))
    a = enc.forward(seq, rng=np.random.default_rng(0), training=True).data
    b = enc.forward(seq, rng=np.random.default_rng(1), training=True).data
    c = enc.forward(seq).data
    assert np.abs(a - b).max() > 1e-9  # different dropout draws differ
    np.testing.assert_array_equal(c, enc.forward(seq).data)


def test_temporal_encoder_gradients(graph):
    enc = mo.TemporalEncoder(
        window=3, dim=8, heads=2, layers=1, ffn_hidden=8, dropout=0.0,
        rng=np.random.default_rng(19),
    )
    rng = np.random.default_rng(20)
    for t in enc.params.tensors():
        if not t.data.any():
            t.data[...] = rng.normal(size=t.data.shape) * 0.1
    seq = rng.normal(size=(3, 63))
    target = rng.normal(size=(3, 41))
    mask = np.array([False, True, False])

    def loss(*ps):
        out = enc.forward(seq, mask=mask)
        d = ad.sub(out, target)
        return ad.mean_(d * d)

    report = ad.grad_check(loss, list(enc.params.tensors()), tol=1e-4)
    assert report.passed, report


# -- masks and averaging ------------------------------------------------------


def test_make_training_mask_bounds():
    rng = np.random.default_rng(21)
    assert not mo.make_training_mask(1, rng).any()
    counts = [mo.make_training_mask(10, rng).sum() for _ in range(2000)]
    assert max(counts) == 5 and min(counts) == 0
    assert len(set(counts)) == 6  # uniform support {0..5} all observed


def test_make_training_mask_reproducible():
    a = mo.make_training_mask(9, np.random.default_rng(22))
    b = mo.make_training_mask(9, np.random.default_rng(22))
    np.testing.assert_array_equal(a, b)


def test_bone_length_average(graph):
    lo, hi = graph.prop_limit_arrays()
    mid = (lo + hi) / 2
    same = np.tile(mid, (4, 1))
    np.testing.assert_array_equal(mo.bone_length_average(same, graph), mid)
    two = np.stack([mid, mid])
    two[0, 3], two[1, 3] = 0.4, 0.6
    assert mo.bone_length_average(two, graph)[3] == pytest.approx(0.5)
    wild = np.tile(mid, (2, 1))
    wild[:, 5] = 100.0
    out = mo.bone_length_average(wild, graph)
    assert out[5] == hi[5]
    with pytest.raises(ValidationError):
        mo.bone_length_average(np.zeros((0, graph.num_props)), graph)


# -- synthetic features -------------------------------------------------------


def make_camera():
    k = np.array([[500.0, 0, 128], [0, 500.0, 128], [0, 0, 1]])
    return geo.Camera(k, np.eye(3), np.zeros(3))


def test_synth_features_noiseless_matches_projection():
    cam = make_camera()
    rng = np.random.default_rng(23)
    pos = rng.normal(size=(21, 3)) * 0.1 + [0, 0, 1.0]
    f = mo.synth_features(pos, cam, 0.0, rng)
    assert f.shape == (42,)
    uv = geo.project(pos, cam.K)
    np.testing.assert_allclose(f[0::2], (uv[:, 0] - 128) / 128, atol=1e-12)
    np.testing.assert_allclose(f[1::2], (uv[:, 1] - 128) / 128, atol=1e-12)


def test_synth_features_seeded_reproducibility():
    cam = make_camera()
    pos = np.random.default_rng(24).normal(size=(21, 3)) * 0.1 + [0, 0, 1.0]
    a = mo.synth_features(pos, cam, 0.5, np.random.default_rng(0))
    b = mo.synth_features(pos, cam, 0.5, np.random.default_rng(0))
    np.testing.assert_array_equal(a, b)


def test_synth_features_retrieval(graph):
    """Noisy features must still identify their generating pose."""
    cam = make_camera()
    rng = np.random.default_rng(25)
    n = 1000
    poses = kin.fk_core(
        graph,
        np.eye(3) + 0.3 * rng.normal(size=(n, 3, 3)),
        np.concatenate(
            [rng.normal(size=(n, 2)) * 0.05, rng.uniform(0.5, 0.7, size=(n, 1))], axis=1
        ),
        rng.normal(size=(n, graph.num_angles)),
        rng.normal(size=(n, graph.num_props)),
        rng.uniform(0.08, 0.12, size=n),
    )
    clean = mo.synth_features(poses, cam, 0.0, rng)
    noisy = mo.synth_features(poses, cam, 0.5, rng)
    d = np.linalg.norm(clean[None, :, :] - noisy[:, None, :], axis=-1)
    top1 = (d.argmin(axis=1) == np.arange(n)).mean()
    assert top1 > 0.95
