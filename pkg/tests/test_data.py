"""Dataset generation determinism, FK consistency, flip convention, IO errors."""

import numpy as np
import pytest

from handkin.config import config_from_dict
from handkin.data import (
    camera_from_config,
    gen_poses,
    gen_sequences,
    group_sequences,
    load_dataset,
    save_dataset,
    stack_records,
)
from handkin.errors import ValidationError
from handkin.kinematics import fk_core
from handkin.models import synth_features
from handkin.skeleton import canonical_hand_topology


@pytest.fixture(scope="module")
def graph():
    return canonical_hand_topology()


def small_cfg(**data):
    base = {"n_poses": 20, "n_sequences": 4, "seq_len": 5, "seed": 3}
    base.update(data)
    return config_from_dict({"data": base})


def test_same_seed_byte_identical(tmp_path, graph):
    cfg = small_cfg()
    for name in ("a.jsonl", "b.jsonl"):
        header, recs = gen_poses(cfg, graph)
        save_dataset(str(tmp_path / name), header, recs)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_different_seed_differs(tmp_path, graph):
    h1, r1 = gen_poses(small_cfg(), graph)
    h2, r2 = gen_poses(small_cfg(seed=4), graph)
    assert not np.array_equal(r1[0].positions, r2[0].positions)


def test_positions_match_fk(graph):
    _, recs = gen_poses(small_cfg(), graph)
    for r in recs:
        p = r.params
        pos = fk_core(
            graph,
            p.root_rotation_raw[None],
            p.root_offset[None],
            p.angles[None],
            p.proportions_raw[None],
            np.array([p.anchor_length]),
        )[0]
        assert np.max(np.abs(pos - r.positions)) < 1e-9


def test_features_reproducible_from_seed(graph):
    cfg = small_cfg()
    cam = camera_from_config(cfg)
    _, recs = gen_poses(cfg, graph)
    r = recs[7]
    again = synth_features(
        r.positions, cam, cfg.data.noise_sigma, np.random.default_rng(r.feature_seed)
    )
    assert np.array_equal(again, r.features)


def test_depth_keeps_hand_in_front(graph):
    _, recs = gen_poses(small_cfg(n_poses=200), graph)
    z = np.stack([r.positions for r in recs])[..., 2]
    assert z.min() > 0.1


def test_save_load_roundtrip(tmp_path, graph):
    cfg = small_cfg()
    header, recs = gen_poses(cfg, graph)
    path = str(tmp_path / "poses.jsonl")
    save_dataset(path, header, recs)
    h2, r2 = load_dataset(path)
    assert h2 == header
    assert len(r2) == len(recs)
    for a, b in zip(recs, r2):
        assert np.allclose(a.positions, b.positions, atol=0)
        assert np.allclose(a.features, b.features, atol=0)
        assert a.feature_seed == b.feature_seed
        assert np.allclose(a.params.angles, b.params.angles, atol=0)


def test_flip_roundtrips_to_right_hand_space(tmp_path, graph):
    """Flipped datasets differ on disk but load back into the same space."""
    header, recs = gen_poses(small_cfg(), graph)
    fheader, frecs = gen_poses(small_cfg(flip_x=True), graph)
    pa, pb = str(tmp_path / "rh.jsonl"), str(tmp_path / "lh.jsonl")
    save_dataset(pa, header, recs)
    save_dataset(pb, fheader, frecs)
    assert (tmp_path / "rh.jsonl").read_bytes() != (tmp_path / "lh.jsonl").read_bytes()
    _, ra = load_dataset(pa)
    _, rb = load_dataset(pb)
    for a, b in zip(ra, rb):
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.features, b.features)


def test_flip_stored_positions_mirrored(tmp_path, graph):
    header, recs = gen_poses(small_cfg(flip_x=True), graph)
    path = str(tmp_path / "lh.jsonl")
    save_dataset(path, header, recs)
    import json

    lines = (tmp_path / "lh.jsonl").read_text().splitlines()
    stored = np.array(json.loads(lines[1])["positions"])
    assert np.array_equal(stored[:, 0], -recs[0].positions[:, 0])
    assert np.array_equal(stored[:, 1:], recs[0].positions[:, 1:])


def test_sequences_structure(graph):
    cfg = small_cfg()
    header, recs = gen_sequences(cfg, graph)
    assert header["count"] == 4 * 5
    groups = group_sequences(recs)
    assert sorted(groups) == [0, 1, 2, 3]
    for seq in groups.values():
        assert [r.frame_index for r in seq] == [0, 1, 2, 3, 4]
        p0 = seq[0].params
        for r in seq[1:]:
            assert np.array_equal(r.params.root_rotation_raw, p0.root_rotation_raw)
            assert np.array_equal(r.params.proportions_raw, p0.proportions_raw)
            assert r.params.anchor_length == p0.anchor_length
        assert r.observed_positions is not None
        assert r.observed_positions.shape == r.positions.shape


def test_sequence_smoothness(graph):
    """Mean per-frame joint displacement stays below 10% of anchor length."""
    cfg = small_cfg(n_sequences=30, seq_len=5)
    _, recs = gen_sequences(cfg, graph)
    ratios = []
    for seq in group_sequences(recs).values():
        pos = np.stack([r.positions for r in seq])
        step = np.linalg.norm(np.diff(pos, axis=0), axis=-1).mean()
        ratios.append(step / seq[0].params.anchor_length)
    assert np.mean(ratios) < 0.10


def test_observed_noise_scale(graph):
    cfg = small_cfg(n_sequences=30)
    _, recs = gen_sequences(cfg, graph)
    devs = np.concatenate(
        [(r.observed_positions - r.positions).ravel() for r in recs]
    )
    anchors = np.array([r.params.anchor_length for r in recs]).mean()
    assert abs(devs.std() - cfg.data.estimate_noise * anchors) < 0.3 * cfg.data.estimate_noise * anchors


def test_load_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(ValidationError, match="bad.jsonl:1"):
        load_dataset(str(p))
    p.write_text('{"kind": "poses"}\n')
    with pytest.raises(ValidationError, match="header"):
        load_dataset(str(p))


def test_load_rejects_count_mismatch(tmp_path, graph):
    header, recs = gen_poses(small_cfg(n_poses=3), graph)
    path = str(tmp_path / "p.jsonl")
    save_dataset(path, header, recs)
    lines = (tmp_path / "p.jsonl").read_text().splitlines()
    (tmp_path / "p.jsonl").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValidationError, match="promises 3"):
        load_dataset(path)


def test_load_rejects_bad_record_line(tmp_path, graph):
    header, recs = gen_poses(small_cfg(n_poses=2), graph)
    path = str(tmp_path / "p.jsonl")
    save_dataset(path, header, recs)
    lines = (tmp_path / "p.jsonl").read_text().splitlines()
    lines[2] = '{"index": 1}'
    (tmp_path / "p.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match="p.jsonl:3"):
        load_dataset(path)


def test_stack_records_shapes(graph):
    g = graph
    _, recs = gen_poses(small_cfg(), g)
    cols = stack_records(recs)
    assert cols["positions"].shape == (20, len(g.joints), 3)
    assert cols["features"].shape == (20, 2 * len(g.joints))
    assert cols["angles_raw"].shape == (20, g.num_angles)
    assert cols["props_raw"].shape == (20, g.num_props)
    assert cols["anchor"].shape == (20,)
