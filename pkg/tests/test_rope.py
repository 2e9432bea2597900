import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echomotion import numerics as nx
from echomotion.numerics import Tensor
from echomotion.rope import (
    Modality,
    PositionIndex,
    RopeConfig,
    angles,
    apply_mvs_rope,
    motion_positions,
    rope_rotate,
    sequence_tables,
    video_positions,
)

CFG = RopeConfig(head_dim=16)


def _plain_rope_3d(vec, t, h, w, theta=10000.0):
    """Independent 3D RoPE: explicit 2x2 rotation matrices, one pair at a time."""
    out = np.array(vec, dtype=np.float64)
    d_t, d_h = len(vec) // 2, len(vec) // 4
    for start, dims, pos in ((0, d_t, t), (d_t, d_h, h), (d_t + d_h, d_h, w)):
        for j in range(dims // 2):
            a = pos * theta ** (-2.0 * j / dims)
            rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
            i = start + 2 * j
            out[i : i + 2] = rot @ out[i : i + 2]
    return out


def test_zero_position_is_identity(rng):
    v = rng.normal(size=16)
    np.testing.assert_array_equal(rope_rotate(v, 0.0), v)
    np.testing.assert_allclose(apply_mvs_rope(v, PositionIndex(0, 0, 0, Modality.VIDEO), 8, 8, CFG), v)


@settings(max_examples=50, deadline=None)
@given(pos=st.floats(-1e3, 1e3), seed=st.integers(0, 10**6), pairs=st.integers(1, 8))
def test_rotation_preserves_norm(pos, seed, pairs):
    v = np.random.default_rng(seed).normal(size=2 * pairs)
    assert np.linalg.norm(rope_rotate(v, pos)) == pytest.approx(np.linalg.norm(v), rel=1e-5)


@settings(max_examples=50, deadline=None)
@given(p=st.floats(-50, 50), p2=st.floats(-50, 50), seed=st.integers(0, 10**6))
def test_relative_position_identity(p, p2, seed):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=8), rng.normal(size=8)
    lhs = rope_rotate(q, p) @ rope_rotate(k, p2)
    rhs = rope_rotate(q, p - p2) @ k
    assert lhs == pytest.approx(rhs, abs=1e-5)


def test_odd_dims_and_bad_positions_rejected():
    with pytest.raises(ValueError):
        rope_rotate(np.ones(5), 1.0)
    with pytest.raises(ValueError):
        rope_rotate(np.ones(4), float("nan"))
    with pytest.raises(ValueError):
        RopeConfig(head_dim=12)  # head_dim/4 = 3 is odd


def test_axis_split():
    assert RopeConfig(head_dim=32).axis_dims == (16, 8, 8)


@settings(max_examples=30, deadline=None)
@given(t=st.integers(0, 20), h=st.integers(0, 7), w=st.integers(0, 7), seed=st.integers(0, 10**6))
def test_video_tokens_are_plain_3d_rope(t, h, w, seed):
    v = np.random.default_rng(seed).normal(size=16)
    got = apply_mvs_rope(v, PositionIndex(t, h, w, Modality.VIDEO), 8, 8, CFG)
    np.testing.assert_allclose(got, _plain_rope_3d(v, t, h, w), atol=1e-12)


def test_motion_frame4_temporal_matches_video_t1(rng):
    v = rng.normal(size=16)
    motion = apply_mvs_rope(v, PositionIndex(4 / 4, 8, 8, Modality.MOTION), 8, 8, CFG)
    video_t1 = apply_mvs_rope(v, PositionIndex(1, 0, 0, Modality.VIDEO), 8, 8, CFG)
    np.testing.assert_array_equal(motion[:8], video_t1[:8])


def test_motion_spatial_angles_equal_plain_rope_at_grid_corner(rng):
    v = rng.normal(size=16)
    got = apply_mvs_rope(v, PositionIndex(0.25, 8, 8, Modality.MOTION), 8, 8, CFG)
    np.testing.assert_allclose(got[8:], _plain_rope_3d(v, 0.25, 8, 8)[8:], atol=1e-12)
    np.testing.assert_allclose(got, _plain_rope_3d(v, 0.25, 8, 8), atol=1e-12)


def test_collision_mode_starts_motion_at_origin(rng):
    v = rng.normal(size=16)
    cfg = RopeConfig(head_dim=16, collision_mode=True)
    got = apply_mvs_rope(v, PositionIndex(0.5, 8 + 3, 8 + 3, Modality.MOTION), 8, 8, cfg)
    np.testing.assert_allclose(got, _plain_rope_3d(v, 0.5, 3, 3), atol=1e-12)


def test_index_validation():
    with pytest.raises(ValueError):
        apply_mvs_rope(np.ones(16), PositionIndex(0, 8, 8, Modality.VIDEO), 8, 8, CFG)
    with pytest.raises(ValueError):
        apply_mvs_rope(np.ones(16), PositionIndex(0, 9, 10, Modality.MOTION), 8, 8, CFG)
    with pytest.raises(ValueError):
        apply_mvs_rope(np.ones(16), PositionIndex(0, 3, 3, Modality.MOTION), 8, 8, CFG)


@settings(max_examples=30, deadline=None)
@given(h_lat=st.integers(1, 12), w_lat=st.integers(1, 12), frames=st.sampled_from([1, 5, 9]))
def test_modalities_never_share_spatial_coordinates(h_lat, w_lat, frames):
    vid = video_positions(3, h_lat, w_lat)
    mot = motion_positions(frames, 51, h_lat, w_lat)
    vid_hw = {tuple(x) for x in vid[:, 1:]}
    mot_hw = {tuple(x) for x in mot[:, 1:]}
    assert not vid_hw & mot_hw
    assert (mot[:, 1] >= h_lat).all() and (mot[:, 2] >= w_lat).all()


def test_collision_mode_overlaps_video_grid():
    vid = {tuple(x) for x in video_positions(1, 8, 8)[:, 1:]}
    mot = {tuple(x) for x in motion_positions(1, 51, 8, 8, collision_mode=True)[:, 1:]}
    assert vid & mot


def test_motion_times_hit_video_grid():
    t = motion_positions(17, 51, 8, 8)[:, 0]
    on_grid = {x for x in t if float(x).is_integer()}
    assert on_grid == set(range(5))
    assert set(t[::51]) == {f / 4 for f in range(17)}


def test_sequence_tables_match_per_token_rotation(f64, rng):
    pos, cos, sin = sequence_tables(2, 2, 2, 5, 3, CFG, True, True, np.float64)
    assert pos.shape == (2 * 2 * 2 + 5 * 3, 3)
    v = rng.normal(size=(len(pos), 16))
    rotated = nx.rope(Tensor(v), cos, sin).data
    for i in (0, 7, 8, len(pos) - 1):
        expect = _plain_rope_3d(v[i], *pos[i])
        np.testing.assert_allclose(rotated[i], expect, atol=1e-10)
    assert not cos.flags.writeable


def test_angles_layout():
    a = angles(np.array([[1.0, 0.0, 0.0]]), CFG)
    np.testing.assert_allclose(a[0, :4], 10000.0 ** (-2 * np.arange(4) / 8))
    np.testing.assert_array_equal(a[0, 4:], 0.0)
