import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echomotion import numerics as nx
from echomotion.motion import (
    TOKENS_PER_FRAME,
    MotionClip,
    MotionFrame,
    MotionStats,
    clip_to_latent,
    decode_groups,
    decode_motion,
    encode_groups,
    encode_motion,
    group_clip,
    group_frame,
    init_projectors,
    latent_to_clip,
    matrix_to_rot6d,
    motion_token_count,
    rot6d_to_matrix,
    ungroup_clip,
    ungroup_frame,
)
from echomotion.numerics import Tensor


def _random_frame(rng) -> MotionFrame:
    v = rng.normal(size=3)
    eta = rng.normal(size=(24, 3))
    eta[0] = v
    return MotionFrame(rng.normal(size=10), rng.normal(size=(24, 6)), rng.normal(size=6), v, eta)


def _random_clip(rng, frames=3) -> MotionClip:
    return MotionClip.from_frames([_random_frame(rng) for _ in range(frames)])


def _zero_clip(frames=1) -> MotionClip:
    return MotionClip.from_frames([MotionFrame.zeros() for _ in range(frames)])


def test_tokens_per_frame():
    assert TOKENS_PER_FRAME == 25 + 25 + 1 == 51
    assert motion_token_count(81) == 4131


def test_zero_frame_groups():
    pos, rot, shape = group_frame(MotionFrame.zeros())
    assert pos.shape == (25, 3) and rot.shape == (25, 6) and shape.shape == (1, 10)
    assert not (pos.any() or rot.any() or shape.any())


def test_root_position_is_first_position_token():
    f = MotionFrame.zeros()
    f.v = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(group_frame(f)[0][0], [1, 2, 3])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_group_round_trip_bit_exact(seed):
    f = _random_frame(np.random.default_rng(seed))
    g = ungroup_frame(*group_frame(f))
    for name in ("beta", "theta", "gamma", "v", "eta"):
        np.testing.assert_array_equal(getattr(g, name), getattr(f, name))


def test_layout_is_a_bijection_of_slots():
    # every parameter slot lands in exactly one token slot
    f = MotionFrame(np.arange(10.0), 10 + np.arange(144.0).reshape(24, 6), 200 + np.arange(6.0),
                    300 + np.arange(3.0), 400 + np.arange(72.0).reshape(24, 3))
    values = np.concatenate([g.ravel() for g in group_frame(f)])
    assert len(values) == 10 + 144 + 6 + 3 + 72 == len(set(values))


def test_clip_group_matches_frames(rng):
    clip = _random_clip(rng, 4)
    pos, rot, shape = group_clip(clip)
    for i, fr in enumerate(clip.frames):
        for a, b in zip((pos[i], rot[i], shape[i]), group_frame(fr)):
            np.testing.assert_array_equal(a, b)
    back = ungroup_clip(pos, rot, shape)
    np.testing.assert_array_equal(back.eta, clip.eta)


def test_encode_token_counts(rng):
    w = init_projectors(rng, 16)
    assert encode_motion(_zero_clip(1), w).shape == (51, 16)
    assert encode_motion(_zero_clip(81), w).shape == (4131, 16)


def test_zero_weights_give_zero_tokens(rng):
    w = init_projectors(rng, 8)
    for p in w.values():
        p.data[...] = 0
    assert not encode_motion(_random_clip(rng), w).data.any()
    out = decode_motion(Tensor(np.zeros((51, 8))), w)
    assert out.num_frames == 1 and not out.eta.any() and not out.beta.any()


def test_decode_rejects_partial_frames(rng):
    w = init_projectors(rng, 8)
    with pytest.raises(ValueError):
        decode_motion(Tensor(np.zeros((103, 8))), w)


def test_encode_is_frame_major(rng):
    w = init_projectors(rng, 8)
    clip = _random_clip(rng, 2)
    tokens = encode_motion(clip, w).data
    single = encode_motion(MotionClip.from_frames([clip.frame(1)]), w).data
    np.testing.assert_allclose(tokens[51:], single, rtol=1e-5, atol=1e-7)


def test_projector_gradients(f64, rng):
    w = init_projectors(rng, 4, mult=2, zero_out=False)
    groups = tuple(g for g in group_clip(_random_clip(rng, 2)))
    probe = rng.normal(size=(2, 51, 4))
    f = lambda: sum(((g * g).sum() for g in decode_groups(encode_groups(groups, w) * Tensor(probe.reshape(102, 4)), w)),
                    Tensor(np.zeros(())))
    grads = nx.backward(f(), w)
    for name in ("motion_enc.rot.fc1.w", "motion_enc.shape.fc2.b", "motion_dec.pos.fc2.w", "motion_dec.shape.fc1.w"):
        fd = nx.finite_diff_grad(lambda _: f(), w[name])
        assert nx.rel_error(grads[name], fd) < 1e-5, name


def test_rot6d_identity():
    np.testing.assert_allclose(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))


def test_rot6d_of_rz90():
    rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(matrix_to_rot6d(rz), [0, 1, 0, -1, 0, 0])


@settings(max_examples=60, deadline=None)
@given(r6=st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_rot6d_output_in_so3(r6):
    r6 = np.array(r6)
    a, b = r6[:3], r6[3:]
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(np.cross(a, b)) < 1e-3 * np.linalg.norm(a) * max(np.linalg.norm(b), 1e-3):
        return
    r = rot6d_to_matrix(r6)
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-5)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-5)


def test_rot6d_round_trip_on_rotations(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.linalg.det(q))
    np.testing.assert_allclose(rot6d_to_matrix(matrix_to_rot6d(q)), q, atol=1e-12)


def test_rot6d_degenerate():
    with pytest.raises(ValueError):
        rot6d_to_matrix(np.zeros(6))
    with pytest.raises(ValueError):
        rot6d_to_matrix([1, 0, 0, 2, 0, 0])


def test_clip_validation(rng):
    clip = _random_clip(rng)
    clip.validate()
    clip.eta[1, 0] += 1.0
    with pytest.raises(ValueError):
        clip.validate()
    with pytest.raises(ValueError):
        MotionClip(np.zeros((2, 10)), np.zeros((2, 24, 6)), np.zeros((2, 6)), np.zeros((3, 3)), np.zeros((2, 24, 3)))


def test_stats_normalize_round_trip(rng):
    clips = [_random_clip(rng, 3) for _ in range(4)]
    stats = MotionStats.from_clips(clips)
    lat = clip_to_latent(clips[0], stats)
    back = latent_to_clip(lat, stats)
    np.testing.assert_allclose(back.eta, clips[0].eta, atol=1e-12)
    stacked = np.concatenate([clip_to_latent(c, stats)[0] for c in clips])
    np.testing.assert_allclose(stacked.mean(0), 0.0, atol=1e-12)
