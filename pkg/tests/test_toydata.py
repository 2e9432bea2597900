import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echomotion import toydata as td
from echomotion.motion import rot6d_to_matrix
from echomotion.video import VideoClip


def test_vocab():
    assert td.VOCAB_SIZE == len(td.VOCAB) + 1
    assert len(set(td.VOCAB)) == len(td.VOCAB)
    assert td.PAD_ID == len(td.VOCAB)


def test_forward_kinematics_rest_pose():
    pos = td.forward_kinematics(np.tile(np.eye(3), (24, 1, 1)), np.zeros(3))
    for j, p in enumerate(td.PARENTS):
        if p >= 0:
            np.testing.assert_allclose(pos[j] - pos[p], td.REST_OFFSETS[j])


def test_forward_kinematics_preserves_bone_lengths(rng):
    rots = np.stack([td.rot_z(a) @ td.rot_x(b) for a, b in rng.normal(size=(24, 2))])
    pos = td.forward_kinematics(rots, rng.normal(size=3), scale=1.1)
    for j, p in enumerate(td.PARENTS):
        if p >= 0:
            assert np.linalg.norm(pos[j] - pos[p]) == pytest.approx(1.1 * np.linalg.norm(td.REST_OFFSETS[j]))


@pytest.mark.parametrize("kind", list(td.MotionKind))
def test_clip_is_consistent(kind):
    clip = td.gen_motion_clip(kind, seed=5, frames=17)
    clip.validate()
    assert clip.num_frames == 17
    np.testing.assert_array_equal(clip.eta[:, 0], clip.v)
    np.testing.assert_array_equal(clip.gamma, clip.theta[:, 0])
    assert (clip.beta == clip.beta[0]).all()
    # stored 6D rotations reproduce the stored joints through FK
    scale = 1.0 + 0.05 * clip.beta[0, 0]
    for f in (0, 8, 16):
        rots = np.stack([rot6d_to_matrix(r) for r in clip.theta[f]])
        np.testing.assert_allclose(td.forward_kinematics(rots, clip.v[f], scale), clip.eta[f], atol=1e-5)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), kind=st.sampled_from(list(td.MotionKind)))
def test_joints_project_inside_frame(seed, kind):
    clip = td.gen_motion_clip(kind, seed)
    uv = td.project(clip.eta, 32, 32)
    assert (uv >= 0).all() and (uv <= 32).all()


def test_generation_is_deterministic():
    a, b = td.gen_record(td.MotionKind.WAVE, 3), td.gen_record(td.MotionKind.WAVE, 3)
    np.testing.assert_array_equal(a.video.frames, b.video.frames)
    np.testing.assert_array_equal(a.motion.theta, b.motion.theta)
    assert a.caption == b.caption
    c = td.gen_record(td.MotionKind.WAVE, 4)
    assert not np.array_equal(a.motion.eta, c.motion.eta)


def test_kinds_move_differently():
    idle = td.gen_motion_clip(td.MotionKind.IDLE, 1)
    walk = td.gen_motion_clip(td.MotionKind.WALK, 1)
    wave = td.gen_motion_clip(td.MotionKind.WAVE, 1)
    travel = lambda c: np.abs(c.v[-1, 0] - c.v[0, 0])
    assert travel(walk) > 0.1 and travel(idle) < 1e-6
    hand = list(td.JOINT_NAMES).index("right_hand") if "right_hand" in td.JOINT_NAMES else 23
    assert np.ptp(wave.eta[:, hand], axis=0).max() > 5 * np.ptp(idle.eta[:, hand], axis=0).max()


def test_caption_round_trip():
    ids = td.gen_caption(td.MotionKind.SQUAT, 12)
    text = td.decode_caption(td.pad_caption(ids))
    assert text == " ".join(td.caption_words(td.MotionKind.SQUAT, 12))
    assert td.VERBS[td.MotionKind.SQUAT] in text
    assert len(td.pad_caption(ids)) == td.MAX_CAPTION


def test_render_uses_palette():
    rec = td.gen_record(td.MotionKind.IDLE, 7)
    style = td.style_from_seed(7)
    bg = np.array(td.BACKGROUND_RGB[style.background], dtype=np.uint8)
    assert (rec.video.frames[0, 0, 0] == bg).all()
    torso = np.array(td.COLOR_RGB[style.color], dtype=np.uint8)
    assert (rec.video.frames[0] == torso).all(axis=-1).any()


def test_centroid_oracle_on_ground_truth_renders():
    errs = [td.centroid_error(r.video, r.motion.eta, td.style_from_seed(r.seed)) for r in td.gen_corpus(12, 77)]
    assert max(errs) < 2.0


def test_centroid_oracle_detects_wrong_pose():
    a = td.gen_record(td.MotionKind.WAVE, 1)
    b = td.gen_record(td.MotionKind.SQUAT, 2)
    style = td.style_from_seed(a.seed)
    assert td.centroid_error(a.video, b.motion.eta, style) > 2 * td.centroid_error(a.video, a.motion.eta, style)


def test_centroid_oracle_blank_video_is_infinite():
    rec = td.gen_record(td.MotionKind.IDLE, 2)
    style = td.style_from_seed(2)
    blank = np.broadcast_to(np.array(td.BACKGROUND_RGB[style.background], dtype=np.uint8), rec.video.frames.shape)
    assert td.centroid_error(VideoClip(blank.copy()), rec.motion.eta, style) == float("inf")


def test_corpus_cycles_kinds():
    recs = td.gen_corpus(7, 2, kinds=[td.MotionKind.WALK, td.MotionKind.JUMP])
    assert [r.kind for r in recs] == [td.MotionKind.WALK, td.MotionKind.JUMP] * 3 + [td.MotionKind.WALK]
    with pytest.raises(ValueError):
        td.gen_corpus(2, 1, kinds=[])


def test_dataset_round_trip(tmp_path):
    recs = td.gen_corpus(3, 9, frames=5, size=16)
    path = tmp_path / "d.hmvd"
    td.write_dataset(recs, path)
    back = td.read_dataset(path)
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.video.frames, b.video.frames)
        for name in ("beta", "theta", "gamma", "v", "eta"):
            np.testing.assert_array_equal(getattr(a.motion, name), getattr(b.motion, name))
        assert (a.caption, a.kind, a.seed) == (b.caption, b.kind, b.seed)
    td.write_dataset(back, tmp_path / "e.hmvd")
    assert (tmp_path / "e.hmvd").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("mutate", ["magic", "truncate", "trailing", "version"])
def test_dataset_corruption(tmp_path, mutate):
    path = tmp_path / "d.hmvd"
    td.write_dataset(td.gen_corpus(1, 1, frames=1, size=8), path)
    raw = bytearray(path.read_bytes())
    if mutate == "magic":
        raw[:4] = b"XXXX"
    elif mutate == "truncate":
        raw = raw[:-5]
    elif mutate == "trailing":
        raw += b"\0"
    else:
        raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(td.DatasetFormatError):
        td.read_dataset(path)


def test_bad_frame_count():
    with pytest.raises(ValueError):
        td.gen_motion_clip(td.MotionKind.WALK, 1, frames=16)
