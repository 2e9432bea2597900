import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echomotion.video import (
    PatchStats,
    VideoClip,
    latent_shape,
    patch_dim,
    patchify,
    to_bytes,
    to_float,
    unpatchify,
    video_token_count,
)


def _clip(rng, f=9, h=8, w=12):
    return VideoClip(rng.integers(0, 256, size=(f, h, w, 3), dtype=np.uint8))


def test_token_counts():
    assert video_token_count(81, 480, 832, 16) == 21 * 30 * 52 == 32760
    assert latent_shape(17, 32, 32, 4) == (5, 8, 8)
    assert patch_dim(4) == 192


@pytest.mark.parametrize("f,h,w,s", [(16, 32, 32, 4), (17, 30, 32, 4), (0, 32, 32, 4), (5, 2, 2, 4)])
def test_bad_geometry(f, h, w, s):
    with pytest.raises(ValueError):
        latent_shape(f, h, w, s)


def test_byte_float_round_trip():
    b = np.arange(256, dtype=np.uint8)
    np.testing.assert_array_equal(to_bytes(to_float(b)), b)
    assert to_float(np.array([0, 255])).tolist() == [-1.0, 1.0]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), t=st.integers(0, 3), stride=st.sampled_from([1, 2, 4]))
def test_patchify_round_trip(seed, t, stride):
    clip = _clip(np.random.default_rng(seed), f=4 * t + 1, h=4, w=8)
    patches = patchify(clip, stride)
    assert patches.shape == (video_token_count(4 * t + 1, 4, 8, stride), patch_dim(stride))
    for replica in range(4):
        back = unpatchify(patches, 4 * t + 1, 4, 8, stride, first_replica=replica)
        np.testing.assert_array_equal(back.frames, clip.frames)


def test_patch_layout(rng):
    """Patch vector entry (sub, dy, dx, c) of token (t, h, w) is pixel
    frame 4t-3+sub (frame 0 for t=0), row h*s+dy, col w*s+dx."""
    clip = _clip(rng, f=9, h=8, w=12)
    p = patchify(clip, 4).reshape(3, 2, 3, 4, 4, 4, 3)
    x = to_float(clip.frames)
    for t, h, w, sub, dy, dx, c in [(0, 1, 2, 3, 1, 2, 0), (1, 0, 0, 0, 0, 0, 2), (2, 1, 1, 3, 3, 3, 1)]:
        frame = 0 if t == 0 else 4 * t - 3 + sub
        assert p[t, h, w, sub, dy, dx, c] == x[frame, 4 * h + dy, 4 * w + dx, c]


def test_unpatchify_shape_check(rng):
    with pytest.raises(ValueError):
        unpatchify(np.zeros((10, 192)), 17, 32, 32, 4)


def test_clip_validation():
    with pytest.raises(ValueError):
        VideoClip(np.zeros((1, 4, 4, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        VideoClip(np.zeros((1, 4, 4, 3), dtype=np.uint8), fps=0)


def _gaussian_posterior_velocity(mean, cov, x_t, t):
    """E[x1 - x0 | x_t] from full covariance algebra (no eigendecomposition)."""
    n = len(mean)
    c_vx = t * cov - (1 - t) * np.eye(n)
    c_xx = t * t * cov + (1 - t) ** 2 * np.eye(n)
    return mean + c_vx @ np.linalg.solve(c_xx, x_t - t * mean)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), t=st.floats(0.0, 0.999))
def test_patch_prior_velocity_matches_gaussian_posterior(seed, t):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(6, 6))
    samples = rng.normal(size=(400, 6)) @ a + rng.normal(size=6)
    stats = PatchStats.from_patches(samples)
    cov = stats.basis @ np.diag(stats.var) @ stats.basis.T
    x_t = rng.normal(size=(3, 6))
    want = np.stack([_gaussian_posterior_velocity(stats.mean, cov, x, t) for x in x_t])
    np.testing.assert_allclose(stats.velocity(x_t, t), want, rtol=1e-8, atol=1e-8)


def test_patch_prior_monte_carlo(rng):
    """Least-squares regression of sampled x1 - x0 on x_t recovers the prior
    velocity (the conditional mean is affine for Gaussians)."""
    mean, std = np.array([0.5, -0.2]), np.array([0.3, 0.8])
    stats = PatchStats(mean, np.eye(2), std**2)
    t = 0.6
    x1 = mean + std * rng.normal(size=(200_000, 2))
    x0 = rng.normal(size=(200_000, 2))
    xt = t * x1 + (1 - t) * x0
    design = np.concatenate([xt, np.ones((len(xt), 1))], axis=1)
    coef, *_ = np.linalg.lstsq(design, x1 - x0, rcond=None)
    probe = np.array([0.3, 0.1])
    np.testing.assert_allclose(np.append(probe, 1.0) @ coef, stats.velocity(probe, t), atol=0.01)


def test_patch_stats_reproducible(rng):
    x = rng.normal(size=(50, 5))
    a, b = PatchStats.from_patches(x), PatchStats.from_patches(x.copy())
    np.testing.assert_array_equal(a.basis, b.basis)
    np.testing.assert_allclose(a.basis.T @ a.basis, np.eye(5), atol=1e-12)
    assert (a.var >= PatchStats.MIN_VAR).all()


def test_identity_stats_velocity():
    s = PatchStats.identity(4)
    x = np.arange(4.0)
    # x1 ~ N(0, I): velocity = (2t - 1) x / (t^2 + (1-t)^2)
    t = 0.3
    np.testing.assert_allclose(s.velocity(x, t), (2 * t - 1) / (t * t + (1 - t) ** 2) * x)
