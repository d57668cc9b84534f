import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raydiff.camera import OrbitPose, intrinsics_from_fov, orbit_camera, orbit_poses
from raydiff.metrics import (
    PSNR_CAP,
    EncoderFeatures,
    RandomPyramid,
    gaussian_window,
    perceptual_distance,
    pplc,
    psnr,
    ssim,
)
from raydiff.net import NetworkConfig, init_parameters
from raydiff.scene import generate_scene, render

from planar import planar_pair

K32 = intrinsics_from_fov(math.radians(50), 32, 32)
EX = RandomPyramid()


def _image(seed=0):
    sc = generate_scene(seed)
    return render(sc, orbit_camera(OrbitPose(0.3, 0.5, 2.6), K32, 32, 32))


def test_psnr_cases():
    a = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0
    with pytest.raises(ValueError, match="shape"):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_scalar_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.random((6, 5, 3)), rng.random((6, 5, 3))
    total = 0.0
    for i in range(6):
        for j in range(5):
            for c in range(3):
                total += (a[i, j, c] - b[i, j, c]) ** 2
    assert abs(psnr(a, b) - 10 * math.log10(1 / (total / 90))) < 1e-9


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(2)
    a = rng.random((16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    for s in range(5):
        x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert abs(ssim(x, y) - ssim(y, x)) < 1e-9
        assert -1 <= ssim(x, y) <= 1


def test_ssim_constant_images_closed_form():
    a = np.full((12, 12), 0.2)
    b = a + 0.5
    c1 = 0.01**2
    # zero variances: only the luminance term remains
    expected = (2 * 0.2 * 0.7 + c1) / (0.2**2 + 0.7**2 + c1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-9)


def test_ssim_window_too_large():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_gaussian_window():
    g = gaussian_window()
    assert len(g) == 11 and g.sum() == pytest.approx(1.0) and np.argmax(g) == 5


def test_perceptual_basic():
    a, b = _image(0), _image(1)
    assert perceptual_distance(a, a, EX) == 0.0
    assert perceptual_distance(a, b, EX) > 0
    assert perceptual_distance(a, b, EX) == perceptual_distance(b, a, EX)
    assert perceptual_distance(a, b, EX) == perceptual_distance(a, b, RandomPyramid())


def test_perceptual_monotone_in_noise():
    img = _image(3)
    wins = 0
    for s in range(100):
        rng = np.random.default_rng(s)
        d = [perceptual_distance(img, img + amp * rng.normal(size=img.shape), EX) for amp in (0.05, 0.1, 0.2)]
        wins += d[0] < d[1] < d[2]
    assert wins >= 99


def test_channel_permutation_invariance_exact():
    a, b = _image(4), _image(5)
    for perm in ([2, 0, 1], [1, 0, 2]):
        assert perceptual_distance(a[..., perm], b[..., perm], EX) == perceptual_distance(a, b, EX)
    frames = [_image(s) for s in range(3)]
    cams = [orbit_camera(p, K32, 32, 32) for p in orbit_poses(0.2, 2.6, 3)]
    base = pplc(frames, cams, EX).scores
    assert pplc([f[..., [2, 1, 0]] for f in frames], cams, EX).scores == base


def test_encoder_features_variant():
    enc = init_parameters(NetworkConfig(), 0).src_encoder
    ex = EncoderFeatures(enc)
    a, b = _image(0), _image(1)
    feats = ex(a)
    assert len(feats) == 3 and [f.shape[-1] for f in feats] == [16, 8, 4]
    assert perceptual_distance(a, a, ex) == 0.0 and perceptual_distance(a, b, ex) > 0


def test_pplc_constant_sequence_zero():
    img = _image(6)
    cams = [orbit_camera(p, K32, 32, 32) for p in orbit_poses(0.2, 2.6, 6)]
    rep = pplc([img] * 6, cams, EX, rectify=False)
    assert rep.mean == 0.0 and len(rep.scores) == 6
    same = [cams[0]] * 4
    assert pplc([img] * 4, same, EX).mean == 0.0


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 1.0))
def test_pplc_phi_scaling(phi):
    frames = [_image(7), _image(8)]
    cams = [orbit_camera(p, K32, 32, 32) for p in orbit_poses(0.2, 2.6, 2)]
    one = pplc(frames, cams, EX, phi=phi)
    two = pplc(frames, cams, EX, phi=2 * phi)
    assert two.scores[0] * 4 == pytest.approx(one.scores[0], rel=1e-12)
    assert one.scores[0] * phi**2 == pytest.approx(one.distances[0], rel=1e-12)


def test_pplc_pair_counts_and_csv():
    frames = [_image(s) for s in range(5)]
    # at zero elevation the great-circle gap equals the azimuth step
    cams = [orbit_camera(p, K32, 32, 32) for p in orbit_poses(0.0, 2.6, 5)]
    closed = pplc(frames, cams, EX)
    opened = pplc(frames, cams, EX, closed=False)
    assert len(closed.scores) == 5 and len(opened.scores) == 4
    assert all(s >= 0 for s in closed.scores)
    assert all(0 < c <= 1 for c in closed.coverage)
    assert closed.phis[0] == pytest.approx(2 * math.pi / 5)
    lines = closed.to_csv().splitlines()
    assert lines[0] == "pair,frame_a,frame_b,raw_distance,phi,score,coverage"
    assert len(lines) == 7 and lines[-1].startswith("# pplc_mean=")


def test_pplc_degenerate_pair_skipped():
    # the second camera sits on the first camera's rectification plane
    frames = [_image(0), _image(1)]
    a = orbit_camera(OrbitPose(0.0, 0.0, 2.6), K32, 32, 32)
    b = orbit_camera(OrbitPose(0.0, math.pi / 2, 2.6), K32, 32, 32)
    rep = pplc(frames, [a, b], EX, plane_depth=2.6)
    assert rep.scores == [] and "degenerate" in rep.skipped[0][2]
    with pytest.raises(ValueError):
        pplc(frames[:1], [a], EX)


def test_rectification_direction_small_sample():
    ok_correct = ok_swapped = 0
    for s in range(20):
        p = planar_pair(s)
        ok_correct += p.rectified_correct < p.raw_correct
        ok_swapped += p.rectified_swapped > p.raw_swapped
    assert ok_correct >= 19 and ok_swapped >= 19
