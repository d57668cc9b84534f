import math

import numpy as np
import pytest

from raydiff.camera import Camera, OrbitPose, intrinsics_from_fov, look_at, orbit_camera, read_cameras
from raydiff.scene import (
    DatasetIOError,
    DatasetManifest,
    Scene,
    Sphere,
    Texture,
    build_dataset,
    generate_scene,
    is_test_scene,
    load_dataset,
    quantize,
    render,
    render_views,
)

K32 = intrinsics_from_fov(math.radians(50), 32, 32)


def test_generate_scene_deterministic():
    assert generate_scene(123) == generate_scene(123)
    assert generate_scene(123) != generate_scene(124)


def test_scene_signatures_distinct():
    sigs = {generate_scene(s).signature() for s in range(100)}
    assert len(sigs) >= 95


def test_scene_invariants_sweep():
    for s in range(200):
        sc = generate_scene(s)
        assert 1 <= len(sc.primitives) <= 4
        for p in sc.primitives:
            assert p.bounding_radius() <= 1.0 + 1e-12
            for col in (p.texture.color_a, p.texture.color_b, sc.background):
                assert all(0.0 <= c <= 1.0 for c in col)
        assert sc.primitives[0].texture.kind != "flat"


def test_scene_behind_camera_is_background():
    sc = generate_scene(5)
    R, T = look_at(np.array([3.0, 0, 0]), target=np.array([6.0, 0, 0]))
    img = render(sc, Camera(K32, R, T, 32, 32))
    np.testing.assert_array_equal(img, np.broadcast_to(sc.background, img.shape))


def test_sphere_silhouette_matches_projection():
    n = 33
    K = intrinsics_from_fov(math.radians(90), n, n)
    R, T = look_at(np.array([0.0, 0.0, 3.0]), up=np.array([0.0, 1.0, 0.0]))
    cam = Camera(K, R, T, n, n)
    sc = Scene((Sphere((0.0, 0.0, 0.0), 1.0, Texture("flat", (1.0, 0.0, 0.0))),), background=(0.0, 0.0, 1.0))
    img = render(sc, cam)
    hit = img[..., 2] == 0.0
    assert hit[n // 2, n // 2]
    assert not hit[0, 0] and not hit[-1, -1] and not hit[0, -1] and not hit[-1, 0]
    # silhouette of a unit sphere seen from distance 3 subtends asin(1/3)
    expected_radius = K[0, 0] * math.tan(math.asin(1.0 / 3.0))
    measured_row = hit[n // 2].sum() / 2.0
    measured_col = hit[:, n // 2].sum() / 2.0
    assert abs(measured_row - expected_radius) <= 1.0
    assert abs(measured_col - expected_radius) <= 1.0
    # every hit pixel center lies inside the analytic circle (up to one pixel)
    vv, uu = np.nonzero(hit)
    r = np.hypot(uu + 0.5 - K[0, 2], vv + 0.5 - K[1, 2])
    assert r.max() <= expected_radius + 1.0


def test_render_deterministic_and_thread_independent():
    sc = generate_scene(11)
    cams = [orbit_camera(OrbitPose(0.2, a, 2.6), K32, 32, 32) for a in np.linspace(0, 6, 6)]
    a = render_views(sc, cams, workers=1)
    b = render_views(sc, cams, workers=4)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(render(sc, cams[0]), render(sc, cams[0]))
    assert np.isfinite(a).all() and a.min() >= 0 and a.max() <= 1


def test_pose_identifiability():
    # azimuth gaps >= 30 degrees must change the image on >= 99% of scenes
    ok = 0
    total = 200
    for s in range(total):
        sc = generate_scene(10_000 + s)
        rng = np.random.default_rng(s)
        th = rng.uniform(math.radians(-10), math.radians(35))
        ph = rng.uniform(0, 2 * math.pi)
        gap = math.radians(rng.uniform(30, 180))
        a = render(sc, orbit_camera(OrbitPose(th, ph, 2.6), K32, 32, 32))
        b = render(sc, orbit_camera(OrbitPose(th, ph + gap, 2.6), K32, 32, 32))
        ok += np.abs(a - b).mean() > 0.01
    assert ok >= 0.99 * total


def test_quantization_round_trip_error():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert np.abs(quantize(img) / 255.0 - img).max() <= 1 / 255


def test_build_and_reload_dataset(tmp_path):
    m = DatasetManifest(scenes=2, views=4, image_size=16, seed=3)
    ds = build_dataset(m, tmp_path / "ds")
    pngs = sorted((tmp_path / "ds").glob("*/*.png"))
    assert len(pngs) == 8
    assert (tmp_path / "ds" / "manifest.txt").is_file()
    cam_lines = sum(len(read_cameras(p)) for p in (tmp_path / "ds").glob("*/cameras.txt"))
    assert cam_lines == 8
    back = load_dataset(tmp_path / "ds")
    assert back.manifest == m
    for a, b in zip(ds.scenes, back.scenes):
        assert a.scene_id == b.scene_id
        np.testing.assert_array_equal(a.images, b.images)
        assert a.cameras == b.cameras


def test_dataset_is_reproducible(tmp_path):
    m = DatasetManifest(scenes=2, views=2, image_size=8, seed=9)
    build_dataset(m, tmp_path / "a")
    build_dataset(m, tmp_path / "b")
    for pa in sorted((tmp_path / "a").rglob("*")):
        if pa.is_file():
            assert pa.read_bytes() == (tmp_path / "b" / pa.relative_to(tmp_path / "a")).read_bytes()


def test_split_disjoint_and_stable(tmp_path):
    import hashlib

    m = DatasetManifest(scenes=30, views=1, image_size=4, seed=1, test_fraction=0.3)
    ds = build_dataset(m, tmp_path / "ds")
    train = {s.scene_id for s in ds.split("train")}
    test = {s.scene_id for s in ds.split("test")}
    assert train.isdisjoint(test) and len(train | test) == 30
    assert 0 < len(test) < 30
    # recompute from the hash independently
    for s in ds.scenes:
        frac = int(hashlib.sha256(s.scene_id.encode()).hexdigest()[:8], 16) / 2**32
        assert (s.scene_id in test) == (frac < 0.3) == is_test_scene(s.scene_id, 0.3)
    again = load_dataset(tmp_path / "ds")
    assert {s.scene_id for s in again.split("test")} == test


def test_seed_changes_scene_ids(tmp_path):
    a = build_dataset(DatasetManifest(scenes=2, views=1, image_size=4, seed=1), tmp_path / "a")
    b = build_dataset(DatasetManifest(scenes=2, views=1, image_size=4, seed=2), tmp_path / "b")
    assert {s.scene_id for s in a.scenes}.isdisjoint({s.scene_id for s in b.scenes})


def test_io_error_has_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetIOError, match="file"):
        build_dataset(DatasetManifest(scenes=1, views=1, image_size=4), blocker / "sub")
    with pytest.raises(DatasetIOError, match="manifest"):
        load_dataset(tmp_path / "nothing")
