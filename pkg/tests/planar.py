"""Planar checkerboard pairs for checking the direction of rectification."""

import math
from dataclasses import dataclass

import numpy as np

from raydiff.camera import OrbitPose, intrinsics_from_fov, orbit_camera, rectifying_homography, warp_image
from raydiff.metrics import RandomPyramid, perceptual_distance
from raydiff.scene import Box, Scene, Texture, render

K32 = intrinsics_from_fov(math.radians(50), 32, 32)
EXTRACTOR = RandomPyramid()


@dataclass
class PlanarPair:
    raw_correct: float
    rectified_correct: float
    raw_swapped: float
    rectified_swapped: float


def planar_pair(seed: int) -> PlanarPair:
    """A thin checker board through the origin facing the first camera.

    The second view sits 10-40 degrees away in azimuth. The swapped pair
    renders it on the mirrored side while still rectifying with the labeled
    camera, so the warp moves content the wrong way.
    """
    rng = np.random.default_rng(seed)
    tex = Texture("checker", tuple(rng.uniform(0.6, 1, 3)), tuple(rng.uniform(0, 0.4, 3)), period=rng.uniform(0.2, 0.35))
    scene = Scene((Box((0, 0, 0), (0.01, 0.9, 0.9), tex),), background=tuple(rng.uniform(0.3, 0.7, 3)))
    dist = rng.uniform(2.4, 2.8)
    gap = math.radians(rng.uniform(10, 40)) * rng.choice([-1, 1])
    elev_b = math.radians(rng.uniform(-10, 10))
    cam_a = orbit_camera(OrbitPose(0.0, 0.0, dist), K32, 32, 32)
    cam_b = orbit_camera(OrbitPose(elev_b, gap, dist), K32, 32, 32)
    cam_m = orbit_camera(OrbitPose(elev_b, -gap, dist), K32, 32, 32)
    a, b, m = render(scene, cam_a), render(scene, cam_b), render(scene, cam_m)
    H = rectifying_homography(cam_a, cam_b, dist)
    wb, mask_b = warp_image(b, H)
    wm, mask_m = warp_image(m, H)
    return PlanarPair(
        perceptual_distance(a, b, EXTRACTOR),
        perceptual_distance(a, wb, EXTRACTOR, mask_b),
        perceptual_distance(a, m, EXTRACTOR),
        perceptual_distance(a, wm, EXTRACTOR, mask_m),
    )
