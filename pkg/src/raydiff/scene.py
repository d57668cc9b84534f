"""Procedural toy scenes, a one-ray-per-pixel renderer and the on-disk dataset."""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .camera import (
    Camera,
    CameraRecord,
    OrbitPose,
    image_ray,
    intrinsics_from_fov,
    read_cameras,
    write_cameras,
)

LIGHT_DIR = np.array([0.45, 0.3, 0.84]) / np.linalg.norm([0.45, 0.3, 0.84])
AMBIENT = 0.35
FORMAT_VERSION = 1


class DatasetIOError(OSError):
    pass


@dataclass(frozen=True)
class Texture:
    """``kind`` is "flat", "checker" (3-D world checker) or "stripe" (bands along ``axis``)."""

    kind: str
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float] = (0.0, 0.0, 0.0)
    period: float = 0.25
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def shade(self, points: np.ndarray) -> np.ndarray:
        a = np.asarray(self.color_a)
        if self.kind == "flat":
            return np.broadcast_to(a, points.shape).copy()
        b = np.asarray(self.color_b)
        if self.kind == "checker":
            cells = np.floor(points / self.period).astype(np.int64).sum(axis=-1)
        elif self.kind == "stripe":
            cells = np.floor(points @ np.asarray(self.axis) / self.period).astype(np.int64)
        else:
            raise ValueError(f"unknown texture kind {self.kind!r}")
        return np.where((cells % 2 == 0)[..., None], a, b)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    texture: Texture

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center)) + self.radius

    def intersect(self, origin, dirs):
        oc = origin - np.asarray(self.center)
        b = dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where(hit & (t > 1e-9), t, np.inf)
        points = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        normals = (points - np.asarray(self.center)) / self.radius
        return t, normals


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_size: tuple[float, float, float]
    texture: Texture

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center)) + float(np.linalg.norm(self.half_size))

    def intersect(self, origin, dirs):
        c = np.asarray(self.center)
        h = np.asarray(self.half_size)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t_lo = (c - h - origin) * inv
            t_hi = (c + h - origin) * inv
        t_lo = np.nan_to_num(t_lo, nan=-np.inf)
        t_hi = np.nan_to_num(t_hi, nan=np.inf)
        t_near = np.minimum(t_lo, t_hi)
        t_far = np.maximum(t_lo, t_hi)
        t_enter = t_near.max(axis=1)
        t_exit = t_far.min(axis=1)
        hit = (t_enter <= t_exit) & (t_exit > 1e-9)
        t = np.where(t_enter > 1e-9, t_enter, t_exit)
        t = np.where(hit, t, np.inf)
        axis = np.where(t_enter > 1e-9, t_near.argmax(axis=1), t_far.argmin(axis=1))
        points = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        normals = np.zeros_like(dirs)
        rows = np.arange(len(dirs))
        normals[rows, axis] = np.sign(points[rows, axis] - c[axis])
        return t, normals


Primitive = Sphere | Box


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")

    def signature(self) -> tuple:
        return (
            len(self.primitives),
            tuple(
                (type(p).__name__, p.texture.kind, tuple(round(x, 3) for x in p.texture.color_a))
                for p in self.primitives
            ),
        )


def _color(rng) -> tuple[float, float, float]:
    return tuple(float(x) for x in rng.uniform(0.05, 0.95, size=3))


def _texture(rng, allow_flat: bool) -> Texture:
    kinds = ["checker", "stripe"] + (["flat"] if allow_flat else [])
    kind = kinds[rng.integers(len(kinds))]
    a = _color(rng)
    b = _color(rng)
    # keep the two colors visibly apart
    while np.abs(np.subtract(a, b)).sum() < 0.6:
        b = _color(rng)
    # stripe axis stays off the vertical so azimuth changes are always visible
    ang = rng.uniform(0, 2 * math.pi)
    axis = (math.cos(ang), math.sin(ang), float(rng.uniform(-0.5, 0.5)))
    n = math.sqrt(sum(x * x for x in axis))
    axis = tuple(x / n for x in axis)
    return Texture(kind, a, b, float(rng.uniform(0.15, 0.35)), axis)


def generate_scene(seed: int) -> Scene:
    """Deterministic 1-4 primitive scene inside the unit ball; the first primitive is always patterned."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, 5))
    prims = []
    for i in range(count):
        tex = _texture(rng, allow_flat=i > 0)
        # a lone primitive is drawn larger so it fills a useful part of the frame
        lo, hi = (0.5, 0.75) if count == 1 else (0.25, 0.55)
        if rng.random() < 0.5:
            r = float(rng.uniform(lo, hi))
            c = _random_point(rng, (1.0 - r) * 0.9)
            prims.append(Sphere(c, r, tex))
        else:
            h = rng.uniform(0.6 * lo, 0.6 * hi, size=3)
            c = _random_point(rng, (1.0 - float(np.linalg.norm(h))) * 0.9)
            prims.append(Box(c, tuple(float(x) for x in h), tex))
    bg = tuple(float(x) for x in rng.uniform(0.75, 1.0, size=3))
    return Scene(tuple(prims), bg, int(seed))


def _random_point(rng, radius: float) -> tuple[float, float, float]:
    radius = max(radius, 0.0)
    v = rng.normal(size=3)
    v = v / np.linalg.norm(v) * radius * rng.random() ** (1 / 3)
    return tuple(float(x) for x in v)


def render(scene: Scene, camera: Camera) -> np.ndarray:
    """Nearest-hit Lambert shading, one primary ray per pixel center; returns (H, W, 3) in [0, 1]."""
    vv, uu = np.meshgrid(np.arange(camera.height) + 0.5, np.arange(camera.width) + 0.5, indexing="ij")
    origin, dirs = image_ray(camera, uu, vv)
    dirs = dirs.reshape(-1, 3)
    best_t = np.full(len(dirs), np.inf)
    color = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), dirs.shape).copy()
    for prim in scene.primitives:
        t, normals = prim.intersect(origin, dirs)
        closer = t < best_t
        if not closer.any():
            continue
        best_t = np.where(closer, t, best_t)
        pts = origin + t[closer, None] * dirs[closer]
        lambert = np.clip(normals[closer] @ LIGHT_DIR, 0.0, 1.0)
        shade = AMBIENT + (1 - AMBIENT) * lambert
        color[closer] = prim.texture.shade(pts) * shade[:, None]
    return np.clip(color, 0.0, 1.0).reshape(camera.height, camera.width, 3)


def render_views(scene: Scene, cameras: Sequence[Camera], workers: int = 1) -> np.ndarray:
    if workers <= 1:
        return np.stack([render(scene, c) for c in cameras])
    with ThreadPoolExecutor(workers) as pool:
        return np.stack(list(pool.map(lambda c: render(scene, c), cameras)))


def quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: Path, image: np.ndarray) -> None:
    try:
        Image.fromarray(quantize(image), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def load_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class DatasetManifest:
    scenes: int = 50
    views: int = 8
    image_size: int = 32
    elevation_min: float = math.radians(-10.0)
    elevation_max: float = math.radians(35.0)
    azimuth_min: float = 0.0
    azimuth_max: float = 2 * math.pi
    distance_min: float = 2.4
    distance_max: float = 2.8
    fov: float = math.radians(50.0)
    test_fraction: float = 0.2
    seed: int = 0
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.scenes < 1 or self.views < 1 or self.image_size < 1:
            raise ValueError("scenes, views and image_size must be positive")
        if not 0.0 <= self.test_fraction <= 1.0:
            raise ValueError("test_fraction must lie in [0, 1]")

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kw = {}
        types = {k: type(v) for k, v in asdict(cls()).items()}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ValueError(f"unknown manifest key {key!r}")
            kw[key] = types[key](val.strip())
        return cls(**kw)


def scene_seed(global_seed: int, index: int) -> int:
    state = np.random.SeedSequence([int(global_seed), int(index), 0x5CE]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def scene_id(seed: int) -> str:
    return f"{seed:016x}"


def is_test_scene(sid: str, test_fraction: float) -> bool:
    h = int(hashlib.sha256(sid.encode()).hexdigest()[:8], 16)
    return h / 2**32 < test_fraction


def sample_poses(manifest: DatasetManifest, index: int) -> list[OrbitPose]:
    rng = np.random.default_rng([manifest.seed, index, 0x905E])
    m = manifest
    return [
        OrbitPose(
            float(rng.uniform(m.elevation_min, m.elevation_max)),
            float(rng.uniform(m.azimuth_min, m.azimuth_max)),
            float(rng.uniform(m.distance_min, m.distance_max)),
        )
        for _ in range(m.views)
    ]


@dataclass
class SceneViews:
    scene_id: str
    images: np.ndarray  # (V, H, W, 3) float32 in [0, 1]
    records: list[CameraRecord]
    cameras: list[Camera] = field(init=False)

    def __post_init__(self):
        self.cameras = [r.camera() for r in self.records]


@dataclass
class Dataset:
    root: Path | None
    manifest: DatasetManifest
    scenes: list[SceneViews]

    def split(self, name: str) -> list[SceneViews]:
        want_test = {"train": False, "test": True}[name]
        return [s for s in self.scenes if is_test_scene(s.scene_id, self.manifest.test_fraction) == want_test]


def make_scene_views(manifest: DatasetManifest, index: int, workers: int = 1) -> tuple[Scene, SceneViews]:
    seed = scene_seed(manifest.seed, index)
    scene = generate_scene(seed)
    K = intrinsics_from_fov(manifest.fov, manifest.image_size, manifest.image_size)
    records = [CameraRecord.from_pose(p, K, manifest.image_size, manifest.image_size) for p in sample_poses(manifest, index)]
    images = render_views(scene, [r.camera() for r in records], workers)
    # stored data is 8-bit; keep the in-memory copy identical to what a reload sees
    images = quantize(images).astype(np.float32) / 255.0
    return scene, SceneViews(scene_id(seed), images, records)


def build_dataset(manifest: DatasetManifest, root: Path, workers: int = 1) -> Dataset:
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"cannot create dataset directory {root}: {exc}") from exc
    scenes = []
    for k in range(manifest.scenes):
        _, sv = make_scene_views(manifest, k, workers)
        sdir = root / sv.scene_id
        try:
            sdir.mkdir(exist_ok=True)
            write_cameras(sdir / "cameras.txt", sv.records, header=f"scene {sv.scene_id}")
        except OSError as exc:
            raise DatasetIOError(f"cannot write {sdir}: {exc}") from exc
        for v, img in enumerate(sv.images):
            save_png(sdir / f"{v}.png", img)
        scenes.append(sv)
    try:
        (root / "manifest.txt").write_text(manifest.to_text())
    except OSError as exc:
        raise DatasetIOError(f"cannot write {root / 'manifest.txt'}: {exc}") from exc
    return Dataset(root, manifest, scenes)


def load_dataset(root: Path) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.txt"
    if not mpath.is_file():
        raise DatasetIOError(f"no manifest at {mpath}")
    manifest = DatasetManifest.from_text(mpath.read_text())
    scenes = []
    for k in range(manifest.scenes):
        sid = scene_id(scene_seed(manifest.seed, k))
        sdir = root / sid
        records = read_cameras(sdir / "cameras.txt")
        images = np.stack([load_png(sdir / f"{v}.png") for v in range(len(records))])
        scenes.append(SceneViews(sid, images, records))
    return Dataset(root, manifest, scenes)
