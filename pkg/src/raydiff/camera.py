"""Pinhole cameras, per-pixel Plücker rays, orbit poses and plane homographies.

Conventions: right-handed world with +z up. A camera maps world points with
``X_cam = R @ X_world + T`` and looks down its own +z axis, image x to the
right and image y downward. Pixel ``(u, v)`` covers the continuous square
``[u, u+1) x [v, v+1)`` so its center sits at ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

WORLD_UP = np.array([0.0, 0.0, 1.0])


class InvalidCameraError(ValueError):
    pass


class DegenerateRayError(ValueError):
    pass


class SingularHomographyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    K: np.ndarray
    R: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.T, dtype=np.float64).reshape(3)
        if self.width < 1 or self.height < 1:
            raise InvalidCameraError(f"image size must be positive, got {self.width}x{self.height}")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or abs(K[2, 2] - 1.0) > 1e-12:
            raise InvalidCameraError("K needs positive focal lengths and K[2,2] == 1")
        if np.any(np.tril(K, -1) != 0):
            raise InvalidCameraError("K must be upper triangular")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidCameraError("R must be a proper rotation")
        for name, val in (("K", K), ("R", R), ("T", T)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.T

    @property
    def optical_axis(self) -> np.ndarray:
        """World-space unit vector the camera looks along."""
        return self.R[2].copy()

    def K_inv(self) -> np.ndarray:
        try:
            return np.linalg.inv(self.K)
        except np.linalg.LinAlgError as exc:
            raise InvalidCameraError("singular intrinsics") from exc

    def scaled(self, factor: float) -> "Camera":
        """Same pose at a resampled pixel grid (``factor=0.5`` halves the resolution)."""
        width = int(round(self.width * factor))
        height = int(round(self.height * factor))
        S = np.diag([factor, factor, 1.0])
        return Camera(S @ self.K, self.R, self.T, width, height)

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to continuous pixel coordinates (..., 2)."""
        cam = np.asarray(points, dtype=np.float64) @ self.R.T + self.T
        pix = cam @ self.K.T
        return pix[..., :2] / pix[..., 2:3]

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.K, other.K)
            and np.array_equal(self.R, other.R)
            and np.array_equal(self.T, other.T)
        )

    __hash__ = None


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def intrinsics_from_fov(fov: float, width: int, height: int) -> np.ndarray:
    """Square-pixel intrinsics with horizontal field of view ``fov`` (radians)."""
    f = 0.5 * width / math.tan(0.5 * fov)
    return intrinsics(f, f, 0.5 * width, 0.5 * height)


# ---------------------------------------------------------------------------
# rays


def image_ray(camera: Camera, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Ray through continuous image coordinates ``(x, y)``.

    ``x`` and ``y`` may be scalars or equally shaped arrays; the returned
    direction has shape ``(..., 3)`` and unit length. The world point at unit
    camera depth is ``R^T (K^-1 (x, y, 1) - T)``; subtracting the camera center
    from it gives the ray direction.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pix = np.stack([x, y, np.ones_like(x)], axis=-1)
    K_inv = camera.K_inv()
    origin = camera.center
    world = (pix @ K_inv.T - camera.T) @ camera.R
    d = world - origin
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return origin, d


def pixel_ray(camera: Camera, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Ray through the center of pixel ``(u, v)`` (column, row)."""
    u_arr = np.asarray(u)
    v_arr = np.asarray(v)
    if np.any(u_arr < 0) or np.any(u_arr >= camera.width) or np.any(v_arr < 0) or np.any(v_arr >= camera.height):
        raise IndexError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    return image_ray(camera, u_arr + 0.5, v_arr + 0.5)


@dataclass(frozen=True)
class PluckerRay:
    moment: np.ndarray
    direction: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.moment, self.direction])


def plucker_encode(origin, direction) -> PluckerRay:
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        raise DegenerateRayError("zero-length ray direction")
    if abs(norm - 1.0) > 1e-6:
        raise DegenerateRayError(f"ray direction must be unit length, got norm {norm:.6g}")
    return PluckerRay(np.cross(origin, direction), direction.copy())


def plucker_rays(origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Vectorised ``(o x d, d)`` for arrays of shape (..., 3); returns (..., 6)."""
    origins = np.broadcast_to(origins, directions.shape)
    return np.concatenate([np.cross(origins, directions), directions], axis=-1)


@dataclass(frozen=True)
class FourierConfig:
    bands: int = 6
    max_freq: float = 16.0

    def __post_init__(self):
        if self.bands < 1:
            raise ValueError("bands must be positive")
        if self.bands > 1 and self.max_freq <= 1.0:
            raise ValueError("max_freq must exceed 1 for more than one band")

    @classmethod
    def for_grid(cls, size: int, bands: int = 6) -> "FourierConfig":
        # Nyquist of an N-sample grid: N/2 cycles across it.
        return cls(bands=bands, max_freq=max(size / 2.0, 2.0))

    @property
    def frequencies(self) -> np.ndarray:
        if self.bands == 1:
            return np.array([1.0])
        return np.linspace(1.0, self.max_freq, self.bands)

    def out_dim(self, in_dim: int = 6) -> int:
        return in_dim * (2 * self.bands + 1)


def fourier_features(values: np.ndarray, cfg: FourierConfig) -> np.ndarray:
    """``r -> [r, sin(f_1 pi r), cos(f_1 pi r), ..., sin(f_K pi r), cos(f_K pi r)]``.

    Operates on the last axis; the output is ordered band by band, each band
    holding the sin block then the cos block.
    """
    values = np.asarray(values, dtype=np.float64)
    parts = [values]
    for f in cfg.frequencies:
        arg = f * np.pi * values
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def fourier_embed(ray: PluckerRay, cfg: FourierConfig = FourierConfig()) -> np.ndarray:
    return fourier_features(ray.as_vector(), cfg)


@dataclass(frozen=True)
class RayMap:
    camera: Camera
    rays: np.ndarray  # (H, W, 6): moment then direction
    embedded: np.ndarray  # (H, W, 6 * (2K + 1))

    @property
    def moments(self) -> np.ndarray:
        return self.rays[..., :3]

    @property
    def directions(self) -> np.ndarray:
        return self.rays[..., 3:]


def ray_map(camera: Camera, cfg: FourierConfig = FourierConfig()) -> RayMap:
    vv, uu = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    origin, d = image_ray(camera, uu + 0.5, vv + 0.5)
    rays = plucker_rays(origin, d)
    return RayMap(camera, rays, fourier_features(rays, cfg))


# ---------------------------------------------------------------------------
# orbits


@dataclass(frozen=True)
class OrbitPose:
    elevation: float
    azimuth: float
    distance: float

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError(f"orbit distance must be positive, got {self.distance}")
        if not -math.pi / 2 <= self.elevation <= math.pi / 2:
            raise ValueError(f"elevation {self.elevation} outside [-pi/2, pi/2]")
        object.__setattr__(self, "azimuth", float(self.azimuth) % (2 * math.pi))

    def center(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return self.distance * np.array(
            [ce * math.cos(self.azimuth), ce * math.sin(self.azimuth), math.sin(self.elevation)]
        )


def look_at(center: np.ndarray, target=np.zeros(3), up=WORLD_UP) -> tuple[np.ndarray, np.ndarray]:
    """World->camera ``(R, T)`` for a camera at ``center`` looking at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, up)
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise InvalidCameraError("viewing direction parallel to the up vector")
    right = right / n
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return R, -R @ center


def orbit_camera(pose: OrbitPose, K: np.ndarray, width: int, height: int) -> Camera:
    if abs(abs(pose.elevation) - math.pi / 2) < 1e-12:
        raise InvalidCameraError("elevation of +-pi/2 leaves the up vector undefined; perturb it")
    R, T = look_at(pose.center())
    return Camera(K, R, T, width, height)


def orbit_poses(elevation: float, distance: float, frames: int, start: float = 0.0) -> list[OrbitPose]:
    step = 2 * math.pi / frames
    return [OrbitPose(elevation, start + k * step, distance) for k in range(frames)]


def spherical_coords(camera: Camera) -> tuple[float, float, float]:
    """(elevation, azimuth, distance) of the camera center about the world origin."""
    c = camera.center
    dist = float(np.linalg.norm(c))
    return math.asin(max(-1.0, min(1.0, c[2] / dist))), math.atan2(c[1], c[0]) % (2 * math.pi), dist


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def relative_to(camera: Camera, reference: Camera) -> Camera:
    """Express ``camera`` in a world frame spun about +z so ``reference`` sits at azimuth 0."""
    _, az, _ = spherical_coords(reference)
    return Camera(camera.K, camera.R @ rotation_z(az), camera.T, camera.width, camera.height)


def angular_gap(a: Camera, b: Camera) -> float:
    """Great-circle angle between two camera centers as seen from the origin."""
    ca = a.center / np.linalg.norm(a.center)
    cb = b.center / np.linalg.norm(b.center)
    return float(np.arccos(np.clip(ca @ cb, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# homographies


def rectifying_homography(cam_a: Camera, cam_b: Camera, plane_depth: float) -> np.ndarray:
    """Homography taking pixels of ``cam_b`` to pixels of ``cam_a``.

    The scene is approximated by the plane facing ``cam_a`` at depth
    ``plane_depth`` along its optical axis (for a look-at-origin camera at
    distance ``plane_depth`` this plane passes through the world origin).
    Result is normalised so ``H[2, 2] == 1``.
    """
    if not plane_depth > 0:
        raise ValueError("plane_depth must be positive")
    # b <- a relative motion: X_b = R_ba X_a + t_ba
    R_ba = cam_b.R @ cam_a.R.T
    t_ba = cam_b.T - R_ba @ cam_a.T
    n = np.array([0.0, 0.0, 1.0])
    G = cam_b.K @ (R_ba + np.outer(t_ba, n) / plane_depth) @ cam_a.K_inv()
    if abs(np.linalg.det(G)) < 1e-12 * np.linalg.norm(G) ** 3:
        raise SingularHomographyError("camera lies on the rectification plane")
    H = np.linalg.inv(G)
    if abs(H[2, 2]) < 1e-12:
        raise SingularHomographyError("homography cannot be normalised (H[2,2] == 0)")
    return H / H[2, 2]


def apply_homography(H: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    hom = np.concatenate([points, np.ones(points.shape[:-1] + (1,))], axis=-1) @ H.T
    return hom[..., :2] / hom[..., 2:3]


def warp_image(image: np.ndarray, H: np.ndarray, fill: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Backward-warp ``image`` so that ``out(H p) = image(p)``.

    Bilinear sampling at pixel centers. Samples falling outside the source
    grid take ``fill`` and are marked False in the returned mask.
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    h, w = image.shape[:2]
    if abs(np.linalg.det(H)) < 1e-15:
        raise SingularHomographyError("warp homography is not invertible")
    H_inv = np.linalg.inv(H)
    vv, uu = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    src = apply_homography(H_inv, np.stack([uu, vv], axis=-1))
    # continuous coordinate -> index space where pixel centers are integers
    x = src[..., 0] - 0.5
    y = src[..., 1] - 0.5
    eps = 1e-9
    mask = (x >= -eps) & (x <= w - 1 + eps) & (y >= -eps) & (y <= h - 1 + eps)
    x = np.clip(x, 0.0, w - 1)
    y = np.clip(y, 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros_like(x, dtype=int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros_like(y, dtype=int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    out = (
        image[y0, x0] * (1 - fx) * (1 - fy)
        + image[y0, x1] * fx * (1 - fy)
        + image[y1, x0] * (1 - fx) * fy
        + image[y1, x1] * fx * fy
    )
    out[~mask] = fill
    if squeeze:
        out = out[..., 0]
    return out, mask


# ---------------------------------------------------------------------------
# text format: one view per line, "theta phi z fx fy cx cy W H"


@dataclass(frozen=True)
class CameraRecord:
    pose: OrbitPose
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def camera(self) -> Camera:
        return orbit_camera(self.pose, intrinsics(self.fx, self.fy, self.cx, self.cy), self.width, self.height)

    @classmethod
    def from_pose(cls, pose: OrbitPose, K: np.ndarray, width: int, height: int) -> "CameraRecord":
        return cls(pose, float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), width, height)


def format_cameras(records: Iterable[CameraRecord], header: str | None = None) -> str:
    lines = ["# theta phi z fx fy cx cy W H   (angles in radians)"]
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    for r in records:
        p = r.pose
        vals = [p.elevation, p.azimuth, p.distance, r.fx, r.fy, r.cx, r.cy]
        lines.append(" ".join(repr(float(v)) for v in vals) + f" {r.width} {r.height}")
    return "\n".join(lines) + "\n"


def parse_cameras(text: str, source: str = "<string>") -> list[CameraRecord]:
    records = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 9:
            raise ValueError(f"{source}:{lineno}: expected 9 fields, got {len(parts)}")
        try:
            th, ph, z, fx, fy, cx, cy = map(float, parts[:7])
            w, h = int(parts[7]), int(parts[8])
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
        records.append(CameraRecord(OrbitPose(th, ph, z), fx, fy, cx, cy, w, h))
    return records


def write_cameras(path: Path, records: Sequence[CameraRecord], header: str | None = None) -> None:
    Path(path).write_text(format_cameras(records, header))


def read_cameras(path: Path) -> list[CameraRecord]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"camera file not found: {path}")
    return parse_cameras(path.read_text(), str(path))
