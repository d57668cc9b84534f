"""Guided joint sampling of target views and windowed orbit rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .camera import Camera, OrbitPose, orbit_camera, spherical_coords
from .diffusion import DiffusionSchedule, backward_step, make_schedule
from .net import Conditioning, Denoiser, RayEmbedder, build_conditioning
from .train import to_image, to_model_space

NOISE_MODES = ("shared", "independent")


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 50
    cfg_scale: float = 3.0
    noise: str = "independent"
    sigma_mode: str = "stochastic"
    seed: int = 0
    beta_1: float = 1e-3
    beta_T: float = 0.3

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if self.noise not in NOISE_MODES:
            raise ValueError(f"noise must be one of {NOISE_MODES}, got {self.noise!r}")
        if self.sigma_mode not in ("stochastic", "deterministic"):
            raise ValueError(f"unknown sigma_mode {self.sigma_mode!r}")

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.steps, self.beta_1, self.beta_T, self.sigma_mode)


@dataclass(frozen=True)
class OrbitRequest:
    source: np.ndarray  # (H, W, 3) in [0, 1]
    source_camera: Camera
    frames: int = 50
    elevation: float = 0.0
    distance: float = 2.6
    azimuths: tuple[float, ...] = ()  # empty: uniform steps of 2*pi/frames from the source azimuth

    def __post_init__(self):
        if self.azimuths and len(self.azimuths) != self.frames:
            raise ValueError("azimuth list must have one entry per frame")
        if self.frames < 2:
            raise ValueError("an orbit needs at least 2 frames")

    def cameras(self) -> list[Camera]:
        _, az0, _ = spherical_coords(self.source_camera)
        az = self.azimuths or tuple(az0 + 2 * math.pi * k / self.frames for k in range(self.frames))
        c = self.source_camera
        return [orbit_camera(OrbitPose(self.elevation, a, self.distance), c.K, c.width, c.height) for a in az]


class NoiseStreams:
    """Per-view Gaussian streams keyed on (seed, view id).

    Shared mode draws once from the first view's stream and replicates the
    draw across every view, both for the initial latent and for each step's
    fresh noise.
    """

    def __init__(self, seed: int, view_ids: Sequence[int], mode: str):
        self.mode = mode
        ids = [view_ids[0]] if mode == "shared" else list(view_ids)
        self.gens = [torch.Generator().manual_seed(_stream_seed(seed, v)) for v in ids]
        self.n = len(view_ids)

    def draw(self, shape) -> torch.Tensor:
        draws = [torch.randn(shape, generator=g) for g in self.gens]
        if self.mode == "shared":
            return draws[0][None].expand(self.n, *shape).clone()
        return torch.stack(draws)


def _stream_seed(seed: int, view_id: int) -> int:
    return int(np.random.SeedSequence([seed, view_id]).generate_state(2, np.uint64)[0] & np.uint64(2**63 - 1))


@torch.no_grad()
def guided_eps(
    model: Denoiser,
    z: torch.Tensor,
    t: int,
    source: torch.Tensor,
    cond: Conditioning,
    scale: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(guided, conditional, unconditional) noise predictions for latents ``z`` (B, V, C, H, W)."""
    B = z.shape[0]
    tt = torch.full((B,), t, dtype=torch.long)
    eps_c = model(z, tt, source, cond, torch.ones(B, dtype=z.dtype))
    eps_u = model(z, tt, source, cond, torch.zeros(B, dtype=z.dtype))
    return eps_u + scale * (eps_c - eps_u), eps_c, eps_u


TraceFn = Callable[[int, torch.Tensor, torch.Tensor, torch.Tensor], None]


@torch.no_grad()
def sample_views(
    model: Denoiser,
    source: np.ndarray,
    source_camera: Camera,
    cameras: Sequence[Camera],
    config: SampleConfig = SampleConfig(),
    view_ids: Sequence[int] | None = None,
    trace: TraceFn | None = None,
    embedder: RayEmbedder | None = None,
) -> list[np.ndarray]:
    """Denoise all target views jointly from pure noise; returns images in [0, 1]."""
    if not cameras:
        raise ValueError("need at least one target camera")
    size = model.config.image_size
    if source.shape[:2] != (size, size) or any((c.width, c.height) != (size, size) for c in cameras):
        raise ValueError(f"model expects {size}x{size} images")
    view_ids = list(range(len(cameras))) if view_ids is None else list(view_ids)
    sched = config.schedule()
    streams = NoiseStreams(config.seed, view_ids, config.noise)
    C = model.config.image_channels
    dtype = next(model.parameters()).dtype
    z = streams.draw((C, size, size))[None].to(dtype)
    src = to_model_space(source)[None].to(dtype)
    cond = build_conditioning([list(cameras)], [source_camera], model.config, embedder, dtype)
    for t in range(sched.T, 0, -1):
        eps, eps_c, eps_u = guided_eps(model, z, t, src, cond, config.cfg_scale)
        if trace is not None:
            trace(t, eps, eps_c, eps_u)
        fresh = streams.draw((C, size, size))[None].to(dtype) if sched.sigmas[t] > 0 else None
        z = backward_step(z, t, eps, fresh, sched)
    return [to_image(v) for v in z[0]]


def orbit_windows(frames: int, window: int) -> list[list[int]]:
    """Overlapping windows of ``window`` frames with stride ``window - 1`` covering every frame."""
    if window < 2:
        raise ValueError("window must hold at least 2 frames")
    if frames <= window:
        return [list(range(frames))]
    starts = list(range(0, frames - window + 1, window - 1))
    if starts[-1] + window < frames:
        starts.append(frames - window)
    return [list(range(s, s + window)) for s in starts]


@torch.no_grad()
def render_orbit(
    model: Denoiser,
    request: OrbitRequest,
    config: SampleConfig = SampleConfig(),
    window: int = 4,
    trace: TraceFn | None = None,
) -> tuple[list[np.ndarray], list[Camera]]:
    """Render an orbit around the source with the step noise switched off.

    Long orbits are denoised in overlapping windows; frames covered by
    several windows average their noise predictions at every step, and the
    initial latent is drawn once for the whole orbit.
    """
    cameras = request.cameras()
    config = SampleConfig(**{**config.__dict__, "sigma_mode": "deterministic"})
    n = len(cameras)
    if n <= window:
        return sample_views(model, request.source, request.source_camera, cameras, config, trace=trace), cameras
    sched = config.schedule()
    size = model.config.image_size
    C = model.config.image_channels
    dtype = next(model.parameters()).dtype
    z = NoiseStreams(config.seed, list(range(n)), config.noise).draw((C, size, size)).to(dtype)
    wins = orbit_windows(n, window)
    src = to_model_space(request.source)[None].expand(len(wins), -1, -1, -1).to(dtype)
    cond = build_conditioning(
        [[cameras[i] for i in w] for w in wins], [request.source_camera] * len(wins), model.config, dtype=dtype
    )
    counts = torch.zeros(n, dtype=dtype)
    for w in wins:
        counts[w] += 1
    for t in range(sched.T, 0, -1):
        zw = torch.stack([z[w] for w in wins])
        eps_w, _, _ = guided_eps(model, zw, t, src, cond, config.cfg_scale)
        eps = torch.zeros_like(z)
        for k, w in enumerate(wins):
            eps[w] += eps_w[k]
        eps = eps / counts[:, None, None, None]
        if trace is not None:
            trace(t, eps, eps_w, None)
        z = backward_step(z, t, eps, None, sched)
    return [to_image(v) for v in z], cameras
