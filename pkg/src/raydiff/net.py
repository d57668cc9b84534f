"""Multi-view epsilon-prediction network with ray conditioning and cross-view attention.

Tensors follow the (B, V, C, H, W) layout: batch, views, channels, rows,
columns. Every view of a batch element shares its timestep and source image.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .camera import Camera, FourierConfig, ray_map, relative_to, spherical_coords
from .config import ConfigError

CONDITIONING_MODES = ("pose_token", "concat_input", "concat_multiscale", "rcn")
POSE_DIM = 4
NEW_GROUP_KEYS = ("mod_head", "attn", "ray_")


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 32
    channels: tuple[int, ...] = (32, 64, 128)
    conditioning_mode: str = "rcn"
    attention: bool = False
    time_dim: int = 128
    fourier_bands: int = 6
    mod_hidden: int = 64
    attn_head_dim: int = 32
    image_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ConfigError(
                f"unknown conditioning_mode {self.conditioning_mode!r}; valid modes: {', '.join(CONDITIONING_MODES)}"
            )
        if len(self.channels) < 2:
            raise ConfigError("need at least two resolution levels")
        if self.image_size % 2 ** (len(self.channels) - 1):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2^(levels-1)")

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def ray_dim(self) -> int:
        return 6 * (2 * self.fourier_bands + 1)

    @property
    def fourier(self) -> FourierConfig:
        return FourierConfig.for_grid(self.image_size, self.fourier_bands)

    def ray_levels(self) -> tuple[int, ...]:
        """Resolution levels that consume ray embeddings."""
        if self.conditioning_mode == "pose_token":
            return ()
        if self.conditioning_mode == "concat_input":
            return (0,)
        return tuple(range(self.levels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = ",".join(str(c) for c in self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if isinstance(d.get("channels"), str):
            d["channels"] = tuple(int(c) for c in d["channels"].split(","))
        if isinstance(d.get("attention"), str):
            d["attention"] = d["attention"].lower() in ("1", "true", "yes")
        for k in ("image_size", "time_dim", "fourier_bands", "mod_hidden", "attn_head_dim", "image_channels"):
            if k in d:
                d[k] = int(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# conditioning inputs


def relative_pose(target: Camera, source: Camera) -> np.ndarray:
    """(d_elevation, sin d_azimuth, cos d_azimuth, d_distance) of ``target`` w.r.t. ``source``."""
    et, at, zt = spherical_coords(target)
    es, as_, zs = spherical_coords(source)
    return np.array([et - es, math.sin(at - as_), math.cos(at - as_), zt - zs])


class RayEmbedder:
    """Fourier-embedded Plücker maps per resolution level, cached per camera."""

    def __init__(self, config: NetworkConfig, cache_size: int = 4096):
        self.config = config
        self.fourier = config.fourier
        self._cache: dict = {}
        self._cache_size = cache_size

    def __call__(self, camera: Camera, level: int) -> np.ndarray:
        key = (camera.K.tobytes(), camera.R.tobytes(), camera.T.tobytes(), camera.width, camera.height, level)
        hit = self._cache.get(key)
        if hit is None:
            cam = camera.scaled(0.5**level) if level else camera
            hit = np.ascontiguousarray(ray_map(cam, self.fourier).embedded.transpose(2, 0, 1), dtype=np.float32)
            if len(self._cache) >= self._cache_size:
                self._cache.clear()
            self._cache[key] = hit
        return hit


@dataclass
class MultiViewBatch:
    latents: torch.Tensor  # (B, V, C, H, W) noisy targets
    source: torch.Tensor  # (B, C, H, W)
    cameras: list[list[Camera]]  # B x V target cameras
    source_cameras: list[Camera]
    timesteps: torch.Tensor  # (B,)
    cond_mask: torch.Tensor | None = None  # (B,), 0 drops source + camera conditioning

    def __post_init__(self):
        B, V = self.latents.shape[:2]
        if V < 1:
            raise ValueError("need at least one view")
        if self.source.shape[0] != B or len(self.cameras) != B or len(self.source_cameras) != B:
            raise ValueError("batch sizes disagree")
        if any(len(c) != V for c in self.cameras):
            raise ValueError("every batch element needs one camera per view")
        if self.timesteps.shape != (B,):
            raise ValueError("one timestep per batch element")


@dataclass
class Conditioning:
    pose: torch.Tensor  # (B, V, 4)
    rays: dict[int, torch.Tensor] = field(default_factory=dict)  # level -> (B, V, R, h, w)


def build_conditioning(
    cameras: Sequence[Sequence[Camera]],
    source_cameras: Sequence[Camera],
    config: NetworkConfig,
    embedder: RayEmbedder | None = None,
    dtype=torch.float32,
) -> Conditioning:
    """Camera conditioning expressed in the source-relative frame (source at azimuth 0)."""
    embedder = embedder or RayEmbedder(config)
    pose = np.array([[relative_pose(c, s) for c in row] for row, s in zip(cameras, source_cameras)])
    rays = {}
    levels = config.ray_levels()
    if levels:
        rel = [[relative_to(c, s) for c in row] for row, s in zip(cameras, source_cameras)]
        for lvl in levels:
            arr = np.stack([np.stack([embedder(c, lvl) for c in row]) for row in rel])
            rays[lvl] = torch.from_numpy(arr).to(dtype)
    return Conditioning(torch.from_numpy(pose).to(dtype), rays)


# ---------------------------------------------------------------------------
# layers


class ChannelLayerNorm(nn.Module):
    """Layer norm over channels at every spatial site of an (N, C, H, W) map."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = (x - mu).pow(2).mean(dim=1, keepdim=True)
        xhat = (x - mu) / torch.sqrt(var + self.eps)
        return xhat * self.weight[:, None, None] + self.bias[:, None, None]


class ModulationHead(nn.Module):
    """Per-pixel two-layer map from ray embeddings to (gamma, beta)."""

    def __init__(self, ray_dim: int, hidden: int, channels: int):
        super().__init__()
        self.fc1 = nn.Conv2d(ray_dim, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, 2 * channels, 1)

    def forward(self, rays):
        gamma, beta = self.fc2(F.silu(self.fc1(rays))).chunk(2, dim=1)
        return gamma, beta


def modulate(features, gamma, beta, norm: ChannelLayerNorm):
    """``LN(F) * (1 + gamma) + beta``."""
    return norm(features) * (1 + gamma) + beta


def rcn_modulate(features, rays, norm: ChannelLayerNorm, head: ModulationHead):
    if features.shape[-2:] != rays.shape[-2:]:
        raise ValueError(f"ray map {tuple(rays.shape[-2:])} does not match features {tuple(features.shape[-2:])}")
    gamma, beta = head(rays)
    return modulate(features, gamma, beta, norm)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, config: NetworkConfig, use_rays: bool):
        super().__init__()
        mode = config.conditioning_mode
        self.norm1 = ChannelLayerNorm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(config.time_dim, cout)
        self.norm2 = ChannelLayerNorm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.mod_head = ModulationHead(config.ray_dim, config.mod_hidden, cin) if use_rays and mode == "rcn" else None
        self.ray_conv = (
            nn.Conv2d(config.ray_dim, cout, 3, padding=1) if use_rays and mode == "concat_multiscale" else None
        )

    def zero_init_names(self) -> list[str]:
        names = []
        if self.mod_head is not None:
            names += ["mod_head.fc2.weight", "mod_head.fc2.bias"]
        if self.ray_conv is not None:
            names += ["ray_conv.weight", "ray_conv.bias"]
        return names

    def forward(self, x, g, rays=None):
        if self.mod_head is not None:
            h = rcn_modulate(x, rays, self.norm1, self.mod_head)
        else:
            h = self.norm1(x)
        h = self.conv1(F.silu(h))
        if self.ray_conv is not None:
            # conv over concat([h, rays]) split into its two input blocks
            h = h + self.ray_conv(rays)
        h = h + self.temb(F.silu(g))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class MultiViewAttention(nn.Module):
    """Softmax attention across the view axis, independently at each pixel."""

    def __init__(self, channels: int, head_dim: int = 32):
        super().__init__()
        self.heads = max(1, channels // head_dim)
        if channels % self.heads:
            raise ValueError("channels must be divisible by the head count")
        self.norm = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)

    def zero_init_names(self) -> list[str]:
        return ["out.weight", "out.bias"]

    def forward(self, z):
        B, V, C, H, W = z.shape
        seq = z.permute(0, 3, 4, 1, 2).reshape(B * H * W, V, C)
        h = self.norm(seq)
        nh, hd = self.heads, C // self.heads
        q = self.q(h).view(-1, V, nh, hd).transpose(1, 2)
        k = self.k(h).view(-1, V, nh, hd).transpose(1, 2)
        v = self.v(h).view(-1, V, nh, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        o = (attn @ v).transpose(1, 2).reshape(-1, V, C)
        out = seq + self.out(o)
        return out.view(B, H, W, V, C).permute(0, 3, 4, 1, 2)


def multiview_attention(z, layer: MultiViewAttention):
    return layer(z)


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(dtype)


class SourceEncoder(nn.Module):
    """Four strided convolutions pooled to one global vector per source image."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        c0, c1 = config.channels[0], config.channels[1]
        widths = [config.image_channels, c0, c0, c1, c1]
        self.convs = nn.ModuleList(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(4))
        self.proj = nn.Linear(c1, config.time_dim)

    def features(self, x) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = F.silu(conv(x))
            feats.append(x)
        return feats

    def forward(self, x):
        return self.proj(self.features(x)[-1].mean(dim=(2, 3)))


# ---------------------------------------------------------------------------
# network


class Denoiser(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        td = config.time_dim
        ray_levels = set(config.ray_levels())
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.src_encoder = SourceEncoder(config)
        self.pose_mlp = nn.Sequential(nn.Linear(POSE_DIM, td), nn.SiLU(), nn.Linear(td, td))
        self.in_conv = nn.Conv2d(2 * config.image_channels, ch[0], 3, padding=1)
        self.ray_in = nn.Conv2d(config.ray_dim, ch[0], 3, padding=1) if config.conditioning_mode == "concat_input" else None
        use_r = config.conditioning_mode in ("rcn", "concat_multiscale")

        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = ch[0]
        for lvl, c in enumerate(ch):
            self.down.append(ResBlock(prev, c, config, use_r and lvl in ray_levels))
            self.down_attn.append(self._attn(c))
            if lvl < len(ch) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            prev = c
        self.mid = ResBlock(ch[-1], ch[-1], config, use_r)
        self.mid_attn = self._attn(ch[-1])
        self.up = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for lvl in reversed(range(len(ch))):
            self.up.append(ResBlock(prev + ch[lvl], ch[lvl], config, use_r and lvl in ray_levels))
            self.up_attn.append(self._attn(ch[lvl]))
            if lvl > 0:
                self.upsample.append(nn.Conv2d(ch[lvl], ch[lvl - 1], 3, padding=1))
                prev = ch[lvl - 1]
            else:
                prev = ch[lvl]
        self.out_norm = ChannelLayerNorm(ch[0])
        self.out_conv = nn.Conv2d(ch[0], config.image_channels, 3, padding=1)

    def _attn(self, c):
        return MultiViewAttention(c, self.config.attn_head_dim) if self.config.attention else nn.Identity()

    def zero_init_names(self) -> set[str]:
        names = {"pose_mlp.2.weight", "pose_mlp.2.bias"}
        if self.ray_in is not None:
            names |= {"ray_in.weight", "ray_in.bias"}
        for prefix, mod in self.named_modules():
            if hasattr(mod, "zero_init_names") and mod is not self:
                names |= {f"{prefix}.{n}" for n in mod.zero_init_names()}
        return names

    def forward(self, z, t, source, cond: Conditioning, cond_mask=None):
        B, V, C, H, W = z.shape
        cfg = self.config
        if cond_mask is None:
            cond_mask = torch.ones(B, dtype=z.dtype)
        m = cond_mask.to(z.dtype)
        source = source * m[:, None, None, None]
        pose = cond.pose * m[:, None, None]

        g = self.time_mlp(timestep_embedding(t, cfg.time_dim, z.dtype)) + self.src_encoder(source)
        g = g[:, None, :] + self.pose_mlp(pose)  # (B, V, td)
        g = g.reshape(B * V, -1)

        def rays_at(lvl):
            r = cond.rays.get(lvl)
            if r is None:
                return None
            if r.shape[-2:] != (H >> lvl, W >> lvl):
                raise ValueError(f"ray embedding at level {lvl} has size {tuple(r.shape[-2:])}")
            return (r * m[:, None, None, None, None]).reshape(B * V, *r.shape[2:])

        def attend(layer, h):
            if isinstance(layer, nn.Identity):
                return h
            return layer(h.view(B, V, *h.shape[1:])).reshape(B * V, *h.shape[1:])

        x = torch.cat([z, source[:, None].expand(B, V, C, H, W)], dim=2).reshape(B * V, 2 * C, H, W)
        h = self.in_conv(x)
        if self.ray_in is not None:
            h = h + self.ray_in(rays_at(0))

        skips = []
        last = len(cfg.channels) - 1
        for lvl in range(len(cfg.channels)):
            h = self.down[lvl](h, g, rays_at(lvl))
            h = attend(self.down_attn[lvl], h)
            skips.append(h)
            if lvl < last:
                h = self.downsample[lvl](h)
        h = self.mid(h, g, rays_at(last))
        h = attend(self.mid_attn, h)
        for i, lvl in enumerate(reversed(range(len(cfg.channels)))):
            h = self.up[i](torch.cat([h, skips[lvl]], dim=1), g, rays_at(lvl))
            h = attend(self.up_attn[i], h)
            if lvl > 0:
                h = self.upsample[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.out_conv(F.silu(self.out_norm(h)))
        return out.view(B, V, C, H, W)


def _name_seed(seed: int, name: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{name}".encode()).digest()[:8], "little") & (2**63 - 1)


def init_parameters(config: NetworkConfig, seed: int) -> Denoiser:
    """Build a network with per-name deterministic initialisation.

    Every tensor draws from a generator keyed on (seed, name), so backbone
    weights are identical across conditioning modes for the same seed. New
    conditioning pathways start at zero, making every mode compute the same
    function at step 0.
    """
    model = Denoiser(config)
    zeros = model.zero_init_names()
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            if name in zeros:
                p.zero_()
                continue
            owner = name.rsplit(".", 1)[0]
            if isinstance(model.get_submodule(owner), (ChannelLayerNorm, nn.LayerNorm)):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
                continue
            weight = params[owner + ".weight"]
            fan_in = weight[0].numel() if weight.dim() > 1 else weight.shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            g = torch.Generator().manual_seed(_name_seed(seed, name))
            p.copy_(torch.rand(p.shape, generator=g, dtype=torch.float64).mul_(2 * bound).sub_(bound).to(p.dtype))
    return model


def parameter_group(name: str) -> str:
    return "new" if any(k in name for k in NEW_GROUP_KEYS) else "backbone"


def parameter_groups(model: nn.Module) -> dict[str, list[tuple[str, nn.Parameter]]]:
    groups: dict[str, list] = {"backbone": [], "new": []}
    for name, p in model.named_parameters():
        groups[parameter_group(name)].append((name, p))
    return groups


def denoise_forward(batch: MultiViewBatch, model: Denoiser, embedder: RayEmbedder | None = None) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    cond = build_conditioning(batch.cameras, batch.source_cameras, model.config, embedder, dtype)
    return model(batch.latents.to(dtype), batch.timesteps, batch.source.to(dtype), cond, batch.cond_mask)
