"""Image quality and multi-view consistency metrics.

Images are float arrays in [0, 1] with layout (H, W) or (H, W, C).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .camera import Camera, SingularHomographyError, angular_gap, rectifying_homography, warp_image

PSNR_CAP = 99.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for unit range; identical images report ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-window SSIM over the valid region, averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    scores = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# perceptual features


class FeatureExtractor(Protocol):
    def __call__(self, image: np.ndarray) -> list[torch.Tensor]:
        """Map an (H, W, 3) image to a list of (C, h, w) feature maps."""

    def strides(self) -> list[int]: ...


class RandomPyramid:
    """Fixed-seed random convolutional pyramid.

    The first layer shares one kernel bank across the RGB channels and
    combines them with a sorted sum, so the features are exactly invariant to
    permuting the color channels.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64), seed: int = 0):
        if len(widths) < 2:
            raise ValueError("need at least two scales")
        rng = np.random.default_rng(seed)
        self.widths = tuple(widths)
        self.weights = []
        self.biases = []
        cin = 1
        for w in widths:
            k = rng.normal(0.0, math.sqrt(2.0 / (cin * 9)), size=(w, cin, 3, 3))
            self.weights.append(torch.from_numpy(k))
            self.biases.append(torch.from_numpy(rng.normal(0.0, 0.1, size=w)))
            cin = w

    def strides(self) -> list[int]:
        return [2**i for i in range(len(self.widths))]

    @torch.no_grad()
    def __call__(self, image: np.ndarray) -> list[torch.Tensor]:
        x = torch.from_numpy(np.ascontiguousarray(np.asarray(image, dtype=np.float64).transpose(2, 0, 1)))
        per_channel = F.relu(F.conv2d(x[:, None], self.weights[0], self.biases[0], padding=1))
        h = per_channel.sort(dim=0).values.sum(dim=0, keepdim=True)
        feats = [h[0]]
        for w, b in zip(self.weights[1:], self.biases[1:]):
            h = F.relu(F.conv2d(h, w, b, stride=2, padding=1))
            feats.append(h[0])
        return feats


class EncoderFeatures:
    """Feature maps from a trained source-image encoder."""

    def __init__(self, encoder, scales: int = 3):
        self.encoder = encoder
        self.scales = scales

    def strides(self) -> list[int]:
        return [2 ** (i + 1) for i in range(self.scales)]

    @torch.no_grad()
    def __call__(self, image: np.ndarray) -> list[torch.Tensor]:
        p = next(self.encoder.parameters())
        x = torch.from_numpy(np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None].copy()).to(p.dtype)
        feats = self.encoder.features(x * 2 - 1)[: self.scales]
        return [f[0].double() for f in feats]


def _unit(f: torch.Tensor) -> torch.Tensor:
    return f / (f.norm(dim=0, keepdim=True) + 1e-10)


def _site_mask(mask: np.ndarray, stride: int, shape) -> torch.Tensor:
    h, w = shape
    if stride == 1:
        m = mask
    else:
        H, W = mask.shape
        pad = np.zeros((h * stride, w * stride), dtype=bool)
        pad[:H, :W] = mask
        m = pad.reshape(h, stride, w, stride).all(axis=(1, 3))
    return torch.from_numpy(np.ascontiguousarray(m))


def perceptual_distance(a, b, extractor: FeatureExtractor, mask=None) -> float:
    """Mean over scales of the masked mean squared distance of unit-normalised features.

    With a mask, pixels outside it are zeroed in both images and only feature
    sites whose whole footprint is valid contribute.
    """
    a, b = _pair(a, b)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        a = a * mask[..., None]
        b = b * mask[..., None]
    fa, fb = extractor(a), extractor(b)
    total, used = 0.0, 0
    for x, y, s in zip(fa, fb, extractor.strides()):
        d = (_unit(x) - _unit(y)).pow(2).sum(dim=0)
        if mask is not None:
            m = _site_mask(mask, s, d.shape)
            if not m.any():
                continue
            d = d[m]
        total += float(d.mean())
        used += 1
    if used == 0:
        raise ValueError("mask leaves no valid feature sites")
    return total / used


# ---------------------------------------------------------------------------
# PPLC


@dataclass
class PPLCReport:
    pairs: list[tuple[int, int]]
    distances: list[float]
    phis: list[float]
    scores: list[float]
    coverage: list[float]
    rectify: bool
    closed: bool
    skipped: list[tuple[int, int, str]] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores)) if self.scores else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair", "frame_a", "frame_b", "raw_distance", "phi", "score", "coverage"])
        for k, ((i, j), d, p, s, c) in enumerate(zip(self.pairs, self.distances, self.phis, self.scores, self.coverage)):
            w.writerow([k, i, j, repr(d), repr(p), repr(s), repr(c)])
        for i, j, why in self.skipped:
            w.writerow(["skipped", i, j, why, "", "", ""])
        buf.write(f"# pplc_mean={self.mean!r} rectify={int(self.rectify)} closed={int(self.closed)} pairs={len(self.scores)}\n")
        return buf.getvalue()


def pplc(
    frames: Sequence[np.ndarray],
    cameras: Sequence[Camera],
    extractor: FeatureExtractor,
    rectify: bool = True,
    plane_depth: float | None = None,
    closed: bool = True,
    phi: float | Sequence[float] | None = None,
) -> PPLCReport:
    """Perceptual path length consistency of a frame sequence.

    Each neighbouring pair compares frame i with frame i+1 warped onto it
    (when ``rectify``), restricted to the jointly valid pixels, and scales the
    feature distance by ``1 / phi**2``. ``phi`` defaults to the angular gap of
    the camera centers; a scalar or per-pair list overrides it.
    ``plane_depth`` defaults to the first camera's distance from the origin.
    """
    n = len(frames)
    if n < 2:
        raise ValueError("need at least two frames")
    if len(cameras) != n:
        raise ValueError("one camera per frame")
    idx = [(i, i + 1) for i in range(n - 1)]
    if closed and n > 2:
        idx.append((n - 1, 0))
    if phi is not None and not np.isscalar(phi) and len(phi) != len(idx):
        raise ValueError(f"need {len(idx)} phi values, got {len(phi)}")
    rep = PPLCReport([], [], [], [], [], rectify, closed)
    for k, (i, j) in enumerate(idx):
        a = np.asarray(frames[i], dtype=np.float64)
        b = np.asarray(frames[j], dtype=np.float64)
        gap = angular_gap(cameras[i], cameras[j]) if phi is None else float(phi if np.isscalar(phi) else phi[k])
        mask = None
        if rectify:
            depth = plane_depth if plane_depth is not None else float(np.linalg.norm(cameras[i].center))
            try:
                H = rectifying_homography(cameras[i], cameras[j], depth)
                b, mask = warp_image(b, H)
            except SingularHomographyError as err:
                rep.skipped.append((i, j, f"degenerate homography: {err}"))
                continue
            if not mask.any():
                rep.skipped.append((i, j, "no overlap after rectification"))
                continue
        d = perceptual_distance(a, b, extractor, mask)
        if gap == 0.0:
            if d != 0.0:
                rep.skipped.append((i, j, "zero angular gap"))
                continue
            score = 0.0
        else:
            score = d / gap**2
        rep.pairs.append((i, j))
        rep.distances.append(d)
        rep.phis.append(gap)
        rep.scores.append(score)
        rep.coverage.append(1.0 if mask is None else float(mask.mean()))
    return rep
