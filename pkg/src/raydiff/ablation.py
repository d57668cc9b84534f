"""Conditioning ablation ladder on a synthetic dataset.

Rows A-D differ only in how camera information enters the network. Row E
fine-tunes D with cross-view attention; row F samples E's checkpoint with
shared initial noise, so E and F share one set of weights.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .camera import spherical_coords
from .checkpoint import file_digest
from .metrics import RandomPyramid, perceptual_distance, pplc, psnr, ssim
from .net import NetworkConfig
from .sampler import OrbitRequest, SampleConfig, render_orbit, sample_views
from .scene import Dataset, DatasetManifest, SceneViews, build_dataset, load_dataset
from .train import TrainConfig, load_model, nearest_views, train

ROWS = {
    "A": ("pose_token", False, "independent"),
    "B": ("concat_input", False, "independent"),
    "C": ("concat_multiscale", False, "independent"),
    "D": ("rcn", False, "independent"),
    "E": ("rcn", True, "independent"),
    "F": ("rcn", True, "shared"),
}
COLUMNS = ("row", "mode", "attention", "noise", "psnr", "ssim", "perceptual", "pplc", "checkpoint_sha256")


@dataclass(frozen=True)
class AblationConfig:
    scenes: int = 50
    views: int = 8
    image_size: int = 32
    dataset_seed: int = 0
    seed: int = 0
    channels: tuple[int, ...] = (32, 64, 128)
    stage1_steps: int = 3000
    stage2_steps: int = 600
    batch_size: int = 8
    lr: float = 1e-4
    cfg_scale: float = 3.0
    sample_steps: int = 50
    eval_sigma: str = "stochastic"
    orbit_frames: int = 50
    window: int = 4
    source_view: int = 0
    max_test_scenes: int = 0  # 0 keeps every test scene
    beta_T: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def manifest(self) -> DatasetManifest:
        return DatasetManifest(scenes=self.scenes, views=self.views, image_size=self.image_size, seed=self.dataset_seed)

    def net(self, row: str) -> NetworkConfig:
        mode, attn, _ = ROWS[row]
        return NetworkConfig(image_size=self.image_size, channels=self.channels, conditioning_mode=mode, attention=attn)

    def train_config(self, stage: str) -> TrainConfig:
        steps = self.stage1_steps if stage == "rcn_only" else self.stage2_steps
        return TrainConfig(stage=stage, steps=steps, batch_size=self.batch_size, lr=self.lr, seed=self.seed, log_every=50,
                           beta_T=self.beta_T)

    def sample_config(self, row: str) -> SampleConfig:
        return SampleConfig(
            steps=self.sample_steps, cfg_scale=self.cfg_scale, noise=ROWS[row][2], sigma_mode=self.eval_sigma, seed=self.seed,
            beta_T=self.beta_T,
        )


@dataclass
class RowResult:
    row: str
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    perceptual: list[float] = field(default_factory=list)
    pplc: list[float] = field(default_factory=list)  # one per test orbit
    checkpoint_sha256: str = ""

    def summary(self) -> dict:
        mode, attn, noise = ROWS[self.row]
        mean = lambda v: float(np.mean(v)) if v else float("nan")  # noqa: E731
        return {
            "row": self.row,
            "mode": mode,
            "attention": int(attn),
            "noise": noise,
            "psnr": mean(self.psnr),
            "ssim": mean(self.ssim),
            "perceptual": mean(self.perceptual),
            "pplc": mean(self.pplc),
            "checkpoint_sha256": self.checkpoint_sha256,
        }


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class AblationReport:
    config: AblationConfig
    rows: dict[str, RowResult]
    checks: list[Check]
    timings: dict[str, float]

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows.values():
            s = r.summary()
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in s.items()})
        return buf.getvalue()

    def table_text(self) -> str:
        lines = [f"{'row':<4}{'mode':<19}{'attn':<6}{'noise':<13}{'PSNR':>8}{'SSIM':>8}{'percep':>9}{'PPLC':>10}"]
        for r in self.rows.values():
            s = r.summary()
            lines.append(
                f"{s['row']:<4}{s['mode']:<19}{s['attention']:<6}{s['noise']:<13}"
                f"{s['psnr']:>8.3f}{s['ssim']:>8.4f}{s['perceptual']:>9.4f}{s['pplc']:>10.4f}"
            )
        lines += [f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}" for c in self.checks]
        return "\n".join(lines) + "\n"


def directional_checks(rows: dict[str, RowResult], majority: float = 0.9) -> list[Check]:
    checks = []
    s = {k: r.summary() for k, r in rows.items()}
    if "A" in s and "D" in s:
        checks.append(Check("D beats A on held-out PSNR", s["D"]["psnr"] > s["A"]["psnr"], f"{s['D']['psnr']:.3f} vs {s['A']['psnr']:.3f} dB"))
    if "A" in s and "B" in s:
        checks.append(Check("B beats A on held-out PSNR", s["B"]["psnr"] > s["A"]["psnr"], f"{s['B']['psnr']:.3f} vs {s['A']['psnr']:.3f} dB"))
    if "E" in rows and "F" in rows:
        e, f = np.array(rows["E"].pplc), np.array(rows["F"].pplc)
        frac = float(np.mean(f < e)) if len(e) else 0.0
        checks.append(Check("F lowers PPLC on most orbits", frac >= majority, f"{frac:.0%} of {len(e)} orbits, mean {f.mean():.4f} vs {e.mean():.4f}"))
        same = rows["E"].checkpoint_sha256 == rows["F"].checkpoint_sha256
        checks.append(Check("F reuses E weights", same, rows["E"].checkpoint_sha256[:12]))
    return checks


def evaluate_targets(model, scene: SceneViews, cfg: AblationConfig, row: str, extractor) -> tuple[list, list, list]:
    """Sample every non-source view of a test scene from the source view."""
    src = cfg.source_view
    targets = [v for v in range(len(scene.cameras)) if v != src]
    groups = [targets]
    if ROWS[row][1]:
        # attention was trained on small neighbourhoods: sample nearest-view groups
        remaining = list(targets)
        groups = []
        while remaining:
            local = nearest_views([scene.cameras[v] for v in remaining], 0, min(cfg.window, len(remaining)))
            groups.append([remaining[i] for i in local])
            remaining = [v for v in remaining if v not in groups[-1]]
    p, s, d = [], [], []
    for g in groups:
        imgs = sample_views(model, scene.images[src], scene.cameras[src], [scene.cameras[v] for v in g],
                            cfg.sample_config(row), view_ids=g)
        for v, img in zip(g, imgs):
            gt = scene.images[v]
            p.append(psnr(img, gt))
            s.append(ssim(img, gt))
            d.append(perceptual_distance(img, gt, extractor))
    return p, s, d


def orbit_pplc(model, scene: SceneViews, cfg: AblationConfig, row: str, extractor) -> float:
    src = cfg.source_view
    el, _, dist = spherical_coords(scene.cameras[src])
    req = OrbitRequest(scene.images[src], scene.cameras[src], cfg.orbit_frames, el, dist)
    frames, cams = render_orbit(model, req, cfg.sample_config(row), window=cfg.window)
    return pplc(frames, cams, extractor, rectify=True, plane_depth=dist).mean


def run_ablation(
    cfg: AblationConfig,
    out_dir: Path,
    rows: tuple[str, ...] = tuple(ROWS),
    log: Callable[[str], None] = print,
    with_pplc: bool = True,
) -> AblationReport:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation_config.txt").write_text("".join(f"{k}={v}\n" for k, v in sorted(asdict(cfg).items())))
    data_dir = out_dir / "dataset"
    ds: Dataset = load_dataset(data_dir) if (data_dir / "manifest.txt").exists() else build_dataset(cfg.manifest(), data_dir)
    if ds.manifest != cfg.manifest():
        raise ValueError(f"{data_dir} holds a different dataset manifest")
    train_scenes, test_scenes = ds.split("train"), ds.split("test")
    if cfg.max_test_scenes:
        test_scenes = test_scenes[: cfg.max_test_scenes]
    log(f"dataset: {len(train_scenes)} train scenes, {len(test_scenes)} test scenes")
    extractor = RandomPyramid()
    results: dict[str, RowResult] = {}
    timings: dict[str, float] = {}
    torch.set_num_threads(max(1, torch.get_num_threads()))
    for row in rows:
        t0 = time.perf_counter()
        mode, attn, _ = ROWS[row]
        ckpt = out_dir / f"row_{row}" / "model.ckpt"
        if row == "F":
            ckpt = out_dir / "row_E" / "model.ckpt"
            if not ckpt.exists():
                raise ValueError("row F needs row E's checkpoint")
            model, _ = load_model(ckpt)
        elif row == "E":
            base = out_dir / "row_D" / "model.ckpt"
            if not base.exists():
                raise ValueError("row E fine-tunes row D's checkpoint")
            model, _ = load_model(base, net_override=cfg.net("E"), strict=False)
            _, model = train(train_scenes, cfg.train_config("attention"), cfg.net("E"), out_dir / "row_E", model=model,
                             log_fn=_progress(log, row))
        else:
            _, model = train(train_scenes, cfg.train_config("rcn_only"), cfg.net(row), out_dir / f"row_{row}",
                             log_fn=_progress(log, row))
        res = RowResult(row, checkpoint_sha256=file_digest(ckpt))
        for scene in test_scenes:
            p, s, d = evaluate_targets(model, scene, cfg, row, extractor)
            res.psnr += p
            res.ssim += s
            res.perceptual += d
            if with_pplc:
                res.pplc.append(orbit_pplc(model, scene, cfg, row, extractor))
        results[row] = res
        timings[row] = time.perf_counter() - t0
        sm = res.summary()
        log(f"row {row}: psnr {sm['psnr']:.3f} ssim {sm['ssim']:.4f} percep {sm['perceptual']:.4f} pplc {sm['pplc']:.4f} ({timings[row]:.0f}s)")
        with open(out_dir / f"row_{row}_per_view.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "psnr", "ssim", "perceptual"])
            for i, vals in enumerate(zip(res.psnr, res.ssim, res.perceptual)):
                w.writerow([i, *map(repr, vals)])
        if with_pplc:
            (out_dir / f"row_{row}_pplc.csv").write_text("orbit,pplc\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(res.pplc)))
    report = AblationReport(cfg, results, directional_checks(results), timings)
    (out_dir / "ablation_table.csv").write_text(report.table_csv())
    (out_dir / "ablation_table.txt").write_text(report.table_text())
    return report


def _progress(log, row):
    def fn(step, loss, _):
        if step % 500 == 0:
            log(f"row {row} step {step} loss {loss:.4f}")

    return fn
