"""Command line entry point: dataset-gen, train, render, eval, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import config as C
from .config import BOOL, FLOAT, INT, INTS, STR, ConfigError, Key

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

NET_KEYS = {
    "conditioning_mode": Key(STR, "rcn", choices=("pose_token", "concat_input", "concat_multiscale", "rcn")),
    "attention": Key(BOOL, False),
    "channels": Key(INTS, (32, 64, 128)),
    "time_dim": Key(INT, 128),
    "fourier_bands": Key(INT, 6),
    "mod_hidden": Key(INT, 64),
    "attn_head_dim": Key(INT, 32),
}

SAMPLE_KEYS = {
    "steps": Key(INT, 50),
    "cfg_scale": Key(FLOAT, 3.0),
    "noise": Key(STR, "independent", choices=("shared", "independent")),
    "sigma_mode": Key(STR, "stochastic", choices=("stochastic", "deterministic")),
    "beta_1": Key(FLOAT, 1e-3),
    "beta_T": Key(FLOAT, 0.3),
}

SCHEMAS: dict[str, dict[str, Key]] = {
    "dataset-gen": {
        "scenes": Key(INT, 50),
        "views": Key(INT, 8),
        "image_size": Key(INT, 32),
        "elevation_min_deg": Key(FLOAT, -10.0),
        "elevation_max_deg": Key(FLOAT, 35.0),
        "distance_min": Key(FLOAT, 2.4),
        "distance_max": Key(FLOAT, 2.8),
        "fov_deg": Key(FLOAT, 50.0),
        "test_fraction": Key(FLOAT, 0.2),
        "workers": Key(INT, 1),
    },
    "train": {
        "data": Key(STR, ""),
        "split": Key(STR, "train", choices=("train", "test", "all")),
        "init_checkpoint": Key(STR, ""),
        **NET_KEYS,
        "stage": Key(STR, "rcn_only", choices=("rcn_only", "attention")),
        "views": Key(INT, 0),
        "lr": Key(FLOAT, 1e-4),
        "new_lr_mult": Key(FLOAT, 10.0),
        "weight_decay": Key(FLOAT, 0.01),
        "batch_size": Key(INT, 8),
        "train_steps": Key(INT, 2000),
        "cond_dropout": Key(FLOAT, 0.1),
        "grad_clip": Key(FLOAT, 1.0),
        "freeze_backbone": Key(BOOL, False),
        "train_views": Key(INTS, ()),
        "source_view": Key(INT, -1),
        "log_every": Key(INT, 10),
        "T": Key(INT, 50),
        "beta_1": Key(FLOAT, 1e-3),
        "beta_T": Key(FLOAT, 0.3),
    },
    "render": {
        "checkpoint": Key(STR, ""),
        "data": Key(STR, ""),
        "scene": Key(INT, 0),
        "source_view": Key(INT, 0),
        "frames": Key(INT, 50),
        "elevation_deg": Key(FLOAT, float("nan")),
        "distance": Key(FLOAT, float("nan")),
        "window": Key(INT, 4),
        "montage": Key(BOOL, True),
        **SAMPLE_KEYS,
    },
    "eval": {
        "frames": Key(STR, ""),
        "cameras": Key(STR, ""),
        "reference": Key(STR, ""),
        "rectify": Key(BOOL, True),
        "closed": Key(BOOL, True),
        "plane_depth": Key(FLOAT, float("nan")),
        "phi": Key(FLOAT, float("nan")),
        "extractor_seed": Key(INT, 0),
    },
    "ablate": {
        "scenes": Key(INT, 50),
        "views": Key(INT, 8),
        "image_size": Key(INT, 32),
        "dataset_seed": Key(INT, 0),
        "channels": Key(INTS, (32, 64, 128)),
        "stage1_steps": Key(INT, 3000),
        "stage2_steps": Key(INT, 600),
        "batch_size": Key(INT, 8),
        "lr": Key(FLOAT, 1e-4),
        "cfg_scale": Key(FLOAT, 3.0),
        "sample_steps": Key(INT, 50),
        "eval_sigma": Key(STR, "stochastic", choices=("stochastic", "deterministic")),
        "orbit_frames": Key(INT, 50),
        "window": Key(INT, 4),
        "source_view": Key(INT, 0),
        "max_test_scenes": Key(INT, 0),
        "beta_T": Key(FLOAT, 0.3),
        "rows": Key(STR, "ABCDEF"),
        "pplc": Key(BOOL, True),
    },
}

REQUIRED = {"train": ("data",), "render": ("checkpoint", "data"), "eval": ("frames", "cameras")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raydiff", description="Ray-conditioned multi-view diffusion on synthetic scenes.")
    parser.add_argument("--config", type=Path, help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=0, help="run seed (u64)")
    parser.add_argument("--out", type=Path, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=f"{name} (extra --key=value overrides: {', '.join(schema)})")
        p.add_argument("--config", type=Path, default=argparse.SUPPRESS)
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        p.add_argument("--out", type=Path, default=argparse.SUPPRESS)
    return parser


def _resolve(args, extra: list[str]) -> dict:
    schema = SCHEMAS[args.command]
    layers = []
    if args.config is not None:
        layers.append(C.read_file(args.config))
    layers.append(C.parse_overrides(extra))
    values = C.resolve(schema, *layers)
    if args.seed < 0 or args.seed >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if args.out is None:
        raise ConfigError(f"{args.command} needs --out <dir>")
    for k in REQUIRED.get(args.command, ()):
        if not values[k]:
            raise ConfigError(f"{args.command} needs --{k}")
    return values


def _write_resolved(out: Path, command: str, seed: int, values: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(C.dump(values, {"command": command, "seed": seed}))


# ---------------------------------------------------------------------------
# commands


def cmd_dataset_gen(values: dict, seed: int, out: Path) -> None:
    from .scene import DatasetManifest, build_dataset

    m = DatasetManifest(
        scenes=values["scenes"],
        views=values["views"],
        image_size=values["image_size"],
        elevation_min=math.radians(values["elevation_min_deg"]),
        elevation_max=math.radians(values["elevation_max_deg"]),
        distance_min=values["distance_min"],
        distance_max=values["distance_max"],
        fov=math.radians(values["fov_deg"]),
        test_fraction=values["test_fraction"],
        seed=seed,
    )
    ds = build_dataset(m, out, workers=values["workers"])
    print(f"wrote {len(ds.scenes)} scenes x {m.views} views to {out}")


def cmd_train(values: dict, seed: int, out: Path) -> None:
    from .net import NetworkConfig
    from .scene import load_dataset
    from .train import TrainConfig, load_model, train

    ds = load_dataset(values["data"])
    scenes = ds.scenes if values["split"] == "all" else ds.split(values["split"])
    net = NetworkConfig(image_size=ds.manifest.image_size, **{k: values[k] for k in NET_KEYS})
    tc = TrainConfig(
        stage=values["stage"],
        views=values["views"],
        lr=values["lr"],
        new_lr_mult=values["new_lr_mult"],
        weight_decay=values["weight_decay"],
        batch_size=values["batch_size"],
        steps=values["train_steps"],
        seed=seed,
        cond_dropout=values["cond_dropout"],
        grad_clip=values["grad_clip"],
        freeze_backbone=values["freeze_backbone"],
        train_views=values["train_views"],
        source_view=values["source_view"],
        log_every=values["log_every"],
        T=values["T"],
        beta_1=values["beta_1"],
        beta_T=values["beta_T"],
    )
    model = None
    if values["init_checkpoint"]:
        model, _ = load_model(values["init_checkpoint"], net_override=net, strict=False)
    report, _ = train(scenes, tc, net, out, model=model)
    print(f"trained {tc.steps} steps, final loss {report.final_loss():.4f}, checkpoint {report.checkpoint}")


def _sample_config(values: dict, seed: int):
    from .sampler import SampleConfig

    return SampleConfig(**{k: values[k] for k in SAMPLE_KEYS}, seed=seed)


def cmd_render(values: dict, seed: int, out: Path) -> None:
    from .camera import CameraRecord, spherical_coords, write_cameras
    from .sampler import OrbitRequest, render_orbit
    from .scene import load_dataset, save_png
    from .train import load_model

    model, _ = load_model(values["checkpoint"])
    ds = load_dataset(values["data"])
    if not 0 <= values["scene"] < len(ds.scenes):
        raise ConfigError(f"scene index {values['scene']} outside 0..{len(ds.scenes) - 1}")
    scene = ds.scenes[values["scene"]]
    src = values["source_view"]
    cam = scene.cameras[src]
    el, _, dist = spherical_coords(cam)
    if not math.isnan(values["elevation_deg"]):
        el = math.radians(values["elevation_deg"])
    if not math.isnan(values["distance"]):
        dist = values["distance"]
    req = OrbitRequest(scene.images[src], cam, values["frames"], el, dist)
    frames, cams = render_orbit(model, req, _sample_config(values, seed), window=values["window"])
    out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        save_png(out / f"frame_{i:03d}.png", f)
    write_cameras(out / "orbit.txt", [CameraRecord.from_pose(p, cam.K, cam.width, cam.height) for p in _poses(cams)])
    if values["montage"]:
        save_png(out / "montage.png", montage(frames))
    print(f"wrote {len(frames)} frames to {out}")


def _poses(cams):
    from .camera import OrbitPose, spherical_coords

    return [OrbitPose(*spherical_coords(c)) for c in cams]


def montage(frames: list[np.ndarray], cols: int = 10) -> np.ndarray:
    h, w, ch = frames[0].shape
    rows = -(-len(frames) // cols)
    cols = min(cols, len(frames))
    grid = np.ones((rows * h, cols * w, ch))
    for i, f in enumerate(frames):
        r, c = divmod(i, cols)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = f
    return grid


def _load_frames(directory: Path) -> list[np.ndarray]:
    from .scene import load_png

    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory not found: {directory}")
    paths = sorted(p for p in directory.glob("*.png") if p.name != "montage.png")
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    return [load_png(p) for p in paths]


EVAL_HEADER = ["frame", "psnr", "ssim", "perceptual"]


def cmd_eval(values: dict, seed: int, out: Path) -> None:
    from .camera import read_cameras
    from .metrics import RandomPyramid, perceptual_distance, pplc, psnr, ssim

    frames = _load_frames(values["frames"])
    cams = [r.camera() for r in read_cameras(values["cameras"])]
    if len(cams) != len(frames):
        raise ValueError(f"{values['cameras']} lists {len(cams)} cameras for {len(frames)} frames")
    ex = RandomPyramid(seed=values["extractor_seed"])
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    if values["reference"]:
        ref = _load_frames(values["reference"])
        if len(ref) != len(frames):
            raise ValueError(f"{values['reference']} holds {len(ref)} frames, expected {len(frames)}")
        rows = [(i, psnr(a, b), ssim(a, b), perceptual_distance(a, b, ex)) for i, (a, b) in enumerate(zip(frames, ref))]
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EVAL_HEADER)
            w.writerows([[i, repr(p), repr(s), repr(d)] for i, p, s, d in rows])
        for j, name in enumerate(EVAL_HEADER[1:], 1):
            summary[name] = float(np.mean([r[j] for r in rows]))
    phi = None if math.isnan(values["phi"]) else values["phi"]
    depth = None if math.isnan(values["plane_depth"]) else values["plane_depth"]
    rep = pplc(frames, cams, ex, rectify=values["rectify"], plane_depth=depth, closed=values["closed"], phi=phi)
    (out / "pplc.csv").write_text(rep.to_csv())
    summary["pplc"] = rep.mean
    (out / "summary.txt").write_text("".join(f"{k}={v!r}\n" for k, v in summary.items()))
    print(" ".join(f"{k}={v:.6g}" for k, v in summary.items()))


def cmd_ablate(values: dict, seed: int, out: Path) -> int:
    from .ablation import ROWS, AblationConfig, run_ablation

    rows = tuple(values["rows"])
    bad = [r for r in rows if r not in ROWS]
    if bad:
        raise ConfigError(f"unknown ablation rows {bad}; valid rows: {''.join(ROWS)}")
    names = {f.name for f in fields(AblationConfig)}
    cfg = AblationConfig(seed=seed, **{k: v for k, v in values.items() if k in names})
    report = run_ablation(cfg, out, rows=rows, with_pplc=values["pplc"])
    print(report.table_text(), end="")
    return EXIT_OK if all(c.passed for c in report.checks) else EXIT_RUNTIME


COMMANDS = {
    "dataset-gen": cmd_dataset_gen,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        values = _resolve(args, extra)
        _write_resolved(args.out, args.command, args.seed, values)
        code = COMMANDS[args.command](values, args.seed, args.out)
        return EXIT_OK if code is None else code
    except ConfigError as err:
        print(f"raydiff {args.command}: config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # noqa: BLE001 - report any runtime failure as exit 1
        print(f"raydiff {args.command}: error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
