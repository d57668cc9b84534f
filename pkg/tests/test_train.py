import math

import numpy as np
import pytest
import torch

from raydiff.camera import OrbitPose, intrinsics_from_fov, orbit_camera
from raydiff.checkpoint import file_digest, load_checkpoint, save_checkpoint
from raydiff.net import MultiViewBatch, NetworkConfig, init_parameters, parameter_group
from raydiff.scene import DatasetManifest, make_scene_views
from raydiff.train import (
    BatchSampler,
    TrainConfig,
    diffusion_loss,
    eval_timestep,
    load_model,
    make_optimizer,
    nearest_views,
    TrainingDivergedError,
    reconstruction_psnr,
    train,
)

TINY = NetworkConfig(image_size=8, channels=(8, 16), time_dim=16, mod_hidden=8)


@pytest.fixture(scope="module")
def scenes():
    m = DatasetManifest(scenes=2, views=5, image_size=8, seed=1)
    return [make_scene_views(m, i)[1] for i in range(2)]


def _ring(angles_deg, el=0.0):
    K = intrinsics_from_fov(math.radians(50), 8, 8)
    return [orbit_camera(OrbitPose(el, math.radians(a), 2.6), K, 8, 8) for a in angles_deg]


def test_nearest_views_cases():
    cams = _ring([0, 90, 180, 270])
    assert nearest_views(cams, 0, 2) == [0, 1]  # 90 and 270 tie; lower index wins
    assert nearest_views(cams, 2, 2) == [2, 1]
    assert sorted(nearest_views(cams, 3, 4)) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        nearest_views(cams, 0, 5)


def test_nearest_views_brute_force_oracle():
    rng = np.random.default_rng(0)
    K = intrinsics_from_fov(math.radians(50), 8, 8)
    for trial in range(20):
        cams = [orbit_camera(OrbitPose(rng.uniform(-0.5, 0.8), rng.uniform(0, 6.28), rng.uniform(2, 3)), K, 8, 8) for _ in range(9)]
        anchor = int(rng.integers(9))
        n = int(rng.integers(1, 10))
        u = [c.center / np.linalg.norm(c.center) for c in cams]
        dist = []
        for i in range(9):
            dist.append((0.0 if i == anchor else math.acos(max(-1.0, min(1.0, float(u[i] @ u[anchor])))), i))
        # anchor first, then the exhaustive sort
        rest = sorted(d for d in dist if d[1] != anchor)
        assert nearest_views(cams, anchor, n) == [anchor] + [i for _, i in rest][: n - 1]


def test_train_config_validation():
    with pytest.raises(ValueError, match="stage"):
        TrainConfig(stage="everything")
    assert TrainConfig().n_views == 1 and TrainConfig(stage="attention").n_views == 4


def test_new_group_effective_step_is_ten_times():
    # float64 so rounding of the update does not blur the ratio
    model = init_parameters(NetworkConfig(image_size=8, channels=(8, 16), attention=True), 0).double()
    cfg = TrainConfig(lr=1e-3, weight_decay=0.01)
    opt = make_optimizer(model, cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.fill_(0.5)
            p.grad = torch.full_like(p, 0.37)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    opt.step()
    steps = {"backbone": set(), "new": set()}
    for n, p in model.named_parameters():
        steps[parameter_group(n)].add(round(float((before[n] - p.detach()).abs().max()), 12))
    assert len(steps["backbone"]) == 1 and len(steps["new"]) == 1
    ratio = steps["new"].pop() / steps["backbone"].pop()
    assert ratio == pytest.approx(10.0, rel=1e-9)


def test_freeze_backbone():
    model = init_parameters(NetworkConfig(image_size=8, channels=(8, 16), attention=True), 0)
    opt = make_optimizer(model, TrainConfig(freeze_backbone=True))
    assert [g["name"] for g in opt.param_groups] == ["new"]


def test_zero_step_checkpoint_equals_init(tmp_path, scenes):
    rep, _ = train(scenes, TrainConfig(steps=0, batch_size=2, seed=3), TINY, tmp_path / "run")
    init_path = save_checkpoint(tmp_path / "init.ckpt", init_parameters(TINY, 3), {})
    got, _ = load_checkpoint(rep.checkpoint)
    want, _ = load_checkpoint(init_path)
    assert set(got) == set(want) and all(torch.equal(got[k], want[k]) for k in got)


def test_training_is_deterministic(tmp_path, scenes):
    cfg = TrainConfig(steps=6, batch_size=2, log_every=1, seed=2)
    a, _ = train(scenes, cfg, TINY, tmp_path / "a")
    b, _ = train(scenes, cfg, TINY, tmp_path / "b")
    assert a.losses == b.losses and len(a.losses) == 6
    assert all(math.isfinite(x) for x in a.losses)
    assert file_digest(a.checkpoint) == file_digest(b.checkpoint)
    assert (tmp_path / "a" / "train_log.csv").read_text() == (tmp_path / "b" / "train_log.csv").read_text()
    header = (tmp_path / "a" / "train_log.csv").read_text().splitlines()[0]
    assert header == "step,loss,lr,psnr_eval"


def test_stage_two_multiview_batches(tmp_path, scenes):
    cfg = TrainConfig(stage="attention", steps=2, batch_size=2, log_every=1)
    s = BatchSampler(scenes, cfg)
    z0, src, cams, src_cams = s.sample(3)
    assert z0.shape == (3, 4, 3, 8, 8) and src.shape == (3, 3, 8, 8)
    rep, _ = train(scenes, cfg, NetworkConfig(**{**TINY.__dict__, "attention": True}), tmp_path / "s2")
    assert len(rep.losses) == 2


def test_fine_tune_loads_without_attention(tmp_path, scenes):
    rep, _ = train(scenes, TrainConfig(steps=1, batch_size=2), TINY, tmp_path / "d")
    with_attn = NetworkConfig(**{**TINY.__dict__, "attention": True})
    model, _ = load_model(rep.checkpoint, net_override=with_attn, strict=False)
    assert any("attn" in n for n, _ in model.named_parameters())
    with pytest.raises(ValueError):
        load_model(rep.checkpoint, net_override=with_attn, strict=True)


def test_step_zero_loss_matches_pose_token_baseline(scenes):
    cfg = TrainConfig(batch_size=3)
    sampler = BatchSampler(scenes, cfg)
    z0, src, cams, src_cams = sampler.sample(3)
    g = torch.Generator().manual_seed(0)
    eps = torch.randn(z0.shape, generator=g)
    t = torch.tensor([3, 20, 45])
    batch = MultiViewBatch(z0 + eps, src, cams, src_cams, t)
    losses = {}
    for mode in ("pose_token", "rcn", "concat_input", "concat_multiscale"):
        net = NetworkConfig(**{**TINY.__dict__, "conditioning_mode": mode})
        losses[mode] = float(diffusion_loss(init_parameters(net, 0), batch, eps).detach())
    for mode in ("rcn", "concat_input", "concat_multiscale"):
        assert abs(losses[mode] - losses["pose_token"]) < 1e-6


def test_loss_gradient_finite_differences(scenes):
    model = init_parameters(NetworkConfig(**{**TINY.__dict__, "attention": True}), 0).double()
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.2 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    sampler = BatchSampler(scenes, TrainConfig(stage="attention"))
    z0, src, cams, src_cams = sampler.sample(1)
    eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
    batch = MultiViewBatch(z0.double() + eps, src.double(), cams, src_cams, torch.tensor([7]))
    params = [p for n, p in model.named_parameters() if n in ("down.0.conv1.weight", "down.0.mod_head.fc2.weight", "down_attn.1.q.weight")]
    loss = diffusion_loss(model, batch, eps)
    grads = torch.autograd.grad(loss, params)
    an, fd = [], []
    h = 1e-6
    with torch.no_grad():
        for _ in range(4):
            dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
            an.append(sum(float((gr * d).sum()) for gr, d in zip(grads, dirs)))
            for p, d in zip(params, dirs):
                p.add_(h * d)
            plus = float(diffusion_loss(model, batch, eps))
            for p, d in zip(params, dirs):
                p.sub_(2 * h * d)
            minus = float(diffusion_loss(model, batch, eps))
            for p, d in zip(params, dirs):
                p.add_(h * d)
            fd.append((plus - minus) / (2 * h))
    an, fd = np.array(an), np.array(fd)
    assert np.linalg.norm(an - fd) / np.linalg.norm(an) < 1e-3


def test_divergence_aborts_with_snapshot(tmp_path, scenes):
    model = init_parameters(TINY, 0)
    with torch.no_grad():
        model.out_conv.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError, match="step 1"):
        train(scenes, TrainConfig(steps=3, batch_size=2), TINY, tmp_path / "nan", model=model)
    assert (tmp_path / "nan" / "diverged.ckpt").exists()


def test_reconstruction_psnr_runs(scenes):
    model = init_parameters(TINY, 0).eval()
    sched = TrainConfig().schedule()
    t = eval_timestep(sched)
    assert sched.alpha_bar[t] <= 0.5 < sched.alpha_bar[t - 1]
    val = reconstruction_psnr(model, scenes[0], 0, 1, sched)
    assert 0 < val < 99
