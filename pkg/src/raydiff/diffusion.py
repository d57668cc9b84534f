"""DDPM noise schedule, forward noising, the backward step and training targets.

Timesteps are 1-based (``t = 1..T``). Schedule arrays carry an extra entry at
index 0 (``alpha_bar[0] == 1``) so ``alpha_bar[t - 1]`` is always defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_T = 50
DEFAULT_BETA_1 = 1e-3
DEFAULT_BETA_T = 0.3


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    beta_1: float
    beta_T: float
    mode: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    sigmas: np.ndarray

    def describe(self) -> dict:
        return {"T": self.T, "beta_1": self.beta_1, "beta_T": self.beta_T, "sigma_mode": self.mode}

    def with_mode(self, mode: str) -> "DiffusionSchedule":
        return make_schedule(self.T, self.beta_1, self.beta_T, mode)


def make_schedule(
    T: int = DEFAULT_T,
    beta_1: float = DEFAULT_BETA_1,
    beta_T: float = DEFAULT_BETA_T,
    mode: str = "stochastic",
) -> DiffusionSchedule:
    """Linear beta schedule; ``mode="deterministic"`` zeroes every sigma_t."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_1 <= beta_T < 1.0:
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    if mode not in ("stochastic", "deterministic"):
        raise ValueError(f"mode must be 'stochastic' or 'deterministic', got {mode!r}")
    betas = np.concatenate([[0.0], np.linspace(beta_1, beta_T, T)])
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    sigmas = np.zeros(T + 1)
    if mode == "stochastic":
        # DDPM posterior variance; sigma_1 == 0 because alpha_bar[0] == 1
        sigmas[1:] = np.sqrt(betas[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    for arr in (betas, alphas, alpha_bar, sigmas):
        arr.setflags(write=False)
    return DiffusionSchedule(T, float(beta_1), float(beta_T), mode, betas, alphas, alpha_bar, sigmas)


def _check_t(t, sched: DiffusionSchedule) -> None:
    tt = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if np.any(tt < 1) or np.any(tt > sched.T):
        raise ValueError(f"timestep outside 1..{sched.T}: {t}")


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor | float:
    """Per-sample schedule coefficient broadcast against ``like`` (batch on dim 0)."""
    if isinstance(t, (int, np.integer)):
        return float(values[int(t)])
    idx = t.cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    out = torch.as_tensor(values[idx], dtype=like.dtype, device=like.device)
    return out.reshape(out.shape + (1,) * (like.dim() - out.dim()))


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """``z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps``.

    ``t`` is an int or a per-sample vector matching ``z0.shape[0]``.
    """
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match latent {tuple(z0.shape)}")
    _check_t(t, sched)
    ab = sched.alpha_bar
    return _coef(np.sqrt(ab), t, z0) * z0 + _coef(np.sqrt(1.0 - ab), t, z0) * eps


def backward_step(
    z_t: torch.Tensor,
    t,
    eps_hat: torch.Tensor,
    eps_new: torch.Tensor | None,
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """One ancestral step ``z_t -> z_{t-1}`` from a noise prediction."""
    if eps_hat.shape != z_t.shape:
        raise ValueError(f"prediction shape {tuple(eps_hat.shape)} does not match latent {tuple(z_t.shape)}")
    _check_t(t, sched)
    a, ab = sched.alphas, sched.alpha_bar
    scale = _coef((1.0 - a) / np.sqrt(np.maximum(1.0 - ab, 1e-300)), t, z_t)
    mean = (z_t - scale * eps_hat) / _coef(np.sqrt(a), t, z_t)
    sig = sched.sigmas[np.asarray(t.cpu() if torch.is_tensor(t) else t)]
    if np.all(sig == 0):
        return mean
    if eps_new is None:
        raise ValueError("stochastic step needs eps_new")
    if eps_new.shape != z_t.shape:
        raise ValueError(f"noise shape {tuple(eps_new.shape)} does not match latent {tuple(z_t.shape)}")
    return mean + _coef(sched.sigmas, t, z_t) * eps_new


def predict_x0(z_t: torch.Tensor, t, eps_hat: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    ab = sched.alpha_bar
    return (z_t - _coef(np.sqrt(1.0 - ab), t, z_t) * eps_hat) / _coef(np.sqrt(ab), t, z_t)


def training_pair(
    z0: torch.Tensor,
    sched: DiffusionSchedule,
    generator: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Draw ``t ~ U{1..T}`` per batch element and fresh noise.

    ``z0`` is (B, ...); for multi-view latents (B, V, C, H, W) every view of an
    element shares its ``t``.
    """
    t = torch.randint(1, sched.T + 1, (z0.shape[0],), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    return forward_noise(z0, t, eps, sched), t, eps
