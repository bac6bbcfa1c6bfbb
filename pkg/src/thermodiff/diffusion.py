"""Forward corruption kernels, training losses, and reverse samplers for
both diffusion formulations, plus the final reconstruction step.

All diffusion runs in standardized residual space; unstandardization
happens only in :func:`reconstruct`. Timesteps are 1-indexed and t = 0
denotes the clean state.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .schedules import ShiftSchedule, VPSchedule, ddim_subsequence


def _check_t(t: int, T: int):
    if not (1 <= t <= T):
        raise ValueError(f"timestep {t} out of range [1, {T}]")


def vp_forward(R: torch.Tensor, t, eps: torch.Tensor, sched: VPSchedule) -> torch.Tensor:
    """R_t = sqrt(alpha_bar_t) * R + sqrt(1 - alpha_bar_t) * eps.

    ``t`` may be a scalar or a per-sample integer tensor (batch dim 0).
    """
    ab = _gather_per_sample(t, sched.alpha_bar_at, R)
    return torch.sqrt(ab) * R + torch.sqrt(1.0 - ab) * eps


def shift_forward(R: torch.Tensor, t, eps: torch.Tensor, sched: ShiftSchedule) -> torch.Tensor:
    """R_t = (1 - eta_t) * R + kappa * sqrt(eta_t) * eps.

    The state interpolates between the clean residual (eta -> 0) and
    scaled Gaussian noise (eta -> 1).
    """
    eta = _gather_per_sample(t, sched.eta_at, R)
    return (1.0 - eta) * R + sched.kappa * torch.sqrt(eta) * eps


def _gather_per_sample(t, lookup, like: torch.Tensor) -> torch.Tensor:
    T = None
    if np.isscalar(t) or (torch.is_tensor(t) and t.ndim == 0):
        ti = int(t)
        val = lookup(ti) if ti == 0 else lookup(_checked(ti, lookup))
        return torch.as_tensor(val, dtype=like.dtype)
    vals = [lookup(_checked(int(ti), lookup)) if int(ti) != 0 else lookup(0) for ti in t]
    shape = (len(vals),) + (1,) * (like.ndim - 1)
    return torch.as_tensor(vals, dtype=like.dtype).reshape(shape)


def _checked(t: int, lookup) -> int:
    # lookup is a bound method of the schedule; recover T for range check
    T = lookup.__self__.T
    _check_t(t, T)
    return t


def loss_eps(batch: dict, denoiser, sched: VPSchedule, generator: torch.Generator) -> torch.Tensor:
    """L1 between true and predicted noise; t uniform per sample."""
    if denoiser.config.head_mode != "epsilon":
        raise ValueError(f"loss_eps requires head_mode='epsilon', got {denoiser.config.head_mode!r}")
    R, t, eps = _draw(batch, sched.T, generator)
    R_t = vp_forward(R, t, eps, sched)
    pred = denoiser(R_t, batch["X_cond"], t, Z=batch.get("Z"), S=batch.get("S"))
    return torch.mean(torch.abs(eps - pred))


def loss_x0(batch: dict, denoiser, sched: ShiftSchedule, generator: torch.Generator) -> torch.Tensor:
    """MSE against the clean standardized residual; t uniform per sample."""
    if denoiser.config.head_mode != "x0":
        raise ValueError(f"loss_x0 requires head_mode='x0', got {denoiser.config.head_mode!r}")
    R, t, eps = _draw(batch, sched.T, generator)
    R_t = shift_forward(R, t, eps, sched)
    pred = denoiser(R_t, batch["X_cond"], t, Z=batch.get("Z"), S=batch.get("S"))
    return torch.mean((R - pred) ** 2)


def _draw(batch, T, generator):
    R = batch["R"]
    t = torch.randint(1, T + 1, (R.shape[0],), generator=generator)
    eps = torch.randn(R.shape, generator=generator, dtype=R.dtype)
    return R, t, eps


def _call(denoiser, R_t, X_cond, t, Z, S):
    with torch.no_grad():
        return denoiser(R_t, X_cond, t, Z=Z, S=S)


def sample_ddpm(denoiser, X_cond, Z=None, S=None, sched: VPSchedule = None, seed: int = 0) -> torch.Tensor:
    """Ancestral sampling over all T steps with posterior variance
    beta_tilde; epsilon head required."""
    _require_head(denoiser, "epsilon")
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(_field_shape(X_cond), generator=gen)
    for t in range(sched.T, 0, -1):
        eps_hat = _call(denoiser, x, X_cond, t, Z, S)
        beta = float(sched.beta[t - 1])
        ab_t = sched.alpha_bar_at(t)
        ab_prev = sched.alpha_bar_at(t - 1)
        mean = (x - beta / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(1.0 - beta)
        if t > 1:
            beta_tilde = (1.0 - ab_prev) / (1.0 - ab_t) * beta
            x = mean + math.sqrt(beta_tilde) * torch.randn(x.shape, generator=gen)
        else:
            x = mean
    return x


def sample_ddim(denoiser, X_cond, Z=None, S=None, sched: VPSchedule = None,
                steps: int = 50, seed: int = 0) -> torch.Tensor:
    """Deterministic DDIM over an evenly spaced timestep subsequence."""
    _require_head(denoiser, "epsilon")
    ts = ddim_subsequence(sched.T, steps)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(_field_shape(X_cond), generator=gen)
    prev = np.concatenate([[0], ts[:-1]])
    for t, t_prev in zip(ts[::-1], prev[::-1]):
        eps_hat = _call(denoiser, x, X_cond, int(t), Z, S)
        ab_t = sched.alpha_bar_at(int(t))
        ab_prev = sched.alpha_bar_at(int(t_prev))
        x0_hat = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat
    return x


def sample_shift(denoiser, X_cond, Z=None, S=None, sched: ShiftSchedule = None,
                 steps: int = None, seed: int = 0) -> torch.Tensor:
    """Reverse shift sampling from R_T = kappa * sqrt(eta_T) * eps, with
    the model's clean-residual prediction substituted at each transition.
    ``steps = 1`` performs exactly one denoiser evaluation."""
    _require_head(denoiser, "x0")
    steps = sched.T if steps is None else steps
    ts = ddim_subsequence(sched.T, steps)
    gen = torch.Generator().manual_seed(seed)
    kappa = sched.kappa
    x = kappa * math.sqrt(sched.eta_at(sched.T)) * torch.randn(_field_shape(X_cond), generator=gen)
    prev = np.concatenate([[0], ts[:-1]])
    for t, t_prev in zip(ts[::-1], prev[::-1]):
        x0_hat = _call(denoiser, x, X_cond, int(t), Z, S)
        eta_t = sched.eta_at(int(t))
        eta_prev = sched.eta_at(int(t_prev))
        alpha = eta_t - eta_prev
        mean = (eta_prev / eta_t) * x + (alpha / eta_t) * x0_hat
        if t_prev > 0:
            std = kappa * math.sqrt(eta_prev * alpha / eta_t)
            x = mean + std * torch.randn(x.shape, generator=gen)
        else:
            x = mean
    return x


def reconstruct(X_tilde: np.ndarray, R_hat_standardized: np.ndarray, normalizer) -> np.ndarray:
    """Y_hat = X_tilde + unstandardize(R_hat'). The bicubic baseline is
    this call with an all-zero residual prediction."""
    R_hat = normalizer.unstandardize(np.asarray(R_hat_standardized))
    return np.asarray(X_tilde) + R_hat


def _require_head(denoiser, mode: str):
    if denoiser.config.head_mode != mode:
        raise ValueError(f"sampler requires head_mode={mode!r}, got {denoiser.config.head_mode!r}")


def _field_shape(X_cond: torch.Tensor) -> tuple:
    return (X_cond.shape[0], 1, X_cond.shape[-2], X_cond.shape[-1])
