"""Diffusion prior estimator: noise schedule, forward noising and the conditional denoiser.

The reverse chain is deterministic. At each step the denoiser predicts the
noise and the latent is updated as

    z_{t-1} = (z_t - eps_hat * (1 - alpha_t) / sqrt(1 - alpha_bar_t)) / sqrt(alpha_t)

for t = T..1, all steps executed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError
from .layers import Params, conv, conv_params, resblock, resblock_params
from .tensor import RngStream, Tensor, concat_channels, relu, scalar_affine, sub


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t - 1])


def build_schedule(T: int = 4, beta_start: float = 0.1, beta_end: float = 0.99) -> NoiseSchedule:
    """Linear betas from ``beta_start`` to ``beta_end`` over T steps (T=1 gives [beta_end])."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = np.array([beta_end], dtype=np.float64)
    else:
        betas = beta_start + np.arange(T) * (beta_end - beta_start) / (T - 1)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def forward_diffuse(z: Tensor, sched: NoiseSchedule, rng: RngStream | None = None, eps=None) -> Tensor:
    """Sample z_T ~ N(sqrt(abar_T) z, (1 - abar_T) I) in one shot."""
    if eps is None:
        if rng is None:
            raise ContractError("forward_diffuse needs an rng or an explicit eps")
        eps = rng.normal(z.shape)
    abar = sched.alpha_bar(sched.T)
    noise = np.broadcast_to(np.asarray(eps, dtype=np.float64), z.shape)
    return scalar_affine(z, np.sqrt(abar), 0.0) + Tensor(np.sqrt(1.0 - abar) * noise)


def timestep_embedding(t: int, dim: int = 8) -> np.ndarray:
    """Sinusoidal embedding, interleaved as (sin f_0 t, cos f_0 t, sin f_1 t, ...)."""
    if dim < 2 or dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    freqs = 1.0 / 10000.0 ** (2.0 * np.arange(dim // 2) / dim)
    out = np.empty(dim)
    out[0::2] = np.sin(t * freqs)
    out[1::2] = np.cos(t * freqs)
    return out


def init_dpe(rng: RngStream, feature_channels: int = 32, ldp_channels: int = 4, width: int = 32,
             time_dim: int = 8) -> Params:
    p: Params = {}
    conv_params(p, "cond", rng, feature_channels, ldp_channels, 1)
    conv_params(p, "inp", rng, 2 * ldp_channels + time_dim, width, 3)
    resblock_params(p, "res1", rng, width)
    resblock_params(p, "res2", rng, width)
    conv_params(p, "out", None, width, ldp_channels, 1, zero=True)
    return p


def denoiser_forward(params: Params, z_t: Tensor, t: int, h_cond: Tensor) -> Tensor:
    """Predict the noise in ``z_t`` at step ``t`` given conditioning features."""
    c_ldp = params["out.w"].shape[0]
    if z_t.data.ndim != 4 or z_t.shape[1] != c_ldp:
        raise ContractError(f"latent must have {c_ldp} channels, got {z_t.shape}")
    if h_cond.data.ndim != 4 or h_cond.shape[0] != z_t.shape[0] or h_cond.shape[2:] != z_t.shape[2:]:
        raise ContractError(f"conditioning shape {h_cond.shape} incompatible with latent {z_t.shape}")
    time_dim = params["inp.w"].shape[1] - 2 * c_ldp
    B, _, h, w = z_t.shape
    emb = np.broadcast_to(timestep_embedding(t, time_dim)[None, :, None, None], (B, time_dim, h, w))
    x = concat_channels([z_t, conv(params, "cond", h_cond), Tensor(emb.copy())])
    x = relu(conv(params, "inp", x))
    x = resblock(params, "res1", x)
    x = relu(resblock(params, "res2", x))
    return conv(params, "out", x)


EpsFn = Callable[[Tensor, int], Tensor]


def estimate_ldp(params: Params, z_start: Tensor, sched: NoiseSchedule, h_cond: Tensor,
                 eps_fn: EpsFn | None = None) -> Tensor:
    """Run the full T-step deterministic reverse chain from ``z_start``.

    ``eps_fn(z_t, t)`` replaces the learned denoiser (test hook).
    """
    z = z_start
    for t in range(sched.T, 0, -1):
        eps_hat = eps_fn(z, t) if eps_fn is not None else denoiser_forward(params, z, t, h_cond)
        a, abar = sched.alpha(t), sched.alpha_bar(t)
        coef = (1.0 - a) / np.sqrt(1.0 - abar)
        z = scalar_affine(sub(z, scalar_affine(eps_hat, coef)), 1.0 / np.sqrt(a))
    return z
