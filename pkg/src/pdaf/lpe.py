"""Latent prior extractor: Gaussian posterior over the domain latent from a feature pair."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .layers import Params, conv, conv_params, resblock, resblock_params
from .tensor import (RngStream, Tensor, add, clamp, concat_channels, exp, mean_all, mul, relu,
                     scalar_affine, square, sub)

LOGVAR_RANGE = (-10.0, 10.0)


@dataclass
class GaussianPosterior:
    mu: Tensor
    logvar: Tensor

    @property
    def sigma(self) -> Tensor:
        return exp(scalar_affine(self.logvar, 0.5))


def init_lpe(rng: RngStream, feature_channels: int = 32, ldp_channels: int = 4,
             zero_heads: bool = True) -> Params:
    """Heads start at zero so a fresh extractor emits the standard normal."""
    c = feature_channels
    p: Params = {}
    conv_params(p, "fuse", rng, 2 * c, c, 3)
    resblock_params(p, "res1", rng, c)
    resblock_params(p, "res2", rng, c)
    conv_params(p, "mu", rng, c, ldp_channels, 1, zero=zero_heads)
    conv_params(p, "logvar", rng, c, ldp_channels, 1, zero=zero_heads)
    return p


def extract_posterior(params: Params, h_source: Tensor, h_target: Tensor) -> GaussianPosterior:
    """Concatenate (source, pseudo-target) features and map them to (mu, logvar)."""
    if h_source.shape != h_target.shape:
        raise ContractError(f"feature shapes differ: {h_source.shape} vs {h_target.shape}")
    x = relu(conv(params, "fuse", concat_channels([h_source, h_target])))
    x = resblock(params, "res1", x)
    x = resblock(params, "res2", x)
    mu = conv(params, "mu", x)
    logvar = clamp(conv(params, "logvar", x), *LOGVAR_RANGE)
    return GaussianPosterior(mu, logvar)


def reparameterize(post: GaussianPosterior, rng: RngStream | None = None, eps=None) -> Tensor:
    """z = mu + eps * sigma. ``eps`` overrides the sampled noise (scalar or array)."""
    if eps is None:
        if rng is None:
            raise ContractError("reparameterize needs an rng or an explicit eps")
        eps = rng.normal(post.mu.shape)
    noise = Tensor(np.broadcast_to(np.asarray(eps, dtype=np.float64), post.mu.shape).copy())
    return add(post.mu, mul(noise, post.sigma))


def kl_standard_normal(post: GaussianPosterior) -> Tensor:
    """Mean over elements of KL(N(mu, sigma^2) || N(0, 1))."""
    per = sub(add(square(post.mu), exp(post.logvar)), post.logvar)
    return scalar_affine(mean_all(per), 0.5, -0.5)
