"""Domain compensation: latent -> per-position scale/shift -> modulated features."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError
from .layers import Params, conv, conv_params
from .tensor import Tensor, add, mul, scalar_affine


@dataclass
class AffineParams:
    gamma: Tensor
    beta: Tensor


def init_projection(ldp_channels: int = 4, feature_channels: int = 32) -> Params:
    p: Params = {}
    conv_params(p, "gamma", None, ldp_channels, feature_channels, 1, zero=True)
    conv_params(p, "beta", None, ldp_channels, feature_channels, 1, zero=True)
    return p


def project_affine(params: Params, z: Tensor) -> AffineParams:
    c_ldp = params["gamma.w"].shape[1]
    if z.data.ndim != 4 or z.shape[1] != c_ldp:
        raise ContractError(f"latent must have {c_ldp} channels, got shape {z.shape}")
    gamma = scalar_affine(conv(params, "gamma", z), 1.0, 1.0)
    return AffineParams(gamma=gamma, beta=conv(params, "beta", z))


def modulate(h: Tensor, affine: AffineParams) -> Tensor:
    if affine.gamma.shape != h.shape or affine.beta.shape != h.shape:
        raise ContractError(f"affine shapes {affine.gamma.shape}/{affine.beta.shape} "
                            f"do not match features {h.shape}")
    return add(mul(affine.gamma, h), affine.beta)
