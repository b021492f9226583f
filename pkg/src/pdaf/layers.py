"""Parameter initialisation and small building blocks shared by the networks."""

from __future__ import annotations

import numpy as np

from .tensor import RngStream, Tensor, add, conv2d, relu

Params = dict[str, Tensor]


def conv_params(params: Params, name: str, rng: RngStream | None, c_in: int, c_out: int, k: int,
                zero: bool = False) -> None:
    """Add ``name.w`` (Kaiming fan-in normal, or zeros) and a zero ``name.b``."""
    if zero or rng is None:
        w = np.zeros((c_out, c_in, k, k))
    else:
        w = rng.normal((c_out, c_in, k, k)) * np.sqrt(2.0 / (c_in * k * k))
    params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
    params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.b")


def conv(params: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = params[f"{name}.w"]
    return conv2d(x, w, params[f"{name}.b"], stride=stride, pad=w.shape[-1] // 2)


def resblock_params(params: Params, name: str, rng: RngStream, width: int) -> None:
    conv_params(params, f"{name}.c1", rng, width, width, 3)
    conv_params(params, f"{name}.c2", rng, width, width, 3)


def resblock(params: Params, name: str, x: Tensor) -> Tensor:
    return add(x, conv(params, f"{name}.c2", relu(conv(params, f"{name}.c1", x))))


def clone(params: Params, requires_grad: bool) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad, name=k) for k, v in params.items()}
