"""Dense float64 tensors with reverse-mode autodiff, a seeded RNG stream and Adam.

The graph is dynamic: every differentiable op records its tracked parents and a
closure mapping the output gradient to parent gradients. ``Tensor.backward``
walks the graph once in reverse topological order and then releases it.

Binary ops require identical shapes (no broadcasting).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

EPS_CLAMP = 1e-12
DTYPE = np.float64

_MASK64 = (1 << 64) - 1


class RngStream:
    """Counter-based random stream.

    Every draw builds a fresh PCG64 generator keyed on ``(seed, counter)`` and
    then bumps the counter, so a stream's output depends only on its seed and
    how many draws came before.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def _next(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.PCG64([self.seed, self.counter]))
        self.counter += 1
        return gen

    def normal(self, shape: Sequence[int] | int) -> np.ndarray:
        return self._next().standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._next().uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._next().integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def child(self, key: int) -> "RngStream":
        """Independent stream derived from this stream's seed and ``key``."""
        state = np.random.SeedSequence([self.seed, int(key) & _MASK64]).generate_state(2, np.uint32)
        return RngStream((int(state[0]) << 32) | int(state[1]))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.name = name

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise ContractError("backward called twice on the same graph; rebuild the forward pass")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any grad-tracked tensor")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None
                node._consumed = True
        self._consumed = True

    # operator sugar
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scalar_affine(self, -1.0, 0.0)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a 1-element tensor, got shape {t.shape}")


def _node(data: np.ndarray, parents: Iterable[Tensor], backward: Callable) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------- creation


def tensor_create(shape: Sequence[int], init="zeros", *, rng: RngStream | None = None,
                  value: float = 0.0, data=None, requires_grad: bool = False) -> Tensor:
    """Build a tensor from a fill spec: ``zeros``, ``constant``, ``gaussian`` or ``data``."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    if init == "zeros":
        arr = np.zeros(shape)
    elif init == "constant":
        arr = np.full(shape, float(value))
    elif init == "gaussian":
        if rng is None:
            raise ContractError("gaussian fill needs an RngStream")
        arr = rng.normal(shape)
    elif init == "data":
        flat = np.asarray(data, dtype=DTYPE).reshape(-1)
        if flat.size != int(np.prod(shape)):
            raise ShapeError(f"data length {flat.size} does not match shape {shape}")
        arr = flat.reshape(shape).copy()
    else:
        raise ContractError(f"unknown init {init!r}")
    return Tensor(arr, requires_grad=requires_grad)


# --------------------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    """a / max(b, 1e-12); no gradient reaches b where the clamp is active."""
    _same_shape(a, b, "div")
    den = np.maximum(b.data, EPS_CLAMP)
    live = b.data > EPS_CLAMP
    q = a.data / den

    def back(g):
        return g / den, np.where(live, -g * q / den, 0.0)

    return _node(q, (a, b), back)


def scalar_affine(x: Tensor, a: float, b: float = 0.0) -> Tensor:
    a = float(a)
    return _node(a * x.data + b, (x,), lambda g: (a * g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return _node(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    """Natural log with the argument clamped below at 1e-12."""
    xc = np.maximum(x.data, EPS_CLAMP)
    live = x.data > EPS_CLAMP
    return _node(np.log(xc), (x,), lambda g: (np.where(live, g / xc, 0.0),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.logaddexp(0.0, xd), (x,), lambda g: (g * _sigmoid(xd),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    live = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * live,))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts:
        if p.data.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {ref} and {p.shape}")
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]
    return _node(np.concatenate([p.data for p in parts], axis=1), parts,
                 lambda g: tuple(np.split(g, splits, axis=1)))


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of a B x C x H x W tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2 expects rank 4, got {x.shape}")
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _node(out, (x,), lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _node(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax over axis 1 (channels)."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (x,), back)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * g * xd,))


# --------------------------------------------------------------------------- convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, ``x`` B x C x H x W, ``w`` O x C x k x k."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd extent, got {k}x{k2}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({O},)")
    span_h, span_w = H + 2 * pad - k, W + 2 * pad - k
    # floor semantics: a trailing row/column the stride cannot reach is dropped
    if span_h < 0 or span_w < 0 or stride < 1:
        raise ShapeError(f"conv2d: empty output extent for H={H}, W={W}, k={k}, "
                         f"stride={stride}, pad={pad}")
    Ho, Wo = span_h // stride + 1, span_w // stride + 1

    if pad:
        xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
        xp[:, :, pad:pad + H, pad:pad + W] = x.data
    else:
        xp = x.data
    if k == 1:
        cols = xp[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, C * k * k)
    w2 = w.data.reshape(O, -1)
    out = cols @ w2.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(B, Ho, Wo, C, k, k)
            dxp = np.zeros(xp.shape)
            hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, back)


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    A missing gradient counts as zero. Moments are created lazily at zero.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ContractError(f"adam: grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ContractError(f"adam: state shape {m.shape} != param shape {p.shape} for {name}")
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr != 0.0:
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    """Adam over a fixed, named parameter set."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 state: AdamState | None = None):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state = state if state is not None else AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps)
