"""Training losses: weighted cross-entropy, semantic consistency, prior constraint, total."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, ShapeError, TrainingAborted
from .tensor import (Tensor, channel_softmax, log, mean_all, mul, scalar_affine, square, sub,
                     sum_all)

PAPER_LAMBDAS = (0.5, 0.5, 1.0)


def task_loss(logits: Tensor, labels: np.ndarray, class_weights) -> Tensor:
    """Class-weighted pixel cross-entropy, normalised by the total weight."""
    B, K, H, W = logits.shape
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (K,):
        raise ContractError(f"class_weights has length {weights.size}, expected K={K}")
    labels = np.asarray(labels)
    if labels.shape != (B, H, W):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise ContractError(f"labels must lie in 0..{K - 1}")
    pixel_w = weights[labels]
    target = np.zeros((B, K, H, W))
    np.put_along_axis(target, labels[:, None].astype(np.int64), pixel_w[:, None], axis=1)
    logp = log(channel_softmax(logits))
    return scalar_affine(sum_all(mul(Tensor(target), logp)), -1.0 / pixel_w.sum())


def _mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    return mean_all(square(sub(a, b)))


def sc_loss(frozen_pred: Tensor, y_tilde: Tensor, y_hat: Tensor) -> Tensor:
    """Mean-squared logit gap from the frozen source prediction to both branches."""
    ref = frozen_pred.detach()
    return _mse(ref, y_tilde) + _mse(ref, y_hat)


def prior_loss(z0_hat: Tensor, z_tilde: Tensor) -> Tensor:
    """Mean-squared gap from the diffusion estimate to the (detached) posterior sample."""
    return _mse(z0_hat, z_tilde.detach())


@dataclass
class LossReport:
    task: float
    sc: float
    prior: float
    kl_diag: float
    total: float
    lambda_task: float
    lambda_sc: float
    lambda_prior: float

    def as_dict(self) -> dict:
        return asdict(self)


def total_loss(task: Tensor, sc: Tensor, prior: Tensor, lambdas=PAPER_LAMBDAS,
               kl: Tensor | None = None, kl_weight: float = 0.0) -> tuple[Tensor, LossReport]:
    """Weighted sum of the three terms; ``kl`` is reported, and only added if ``kl_weight`` > 0."""
    lt, ls, lp = (float(v) for v in lambdas)
    parts = {"task": task, "sc": sc, "prior": prior}
    if kl is not None:
        parts["kl"] = kl
    bad = {k: v.item() for k, v in parts.items() if not math.isfinite(v.item())}
    if bad:
        raise TrainingAborted(f"non-finite loss component(s): {bad}")
    total = scalar_affine(task, lt) + scalar_affine(sc, ls) + scalar_affine(prior, lp)
    if kl is not None and kl_weight > 0:
        total = total + scalar_affine(kl, kl_weight)
    report = LossReport(
        task=task.item(), sc=sc.item(), prior=prior.item(),
        kl_diag=kl.item() if kl is not None else 0.0, total=total.item(),
        lambda_task=lt, lambda_sc=ls, lambda_prior=lp,
    )
    return total, report
