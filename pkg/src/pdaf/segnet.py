"""Tiny encoder/decoder segmentation network and the mIoU metric.

Encoder: three stages, each a 3x3 conv + relu followed by a stride-2 3x3 conv +
relu, giving features at 1/8 resolution. Decoder: three (3x3 conv + relu +
nearest x2 upsample) stages and a zero-initialised 1x1 classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .layers import Params, conv, conv_params
from .tensor import RngStream, Tensor, relu, upsample2

ENC_WIDTHS = (16, 32)
DEC_WIDTHS = (32, 16, 16)


def init_segnet(rng: RngStream, num_classes: int = 5, feature_channels: int = 32) -> Params:
    p: Params = {}
    c_in = 3
    for i, c_out in enumerate((*ENC_WIDTHS, feature_channels), start=1):
        conv_params(p, f"enc{i}a", rng, c_in, c_out, 3)
        conv_params(p, f"enc{i}b", rng, c_out, c_out, 3)
        c_in = c_out
    for i, c_out in enumerate(DEC_WIDTHS, start=1):
        conv_params(p, f"dec{i}", rng, c_in, c_out, 3)
        c_in = c_out
    conv_params(p, "head", None, c_in, num_classes, 1, zero=True)
    return p


def feature_channels(params: Params) -> int:
    return params["enc3b.w"].shape[0]


def num_classes(params: Params) -> int:
    return params["head.w"].shape[0]


def encode(params: Params, images: Tensor | np.ndarray) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"encode expects B x 3 x H x W, got {x.shape}")
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise ShapeError(f"image size {x.shape[2]}x{x.shape[3]} is not divisible by 8")
    for i in (1, 2, 3):
        x = relu(conv(params, f"enc{i}a", x))
        x = relu(conv(params, f"enc{i}b", x, stride=2))
    return x


def decode(params: Params, features: Tensor) -> Tensor:
    if features.data.ndim != 4 or features.shape[1] != params["dec1.w"].shape[1]:
        raise ShapeError(f"decode expects {params['dec1.w'].shape[1]} feature channels, "
                         f"got {features.shape}")
    x = features
    for i in (1, 2, 3):
        x = upsample2(relu(conv(params, f"dec{i}", x)))
    return conv(params, "head", x)


def predict(params: Params, images: np.ndarray) -> np.ndarray:
    return decode(params, encode(params, images)).data.argmax(axis=1)


@dataclass
class MiouResult:
    per_class: list[float]  # NaN where the class is absent from both prediction and ground truth
    miou: float
    confusion: np.ndarray


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, K: int) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.size and (pred.max() >= K or gt.max() >= K or pred.min() < 0 or gt.min() < 0):
        raise ContractError(f"label values must lie in 0..{K - 1}")
    return np.bincount(gt * K + pred, minlength=K * K).reshape(K, K)


def miou_from_confusion(conf: np.ndarray) -> MiouResult:
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)
    present = union > 0
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return MiouResult(per_class=[float(v) for v in iou], miou=mean, confusion=conf)


def miou(pred_labels, gt_labels, K: int) -> MiouResult:
    """Dataset-level mIoU: confusion counts are summed over all maps before dividing."""
    if isinstance(pred_labels, np.ndarray) and pred_labels.ndim == 2:
        pred_labels, gt_labels = [pred_labels], [gt_labels]
    if len(pred_labels) != len(gt_labels):
        raise ContractError(f"{len(pred_labels)} predictions vs {len(gt_labels)} ground truths")
    conf = np.zeros((K, K), dtype=np.int64)
    for p, g in zip(pred_labels, gt_labels):
        if np.shape(p) != np.shape(g):
            raise ContractError(f"prediction shape {np.shape(p)} != ground-truth shape {np.shape(g)}")
        conf += confusion_matrix(p, g, K)
    return miou_from_confusion(conf)
