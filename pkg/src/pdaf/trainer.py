"""Baseline pretraining, PDAF fine-tuning, evaluation and bundle checkpointing."""

from __future__ import annotations

import csv
import hashlib
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .config import Config
from .data import DatasetSplits, Scene, class_pixel_weights, photometric_augment
from .dcm import init_projection, modulate, project_affine
from .dpe import NoiseSchedule, build_schedule, estimate_ldp, forward_diffuse, init_dpe
from .errors import CheckpointError, ConfigError, TrainingAborted
from .layers import Params, clone
from .losses import LossReport, prior_loss, sc_loss, task_loss, total_loss
from .lpe import extract_posterior, init_lpe, kl_standard_normal, reparameterize
from .segnet import MiouResult, decode, encode, init_segnet, miou
from .tensor import Adam, AdamState, RngStream, Tensor, scalar_affine

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "loss_task", "loss_sc", "loss_prior", "kl_diag", "loss_total",
               "miou_val_source", "miou_shifted_test", "wall_seconds")
PRETRAIN_COLUMNS = ("epoch", "loss_task", "miou_val_source", "wall_seconds")
TRAINABLE_GROUPS = ("theta", "lpe", "dpe", "proj")


def batches(n: int, size: int, order: Sequence[int] | None = None):
    idx = list(range(n)) if order is None else list(order)
    for i in range(0, n, size):
        yield idx[i:i + size]


def stack(scenes: Sequence[Scene]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in scenes]), np.stack([s.labels for s in scenes]).astype(np.int64))


# --------------------------------------------------------------------------- bundle


@dataclass
class ModelBundle:
    config: Config
    frozen: Params
    theta: Params
    lpe: Params
    dpe: Params
    proj: Params
    adam: AdamState = field(default_factory=AdamState)

    @classmethod
    def from_baseline(cls, config: Config, baseline: Params, rng: RngStream) -> "ModelBundle":
        """Frozen copy plus trainable copy of the baseline, fresh LPE/DPE/projection."""
        c, cl = config.feature_channels, config.ldp_channels
        return cls(
            config=config,
            frozen=clone(baseline, requires_grad=False),
            theta=clone(baseline, requires_grad=True),
            lpe=init_lpe(rng.child(1), c, cl),
            dpe=init_dpe(rng.child(2), c, cl, config.dpe_width, config.time_embed_dim),
            proj=init_projection(cl, c),
        )

    @property
    def schedule(self) -> NoiseSchedule:
        cfg = self.config
        return build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for group in TRAINABLE_GROUPS:
            for name, t in getattr(self, group).items():
                out[f"{group}.{name}"] = t
        return out

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {f"frozen.{k}": v.data for k, v in self.frozen.items()}
        out.update({k: v.data for k, v in self.trainable().items()})
        for name, m in self.adam.m.items():
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = self.adam.v[name]
        out["adam.t"] = np.array([float(self.adam.t)])
        return out

    @classmethod
    def from_tensors(cls, config: Config, tensors: dict[str, np.ndarray]) -> "ModelBundle":
        groups: dict[str, Params] = {g: {} for g in ("frozen", *TRAINABLE_GROUPS)}
        adam = AdamState()
        for key, arr in tensors.items():
            head, _, rest = key.partition(".")
            if head in groups:
                groups[head][rest] = Tensor(arr.copy(), requires_grad=head != "frozen", name=rest)
            elif key == "adam.t":
                adam.t = int(arr.reshape(-1)[0])
            elif key.startswith("adam.m."):
                adam.m[key[7:]] = arr.copy()
            elif key.startswith("adam.v."):
                adam.v[key[7:]] = arr.copy()
            else:
                raise CheckpointError(f"unexpected tensor {key!r} in PDAF checkpoint")
        return cls(config=config, adam=adam, **groups)

    def frozen_checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.frozen):
            h.update(k.encode())
            h.update(self.frozen[k].data.tobytes())
        return h.hexdigest()


def save_bundle(bundle: ModelBundle, path, extra: dict | None = None) -> bytes:
    meta = {"kind": "pdaf", "config": bundle.config.to_dict(), **(extra or {})}
    return checkpoint.save(path, meta, bundle.to_tensors())


def load_bundle(path) -> tuple[ModelBundle, dict]:
    meta, tensors = checkpoint.load(path)
    if meta.get("kind") != "pdaf":
        raise CheckpointError(f"{path}: expected a PDAF checkpoint, found kind {meta.get('kind')!r}")
    config = Config.from_dict(meta["config"])
    return ModelBundle.from_tensors(config, tensors), meta


def save_baseline(params: Params, config: Config, path, extra: dict | None = None) -> bytes:
    meta = {"kind": "baseline", "config": config.to_dict(), **(extra or {})}
    return checkpoint.save(path, meta, {f"segnet.{k}": v.data for k, v in params.items()})


def load_baseline(path) -> tuple[Params, dict]:
    meta, tensors = checkpoint.load(path)
    if meta.get("kind") != "baseline":
        raise CheckpointError(f"{path}: expected a baseline checkpoint, found kind {meta.get('kind')!r}")
    params = {}
    for key, arr in tensors.items():
        if not key.startswith("segnet."):
            raise CheckpointError(f"unexpected tensor {key!r} in baseline checkpoint")
        params[key[7:]] = Tensor(arr.copy(), requires_grad=True, name=key[7:])
    return params, meta


def load_any(path) -> tuple[ModelBundle | Params, dict]:
    meta, tensors = checkpoint.load(path)
    if meta.get("kind") == "pdaf":
        return ModelBundle.from_tensors(Config.from_dict(meta["config"]), tensors), meta
    return load_baseline(path)


# --------------------------------------------------------------------------- prediction


def predict_baseline(params: Params, images: np.ndarray) -> np.ndarray:
    return decode(params, encode(params, images)).data


def predict_pdaf(bundle: ModelBundle, images: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Logits from the inference path: noise -> reverse chain -> modulation -> decoder."""
    h = encode(bundle.theta, images)
    z0 = estimate_ldp(bundle.dpe, Tensor(noise), bundle.schedule, h)
    return decode(bundle.theta, modulate(h, project_affine(bundle.proj, z0))).data


def inference_noise(bundle: ModelBundle, rng: RngStream, index: int, H: int, W: int) -> np.ndarray:
    return rng.child(index).normal((bundle.config.ldp_channels, H // 8, W // 8))


def evaluate(model: ModelBundle | Params, scenes: Sequence[Scene], mode: str = "pdaf",
             rng: RngStream | None = None, batch_size: int = 8,
             predictor: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
             return_predictions: bool = False):
    """Dataset-level mIoU of ``model`` on ``scenes``.

    ``mode="baseline"`` decodes the plain backbone; ``mode="pdaf"`` draws one
    noise latent per image from ``rng.child(image index)``. ``predictor(images,
    indices)`` replaces the network entirely (metric sanity hook).
    """
    if mode not in ("baseline", "pdaf"):
        raise ConfigError(f"mode must be baseline or pdaf, got {mode!r}")
    is_bundle = isinstance(model, ModelBundle)
    if mode == "pdaf" and not is_bundle:
        raise ConfigError("pdaf mode needs a PDAF bundle, not bare backbone parameters")
    K = model.config.num_classes if is_bundle else model["head.w"].shape[0]
    rng = rng if rng is not None else RngStream(0)
    preds = []
    for idx in batches(len(scenes), batch_size):
        images, _ = stack([scenes[i] for i in idx])
        if predictor is not None:
            labels = predictor(images, np.asarray(idx))
        elif mode == "baseline":
            labels = predict_baseline(model.theta if is_bundle else model, images).argmax(axis=1)
        else:
            H, W = images.shape[2:]
            noise = np.stack([inference_noise(model, rng, i, H, W) for i in idx])
            labels = predict_pdaf(model, images, noise).argmax(axis=1)
        preds.extend(labels)
    result = miou(preds, [s.labels for s in scenes], K)
    return (result, preds) if return_predictions else result


# --------------------------------------------------------------------------- baseline


def pretrain_baseline(config: Config, splits: DatasetSplits, rng: RngStream,
                      on_epoch: Callable[[dict], None] | None = None) -> tuple[Params, list[dict]]:
    """Train the backbone from scratch on clean source scenes.

    Early-stops after ``pretrain_patience`` epochs without a val mIoU gain and
    returns the best-validation weights together with the per-epoch log.
    """
    if not splits.train_source:
        raise ConfigError("empty training split")
    params = init_segnet(rng.child(0), config.num_classes, config.feature_channels)
    weights = class_pixel_weights(splits.train_source, config.num_classes,
                                  config.class_weight_min, config.class_weight_max)
    opt = Adam(params, config.pretrain_lr, (config.adam_beta1, config.adam_beta2), config.adam_eps)
    order_rng = rng.child(1)
    best, best_miou, stale = clone(params, True), -1.0, 0
    rows = []
    for epoch in range(1, config.pretrain_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in batches(len(splits.train_source), config.pretrain_batch_size,
                           order_rng.permutation(len(splits.train_source))):
            images, labels = stack([splits.train_source[i] for i in idx])
            loss = task_loss(decode(params, encode(params, images)), labels, weights)
            if not np.isfinite(loss.item()):
                raise TrainingAborted(f"non-finite pretraining loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val = evaluate(params, splits.val_source, "baseline").miou
        row = {"epoch": epoch, "loss_task": float(np.mean(losses)), "miou_val_source": val,
               "wall_seconds": time.perf_counter() - t0}
        rows.append(row)
        if on_epoch:
            on_epoch(row)
        log.info("pretrain epoch %d loss %.4f val mIoU %.4f", epoch, row["loss_task"], val)
        if val > best_miou:
            best, best_miou, stale = clone(params, True), val, 0
        else:
            stale += 1
            if stale >= config.pretrain_patience:
                break
    return best, rows


# --------------------------------------------------------------------------- PDAF


@dataclass
class StepOutputs:
    total: Tensor
    report: LossReport
    y_tilde: Tensor
    y_hat: Tensor
    z_tilde: Tensor
    z0_hat: Tensor


def pdaf_objective(bundle: ModelBundle, x_source: np.ndarray, x_target: np.ndarray,
                   labels: np.ndarray, rng: RngStream, class_weights: np.ndarray,
                   reparam_eps=None, diffuse_eps=None,
                   held_z_tilde: np.ndarray | None = None,
                   held_h_cond: np.ndarray | None = None) -> StepOutputs:
    """Build the full training graph for one (source, pseudo-target) batch.

    The posterior sample enters the diffusion branch and the prior target
    through a stop-gradient, and so do the encoder features that condition the
    denoiser. ``held_z_tilde`` and ``held_h_cond`` pin those stopped values (used
    by finite-difference checks, which must not see them move).
    """
    cfg = bundle.config
    B = x_source.shape[0]
    # frozen branch: one pass over both domains, no graph
    h_frozen = encode(bundle.frozen, np.concatenate([x_source, x_target]))
    h_fs, h_ft = Tensor(h_frozen.data[:B]), Tensor(h_frozen.data[B:])
    frozen_pred = decode(bundle.frozen, h_fs)

    h_t = encode(bundle.theta, x_target)

    post = extract_posterior(bundle.lpe, h_fs, h_ft)
    z_tilde = reparameterize(post, rng, eps=reparam_eps)
    y_tilde = decode(bundle.theta, modulate(h_t, project_affine(bundle.proj, z_tilde)))

    z_stop = z_tilde.detach() if held_z_tilde is None else Tensor(held_z_tilde)
    sched = bundle.schedule
    z_T = forward_diffuse(z_stop, sched, rng, eps=diffuse_eps)
    h_cond = h_t.detach() if held_h_cond is None else Tensor(held_h_cond)
    z0_hat = estimate_ldp(bundle.dpe, z_T, sched, h_cond)
    y_hat = decode(bundle.theta, modulate(h_t, project_affine(bundle.proj, z0_hat)))

    if cfg.task_branches == "both":
        l_task = scalar_affine(task_loss(y_tilde, labels, class_weights)
                               + task_loss(y_hat, labels, class_weights), 0.5)
    elif cfg.task_branches == "posterior":
        l_task = task_loss(y_tilde, labels, class_weights)
    else:
        l_task = task_loss(y_hat, labels, class_weights)
    l_sc = sc_loss(frozen_pred, y_tilde, y_hat)
    l_prior = prior_loss(z0_hat, z_stop)
    kl = kl_standard_normal(post)
    total, report = total_loss(l_task, l_sc, l_prior,
                               (cfg.lambda_task, cfg.lambda_sc, cfg.lambda_prior),
                               kl=kl, kl_weight=cfg.kl_weight)
    return StepOutputs(total, report, y_tilde, y_hat, z_tilde, z0_hat)


def make_pseudo_targets(images: np.ndarray, rng: RngStream, config: Config) -> np.ndarray:
    return np.stack([photometric_augment(img, rng, config.train_augment) for img in images])


def train_step(bundle: ModelBundle, scenes: Sequence[Scene], rng: RngStream,
               class_weights: np.ndarray, lr: float | None = None) -> LossReport:
    """Augment, forward both branches, backprop and take one Adam step."""
    if not scenes:
        raise ConfigError("empty batch")
    cfg = bundle.config
    x_s, labels = stack(scenes)
    x_t = make_pseudo_targets(x_s, rng, cfg)
    out = pdaf_objective(bundle, x_s, x_t, labels, rng, class_weights)
    params = bundle.trainable()
    opt = Adam(params, cfg.lr if lr is None else lr, (cfg.adam_beta1, cfg.adam_beta2),
               cfg.adam_eps, state=bundle.adam)
    opt.zero_grad()
    out.total.backward()
    opt.step()
    return out.report


def train_pdaf(config: Config, splits: DatasetSplits, baseline: Params, rng: RngStream | None = None,
               on_epoch: Callable[[dict], None] | None = None) -> tuple[ModelBundle, list[dict]]:
    """Fine-tune with PDAF; keeps the epoch with the best clean-validation mIoU."""
    if baseline is None:
        raise ConfigError("PDAF training needs a pretrained baseline")
    rng = rng if rng is not None else RngStream(config.seed)
    bundle = ModelBundle.from_baseline(config, baseline, rng.child(10))
    weights = class_pixel_weights(splits.train_source, config.num_classes,
                                  config.class_weight_min, config.class_weight_max)
    step_rng, order_rng, eval_rng = rng.child(11), rng.child(12), rng.child(13)
    best_state = None
    best_val = -1.0
    rows: list[dict] = []
    n = len(splits.train_source)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        reports = []
        for idx in batches(n, config.batch_size, order_rng.permutation(n)):
            try:
                reports.append(train_step(bundle, [splits.train_source[i] for i in idx], step_rng, weights))
            except TrainingAborted as exc:
                last = f"epoch {rows[-1]['epoch']}" if rows else "initialization"
                raise TrainingAborted(f"{exc}; last good state: {last}") from None
        val = evaluate(bundle, splits.val_source, "pdaf", eval_rng).miou
        test = evaluate(bundle, splits.shifted_test, "pdaf", eval_rng).miou
        row = {
            "epoch": epoch,
            "loss_task": float(np.mean([r.task for r in reports])),
            "loss_sc": float(np.mean([r.sc for r in reports])),
            "loss_prior": float(np.mean([r.prior for r in reports])),
            "kl_diag": float(np.mean([r.kl_diag for r in reports])),
            "loss_total": float(np.mean([r.total for r in reports])),
            "miou_val_source": val,
            "miou_shifted_test": test,
            "wall_seconds": time.perf_counter() - t0,
        }
        rows.append(row)
        if on_epoch:
            on_epoch(row)
        log.info("pdaf epoch %d total %.4f val %.4f shifted %.4f", epoch, row["loss_total"], val, test)
        if val > best_val:
            best_val = val
            best_state = {k: v.copy() for k, v in bundle.to_tensors().items()}
    if best_state is not None:
        bundle = ModelBundle.from_tensors(config, best_state)
    return bundle, rows


def write_csv(rows: list[dict], path, columns: Sequence[str] = CSV_COLUMNS) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
