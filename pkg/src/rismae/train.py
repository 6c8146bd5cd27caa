"""Two-stage recipe: masked-reconstruction pretraining, then supervised fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import masked_mse, softmax_cross_entropy
from .model import RISMAE, full_plan, sample_mask
from .nn import NumericalError, OptimizerState, adamw_step

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune")


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 100
    batch_size: int = 1024
    base_lr: float = 1e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.05
    label_fraction: float = 0.01
    pretrain_snr_min_db: float = 6.0
    seed: int = 0
    schedule: str = "cosine"
    freeze_encoder: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    val_max_frames: int | None = None
    max_steps: int | None = None

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        if stage == "finetune":
            base = dict(stage="finetune", epochs=50, batch_size=512, warmup_frac=0.1,
                        weight_decay=0.0)
        else:
            base = dict(stage="pretrain")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in (0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be cosine or constant, got {self.schedule!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossTrace:
    steps: list = field(default_factory=list)  # (step, lr, loss)
    epoch_means: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def losses(self) -> np.ndarray:
        return np.array([s[2] for s in self.steps])

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss"])
            for step, lr, loss in self.steps:
                w.writerow([step, repr(float(lr)), repr(float(loss))])

    def summary(self) -> dict:
        return {"epoch_means": [float(x) for x in self.epoch_means],
                "epoch_seconds": [float(x) for x in self.epoch_seconds],
                "val_metric": [float(x) for x in self.val_metric],
                "best_epoch": self.best_epoch, "num_steps": len(self.steps)}


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at total_steps."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warm = cfg.warmup_frac * total_steps
    if step < warm:
        return cfg.base_lr * step / warm
    if cfg.schedule == "constant":
        return cfg.base_lr
    progress = (step - warm) / max(total_steps - warm, 1e-12)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _largest_remainder(weights: np.ndarray, total: int, rng) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    quota = weights / weights.sum() * total
    base = np.floor(quota).astype(int)
    rem = total - base.sum()
    if rem:
        frac = quota - base
        # random tie-break so equal remainders don't always favour low indices
        order = np.lexsort((rng.random(frac.size), -frac))
        base[order[:rem]] += 1
    return np.minimum(base, weights.astype(int))


def select_finetune_labels(labels, snr, fraction: float, seed: int = 0,
                           class_names=None) -> np.ndarray:
    """Class- then SNR-stratified sample of round(fraction * n) positions.

    Returns sorted indices into ``labels``.
    """
    labels = np.asarray(labels)
    snr = np.asarray(snr)
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"label fraction must lie in (0, 1], got {fraction}")
    n = labels.size
    if fraction == 1.0:
        return np.arange(n)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    total = int(math.floor(fraction * n + 0.5))
    classes = np.unique(labels)
    per_class = _largest_remainder(np.array([np.sum(labels == c) for c in classes]), total, rng)
    chosen = []
    for c, k in zip(classes, per_class):
        if k == 0:
            name = class_names[c] if class_names is not None else int(c)
            raise ValueError(
                f"label fraction {fraction} selects no frames for class {name!r}"
            )
        idx_c = np.flatnonzero(labels == c)
        levels, inv = np.unique(snr[idx_c], return_inverse=True)
        per_snr = _largest_remainder(np.bincount(inv, minlength=levels.size), int(k), rng)
        for j, kk in enumerate(per_snr):
            if kk:
                pool = idx_c[inv == j]
                chosen.append(rng.choice(pool, size=int(kk), replace=False))
    return np.sort(np.concatenate(chosen))


def _check_finite(step: int, loss: float, grads: dict):
    if not math.isfinite(loss):
        raise NumericalError(f"step {step}: loss is {loss}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"step {step}: non-finite gradient in {name}")


def _no_decay(names) -> set:
    # biases, norms, tokens and positional tables are not decayed
    return {n for n, p in names.items() if p.ndim < 2 or "pos" in n}


def _subsample(n: int, cap: int | None, seed: int) -> np.ndarray:
    if cap is None or n <= cap:
        return np.arange(n)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    return np.sort(rng.choice(n, size=cap, replace=False))


def reconstruction_loss(model: RISMAE, X, ratio: float, seed: int = 0,
                        batch_size: int = 256) -> float:
    """Mean masked-patch loss over ``X`` with masks fixed by ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(13,)))
    n_patch = model.config.num_patches
    total = 0.0
    model.set_training(False)
    for s in range(0, len(X), batch_size):
        xb = np.asarray(X[s : s + batch_size], dtype=model.dtype)
        plan = sample_mask(n_patch, ratio, rng, len(xb))
        pred, tgt = model.forward_pretrain(xb, plan)
        total += masked_mse(pred, tgt, plan) * len(xb)
    model.clear_cache()
    return total / len(X)


def pretrain_arrays(model: RISMAE, X, cfg: TrainConfig, X_val=None, callback=None):
    """Masked-reconstruction training on in-memory frames (n, 2, T).

    Keeps the parameters with the lowest validation loss (or the final ones
    when no validation frames are given). Returns the LossTrace.
    """
    cfg.validate()
    n = len(X)
    if n == 0:
        raise ValueError("no pretraining frames")
    if model.config.num_masked == 0:
        raise ValueError("mask_ratio masks no patches; reconstruction loss is undefined")
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    params = {k: v for k, v in model.named_parameters().items() if not k.startswith("head.")}
    state = OptimizerState(lr=cfg.base_lr, beta1=cfg.beta1, beta2=cfg.beta2,
                           weight_decay=cfg.weight_decay)
    no_decay = _no_decay(params)
    if X_val is not None:
        X_val = X_val[_subsample(len(X_val), cfg.val_max_frames, cfg.seed)]
    trace = LossTrace()
    best = (math.inf, None)
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            if step >= total:
                break
            idx = np.sort(order[s : s + cfg.batch_size])
            xb = np.asarray(X[idx], dtype=model.dtype)
            plan = sample_mask(model.config.num_patches, model.config.mask_ratio, rng, len(idx))
            model.set_training(True)
            pred, tgt = model.forward_pretrain(xb, plan)
            loss, dpred = masked_mse(pred, tgt, plan, return_grad=True)
            model.zero_grad()
            model.backward_pretrain(dpred)
            grads = {k: v for k, v in model.named_grads().items() if k in params}
            _check_finite(step, loss, grads)
            lr = lr_at(step, total, cfg)
            adamw_step(params, grads, state, lr=lr, no_decay=no_decay)
            trace.steps.append((step, lr, loss))
            losses.append(loss)
            step += 1
        if not losses:
            break
        trace.epoch_means.append(float(np.mean(losses)))
        trace.epoch_seconds.append(time.perf_counter() - t0)
        if X_val is not None:
            v = reconstruction_loss(model, X_val, model.config.mask_ratio, cfg.seed)
            trace.val_metric.append(v)
            if v < best[0]:
                best = (v, model.get_state())
                trace.best_epoch = epoch
        log.info("pretrain epoch %d loss %.4f val %s (%.1fs)", epoch + 1,
                 trace.epoch_means[-1], trace.val_metric[-1] if trace.val_metric else "-",
                 trace.epoch_seconds[-1])
        if callback is not None:
            callback(epoch, trace)
    model.clear_cache()
    model.set_training(False)
    if best[1] is not None:
        model.set_state(best[1])
    else:
        trace.best_epoch = len(trace.epoch_means) - 1
    model.optimizer_state_ = state
    return trace


def accuracy(model: RISMAE, X, y, batch_size: int = 256) -> float:
    proba = model.predict_proba(np.asarray(X, dtype=model.dtype), batch_size)
    return float(np.mean(np.argmax(proba, axis=1) == np.asarray(y)))


def finetune_arrays(model: RISMAE, X, y, cfg: TrainConfig, X_val=None, y_val=None,
                    callback=None):
    """Cross-entropy training of the classifier head (and encoder unless frozen)."""
    cfg.validate()
    if not model.with_head:
        raise ValueError("model has no classifier head")
    y = np.asarray(y)
    n = len(X)
    if n == 0:
        raise ValueError("no fine-tuning frames")
    c = model.config.num_classes
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"labels exceed the model's {c} classes")
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    names = model.named_parameters()
    if cfg.freeze_encoder:
        params = {k: v for k, v in names.items() if k.startswith("head.")}
    else:
        enc = set(model.encoder_param_names())
        params = {k: v for k, v in names.items() if k in enc or k.startswith("head.")}
    state = OptimizerState(lr=cfg.base_lr, beta1=cfg.beta1, beta2=cfg.beta2,
                           weight_decay=cfg.weight_decay)
    no_decay = _no_decay(params)
    if X_val is not None:
        keep = _subsample(len(X_val), cfg.val_max_frames, cfg.seed)
        X_val, y_val = X_val[keep], np.asarray(y_val)[keep]
    trace = LossTrace()
    best = (-math.inf, None)
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            if step >= total:
                break
            idx = np.sort(order[s : s + cfg.batch_size])
            xb = np.asarray(X[idx], dtype=model.dtype)
            model.set_training(True)
            logits = model.forward_logits(xb)
            loss, _, dlogits = softmax_cross_entropy(logits, y[idx])
            model.zero_grad()
            model.backward_logits(dlogits, freeze_encoder=cfg.freeze_encoder)
            grads = {k: v for k, v in model.named_grads().items() if k in params}
            _check_finite(step, loss, grads)
            lr = lr_at(step, total, cfg)
            adamw_step(params, grads, state, lr=lr, no_decay=no_decay)
            trace.steps.append((step, lr, loss))
            losses.append(loss)
            step += 1
        if not losses:
            break
        trace.epoch_means.append(float(np.mean(losses)))
        trace.epoch_seconds.append(time.perf_counter() - t0)
        if X_val is not None:
            v = accuracy(model, X_val, y_val)
            trace.val_metric.append(v)
            if v > best[0]:
                best = (v, model.get_state())
                trace.best_epoch = epoch
        log.info("finetune epoch %d loss %.4f val_oa %s", epoch + 1, trace.epoch_means[-1],
                 trace.val_metric[-1] if trace.val_metric else "-")
        if callback is not None:
            callback(epoch, trace)
    model.clear_cache()
    model.set_training(False)
    if best[1] is not None:
        model.set_state(best[1])
    else:
        trace.best_epoch = len(trace.epoch_means) - 1
    return trace


def pretrain(dataset, model: RISMAE, cfg: TrainConfig, callback=None) -> LossTrace:
    """Pretrain on ssl_train frames at or above the SNR threshold; validate on ssl_val."""
    idx = dataset.indices("ssl_train", snr_min=cfg.pretrain_snr_min_db)
    if idx.size == 0:
        raise ValueError(f"no ssl_train frames with SNR >= {cfg.pretrain_snr_min_db} dB")
    X = np.asarray(dataset.frames[idx], dtype=model.dtype)
    vidx = dataset.indices("ssl_val", snr_min=cfg.pretrain_snr_min_db)
    vidx = vidx[_subsample(vidx.size, cfg.val_max_frames, cfg.seed)]
    X_val = np.asarray(dataset.frames[vidx], dtype=model.dtype) if vidx.size else None
    return pretrain_arrays(model, X, cfg, X_val, callback)


def finetune(dataset, model: RISMAE, cfg: TrainConfig, callback=None) -> LossTrace:
    """Fine-tune on a labeled fraction of ssl_train (all SNRs); select on ft_val OA."""
    if model.config.num_classes != dataset.num_classes:
        raise ValueError(
            f"model has {model.config.num_classes} classes, dataset has {dataset.num_classes}"
        )
    pool = dataset.indices("ssl_train")
    chosen = pool[select_finetune_labels(dataset.labels[pool], dataset.snr_db[pool],
                                         cfg.label_fraction, cfg.seed, dataset.schemes)]
    X = np.asarray(dataset.frames[chosen], dtype=model.dtype)
    vidx = dataset.indices("ft_val")
    vidx = vidx[_subsample(vidx.size, cfg.val_max_frames, cfg.seed)]
    X_val = np.asarray(dataset.frames[vidx], dtype=model.dtype) if vidx.size else None
    y_val = dataset.labels[vidx] if vidx.size else None
    trace = finetune_arrays(model, X, dataset.labels[chosen], cfg, X_val, y_val, callback)
    trace.selected_frames = chosen
    return trace
