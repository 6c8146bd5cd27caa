"""Reconstruction and classification objectives with their gradients."""

from __future__ import annotations

import numpy as np

from .model import MaskPlan


def masked_mse(pred, target, plan: MaskPlan, return_grad: bool = False):
    """Mean over masked patches of the squared L2 residual norm.

    Batched inputs (B, N, P) average the per-frame losses. The per-element
    divisor P is deliberately not applied.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ")
    single = pred.ndim == 2
    if single:
        pred, target = pred[None], target[None]
    m = plan.masked.shape[1]
    if m == 0:
        raise ValueError("masked_mse needs at least one masked patch")
    if plan.batch_size != pred.shape[0]:
        raise ValueError("mask plan batch does not match predictions")
    idx = plan.masked[..., None]
    r = np.take_along_axis(pred, idx, axis=1) - np.take_along_axis(target, idx, axis=1)
    b = pred.shape[0]
    loss = float(np.sum(r * r) / (b * m))
    if not return_grad:
        return loss
    grad = np.zeros_like(pred)
    np.put_along_axis(grad, idx, r * (2.0 / (b * m)), axis=1)
    return loss, (grad[0] if single else grad)


def cross_entropy(probs, labels, return_grad: bool = False, clamp: float = 1e-12):
    """-log p[label], averaged over a batch; gradient is with respect to probs."""
    probs = np.asarray(probs, dtype=np.float64 if np.asarray(probs).dtype == np.float64 else None)
    single = probs.ndim == 1
    p = probs[None] if single else probs
    labels = np.atleast_1d(np.asarray(labels))
    c = p.shape[1]
    if labels.shape[0] != p.shape[0]:
        raise ValueError("one label per probability row is required")
    if np.any(labels < 0) or np.any(labels >= c) or labels.dtype.kind not in "iu":
        raise ValueError(f"labels must be integer class indices in [0, {c})")
    picked = np.maximum(p[np.arange(p.shape[0]), labels], clamp)
    loss = float(-np.mean(np.log(picked)))
    if not return_grad:
        return loss
    grad = np.zeros_like(p)
    grad[np.arange(p.shape[0]), labels] = -1.0 / (picked * p.shape[0])
    return loss, (grad[0] if single else grad)


def softmax_cross_entropy(logits, labels):
    """Fused softmax + cross-entropy; returns (loss, probs, d loss / d logits)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    c = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must be class indices in [0, {c})")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    b = logits.shape[0]
    rows = np.arange(b)
    loss = float(-np.mean(logp[rows, labels]))
    probs = np.exp(logp)
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, probs, grad
