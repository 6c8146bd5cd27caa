"""Overall accuracy, Cohen's kappa, confusion matrices and per-SNR curves."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred must have the same length")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0
                        or max(y_true.max(), y_pred.max()) >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    flat = np.bincount(y_true * num_classes + y_pred, minlength=num_classes**2)
    return flat.reshape(num_classes, num_classes)


def _check(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {m.shape}")
    if np.any(m < 0):
        raise ValueError("confusion matrix entries must be non-negative")
    if m.sum() <= 0:
        raise ValueError("confusion matrix is empty")
    return m


def overall_accuracy(m) -> float:
    m = _check(m)
    return float(np.trace(m) / m.sum())


def chance_agreement(m) -> float:
    m = _check(m).astype(np.float64)
    total = m.sum()
    return float(np.dot(m.sum(axis=1) / total, m.sum(axis=0) / total))


def kappa(m) -> float:
    """Cohen's kappa; 0 by convention when chance agreement is 1."""
    p_o = overall_accuracy(m)
    p_e = chance_agreement(m)
    if p_e >= 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def row_normalize(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    rows = m.sum(axis=1, keepdims=True)
    return np.divide(m, rows, out=np.zeros_like(m), where=rows > 0)


@dataclass
class MetricsReport:
    oa: float
    kappa: float
    matrix: np.ndarray
    per_snr: list = field(default_factory=list)  # (snr_db, oa, count)
    class_names: list | None = None
    config_digest: str = ""

    @property
    def macro_snr_oa(self) -> float:
        """Unweighted mean of the per-SNR accuracies."""
        return float(np.mean([row[1] for row in self.per_snr])) if self.per_snr else float("nan")

    def snr_slice_oa(self, snr_min=None, snr_max=None) -> float:
        rows = [r for r in self.per_snr
                if (snr_min is None or r[0] >= snr_min) and (snr_max is None or r[0] <= snr_max)]
        count = sum(r[2] for r in rows)
        if count == 0:
            raise ValueError("no evaluated frames in the requested SNR slice")
        return float(sum(r[1] * r[2] for r in rows) / count)

    def to_dict(self) -> dict:
        return {
            "oa": self.oa,
            "kappa": self.kappa,
            "oa_macro_snr": self.macro_snr_oa,
            "num_frames": int(self.matrix.sum()),
            "class_names": self.class_names,
            "confusion": self.matrix.tolist(),
            "confusion_row_normalized": row_normalize(self.matrix).tolist(),
            "per_snr": [{"snr_db": _snr_json(s), "oa": a, "count": int(c)}
                        for s, a, c in self.per_snr],
            "config_digest": self.config_digest,
        }

    def write(self, out_dir) -> Path:
        """report.json, confusion.csv (true, predicted, count) and per_snr.csv (snr_db, oa, count)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        names = self.class_names or [str(i) for i in range(self.matrix.shape[0])]
        with open(out / "confusion.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["true", "predicted", "count", "row_fraction"])
            norm = row_normalize(self.matrix)
            for i, a in enumerate(names):
                for j, b in enumerate(names):
                    w.writerow([a, b, int(self.matrix[i, j]), f"{norm[i, j]:.6f}"])
        with open(out / "per_snr.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["snr_db", "oa", "count"])
            for s, a, c in self.per_snr:
                w.writerow([_snr_json(s), f"{a:.6f}", int(c)])
        return out


def _snr_json(s):
    return "inf" if np.isinf(s) else (int(s) if float(s).is_integer() else float(s))


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build_report(y_true, y_pred, snr_db, num_classes: int, class_names=None,
                 digest: str = "") -> MetricsReport:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    snr_db = np.asarray(snr_db, dtype=float)
    m = confusion_matrix(y_true, y_pred, num_classes)
    per_snr = []
    for s in np.unique(snr_db):
        sel = snr_db == s
        per_snr.append((float(s), float(np.mean(y_true[sel] == y_pred[sel])), int(sel.sum())))
    return MetricsReport(overall_accuracy(m), kappa(m), m, per_snr, class_names, digest)


def evaluate(model, X, y, snr_db, class_names=None, batch_size: int = 256,
             digest: str = "") -> MetricsReport:
    """Unmasked batch inference, confusion accumulation and per-SNR grouping."""
    y = np.asarray(y)
    c = model.config.num_classes
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels exceed the checkpoint's {c} classes")
    if class_names is not None and len(class_names) != c:
        raise ValueError(f"{len(class_names)} class names for a {c}-class model")
    if len(y) == 0:
        raise ValueError("no frames to evaluate")
    pred = np.empty(len(y), dtype=np.int64)
    for s in range(0, len(y), batch_size):
        xb = np.asarray(X[s : s + batch_size], dtype=model.dtype)
        pred[s : s + batch_size] = np.argmax(model.forward_logits(xb), axis=1)
    model.clear_cache()
    return build_report(y, pred, snr_db, c, class_names, digest)


def evaluate_dataset(model, dataset, split: str = "ft_test", snr_min=None, snr_max=None,
                     digest: str = "") -> MetricsReport:
    if model.config.num_classes != dataset.num_classes:
        raise ValueError(
            f"checkpoint has {model.config.num_classes} classes, dataset has {dataset.num_classes}"
        )
    idx = dataset.indices(split, snr_min, snr_max)
    return evaluate(model, dataset.frames[idx], dataset.labels[idx], dataset.snr_db[idx],
                    dataset.schemes, digest=digest)
