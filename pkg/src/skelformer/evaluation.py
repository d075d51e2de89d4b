"""Top-K accuracy, confusion matrices and split evaluation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as mdl
from .skeleton_io import DatasetManifest, ManifestError, preprocess
from .tensor import no_grad


@dataclass
class EvalReport:
    top1: float
    top5: float
    per_class_top1: dict[str, float]
    confusion: list[list[int]]
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def ranked_classes(logits: np.ndarray) -> np.ndarray:
    """Class indices by descending logit; equal logits keep lower index first."""
    return np.argsort(-np.asarray(logits), axis=1, kind="stable")


def top_k_accuracy(logits, labels, k: int) -> float:
    logits = np.asarray(logits)
    n, classes = logits.shape
    if not 1 <= k <= classes:
        raise ValueError(f"k must lie in [1, {classes}], got {k}")
    labels = _check_labels(labels, classes)
    if n == 0:
        return 0.0
    hits = (ranked_classes(logits)[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """``counts[true, pred]``."""
    preds = _check_labels(preds, num_classes)
    labels = _check_labels(labels, num_classes)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return counts


def predict_logits(params, cfg: mdl.ModelConfig, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Logits for preprocessed frames ``[N, T, V, C]``, batched in order."""
    out = []
    with no_grad():
        for start in range(0, len(frames), batch_size):
            out.append(mdl.forward(frames[start : start + batch_size], params, cfg).data)
    if not out:
        return np.zeros((0, cfg.num_classes))
    return np.concatenate(out).astype(np.float64)


def load_split_arrays(manifest: DatasetManifest, ids: Sequence[str], t_len: int) -> tuple[np.ndarray, np.ndarray]:
    seqs = [preprocess(manifest.load_sequence(i), t_len) for i in ids]
    if not seqs:
        return np.zeros((0, t_len, manifest.joint_count, manifest.channels), np.float32), np.zeros(0, np.int64)
    return np.stack([s.frames for s in seqs]), np.array([s.label for s in seqs], dtype=np.int64)


def report_from_logits(logits: np.ndarray, labels: np.ndarray, class_names: Sequence[str]) -> EvalReport:
    k = len(class_names)
    preds = ranked_classes(logits)[:, 0] if len(logits) else np.zeros(0, np.int64)
    conf = confusion_matrix(preds, labels, k)
    per_class = {
        name: float(conf[c, c] / conf[c].sum()) for c, name in enumerate(class_names) if conf[c].sum() > 0
    }
    return EvalReport(
        top1=top_k_accuracy(logits, labels, 1),
        top5=top_k_accuracy(logits, labels, min(5, k)),
        per_class_top1=per_class,
        confusion=conf.tolist(),
        n_samples=int(len(labels)),
    )


def evaluate(params, model_cfg: mdl.ModelConfig, manifest: DatasetManifest, split_part: Sequence[str]) -> EvalReport:
    """Evaluate on the given sample ids; deterministic, no augmentation."""
    if not split_part:
        raise ValueError("cannot evaluate an empty split part")
    if (manifest.joint_count, manifest.channels) != (model_cfg.joints, model_cfg.in_channels):
        raise ManifestError(
            f"manifest has {manifest.joint_count} joints x {manifest.channels} channels, "
            f"model expects {model_cfg.joints} x {model_cfg.in_channels}"
        )
    if len(manifest.label_vocab) != model_cfg.num_classes:
        raise ManifestError(
            f"manifest has {len(manifest.label_vocab)} classes, model expects {model_cfg.num_classes}"
        )
    frames, labels = load_split_arrays(manifest, split_part, model_cfg.t_len)
    logits = predict_logits(params, model_cfg, frames)
    return report_from_logits(logits, labels, manifest.label_vocab)
