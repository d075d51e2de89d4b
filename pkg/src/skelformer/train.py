"""Loss, AdamW, warmup+cosine schedule, the training loop and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as mdl
from . import tensor as tk
from .augment import AugmentConfig, augment_pipeline, sample_rng
from .config import ConfigError, from_dict, to_dict
from .evaluation import predict_logits, top_k_accuracy
from .skeleton_io import DatasetManifest, SkeletonSequence, SplitAssignment, preprocess, validate_split
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

SIDECAR_NAME = "config.json"
LOG_NAME = "train_log.jsonl"

# epoch counts used for the three corpora
EPOCH_PRESETS = {"wlasl": 500, "jsl": 100, "ksl": 50}


class CheckpointError(ValueError):
    """Checkpoint does not match the expected configuration or is corrupt."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    base_lr: float = 0.001
    batch_size: int = 16
    warmup_epochs: int = 5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    label_smoothing: float = 0.0
    grad_clip: float | None = None

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError("base_lr", f"must be > 0, got {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs", f"must satisfy 0 <= warmup_epochs < epochs ({self.epochs})")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing", f"must lie in [0, 1), got {self.label_smoothing}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip", f"must be > 0 when set, got {self.grad_clip}")


@dataclass
class TrainState:
    params: dict[str, Tensor]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    best_val_metric: float | None = None

    @classmethod
    def fresh(cls, params: dict[str, Tensor], seed: int = 0) -> "TrainState":
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(params, m, v, 0, seed)


@dataclass
class TrainReport:
    epochs_run: int
    steps: int
    log: list[dict] = field(default_factory=list)
    best_val_top1: float | None = None
    best_epoch: int | None = None
    out_dir: str = ""


# -- loss / optimizer / schedule ------------------------------------------------

def cross_entropy(logits: Tensor, labels, label_smoothing: float = 0.0) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch of {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    target = np.full((b, k), label_smoothing / k)
    target[np.arange(b), labels] += 1.0 - label_smoothing
    logp = tk.log_softmax(logits, axis=-1)
    return (logp * Tensor(target, dtype=logits.dtype)).sum() * (-1.0 / b)


def adamw_step(state: TrainState, grads: dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> TrainState:
    """One decoupled-weight-decay Adam update, in place on ``state``."""
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in state.params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise tk.ShapeError(f"{name}: gradient shape {g.shape} does not match parameter {p.data.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay and mdl.is_decayed(name):
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.data.dtype)
    state.step = t
    return state


def cosine_warmup_lr(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then half-cosine decay to 0 at the last step."""
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.base_lr * (step + 1) / warm
    progress = min(1.0, (step - warm) / max(1, total - warm - 1))
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(state: TrainState, model_cfg: mdl.ModelConfig, path, labels: Sequence[str] | None = None,
                    extra: dict | None = None) -> None:
    """Write the tensor file and a ``config.json`` sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, p in state.params.items():
        tensors[f"param/{name}"] = p.data
    for name in state.params:
        tensors[f"adam_m/{name}"] = state.m[name]
        tensors[f"adam_v/{name}"] = state.v[name]
    meta = {"step": state.step, "seed": state.seed, "best_val_metric": state.best_val_metric}
    tk.save_tensors(path, tensors, meta)
    sidecar = {"model": to_dict(model_cfg), "labels": list(labels or [])}
    if extra:
        sidecar.update(extra)
    (path.parent / SIDECAR_NAME).write_text(json.dumps(sidecar, indent=1) + "\n", encoding="utf-8")


def read_sidecar(path) -> tuple[mdl.ModelConfig, dict]:
    side = Path(path).parent / SIDECAR_NAME
    if not side.is_file():
        raise CheckpointError(f"{side}: checkpoint sidecar not found")
    doc = json.loads(side.read_text(encoding="utf-8"))
    try:
        cfg = from_dict(mdl.ModelConfig, doc.get("model"), "model")
    except ConfigError as exc:
        raise CheckpointError(f"{side}: {exc}") from None
    return cfg, doc


def load_checkpoint(path, model_cfg: mdl.ModelConfig | None = None) -> TrainState:
    """Load a checkpoint; ``model_cfg``, when given, must equal the stored config."""
    stored_cfg, _ = read_sidecar(path)
    if model_cfg is not None and model_cfg != stored_cfg:
        diffs = [
            f"{k}: checkpoint {a!r} vs expected {b!r}"
            for k, a in to_dict(stored_cfg).items()
            if (b := getattr(model_cfg, k)) != a
        ]
        raise CheckpointError(f"config mismatch ({'; '.join(diffs)})")
    try:
        tensors, meta = tk.load_tensors(path)
    except tk.CodecError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    params, m, v = {}, {}, {}
    for key, arr in tensors.items():
        kind, _, name = key.partition("/")
        {"param": params, "adam_m": m, "adam_v": v}.get(kind, {})[name] = arr
    params = {k: Tensor(a, requires_grad=True, dtype=a.dtype) for k, a in params.items()}
    try:
        mdl.check_params(params, stored_cfg)
    except tk.ShapeError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if set(m) != set(params) or set(v) != set(params):
        raise CheckpointError(f"{path}: optimizer moments do not cover the parameter set")
    return TrainState(
        params,
        {k: m[k] for k in params},
        {k: v[k] for k in params},
        int(meta.get("step", 0)),
        int(meta.get("seed", 0)),
        meta.get("best_val_metric"),
    )


# -- training loop ----------------------------------------------------------------

class Trainer:
    """Owns the preprocessed data, the schedule and a :class:`TrainState`.

    The batch composition and augmentation draws of a step depend only on
    (seed, step), so a run resumed from a checkpoint replays exactly.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        split: SplitAssignment,
        model_cfg: mdl.ModelConfig,
        train_cfg: TrainConfig,
        augment_cfg: AugmentConfig | None = None,
        state: TrainState | None = None,
        user_independent: bool = True,
    ):
        if not split.train:
            raise ValueError("training split is empty")
        validate_split(split, manifest, user_independent=user_independent)
        if (manifest.joint_count, manifest.channels) != (model_cfg.joints, model_cfg.in_channels):
            raise ConfigError("model.joints", f"manifest has {manifest.joint_count} joints x "
                              f"{manifest.channels} channels, model expects {model_cfg.joints} x {model_cfg.in_channels}")
        if len(manifest.label_vocab) != model_cfg.num_classes:
            raise ConfigError("model.num_classes",
                              f"manifest has {len(manifest.label_vocab)} classes, model has {model_cfg.num_classes}")
        self.manifest = manifest
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.augment_cfg = augment_cfg or AugmentConfig(enabled=False)
        self.train_seqs = [preprocess(manifest.load_sequence(i), model_cfg.t_len) for i in split.train]
        self.val_seqs = [preprocess(manifest.load_sequence(i), model_cfg.t_len) for i in split.val]
        self.pools: dict[int, list[SkeletonSequence]] = {}
        for s in self.train_seqs:
            self.pools.setdefault(s.label, []).append(s)
        self.steps_per_epoch = math.ceil(len(self.train_seqs) / train_cfg.batch_size)
        self.total_steps = train_cfg.epochs * self.steps_per_epoch
        if state is None:
            state = TrainState.fresh(mdl.init_params(model_cfg, train_cfg.seed), train_cfg.seed)
        self.state = state

    # batches ---------------------------------------------------------------
    def batch_indices(self, step: int) -> np.ndarray:
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.train_seqs))
        bs = self.cfg.batch_size
        return order[pos * bs : (pos + 1) * bs]

    def make_batch(self, indices: np.ndarray, epoch: int, augment: bool = True) -> tuple[np.ndarray, np.ndarray]:
        frames, labels = [], []
        for i in indices:
            seq = self.train_seqs[i]
            if augment and self.augment_cfg.enabled:
                pool = [p for p in self.pools[seq.label] if p.sample_id != seq.sample_id] or [seq]
                rng = sample_rng(self.cfg.seed, seq.sample_id, epoch)
                seq = augment_pipeline(seq, pool, self.augment_cfg, rng)
            frames.append(seq.frames)
            labels.append(seq.label)
        return np.stack(frames).astype(tk.get_dtype()), np.array(labels, dtype=np.int64)

    # one optimization step -------------------------------------------------------
    def train_step(self) -> tuple[float, float]:
        """Run the step at ``state.step``; returns (loss, lr)."""
        step = self.state.step
        epoch = step // self.steps_per_epoch
        indices = self.batch_indices(step)
        frames, labels = self.make_batch(indices, epoch, augment=True)
        lr = cosine_warmup_lr(step, self.steps_per_epoch, self.cfg)
        drop_rng = np.random.default_rng([self.cfg.seed, step, 1]) if self.model_cfg.dropout > 0 else None
        params = self.state.params
        for p in params.values():
            p.grad = None
        try:
            loss = cross_entropy(mdl.forward(frames, params, self.model_cfg, rng=drop_rng), labels,
                                 self.cfg.label_smoothing)
            loss.backward()
        except NonFiniteError as exc:
            ids = [self.train_seqs[i].sample_id for i in indices]
            raise TrainingDiverged(f"non-finite value at step {step} (lr={lr:g}), batch {ids}: {exc}") from exc
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        if self.cfg.grad_clip is not None:
            clip_grad_norm(grads, self.cfg.grad_clip)
        adamw_step(self.state, grads, lr, self.cfg)
        return loss.item(), lr

    def run_steps(self, n: int) -> list[float]:
        return [self.train_step()[0] for _ in range(n)]

    def evaluate_val(self) -> tuple[float | None, float | None]:
        if not self.val_seqs:
            return None, None
        frames = np.stack([s.frames for s in self.val_seqs]).astype(tk.get_dtype())
        labels = np.array([s.label for s in self.val_seqs])
        logits = predict_logits(self.state.params, self.model_cfg, frames)
        k = self.model_cfg.num_classes
        return top_k_accuracy(logits, labels, 1), top_k_accuracy(logits, labels, min(5, k))


def fit(
    manifest: DatasetManifest,
    split: SplitAssignment,
    model_cfg: mdl.ModelConfig,
    train_cfg: TrainConfig,
    augment_cfg: AugmentConfig | None,
    out_dir,
    resume_from=None,
    user_independent: bool = True,
) -> TrainReport:
    """Train for ``train_cfg.epochs``, logging each epoch and keeping best/last checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(resume_from, model_cfg) if resume_from else None
    trainer = Trainer(manifest, split, model_cfg, train_cfg, augment_cfg, state, user_independent)
    spe = trainer.steps_per_epoch
    labels = manifest.label_vocab
    extra = {"preprocess": {"scheme": "center_scale", "t_len": model_cfg.t_len}}
    report = TrainReport(epochs_run=0, steps=trainer.state.step, out_dir=str(out))

    with open(out / LOG_NAME, "a" if resume_from else "w", encoding="utf-8") as log_file:
        while trainer.state.step < trainer.total_steps:
            epoch = trainer.state.step // spe
            losses, lr = [], 0.0
            try:
                while trainer.state.step < (epoch + 1) * spe:
                    loss, lr = trainer.train_step()
                    losses.append(loss)
            except TrainingDiverged as exc:
                (out / "diverged_batch.json").write_text(json.dumps({"error": str(exc)}) + "\n")
                raise
            top1, top5 = trainer.evaluate_val()
            row = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)),
                   "val_top1": top1, "val_top5": top5}
            log_file.write(json.dumps(row) + "\n")
            log_file.flush()
            report.log.append(row)
            report.epochs_run += 1
            log.info("epoch %d loss %.4f val_top1 %s", epoch + 1, row["train_loss"], top1)

            metric = top1 if top1 is not None else -row["train_loss"]
            best = trainer.state.best_val_metric
            if best is None or metric > best:
                trainer.state.best_val_metric = metric
                report.best_val_top1 = top1
                report.best_epoch = epoch + 1
                save_checkpoint(trainer.state, model_cfg, out / "best.ckpt", labels, extra)
            save_checkpoint(trainer.state, model_cfg, out / "last.ckpt", labels, extra)
    report.steps = trainer.state.step
    return report
