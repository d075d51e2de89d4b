"""Training-time transforms for skeleton coordinates."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ConfigError
from .skeleton_io import SkeletonSequence


@dataclass(frozen=True)
class AugmentConfig:
    rotate_deg: tuple[float, float] = (-15.0, 15.0)
    shift: tuple[float, float] = (-0.1, 0.1)
    joint_mix_prob: float = 0.5
    joint_mix_fraction: float = 0.25
    enabled: bool = True

    def __post_init__(self):
        for name in ("rotate_deg", "shift"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(name, f"lower bound {lo} exceeds upper bound {hi}")
        for name in ("joint_mix_prob", "joint_mix_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(name, f"must lie in [0, 1], got {getattr(self, name)}")


def sample_rng(seed: int, sample_id: str, epoch: int = 0) -> np.random.Generator:
    """Per-sample stream, independent of worker or batch order."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode("utf-8"))])


def rotate_shift(frames: np.ndarray, theta_deg: float, dx: float, dy: float) -> np.ndarray:
    """Rotate the x/y plane by ``theta_deg`` then translate; other channels pass through."""
    if frames.shape[-1] < 2:
        raise ValueError(f"rotation needs at least 2 coordinate channels, got {frames.shape[-1]}")
    th = math.radians(theta_deg)
    c, s = math.cos(th), math.sin(th)
    x, y = frames[..., 0].astype(np.float64), frames[..., 1].astype(np.float64)
    out = frames.copy()
    out[..., 0] = x * c - y * s + dx
    out[..., 1] = x * s + y * c + dy
    return out


def random_rotate_shift(seq: SkeletonSequence, cfg: AugmentConfig, rng: np.random.Generator) -> SkeletonSequence:
    # one draw per sample: the whole sequence moves rigidly
    theta = rng.uniform(*cfg.rotate_deg)
    dx = rng.uniform(*cfg.shift)
    dy = rng.uniform(*cfg.shift)
    return seq.with_frames(rotate_shift(seq.frames, theta, dx, dy))


def joint_mixing(
    seq_a: SkeletonSequence, seq_b: SkeletonSequence, cfg: AugmentConfig, rng: np.random.Generator
) -> SkeletonSequence:
    """Replace a random subset of joint trajectories in ``seq_a`` with ``seq_b``'s."""
    if seq_a.label != seq_b.label:
        raise ValueError(f"joint mixing needs same-label partners, got {seq_a.label} and {seq_b.label}")
    if seq_a.frames.shape != seq_b.frames.shape:
        raise ValueError(f"joint mixing shape mismatch: {seq_a.frames.shape} vs {seq_b.frames.shape}")
    if cfg.joint_mix_prob <= 0.0 or rng.random() >= cfg.joint_mix_prob:
        return seq_a
    v = seq_a.frames.shape[1]
    count = int(math.floor(cfg.joint_mix_fraction * v))
    if count == 0:
        return seq_a
    joints = rng.choice(v, size=count, replace=False)
    frames = seq_a.frames.copy()
    frames[:, joints] = seq_b.frames[:, joints]
    return seq_a.with_frames(frames)


def augment_pipeline(
    seq: SkeletonSequence,
    same_class_pool: Sequence[SkeletonSequence],
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> SkeletonSequence:
    if not cfg.enabled:
        return seq
    if cfg.joint_mix_prob > 0.0:
        if not same_class_pool:
            raise ValueError("joint mixing enabled but the same-class pool is empty")
        partner = same_class_pool[int(rng.integers(len(same_class_pool)))]
        seq = joint_mixing(seq, partner, cfg, rng)
    return random_rotate_shift(seq, cfg, rng)
