"""Desk-scale synthetic corpus: per-class joint-chain motions with signer jitter."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .skeleton_io import KEYPOINT_SUFFIX, DatasetManifest, ManifestSample, write_keypoints, write_manifest

SEGMENT = 0.05
ROOT = (0.5, 0.7)


def class_motion(c: int, num_classes: int) -> tuple[float, float, float]:
    """(cycles over the sequence, phase, per-joint phase lag) for class ``c``."""
    cycles = 0.5 + 0.5 * c
    phase = 2.0 * math.pi * c / num_classes
    lag = 0.35 if c % 2 == 0 else -0.35
    return cycles, phase, lag


def chain_frames(
    frames: int,
    joints: int,
    cycles: float,
    phase: float,
    lag: float,
    amplitude: float,
    scale: float = 1.0,
    offset: tuple[float, float] = (0.0, 0.0),
) -> np.ndarray:
    """Forward kinematics of a planar chain whose joint angles oscillate."""
    t = np.arange(frames)[:, None] / frames
    j = np.arange(joints)[None, :]
    rel = 0.15 + amplitude * np.sin(2.0 * math.pi * cycles * t + phase + lag * j)  # [T, V]
    absolute = math.pi / 2 + np.cumsum(rel, axis=1) - rel[:, :1]
    steps = SEGMENT * scale * np.stack([np.cos(absolute), np.sin(absolute)], axis=-1)
    steps[:, 0] = 0.0  # joint 0 is the root
    pos = np.cumsum(steps, axis=1)
    pos[..., 0] += ROOT[0] + offset[0]
    pos[..., 1] += ROOT[1] + offset[1]
    return pos


def generate_corpus(
    out_dir,
    classes: int,
    samples_per_class: int,
    signers: int,
    frames: int,
    joints: int,
    seed: int = 0,
) -> DatasetManifest:
    """Write keypoint files plus ``manifest.json`` under ``out_dir``.

    Sample ``i`` of every class belongs to signer ``i % signers``.  Signers
    differ in motion amplitude, body scale and position; samples add phase
    jitter and coordinate noise.
    """
    if min(classes, samples_per_class, frames, joints) < 1:
        raise ValueError("classes, samples_per_class, frames and joints must all be >= 1")
    if signers < 3:
        raise ValueError(f"need at least 3 signers, got {signers}")
    out = Path(out_dir)
    kp_dir = out / "keypoints"
    kp_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    signer_amp = 0.35 * (1.0 + 0.15 * rng.uniform(-1, 1, signers))
    signer_scale = 1.0 + 0.1 * rng.uniform(-1, 1, signers)
    signer_offset = 0.03 * rng.uniform(-1, 1, (signers, 2))

    labels = [f"class_{c:02d}" for c in range(classes)]
    samples = []
    for c in range(classes):
        cycles, phase, lag = class_motion(c, classes)
        for i in range(samples_per_class):
            s = i % signers
            pos = chain_frames(
                frames, joints, cycles,
                phase + rng.normal(0.0, 0.15), lag, signer_amp[s],
                signer_scale[s], tuple(signer_offset[s]),
            )
            pos += rng.normal(0.0, 0.002, pos.shape)
            sid = f"c{c:02d}_n{i:03d}"
            rel = f"keypoints/{sid}{KEYPOINT_SUFFIX}"
            write_keypoints(out / rel, pos)
            samples.append(ManifestSample(sid, rel, labels[c], f"signer_{s:02d}", frames))

    manifest = DatasetManifest(samples, labels, joints, 2, out)
    write_manifest(manifest, out / "manifest.json")
    return manifest
