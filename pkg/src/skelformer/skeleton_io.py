"""Skeleton sequences on disk: keypoint files, manifests, splits, preprocessing."""
from __future__ import annotations

import dataclasses
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import CodecError, load_tensors, save_tensors

log = logging.getLogger(__name__)

KEYPOINT_SUFFIX = ".kpt"


class ManifestError(ValueError):
    """The manifest or split document is malformed or inconsistent."""


class SplitError(ValueError):
    """No split satisfies the requested constraints."""


@dataclass(frozen=True)
class SkeletonSequence:
    frames: np.ndarray  # [T', V, C_in]
    label: int
    signer_id: str = ""
    sample_id: str = ""

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be [T>=1, V, C], got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"sample {self.sample_id!r} has non-finite coordinates")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> "SkeletonSequence":
        return dataclasses.replace(self, frames=frames)


@dataclass(frozen=True)
class ManifestSample:
    sample_id: str
    path: str
    label_name: str
    signer_id: str
    frame_count: int


@dataclass
class DatasetManifest:
    samples: list[ManifestSample]
    label_vocab: list[str]
    joint_count: int
    channels: int
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        self._label_index = {name: i for i, name in enumerate(self.label_vocab)}
        self._by_id = {s.sample_id: s for s in self.samples}

    def label_index(self, name: str) -> int:
        return self._label_index[name]

    def sample(self, sample_id: str) -> ManifestSample:
        return self._by_id[sample_id]

    def resolve(self, sample: ManifestSample) -> Path:
        p = Path(sample.path)
        return p if p.is_absolute() else self.root / p

    def load_sequence(self, sample_id: str) -> SkeletonSequence:
        s = self._by_id[sample_id]
        frames = read_keypoints(self.resolve(s), channels=self.channels)
        if frames.shape[1] != self.joint_count:
            raise ManifestError(
                f"{self.resolve(s)}: {frames.shape[1]} joints, manifest declares {self.joint_count}"
            )
        return SkeletonSequence(frames, self.label_index(s.label_name), s.signer_id, s.sample_id)

    def to_dict(self) -> dict:
        return {
            "joint_count": self.joint_count,
            "channels": self.channels,
            "labels": list(self.label_vocab),
            "samples": [
                {
                    "id": s.sample_id,
                    "path": s.path,
                    "label": s.label_name,
                    "signer": s.signer_id,
                    "frames": s.frame_count,
                }
                for s in self.samples
            ],
        }


@dataclass(frozen=True)
class SplitAssignment:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int = 0

    def part(self, name: str) -> list[str]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split part {name!r}")
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": list(self.train), "val": list(self.val), "test": list(self.test)}


# -- keypoint files -----------------------------------------------------

def write_keypoints(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 3:
        raise ValueError(f"keypoint frames must be [T, V, C], got {frames.shape}")
    save_tensors(path, {"frames": frames})


def read_keypoints(path, channels: int | None = None) -> np.ndarray:
    """Read a canonical keypoint file as a float32 ``[T, V, C]`` array.

    Channels beyond ``channels`` (e.g. detector confidence) are dropped.
    """
    path = Path(path)
    try:
        tensors, _ = load_tensors(path)
    except CodecError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    if "frames" not in tensors:
        raise ManifestError(f"{path}: no 'frames' tensor")
    frames = tensors["frames"].astype(np.float32, copy=False)
    if frames.ndim != 3:
        raise ManifestError(f"{path}: frames must be 3-D, got {frames.shape}")
    if channels is not None:
        if frames.shape[2] < channels:
            raise ManifestError(f"{path}: {frames.shape[2]} channels, need {channels}")
        frames = frames[:, :, :channels]
    return np.ascontiguousarray(frames)


# -- manifest -----------------------------------------------------------

def _require(doc: dict, key: str, kind, where: str):
    if key not in doc:
        raise ManifestError(f"{where}: missing field {key!r}")
    value = doc[key]
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ManifestError(f"{where}.{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def manifest_from_dict(doc: dict, root=".", check_files: bool = True, where: str = "manifest") -> DatasetManifest:
    if not isinstance(doc, dict):
        raise ManifestError(f"{where}: top level must be an object")
    joints = _require(doc, "joint_count", int, where)
    channels = _require(doc, "channels", int, where)
    labels = _require(doc, "labels", list, where)
    raw_samples = _require(doc, "samples", list, where)
    if joints < 1 or channels < 1:
        raise ManifestError(f"{where}: joint_count and channels must be positive")
    if len(set(labels)) != len(labels):
        raise ManifestError(f"{where}.labels: duplicate class names")
    vocab = set(labels)
    samples, seen = [], set()
    for i, raw in enumerate(raw_samples):
        at = f"{where}.samples[{i}]"
        if not isinstance(raw, dict):
            raise ManifestError(f"{at}: expected an object")
        s = ManifestSample(
            sample_id=_require(raw, "id", str, at),
            path=_require(raw, "path", str, at),
            label_name=_require(raw, "label", str, at),
            signer_id=_require(raw, "signer", str, at),
            frame_count=_require(raw, "frames", int, at),
        )
        if s.label_name not in vocab:
            raise ManifestError(f"{at}.label: unknown label {s.label_name!r}")
        if s.sample_id in seen:
            raise ManifestError(f"{at}.id: duplicate sample_id {s.sample_id!r}")
        seen.add(s.sample_id)
        samples.append(s)
    manifest = DatasetManifest(samples, list(labels), joints, channels, Path(root))
    if check_files:
        missing = [str(manifest.resolve(s)) for s in samples if not manifest.resolve(s).is_file()]
        if missing:
            raise ManifestError(f"{where}: missing keypoint files: {', '.join(missing)}")
    return manifest


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return manifest_from_dict(doc, root=path.parent, check_files=check_files, where=str(path))


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1) + "\n", encoding="utf-8")


# -- splits -------------------------------------------------------------

def load_split(path) -> SplitAssignment:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    where = str(path)
    parts = {k: _require(doc, k, list, where) for k in ("train", "val", "test")}
    seed = doc.get("seed", 0)
    return SplitAssignment(parts["train"], parts["val"], parts["test"], int(seed))


def write_split(split: SplitAssignment, path) -> None:
    Path(path).write_text(json.dumps(split.to_dict(), indent=1) + "\n", encoding="utf-8")


def validate_split(split: SplitAssignment, manifest: DatasetManifest, user_independent: bool = True) -> None:
    ids = split.train + split.val + split.test
    if len(ids) != len(set(ids)):
        raise SplitError("a sample is assigned to more than one split part")
    unknown = [i for i in ids if i not in manifest._by_id]
    if unknown:
        raise SplitError(f"split references samples missing from the manifest: {unknown[:5]}")
    if user_independent:
        signers = [{manifest.sample(i).signer_id for i in part} for part in (split.train, split.val, split.test)]
        if signers[0] & signers[1] or signers[0] & signers[2] or signers[1] & signers[2]:
            raise SplitError("signer sets of the split parts overlap")


def _cut_points(counts: list[int], ratios: tuple[float, float, float]) -> tuple[int, int]:
    """Contiguous cut indices over signer sample counts closest to the cumulative ratios."""
    n = len(counts)
    total = float(sum(counts))
    cum = np.concatenate([[0.0], np.cumsum(counts)]) / total
    t1 = ratios[0] / sum(ratios)
    t2 = (ratios[0] + ratios[1]) / sum(ratios)
    # each part keeps at least one signer: 1 <= a < b <= n-1
    a = min(range(1, n - 1), key=lambda i: (abs(cum[i] - t1), i))
    b = min(range(a + 1, n), key=lambda i: (abs(cum[i] - t2), i))
    return a, b


def make_split(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    max_attempts: int = 256,
) -> SplitAssignment:
    """Partition signers (not samples) into train/val/test.

    Signers are shuffled by ``seed`` and cut so the sample shares approximate
    ``ratios``.  If a class ends up missing from train or test, further
    seeded shuffles are tried before giving up.
    """
    by_signer: dict[str, list[ManifestSample]] = {}
    for s in manifest.samples:
        by_signer.setdefault(s.signer_id, []).append(s)
    signers = sorted(by_signer)
    if len(signers) < 3:
        raise SplitError(f"need at least 3 distinct signers, found {len(signers)}")
    all_labels = {s.label_name for s in manifest.samples}

    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        order = [signers[i] for i in rng.permutation(len(signers))]
        a, b = _cut_points([len(by_signer[g]) for g in order], ratios)
        groups = (order[:a], order[a:b], order[b:])
        parts = [[s for g in grp for s in by_signer[g]] for grp in groups]
        if {s.label_name for s in parts[0]} == all_labels and {s.label_name for s in parts[2]} == all_labels:
            if attempt:
                log.info("make_split: class coverage satisfied on attempt %d", attempt)
            return SplitAssignment(*([s.sample_id for s in p] for p in parts), seed=seed)
    raise SplitError(
        f"no signer partition in {max_attempts} attempts puts every class in both train and test"
    )


# -- WLASL adapter --------------------------------------------------------

def load_wlasl_split(
    json_path, keypoint_dir, subset: int = 100, channels: int = 2
) -> tuple[DatasetManifest, SplitAssignment]:
    """Build a manifest and the official split from a WLASL-style gloss index.

    The ``subset`` most frequent glosses (by instance count in the index) are
    kept.  Instances without a keypoint file are skipped with a warning.
    Only the first ``channels`` coordinate channels are used downstream.
    """
    if subset not in (100, 300, 1000, 2000):
        raise ValueError(f"subset must be one of 100/300/1000/2000, got {subset}")
    json_path, keypoint_dir = Path(json_path), Path(keypoint_dir)
    try:
        entries = json.loads(json_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{json_path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(entries, list):
        raise ManifestError(f"{json_path}: expected a list of gloss entries")
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "gloss" not in e or not isinstance(e.get("instances"), list):
            raise ManifestError(f"{json_path}[{i}]: entry needs 'gloss' and an 'instances' list")

    ranked = sorted(range(len(entries)), key=lambda i: -len(entries[i]["instances"]))
    kept = [entries[i] for i in ranked[:subset]]
    vocab = [e["gloss"] for e in kept]

    samples, parts = [], {"train": [], "val": [], "test": []}
    missing, joints = [], None
    for e in kept:
        for j, inst in enumerate(e["instances"]):
            vid = str(inst.get("video_id", ""))
            part = inst.get("split")
            if not vid or part not in parts:
                raise ManifestError(f"{json_path}: gloss {e['gloss']!r} instance {j} lacks video_id/split")
            kp = keypoint_dir / f"{vid}{KEYPOINT_SUFFIX}"
            if not kp.is_file():
                missing.append(str(kp))
                continue
            frames = read_keypoints(kp)
            if frames.shape[2] < channels:
                raise ManifestError(f"{kp}: {frames.shape[2]} channels, need {channels}")
            if joints is None:
                joints = frames.shape[1]
            elif frames.shape[1] != joints:
                raise ManifestError(f"{kp}: {frames.shape[1]} joints, expected {joints}")
            signer = str(inst.get("signer_id", "unknown"))
            samples.append(ManifestSample(vid, str(kp.resolve()), e["gloss"], signer, int(frames.shape[0])))
            parts[part].append(vid)
    if missing:
        log.warning("load_wlasl_split: %d instances skipped, keypoint files absent: %s",
                    len(missing), ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else ""))
    if not samples:
        raise ManifestError(f"{keypoint_dir}: no keypoint files found for the selected glosses")
    if len({s.sample_id for s in samples}) != len(samples):
        dupes = [k for k, n in Counter(s.sample_id for s in samples).items() if n > 1]
        raise ManifestError(f"{json_path}: duplicate video_id {dupes[:5]}")
    manifest = DatasetManifest(samples, vocab, joints, channels, keypoint_dir)
    return manifest, SplitAssignment(parts["train"], parts["val"], parts["test"], seed=0)


# -- preprocessing ----------------------------------------------------------

def resample_indices(length: int, t_target: int) -> np.ndarray:
    if t_target < 1:
        raise ValueError(f"t_target must be >= 1, got {t_target}")
    if t_target == 1:
        return np.array([length // 2])
    i = np.arange(t_target)
    # round-half-up of i*(length-1)/(t_target-1), in exact integer arithmetic
    return (2 * i * (length - 1) + (t_target - 1)) // (2 * (t_target - 1))


def resample_sequence(seq: SkeletonSequence, t_target: int) -> SkeletonSequence:
    if seq.num_frames == t_target:
        return seq
    return seq.with_frames(seq.frames[resample_indices(seq.num_frames, t_target)])


def normalize_frames(frames: np.ndarray, scheme: str = "center_scale") -> np.ndarray:
    if scheme != "center_scale":
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    f64 = frames.astype(np.float64)
    centered = f64 - f64[0].mean(axis=0)
    extent = f64.max(axis=1) - f64.min(axis=1)  # [T, C] per-frame bounding box
    diag = float(np.sqrt((extent**2).sum(axis=-1)).max())
    scale = diag if diag > 1e-12 else 1.0
    return (centered / scale).astype(frames.dtype)


def normalize_sequence(seq: SkeletonSequence, scheme: str = "center_scale") -> SkeletonSequence:
    return seq.with_frames(normalize_frames(seq.frames, scheme))


def preprocess(seq: SkeletonSequence, t_len: int) -> SkeletonSequence:
    """Normalize then resample to a fixed length, the model's input contract."""
    return resample_sequence(normalize_sequence(seq), t_len)
