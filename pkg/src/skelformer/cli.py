"""Command line: ``train``, ``eval``, ``predict`` and ``synth``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration/input.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as mdl
from .augment import AugmentConfig
from .config import ConfigError, from_dict, to_dict
from .evaluation import evaluate, predict_logits, ranked_classes
from .skeleton_io import (
    ManifestError,
    SkeletonSequence,
    SplitError,
    load_manifest,
    load_split,
    load_wlasl_split,
    make_split,
    preprocess,
    read_keypoints,
    write_manifest,
    write_split,
)
from .synth import generate_corpus
from .tensor import CodecError, ShapeError, softmax, Tensor, no_grad
from .train import CheckpointError, TrainConfig, fit, load_checkpoint, read_sidecar

log = logging.getLogger("skelformer")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
INPUT_ERRORS = (ConfigError, ManifestError, SplitError, CheckpointError, ShapeError, CodecError)


@dataclass(frozen=True)
class DataConfig:
    manifest_path: str | None = None
    split_path: str | None = None
    split_seed: int | None = None
    t_len: int | None = None
    wlasl_json: str | None = None
    keypoint_dir: str | None = None
    wlasl_subset: int = 100

    def __post_init__(self):
        if self.wlasl_json is not None:
            if self.keypoint_dir is None:
                raise ConfigError("keypoint_dir", "required together with wlasl_json")
            if self.manifest_path is not None:
                raise ConfigError("manifest_path", "set either manifest_path or wlasl_json, not both")
            return
        if self.manifest_path is None:
            raise ConfigError("manifest_path", "required (or give wlasl_json + keypoint_dir)")
        if (self.split_path is None) == (self.split_seed is None):
            raise ConfigError("split_path", "set exactly one of split_path / split_seed")
        if self.t_len is not None and self.t_len < 1:
            raise ConfigError("t_len", f"must be >= 1, got {self.t_len}")


@dataclass(frozen=True)
class RunConfig:
    model: mdl.ModelConfig
    train: TrainConfig
    augment: AugmentConfig
    data: DataConfig
    output_dir: str

    def to_dict(self) -> dict:
        return {
            "model": to_dict(self.model),
            "train": to_dict(self.train),
            "augment": to_dict(self.augment),
            "data": to_dict(self.data),
            "output_dir": self.output_dir,
        }


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None:
        return None
    q = Path(p)
    return str(q if q.is_absolute() else base / q)


def load_run_config(path):
    """Parse a run config; returns (RunConfig, manifest, split).

    The model section may omit ``joints``, ``in_channels``, ``num_classes``
    and ``t_len``; they are filled from the data.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}", exc.msg) from None
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be an object")
    unknown = sorted(set(doc) - {"model", "train", "augment", "data", "output_dir"})
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    if not isinstance(doc.get("output_dir"), str):
        raise ConfigError("output_dir", "required string")
    base = path.parent
    train_cfg = from_dict(TrainConfig, doc.get("train", {}), "train")
    augment_cfg = from_dict(AugmentConfig, doc.get("augment", {}), "augment")
    data = from_dict(DataConfig, doc.get("data", {}), "data")
    data = dataclasses.replace(
        data,
        manifest_path=_resolve(base, data.manifest_path),
        split_path=_resolve(base, data.split_path),
        wlasl_json=_resolve(base, data.wlasl_json),
        keypoint_dir=_resolve(base, data.keypoint_dir),
    )

    if not isinstance(doc.get("model", {}), dict):
        raise ConfigError("model", "expected an object")
    model_doc = dict(doc.get("model", {}))
    if data.t_len is not None:
        if "t_len" in model_doc and model_doc["t_len"] != data.t_len:
            raise ConfigError("data.t_len", f"{data.t_len} disagrees with model.t_len {model_doc['t_len']}")
        model_doc["t_len"] = data.t_len
    if "t_len" not in model_doc:
        raise ConfigError("data.t_len", "required (fixed sequence length fed to the model)")

    # validate what can be validated before touching the data
    probe = {"joints": 1, "num_classes": 2, **model_doc}
    from_dict(mdl.ModelConfig, probe, "model")

    if data.wlasl_json is not None:
        manifest, split = load_wlasl_split(data.wlasl_json, data.keypoint_dir, data.wlasl_subset,
                                           channels=model_doc.get("in_channels", 2))
    else:
        if not Path(data.manifest_path).is_file():
            raise ConfigError("data.manifest_path", f"file not found: {data.manifest_path}")
        manifest = load_manifest(data.manifest_path)
        if data.split_path is not None:
            if not Path(data.split_path).is_file():
                raise ConfigError("data.split_path", f"file not found: {data.split_path}")
            split = load_split(data.split_path)
        else:
            split = make_split(manifest, seed=data.split_seed)
    model_doc.setdefault("joints", manifest.joint_count)
    model_doc.setdefault("in_channels", manifest.channels)
    model_doc.setdefault("num_classes", len(manifest.label_vocab))
    model_cfg = from_dict(mdl.ModelConfig, model_doc, "model")
    output_dir = _resolve(base, doc["output_dir"])
    return RunConfig(model_cfg, train_cfg, augment_cfg, data, output_dir), manifest, split


# -- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    try:
        run, manifest, split = load_run_config(args.config)
    except INPUT_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(run.to_dict(), indent=1) + "\n", encoding="utf-8")
    write_split(split, out / "split.json")
    if run.data.wlasl_json is not None:
        write_manifest(manifest, out / "manifest.json")
    try:
        report = fit(manifest, split, run.model, run.train, run.augment, out,
                     user_independent=run.data.wlasl_json is None)
    except INPUT_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported, mapped to exit 1
        log.exception("training failed")
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"epochs": report.epochs_run, "steps": report.steps,
                      "best_val_top1": report.best_val_top1, "best_epoch": report.best_epoch}))
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        cfg, _ = read_sidecar(args.checkpoint)
        state = load_checkpoint(args.checkpoint, cfg)
        manifest = load_manifest(args.manifest)
        split = load_split(args.split)
        report = evaluate(state.params, cfg, manifest, split.part(args.part))
    except INPUT_ERRORS + (FileNotFoundError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "eval_report.json")
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        cfg, sidecar = read_sidecar(args.checkpoint)
        state = load_checkpoint(args.checkpoint, cfg)
        frames = read_keypoints(args.input, channels=cfg.in_channels)
        if frames.shape[1] != cfg.joints:
            raise ShapeError(f"{args.input}: {frames.shape[1]} joints, model expects {cfg.joints}")
    except INPUT_ERRORS + (FileNotFoundError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.topk < 1:
        print("error: --topk must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    labels = sidecar.get("labels") or [str(i) for i in range(cfg.num_classes)]
    seq = preprocess(SkeletonSequence(frames, 0), cfg.t_len)
    logits = predict_logits(state.params, cfg, seq.frames[None].astype(state.params["head.bias"].dtype))
    with no_grad():
        probs = softmax(Tensor(logits, dtype=np.float64), axis=-1).data[0]
    order = ranked_classes(logits)[0][: min(args.topk, cfg.num_classes)]
    print(json.dumps({"predictions": [{"label": labels[c], "probability": float(probs[c])} for c in order]}))
    return EXIT_OK


def cmd_synth(args) -> int:
    if min(args.classes, args.samples_per_class, args.frames, args.joints) < 1 or args.signers < 3:
        print("error: counts must be >= 1 and --signers >= 3", file=sys.stderr)
        return EXIT_USAGE
    try:
        manifest = generate_corpus(args.out, args.classes, args.samples_per_class, args.signers,
                                   args.frames, args.joints, args.seed)
    except OSError as exc:
        print(f"error: cannot write corpus: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "samples": len(manifest.samples)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skelformer", description="Train, evaluate and query the skeleton-sequence classifier."
    )
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bitwise-reproducible runs")
    parser.add_argument("--threads", type=int, default=None, metavar="N", help="BLAS thread count")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True, metavar="PATH", help="run config JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split part")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--split", required=True, metavar="PATH")
    p.add_argument("--part", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", metavar="DIR", default=None,
                   help="directory for eval_report.json (default: the checkpoint's directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="rank classes for one keypoint file")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--input", required=True, metavar="SAMPLE_FILE")
    p.add_argument("--topk", type=int, default=5, metavar="N")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--classes", type=int, default=5, metavar="K")
    p.add_argument("--samples-per-class", type=int, default=20, metavar="M")
    p.add_argument("--signers", type=int, default=10, metavar="S")
    p.add_argument("--frames", type=int, default=16, metavar="T")
    p.add_argument("--joints", type=int, default=11, metavar="V")
    p.add_argument("--seed", type=int, default=0, metavar="N")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limit = 1 if args.deterministic else args.threads
    ctx = contextlib.nullcontext()
    if limit is not None:
        from threadpoolctl import threadpool_limits

        ctx = threadpool_limits(limits=limit)
    with ctx:
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
