import numpy as np
import pytest

from skelformer import tensor as tk
from skelformer.synth import generate_corpus

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def f64():
    with tk.precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """3 classes x 6 samples, 3 signers, 8 frames, 5 joints."""
    root = tmp_path_factory.mktemp("small_corpus")
    generate_corpus(root, classes=3, samples_per_class=6, signers=3, frames=8, joints=5, seed=3)
    return root


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def overfit_run(small_corpus, tmp_path_factory):
    """A tiny model trained to memorize the small corpus' train part."""
    from skelformer.model import ModelConfig
    from skelformer.skeleton_io import load_manifest, make_split
    from skelformer.train import TrainConfig, fit

    out = tmp_path_factory.mktemp("overfit_run")
    manifest = load_manifest(small_corpus / "manifest.json")
    split = make_split(manifest, seed=0)
    model_cfg = ModelConfig(t_len=8, joints=5, num_classes=3, c_emb=16, heads=2, blocks=1, rpe_clip=4)
    train_cfg = TrainConfig(epochs=40, warmup_epochs=2, base_lr=0.01, batch_size=4, seed=0)
    fit(manifest, split, model_cfg, train_cfg, None, out)
    return out, manifest, split, model_cfg
