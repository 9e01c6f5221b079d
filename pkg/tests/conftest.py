import hashlib
import json
import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)

from mofusion import __version__  # noqa: E402
from mofusion.evaluation import EvalEncoders, train_eval_encoders  # noqa: E402
from mofusion.skeleton import default_skeleton  # noqa: E402
from mofusion.synth import DEFAULT_CLASSES, SynthConfig, default_vocabulary, synth_dataset

from .helpers import DESK_HELDOUT, DESK_TRAIN, DESK_TRAIN_CONFIG  # noqa: E402
from mofusion.training import init_checkpoint, load_checkpoint, save_checkpoint, train  # noqa: E402

def _key(*parts) -> str:
    blob = json.dumps([__version__, *parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="session")
def desk_train():
    return synth_dataset(DESK_TRAIN)


@pytest.fixture(scope="session")
def desk_heldout():
    return synth_dataset(DESK_HELDOUT)


@pytest.fixture(scope="session")
def desk_checkpoint_dir(request, desk_train, vocab, skeleton):
    """Trained desk model, cached across sessions under the pytest cache (``--cache-clear`` retrains)."""
    root = request.config.cache.mkdir("mofusion-desk")
    path = root / _key(DESK_TRAIN, DESK_TRAIN_CONFIG.to_json())
    if not (path / "config.json").is_file():
        ckpt, data = init_checkpoint(desk_train, vocab, desk_train[0].spec, skeleton, DESK_TRAIN_CONFIG)
        train(ckpt, data)
        save_checkpoint(ckpt, path)
    return path


@pytest.fixture(scope="session")
def desk_ckpt(desk_checkpoint_dir):
    return load_checkpoint(desk_checkpoint_dir, view="ema")


@pytest.fixture(scope="session")
def untrained_ckpt(desk_train, vocab, skeleton):
    ckpt, _ = init_checkpoint(desk_train, vocab, desk_train[0].spec, skeleton, DESK_TRAIN_CONFIG)
    ckpt.model.eval()
    return ckpt


@pytest.fixture(scope="session")
def desk_encoders(request, desk_train, vocab):
    root = request.config.cache.mkdir("mofusion-encoders")
    path = root / _key(DESK_TRAIN, "encoders", 400)
    if not (path / "encoders.json").is_file():
        train_eval_encoders(desk_train, vocab, seed=0, iterations=400).save(path)
    return EvalEncoders.load(path)


@pytest.fixture(scope="session")
def tiny_setup(vocab, skeleton):
    """Small model plus a 16-motion corpus for fast loop-level tests."""
    data = synth_dataset(SynthConfig(DEFAULT_CLASSES, samples_per_class=4, length_range=(24, 40), seed=3))
    return data


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from .helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
