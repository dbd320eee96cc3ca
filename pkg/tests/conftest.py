"""Shared fixtures: synthetic datasets and trained models are expensive, so
they are session-scoped and only built when a test asks for them."""

import time

import numpy as np
import pytest

from sagefm import synth, training
from sagefm.data import load_dataset, split_by_sample

# pinned acceptance training setup: desk-scale widths, <1 min on a laptop
ACCEPT_WIDTHS = (128, 96, 128)
ACCEPT_EPOCHS = 40
ACCEPT_PATIENCE = 12


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_default")
    cfg = synth.default_preset(seed=7)
    manifest = synth.generate(cfg, root)
    records, vocab = load_dataset(root)
    split = split_by_sample(list(records), seed=0)
    return {"root": root, "config": cfg, "manifest": manifest,
            "records": records, "vocab": vocab, "split": split}


@pytest.fixture(scope="session")
def trained(default_dataset):
    d = default_dataset
    config = training.TrainConfig(
        max_epochs=ACCEPT_EPOCHS, patience=ACCEPT_PATIENCE,
        hidden_widths=ACCEPT_WIDTHS, batch_size=32, seed=0)
    tic = time.perf_counter()
    checkpoint, history = training.train(d["records"], d["split"],
                                         d["vocab"], config)
    seconds = time.perf_counter() - tic
    return {"checkpoint": checkpoint, "history": history, "config": config,
            "seconds": seconds}


@pytest.fixture(scope="session")
def high_noise_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_high_noise")
    cfg = synth.high_noise_preset(seed=7)
    manifest = synth.generate(cfg, root)
    records, vocab = load_dataset(root)
    split = split_by_sample(list(records), seed=0)
    return {"root": root, "config": cfg, "manifest": manifest,
            "records": records, "vocab": vocab, "split": split}


@pytest.fixture(scope="session")
def high_noise_trained(high_noise_dataset):
    d = high_noise_dataset
    config = training.TrainConfig(
        max_epochs=25, patience=10, hidden_widths=ACCEPT_WIDTHS,
        batch_size=32, seed=0)
    checkpoint, history = training.train(d["records"], d["split"],
                                         d["vocab"], config)
    return {"checkpoint": checkpoint, "history": history, "config": config}


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_tiny")
    cfg = synth.tiny_preset(seed=3)
    manifest = synth.generate(cfg, root)
    records, vocab = load_dataset(root)
    split = split_by_sample(list(records), ratios=(0.5, 0.25, 0.25), seed=0)
    return {"root": root, "config": cfg, "manifest": manifest,
            "records": records, "vocab": vocab, "split": split}


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
