import numpy as np
import pytest
import torch

from nimos.config import load_config


@pytest.fixture(autouse=True)
def _single_thread_torch():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_config(tmp_path):
    """Config scaled for unit tests: short features, few epochs."""
    cfg = load_config(overrides={
        "clean_dir": str(tmp_path / "clean"),
        "small_manifest": str(tmp_path / "small" / "manifest.csv"),
        "work_dir": str(tmp_path / "work"),
        "seed": 123,
    })
    cfg.frontend.t_fixed = 16
    cfg.train.autoencoder.epochs = 4
    cfg.train.autoencoder.batch_size = 16
    cfg.train.classifier.epochs = 4
    cfg.train.classifier.batch_size = 16
    cfg.train.dcec.batch_size = 16
    cfg.train.finetune.epochs = 3
    cfg.train.finetune.batch_size = 16
    cfg.dcec.refresh_interval = 4
    cfg.dcec.max_epochs = 10
    cfg.dcec.kmeans_restarts = 3
    return cfg


def two_blob_features(n_per: int, shape=(64, 16), noise=0.15, seed=0):
    """Two well-separated classes of feature 'images' plus labels."""
    rng = np.random.default_rng(seed)
    t0 = rng.normal(size=shape)
    t1 = rng.normal(size=shape)
    x = np.concatenate([
        t0 + noise * rng.normal(size=(n_per, *shape)),
        t1 + noise * rng.normal(size=(n_per, *shape)),
    ]).astype(np.float32)
    y = np.array([0] * n_per + [1] * n_per)
    perm = rng.permutation(len(x))
    return x[perm], y[perm]
