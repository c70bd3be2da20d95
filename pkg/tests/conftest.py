import os

import numpy as np
import pytest

from morphgrasp.grasp_data import Cache, Manifest, prepare_caches
from morphgrasp.model import ModelConfig
from morphgrasp.toy import TOY_MODEL, TOY_TRAIN, make_toy_dataset, write_toy_dataset
from morphgrasp.training import TrainConfig, load_samples, train

FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")
TOY_TRAIN_GRIPPERS = ("toy0", "toy1")
TOY_HOLDOUT = ("toy2", "toy3", "toy4")


def fixture_path(*parts):
    return os.path.join(FIXTURES, *parts)


def toy_model_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TOY_MODEL, "freeze_policy": "scratch", **overrides})


@pytest.fixture(scope="session")
def toy_dataset():
    return make_toy_dataset(0)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory, toy_dataset):
    """Toy dataset on disk with caches prepared for the toy model sizes."""
    root = str(tmp_path_factory.mktemp("toy"))
    manifest_path = write_toy_dataset(toy_dataset, root)
    manifest = Manifest.load(manifest_path)
    cfg = toy_model_config()
    prepare_caches(manifest, Cache(os.path.join(root, "cache")), cfg.S_O, cfg.S_M, cfg.knn_k,
                   ("final", "joints_only", "links_only"))
    return root


@pytest.fixture(scope="session")
def toy_samples(toy_root):
    """The 8 overfitting samples: two grippers times four objects."""
    manifest = Manifest.load(os.path.join(toy_root, "manifest.json"))
    return load_samples(manifest, Cache(os.path.join(toy_root, "cache")), toy_model_config(),
                        holdout_grippers=TOY_HOLDOUT)


@pytest.fixture(scope="session")
def overfit_run(toy_samples):
    import time

    start = time.perf_counter()
    result = train(toy_samples, toy_model_config(), TrainConfig(**TOY_TRAIN, seed=0))
    result.elapsed = time.perf_counter() - start
    return result


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
