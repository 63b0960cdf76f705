import os

# must precede the first numpy import: many small GEMMs run faster single-threaded
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from hiermil.data import SynthConfig, generate_synthetic_dataset, split_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """16 volumes at the default geometry; enough for I/O and sampling tests."""
    out = tmp_path_factory.mktemp("smallds")
    cfg = SynthConfig(n_volumes=16, dims=(64, 64, 24), seed=7)
    manifest = generate_synthetic_dataset(cfg, out)
    return split_dataset(manifest, seed=7), cfg


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """Smallest trainable dataset: quick end-to-end loop checks."""
    out = tmp_path_factory.mktemp("tinyds")
    cfg = SynthConfig(n_volumes=12, dims=(64, 64, 24), seed=19)
    manifest = generate_synthetic_dataset(cfg, out)
    return split_dataset(manifest, ratios=(0.5, 0.25, 0.25), seed=19)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
