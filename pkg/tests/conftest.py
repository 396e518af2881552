import time

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, print_blob=True)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_spec():
    """Small network for fast functional tests: 4 classes, 32px input."""
    from ccnn.architecture import default_network_spec

    return default_network_spec(num_classes=4, scale=8, input_size=32)


@pytest.fixture(scope="session")
def tiny_trained():
    """A small trained network plus its datasets, shared across tests.

    Trained with the separate strategy for a few epochs; accurate enough
    to exercise cascade statistics, not meant to be near-perfect.
    """
    from ccnn.architecture import build_network, default_network_spec
    from ccnn.data import stratified_split, synth_glyphs
    from ccnn.training import TrainConfig, train

    spec = default_network_spec(num_classes=4, scale=8, input_size=32)
    net = build_network(spec, seed=7)
    samples = synth_glyphs(4, 30, noise=0.03, seed=11, size=32)
    train_set, eval_set = stratified_split(samples, 0.25, seed=3)
    config = TrainConfig(
        batch_size=32, initial_lr=0.05, max_epochs=6, seed=5, weight_decay=1e-5
    )
    train(net, train_set, config, "separate", eval_data=eval_set)
    return {"network": net, "train": train_set, "eval": eval_set, "config": config}


@pytest.fixture(scope="session")
def desk():
    """The full desk-scale run: quarter-width network, 10x200 glyphs.

    Built once per session; the wall-clock time of the training call is
    recorded so the acceptance suite can assert its budget.
    """
    from ccnn.architecture import build_network, default_network_spec
    from ccnn.data import stratified_split, synth_glyphs
    from ccnn.training import TrainConfig, train

    samples = synth_glyphs(10, 200, seed=0)
    train_set, eval_set = stratified_split(samples, 0.2, seed=0)
    spec = default_network_spec(num_classes=10, scale=4)
    net = build_network(spec, seed=0)
    config = TrainConfig(max_epochs=30, seed=0)
    start = time.perf_counter()
    _, metrics = train(net, train_set, config, "separate", eval_data=eval_set)
    elapsed = time.perf_counter() - start
    return {
        "network": net,
        "spec": spec,
        "train": train_set,
        "eval": eval_set,
        "metrics": metrics,
        "config": config,
        "train_seconds": elapsed,
    }
