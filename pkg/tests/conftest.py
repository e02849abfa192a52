"""Shared fixtures: small datasets and pre-built models used across test modules."""

import numpy as np
import pytest

from pimvar import (
    MODEL_LAYER_FIXED,
    TrainConfig,
    VariabilityConfig,
    build_lenet5,
    build_tinynet,
    load_mnist,
    synthetic_dataset,
    train,
)
from pimvar.network import init_model, refresh_stats
from pimvar.quantization import calibrate_activations

MNIST_DIR = "/root/pkg/data/mnist"


@pytest.fixture(scope="session")
def synth_train():
    return synthetic_dataset(400, seed=0)


@pytest.fixture(scope="session")
def synth_test():
    return synthetic_dataset(200, seed=1)


@pytest.fixture(scope="session")
def mnist_test():
    return load_mnist(MNIST_DIR, "test")


@pytest.fixture(scope="session")
def tiny_ckpt(synth_train, synth_test):
    """A small trained quantized checkpoint (float64) for deployment tests."""
    cfg = TrainConfig(
        pipeline="qavat",
        epochs=3,
        batch_size=50,
        base_lr=0.05,
        seed=0,
        val_chips=0,
        dtype="float64",
        variability=VariabilityConfig(model=MODEL_LAYER_FIXED, sigma_w=0.3, sigma_b=0.0),
    )
    ckpt, _ = train(build_tinynet(), synth_train, synth_test, cfg)
    return ckpt


@pytest.fixture(scope="session")
def lenet_model(mnist_test):
    """Untrained but fully calibrated float64 LeNet-5: weight scales fitted by
    MMSE, activation scales calibrated on two small MNIST batches, layer stats
    refreshed.  Random weights are fine for algebraic deployment checks."""
    model = init_model(build_lenet5(), seed=11, dtype=np.float64)
    model.compute_weight_configs()
    batches = [mnist_test.images[:64], mnist_test.images[64:128]]
    model.act_configs = calibrate_activations(model, batches)
    refresh_stats(model, quantized=True)
    return model


@pytest.fixture(scope="session")
def mnist_batch(mnist_test):
    return mnist_test.images[:32].astype(np.float64)
