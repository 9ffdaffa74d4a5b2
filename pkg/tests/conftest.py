import os

# single-threaded BLAS keeps reductions in a fixed order, so reruns are bitwise equal
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from smoe_vae.model import ModelConfig

# small enough for finite differences, still exercises every layer type
TINY = dict(latent_dim=4, image_side=8, enc_channels=(3, 4), enc_hidden=8, dec_hidden=6, dec_channels=(3, 2),
            gate_hidden=(5, 4))


def tiny_config(num_experts=3) -> ModelConfig:
    return ModelConfig(num_experts=num_experts, **TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def jitter_biases(model, seed=0, scale=0.05, weight_gain=np.sqrt(6.0)):
    """Move a fresh model to a generic point for finite differences.

    Biases leave zero so no ReLU sits exactly on its kink, and weights are
    scaled up to plain-ReLU Kaiming size so gradients are not so small that
    cancellation noise dominates the relative error.
    """
    rng = np.random.default_rng(seed)
    for p in model.params():
        if p.name.endswith("bias"):
            p.value += rng.normal(scale=scale, size=p.value.shape).astype(p.value.dtype)
        else:
            p.value *= p.value.dtype.type(weight_gain)
    return model


# full 28x28 images with narrow layers: a few epochs train in about a second
SMALL = dict(latent_dim=4, enc_channels=(2, 4), enc_hidden=16, dec_hidden=8, dec_channels=(3, 2), gate_hidden=(8, 4))


def small_config(num_experts=2) -> ModelConfig:
    return ModelConfig(num_experts=num_experts, **SMALL)


@pytest.fixture(scope="session")
def small_data():
    from smoe_vae.data import SyntheticSpec, build_dataset, synthetic_sources
    return build_dataset(synthetic_sources(SyntheticSpec(samples_per_class=40, seed=3)), 40, seed=0)


# acceptance verdicts, echoed after the run so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
