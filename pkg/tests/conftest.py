import time

import numpy as np
import pytest
import torch

from mdsnoise import gan
from mdsnoise.extract import harvest
from mdsnoise.sim import TEMPLATES, compose_recording
from mdsnoise.spectrogram import ACTIVITIES, ActivityLabel

torch.set_num_threads(1)

# Desk-scale generator used by the slower tests: 24 six-activity recordings,
# three epochs at batch 32 and lr 2e-4 (about three minutes on one core).
DESK_GAN = gan.GanConfig(batch_size=32, learning_rate=2e-4, epochs=3, seed=0)


def six_activity_recording(seed, rid=None, idle_gap=2.5, noise_params=None):
    acts = [(TEMPLATES[n], ActivityLabel.from_name(n)) for n in ACTIVITIES]
    return compose_recording(acts, idle_gap, noise_params, seed=seed, rid=rid or f"r{seed}")


@pytest.fixture(scope="session")
def gan_training_patches():
    recs = [six_activity_recording(100 + i, f"r{i}") for i in range(24)]
    return harvest(recs)


@pytest.fixture(scope="session")
def desk_gan_run(gan_training_patches):
    """The desk generator and its training time in seconds."""
    t0 = time.perf_counter()
    generator = gan.train(gan_training_patches, DESK_GAN)
    return generator, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_generator(desk_gan_run):
    return desk_gan_run[0]


@pytest.fixture(scope="session")
def untrained_generator():
    rng = np.random.default_rng(0)
    patches = [rng.normal(0.2, 0.05, (100, 28)) for _ in range(4)]
    return gan.train(patches, gan.GanConfig(epochs=0, batch_size=4))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
