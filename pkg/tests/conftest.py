import numpy as np
import pytest
import torch

from clfusion.data import generate_dataset, make_batch, synth_world
from clfusion.network import PriorConfig, PriorNetwork
from clfusion.schedule import build_schedule


def tiny_config(**kw):
    base = dict(latent_dim=8, embed_dim=12, depth=2, width=16, heads=2, num_timesteps=1000)
    base.update(kw)
    return PriorConfig(**base)


def tiny_net(seed=0, dtype=torch.float64, **kw):
    net = PriorNetwork(tiny_config(**kw), seed=seed).to(dtype)
    # A non-trivial head so gradients reach every block at comparable scale.
    with torch.no_grad():
        g = torch.Generator().manual_seed(seed + 100)
        net.head.weight.normal_(0, 0.3, generator=g)
    return net


@pytest.fixture(scope="session")
def sched():
    return build_schedule("linear", 1000, 1e-4, 0.02)


@pytest.fixture(scope="session")
def small_world():
    return synth_world(0, 8, 12)


@pytest.fixture(scope="session")
def small_dataset(small_world):
    return generate_dataset(small_world, 32, 4, seed=1)


@pytest.fixture
def small_batch(small_dataset, sched):
    return make_batch(small_dataset, 4, 3, sched, np.random.default_rng(0))
