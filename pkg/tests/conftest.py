from __future__ import annotations

import numpy as np
import pytest
import torch

from osmosis.denoiser import GaussianOracleDenoiser
from osmosis.diffusion import make_schedule

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def sched_small():
    return make_schedule(40, 1e-3, 5e-2)


@pytest.fixture(scope="session")
def sched_paper():
    return make_schedule(1000, 1e-4, 2e-2)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def torch_rng():
    return torch.Generator().manual_seed(1234)


@pytest.fixture()
def oracle(sched_small):
    mu = torch.full((4, 8, 8), 0.3)
    return GaussianOracleDenoiser(mu, 0.04, sched_small)
