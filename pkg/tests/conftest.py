import numpy as np
import pytest
import torch

from anyvar.dataset import TimeSeriesRecord, VariateSeries
from anyvar.model import ModelConfig

# Reproducibility contract is single-threaded; tiny matmuls are also faster
# without thread fan-out.
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, patch_size=4,
                       n_mixture_components=2)


def make_record(values_per_variate, record_id="rec"):
    variates = [
        VariateSeries(name=f"v{j}", values=np.asarray(vals, dtype=np.float64))
        for j, vals in enumerate(values_per_variate)
    ]
    return TimeSeriesRecord(id=record_id, variates=variates)


@pytest.fixture
def record_factory():
    return make_record
