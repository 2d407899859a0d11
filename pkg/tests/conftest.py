import numpy as np
import pytest

from amfstgcn.graph import ring_graph
from amfstgcn.model import ModelConfig, init_params


def tiny_config(**kw) -> ModelConfig:
    """The gradient-check configuration: 6-node ring, T=6, M=3, two kernels."""
    base = dict(n_nodes=6, in_channels=1, t_in=6, horizon=3, kernels=((2, 2), (1, 2)),
                k_hops=3, c_out=4, embed_dim=3, n_blocks=1, se_ratio=4, fc_hidden=5)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    cfg = tiny_config()
    return cfg, init_params(cfg, seed=3), ring_graph(6).adjacency


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
