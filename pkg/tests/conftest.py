import numpy as np
import pytest

from transfusion import model as M


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return M.tiny_config()


def tiny_inputs(cfg, seed=0):
    r = np.random.default_rng(seed)
    xw = r.normal(size=(cfg.l_w, cfg.d_w))
    xv = r.normal(size=(cfg.l_v, cfg.d_v))
    return xw, xv
