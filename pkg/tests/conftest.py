import json

import numpy as np
import pytest
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from backend.app.database import make_engine
from backend.app.devices import LaserParams, PiaParams
from backend.app.init_db import init_db
from backend.app.twinbeam import TwinBeamConfig

# amplifier and detector values of the low-gain PIA run
A_GAIN = 0.1940
B_LOSS = 0.00945


@pytest.fixture
def pia_params():
    return PiaParams(A_GAIN, B_LOSS, 1.0)


@pytest.fixture
def laser_params():
    """One-atom laser at C=12, n_s=7, full inversion, f=1, gamma=1, t*=.0115."""
    return LaserParams(12.0, 7.0, 1.0, 1.0, 1.0, 0.0115)


@pytest.fixture
def high_efficiency_beam():
    return TwinBeamConfig(kappa2=0.36, eta_d=0.8, n_outcome_max=12)


@pytest.fixture
def low_efficiency_beam():
    return TwinBeamConfig(kappa2=0.16, eta_d=0.3, n_outcome_max=12)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def random_green():
    """Random column-stochastic matrix of a given size and seed."""

    def make(dim, seed):
        values = np.random.default_rng(seed).random((dim, dim))
        return values / values.sum(axis=0)

    return make


@pytest.fixture
def registry_engine():
    engine = make_engine("sqlite://", poolclass=StaticPool)
    init_db(bind=engine)
    yield engine
    engine.dispose()


@pytest.fixture
def registry_session(registry_engine):
    return sessionmaker(bind=registry_engine, expire_on_commit=False)


@pytest.fixture
def small_pia_config():
    """Config dict for a quick PIA run: 4x4 estimated block, at most 3x3 reported."""
    return {
        "device": {"kind": "pia", "a_gain": A_GAIN, "b_loss": B_LOSS, "tau": 1.0, "dim": 20},
        "twin_beam": {"kappa": 0.6, "eta_d": 0.8, "n_outcome_max": 8},
        "homodyne": {"eta_h": 0.85, "k_max": 3, "samples_per_state": 20000, "blocks": 4, "bernoulli_margin": 4},
        "reconstruction": {"guard": 1},
        "seed": 7,
        "workers": 1,
    }


@pytest.fixture
def write_config(tmp_path):
    def write(data, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data) if not isinstance(data, str) else data)
        return path

    return write
