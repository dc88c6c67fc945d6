import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("pcroad", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("pcroad")


@pytest.fixture(scope="session")
def desk(request):
    import desk as desk_module
    return desk_module.load_or_build(request.config.cache.mkdir("pcroad-desk"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
