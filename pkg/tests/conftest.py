import numpy as np
import pytest

from catsynth.dpmpm import DpmpmHyperparams, generate_replicates, run_chain
from catsynth.simulate import simulate, small_simspec

# short chain that mixes well on the three-class simulated model
FIT_HYPER = DpmpmHyperparams(K=20, nrun=1500, burn=500, thin=10, m=5, seed=221)


def _fit(n, seed):
    data, z = simulate(small_simspec(n=n, seed=seed))
    draws = run_chain(data, FIT_HYPER)
    reps = generate_replicates(data, FIT_HYPER, data.codebook.sensitive_names, draws)
    return data, z, draws, reps


@pytest.fixture(scope="session")
def simulated_fit():
    """n = 2000 confidential data, its draws and 5 replicates."""
    return _fit(2000, 11)


@pytest.fixture(scope="session")
def simulated_fit_5000():
    return _fit(5000, 12)


@pytest.fixture
def rng():
    return np.random.default_rng(20240)
