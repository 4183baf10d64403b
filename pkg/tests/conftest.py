import numpy as np
import pytest

from defskill.matchup import fit_em
from defskill.synth import SynthConfig, simulate_corpus


@pytest.fixture(scope="session")
def corpus30():
    return simulate_corpus(SynthConfig(n_possessions=30, seed=3))


@pytest.fixture(scope="session")
def fitted30(corpus30):
    poss, _ = corpus30
    return fit_em(poss)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
