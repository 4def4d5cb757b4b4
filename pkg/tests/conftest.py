import numpy as np
import pytest

from embattack.asr import mock_build
from embattack.campaign import read_corpus
from embattack.tts import ToyTTS


@pytest.fixture(scope="session")
def tts():
    return ToyTTS()


@pytest.fixture(scope="session")
def corpus12():
    return read_corpus("builtin:corpus12")[0]


@pytest.fixture(scope="session")
def mock_asr(tts, corpus12):
    return mock_build(corpus12, tts)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
