import numpy as np
import pytest

from nmtscale.batching import make_token_budget_batches
from nmtscale.synthetic import calibrated_corpus, measure, profile_shapes, toy_translation_corpus
from nmtscale.timing import fit_timing_model


@pytest.fixture(scope="session")
def calibrated():
    """(corpus, timing model) for the default calibrated corpus."""
    corpus = calibrated_corpus(40000, seed=0)
    shapes = list(profile_shapes(make_token_budget_batches(corpus, 3500)))
    return corpus, fit_timing_model(measure(shapes, seed=1))


@pytest.fixture(scope="session")
def toy_corpus():
    return toy_translation_corpus(400, vocab_size=64, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
