"""Shared fixtures: a small generated corpus and its Phase I artifacts,
trained once per session so individual tests stay fast."""

import pytest

from seje.corpus import GeneratorSpec, generate_synthetic_corpus, split
from seje.image_sem import ClassifierConfig
from seje.pipeline import PreprocessConfig, run_preprocess
from seje.term_extract import TaggerConfig
from seje.term_rate import RaterConfig
from seje.text_sem import SentenceEncoderConfig

TINY_SPEC = GeneratorSpec(num_categories=4, pairs_per_category=12, vocab_size=60,
                          seed=11, ingredient_pool_size=16, utensil_pool_size=6,
                          action_pool_size=6, resolution=16)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic_corpus(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_splits(tiny_corpus):
    return split(tiny_corpus, 0.7, 0.1, seed=2)


@pytest.fixture(scope="session")
def tiny_artifacts(tiny_corpus, tiny_splits):
    train_c, val_c, _ = tiny_splits
    config = PreprocessConfig(
        seed=0, d_w=24, cbow_epochs=4,
        tagger=TaggerConfig(epochs=6, seed=0),
        sentence=SentenceEncoderConfig(d_s=24, epochs=8, seed=0),
        classifier=ClassifierConfig(epochs=5, seed=0, resolution=16),
        rater=RaterConfig(algorithm="tfidf"),
    )
    return run_preprocess(tiny_corpus, train_c, val_c, config)
