"""Image category classifier and category term embedding."""

import numpy as np
import pytest
import torch

from seje.common import ConfigError
from seje.corpus import CategoryVocabulary, GeneratorSpec, generate_synthetic_corpus, split
from seje.image_sem import (CategoryClassifier, ClassifierConfig, category_embedding,
                            load_classifier, predict_category, save_classifier,
                            train_category_classifier)
from seje.text_sem import WordEmbeddingTable, embed_term


@pytest.fixture(scope="module")
def ten_class_setup():
    corpus = generate_synthetic_corpus(GeneratorSpec(
        num_categories=10, pairs_per_category=10, vocab_size=80,
        ingredient_pool_size=30, utensil_pool_size=8, action_pool_size=8,
        seed=21, resolution=16))
    train_c, val_c, _ = split(corpus, 0.7, 0.1, seed=0)
    clf = train_category_classifier(
        [p.image.pixels for p in train_c.pairs],
        [p.image.category for p in train_c.pairs],
        corpus.categories, ClassifierConfig(epochs=8, seed=0, resolution=16),
        val_images=[p.image.pixels for p in val_c.pairs],
        val_labels=[p.image.category for p in val_c.pairs])
    return corpus, train_c, clf


class TestTraining:
    def test_ten_class_validation_accuracy(self, ten_class_setup):
        _, _, clf = ten_class_setup
        assert clf.validation_accuracy >= 0.9

    def test_same_seed_identical_parameters(self):
        rng = np.random.default_rng(0)
        images = [rng.random((8, 8, 3)) for _ in range(12)]
        labels = ["a"] * 6 + ["b"] * 6
        vocab = CategoryVocabulary(["a", "b"])
        cfg = ClassifierConfig(epochs=2, seed=5, resolution=8, channels=4)
        c1 = train_category_classifier(images, labels, vocab, cfg)
        c2 = train_category_classifier(images, labels, vocab, cfg)
        for p1, p2 in zip(c1.state_dict().values(), c2.state_dict().values()):
            assert torch.equal(p1, p2)

    def test_single_class_rejected(self):
        rng = np.random.default_rng(0)
        images = [rng.random((8, 8, 3)) for _ in range(10)]
        with pytest.raises(ConfigError, match="2 distinct classes"):
            train_category_classifier(images, ["a"] * 10, CategoryVocabulary(["a"]),
                                      ClassifierConfig(epochs=1, resolution=8))

    def test_too_few_images_per_class_rejected(self):
        rng = np.random.default_rng(0)
        images = [rng.random((8, 8, 3)) for _ in range(6)]
        labels = ["a"] * 4 + ["b"] * 2
        with pytest.raises(ConfigError, match="5 images per class"):
            train_category_classifier(images, labels, CategoryVocabulary(["a", "b"]),
                                      ClassifierConfig(epochs=1, resolution=8))


class TestPrediction:
    def test_probabilities_sum_to_one(self, ten_class_setup):
        _, train_c, clf = ten_class_setup
        probs = clf.probabilities(train_c.pairs[0].image.pixels)
        assert probs.shape == (10,)
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)

    def test_training_image_confident_and_correct(self, ten_class_setup):
        _, train_c, clf = ten_class_setup
        pair = train_c.pairs[0]
        label, confidence = predict_category(clf, pair.image)
        assert label == pair.image.category
        assert confidence > 1.0 / clf.num_classes

    def test_noise_image_total(self, ten_class_setup):
        _, _, clf = ten_class_setup
        rng = np.random.default_rng(3)
        label, confidence = predict_category(clf, rng.random((16, 16, 3)))
        assert label in clf.labels
        assert 0.0 < confidence <= 1.0

    def test_identical_images_identical_predictions(self, ten_class_setup):
        _, train_c, clf = ten_class_setup
        image = train_c.pairs[1].image
        assert predict_category(clf, image) == predict_category(clf, image)

    def test_confidence_is_argmax_of_probabilities(self, ten_class_setup):
        _, train_c, clf = ten_class_setup
        pixels = train_c.pairs[2].image.pixels
        probs = clf.probabilities(pixels)
        label, confidence = predict_category(clf, pixels)
        assert confidence == pytest.approx(float(probs.max()))
        assert label == clf.labels[int(np.argmax(probs))]

    def test_wrong_resolution_rejected(self, ten_class_setup):
        _, _, clf = ten_class_setup
        with pytest.raises(ConfigError, match="resolution"):
            clf.probabilities(np.zeros((8, 8, 3)))

    def test_argmax_tie_breaks_to_lowest_index(self):
        clf = CategoryClassifier(["a", "b"], ClassifierConfig(resolution=8, channels=4))
        with torch.no_grad():
            for p in clf.parameters():
                p.zero_()
        label, confidence = predict_category(clf, np.zeros((8, 8, 3)))
        assert label == "a"
        assert confidence == pytest.approx(0.5)


class TestCategoryEmbedding:
    def test_shared_code_path_with_embed_term(self):
        vocab = {"pad_thai": 0, "pad": 1, "thai": 2}
        table = WordEmbeddingTable(vocab, np.arange(9, dtype=float).reshape(3, 3))
        assert np.array_equal(category_embedding("pad_thai", table),
                              embed_term(table, "pad_thai"))

    def test_multiword_label_constituent_mean(self):
        vocab = {"pad": 0, "thai": 1}
        table = WordEmbeddingTable(vocab, np.array([[2.0, 0.0], [0.0, 4.0]]))
        assert np.allclose(category_embedding("pad_thai", table), [1.0, 2.0])

    def test_unknown_label_zero_vector(self):
        table = WordEmbeddingTable({"a": 0}, np.ones((1, 2)))
        with pytest.warns(UserWarning):
            assert np.array_equal(category_embedding("mystery", table), np.zeros(2))


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path, ten_class_setup):
        _, train_c, clf = ten_class_setup
        path = tmp_path / "clf.pt"
        save_classifier(clf, path)
        loaded = load_classifier(path)
        pixels = train_c.pairs[0].image.pixels
        assert np.array_equal(loaded.probabilities(pixels), clf.probabilities(pixels))
        assert loaded.validation_accuracy == clf.validation_accuracy
