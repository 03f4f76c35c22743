"""Corpus data model, synthetic generator, persistence, and splitting."""

import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seje.common import ConfigError
from seje.corpus import (CategoryVocabulary, Corpus, FoodImage, GeneratorSpec, Recipe,
                         RecipePair, generate_synthetic_corpus, load_corpus,
                         save_corpus, split)


@pytest.fixture(scope="module")
def corpus500():
    return generate_synthetic_corpus(GeneratorSpec(num_categories=10,
                                                   pairs_per_category=50, seed=7))


class TestGenerator:
    def test_pair_and_category_counts(self, corpus500):
        assert len(corpus500) == 500
        assert corpus500.categories.count == 10

    def test_determinism_byte_identical(self, tmp_path, corpus500):
        again = generate_synthetic_corpus(GeneratorSpec(num_categories=10,
                                                        pairs_per_category=50, seed=7))
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_corpus(corpus500, p1)
        save_corpus(again, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_seeds_differ(self):
        corpora = [generate_synthetic_corpus(GeneratorSpec(num_categories=2,
                                                           pairs_per_category=3,
                                                           vocab_size=60,
                                                           ingredient_pool_size=12,
                                                           utensil_pool_size=4,
                                                           action_pool_size=4,
                                                           seed=s))
                   for s in range(5)]
        signatures = {json.dumps(c.signatures, sort_keys=True) for c in corpora}
        assert len(signatures) == 5

    def test_disjoint_category_signatures(self):
        c = generate_synthetic_corpus(GeneratorSpec(num_categories=2, pairs_per_category=1,
                                                    vocab_size=30, ingredient_pool_size=8,
                                                    utensil_pool_size=3, action_pool_size=3,
                                                    seed=1))
        assert len(c) == 2
        sets = [set(sig["ingredients"]) for sig in c.signatures.values()]
        for a, b in itertools.combinations(sets, 2):
            assert not (a & b)

    def test_pairs_share_category(self, corpus500):
        for pair in corpus500.pairs:
            assert pair.recipe.category == pair.image.category

    def test_pixels_in_unit_interval(self, corpus500):
        for pair in corpus500.pairs[:25]:
            px = pair.image.pixels
            assert px.min() >= 0.0 and px.max() <= 1.0
            assert px.shape == (32, 32, 3)

    def test_ground_truth_spans_cover_lines(self, corpus500):
        recipe = corpus500.pairs[0].recipe
        assert len(recipe.ground_truth_spans) == len(recipe.ingredient_lines)
        for line, spans in zip(recipe.ingredient_lines, recipe.ground_truth_spans):
            for start, end in spans:
                assert 0 <= start < end <= len(line)

    def test_category_label_occurs_in_title(self, corpus500):
        for pair in corpus500.pairs[:25]:
            assert pair.recipe.category in pair.recipe.title

    def test_vocab_size_too_small_rejected(self):
        spec = GeneratorSpec(num_categories=2, pairs_per_category=1, vocab_size=10,
                             ingredient_pool_size=8, utensil_pool_size=4,
                             action_pool_size=4)
        with pytest.raises(ConfigError, match="smaller than the combined pool sizes"):
            generate_synthetic_corpus(spec)

    def test_nonpositive_counts_rejected(self):
        with pytest.raises(ConfigError):
            generate_synthetic_corpus(GeneratorSpec(num_categories=0))


class TestPersistence:
    def test_round_trip_equality(self, tmp_path, corpus500):
        path = tmp_path / "c.jsonl"
        save_corpus(corpus500, path)
        assert load_corpus(path) == corpus500

    def test_round_trip_preserves_count_and_ids(self, tmp_path, corpus500):
        path = tmp_path / "c.jsonl"
        save_corpus(corpus500, path)
        loaded = load_corpus(path)
        assert len(loaded) == 500
        assert [p.recipe.id for p in loaded.pairs] == [p.recipe.id for p in corpus500.pairs]

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_round_trip_arbitrary_seeds(self, tmp_path_factory, seed):
        corpus = generate_synthetic_corpus(
            GeneratorSpec(num_categories=2, pairs_per_category=2, vocab_size=40,
                          ingredient_pool_size=8, utensil_pool_size=3,
                          action_pool_size=3, seed=seed, resolution=8))
        path = tmp_path_factory.mktemp("rt") / "c.jsonl"
        save_corpus(corpus, path)
        assert load_corpus(path) == corpus

    def test_missing_field_names_line_and_field(self, tmp_path, corpus500):
        path = tmp_path / "c.jsonl"
        save_corpus(corpus500, path)
        lines = path.read_text().splitlines()
        record = json.loads(lines[3])
        del record["instructions"]
        lines[3] = json.dumps(record)
        bad = tmp_path / "bad.jsonl"
        bad.write_text("\n".join(lines) + "\n")
        with pytest.raises(ConfigError, match=r"line 4.*instructions"):
            load_corpus(bad)

    def test_unknown_category_rejected(self, tmp_path, corpus500):
        path = tmp_path / "c.jsonl"
        save_corpus(corpus500, path)
        lines = path.read_text().splitlines()
        record = json.loads(lines[1])
        record["category"] = "not-a-category"
        lines[1] = json.dumps(record)
        bad = tmp_path / "bad.jsonl"
        bad.write_text("\n".join(lines) + "\n")
        with pytest.raises(ConfigError, match=r"line 2.*unknown category"):
            load_corpus(bad)

    def test_malformed_json_names_line(self, tmp_path, corpus500):
        path = tmp_path / "c.jsonl"
        save_corpus(corpus500, path)
        lines = path.read_text().splitlines()
        lines[5] = "{not json"
        bad = tmp_path / "bad.jsonl"
        bad.write_text("\n".join(lines) + "\n")
        with pytest.raises(ConfigError, match="line 6"):
            load_corpus(bad)


class TestSplit:
    def test_arithmetic_700_100(self, corpus500):
        train, val, test = split(corpus500, 0.7, 0.1, seed=3)
        assert (len(train), len(val), len(test)) == (350, 50, 100)

    def test_partition_law(self, corpus500):
        train, val, test = split(corpus500, 0.7, 0.1, seed=3)
        ids = lambda c: {p.recipe.id for p in c.pairs}
        assert ids(train) | ids(val) | ids(test) == ids(corpus500)
        assert not ids(train) & ids(val)
        assert not ids(train) & ids(test)
        assert not ids(val) & ids(test)

    def test_stratified_all_categories_in_each_split(self, corpus500):
        train, val, test = split(corpus500, 0.7, 0.1, seed=3)
        for part in (train, val, test):
            assert {p.recipe.category for p in part.pairs} == set(corpus500.categories.labels)
            for label in corpus500.categories.labels:
                count = sum(p.recipe.category == label for p in part.pairs)
                assert count == len(part) // 10

    def test_deterministic(self, corpus500):
        a = split(corpus500, 0.7, 0.1, seed=9)
        b = split(corpus500, 0.7, 0.1, seed=9)
        for part_a, part_b in zip(a, b):
            assert [p.recipe.id for p in part_a.pairs] == [p.recipe.id for p in part_b.pairs]

    @pytest.mark.parametrize("fracs", [(0.0, 0.1), (1.0, 0.1), (0.7, 0.0), (0.5, 0.5), (-0.1, 0.2)])
    def test_bad_fractions_rejected(self, corpus500, fracs):
        with pytest.raises(ConfigError):
            split(corpus500, *fracs, seed=0)


class TestDataModel:
    def test_recipe_requires_lines_and_instructions(self):
        with pytest.raises(ConfigError):
            Recipe(id="x", title=["t"], ingredient_lines=[], instructions=[["a"]],
                   category="c")
        with pytest.raises(ConfigError):
            Recipe(id="x", title=["t"], ingredient_lines=[["a"]], instructions=[],
                   category="c")

    def test_image_pixel_bounds_enforced(self):
        with pytest.raises(ConfigError):
            FoodImage(id="v", pixels=np.full((8, 8, 3), 1.5), category="c")

    def test_pair_category_mismatch_rejected(self):
        recipe = Recipe(id="r", title=["t"], ingredient_lines=[["a"]],
                        instructions=[["b"]], category="c1")
        image = FoodImage(id="v", pixels=np.zeros((8, 8, 3)), category="c2")
        with pytest.raises(ConfigError):
            RecipePair(recipe=recipe, image=image)

    def test_duplicate_recipe_ids_rejected(self):
        recipe = Recipe(id="r", title=["t"], ingredient_lines=[["a"]],
                        instructions=[["b"]], category="c")
        image = FoodImage(id="v", pixels=np.zeros((8, 8, 3)), category="c")
        pair = RecipePair(recipe=recipe, image=image)
        with pytest.raises(ConfigError):
            Corpus(pairs=[pair, pair], categories=CategoryVocabulary(["c"]))

    def test_vocabulary_index_stability(self):
        vocab = CategoryVocabulary(["b", "a", "c"])
        assert [vocab.index_of(l) for l in ("b", "a", "c")] == [0, 1, 2]
        with pytest.raises(ConfigError):
            vocab.index_of("missing")
