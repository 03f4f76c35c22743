"""Key-term extraction: tagger, candidate clustering, false-sequence
re-examination, and utensil/action extraction."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from seje.common import ConfigError
from seje.term_extract import (CandidateClusterer, CandidateSpan, KeyTerm, KeyTermSet,
                               PosLexicon, TaggerConfig, annotated_lines_from_corpus,
                               cluster_candidates, extract_candidates, extract_key_terms,
                               extract_utensils_actions, find_entity_matches,
                               load_term_sets, reexamine_false_sequences, remove_entities,
                               save_term_sets, span_f1, train_ingredient_tagger,
                               ENTITY_PLACEHOLDER)

QUANTITIES = ["half", "one", "two", "pound", "cup", "can"]
INGREDIENTS = [["ditali", "pasta"], ["red", "kidney", "beans"], ["pork"],
               ["onion"], ["ground", "beef"], ["cheddar"], ["rice"], ["tofu"]]


def _english_lines(n=120, seed=0):
    """Synthetic 'qty [qty] ingredient [state]' lines with known spans."""
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n):
        tokens = [QUANTITIES[rng.integers(len(QUANTITIES))]]
        if rng.random() < 0.5:
            tokens.append(QUANTITIES[rng.integers(len(QUANTITIES))])
        ing = INGREDIENTS[rng.integers(len(INGREDIENTS))]
        start = len(tokens)
        tokens.extend(ing)
        spans = [(start, start + len(ing))]
        if rng.random() < 0.3:
            tokens.append("drained")
        lines.append((tokens, spans))
    return lines


@pytest.fixture(scope="module")
def english_tagger():
    return train_ingredient_tagger(_english_lines(), TaggerConfig(epochs=12, seed=3))


@pytest.fixture(scope="module")
def corpus_tagger(tiny_splits):
    train_c, _, _ = tiny_splits
    return train_ingredient_tagger(annotated_lines_from_corpus(train_c),
                                   TaggerConfig(epochs=8, seed=0))


class TestTaggerTraining:
    def test_heldout_span_f1(self, corpus_tagger, tiny_splits):
        _, _, test_c = tiny_splits
        held = annotated_lines_from_corpus(test_c)
        predicted, truth = [], []
        for tokens, spans in held:
            cands = extract_candidates(corpus_tagger, tokens)
            predicted.append([c.span for c in cands])
            truth.append(spans)
        assert span_f1(predicted, truth) >= 0.9

    def test_memorizes_single_line(self):
        line = (["half", "pound", "ditali", "pasta"], [(2, 4)])
        tagger = train_ingredient_tagger([line] , TaggerConfig(epochs=60, seed=1))
        cands = extract_candidates(tagger, line[0])
        assert [c.span for c in cands] == [(2, 4)]
        assert cands[0].tokens == ["ditali", "pasta"]

    def test_same_seed_identical_parameters(self):
        lines = _english_lines(30)
        a = train_ingredient_tagger(lines, TaggerConfig(epochs=4, seed=5))
        b = train_ingredient_tagger(lines, TaggerConfig(epochs=4, seed=5))
        for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_training_loss_mostly_decreasing(self, english_tagger):
        losses = english_tagger.train_losses
        assert losses[-1] < losses[0]
        assert all(b <= a * 1.05 for a, b in zip(losses, losses[1:]))

    def test_empty_training_set_rejected(self):
        with pytest.raises(ConfigError, match="empty"):
            train_ingredient_tagger([])


class TestExtractCandidates:
    def test_ditali_pasta_span(self, english_tagger):
        cands = extract_candidates(english_tagger, ["half", "pound", "ditali", "pasta"])
        assert len(cands) == 1
        assert cands[0].tokens == ["ditali", "pasta"]
        assert cands[0].probability > 0.5

    def test_pure_stop_tokens_yield_nothing(self, english_tagger):
        assert extract_candidates(english_tagger, ["half", "pound", "cup"]) == []

    def test_deterministic(self, english_tagger):
        line = ["one", "can", "red", "kidney", "beans", "drained"]
        assert extract_candidates(english_tagger, line) == extract_candidates(english_tagger, line)

    def test_probability_is_mean_of_tokens(self, english_tagger):
        line = ["half", "pound", "ditali", "pasta"]
        probs = english_tagger.token_probabilities(line)
        cands = extract_candidates(english_tagger, line)
        start, end = cands[0].span
        assert cands[0].probability == pytest.approx(float(probs[start:end].mean()))

    def test_empty_line_rejected(self, english_tagger):
        with pytest.raises(ConfigError):
            extract_candidates(english_tagger, [])


def _mk(tokens, prob, line=0):
    return CandidateSpan(tokens=list(tokens), source_line=line, probability=prob)


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(0)
    candidates, labels = [], []
    for i in range(200):
        if i % 2 == 0:  # true entities: confident, short, frequent
            candidates.append(_mk([f"ing{i % 7}"], float(rng.uniform(0.85, 1.0))))
            labels.append(True)
        else:           # false spans: uncertain, long, rare
            candidates.append(_mk([f"junk{i}", "x", "y", "z"],
                                  float(rng.uniform(0.0, 0.35))))
            labels.append(False)
    return CandidateClusterer().fit(candidates, labels)


class TestCandidateClusterer:

    def test_confident_frequent_candidate_true(self, fitted):
        labeled = cluster_candidates(fitted, [_mk(["ing1"], 0.99)])
        assert labeled[0].label == "true"

    def test_low_probability_candidate_false(self, fitted):
        labeled = cluster_candidates(fitted, [_mk(["junk1", "x", "y", "z"], 0.01)])
        assert labeled[0].label == "false"

    def test_identical_candidates_same_label(self, fitted):
        same = [_mk(["ing2"], 0.7)] * 5
        labels = {c.label for c in cluster_candidates(fitted, same)}
        assert len(labels) == 1

    def test_single_class_falls_back_with_warning(self):
        cands = [_mk(["a"], 0.9), _mk(["b"], 0.2)]
        with pytest.warns(UserWarning, match="single-class"):
            clusterer = CandidateClusterer().fit(cands, [True, True])
        labeled = cluster_candidates(clusterer, cands)
        assert [c.label for c in labeled] == ["true", "false"]

    def test_empty_candidates_rejected(self, fitted):
        with pytest.raises(ConfigError):
            cluster_candidates(fitted, [])


class TestReexamination:
    def test_recovers_buried_entity(self):
        span = _mk(["one", "can", "red", "kidney", "beans", "drained"], 0.3)
        recovered = reexamine_false_sequences([span], {"red_kidney_beans"})
        assert [t.surface for t in recovered] == ["red_kidney_beans"]
        assert recovered[0].kind == "ingredient"

    def test_no_vocabulary_hit_yields_nothing(self):
        span = _mk(["one", "can", "soup"], 0.3)
        assert reexamine_false_sequences([span], {"red_kidney_beans"}) == []

    def test_span_equal_to_entity_recovered_once(self):
        span = _mk(["red", "kidney", "beans"], 0.4)
        recovered = reexamine_false_sequences([span, span], {"red_kidney_beans"})
        assert [t.surface for t in recovered] == ["red_kidney_beans"]

    def test_contained_match_suppressed_by_maximal(self):
        span = _mk(["red", "kidney", "beans"], 0.4)
        vocab = {"red_kidney_beans", "kidney_beans"}
        recovered = reexamine_false_sequences([span], vocab)
        assert [t.surface for t in recovered] == ["red_kidney_beans"]

    def test_overlapping_maximal_matches_both_emitted(self):
        span = _mk(["a", "b", "c"], 0.4)
        recovered = reexamine_false_sequences([span], {"a_b", "b_c"})
        assert sorted(t.surface for t in recovered) == ["a_b", "b_c"]

    def test_idempotent(self):
        span = _mk(["one", "red", "kidney", "beans", "and", "pork"], 0.2)
        vocab = {"red_kidney_beans", "pork"}
        first = reexamine_false_sequences([span], vocab)
        again = reexamine_false_sequences(
            [_mk(t.surface.split("_"), 0.2) for t in first], vocab)
        assert {t.surface for t in again} == {t.surface for t in first}

    @settings(max_examples=60, deadline=None)
    @given(data=st.data())
    def test_fuzzed_recovery_and_idempotence(self, data):
        words = ["w%d" % i for i in range(12)]
        entity_words = data.draw(st.lists(
            st.lists(st.sampled_from(words), min_size=1, max_size=3),
            min_size=1, max_size=4))
        vocab = {"_".join(e) for e in entity_words}
        filler = data.draw(st.lists(st.sampled_from(words), min_size=0, max_size=5))
        buried = data.draw(st.sampled_from(entity_words))
        tokens = filler + buried + data.draw(
            st.lists(st.sampled_from(words), min_size=0, max_size=5))
        recovered = reexamine_false_sequences([_mk(tokens, 0.1)], vocab)
        surfaces = {t.surface for t in recovered}
        # the buried entity occurs contiguously; some maximal match must cover it
        matches = find_entity_matches(tokens, vocab)
        assert matches, "buried entity must be matched"
        assert surfaces == {"_".join(tokens[s:e]) for s, e in matches}
        again = reexamine_false_sequences([_mk(tokens, 0.1)], vocab)
        assert {t.surface for t in again} == surfaces


class TestPosExtraction:
    def test_stir_in_the_pan(self):
        lexicon = PosLexicon(stops=("in", "the"))
        terms = extract_utensils_actions([["stir", "in", "the", "pan"]], lexicon)
        assert {(t.surface, t.kind) for t in terms} == {("stir", "action"), ("pan", "utensil")}

    def test_empty_text(self):
        assert extract_utensils_actions([], PosLexicon()) == []

    def test_placeholders_only(self):
        sentences = [[ENTITY_PLACEHOLDER, ENTITY_PLACEHOLDER]]
        assert extract_utensils_actions(sentences, PosLexicon()) == []

    def test_suffix_fallback_tags_verbs(self):
        lexicon = PosLexicon(stops=("the",))
        terms = extract_utensils_actions([["bodoize", "the", "ladle"]], lexicon)
        kinds = {t.surface: t.kind for t in terms}
        assert kinds["bodoize"] == "action"
        assert kinds["ladle"] == "utensil"

    def test_duplicates_collapse(self):
        lexicon = PosLexicon(stops=("the",))
        terms = extract_utensils_actions([["stir", "the", "pan"], ["stir", "the", "pan"]],
                                         lexicon)
        assert len(terms) == 2

    def test_remove_entities_replaces_runs(self):
        cleaned = remove_entities([["add", "red", "kidney", "beans", "now"]],
                                  {"red_kidney_beans"})
        assert cleaned == [["add", ENTITY_PLACEHOLDER, "now"]]


@pytest.fixture(scope="module")
def extraction(tiny_artifacts):
    return tiny_artifacts


class TestExtractKeyTerms:

    def test_ground_truth_coverage(self, tiny_corpus, extraction):
        covered, total = 0, 0
        for pair in tiny_corpus.pairs:
            truth = pair.recipe.ground_truth_surfaces()
            got = extraction.term_sets[pair.recipe.id].surfaces(kind="ingredient")
            covered += len(truth & got)
            total += len(truth)
        assert covered / total >= 0.9

    def test_single_line_no_instruction_recipe_only_ingredients(
            self, tiny_corpus, extraction):
        from seje.corpus import Recipe
        first = tiny_corpus.pairs[0].recipe
        line = first.ingredient_lines[0]
        (start, end), = first.ground_truth_spans[0]
        recipe = Recipe(id="solo", title=list(line[start:end]),
                        ingredient_lines=[list(line)],
                        instructions=[[]], category=first.category)
        terms = extract_key_terms(recipe, extraction.tagger, extraction.clusterer,
                                  extraction.entity_vocabulary, extraction.lexicon)
        assert terms.terms, "expected at least the line's ingredient"
        assert {t.kind for t in terms.terms} == {"ingredient"}

    def test_deterministic(self, tiny_corpus, extraction):
        recipe = tiny_corpus.pairs[3].recipe
        a = extract_key_terms(recipe, extraction.tagger, extraction.clusterer,
                              extraction.entity_vocabulary, extraction.lexicon)
        b = extract_key_terms(recipe, extraction.tagger, extraction.clusterer,
                              extraction.entity_vocabulary, extraction.lexicon)
        assert [(t.surface, t.kind) for t in a.terms] == [(t.surface, t.kind) for t in b.terms]

    def test_kind_partition(self, tiny_corpus, extraction):
        for pair in tiny_corpus.pairs:
            terms = extraction.term_sets[pair.recipe.id].terms
            surfaces = [t.surface for t in terms]
            assert len(surfaces) == len(set(surfaces)), "one kind per surface"

    def test_surfaces_occur_in_recipe_text(self, tiny_corpus, extraction):
        for pair in tiny_corpus.pairs[:12]:
            sentences = pair.recipe.all_sentences()
            for term in extraction.term_sets[pair.recipe.id].terms:
                parts = term.surface.split("_")
                found = any(sent[i:i + len(parts)] == parts
                            for sent in sentences
                            for i in range(len(sent) - len(parts) + 1))
                assert found, f"{term.surface} not contiguous in recipe text"

    def test_monotone_recall_true_entities_kept(self, tiny_corpus, extraction):
        for pair in tiny_corpus.pairs[:12]:
            recipe = pair.recipe
            true_here = set()
            for lineno, line in enumerate(recipe.ingredient_lines):
                cands = extract_candidates(extraction.tagger, line, source_line=lineno)
                if not cands:
                    continue
                for c in cluster_candidates(extraction.clusterer, cands):
                    if c.label == "true":
                        true_here.add(c.surface)
            final = extract_key_terms(recipe, extraction.tagger, extraction.clusterer,
                                      extraction.entity_vocabulary, extraction.lexicon)
            assert true_here <= final.surfaces(kind="ingredient")


class TestTermSetSerialization:
    def test_round_trip(self, tmp_path):
        sets = [KeyTermSet(recipe_id="r1", terms=[KeyTerm("pork", "ingredient", 0.6),
                                                  KeyTerm("pan", "utensil", 0.4)]),
                KeyTermSet(recipe_id="r2", terms=[])]
        path = tmp_path / "terms.jsonl"
        save_term_sets(sets, path)
        loaded = load_term_sets(path)
        assert [ts.recipe_id for ts in loaded] == ["r1", "r2"]
        assert [(t.surface, t.kind, t.weight) for t in loaded[0].terms] == \
               [("pork", "ingredient", 0.6), ("pan", "utensil", 0.4)]

    def test_duplicate_terms_rejected(self):
        with pytest.raises(ConfigError):
            KeyTermSet(recipe_id="r", terms=[KeyTerm("pork", "ingredient"),
                                             KeyTerm("pork", "ingredient")])
