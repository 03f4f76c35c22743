"""Phase I preprocessing orchestration: trains the extraction stack, the
embedding models, and the image classifier, then rates key terms for every
recipe, producing the artifact set the joint-embedding trainer consumes.

Supervised components (tagger, clusterer, CBOW, sentence encoder, classifier)
fit on the training split only; document-frequency statistics are corpus-level
unsupervised counts and cover every recipe so all splits can be rated.
"""

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression

from .common import ConfigError, require, save_checkpoint, load_checkpoint
from .corpus import Corpus
from .image_sem import ClassifierConfig, load_classifier, save_classifier, \
    train_category_classifier
from .term_extract import (CandidateClusterer, PosLexicon, SequenceTagger, TaggerConfig,
                           annotated_lines_from_corpus, cluster_candidates,
                           extract_candidates, extract_key_terms, load_term_sets,
                           save_term_sets, train_ingredient_tagger)
from .term_rate import (CorpusTermStats, RaterConfig, apply_weights,
                        count_term_occurrences, filter_terms, rate_embedding_similarity,
                        rate_textrank, rate_tfidf, term_positions)
from .text_sem import (SentenceEncoderConfig, WordEmbeddingTable, joined_corpus_texts,
                       load_sentence_encoder, load_word_table, save_sentence_encoder,
                       save_word_table, train_cbow)

ARTIFACT_FILES = ("tagger.pt", "word_table.npz", "sentence_encoder.pt",
                  "classifier.pt", "term_sets.jsonl")


@dataclass
class PreprocessConfig:
    seed: int = 0
    d_w: int = 32
    cbow_window: int = 4
    cbow_epochs: int = 8
    tagger: TaggerConfig = field(default_factory=lambda: TaggerConfig(epochs=10))
    sentence: SentenceEncoderConfig = field(default_factory=SentenceEncoderConfig)
    classifier: ClassifierConfig = field(default_factory=lambda: ClassifierConfig(epochs=8))
    rater: RaterConfig = field(default_factory=RaterConfig)

    def __post_init__(self):
        for name, cls in (("tagger", TaggerConfig), ("sentence", SentenceEncoderConfig),
                          ("classifier", ClassifierConfig), ("rater", RaterConfig)):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, cls(**getattr(self, name)))


@dataclass
class Phase1Artifacts:
    tagger: SequenceTagger
    clusterer: CandidateClusterer
    entity_vocabulary: set
    lexicon: PosLexicon
    word_table: WordEmbeddingTable
    sentence_encoder: object
    classifier: object
    term_sets: dict  # recipe_id -> KeyTermSet (weights filled)
    rater_config: RaterConfig


def _candidate_labels(recipe, candidates):
    truth = set()
    if recipe.ground_truth_spans is not None:
        for lineno, spans in enumerate(recipe.ground_truth_spans):
            for s, e in spans:
                truth.add((lineno, s, e))
    return [(c.source_line, *c.span) in truth for c in candidates]


def _rate_term_set(recipe, term_set, stats, word_table, rater: RaterConfig):
    if not term_set.terms:
        return term_set
    if rater.algorithm == "tfidf":
        ratings = rate_tfidf(stats, recipe.id)
    elif rater.algorithm == "textrank":
        positions = term_positions(recipe, term_set.surfaces(), window=rater.textrank_window)
        ratings = rate_textrank(positions, rater)
    else:
        ratings = rate_embedding_similarity(recipe, term_set.surfaces(), word_table)
    if rater.filter_threshold is not None:
        ratings = filter_terms(ratings, rater.filter_threshold)
    return apply_weights(term_set, ratings)


def run_preprocess(corpus: Corpus, train_corpus: Corpus, val_corpus: Corpus,
                   config: PreprocessConfig | None = None) -> Phase1Artifacts:
    """Train all Phase I models and produce weighted key-term sets for every
    recipe in `corpus` (which must contain the train and val splits)."""
    config = config or PreprocessConfig()

    # 1. span tagger, supervised by generator annotations of the train split
    lines = annotated_lines_from_corpus(train_corpus)
    if not lines:
        raise ConfigError("train split has no annotated ingredient lines")
    tagger = train_ingredient_tagger(lines, config.tagger)

    # 2. candidate clusterer on train candidates labeled against ground truth
    train_candidates, labels = [], []
    for pair in train_corpus.pairs:
        recipe = pair.recipe
        cands = []
        for lineno, line in enumerate(recipe.ingredient_lines):
            cands.extend(extract_candidates(tagger, line, source_line=lineno))
        train_candidates.extend(cands)
        labels.extend(_candidate_labels(recipe, cands))
    if not train_candidates:
        raise ConfigError("tagger produced no candidates on the train split")
    clusterer = CandidateClusterer().fit(train_candidates, labels)

    # 3. corpus-wide true-entity vocabulary
    entity_vocabulary = set()
    recipe_candidates = {}
    for pair in corpus.pairs:
        recipe = pair.recipe
        cands = []
        for lineno, line in enumerate(recipe.ingredient_lines):
            cands.extend(extract_candidates(tagger, line, source_line=lineno))
        labeled = cluster_candidates(clusterer, cands) if cands else []
        recipe_candidates[recipe.id] = labeled
        entity_vocabulary.update(c.surface for c in labeled if c.label == "true")

    # 4. word embeddings over entity-joined train texts
    texts = joined_corpus_texts(train_corpus, entity_vocabulary)
    word_table = train_cbow(texts, d_w=config.d_w, window=config.cbow_window,
                            epochs=config.cbow_epochs, seed=config.seed)

    # 5. sentence encoder over train instruction groups
    from .text_sem import train_sentence_encoder
    groups = [p.recipe.instructions for p in train_corpus.pairs]
    sentence_encoder = train_sentence_encoder(groups, config.sentence)

    # 6. image category classifier
    classifier = train_category_classifier(
        [p.image.pixels for p in train_corpus.pairs],
        [p.image.category for p in train_corpus.pairs],
        corpus.categories, config.classifier,
        val_images=[p.image.pixels for p in val_corpus.pairs],
        val_labels=[p.image.category for p in val_corpus.pairs])

    # 7. key-term sets with significance weights for every recipe
    lexicon = PosLexicon.from_corpus(corpus)
    raw_sets = {}
    for pair in corpus.pairs:
        raw_sets[pair.recipe.id] = extract_key_terms(
            pair.recipe, tagger, clusterer, entity_vocabulary, lexicon)
    multisets = {pair.recipe.id: count_term_occurrences(
                     pair.recipe, raw_sets[pair.recipe.id].surfaces())
                 for pair in corpus.pairs}
    stats = CorpusTermStats(multisets)
    term_sets = {pair.recipe.id: _rate_term_set(pair.recipe, raw_sets[pair.recipe.id],
                                                stats, word_table, config.rater)
                 for pair in corpus.pairs}

    return Phase1Artifacts(tagger=tagger, clusterer=clusterer,
                           entity_vocabulary=entity_vocabulary, lexicon=lexicon,
                           word_table=word_table, sentence_encoder=sentence_encoder,
                           classifier=classifier, term_sets=term_sets,
                           rater_config=config.rater)


def save_artifacts(artifacts: Phase1Artifacts, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clusterer = artifacts.clusterer
    save_checkpoint(out_dir / "tagger.pt", {
        "kind": "extraction_stack",
        "tagger_config": artifacts.tagger.config.__dict__,
        "tagger_vocabulary": artifacts.tagger.vocabulary,
        "tagger_state": artifacts.tagger.state_dict(),
        "clusterer": {
            "fallback": clusterer.fallback,
            "frequencies": dict(clusterer.frequencies),
            "coef": None if clusterer.model is None else clusterer.model.coef_,
            "intercept": None if clusterer.model is None else clusterer.model.intercept_,
            "classes": None if clusterer.model is None else clusterer.model.classes_,
        },
        "entity_vocabulary": sorted(artifacts.entity_vocabulary),
        "lexicon_tags": artifacts.lexicon.tags,
        "rater_config": asdict(artifacts.rater_config),
    })
    save_word_table(artifacts.word_table, out_dir / "word_table.npz")
    save_sentence_encoder(artifacts.sentence_encoder, out_dir / "sentence_encoder.pt")
    save_classifier(artifacts.classifier, out_dir / "classifier.pt")
    save_term_sets(artifacts.term_sets.values(), out_dir / "term_sets.jsonl")


def load_artifacts(artifact_dir) -> Phase1Artifacts:
    artifact_dir = Path(artifact_dir)
    for name in ARTIFACT_FILES:
        if not (artifact_dir / name).exists():
            raise ConfigError(f"missing artifact file: {artifact_dir / name}")

    payload = load_checkpoint(artifact_dir / "tagger.pt")
    if payload.get("kind") != "extraction_stack":
        raise ConfigError(f"{artifact_dir / 'tagger.pt'}: not an extraction checkpoint")
    tagger = SequenceTagger(payload["tagger_vocabulary"],
                            TaggerConfig(**payload["tagger_config"]))
    tagger.load_state_dict(payload["tagger_state"])
    tagger.eval()

    clusterer = CandidateClusterer()
    c = payload["clusterer"]
    clusterer.fallback = c["fallback"]
    from collections import Counter
    clusterer.frequencies = Counter(c["frequencies"])
    if c["coef"] is not None:
        model = LogisticRegression()
        model.coef_ = np.asarray(c["coef"])
        model.intercept_ = np.asarray(c["intercept"])
        model.classes_ = np.asarray(c["classes"])
        clusterer.model = model

    lexicon = PosLexicon()
    lexicon.tags = dict(payload["lexicon_tags"])

    term_sets = {ts.recipe_id: ts for ts in load_term_sets(artifact_dir / "term_sets.jsonl")}
    return Phase1Artifacts(
        tagger=tagger, clusterer=clusterer,
        entity_vocabulary=set(payload["entity_vocabulary"]), lexicon=lexicon,
        word_table=load_word_table(artifact_dir / "word_table.npz"),
        sentence_encoder=load_sentence_encoder(artifact_dir / "sentence_encoder.pt"),
        classifier=load_classifier(artifact_dir / "classifier.pt"),
        term_sets=term_sets,
        rater_config=RaterConfig(**payload["rater_config"]),
    )
