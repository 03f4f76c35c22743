"""Significance weighting of key terms: TFIDF, TextRank, and an
embedding-similarity rater, plus low-weight filtering.

All raters emit per-recipe weights normalized to sum to 1, which keeps the
downstream weighted key-term feature scale-stable regardless of how many
terms a recipe has.
"""

import logging
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .common import require

logger = logging.getLogger(__name__)

ALGORITHMS = ("tfidf", "textrank", "embedding_similarity")


@dataclass
class TermRating:
    surface: str
    weight: float


@dataclass
class RaterConfig:
    algorithm: str = "tfidf"
    textrank_damping: float = 0.85
    textrank_window: int = 2
    textrank_iters: int = 50
    filter_threshold: float | None = None

    def __post_init__(self):
        require(self.algorithm in ALGORITHMS, f"unknown rater algorithm {self.algorithm!r}")
        require(0.0 < self.textrank_damping < 1.0, "textrank_damping must lie in (0, 1)")
        require(self.textrank_iters >= 1, "textrank_iters must be >= 1")


def _normalize(surfaces, raw):
    raw = np.asarray(raw, dtype=np.float64)
    total = raw.sum()
    if total <= 0.0:
        if len(raw) == 0:
            return []
        raw = np.ones_like(raw)
        total = raw.sum()
    return [TermRating(surface=s, weight=float(w / total)) for s, w in zip(surfaces, raw)]


class CorpusTermStats:
    """Document frequencies over per-recipe term multisets.

    One document is one recipe's key-term multiset counted over its full text;
    df(t) counts the recipes containing t at least once.
    """

    def __init__(self, term_multisets):
        self.multisets = {rid: Counter(ms) for rid, ms in term_multisets.items()}
        self.num_documents = len(self.multisets)
        self.df = Counter()
        for counts in self.multisets.values():
            self.df.update(set(counts))

    def document_frequency(self, surface):
        df = self.df.get(surface, 0)
        if df == 0:
            logger.info("term %r missing from corpus statistics; treating df as 1", surface)
            return 1
        return df


def count_term_occurrences(recipe, surfaces):
    """Multiset of key-term occurrences over the full recipe text.

    Multi-word surfaces count contiguous token runs; overlapping occurrences
    of distinct surfaces all count.
    """
    counts = Counter()
    parts = {s: tuple(s.split("_")) for s in surfaces}
    for sent in recipe.all_sentences():
        for surface, p in parts.items():
            k = len(p)
            counts[surface] += sum(1 for i in range(len(sent) - k + 1)
                                   if tuple(sent[i:i + k]) == p)
    return counts


def rate_tfidf(stats: CorpusTermStats, recipe_id):
    """weight(t) proportional to tf(t, recipe) * ln(|D| / df(t)), normalized."""
    require(recipe_id in stats.multisets, f"no corpus statistics for recipe {recipe_id!r}")
    counts = stats.multisets[recipe_id]
    surfaces = sorted(counts)
    raw = [counts[s] * np.log(stats.num_documents / stats.document_frequency(s))
           for s in surfaces]
    return _normalize(surfaces, raw)


def _cooccurrence_graph(positions, window):
    """Symmetric co-occurrence weights between terms whose marked positions
    fall within `window` tokens of each other."""
    terms = sorted(positions)
    n = len(terms)
    weights = np.zeros((n, n), dtype=np.float64)
    idx = {t: i for i, t in enumerate(terms)}
    flat = [(p, t) for t, ps in positions.items() for p in ps]
    flat.sort()
    for a in range(len(flat)):
        pa, ta = flat[a]
        for b in range(a + 1, len(flat)):
            pb, tb = flat[b]
            if pb - pa > window:
                break
            if ta != tb:
                weights[idx[ta], idx[tb]] += 1.0
                weights[idx[tb], idx[ta]] += 1.0
    return terms, weights


def term_positions(recipe, surfaces, window=2):
    """Mark key-term occurrence start positions over the recipe token stream.

    Sentences are separated by a gap wider than the window so co-occurrence
    never crosses a sentence boundary.
    """
    positions = {}
    parts = {s: tuple(s.split("_")) for s in surfaces}
    offset = 0
    for sent in recipe.all_sentences():
        for surface, p in parts.items():
            k = len(p)
            for i in range(len(sent) - k + 1):
                if tuple(sent[i:i + k]) == p:
                    positions.setdefault(surface, []).append(offset + i)
        offset += len(sent) + window + 1
    return positions


def rate_textrank(term_positions, config: RaterConfig | None = None):
    """Graph-based rating: power-iteration PageRank on the term co-occurrence graph.

    `term_positions` maps each term surface to the token positions where it
    occurs in the recipe token sequence.
    """
    config = config or RaterConfig(algorithm="textrank")
    if not term_positions:
        return []
    terms, weights = _cooccurrence_graph(term_positions, config.textrank_window)
    n = len(terms)
    if n == 1:
        return [TermRating(surface=terms[0], weight=1.0)]

    damping = config.textrank_damping
    out_degree = weights.sum(axis=1)
    dangling = out_degree == 0
    transition = np.zeros_like(weights)
    nonzero = ~dangling
    transition[nonzero] = weights[nonzero] / out_degree[nonzero, None]

    scores = np.full(n, 1.0 / n)
    for _ in range(config.textrank_iters):
        dangling_mass = scores[dangling].sum() / n
        updated = (1.0 - damping) / n + damping * (transition.T @ scores + dangling_mass)
        if np.max(np.abs(updated - scores)) < 1e-6:
            scores = updated
            break
        scores = updated
    return _normalize(terms, scores)


def rate_embedding_similarity(recipe, surfaces, word_table):
    """weight(t) proportional to max(0, cos(term vector, mean recipe-token vector))."""
    from .text_sem import embed_term  # local import to avoid a cycle

    surfaces = sorted(set(surfaces))
    if not surfaces:
        return []
    token_vectors = []
    for sent in recipe.all_sentences():
        for tok in sent:
            vec = word_table.vector(tok)
            if vec is not None:
                token_vectors.append(vec)
    doc = np.mean(token_vectors, axis=0) if token_vectors else np.zeros(word_table.dim)
    doc_norm = np.linalg.norm(doc)
    if doc_norm == 0.0:
        warnings.warn("all-zero document embedding; using uniform term weights")
        return _normalize(surfaces, np.zeros(len(surfaces)))

    raw = []
    for s in surfaces:
        vec = embed_term(word_table, s)
        norm = np.linalg.norm(vec)
        cos = float(vec @ doc / (norm * doc_norm)) if norm > 0 else 0.0
        raw.append(max(0.0, cos))
    return _normalize(surfaces, raw)


def filter_terms(ratings, threshold):
    """Drop ratings with weight < threshold and renormalize the survivors.

    If nothing survives, the single highest-weight term is kept (degenerate
    guard). Idempotent for a fixed threshold.
    """
    require(threshold >= 0.0, "filter threshold must be >= 0")
    ratings = list(ratings)
    if not ratings:
        return []
    kept = [r for r in ratings if r.weight >= threshold]
    if not kept:
        kept = [max(ratings, key=lambda r: r.weight)]
    return _normalize([r.surface for r in kept], [r.weight for r in kept])


def apply_weights(term_set, ratings):
    """Copy rating weights onto the matching key terms of a KeyTermSet.

    Terms without a rating are dropped (they were filtered out)."""
    from .term_extract import KeyTerm, KeyTermSet

    by_surface = {r.surface: r.weight for r in ratings}
    terms = [KeyTerm(surface=t.surface, kind=t.kind, weight=by_surface[t.surface])
             for t in term_set.terms if t.surface in by_surface]
    return KeyTermSet(recipe_id=term_set.recipe_id, terms=terms)
