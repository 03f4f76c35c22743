"""Key-term extraction: ingredient-entity tagging, true/false candidate
clustering, false-sequence re-examination, and utensil/action extraction.

The extraction pipeline has three stages. A bidirectional LSTM tagger marks
ingredient token spans inside ingredient lines; a binary logistic regression
splits the candidate spans into true entities and false extractions; false
spans are then re-examined against the corpus-wide true-entity vocabulary so
that entities buried inside over-long extractions are still recovered.
Utensils and actions come from a lexicon-based noun/verb tagger applied to the
recipe text after ingredient entities have been cut out.
"""

import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from sklearn.linear_model import LogisticRegression

from .common import ConfigError, require, seeded_generator

PAD_IDX = 0
UNK_IDX = 1
SPAN_THRESHOLD = 0.5
ENTITY_PLACEHOLDER = "<entity>"

KINDS = ("ingredient", "utensil", "action")


@dataclass
class CandidateSpan:
    tokens: list
    source_line: int
    probability: float
    label: str = "unlabeled"  # true | false | unlabeled
    start: int = 0  # token offset of the span inside its source line

    @property
    def surface(self):
        return "_".join(self.tokens)

    @property
    def span(self):
        return (self.start, self.start + len(self.tokens))


@dataclass
class KeyTerm:
    surface: str
    kind: str
    weight: float = 0.0

    def __post_init__(self):
        require(self.kind in KINDS, f"unknown key-term kind {self.kind!r}")
        require(self.surface == self.surface.lower(), "key-term surface must be lowercase")


@dataclass
class KeyTermSet:
    recipe_id: str
    terms: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for t in self.terms:
            key = (t.surface, t.kind)
            require(key not in seen, f"duplicate key term {key} in {self.recipe_id}")
            seen.add(key)

    def surfaces(self, kind=None):
        return {t.surface for t in self.terms if kind is None or t.kind == kind}


@dataclass
class TaggerConfig:
    embedding_dim: int = 24
    hidden_size: int = 32
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.02
    seed: int = 0


class SequenceTagger(nn.Module):
    """BiLSTM over tokens producing per-token span-membership probabilities."""

    def __init__(self, vocabulary, config: TaggerConfig):
        super().__init__()
        self.config = config
        self.vocabulary = dict(vocabulary)  # token -> index (>= 2)
        gen = seeded_generator(config.seed)
        self.embedding = nn.Embedding(len(self.vocabulary) + 2, config.embedding_dim,
                                      padding_idx=PAD_IDX, dtype=torch.float64)
        self.lstm = nn.LSTM(config.embedding_dim, config.hidden_size, batch_first=True,
                            bidirectional=True, dtype=torch.float64)
        self.head = nn.Linear(2 * config.hidden_size, 1, dtype=torch.float64)
        with torch.no_grad():
            for p in self.parameters():
                fan_in = p.shape[-1] if p.dim() > 1 else p.shape[0]
                bound = 1.0 / np.sqrt(max(fan_in, 1))
                p.uniform_(-bound, bound, generator=gen)
        self.train_losses = []

    def encode_tokens(self, tokens):
        return torch.tensor([self.vocabulary.get(t, UNK_IDX) for t in tokens],
                            dtype=torch.long)

    def forward(self, token_ids):
        emb = self.embedding(token_ids)
        out, _ = self.lstm(emb)
        return self.head(out).squeeze(-1)

    @torch.no_grad()
    def token_probabilities(self, tokens):
        self.eval()
        ids = self.encode_tokens(tokens).unsqueeze(0)
        return torch.sigmoid(self(ids)).squeeze(0).numpy()


def _spans_to_mask(length, spans):
    mask = np.zeros(length, dtype=np.float64)
    for start, end in spans:
        mask[start:end] = 1.0
    return mask


def train_ingredient_tagger(annotated_lines, config: TaggerConfig | None = None) -> SequenceTagger:
    """Train the BiLSTM span tagger on (tokens, spans) pairs.

    `annotated_lines` holds one entry per ingredient line; spans are
    [start, end) token index pairs of the ground-truth ingredient entities.
    """
    config = config or TaggerConfig()
    lines = list(annotated_lines)
    if not lines:
        raise ConfigError("tagger training set is empty")

    vocab = {}
    for tokens, _ in lines:
        for tok in tokens:
            vocab.setdefault(tok, len(vocab) + 2)

    tagger = SequenceTagger(vocab, config)
    tagger.train()
    opt = torch.optim.Adam(tagger.parameters(), lr=config.learning_rate)
    loss_fn = nn.BCEWithLogitsLoss(reduction="sum")
    rng = np.random.default_rng(config.seed)

    encoded = [(tagger.encode_tokens(tokens), torch.tensor(_spans_to_mask(len(tokens), spans)))
               for tokens, spans in lines]

    for _ in range(config.epochs):
        order = rng.permutation(len(encoded))
        total, count = 0.0, 0
        for start in range(0, len(encoded), config.batch_size):
            batch = [encoded[i] for i in order[start:start + config.batch_size]]
            max_len = max(len(ids) for ids, _ in batch)
            ids = torch.full((len(batch), max_len), PAD_IDX, dtype=torch.long)
            target = torch.zeros((len(batch), max_len), dtype=torch.float64)
            pad = torch.zeros((len(batch), max_len), dtype=torch.bool)
            for b, (tok_ids, mask) in enumerate(batch):
                ids[b, :len(tok_ids)] = tok_ids
                target[b, :len(mask)] = mask
                pad[b, :len(tok_ids)] = True
            logits = tagger(ids)
            loss = loss_fn(logits[pad], target[pad])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += int(pad.sum())
        tagger.train_losses.append(total / count)
    tagger.eval()
    return tagger


def extract_candidates(tagger: SequenceTagger, line, source_line: int = 0):
    """Maximal runs of tokens with span probability >= 0.5, scored by mean probability."""
    require(len(line) > 0, "ingredient line must be non-empty")
    probs = tagger.token_probabilities(line)
    candidates = []
    start = None
    for i, p in enumerate(probs):
        if p >= SPAN_THRESHOLD and start is None:
            start = i
        elif p < SPAN_THRESHOLD and start is not None:
            candidates.append(CandidateSpan(tokens=list(line[start:i]), source_line=source_line,
                                            probability=float(probs[start:i].mean()), start=start))
            start = None
    if start is not None:
        candidates.append(CandidateSpan(tokens=list(line[start:]), source_line=source_line,
                                        probability=float(probs[start:].mean()), start=start))
    return candidates


class CandidateClusterer:
    """Binary logistic regression labeling candidate spans true or false.

    Features per candidate: tagger span probability, token length, and
    log corpus frequency of the normalized surface.
    """

    def __init__(self):
        self.model = None
        self.frequencies = Counter()
        self.fallback = False

    def _features(self, candidates):
        rows = [[c.probability, float(len(c.tokens)),
                 float(np.log1p(self.frequencies.get(c.surface, 0)))]
                for c in candidates]
        return np.asarray(rows, dtype=np.float64)

    def fit(self, candidates, labels):
        candidates = list(candidates)
        require(len(candidates) > 0, "clusterer training set is empty")
        self.frequencies = Counter(c.surface for c in candidates)
        y = np.asarray([bool(l) for l in labels])
        if y.all() or not y.any():
            warnings.warn("single-class clusterer training data; falling back to "
                          "probability >= 0.5 thresholding")
            self.fallback = True
            self.model = None
            return self
        self.model = LogisticRegression(max_iter=500)
        self.model.fit(self._features(candidates), y)
        self.fallback = False
        return self

    def predict(self, candidates):
        candidates = list(candidates)
        if not candidates:
            return []
        if self.fallback or self.model is None:
            return [c.probability >= SPAN_THRESHOLD for c in candidates]
        return list(self.model.predict(self._features(candidates)))


def cluster_candidates(clusterer: CandidateClusterer, candidates):
    """Return copies of `candidates` with true/false labels filled in."""
    candidates = list(candidates)
    require(len(candidates) > 0, "no candidates to cluster")
    flags = clusterer.predict(candidates)
    return [CandidateSpan(tokens=list(c.tokens), source_line=c.source_line,
                          probability=c.probability, label="true" if f else "false",
                          start=c.start)
            for c, f in zip(candidates, flags)]


def _entity_index(vocabulary):
    """first token -> token tuples, longest first."""
    index = {}
    for surface in vocabulary:
        parts = tuple(surface.split("_"))
        if parts:
            index.setdefault(parts[0], []).append(parts)
    for lists in index.values():
        lists.sort(key=len, reverse=True)
    return index


def find_entity_matches(tokens, vocabulary, index=None):
    """All maximal [start, end) runs in `tokens` matching a vocabulary entity.

    A match is maximal when no other match strictly contains its token range;
    overlapping maximal matches are all reported.
    """
    index = index if index is not None else _entity_index(vocabulary)
    tokens = list(tokens)
    matches = []
    for i, tok in enumerate(tokens):
        for parts in index.get(tok, ()):
            k = len(parts)
            if tuple(tokens[i:i + k]) == parts:
                matches.append((i, i + k))
    maximal = [(s, e) for (s, e) in matches
               if not any((js <= s and e <= je) and (js, je) != (s, e)
                          for js, je in matches)]
    return sorted(set(maximal))


def segment_entities(tokens, vocabulary, index=None):
    """Greedy leftmost-longest non-overlapping entity segmentation.

    Returns (segments, hit_flags): segments are token runs, flags mark which
    segments are vocabulary entities.
    """
    index = index if index is not None else _entity_index(vocabulary)
    tokens = list(tokens)
    segments, flags = [], []
    i = 0
    while i < len(tokens):
        hit = None
        for parts in index.get(tokens[i], ()):
            if tuple(tokens[i:i + len(parts)]) == parts:
                hit = parts
                break
        if hit is not None:
            segments.append(list(hit))
            flags.append(True)
            i += len(hit)
        else:
            segments.append([tokens[i]])
            flags.append(False)
            i += 1
    return segments, flags


def reexamine_false_sequences(false_spans, true_entity_vocabulary):
    """Recover ingredient entities buried inside false-labeled candidate spans.

    Every maximal sub-sequence of a false span matching an entity from the
    corpus-wide true-entity vocabulary is emitted as an ingredient key term;
    nothing else is. Idempotent over repeated application.
    """
    index = _entity_index(true_entity_vocabulary)
    recovered = []
    seen = set()
    for span in false_spans:
        tokens = span.tokens if isinstance(span, CandidateSpan) else list(span)
        for start, end in find_entity_matches(tokens, true_entity_vocabulary, index):
            surface = "_".join(tokens[start:end])
            if surface not in seen:
                seen.add(surface)
                recovered.append(KeyTerm(surface=surface, kind="ingredient"))
    return recovered


# Small built-in English kitchen lexicon so extraction behaves sensibly on
# hand-written text, not only on generated corpora.
_BUILTIN_NOUNS = ("pan", "pot", "bowl", "oven", "skillet", "whisk", "knife", "tray", "grill")
_BUILTIN_VERBS = ("stir", "mix", "bake", "boil", "chop", "fry", "simmer", "whip", "pour", "heat")
_VERB_SUFFIXES = ("ize", "ate", "ify", "ing")


class PosLexicon:
    """Word -> {noun, verb, stop} lookup with suffix-rule fallback for unknowns."""

    def __init__(self, nouns=(), verbs=(), stops=()):
        self.tags = {}
        for w in _BUILTIN_NOUNS + tuple(nouns):
            self.tags[w] = "noun"
        for w in _BUILTIN_VERBS + tuple(verbs):
            self.tags[w] = "verb"
        for w in stops:
            self.tags[w] = "stop"

    @classmethod
    def from_corpus(cls, corpus):
        nouns, verbs = [], []
        for sig in (corpus.signatures or {}).values():
            nouns.extend(sig.get("utensils", ()))
            verbs.extend(sig.get("actions", ()))
        return cls(nouns=nouns, verbs=verbs, stops=corpus.function_words)

    def tag(self, word):
        if word == ENTITY_PLACEHOLDER:
            return "stop"
        if word in self.tags:
            return self.tags[word]
        if word.endswith(_VERB_SUFFIXES):
            return "verb"
        return "noun"


def extract_utensils_actions(sentences, lexicon: PosLexicon):
    """Nouns become utensil terms and verbs become action terms.

    `sentences` must already have ingredient entities removed (replaced by the
    entity placeholder). Duplicates collapse to one term per surface.
    """
    terms = []
    seen = set()
    for sent in sentences:
        for word in sent:
            tag = lexicon.tag(word)
            kind = {"noun": "utensil", "verb": "action"}.get(tag)
            if kind is None or word in seen:
                continue
            seen.add(word)
            terms.append(KeyTerm(surface=word, kind=kind))
    return terms


def remove_entities(sentences, vocabulary):
    """Replace every entity occurrence with the placeholder token."""
    index = _entity_index(vocabulary)
    cleaned = []
    for sent in sentences:
        segments, flags = segment_entities(sent, vocabulary, index)
        out = []
        for seg, is_entity in zip(segments, flags):
            out.extend([ENTITY_PLACEHOLDER] if is_entity else seg)
        cleaned.append(out)
    return cleaned


def extract_key_terms(recipe, tagger, clusterer, true_entity_vocabulary,
                      lexicon: PosLexicon) -> KeyTermSet:
    """Full per-recipe extraction: true entities, re-examined recoveries,
    utensils, and actions, deduplicated with ingredient kind taking precedence."""
    ingredients = []
    seen = set()
    false_spans = []
    for lineno, line in enumerate(recipe.ingredient_lines):
        candidates = extract_candidates(tagger, line, source_line=lineno)
        if not candidates:
            continue
        for cand in cluster_candidates(clusterer, candidates):
            if cand.label == "true":
                if cand.surface not in seen:
                    seen.add(cand.surface)
                    ingredients.append(KeyTerm(surface=cand.surface, kind="ingredient"))
            else:
                false_spans.append(cand)

    for term in reexamine_false_sequences(false_spans, true_entity_vocabulary):
        if term.surface not in seen:
            seen.add(term.surface)
            ingredients.append(term)

    cleaned = remove_entities(recipe.all_sentences(), seen | set(true_entity_vocabulary))
    others = [t for t in extract_utensils_actions(cleaned, lexicon)
              if t.surface not in seen]

    return KeyTermSet(recipe_id=recipe.id, terms=ingredients + others)


def save_term_sets(term_sets, path):
    from .common import write_jsonl
    write_jsonl(path, ({"recipe_id": ts.recipe_id,
                        "terms": [{"surface": t.surface, "kind": t.kind, "weight": t.weight}
                                  for t in ts.terms]}
                       for ts in term_sets))


def load_term_sets(path):
    from .common import read_jsonl
    sets = []
    for lineno, rec in read_jsonl(path):
        for fieldname in ("recipe_id", "terms"):
            if fieldname not in rec:
                raise ConfigError(f"{path}: line {lineno}: missing field {fieldname!r}")
        terms = [KeyTerm(surface=t["surface"], kind=t["kind"], weight=float(t["weight"]))
                 for t in rec["terms"]]
        sets.append(KeyTermSet(recipe_id=rec["recipe_id"], terms=terms))
    return sets


def annotated_lines_from_corpus(corpus):
    """(tokens, spans) supervision pairs for every annotated ingredient line."""
    lines = []
    for pair in corpus.pairs:
        recipe = pair.recipe
        if recipe.ground_truth_spans is None:
            continue
        for tokens, spans in zip(recipe.ingredient_lines, recipe.ground_truth_spans):
            lines.append((list(tokens), [tuple(s) for s in spans]))
    return lines


def span_f1(predicted, truth):
    """Exact-match span F1 between two lists of (start, end) span sets."""
    tp = fp = fn = 0
    for pred, true in zip(predicted, truth):
        pred, true = set(map(tuple, pred)), set(map(tuple, true))
        tp += len(pred & true)
        fp += len(pred - true)
        fn += len(true - pred)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)
