"""Recipe-image data model, desk-scale synthetic corpus generator, and persistence.

The generator stands in for a web-scale recipe dataset: each synthetic category
gets a disjoint signature set of ingredients plus signature utensils/actions,
recipes are templated token sequences drawn mostly from their category
signature, and images are category-keyed colored-patch patterns with pixel
noise. Ground-truth ingredient spans are emitted so the Phase I tagger can be
supervised.
"""

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .common import ConfigError, require

SCHEMA_VERSION = 1
DEFAULT_RESOLUTION = 32

# Function words used by recipe templates. These are stop words for key-term
# extraction: quantities, units, determiners and preparation states.
QUANTITY_WORDS = ("half", "one", "two", "three", "four", "pound", "cup", "can", "spoon")
STATE_WORDS = ("drained", "chopped", "minced", "sliced", "fresh", "dried")
GLUE_WORDS = ("the", "a", "in", "with", "then", "and", "over", "until", "of", "into")
FUNCTION_WORDS = QUANTITY_WORDS + STATE_WORDS + GLUE_WORDS

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_ACTION_SUFFIXES = ("ize", "ate", "ify")


@dataclass
class Recipe:
    id: str
    title: list
    ingredient_lines: list
    instructions: list
    category: str
    # generator ground truth: per line, list of [start, end) token spans
    ground_truth_spans: list | None = None

    def __post_init__(self):
        require(bool(self.id), "recipe id must be non-empty")
        require(len(self.ingredient_lines) >= 1, f"recipe {self.id}: needs at least 1 ingredient line")
        require(len(self.instructions) >= 1, f"recipe {self.id}: needs at least 1 instruction sentence")

    def all_sentences(self):
        """Token sequences of the full recipe text: title, ingredient lines, instructions."""
        return [list(self.title)] + [list(l) for l in self.ingredient_lines] + [list(s) for s in self.instructions]

    def ground_truth_surfaces(self):
        """Normalized (underscore-joined) ingredient surfaces from the annotated spans."""
        if self.ground_truth_spans is None:
            return set()
        surfaces = set()
        for line, spans in zip(self.ingredient_lines, self.ground_truth_spans):
            for start, end in spans:
                surfaces.add("_".join(line[start:end]))
        return surfaces


class FoodImage:
    """3-channel raster with pixel values in [0, 1] and a category label."""

    def __init__(self, id, pixels, category):
        pixels = np.asarray(pixels)
        require(pixels.ndim == 3 and pixels.shape[2] == 3, f"image {id}: pixels must be HxWx3")
        require(float(pixels.min()) >= 0.0 and float(pixels.max()) <= 1.0,
                f"image {id}: pixel values must lie in [0, 1]")
        self.id = id
        self.pixels = pixels
        self.category = category

    def __eq__(self, other):
        if not isinstance(other, FoodImage):
            return NotImplemented
        return (self.id == other.id and self.category == other.category
                and self.pixels.shape == other.pixels.shape
                and np.array_equal(self.pixels, other.pixels))

    def __repr__(self):
        return f"FoodImage(id={self.id!r}, shape={self.pixels.shape}, category={self.category!r})"


@dataclass
class RecipePair:
    recipe: Recipe
    image: FoodImage

    def __post_init__(self):
        require(self.recipe.category == self.image.category,
                f"pair {self.recipe.id}/{self.image.id}: recipe and image category differ")


class CategoryVocabulary:
    """Ordered category labels with stable integer indices."""

    def __init__(self, labels):
        labels = list(labels)
        require(len(set(labels)) == len(labels), "category labels must be distinct")
        self.labels = labels
        self._index = {label: i for i, label in enumerate(labels)}

    @property
    def count(self):
        return len(self.labels)

    def index_of(self, label):
        if label not in self._index:
            raise ConfigError(f"unknown category label: {label!r}")
        return self._index[label]

    def __contains__(self, label):
        return label in self._index

    def __eq__(self, other):
        return isinstance(other, CategoryVocabulary) and self.labels == other.labels

    def __repr__(self):
        return f"CategoryVocabulary({self.labels!r})"


@dataclass
class GeneratorSpec:
    num_categories: int = 10
    pairs_per_category: int = 50
    vocab_size: int = 120
    seed: int = 0
    ingredient_pool_size: int = 40
    utensil_pool_size: int = 10
    action_pool_size: int = 10
    resolution: int = DEFAULT_RESOLUTION

    def validate(self):
        for name in ("num_categories", "pairs_per_category", "vocab_size",
                     "ingredient_pool_size", "utensil_pool_size", "action_pool_size"):
            require(getattr(self, name) >= 1, f"{name} must be >= 1")
        pools = self.ingredient_pool_size + self.utensil_pool_size + self.action_pool_size
        require(self.vocab_size >= pools,
                f"vocab_size {self.vocab_size} is smaller than the combined pool sizes ({pools})")
        require(self.vocab_size - pools >= self.num_categories,
                f"vocab_size {self.vocab_size} leaves no room for {self.num_categories} category "
                f"label words beyond the pools ({pools})")
        require(self.ingredient_pool_size >= self.num_categories,
                "ingredient_pool_size must be >= num_categories for disjoint signatures")
        require(self.resolution >= 8, "resolution must be >= 8")


@dataclass
class Corpus:
    pairs: list
    categories: CategoryVocabulary
    # category label -> {"ingredients": [...], "utensils": [...], "actions": [...]}
    signatures: dict | None = None
    function_words: tuple = FUNCTION_WORDS

    def __post_init__(self):
        ids = [p.recipe.id for p in self.pairs]
        require(len(set(ids)) == len(ids), "recipe ids must be unique within a corpus")
        for p in self.pairs:
            require(p.recipe.category in self.categories,
                    f"recipe {p.recipe.id}: category {p.recipe.category!r} not in corpus vocabulary")

    def __len__(self):
        return len(self.pairs)

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (self.pairs == other.pairs and self.categories == other.categories
                and self.signatures == other.signatures
                and tuple(self.function_words) == tuple(other.function_words))

    def recipe_by_id(self, recipe_id):
        for p in self.pairs:
            if p.recipe.id == recipe_id:
                return p.recipe
        raise ConfigError(f"no recipe with id {recipe_id!r}")


def _make_words(rng, count, taken, syllables=2, suffixes=None):
    """Generate `count` distinct pronounceable lowercase tokens."""
    words = []
    while len(words) < count:
        word = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS))
                       for _ in range(syllables))
        if suffixes is not None:
            word += str(rng.choice(suffixes))
        elif word.endswith(_ACTION_SUFFIXES):
            continue  # keep verb-shaped endings exclusive to action words
        if word in taken:
            continue
        taken.add(word)
        words.append(word)
    return words


def _category_pattern(rng, resolution):
    """4x4 grid of cell colors; the per-category separable part of the image."""
    cells = rng.uniform(0.15, 0.85, size=(4, 4, 3))
    reps = resolution // 4
    pattern = np.repeat(np.repeat(cells, reps, axis=0), reps, axis=1)
    # pad if resolution is not a multiple of 4
    pad_h = resolution - pattern.shape[0]
    pad_w = resolution - pattern.shape[1]
    if pad_h or pad_w:
        pattern = np.pad(pattern, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    return pattern


def generate_synthetic_corpus(spec: GeneratorSpec) -> Corpus:
    """Build a deterministic synthetic recipe-image corpus from `spec`.

    Category signatures partition the ingredient pool, so no two categories
    share a signature ingredient. Every category label occurs as a token in
    its recipes' titles, which lets the word-embedding stage learn label
    vectors.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    taken = set(FUNCTION_WORDS)

    utensils = _make_words(rng, spec.utensil_pool_size, taken)
    # verb-shaped suffixes so the POS fallback rules can classify unseen actions
    actions = _make_words(rng, spec.action_pool_size, taken, suffixes=_ACTION_SUFFIXES)
    ingredient_heads = _make_words(rng, spec.ingredient_pool_size, taken)
    category_words = _make_words(rng, spec.num_categories, taken, syllables=3)

    remainder = spec.vocab_size - (spec.ingredient_pool_size + spec.utensil_pool_size
                                   + spec.action_pool_size) - spec.num_categories
    n_modifiers = remainder // 2
    modifiers = _make_words(rng, n_modifiers, taken)
    fillers = _make_words(rng, remainder - n_modifiers, taken)

    # ingredient surfaces: ~40% are two-word (modifier + head), rest single head
    ingredient_pool = []
    for head in ingredient_heads:
        if modifiers and rng.random() < 0.4:
            ingredient_pool.append((str(rng.choice(modifiers)), head))
        else:
            ingredient_pool.append((head,))

    # disjoint signature partition of the ingredient pool
    order = rng.permutation(spec.ingredient_pool_size)
    per_cat = spec.ingredient_pool_size // spec.num_categories
    signatures = {}
    for c, label in enumerate(category_words):
        idx = order[c * per_cat:(c + 1) * per_cat]
        sig_ing = [ingredient_pool[i] for i in idx]
        sig_ut = list(rng.choice(utensils, size=min(3, len(utensils)), replace=False))
        sig_act = list(rng.choice(actions, size=min(3, len(actions)), replace=False))
        signatures[label] = {
            "ingredients": ["_".join(t) for t in sig_ing],
            "utensils": [str(u) for u in sig_ut],
            "actions": [str(a) for a in sig_act],
        }

    patterns = {label: _category_pattern(rng, spec.resolution) for label in category_words}

    pairs = []
    n = 0
    for label in category_words:
        sig = signatures[label]
        sig_ing = [tuple(s.split("_")) for s in sig["ingredients"]]
        for _ in range(spec.pairs_per_category):
            n_lines = int(rng.integers(3, 6))
            lines, spans, used_ing = [], [], []
            for _ in range(n_lines):
                if rng.random() < 0.9 or not ingredient_pool:
                    ing = sig_ing[int(rng.integers(0, len(sig_ing)))]
                else:
                    ing = ingredient_pool[int(rng.integers(0, len(ingredient_pool)))]
                tokens = [str(rng.choice(QUANTITY_WORDS))]
                if rng.random() < 0.5:
                    tokens.append(str(rng.choice(QUANTITY_WORDS)))
                start = len(tokens)
                tokens.extend(ing)
                end = len(tokens)
                if rng.random() < 0.3:
                    tokens.append(str(rng.choice(STATE_WORDS)))
                lines.append(tokens)
                spans.append([[start, end]])
                used_ing.append(ing)

            n_sent = int(rng.integers(3, 6))
            sentences = []
            for _ in range(n_sent):
                act = str(rng.choice(sig["actions"]))
                ing = used_ing[int(rng.integers(0, len(used_ing)))]
                ut = str(rng.choice(sig["utensils"]))
                sent = [act, "the", *ing, "in", "the", ut]
                if fillers and rng.random() < 0.4:
                    sent.extend(["until", str(rng.choice(fillers))])
                sentences.append(sent)

            title = [label, *used_ing[0]]
            if rng.random() < 0.5:
                title.extend(["with", *used_ing[-1]])

            recipe = Recipe(id=f"r{n:05d}", title=title, ingredient_lines=lines,
                            instructions=sentences, category=label,
                            ground_truth_spans=spans)
            noise = rng.uniform(-0.12, 0.12, size=patterns[label].shape)
            pixels = np.clip(patterns[label] + noise, 0.0, 1.0).astype(np.float32)
            image = FoodImage(id=f"v{n:05d}", pixels=pixels, category=label)
            pairs.append(RecipePair(recipe=recipe, image=image))
            n += 1

    return Corpus(pairs=pairs, categories=CategoryVocabulary(category_words),
                  signatures=signatures)


_REQUIRED_FIELDS = ("id", "title", "ingredient_lines", "instructions", "category", "image")


def save_corpus(corpus: Corpus, path):
    """Line-delimited UTF-8 records, one pair per line, after a schema header line."""
    path = Path(path)
    header = {
        "schema_version": SCHEMA_VERSION,
        "categories": corpus.categories.labels,
        "signatures": corpus.signatures,
        "function_words": list(corpus.function_words),
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for pair in corpus.pairs:
            r, img = pair.recipe, pair.image
            rec = {
                "id": r.id,
                "title": r.title,
                "ingredient_lines": r.ingredient_lines,
                "instructions": r.instructions,
                "category": r.category,
                "image": {
                    "id": img.id,
                    "shape": list(img.pixels.shape),
                    "dtype": str(img.pixels.dtype),
                    "b64": base64.b64encode(np.ascontiguousarray(img.pixels).tobytes()).decode("ascii"),
                },
            }
            if r.ground_truth_spans is not None:
                rec["ground_truth_spans"] = r.ground_truth_spans
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_corpus(path) -> Corpus:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"corpus file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ConfigError(f"{path}: empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line 1: malformed header ({exc})") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: line 1: unsupported schema_version "
                          f"{header.get('schema_version')!r}")
    categories = CategoryVocabulary(header["categories"])

    pairs = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {lineno}: malformed record ({exc})") from exc
        for fieldname in _REQUIRED_FIELDS:
            if fieldname not in rec:
                raise ConfigError(f"{path}: line {lineno}: missing field {fieldname!r}")
        if rec["category"] not in categories:
            raise ConfigError(f"{path}: line {lineno}: unknown category {rec['category']!r}")
        img_rec = rec["image"]
        for fieldname in ("id", "shape", "dtype", "b64"):
            if fieldname not in img_rec:
                raise ConfigError(f"{path}: line {lineno}: missing field image.{fieldname}")
        raw_bytes = base64.b64decode(img_rec["b64"])
        pixels = np.frombuffer(raw_bytes, dtype=np.dtype(img_rec["dtype"]))
        pixels = pixels.reshape(img_rec["shape"]).copy()
        try:
            recipe = Recipe(id=rec["id"], title=rec["title"],
                            ingredient_lines=rec["ingredient_lines"],
                            instructions=rec["instructions"], category=rec["category"],
                            ground_truth_spans=rec.get("ground_truth_spans"))
            image = FoodImage(id=img_rec["id"], pixels=pixels, category=rec["category"])
            pairs.append(RecipePair(recipe=recipe, image=image))
        except ConfigError as exc:
            raise ConfigError(f"{path}: line {lineno}: {exc}") from exc

    return Corpus(pairs=pairs, categories=categories,
                  signatures=header.get("signatures"),
                  function_words=tuple(header.get("function_words", FUNCTION_WORDS)))


def split(corpus: Corpus, train_frac: float, val_frac: float, seed: int):
    """Disjoint, exhaustive (train, val, test) partition, stratified by category
    when every category has at least 3 pairs."""
    require(0.0 < train_frac < 1.0, "train_frac must lie in (0, 1)")
    require(0.0 < val_frac < 1.0, "val_frac must lie in (0, 1)")
    require(train_frac + val_frac < 1.0, "train_frac + val_frac must leave a test remainder")

    rng = np.random.default_rng(seed)
    by_cat = {}
    for i, pair in enumerate(corpus.pairs):
        by_cat.setdefault(pair.recipe.category, []).append(i)

    stratified = all(len(v) >= 3 for v in by_cat.values())
    groups = [idx for _, idx in sorted(by_cat.items())] if stratified \
        else [list(range(len(corpus.pairs)))]

    train_idx, val_idx, test_idx = [], [], []
    for group in groups:
        perm = rng.permutation(len(group))
        n = len(group)
        n_train = int(round(train_frac * n))
        n_val = int(round(val_frac * n))
        n_val = min(n_val, n - n_train)
        shuffled = [group[j] for j in perm]
        train_idx += shuffled[:n_train]
        val_idx += shuffled[n_train:n_train + n_val]
        test_idx += shuffled[n_train + n_val:]

    def subset(indices):
        return Corpus(pairs=[corpus.pairs[i] for i in sorted(indices)],
                      categories=corpus.categories, signatures=corpus.signatures,
                      function_words=corpus.function_words)

    return subset(train_idx), subset(val_idx), subset(test_idx)
