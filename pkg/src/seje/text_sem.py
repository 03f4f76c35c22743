"""Text semantics: CBOW word embeddings, key-term feature composition, and the
instruction-sentence encoder.

The word table is trained from scratch with negative-sampling CBOW over the
recipe texts (entity surfaces underscore-joined into single tokens first).
The sentence encoder is an LSTM autoencoder whose training objective also
decodes the previous and next instruction sentence of the same recipe from the
encoding, so the encoding carries cross-sentence context; at inference it is a
pure function of a single sentence.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .common import ConfigError, require, seeded_generator, save_checkpoint, load_checkpoint
from .term_extract import segment_entities

WORD_TABLE_VERSION = 1


class WordEmbeddingTable:
    """Token -> dense vector lookup backed by a |V| x d_w matrix."""

    def __init__(self, vocabulary, matrix, seed=None):
        self.vocabulary = dict(vocabulary)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.seed = seed
        require(self.matrix.ndim == 2 and self.matrix.shape[0] == len(self.vocabulary),
                "embedding matrix must have one row per vocabulary token")
        require(np.isfinite(self.matrix).all(), "embedding matrix must be finite")

    @property
    def dim(self):
        return self.matrix.shape[1]

    def __contains__(self, token):
        return token in self.vocabulary

    def vector(self, token):
        idx = self.vocabulary.get(token)
        return self.matrix[idx] if idx is not None else None


def save_word_table(table: WordEmbeddingTable, path):
    tokens = sorted(table.vocabulary, key=table.vocabulary.get)
    np.savez(path, version=WORD_TABLE_VERSION, matrix=table.matrix,
             tokens=np.array(tokens, dtype=object), d_w=table.dim,
             seed=-1 if table.seed is None else table.seed)


def load_word_table(path) -> WordEmbeddingTable:
    with np.load(path, allow_pickle=True) as data:
        if int(data["version"]) != WORD_TABLE_VERSION:
            raise ConfigError(f"{path}: unsupported word table version {data['version']}")
        tokens = [str(t) for t in data["tokens"]]
        seed = int(data["seed"])
        return WordEmbeddingTable({t: i for i, t in enumerate(tokens)}, data["matrix"],
                                  seed=None if seed < 0 else seed)


def joined_corpus_texts(corpus, entity_vocabulary):
    """All corpus sentences with entity surfaces joined into single tokens."""
    texts = []
    for pair in corpus.pairs:
        for sent in pair.recipe.all_sentences():
            segments, flags = segment_entities(sent, entity_vocabulary)
            texts.append(["_".join(seg) if flag else seg[0]
                          for seg, flag in zip(segments, flags)])
    return texts


def train_cbow(corpus_texts, d_w=32, window=4, epochs=10, seed=0,
               negatives=5, learning_rate=0.05) -> WordEmbeddingTable:
    """Negative-sampling CBOW trained over tokenized corpus texts."""
    texts = [list(t) for t in corpus_texts if len(t) > 0]
    vocab = {}
    counts = []
    for sent in texts:
        for tok in sent:
            if tok not in vocab:
                vocab[tok] = len(vocab)
                counts.append(0)
            counts[vocab[tok]] += 1
    if len(vocab) < 2:
        raise ConfigError("CBOW needs a vocabulary of at least 2 tokens")

    rng = np.random.default_rng(seed)
    vsize = len(vocab)
    w_in = rng.uniform(-0.5 / d_w, 0.5 / d_w, size=(vsize, d_w))
    w_out = np.zeros((vsize, d_w))

    noise = np.asarray(counts, dtype=np.float64) ** 0.75
    noise /= noise.sum()

    encoded = [np.asarray([vocab[t] for t in sent]) for sent in texts]
    train_losses = []
    for _ in range(epochs):
        order = rng.permutation(len(encoded))
        total, n_terms = 0.0, 0
        for si in order:
            ids = encoded[si]
            length = len(ids)
            if length < 2:
                continue
            for t in range(length):
                lo, hi = max(0, t - window), min(length, t + window + 1)
                ctx = np.concatenate([ids[lo:t], ids[t + 1:hi]])
                if len(ctx) == 0:
                    continue
                h = w_in[ctx].mean(axis=0)
                targets = np.concatenate([[ids[t]], rng.choice(vsize, size=negatives, p=noise)])
                sign = np.concatenate([[1.0], -np.ones(negatives)])
                scores = w_out[targets] @ h
                sig = 1.0 / (1.0 + np.exp(-sign * scores))
                total += float(-np.log(np.clip(sig, 1e-12, None)).sum())
                n_terms += len(targets)
                grad = (sig - 1.0) * sign  # d loss / d score
                grad_h = grad @ w_out[targets]
                np.add.at(w_out, targets, np.outer(grad, h) * -learning_rate)
                np.add.at(w_in, ctx, np.tile(grad_h * (-learning_rate / len(ctx)), (len(ctx), 1)))
        train_losses.append(total / max(n_terms, 1))

    table = WordEmbeddingTable(vocab, w_in, seed=seed)
    table.train_losses = train_losses
    return table


def embed_term(table: WordEmbeddingTable, surface):
    """Vector for a (possibly multi-word) key-term surface.

    Exact vocabulary row when present; otherwise the mean of the known
    constituent-word rows; otherwise a zero vector with a warning.
    """
    vec = table.vector(surface)
    if vec is not None:
        return vec.copy()
    parts = [table.vector(p) for p in surface.split("_")]
    known = [p for p in parts if p is not None]
    if known:
        return np.mean(known, axis=0)
    warnings.warn(f"term {surface!r} fully out of vocabulary; using zero vector")
    return np.zeros(table.dim)


def key_term_feature(term_set, table: WordEmbeddingTable):
    """Rating-weighted combination of the term vectors: sum_t weight(t) * embed(t)."""
    if not term_set.terms:
        warnings.warn(f"recipe {term_set.recipe_id}: empty key-term set; zero feature")
        return np.zeros(table.dim)
    feature = np.zeros(table.dim)
    for term in term_set.terms:
        feature += term.weight * embed_term(table, term.surface)
    require(bool(np.isfinite(feature).all()), "key-term feature must be finite")
    return feature


@dataclass
class SentenceEncoderConfig:
    d_s: int = 128
    embedding_dim: int = 32
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.02
    seed: int = 0


_PAD, _UNK, _BOS = 0, 1, 2


class SentenceEncoder(nn.Module):
    """LSTM sentence autoencoder with previous/next-sentence decoding heads."""

    def __init__(self, vocabulary, config: SentenceEncoderConfig):
        super().__init__()
        self.config = config
        self.vocabulary = dict(vocabulary)  # token -> index (>= 3)
        vsize = len(self.vocabulary) + 3
        dtype = torch.float64
        self.embedding = nn.Embedding(vsize, config.embedding_dim, padding_idx=_PAD, dtype=dtype)
        self.encoder = nn.LSTM(config.embedding_dim, config.d_s, batch_first=True, dtype=dtype)
        # decoders take [token embedding; sentence encoding] at every step, so
        # the encoding acts as persistent context while predicting each target
        self.decoders = nn.ModuleDict({
            name: nn.LSTM(config.embedding_dim + config.d_s, config.d_s,
                          batch_first=True, dtype=dtype)
            for name in ("recon", "prev", "next")
        })
        self.heads = nn.ModuleDict({
            name: nn.Linear(config.d_s, vsize, dtype=dtype)
            for name in ("recon", "prev", "next")
        })
        gen = seeded_generator(config.seed)
        with torch.no_grad():
            for p in self.parameters():
                fan_in = p.shape[-1] if p.dim() > 1 else p.shape[0]
                bound = 1.0 / np.sqrt(max(fan_in, 1))
                p.uniform_(-bound, bound, generator=gen)
        self.train_losses = []

    def encode_ids(self, tokens):
        return [self.vocabulary.get(t, _UNK) for t in tokens]

    def forward(self, padded_ids, lengths):
        emb = self.embedding(padded_ids)
        packed = nn.utils.rnn.pack_padded_sequence(emb, lengths, batch_first=True,
                                                   enforce_sorted=False)
        _, (hidden, _) = self.encoder(packed)
        return hidden.squeeze(0)  # B x d_s

    def decode_logits(self, name, encoding, padded_targets):
        """Teacher-forced decoder logits for one stream (recon/prev/next)."""
        bos = torch.full((padded_targets.shape[0], 1), _BOS, dtype=torch.long)
        inputs = torch.cat([bos, padded_targets[:, :-1]], dim=1)
        emb = self.embedding(inputs)
        context = encoding.unsqueeze(1).expand(-1, emb.shape[1], -1)
        out, _ = self.decoders[name](torch.cat([emb, context], dim=-1))
        return self.heads[name](out)

    @torch.no_grad()
    def encode(self, tokens):
        """d_s embedding of a single sentence (pure function of the sentence)."""
        self.eval()
        ids = torch.tensor([self.encode_ids(tokens)], dtype=torch.long)
        return self(ids, torch.tensor([max(len(tokens), 1)])).squeeze(0).numpy()


def _pad_batch(id_lists):
    lengths = torch.tensor([max(len(ids), 1) for ids in id_lists])
    width = int(lengths.max())
    padded = torch.full((len(id_lists), width), _PAD, dtype=torch.long)
    for i, ids in enumerate(id_lists):
        padded[i, :len(ids)] = torch.tensor(ids, dtype=torch.long)
    return padded, lengths


def train_sentence_encoder(recipes_sentences, config: SentenceEncoderConfig | None = None):
    """Train the sentence autoencoder on instruction sentences grouped by recipe.

    Recipes with at least 2 sentences supply the previous/next-sentence
    prediction targets; a corpus of single-sentence recipes falls back to pure
    self-reconstruction.
    """
    config = config or SentenceEncoderConfig()
    groups = [list(g) for g in recipes_sentences if len(g) > 0]
    sentences = [s for g in groups for s in g]
    if not sentences:
        raise ConfigError("sentence-encoder training corpus is empty")

    vocab = {}
    for sent in sentences:
        for tok in sent:
            vocab.setdefault(tok, len(vocab) + 3)

    model = SentenceEncoder(vocab, config)
    samples = []
    for group in groups:
        for i, sent in enumerate(group):
            prev_sent = group[i - 1] if i > 0 else None
            next_sent = group[i + 1] if i + 1 < len(group) else None
            samples.append((model.encode_ids(sent),
                            model.encode_ids(prev_sent) if prev_sent else None,
                            model.encode_ids(next_sent) if next_sent else None))

    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    loss_fn = nn.CrossEntropyLoss(ignore_index=_PAD, reduction="sum")
    rng = np.random.default_rng(config.seed)
    model.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(samples))
        total, count = 0.0, 0
        for start in range(0, len(samples), config.batch_size):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            ids, lengths = _pad_batch([b[0] for b in batch])
            encoding = model(ids, lengths)
            loss = torch.zeros((), dtype=torch.float64)
            for stream, pick in (("recon", 0), ("prev", 1), ("next", 2)):
                rows = [i for i, b in enumerate(batch) if b[pick] is not None]
                if not rows:
                    continue
                targets, _ = _pad_batch([batch[i][pick] for i in rows])
                logits = model.decode_logits(stream, encoding[rows], targets)
                loss = loss + loss_fn(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))
                count += int((targets != _PAD).sum())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
        model.train_losses.append(total / max(count, 1))
    model.eval()
    return model


def encode_instructions(encoder: SentenceEncoder, recipe):
    """One d_s vector per instruction sentence, order preserved."""
    return np.stack([encoder.encode(sent) for sent in recipe.instructions])


def reconstruction_accuracy(encoder: SentenceEncoder, sentences):
    """Teacher-forced token accuracy of the self-reconstruction decoder."""
    encoder.eval()
    correct, total = 0, 0
    with torch.no_grad():
        for sent in sentences:
            ids, lengths = _pad_batch([encoder.encode_ids(sent)])
            encoding = encoder(ids, lengths)
            logits = encoder.decode_logits("recon", encoding, ids)
            pred = logits.argmax(dim=-1)
            mask = ids != _PAD
            correct += int((pred[mask] == ids[mask]).sum())
            total += int(mask.sum())
    return correct / max(total, 1)


def save_sentence_encoder(encoder: SentenceEncoder, path):
    save_checkpoint(path, {
        "kind": "sentence_encoder",
        "config": encoder.config.__dict__,
        "vocabulary": encoder.vocabulary,
        "state": encoder.state_dict(),
    })


def load_sentence_encoder(path) -> SentenceEncoder:
    payload = load_checkpoint(path)
    if payload.get("kind") != "sentence_encoder":
        raise ConfigError(f"{path}: not a sentence-encoder checkpoint")
    model = SentenceEncoder(payload["vocabulary"], SentenceEncoderConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model
