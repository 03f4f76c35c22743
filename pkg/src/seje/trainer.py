"""Alternating joint-embedding training: one discriminator step, then one
encoder step per batch, with Adam, per-epoch validation MedR tracking,
bit-exact checkpoint/resume, and the ablation grid.

Determinism contract: given the same config, seed, and inputs, repeated runs
produce bit-identical loss traces, and a run resumed from an epoch checkpoint
reproduces the uninterrupted run's remaining trace exactly. All stochasticity
flows through two explicit numpy generators (batch shuffling, interpolation
noise) whose states are serialized into every checkpoint.
"""

import copy
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .common import ConfigError, DivergenceError, require, rng_state, restore_rng, \
    save_checkpoint, load_checkpoint, write_jsonl
from .encoders import JointConfig, JointModel, save_joint_model
from .evalkit import evaluate_subset
from .image_sem import predict_category
from .losses import (EmbeddingBatch, LossConfig, batch_all_triplet_loss,
                     category_alignment_loss, discriminator_alignment_loss,
                     discriminator_loss, total_loss, triplet_loss)
from .text_sem import embed_term, encode_instructions, key_term_feature

BACKGROUND_FRACTION_SALT = 0x9E3779B9


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    disc_steps: int = 1
    # loss switches (ablation axes)
    use_batch_all: bool = False
    use_hard_negatives_single_constraint: bool = False
    use_CA: bool = True
    use_CA_original_labels: bool = False
    use_DA: bool = True
    use_key_terms: bool = True
    use_category_embedding: bool = True
    batch_all_margin: float = 0.3
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        require(self.batch_size >= 2, "batch_size must be >= 2")
        require(self.learning_rate > 0, "learning_rate must be > 0")
        require(self.epochs >= 1, "epochs must be >= 1")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)

    def to_dict(self):
        d = asdict(self)
        return d


@dataclass
class PairFeatures:
    pair_id: str
    sentence_vectors: np.ndarray      # S x d_s
    term_feature: np.ndarray          # d_w
    pixels: np.ndarray                # H x W x 3
    category_vector: np.ndarray       # d_w
    label_index: int


def _background_label(pair_id):
    """Deterministic stand-in for sparse legacy category labels: half of the
    pairs fall into a background class."""
    return (hash_stable(pair_id) ^ BACKGROUND_FRACTION_SALT) % 2 == 0


def hash_stable(text):
    value = 2166136261
    for ch in text.encode("utf-8"):
        value = ((value ^ ch) * 16777619) & 0xFFFFFFFF
    return value


def build_features(corpus, artifacts, config: TrainConfig):
    """Preprocessed Phase II inputs for every pair of `corpus`.

    The image-side category vector embeds the *predicted* classifier label,
    matching inference-time information flow. Ablation switches zero out the
    key-term or category-embedding path instead of resizing the encoders.
    """
    d_w = artifacts.word_table.dim
    features = []
    for pair in corpus.pairs:
        recipe, image = pair.recipe, pair.image
        sv = encode_instructions(artifacts.sentence_encoder, recipe)
        if config.use_key_terms:
            ts = artifacts.term_sets.get(recipe.id)
            feat = key_term_feature(ts, artifacts.word_table) if ts is not None and ts.terms \
                else np.zeros(d_w)
        else:
            feat = np.zeros(d_w)
        if config.use_category_embedding:
            label, _conf = predict_category(artifacts.classifier, image)
            cat_vec = embed_term(artifacts.word_table, label)
        else:
            cat_vec = np.zeros(d_w)
        label_index = corpus.categories.index_of(recipe.category)
        if config.use_CA_original_labels and _background_label(recipe.id):
            label_index = corpus.categories.count  # background class
        features.append(PairFeatures(
            pair_id=recipe.id, sentence_vectors=sv, term_feature=feat,
            pixels=np.asarray(image.pixels, dtype=np.float64),
            category_vector=cat_vec, label_index=label_index,
        ))
    return features


def _collate(features, indices):
    batch = [features[i] for i in indices]
    lengths = torch.tensor([f.sentence_vectors.shape[0] for f in batch])
    width = int(lengths.max())
    d_s = batch[0].sentence_vectors.shape[1]
    sv = torch.zeros((len(batch), width, d_s), dtype=torch.float64)
    for i, f in enumerate(batch):
        sv[i, :f.sentence_vectors.shape[0]] = torch.from_numpy(f.sentence_vectors)
    terms = torch.from_numpy(np.stack([f.term_feature for f in batch]))
    pixels = torch.from_numpy(np.stack([f.pixels for f in batch])).permute(0, 3, 1, 2)
    cats = torch.from_numpy(np.stack([f.category_vector for f in batch]))
    labels = np.array([f.label_index for f in batch])
    return sv, lengths, terms, pixels, cats, labels


@dataclass
class TrainResult:
    model: JointModel
    history: list
    val_history: list
    best_val_medr: float
    best_state: dict


def _category_labels(corpus):
    return np.array([corpus.categories.index_of(p.recipe.category) for p in corpus.pairs])


def compute_embeddings(model: JointModel, features):
    """Joint-space embedding matrices for a list of PairFeatures."""
    model.eval()
    rows_r, rows_v = [], []
    with torch.no_grad():
        for start in range(0, len(features), 64):
            idx = list(range(start, min(start + 64, len(features))))
            sv, lengths, terms, pixels, cats, _ = _collate(features, idx)
            rows_r.append(model.recipe_encoder(sv, lengths, terms))
            rows_v.append(model.image_encoder(pixels, cats))
    return torch.cat(rows_r).numpy(), torch.cat(rows_v).numpy()


def _batch_indices(n, batch_size, rng):
    order = rng.permutation(n)
    batches = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        # a singleton batch cannot form triplets; fold it into the previous one
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _train_step(model, config, batch_tensors, pair_labels, disc_opt, enc_opt, noise_rng):
    sv, lengths, terms, pixels, cats, labels = batch_tensors
    e_r = model.recipe_encoder(sv, lengths, terms)
    e_v = model.image_encoder(pixels, cats)

    l_d_value = 0.0
    if config.use_DA:
        for _ in range(config.disc_steps):
            detached = EmbeddingBatch(e_r.detach(), e_v.detach(), pair_labels)
            l_d = discriminator_loss(model.discriminator, detached, config.loss.lambda_D,
                                     noise_rng, eq4_as_printed=config.loss.eq4_as_printed)
            disc_opt.zero_grad()
            l_d.backward()
            disc_opt.step()
            l_d_value = float(l_d.detach())

    batch = EmbeddingBatch(e_r, e_v, pair_labels)
    if config.use_batch_all:
        l_tri = batch_all_triplet_loss(batch, margin=config.batch_all_margin)
    else:
        l_tri = triplet_loss(batch, config.loss,
                             double_constraint=not config.use_hard_negatives_single_constraint)

    zero = torch.zeros((), dtype=torch.float64)
    if config.use_CA:
        l_ca, l_ca_r, l_ca_v = category_alignment_loss(
            model.recipe_head(e_r), model.image_head(e_v), labels)
    else:
        l_ca = l_ca_r = l_ca_v = zero
    l_da = discriminator_alignment_loss(model.discriminator, e_r) if config.use_DA else zero

    objective, bundle = total_loss(l_tri, l_ca, l_ca_r, l_ca_v, l_da, l_d_value, config.loss)
    if not np.isfinite(bundle.L_total):
        raise DivergenceError(f"non-finite total loss at step (L_total={bundle.L_total})")
    enc_opt.zero_grad()
    objective.backward()
    enc_opt.step()
    return bundle


def train(train_corpus, val_corpus, artifacts, config: TrainConfig,
          joint_config: JointConfig, out_dir=None, resume_from=None) -> TrainResult:
    """Run the alternating optimization loop over epoch-shuffled batches.

    Per batch: the discriminator is updated on detached embeddings, then the
    encoders and category heads are updated on the composite objective with
    the discriminator frozen. The checkpoint of the best validation
    image-to-recipe MedR is retained.
    """
    require(len(train_corpus) >= 2, "training split needs at least 2 pairs")
    features = build_features(train_corpus, artifacts, config)
    pair_labels_all = _category_labels(train_corpus)
    val_features = build_features(val_corpus, artifacts, config) if len(val_corpus) else []

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload.get("kind") != "train_state":
            raise ConfigError(f"{resume_from}: not a training-state checkpoint")
        joint_config = JointConfig(**payload["joint_config"])
        model = JointModel(joint_config)
        model.load_state_dict(payload["model_state"])
        disc_opt, enc_opt = _build_optimizers(model, config)
        disc_opt.load_state_dict(payload["disc_opt_state"])
        enc_opt.load_state_dict(payload["enc_opt_state"])
        shuffle_rng = restore_rng(payload["shuffle_rng"])
        noise_rng = restore_rng(payload["noise_rng"])
        start_epoch = payload["epochs_done"]
        history = list(payload["history"])
        val_history = list(payload["val_history"])
        best_val = payload["best_val_medr"]
        best_state = payload["best_state"]
        step = payload["step"]
    else:
        model = JointModel(joint_config)
        disc_opt, enc_opt = _build_optimizers(model, config)
        shuffle_rng = np.random.default_rng(config.seed)
        noise_rng = np.random.default_rng(config.seed + 1)
        start_epoch = 0
        history, val_history = [], []
        best_val, best_state = float("inf"), None
        step = 0

    model.train()
    for epoch in range(start_epoch, config.epochs):
        for indices in _batch_indices(len(features), config.batch_size, shuffle_rng):
            tensors = _collate(features, indices)
            bundle = _train_step(model, config, tensors, pair_labels_all[indices],
                                 disc_opt, enc_opt, noise_rng)
            history.append(bundle.record(step))
            step += 1

        val_medr = None
        if val_features:
            emb_r, emb_v = compute_embeddings(model, val_features)
            val_medr = evaluate_subset(emb_r, emb_v, ks=(1,))["image_to_recipe"]["medr"]
            if val_medr < best_val:
                best_val = val_medr
                best_state = copy.deepcopy(model.state_dict())
        val_history.append({"epoch": epoch, "val_medr_image_to_recipe": val_medr})
        model.train()

        if out_dir is not None:
            _save_train_state(Path(out_dir) / "train_state.pt", model, joint_config,
                              disc_opt, enc_opt, shuffle_rng, noise_rng, epoch + 1,
                              history, val_history, best_val, best_state, step)

    model.eval()
    if best_state is None:
        best_val = float("nan")
        best_state = copy.deepcopy(model.state_dict())
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_jsonl(out_dir / "loss_trace.jsonl", history)
        write_jsonl(out_dir / "val_history.jsonl", val_history)
        best_model = JointModel(joint_config)
        best_model.load_state_dict(best_state)
        save_joint_model(best_model, out_dir / "best_model.pt",
                         extra={"best_val_medr": best_val, "train_config": config.to_dict()})
    return TrainResult(model=model, history=history, val_history=val_history,
                       best_val_medr=best_val, best_state=best_state)


def _build_optimizers(model, config):
    betas = (config.adam_beta1, config.adam_beta2)
    disc_opt = torch.optim.Adam(model.discriminator.parameters(), lr=config.learning_rate,
                                betas=betas, eps=config.adam_eps)
    enc_opt = torch.optim.Adam(list(model.encoder_parameters()), lr=config.learning_rate,
                               betas=betas, eps=config.adam_eps)
    return disc_opt, enc_opt


def _save_train_state(path, model, joint_config, disc_opt, enc_opt, shuffle_rng,
                      noise_rng, epochs_done, history, val_history, best_val,
                      best_state, step):
    save_checkpoint(path, {
        "kind": "train_state",
        "joint_config": joint_config.__dict__,
        "model_state": model.state_dict(),
        "disc_opt_state": disc_opt.state_dict(),
        "enc_opt_state": enc_opt.state_dict(),
        "shuffle_rng": rng_state(shuffle_rng),
        "noise_rng": rng_state(noise_rng),
        "epochs_done": epochs_done,
        "history": history,
        "val_history": val_history,
        "best_val_medr": best_val,
        "best_state": best_state,
        "step": step,
    })


# Ablation grid rows, mirroring the incremental component study. Each preset
# is applied on top of the caller's base TrainConfig.
ABLATION_ROWS = {
    "SEJE-b": dict(use_batch_all=True, use_CA=False, use_DA=False,
                   use_key_terms=False, use_category_embedding=False),
    "SEJE-b+Cal_V": dict(use_batch_all=True, use_CA=False, use_DA=False,
                         use_key_terms=False, use_category_embedding=True),
    "SEJE-b+Cal_R": dict(use_batch_all=True, use_CA=False, use_DA=False,
                         use_key_terms=True, use_category_embedding=False),
    "SEJE-b+P I": dict(use_batch_all=True, use_CA=False, use_DA=False,
                       use_key_terms=True, use_category_embedding=True),
    "SEJE-b+P I+CA(-)": dict(use_batch_all=True, use_CA=True, use_CA_original_labels=True,
                             use_DA=False, use_key_terms=True, use_category_embedding=True),
    "SEJE-b+P I+CA": dict(use_batch_all=True, use_CA=True, use_DA=False,
                          use_key_terms=True, use_category_embedding=True),
    "SEJE-b+P I+DA": dict(use_batch_all=True, use_CA=False, use_DA=True,
                          use_key_terms=True, use_category_embedding=True),
    "SEJE-b+P I+TRI(-)": dict(use_batch_all=False, use_hard_negatives_single_constraint=True,
                              use_CA=False, use_DA=False, use_key_terms=True,
                              use_category_embedding=True),
    "SEJE-b+P I+TRI": dict(use_batch_all=False, use_hard_negatives_single_constraint=False,
                           use_CA=False, use_DA=False, use_key_terms=True,
                           use_category_embedding=True),
    "SEJE-b+P I+P II": dict(use_batch_all=False, use_hard_negatives_single_constraint=False,
                            use_CA=True, use_DA=True, use_key_terms=True,
                            use_category_embedding=True),
}


def run_ablation(row_names, base_config: TrainConfig, joint_config: JointConfig,
                 train_corpus, val_corpus, test_corpus, artifacts,
                 subset_size=None, trials=1, eval_seed=0):
    """Train and evaluate one run per ablation row; returns machine-readable rows.

    Per-row switch settings come from ABLATION_ROWS; everything else (epochs,
    seed, learning rate) is shared from `base_config` so rows are comparable.
    """
    from .evalkit import evaluate_protocol

    rows = []
    for name in row_names:
        if name not in ABLATION_ROWS:
            raise ConfigError(f"unknown ablation row {name!r}; known rows: "
                              f"{sorted(ABLATION_ROWS)}")
        overrides = ABLATION_ROWS[name]
        cfg = TrainConfig(**{**base_config.to_dict(), **overrides})
        result = train(train_corpus, val_corpus, artifacts, cfg, joint_config)
        eval_model = JointModel(joint_config)
        eval_model.load_state_dict(result.best_state)
        test_features = build_features(test_corpus, artifacts, cfg)
        emb_r, emb_v = compute_embeddings(eval_model, test_features)
        size = subset_size or len(test_corpus)
        reports = evaluate_protocol(emb_r, emb_v, subset_size=size, trials=trials,
                                    seed=eval_seed)
        row = {"component": name, "switches": overrides,
               "best_val_medr": result.best_val_medr}
        for direction, report in reports.items():
            row[direction] = report.record()
        rows.append(row)
    return rows


def format_ablation_table(rows, ks=(1, 5, 10)):
    """Fixed-width text table of the ablation results (image-to-recipe)."""
    header = f"{'Component':<22} {'MedR':>6} " + " ".join(f"{'R@%d' % k:>6}" for k in ks)
    lines = [header, "-" * len(header)]
    for row in rows:
        rep = row["image_to_recipe"]
        cells = " ".join(f"{rep[f'r@{k}_mean']:>6.1f}" for k in ks)
        lines.append(f"{row['component']:<22} {rep['medr_mean']:>6.1f} {cells}")
    return "\n".join(lines)
