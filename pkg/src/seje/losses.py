"""Joint-embedding loss functions: soft-margin batch-hard triplet loss with
double negative sampling, category alignment, discriminator losses with
gradient penalty, and their weighted composition.

Conventions fixed here:
  - Losses are summed over the batch, matching the sigma notation of the
    defining formulas.
  - The hard negative for an anchor must be the closest candidate in the other
    modality that is not the anchor's own pair AND carries a different
    category label (double constraint). Anchors with no valid negative
    contribute zero.
  - The discriminator treats image embeddings as the positive class by
    default; `eq4_as_printed` flips the modality roles for comparison.
  - The gradient penalty is computed on the raw (pre-sigmoid) score at random
    interpolations between paired embeddings.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch.func import functional_call
from torch.nn import functional as F

from .common import ConfigError, require

_DIST_EPS = 1e-12      # squared-distance floor, keeps sqrt differentiable at zero
_CONF_EPS = 1e-7       # confidence clamp before logs
_SOFTPLUS_LINEAR = 50.0  # exp(-50) ~ 2e-22, far below oracle tolerances


@dataclass
class LossConfig:
    lambda1: float = 0.005
    lambda2: float = 0.005
    gamma: float = 16.0
    margin: float = 0.0
    lambda_D: float = 10.0
    eq4_as_printed: bool = False

    def __post_init__(self):
        require(self.gamma > 0, "gamma must be > 0")
        require(self.lambda_D >= 0, "lambda_D must be >= 0")


class EmbeddingBatch:
    """Aligned N x d recipe/image embedding matrices with per-pair categories."""

    def __init__(self, recipe_embeddings, image_embeddings, categories):
        self.recipe_embeddings = torch.as_tensor(recipe_embeddings, dtype=torch.float64) \
            if not torch.is_tensor(recipe_embeddings) else recipe_embeddings
        self.image_embeddings = torch.as_tensor(image_embeddings, dtype=torch.float64) \
            if not torch.is_tensor(image_embeddings) else image_embeddings
        self.categories = np.asarray(categories)
        require(self.recipe_embeddings.shape == self.image_embeddings.shape,
                "recipe and image embedding matrices must have the same shape")
        require(self.recipe_embeddings.ndim == 2, "embedding batches must be N x d")
        require(len(self.categories) == self.recipe_embeddings.shape[0],
                "one category per pair required")

    @property
    def size(self):
        return self.recipe_embeddings.shape[0]


@dataclass
class LossBundle:
    L_TRI: float
    L_CA: float
    L_CA_R: float
    L_CA_V: float
    L_DA: float
    L_D: float
    L_total: float

    def record(self, step):
        return {"step": step, "L_TRI": self.L_TRI, "L_CA_R": self.L_CA_R,
                "L_CA_V": self.L_CA_V, "L_DA": self.L_DA, "L_D": self.L_D,
                "L_total": self.L_total}


def pairwise_distances(a, b):
    """N x M Euclidean distance matrix between row vectors of `a` and `b`.

    Exactly zero (with zero gradient) where the squared distance underflows
    the smoothing floor, so coincident embeddings do not produce NaN grads.
    """
    a = torch.as_tensor(a, dtype=torch.float64) if not torch.is_tensor(a) else a
    b = torch.as_tensor(b, dtype=torch.float64) if not torch.is_tensor(b) else b
    if a.shape[-1] != b.shape[-1]:
        raise ConfigError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    sq = (a.unsqueeze(1) - b.unsqueeze(0)).pow(2).sum(-1)
    return torch.where(sq > _DIST_EPS, sq.clamp_min(_DIST_EPS).sqrt(), sq * 0.0)


def select_hard_negative(dist_row, categories, anchor_index):
    """Index of the closest candidate with a different category than the anchor.

    Ties break to the lowest index; returns None when every other candidate
    shares the anchor's category (the anchor is then skipped by the loss).
    """
    dist_row = np.asarray(dist_row, dtype=np.float64)
    categories = np.asarray(categories)
    valid = categories != categories[anchor_index]
    valid[anchor_index] = False
    if not valid.any():
        return None
    masked = np.where(valid, dist_row, np.inf)
    return int(np.argmin(masked))


def _softplus(x):
    return F.softplus(x, beta=1.0, threshold=_SOFTPLUS_LINEAR)


def _direction_loss(dist, d_ap, invalid, gamma, margin):
    masked = dist.masked_fill(invalid, float("inf"))
    d_an, _ = masked.min(dim=1)
    has_valid = (~invalid).any(dim=1)
    d_an_safe = torch.where(has_valid, d_an, d_ap.detach())
    terms = _softplus(gamma * (d_ap - d_an_safe + margin))
    return torch.where(has_valid, terms, torch.zeros_like(terms)).sum()


def triplet_loss(batch: EmbeddingBatch, config: LossConfig, double_constraint=True):
    """Soft-margin batch-hard triplet loss summed over both retrieval directions.

    ln(1 + exp(gamma * (d(anchor, positive) - min d(anchor, hard negative) + m)))
    per anchor; the positive is the anchor's own pair. With `double_constraint`
    the hard-negative search excludes candidates sharing the anchor's category.
    """
    if batch.size < 2:
        raise ConfigError("triplet loss needs a batch of at least 2 pairs")
    dist = pairwise_distances(batch.recipe_embeddings, batch.image_embeddings)
    n = batch.size
    eye = torch.eye(n, dtype=torch.bool)
    if double_constraint:
        same = torch.from_numpy(batch.categories[:, None] == batch.categories[None, :])
        invalid = same | eye
    else:
        invalid = eye
    d_ap = dist.diagonal()
    loss_recipe_anchor = _direction_loss(dist, d_ap, invalid, config.gamma, config.margin)
    loss_image_anchor = _direction_loss(dist.t(), d_ap, invalid.t(), config.gamma, config.margin)
    return loss_recipe_anchor + loss_image_anchor


def batch_all_triplet_loss(batch: EmbeddingBatch, margin=0.3):
    """Naive batch-all hinge triplet baseline: mean over all anchor/negative
    slots in both directions, with every non-matching candidate as a negative."""
    if batch.size < 2:
        raise ConfigError("triplet loss needs a batch of at least 2 pairs")
    dist = pairwise_distances(batch.recipe_embeddings, batch.image_embeddings)
    n = batch.size
    off_diag = ~torch.eye(n, dtype=torch.bool)
    d_ap = dist.diagonal()
    hinge_r = torch.relu(d_ap.unsqueeze(1) - dist + margin)[off_diag]
    hinge_v = torch.relu(d_ap.unsqueeze(0) - dist + margin).t()[off_diag]
    return (hinge_r.sum() + hinge_v.sum()) / (2 * n * (n - 1))


def category_alignment_loss(recipe_logits, image_logits, labels):
    """Cross-entropy alignment of each modality's category prediction.

    Logits are converted to probabilities internally; the loss is the summed
    negative log-probability of the true label, per modality, plus their sum.
    Returns (L_CA, L_CA_R, L_CA_V).
    """
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    n_c = recipe_logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_c):
        raise ConfigError(f"category label out of range [0, {n_c})")
    l_r = F.cross_entropy(recipe_logits, labels, reduction="sum")
    l_v = F.cross_entropy(image_logits, labels, reduction="sum")
    return l_r + l_v, l_r, l_v


def _clamped_confidence(disc, embeddings, detach_params=False):
    if detach_params:
        params = {k: v.detach() for k, v in disc.named_parameters()}
        scores = functional_call(disc, params, (embeddings,))
    else:
        scores = disc(embeddings)
    return torch.sigmoid(scores).clamp(_CONF_EPS, 1.0 - _CONF_EPS)


def gradient_penalty(disc, recipe_embeddings, image_embeddings, noise_source):
    """Sum over pairs of (||grad_x score(x)|| - 1)^2 at random interpolations
    x_i = eps_i * recipe_i + (1 - eps_i) * image_i, eps_i ~ U[0, 1].

    The norm's gradient is differentiable (create_graph), so the penalty can
    itself be minimized; gradients reach the embeddings too when they are
    attached to a graph.
    """
    n = recipe_embeddings.shape[0]
    eps = torch.from_numpy(noise_source.random(n)).unsqueeze(1)
    x = eps * recipe_embeddings + (1.0 - eps) * image_embeddings
    if not x.requires_grad:
        x.requires_grad_(True)
    scores = disc(x)
    grads = torch.autograd.grad(scores.sum(), x, create_graph=True)[0]
    norms = (grads.pow(2).sum(dim=1) + _DIST_EPS).sqrt()
    return ((norms - 1.0) ** 2).sum()


def discriminator_loss(disc, batch: EmbeddingBatch, lambda_D, noise_source,
                       eq4_as_printed=False):
    """Minimized objective training the discriminator to score image
    embeddings high and recipe embeddings low, plus the gradient penalty.

    `eq4_as_printed` swaps which modality is treated as the positive class.
    The caller detaches encoder outputs when only the discriminator should
    learn (as the trainer's discriminator step does).
    """
    conf_r = _clamped_confidence(disc, batch.recipe_embeddings)
    conf_v = _clamped_confidence(disc, batch.image_embeddings)
    if eq4_as_printed:
        nll = -(torch.log(conf_r) + torch.log1p(-conf_v)).sum()
    else:
        nll = -(torch.log(conf_v) + torch.log1p(-conf_r)).sum()
    if lambda_D == 0.0:
        return nll
    penalty = gradient_penalty(disc, batch.recipe_embeddings, batch.image_embeddings,
                               noise_source)
    return nll + lambda_D * penalty


def discriminator_alignment_loss(disc, recipe_embeddings):
    """Alignment regularizer sum_i ln(1 - F_D(recipe_i)), minimized by the
    encoders so recipe embeddings become image-like to the discriminator.

    Gradients flow into the recipe embeddings only; the discriminator's
    parameters are detached inside.
    """
    conf = _clamped_confidence(disc, recipe_embeddings, detach_params=True)
    return torch.log1p(-conf).sum()


def total_loss(l_tri, l_ca, l_ca_r, l_ca_v, l_da, l_d, config: LossConfig):
    """Compose the encoder objective L = L_TRI + lambda1 * L_CA + lambda2 * L_DA.

    Returns (objective, bundle): the differentiable scalar the encoder step
    minimizes, and the float bundle for logging. L_D is reported separately;
    it trains the discriminator, not the encoders.
    """
    objective = l_tri + config.lambda1 * l_ca + config.lambda2 * l_da

    def _scalar(x):
        return float(x.detach()) if torch.is_tensor(x) else float(x)

    bundle = LossBundle(
        L_TRI=_scalar(l_tri), L_CA=_scalar(l_ca), L_CA_R=_scalar(l_ca_r),
        L_CA_V=_scalar(l_ca_v), L_DA=_scalar(l_da), L_D=_scalar(l_d),
        L_total=_scalar(objective),
    )
    return objective, bundle
