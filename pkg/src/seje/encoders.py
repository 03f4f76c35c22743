"""Joint-embedding neural components: recipe encoder, image encoder, and the
modality discriminator.

All modules run in float64 so analytic gradients can be checked against
central finite differences at tight tolerances. Inference is a pure function
of (parameters, inputs); initialization is seeded uniform fan-in scaling, so
construction with the same config is bit-reproducible.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .common import ConfigError, require, seeded_generator, save_checkpoint, load_checkpoint


@dataclass
class JointConfig:
    d: int = 64                # joint embedding dimension
    lstm_hidden: int = 64
    d_w: int = 32              # word/term embedding dimension
    d_s: int = 128             # sentence embedding dimension
    image_resolution: int = 32
    image_channels: int = 8
    disc_hidden: int = 64
    num_categories: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("d", "lstm_hidden", "d_w", "d_s", "disc_hidden"):
            require(getattr(self, name) >= 2, f"{name} must be >= 2")
        require(self.num_categories >= 1, "num_categories must be >= 1")


def _seed_init(module, seed):
    gen = seeded_generator(seed)
    with torch.no_grad():
        for p in module.parameters():
            fan_in = int(np.prod(p.shape[1:])) if p.dim() > 1 else p.shape[0]
            bound = 1.0 / np.sqrt(max(fan_in, 1))
            p.uniform_(-bound, bound, generator=gen)


class RecipeEncoder(nn.Module):
    """LSTM over instruction sentence vectors fused with the key-term feature."""

    def __init__(self, config: JointConfig):
        super().__init__()
        self.config = config
        dtype = torch.float64
        self.instruction_lstm = nn.LSTM(config.d_s, config.lstm_hidden,
                                        batch_first=True, dtype=dtype)
        self.term_fc = nn.Linear(config.d_w, config.lstm_hidden, dtype=dtype)
        self.fusion = nn.Linear(2 * config.lstm_hidden, config.d, dtype=dtype)
        _seed_init(self, config.seed + 101)

    def forward(self, sentence_vectors, lengths, term_features):
        """sentence_vectors: B x S x d_s (zero-padded), lengths: B, term_features: B x d_w."""
        if sentence_vectors.shape[-1] != self.config.d_s:
            raise ConfigError(f"sentence vectors have dim {sentence_vectors.shape[-1]}, "
                              f"expected {self.config.d_s}")
        if term_features.shape[-1] != self.config.d_w:
            raise ConfigError(f"key-term feature has dim {term_features.shape[-1]}, "
                              f"expected {self.config.d_w}")
        packed = nn.utils.rnn.pack_padded_sequence(
            sentence_vectors, lengths, batch_first=True, enforce_sorted=False)
        _, (hidden, _) = self.instruction_lstm(packed)
        instruction = hidden.squeeze(0)
        terms = torch.relu(self.term_fc(term_features))
        return self.fusion(torch.cat([instruction, terms], dim=-1))


class ImageEncoder(nn.Module):
    """Small convolutional backbone fused with the category embedding."""

    def __init__(self, config: JointConfig):
        super().__init__()
        self.config = config
        ch = config.image_channels
        dtype = torch.float64
        self.backbone = nn.Sequential(
            nn.Conv2d(3, ch, 3, stride=2, padding=1, dtype=dtype), nn.ReLU(),
            nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1, dtype=dtype), nn.ReLU(),
            nn.Conv2d(2 * ch, 4 * ch, 3, stride=2, padding=1, dtype=dtype), nn.ReLU(),
        )
        side = (config.image_resolution + 7) // 8
        self.pixel_fc = nn.Linear(4 * ch * side * side, config.lstm_hidden, dtype=dtype)
        self.fusion = nn.Linear(config.lstm_hidden + config.d_w, config.d, dtype=dtype)
        _seed_init(self, config.seed + 202)

    def forward(self, pixels, category_vectors):
        """pixels: B x 3 x H x W, category_vectors: B x d_w."""
        expected = (3, self.config.image_resolution, self.config.image_resolution)
        if tuple(pixels.shape[1:]) != expected:
            raise ConfigError(f"image batch shape {tuple(pixels.shape[1:])} does not match {expected}")
        if category_vectors.shape[-1] != self.config.d_w:
            raise ConfigError(f"category vector has dim {category_vectors.shape[-1]}, "
                              f"expected {self.config.d_w}")
        feats = torch.relu(self.pixel_fc(self.backbone(pixels).flatten(1)))
        return self.fusion(torch.cat([feats, category_vectors], dim=-1))


class Discriminator(nn.Module):
    """Three fully-connected layers scoring whether an embedding is image-like."""

    def __init__(self, config: JointConfig):
        super().__init__()
        dtype = torch.float64
        self.config = config
        self.layers = nn.Sequential(
            nn.Linear(config.d, config.disc_hidden, dtype=dtype), nn.ReLU(),
            nn.Linear(config.disc_hidden, config.disc_hidden, dtype=dtype), nn.ReLU(),
            nn.Linear(config.disc_hidden, 1, dtype=dtype),
        )
        _seed_init(self, config.seed + 303)

    def forward(self, embeddings):
        """Raw (pre-sigmoid) scores, shape (N,)."""
        if embeddings.shape[-1] != self.config.d:
            raise ConfigError(f"discriminator input dim {embeddings.shape[-1]}, "
                              f"expected {self.config.d}")
        return self.layers(embeddings).squeeze(-1)

    def confidence(self, embeddings):
        return torch.sigmoid(self(embeddings))


def encode_recipe(encoder: RecipeEncoder, sentence_vectors, key_term_feature):
    """Joint-space embedding of one recipe from its S x d_s sentence vectors
    and d_w key-term feature. Returns a d-dim tensor (differentiable)."""
    sv = torch.as_tensor(np.asarray(sentence_vectors), dtype=torch.float64)
    require(sv.ndim == 2 and sv.shape[0] >= 1, "need at least one sentence vector")
    feat = torch.as_tensor(np.asarray(key_term_feature), dtype=torch.float64)
    out = encoder(sv.unsqueeze(0), torch.tensor([sv.shape[0]]), feat.unsqueeze(0))
    return out.squeeze(0)


def encode_image(encoder: ImageEncoder, pixels, category_vector):
    """Joint-space embedding of one image (H x W x 3 pixels, d_w category vector)."""
    px = torch.as_tensor(np.asarray(pixels), dtype=torch.float64)
    require(px.ndim == 3 and px.shape[2] == 3, "pixels must be HxWx3")
    cat = torch.as_tensor(np.asarray(category_vector), dtype=torch.float64)
    out = encoder(px.permute(2, 0, 1).unsqueeze(0), cat.unsqueeze(0))
    return out.squeeze(0)


def discriminate(disc: Discriminator, embedding):
    """(confidence, raw_score, input_gradient) for one embedding vector.

    The input gradient is of the raw score, as used by the gradient penalty.
    """
    x = torch.as_tensor(np.asarray(embedding), dtype=torch.float64).detach().requires_grad_(True)
    score = disc(x.unsqueeze(0)).squeeze(0)
    grad = torch.autograd.grad(score, x)[0]
    confidence = float(torch.sigmoid(score.detach()))
    return confidence, float(score.detach()), grad.detach().numpy()


class JointModel(nn.Module):
    """Container for everything the joint-embedding trainer optimizes."""

    def __init__(self, config: JointConfig):
        super().__init__()
        self.config = config
        self.recipe_encoder = RecipeEncoder(config)
        self.image_encoder = ImageEncoder(config)
        self.discriminator = Discriminator(config)
        dtype = torch.float64
        self.recipe_head = nn.Linear(config.d, config.num_categories, dtype=dtype)
        self.image_head = nn.Linear(config.d, config.num_categories, dtype=dtype)
        _seed_init(self.recipe_head, config.seed + 404)
        _seed_init(self.image_head, config.seed + 505)

    def encoder_parameters(self):
        """Everything updated by the encoder step (encoders + category heads)."""
        for module in (self.recipe_encoder, self.image_encoder,
                       self.recipe_head, self.image_head):
            yield from module.parameters()


def save_joint_model(model: JointModel, path, extra=None):
    payload = {
        "kind": "joint_model",
        "config": model.config.__dict__,
        "state": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    save_checkpoint(path, payload)


def load_joint_model(path):
    payload = load_checkpoint(path)
    if payload.get("kind") != "joint_model":
        raise ConfigError(f"{path}: not a joint-model checkpoint")
    model = JointModel(JointConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload
