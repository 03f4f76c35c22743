"""Image category semantics: a small trainable convolutional classifier and
the mapping from predicted category label to its term embedding.

The classifier is a desk-scale stand-in for a large pretrained backbone; the
contract it preserves is pixels -> (category label, confidence). The category
embedding reuses the word-table term lookup so that recipe-side and image-side
category vectors live in the same space.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .common import ConfigError, require, seeded_generator, save_checkpoint, load_checkpoint
from .text_sem import embed_term


@dataclass
class ClassifierConfig:
    channels: int = 12
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 0.003
    seed: int = 0
    resolution: int = 32


class CategoryClassifier(nn.Module):
    """Three stride-2 conv blocks plus a linear head over N_cat classes."""

    def __init__(self, labels, config: ClassifierConfig):
        super().__init__()
        self.config = config
        self.labels = list(labels)
        ch = config.channels
        dtype = torch.float64
        self.backbone = nn.Sequential(
            nn.Conv2d(3, ch, 3, stride=2, padding=1, dtype=dtype), nn.ReLU(),
            nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1, dtype=dtype), nn.ReLU(),
            nn.Conv2d(2 * ch, 4 * ch, 3, stride=2, padding=1, dtype=dtype), nn.ReLU(),
        )
        side = (config.resolution + 7) // 8
        self.head = nn.Linear(4 * ch * side * side, len(self.labels), dtype=dtype)
        gen = seeded_generator(config.seed)
        with torch.no_grad():
            for p in self.parameters():
                fan_in = int(np.prod(p.shape[1:])) if p.dim() > 1 else p.shape[0]
                bound = 1.0 / np.sqrt(max(fan_in, 1))
                p.uniform_(-bound, bound, generator=gen)

    @property
    def num_classes(self):
        return len(self.labels)

    def forward(self, pixels):
        feats = self.backbone(pixels)
        return self.head(feats.flatten(1))

    def _check_resolution(self, pixels):
        expected = (self.config.resolution, self.config.resolution, 3)
        if tuple(pixels.shape) != expected:
            raise ConfigError(f"image resolution {tuple(pixels.shape)} does not match "
                              f"classifier resolution {expected}")

    @torch.no_grad()
    def probabilities(self, pixels):
        """Softmax class probabilities for one HxWx3 image."""
        self._check_resolution(pixels)
        self.eval()
        x = torch.from_numpy(np.asarray(pixels, dtype=np.float64)).permute(2, 0, 1).unsqueeze(0)
        return torch.softmax(self(x), dim=-1).squeeze(0).numpy()


def _to_batch(images):
    arr = np.stack([np.asarray(img, dtype=np.float64) for img in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2)


def train_category_classifier(images, labels, label_vocabulary,
                              config: ClassifierConfig | None = None,
                              val_images=None, val_labels=None):
    """Cross-entropy training of the category classifier.

    Requires at least 2 distinct classes and 5 images per class. Reports
    validation accuracy on (val_images, val_labels) when given.
    """
    config = config or ClassifierConfig()
    images, labels = list(images), list(labels)
    require(len(images) == len(labels), "images and labels must align")
    counts = {}
    for l in labels:
        counts[l] = counts.get(l, 0) + 1
    if len(counts) < 2:
        raise ConfigError("classifier training needs at least 2 distinct classes")
    require(min(counts.values()) >= 5, "classifier training needs >= 5 images per class")

    label_list = list(label_vocabulary.labels)
    model = CategoryClassifier(label_list, config)
    target = torch.tensor([label_vocabulary.index_of(l) for l in labels], dtype=torch.long)
    x = _to_batch(images)

    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng(config.seed)
    model.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(images), config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size].copy())
            loss = loss_fn(model(x[idx]), target[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()

    model.validation_accuracy = None
    if val_images is not None and val_labels is not None and len(val_images) > 0:
        with torch.no_grad():
            logits = model(_to_batch(val_images))
        pred = logits.argmax(dim=-1).numpy()
        truth = np.array([label_vocabulary.index_of(l) for l in val_labels])
        model.validation_accuracy = float((pred == truth).mean())
    return model


def predict_category(classifier: CategoryClassifier, image):
    """(label, confidence) for one image; argmax ties break to the lowest class index."""
    pixels = image.pixels if hasattr(image, "pixels") else image
    probs = classifier.probabilities(pixels)
    idx = int(np.argmax(probs))
    return classifier.labels[idx], float(probs[idx])


def category_embedding(label, word_table):
    """Term embedding of a category label (shared code path with embed_term)."""
    return embed_term(word_table, label)


def save_classifier(model: CategoryClassifier, path):
    save_checkpoint(path, {
        "kind": "category_classifier",
        "config": model.config.__dict__,
        "labels": model.labels,
        "state": model.state_dict(),
        "validation_accuracy": getattr(model, "validation_accuracy", None),
    })


def load_classifier(path) -> CategoryClassifier:
    payload = load_checkpoint(path)
    if payload.get("kind") != "category_classifier":
        raise ConfigError(f"{path}: not a classifier checkpoint")
    model = CategoryClassifier(payload["labels"], ClassifierConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    model.validation_accuracy = payload.get("validation_accuracy")
    model.eval()
    return model
