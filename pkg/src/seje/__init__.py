"""Semantics-enhanced text-image joint embedding at desk scale.

Two-phase pipeline: semantic preprocessing of recipe text and food images
(key-term extraction, term rating, word/sentence/category embeddings), then
joint embedding training with a calibrated composite loss, plus the
cross-modal retrieval evaluation protocol.
"""

__version__ = "0.1.0"
