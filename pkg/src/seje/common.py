"""Shared plumbing: errors, RNG state capture, jsonl and checkpoint IO."""

import json
import hashlib
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_VERSION = 1


class SejeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SejeError):
    """Invalid configuration or malformed input data (CLI exit code 2)."""


class DivergenceError(SejeError):
    """Training produced a non-finite loss (CLI exit code 3)."""


def require(condition, message):
    if not condition:
        raise ConfigError(message)


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def seeded_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return gen


def write_jsonl(path, records, header=None):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path):
    """Yield (line_number, record) pairs; line numbers are 1-based."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: line {lineno}: not valid JSON ({exc})") from exc


def save_checkpoint(path, payload: dict):
    """Write a versioned checkpoint container (torch serialization, bit-exact tensors)."""
    payload = dict(payload)
    payload["checkpoint_version"] = CHECKPOINT_VERSION
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    # our own trusted files; they contain plain dicts of tensors and primitives
    payload = torch.load(path, weights_only=False)
    version = payload.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version!r}")
    return payload


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
