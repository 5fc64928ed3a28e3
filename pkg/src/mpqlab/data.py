"""Synthetic token-classification task used as the desk-scale stand-in for images."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numerics import sub_rng

# sub-stream keys, fixed so that splits never depend on call order
_PATTERN_STREAM = 1
_SAMPLE_STREAM = 2


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (S, L, in_dim)
    labels: np.ndarray  # (S,) int64

    def __post_init__(self):
        if self.inputs.ndim != 3:
            raise ValueError(f"inputs must be (S, L, in_dim), got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must have one entry per example")

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])

    def take(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])

    def chunks(self, batch_size: int):
        for start in range(0, self.size, batch_size):
            yield self.take(slice(start, start + batch_size))


@dataclass(frozen=True)
class TaskConfig:
    num_classes: int = 4
    tokens: int = 8
    in_dim: int = 8
    signal_tokens: int = 4  # tokens per example that carry the class pattern
    signal: float = 1.0
    noise: float = 1.0
    n_train: int = 2048
    n_calib: int = 256
    n_test: int = 1024

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 1 <= self.signal_tokens <= self.tokens:
            raise ValueError("signal_tokens must lie in [1, tokens]")
        if self.noise < 0 or self.signal < 0:
            raise ValueError("signal and noise must be non-negative")
        if min(self.n_train, self.n_calib, self.n_test) < 1:
            raise ValueError("every split needs at least one example")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Splits:
    train: Batch
    calib: Batch
    test: Batch


def class_patterns(seed: int, cfg: TaskConfig) -> np.ndarray:
    """Planted per-class patterns, zero outside the signal tokens. Shape (C, L, in_dim)."""
    rng = sub_rng(seed, _PATTERN_STREAM)
    patterns = rng.standard_normal((cfg.num_classes, cfg.tokens, cfg.in_dim))
    patterns[:, cfg.signal_tokens :, :] = 0.0
    return patterns


def gen_task(seed: int, cfg: TaskConfig | None = None) -> Splits:
    """Draw train / calibration / test splits with disjoint example indices.

    Labels are balanced (round-robin then shuffled). Each example is
    ``signal * pattern[label] + noise * N(0, 1)``.
    """
    cfg = cfg or TaskConfig()
    cfg.validate()
    patterns = class_patterns(seed, cfg)
    rng = sub_rng(seed, _SAMPLE_STREAM)
    total = cfg.n_train + cfg.n_calib + cfg.n_test
    labels = np.arange(total, dtype=np.int64) % cfg.num_classes
    labels = labels[rng.permutation(total)]
    noise = rng.standard_normal((total, cfg.tokens, cfg.in_dim))
    inputs = cfg.signal * patterns[labels] + cfg.noise * noise
    full = Batch(inputs, labels)
    a, b = cfg.n_train, cfg.n_train + cfg.n_calib
    return Splits(full.take(slice(0, a)), full.take(slice(a, b)), full.take(slice(b, total)))
