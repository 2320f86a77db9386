"""Multi-class label masks and per-class random mask ablation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Mask:
    """Integer label map with values in {0, ..., num_classes - 1}; 0 is background."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"mask labels must be 2-D, got shape {labels.shape}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"mask labels must lie in [0, {self.num_classes - 1}]")
        labels = labels.astype(np.uint8 if self.num_classes <= 256 else np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.labels, other.labels)

    def __hash__(self):
        return hash((self.num_classes, self.labels.shape, self.labels.tobytes()))

    @classmethod
    def empty(cls, height: int, width: int, num_classes: int) -> Mask:
        return cls(np.zeros((height, width), dtype=np.uint8), num_classes)


@dataclass(frozen=True)
class AblationPattern:
    """Set of foreground classes to erase from a mask."""

    num_classes: int
    removed: frozenset[int]

    def __post_init__(self):
        removed = frozenset(int(c) for c in self.removed)
        bad = [c for c in removed if not 1 <= c < self.num_classes]
        if bad:
            raise ValueError(f"removable classes are 1..{self.num_classes - 1}, got {sorted(bad)}")
        object.__setattr__(self, "removed", removed)


def apply_pattern(mask: Mask, pattern: AblationPattern) -> Mask:
    if pattern.num_classes != mask.num_classes:
        raise ValueError(f"pattern has C={pattern.num_classes} but mask has C={mask.num_classes}")
    if not pattern.removed:
        return mask
    labels = mask.labels.copy()
    labels[np.isin(labels, sorted(pattern.removed))] = 0
    return Mask(labels, mask.num_classes)


def draw_pattern(num_classes: int, rng: np.random.Generator) -> AblationPattern:
    """One fair coin per foreground class, in class order."""
    coins = rng.random(max(num_classes - 1, 0)) < 0.5
    return AblationPattern(num_classes, frozenset(c + 1 for c in np.flatnonzero(coins)))


def ablate_random(mask: Mask, rng: np.random.Generator) -> tuple[Mask, AblationPattern]:
    pattern = draw_pattern(mask.num_classes, rng)
    return apply_pattern(mask, pattern), pattern


def enumerate_patterns(num_classes: int) -> list[AblationPattern]:
    """All 2^(C-1) subsets of the foreground classes in binary-counting order.

    Bit ``c - 1`` of the counter marks class ``c`` as removed.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    nfg = num_classes - 1
    return [
        AblationPattern(num_classes, frozenset(c + 1 for c in range(nfg) if code >> c & 1))
        for code in range(2 ** nfg)
    ]


def pattern_index(pattern: AblationPattern) -> int:
    """Position of ``pattern`` in :func:`enumerate_patterns` order."""
    return sum(1 << (c - 1) for c in pattern.removed)


def ablate_label_batch(labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> tuple[np.ndarray, list[AblationPattern]]:
    """Ablate each (H, W) map in an (N, H, W) batch independently."""
    out = np.empty_like(labels)
    patterns = []
    for i, lab in enumerate(labels):
        ablated, pattern = ablate_random(Mask(lab, num_classes), rng)
        out[i] = ablated.labels
        patterns.append(pattern)
    return out, patterns


__all__ = [
    "Mask",
    "AblationPattern",
    "apply_pattern",
    "ablate_random",
    "draw_pattern",
    "enumerate_patterns",
    "pattern_index",
    "ablate_label_batch",
]
