"""Labeled token blocks shared by the embedding pipeline and the network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SEGMENT_KINDS = ("endo", "exo", "meta")


@dataclass(frozen=True)
class TokenBlock:
    """An ordered sequence of model-dimension tokens with per-token segment labels."""

    tokens: np.ndarray  # (K, D) float32
    segments: tuple[str, ...]

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be a 2-d array, got shape {self.tokens.shape}")
        if len(self.segments) != self.tokens.shape[0]:
            raise ValueError(
                f"{len(self.segments)} segment labels for {self.tokens.shape[0]} tokens"
            )
        bad = set(self.segments) - set(SEGMENT_KINDS)
        if bad:
            raise ValueError(f"unknown segment labels: {sorted(bad)}")

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def segment_labels(n_endo: int, n_exo: int, n_meta: int) -> tuple[str, ...]:
    """Token labels in the fixed concatenation order: endogenous, exogenous, metadata."""
    return ("endo",) * n_endo + ("exo",) * n_exo + ("meta",) * n_meta


def concat_blocks(*blocks: TokenBlock) -> TokenBlock:
    """Concatenate token blocks, preserving order and labels. Dimensions must match."""
    nonempty = [b for b in blocks if b.count > 0]
    if not nonempty:
        raise ValueError("cannot concatenate only empty token blocks")
    dims = {b.dim for b in nonempty}
    if len(dims) != 1:
        raise ValueError(f"token dimension mismatch across blocks: {sorted(dims)}")
    tokens = np.concatenate([b.tokens for b in nonempty], axis=0)
    segments = tuple(label for b in nonempty for label in b.segments)
    return TokenBlock(tokens=tokens, segments=segments)


def empty_block(dim: int) -> TokenBlock:
    return TokenBlock(tokens=np.zeros((0, dim), dtype=np.float32), segments=())
