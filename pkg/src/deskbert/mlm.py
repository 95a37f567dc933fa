"""Masked-language-modeling corruption and loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import EmptySelectionError, Tensor, softmax_cross_entropy
from .tokenizer import BYTE_OFFSET, MASK, SPECIAL_IDS

STRATEGIES = ("bert-80-10-10", "mask-only")

# replacement categories recorded per selected position
KEEP, MASKED, RANDOM = 0, 1, 2


@dataclass(frozen=True)
class MaskingPolicy:
    ratio: float = 0.5
    strategy: str = "bert-80-10-10"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"masking ratio must lie in (0, 1), got {self.ratio}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown masking strategy {self.strategy!r}; expected one of {STRATEGIES}")


PRETRAIN_POLICY = MaskingPolicy(ratio=0.5)
ANNEAL_POLICY = MaskingPolicy(ratio=0.1)


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    original_ids: np.ndarray
    selected: np.ndarray
    pad_mask: np.ndarray
    eligible: np.ndarray
    category: np.ndarray

    @property
    def n_selected(self) -> int:
        return int(self.selected.sum())

    @property
    def masked_fraction(self) -> float:
        n = int(self.eligible.sum())
        return self.n_selected / n if n else 0.0


def selection_count(ratio: float, eligible: int) -> int:
    """round(ratio * eligible) with halves rounded up."""
    return int(np.floor(ratio * eligible + 0.5))


def apply_masking(
    ids,
    policy: MaskingPolicy,
    vocab_size: int,
    pad_mask=None,
    step: int = 0,
    special_ids=SPECIAL_IDS,
) -> MaskedBatch:
    """Select exactly round(ratio * eligible) positions per sequence and corrupt them.

    Each row draws from its own generator seeded by (policy.seed, step, row), so
    the result does not depend on how rows are batched or processed.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    pad = np.zeros(ids.shape, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool).reshape(ids.shape)
    eligible = ~pad & ~np.isin(ids, list(special_ids))
    corrupted = ids.copy()
    selected = np.zeros(ids.shape, dtype=bool)
    category = np.full(ids.shape, -1, dtype=np.int8)
    for row in range(ids.shape[0]):
        cand = np.flatnonzero(eligible[row])
        if cand.size == 0:
            raise ValueError(f"sequence {row} has no maskable tokens")
        rng = np.random.default_rng([policy.seed, step, row])
        k = selection_count(policy.ratio, cand.size)
        chosen = np.sort(rng.choice(cand, size=k, replace=False))
        selected[row, chosen] = True
        if policy.strategy == "mask-only":
            cat = np.full(k, MASKED, dtype=np.int8)
        else:
            u = rng.random(k)
            cat = np.where(u < 0.8, MASKED, np.where(u < 0.9, RANDOM, KEEP)).astype(np.int8)
        category[row, chosen] = cat
        corrupted[row, chosen[cat == MASKED]] = MASK
        n_rand = int((cat == RANDOM).sum())
        if n_rand:
            corrupted[row, chosen[cat == RANDOM]] = rng.integers(BYTE_OFFSET, vocab_size, size=n_rand)
    return MaskedBatch(corrupted, ids, selected, pad, eligible, category)


def mlm_loss(logits: Tensor, batch: MaskedBatch) -> Tensor:
    """Cross-entropy of the original ids, averaged over selected positions in the batch."""
    if batch.n_selected == 0:
        raise EmptySelectionError("no positions selected for prediction in this batch")
    V = logits.shape[-1]
    return softmax_cross_entropy(logits.reshape(-1, V), batch.original_ids.reshape(-1), batch.selected.reshape(-1))
