"""BERT-style token corruption and padded batch assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ContractError
from .tokenizer import CLS_ID, FIRST_RESIDUE_ID, MASK_ID, PAD_ID, SEP_ID, VOCAB_SIZE

MASK_RATE = 0.15
PROPORTIONS = (0.8, 0.1, 0.1)


@dataclass
class MaskedBatch:
    input_ids: np.ndarray       # int64 [B, Lmax]
    attention_mask: np.ndarray  # bool  [B, Lmax], True on real tokens
    target_ids: np.ndarray      # int64 [B, Lmax]
    target_mask: np.ndarray     # bool  [B, Lmax], True where the loss applies
    lengths: np.ndarray         # int64 [B]

    @property
    def shape(self):
        return self.input_ids.shape


def _residue_positions(ids: np.ndarray) -> np.ndarray:
    return (ids != CLS_ID) & (ids != SEP_ID) & (ids != PAD_ID)


def corrupt(ids: Sequence[int], rng: np.random.Generator, rate: float = MASK_RATE,
            proportions: Tuple[float, float, float] = PROPORTIONS):
    """Select residues for the MLM loss and corrupt them.

    Each residue is selected independently with probability ``rate``; a
    selected residue becomes ``[MASK]``, a random residue, or stays as is,
    in the given proportions.  When nothing gets selected, one residue is
    forced so the loss stays defined.

    Returns ``(corrupted, targets, selected)`` as numpy arrays.
    """
    if not 0 < rate < 1:
        raise ContractError(f"mask rate must be in (0, 1), got {rate}")
    if len(proportions) != 3 or abs(sum(proportions) - 1) > 1e-9 or min(proportions) < 0:
        raise ContractError(f"proportions must be three non-negatives summing to 1, got {proportions}")
    ids = np.asarray(ids, dtype=np.int64)
    candidates = _residue_positions(ids)
    n_cand = int(candidates.sum())
    if n_cand == 0:
        raise ContractError("sequence has no residue positions to mask")

    selected = candidates & (rng.random(ids.shape) < rate)
    if not selected.any():
        pos = np.flatnonzero(candidates)
        selected[pos[rng.integers(n_cand)]] = True

    corrupted = ids.copy()
    sel = np.flatnonzero(selected)
    u = rng.random(sel.size)
    p_mask, p_rand, _ = proportions
    to_mask = sel[u < p_mask]
    to_rand = sel[(u >= p_mask) & (u < p_mask + p_rand)]
    corrupted[to_mask] = MASK_ID
    corrupted[to_rand] = rng.integers(FIRST_RESIDUE_ID, VOCAB_SIZE, size=to_rand.size)
    return corrupted, ids.copy(), selected


def truncate_ids(ids: Sequence[int], max_len: int) -> np.ndarray:
    """Keep ``[CLS]`` plus the first ``max_len - 2`` residues, then re-append ``[SEP]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) <= max_len:
        return ids
    if max_len < 3:
        raise ContractError(f"max_len {max_len} leaves no room for residues")
    return np.concatenate([ids[: max_len - 1], [SEP_ID]])


def collate(items: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]], max_len: int) -> MaskedBatch:
    """Right-pad ``(corrupted, targets, selected)`` triples into a batch.

    Over-long items are truncated: the residue span is cut and ``[SEP]``
    re-appended, with targets and flags cut in lockstep.
    """
    if not items:
        raise ContractError("cannot collate an empty batch")
    B = len(items)
    rows = []
    for corrupted, targets, selected in items:
        corrupted = np.asarray(corrupted, dtype=np.int64)
        targets = np.asarray(targets, dtype=np.int64)
        selected = np.asarray(selected, dtype=bool)
        if len(corrupted) > max_len:
            corrupted = truncate_ids(corrupted, max_len)
            targets = truncate_ids(targets, max_len)
            selected = np.concatenate([selected[: max_len - 1], [False]])
        rows.append((corrupted, targets, selected))
    Lmax = max(len(r[0]) for r in rows)
    input_ids = np.full((B, Lmax), PAD_ID, dtype=np.int64)
    target_ids = np.full((B, Lmax), PAD_ID, dtype=np.int64)
    attention = np.zeros((B, Lmax), dtype=bool)
    target_mask = np.zeros((B, Lmax), dtype=bool)
    lengths = np.zeros(B, dtype=np.int64)
    for b, (c, t, s) in enumerate(rows):
        n = len(c)
        input_ids[b, :n] = c
        target_ids[b, :n] = t
        attention[b, :n] = True
        target_mask[b, :n] = s
        lengths[b] = n
    return MaskedBatch(input_ids, attention, target_ids, target_mask, lengths)


def plain_batch(sequences: Sequence[Sequence[int]], max_len: int) -> MaskedBatch:
    """Uncorrupted batch (no loss positions) for feature extraction and finetuning."""
    items = [(np.asarray(s), np.asarray(s), np.zeros(len(s), dtype=bool)) for s in sequences]
    return collate(items, max_len)


def mask_batch(sequences: Sequence[Sequence[int]], rng: np.random.Generator, max_len: int,
               rate: float = MASK_RATE, proportions=PROPORTIONS) -> MaskedBatch:
    """Truncate, corrupt, and collate in one go."""
    items = [corrupt(truncate_ids(s, max_len), rng, rate, proportions) for s in sequences]
    return collate(items, max_len)


def batch_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for batch ``index``, independent of preparation order."""
    return np.random.default_rng([seed, index])
