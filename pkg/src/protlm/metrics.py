"""Evaluation metrics for the downstream tasks."""

from __future__ import annotations

import math
from typing import Dict, Optional, Sequence

import numpy as np

from .corpus import ContactMap
from .errors import ContractError

MEDIUM_MIN_SEP = 12
LONG_MIN_SEP = 24
DEFAULT_MIN_SEP = 6


def token_accuracy(pred, gold, mask=None) -> float:
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.shape != gold.shape:
        raise ContractError(f"prediction shape {pred.shape} != gold shape {gold.shape}")
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ContractError("token_accuracy: no selected positions")
    return float((pred[mask] == gold[mask]).sum() / n)


def top1_accuracy(pred, gold) -> float:
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.size == 0 or pred.shape != gold.shape:
        raise ContractError("top1_accuracy needs equal-length non-empty inputs")
    return float((pred == gold).mean())


def range_band(i: int, j: int) -> str:
    """Sequence-separation band of a residue pair: short, medium (12-23) or long (>= 24)."""
    if i == j:
        raise ContractError("range_band is undefined for i == j")
    sep = abs(i - j)
    if sep >= LONG_MIN_SEP:
        return "long"
    if sep >= MEDIUM_MIN_SEP:
        return "medium"
    return "short"


def ranked_pairs(scores: np.ndarray, truth: ContactMap, min_sep: int = DEFAULT_MIN_SEP,
                 band: Optional[str] = None):
    """Candidate pairs ``i < j`` sorted by (score desc, i asc, j asc).

    Returns ``(i, j, score)`` arrays.
    """
    scores = np.asarray(scores, dtype=np.float64)
    L = truth.size
    if scores.shape != (L, L):
        raise ContractError(f"score matrix {scores.shape} does not match contact map of size {L}")
    i, j = np.triu_indices(L, 1)
    sep = j - i
    keep = (sep >= min_sep) & truth.valid[i, j]
    if band == "long":
        keep &= sep >= LONG_MIN_SEP
    elif band == "medium":
        keep &= (sep >= MEDIUM_MIN_SEP) & (sep < LONG_MIN_SEP)
    elif band == "short":
        keep &= sep < MEDIUM_MIN_SEP
    elif band is not None:
        raise ContractError(f"unknown band {band!r}")
    i, j = i[keep], j[keep]
    s = scores[i, j]
    order = np.lexsort((j, i, -s))
    return i[order], j[order], s[order]


def contact_precision(scores, truth: ContactMap, divisor: int = 5, min_sep: int = DEFAULT_MIN_SEP,
                      band: Optional[str] = None) -> float:
    """Precision of the ``ceil(L / divisor)`` top-scored candidate pairs.

    Candidates are valid pairs with ``j - i >= min_sep``.  With fewer than
    ``k`` candidates all of them are taken, and the denominator stays ``k``.
    """
    i, j, _ = ranked_pairs(scores, truth, min_sep, band)
    if i.size == 0:
        raise ContractError("contact_precision: no candidate pairs")
    k = math.ceil(truth.size / divisor)
    hits = truth.contact[i[:k], j[:k]].sum()
    return float(hits / k)


def contact_report(scores, truth: ContactMap, min_sep: int = DEFAULT_MIN_SEP,
                   band: Optional[str] = None) -> Dict[str, float]:
    return {f"P@L/{d}" if d > 1 else "P@L": contact_precision(scores, truth, d, min_sep, band)
            for d in (5, 2, 1)}


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of the positions they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, sx[1:] != sx[:-1]])
    ends = np.r_[starts[1:], x.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    return ranks


def spearman_rho(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ContractError("spearman_rho needs two equal-length sequences of length >= 2")
    rx, ry = average_ranks(x), average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float((rx * rx).sum()) * float((ry * ry).sum()))
    if den == 0:
        raise ContractError("spearman_rho is undefined for a constant input")
    return float(np.clip((rx * ry).sum() / den, -1.0, 1.0))
