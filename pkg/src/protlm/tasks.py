"""Glue between task records and model heads: batching, losses, predictions, scores."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np

from . import metrics
from . import model as M
from . import tensor as T
from .corpus import SS3_LABELS, SS8_LABELS, ContactMap, ProteinRecord
from .errors import ContractError
from .masking import plain_batch, truncate_ids
from .tokenizer import encode

TASK_TO_HEAD = {
    "ss3": "ss3",
    "ss8": "ss8",
    "fold": "fold",
    "homology": "fold",
    "contact": "contact",
    "fluorescence": "regress",
    "stability": "regress",
    "regress": "regress",
}


def head_for(task: str) -> str:
    try:
        return TASK_TO_HEAD[task]
    except KeyError:
        raise ContractError(f"unknown task {task!r}") from None


def check_records(records: Sequence[ProteinRecord], head: str, num_classes: Optional[int] = None):
    """Raise :class:`ContractError` if any record's label does not fit ``head``."""
    if not records:
        raise ContractError("no records")
    for r in records:
        lab = r.label
        if head in ("ss3", "ss8"):
            alphabet = SS3_LABELS if head == "ss3" else SS8_LABELS
            ok = isinstance(lab, str) and set(lab) <= set(alphabet)
        elif head == "fold":
            ok = isinstance(lab, (int, np.integer)) and not isinstance(lab, bool)
            ok = ok and (num_classes is None or 0 <= lab < num_classes)
        elif head == "contact":
            ok = isinstance(lab, ContactMap)
        elif head == "regress":
            ok = isinstance(lab, (float, int, np.floating)) and not isinstance(lab, bool)
        else:
            raise ContractError(f"unknown head {head!r}")
        if not ok:
            raise ContractError(f"record {r.id!r} label {type(lab).__name__} does not match head {head!r}")


def token_batch(records: Sequence[ProteinRecord], max_len: int):
    return plain_batch([truncate_ids(encode(r.sequence), max_len) for r in records], max_len)


def _ss_targets(records, batch, head):
    alphabet = SS3_LABELS if head == "ss3" else SS8_LABELS
    lut = {c: k for k, c in enumerate(alphabet)}
    B, L = batch.input_ids.shape
    targets = np.zeros((B, L), dtype=np.int64)
    select = np.zeros((B, L), dtype=bool)
    for b, r in enumerate(records):
        n = int(batch.lengths[b]) - 2
        targets[b, 1:n + 1] = [lut[c] for c in r.label[:n]]
        select[b, 1:n + 1] = True
    return targets, select


def _contact_targets(records, batch):
    B, L = batch.input_ids.shape
    targets = np.zeros((B, L, L), dtype=np.float32)
    select = np.zeros((B, L, L), dtype=bool)
    for b, r in enumerate(records):
        n = int(batch.lengths[b]) - 2
        cm = r.label
        targets[b, 1:n + 1, 1:n + 1] = cm.contact[:n, :n]
        select[b, 1:n + 1, 1:n + 1] = np.triu(cm.valid[:n, :n], 1)
    return targets, select


def task_loss(params, config, records: Sequence[ProteinRecord], head: str, max_len: int,
              mode: str = "train", rng=None) -> T.Tensor:
    """Scalar training loss of ``head`` on a batch of records."""
    batch = token_batch(records, max_len)
    out = M.encode(params, batch, config, mode, rng)
    if head in ("ss3", "ss8"):
        C = 3 if head == "ss3" else 8
        logits = M.token_class_logits(params, out, C)
        targets, select = _ss_targets(records, batch, head)
        B, L, _ = logits.shape
        return T.cross_entropy_masked(T.reshape(logits, (B * L, C)), targets.reshape(-1), select.reshape(-1))
    if head == "fold":
        logits = M.seq_class_logits(params, out)
        labels = np.array([r.label for r in records], dtype=np.int64)
        return T.cross_entropy_masked(logits, labels, np.ones(len(records), dtype=bool))
    if head == "contact":
        logits = M.contact_logit_matrix(params, out)
        targets, select = _contact_targets(records, batch)
        return T.bce_with_logits_masked(logits, targets, select)
    if head == "regress":
        return T.mse(M.regress_scalar(params, out), [float(r.label) for r in records])
    raise ContractError(f"unknown head {head!r}")


def predict(params, config, records: Sequence[ProteinRecord], head: str, max_len: int,
            batch_size: int = 32) -> List:
    """Per-record predictions in eval mode.

    ss heads give label strings, fold gives class ids, contact gives L x L
    score matrices, regress gives floats.
    """
    out_all: List = []
    with T.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            batch = token_batch(chunk, max_len)
            out = M.encode(params, batch, config, "eval")
            if head in ("ss3", "ss8"):
                C = 3 if head == "ss3" else 8
                alphabet = SS3_LABELS if head == "ss3" else SS8_LABELS
                cls = M.token_class_logits(params, out, C).data.argmax(-1)
                for b in range(len(chunk)):
                    n = int(batch.lengths[b]) - 2
                    out_all.append("".join(alphabet[k] for k in cls[b, 1:n + 1]))
            elif head == "fold":
                out_all.extend(M.seq_class_logits(params, out).data.argmax(-1).tolist())
            elif head == "contact":
                out_all.extend(M.contact_scores(params, out))
            elif head == "regress":
                out_all.extend(M.regress_scalar(params, out).data.astype(float).tolist())
            else:
                raise ContractError(f"unknown head {head!r}")
    return out_all


def score_predictions(records: Sequence[ProteinRecord], preds: Sequence, head: str,
                      min_sep: int = metrics.DEFAULT_MIN_SEP) -> Dict[str, float]:
    """Task metrics keyed by their report names (``Q3``, ``top1``, ``P@L/5``, ``spearman``)."""
    if head in ("ss3", "ss8"):
        pred = "".join(preds)
        gold = "".join(r.label[:len(p)] for r, p in zip(records, preds))
        name = "Q3" if head == "ss3" else "Q8"
        return {name: metrics.token_accuracy(list(pred), list(gold))}
    if head == "fold":
        return {"top1": metrics.top1_accuracy(preds, [r.label for r in records])}
    if head == "contact":
        per = []
        for r, s in zip(records, preds):
            n = s.shape[0]
            truth = r.label if r.label.size == n else ContactMap(r.label.contact[:n, :n], r.label.valid[:n, :n])
            per.append(metrics.contact_report(s, truth, min_sep))
        return {k: float(np.mean([p[k] for p in per])) for k in per[0]}
    if head == "regress":
        return {"spearman": metrics.spearman_rho(preds, [float(r.label) for r in records])}
    raise ContractError(f"unknown head {head!r}")
