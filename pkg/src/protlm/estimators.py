"""
scikit-learn compatible wrappers around pretraining and the task heads.

    >>> lm = ProteinLM(total_steps=200).fit(sequences)
    >>> clf = SecondaryStructureClassifier(base=lm, total_steps=500).fit(train_seqs, train_labels)
    >>> clf.score(test_seqs, test_labels)

Inputs ``X`` are residue strings (or :class:`~protlm.corpus.ProteinRecord`
objects); targets follow the task: label strings, class ids, contact maps,
or real values.
"""

from __future__ import annotations

from typing import List

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint, metrics, tasks
from . import model as M
from . import tensor as T
from . import trainer
from .corpus import ProteinRecord
from .masking import plain_batch, truncate_ids
from .tokenizer import encode


def check_sequences(X) -> List[str]:
    """Validate a collection of protein sequences and return it as a list of str."""
    if isinstance(X, (str, bytes)):
        raise TypeError("expected a collection of sequences, got a single string")
    out = []
    for x in X:
        if isinstance(x, ProteinRecord):
            x = x.sequence
        elif isinstance(x, bytes):
            x = x.decode()
        elif not isinstance(x, str):
            x = str(x) if isinstance(x, np.str_) else None
        if not x:
            raise ValueError("sequences must be non-empty strings")
        out.append(x)
    if not out:
        raise ValueError("no sequences given")
    return out


def check_targets(X: List[str], y) -> list:
    y = list(y)
    if len(y) != len(X):
        raise ValueError(f"X has {len(X)} sequences but y has {len(y)} targets")
    return y


class _EncoderParams:
    """Shared constructor arguments and helpers for all estimators."""

    def _config(self) -> M.ModelConfig:
        return M.ModelConfig(hidden_size=self.hidden_size, num_layers=self.num_layers,
                             num_heads=self.num_heads, max_positions=self.max_len,
                             dropout=self.dropout, pre_ln=self.pre_ln)

    def _schedule(self) -> trainer.Schedule:
        return trainer.Schedule(self.peak_lr, self.warmup_steps, self.total_steps)

    def _adam(self) -> trainer.AdamConfig:
        return trainer.AdamConfig(weight_decay=self.weight_decay)


class ProteinLM(_EncoderParams, TransformerMixin, BaseEstimator):
    """Masked-language-model pretraining; ``transform`` returns [CLS] embeddings.

    Parameters
    ----------
    hidden_size, num_layers, num_heads : int
        Encoder shape.
    max_len : int
        Maximum tokens per sequence, [CLS] and [SEP] included.
    dropout : float
    pre_ln : bool
        Layer norm before each sublayer (True) or after the residual add.
    peak_lr, warmup_steps, total_steps : learning-rate schedule.
    batch_size, weight_decay, seed : training settings.
    """

    def __init__(self, hidden_size=64, num_layers=2, num_heads=4, max_len=128, dropout=0.1, pre_ln=True,
                 peak_lr=1e-3, warmup_steps=100, total_steps=1000, batch_size=32, weight_decay=0.01,
                 seed=0, report_every=100):
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.max_len = max_len
        self.dropout = dropout
        self.pre_ln = pre_ln
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed
        self.report_every = report_every

    def fit(self, X, y=None, valid=None):
        X = check_sequences(X)
        self.config_ = self._config()
        self.params_, self.report_ = trainer.pretrain(
            X, self.config_, self._schedule(), seed=self.seed, report_every=self.report_every,
            valid=check_sequences(valid) if valid is not None else None,
            batch_size=self.batch_size, max_len=self.max_len, adam=self._adam())
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_sequences(X)
        out = []
        with T.no_grad():
            for start in range(0, len(X), self.batch_size):
                ids = [truncate_ids(encode(s), self.max_len) for s in X[start:start + self.batch_size]]
                enc = M.encode(self.params_, plain_batch(ids, self.max_len), self.config_)
                out.append(enc.cls.data)
        return np.concatenate(out)

    def mlm_loss(self, X) -> float:
        check_is_fitted(self, "params_")
        return trainer.evaluate_mlm(self.params_, self.config_, check_sequences(X),
                                    self.seed, self.max_len, self.batch_size)

    def perplexity(self, X) -> float:
        return trainer.ppl(self.mlm_loss(X))

    def score(self, X, y=None) -> float:
        """Negative masked-token cross-entropy (higher is better)."""
        return -self.mlm_loss(X)

    def save(self, path):
        check_is_fitted(self, "params_")
        checkpoint.save_checkpoint(self.params_, self.config_, path)

    @classmethod
    def load(cls, path, **kwargs) -> "ProteinLM":
        params, config, _ = checkpoint.load_checkpoint(path)
        est = cls(hidden_size=config.hidden_size, num_layers=config.num_layers, num_heads=config.num_heads,
                  max_len=config.max_positions, dropout=config.dropout, pre_ln=config.pre_ln, **kwargs)
        est.params_, est.config_ = params, config
        return est


class _TaskHead(_EncoderParams, BaseEstimator):
    """Finetunes encoder + one head. ``base`` is a fitted :class:`ProteinLM` or None."""

    _head: str = ""

    def __init__(self, base=None, hidden_size=64, num_layers=2, num_heads=4, max_len=128, dropout=0.1,
                 pre_ln=True, peak_lr=1e-3, warmup_steps=100, total_steps=1000, batch_size=32,
                 weight_decay=0.01, seed=0, report_every=100):
        self.base = base
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.max_len = max_len
        self.dropout = dropout
        self.pre_ln = pre_ln
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed
        self.report_every = report_every

    def _records(self, X, y):
        return [ProteinRecord(f"s{i}", s, None, lab) for i, (s, lab) in enumerate(zip(X, y))]

    def _num_classes(self, y):
        return None

    def fit(self, X, y):
        X = check_sequences(X)
        y = check_targets(X, y)
        if self.base is not None:
            check_is_fitted(self.base, "params_")
            self.config_ = self.base.config_
            init = self.base.params_
        else:
            self.config_ = self._config()
            init = None
        self.params_, self.report_ = trainer.finetune(
            self._records(X, y), self._head, self.config_, self._schedule(), seed=self.seed,
            params=init, batch_size=self.batch_size, max_len=self.config_.max_positions,
            num_classes=self._num_classes(y), report_every=self.report_every, adam=self._adam())
        return self

    def _predict(self, X):
        check_is_fitted(self, "params_")
        X = check_sequences(X)
        records = [ProteinRecord(f"s{i}", s) for i, s in enumerate(X)]
        return tasks.predict(self.params_, self.config_, records, self._head,
                             self.config_.max_positions, self.batch_size)


class SecondaryStructureClassifier(ClassifierMixin, _TaskHead):
    """Per-residue Q3 (``num_classes=3``) or Q8 labelling; ``y`` holds label strings."""

    def __init__(self, num_classes=3, base=None, hidden_size=64, num_layers=2, num_heads=4, max_len=128, dropout=0.1,
                 pre_ln=True, peak_lr=1e-3, warmup_steps=100, total_steps=1000, batch_size=32,
                 weight_decay=0.01, seed=0, report_every=100):
        super().__init__(base=base, hidden_size=hidden_size, num_layers=num_layers, num_heads=num_heads,
                         max_len=max_len, dropout=dropout, pre_ln=pre_ln, peak_lr=peak_lr,
                         warmup_steps=warmup_steps, total_steps=total_steps, batch_size=batch_size,
                         weight_decay=weight_decay, seed=seed, report_every=report_every)
        self.num_classes = num_classes

    @property
    def _head(self):
        return f"ss{self.num_classes}"

    def predict(self, X) -> List[str]:
        return self._predict(X)

    def score(self, X, y, sample_weight=None) -> float:
        pred = self.predict(X)
        gold = check_targets(pred, y)
        return metrics.token_accuracy(list("".join(pred)), list("".join(g[:len(p)] for p, g in zip(pred, gold))))


class RemoteHomologyClassifier(ClassifierMixin, _TaskHead):
    """Sequence-level fold classification from the [CLS] state."""

    _head = "fold"

    def __init__(self, num_classes=None, base=None, hidden_size=64, num_layers=2, num_heads=4, max_len=128, dropout=0.1,
                 pre_ln=True, peak_lr=1e-3, warmup_steps=100, total_steps=1000, batch_size=32,
                 weight_decay=0.01, seed=0, report_every=100):
        super().__init__(base=base, hidden_size=hidden_size, num_layers=num_layers, num_heads=num_heads,
                         max_len=max_len, dropout=dropout, pre_ln=pre_ln, peak_lr=peak_lr,
                         warmup_steps=warmup_steps, total_steps=total_steps, batch_size=batch_size,
                         weight_decay=weight_decay, seed=seed, report_every=report_every)
        self.num_classes = num_classes

    def _num_classes(self, y):
        n = self.num_classes or int(max(y)) + 1
        self.classes_ = np.arange(n)
        return n

    def predict(self, X) -> np.ndarray:
        return np.asarray(self._predict(X))

    def score(self, X, y, sample_weight=None) -> float:
        return metrics.top1_accuracy(self.predict(X), np.asarray(y))


class ContactPredictor(_TaskHead):
    """Residue-pair contact scoring; ``y`` holds :class:`ContactMap` objects."""

    _head = "contact"

    def __init__(self, min_sep=metrics.DEFAULT_MIN_SEP, base=None, hidden_size=64, num_layers=2, num_heads=4, max_len=128, dropout=0.1,
                 pre_ln=True, peak_lr=1e-3, warmup_steps=100, total_steps=1000, batch_size=32,
                 weight_decay=0.01, seed=0, report_every=100):
        super().__init__(base=base, hidden_size=hidden_size, num_layers=num_layers, num_heads=num_heads,
                         max_len=max_len, dropout=dropout, pre_ln=pre_ln, peak_lr=peak_lr,
                         warmup_steps=warmup_steps, total_steps=total_steps, batch_size=batch_size,
                         weight_decay=weight_decay, seed=seed, report_every=report_every)
        self.min_sep = min_sep

    def decision_function(self, X) -> List[np.ndarray]:
        """Symmetric L x L logit matrices."""
        return self._predict(X)

    def predict_proba(self, X) -> List[np.ndarray]:
        return [0.5 * (1 + np.tanh(0.5 * s)) for s in self.decision_function(X)]

    def predict(self, X) -> List[np.ndarray]:
        return [s > 0 for s in self.decision_function(X)]

    def score(self, X, y, sample_weight=None) -> float:
        """Mean P@L/5 over sequences."""
        scores = self.decision_function(X)
        y = check_targets(scores, y)
        return float(np.mean([metrics.contact_precision(s, t, 5, self.min_sep) for s, t in zip(scores, y)]))


class FitnessRegressor(RegressorMixin, _TaskHead):
    """Scalar property regression (fluorescence, stability); scored by Spearman's rho."""

    _head = "regress"

    def predict(self, X) -> np.ndarray:
        return np.asarray(self._predict(X))

    def score(self, X, y, sample_weight=None) -> float:
        return metrics.spearman_rho(self.predict(X), np.asarray(y, dtype=float))
