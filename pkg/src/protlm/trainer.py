"""
Optimisation and training loops: Adam with decoupled weight decay, linear
warmup/decay schedule, MLM pretraining and task finetuning.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from . import model as M
from . import tasks
from . import tensor as T
from .corpus import DatasetSplit, ProteinRecord
from .errors import ContractError, DivergenceError, NonFiniteError
from .masking import batch_rng, mask_batch
from .tokenizer import encode

log = logging.getLogger(__name__)

# generator stream ids, mixed with the run seed
_ORDER_STREAM = 1
_DROPOUT_STREAM = 2
_VALID_STREAM = 3


@dataclass
class Schedule:
    peak: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: Optional[float] = 1.0


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class ReportRow:
    step: int
    lr: float
    loss: float
    ppl: Optional[float]
    seconds: float


@dataclass
class TrainReport:
    rows: List[ReportRow] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    metrics: Dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["step,lr,loss,ppl,seconds"]
        for r in self.rows:
            ppl = "" if r.ppl is None else repr(r.ppl)
            lines.append(f"{r.step},{r.lr!r},{r.loss!r},{ppl},{r.seconds:.3f}")
        return "\n".join(lines) + "\n"

    @property
    def final_loss(self) -> float:
        return self.rows[-1].loss if self.rows else float("nan")


def ppl(loss: float) -> float:
    """Perplexity of a mean cross-entropy in nats."""
    return math.exp(loss)


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear ramp 0 -> peak over warmup, then linear decay to 0 at total_steps."""
    w, n = schedule.warmup_steps, schedule.total_steps
    if step <= w:
        return schedule.peak * step / w
    if n <= w:
        return 0.0
    return schedule.peak * max(0.0, (n - step) / (n - w))


def decays(name: str) -> bool:
    """Weight decay applies to matrices and embeddings, not biases or layer norms."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("w") or name.startswith("embed.")


def global_norm(params: M.ParameterSet, names: Iterable[str]) -> float:
    return math.sqrt(sum(float(np.dot(params[n].grad.reshape(-1).astype(np.float64),
                                      params[n].grad.reshape(-1).astype(np.float64))) for n in names))


def adam_step(params: M.ParameterSet, state: OptimizerState, lr: float, names: Optional[Sequence[str]] = None,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    names = list(params) if names is None else list(names)
    for n in names:
        if params[n].grad is None:
            raise ContractError(f"no gradient for parameter {n}")
    state.t += 1
    t = state.t
    f32 = np.float32
    b1, b2 = f32(beta1), f32(beta2)
    c1 = f32(1 - beta1 ** t)
    c2 = f32(1 - beta2 ** t)
    for n in names:
        p = params[n]
        g = p.grad
        m = state.m.get(n)
        if m is None:
            m = state.m[n] = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        v = state.v[n]
        m *= b1
        m += (f32(1) - b1) * g
        v *= b2
        v += (f32(1) - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + f32(eps))
        if weight_decay and decays(n):
            p.data *= f32(1 - lr * weight_decay)
        p.data -= f32(lr) * update


def _sequences(records) -> List[str]:
    return [r.sequence if isinstance(r, ProteinRecord) else str(r) for r in records]


def mlm_loss(params, config, batch, mode="eval", rng=None) -> T.Tensor:
    out = M.encode(params, batch, config, mode, rng)
    logits = M.mlm_logits(params, out)
    B, L, V = logits.shape
    return T.cross_entropy_masked(T.reshape(logits, (B * L, V)),
                                  batch.target_ids.reshape(-1), batch.target_mask.reshape(-1))


def evaluate_mlm(params, config, sequences: Sequence[str], seed: int, max_len: int,
                 batch_size: int = 32) -> float:
    """Mean masked cross-entropy on ``sequences`` with a fixed masking draw.

    Batches are weighted by their number of masked positions.
    """
    ids = [encode(s) for s in sequences]
    total, count = 0.0, 0
    with T.no_grad():
        for k, start in enumerate(range(0, len(ids), batch_size)):
            batch = mask_batch(ids[start:start + batch_size], batch_rng(seed, k), max_len)
            n = int(batch.target_mask.sum())
            total += float(mlm_loss(params, config, batch).data) * n
            count += n
    return total / count


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled every epoch."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def _step(params, names, loss_fn, state, lr, adam: AdamConfig):
    for n in names:
        params[n].grad = None
    # overflow shows up as a non-finite loss; the caller reports it
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            with T.Tape() as tape:
                loss = loss_fn()
        except NonFiniteError:
            return float("nan")
        value = float(loss.data)
        if not math.isfinite(value):
            return value
        tape.backward(loss)
    if adam.clip_norm:
        norm = global_norm(params, names)
        if not math.isfinite(norm):
            return float("nan")
        if norm > adam.clip_norm:
            s = np.float32(adam.clip_norm / norm)
            for n in names:
                params[n].grad *= s
    adam_step(params, state, lr, names, adam.beta1, adam.beta2, adam.eps, adam.weight_decay)
    return value


def pretrain(corpus: Union[DatasetSplit, Sequence], config: M.ModelConfig, schedule: Schedule,
             seed: int = 0, report_every: int = 100, valid: Optional[Sequence] = None,
             batch_size: int = 32, max_len: Optional[int] = None, adam: Optional[AdamConfig] = None,
             params: Optional[M.ParameterSet] = None, state: Optional[OptimizerState] = None,
             callback: Optional[Callable[[int, float], None]] = None):
    """Masked-language-model pretraining.

    ``corpus`` is a :class:`DatasetSplit` (its ``train``/``valid`` lists are
    used) or a sequence of records or residue strings.  The only objective is
    the masked-token cross-entropy.  Pass ``state`` to keep the optimizer
    moments (it is updated in place).  Returns ``(params, report)``.
    """
    if isinstance(corpus, DatasetSplit):
        train, valid = corpus.train, corpus.valid if valid is None else valid
    else:
        train = corpus
    train = _sequences(train)
    valid = _sequences(valid) if valid else []
    if not train:
        raise ContractError("pretraining needs a non-empty train split")
    adam = adam or AdamConfig()
    max_len = max_len or config.max_positions
    if params is None:
        params = M.init_parameters(config, seed)
    names = list(M.parameter_shapes(config))
    state = state or OptimizerState()
    ids = [encode(s) for s in train]
    order = _batches(len(ids), batch_size, np.random.default_rng([seed, _ORDER_STREAM]))
    report = TrainReport()
    t0 = time.perf_counter()

    def record(step, lr):
        loss = evaluate_mlm(params, config, valid or train, seed + _VALID_STREAM, max_len, batch_size)
        report.rows.append(ReportRow(step, lr, loss, ppl(loss), time.perf_counter() - t0))
        log.info("step %d lr %.3g valid loss %.4f ppl %.3f", step, lr, loss, ppl(loss))

    record(0, 0.0)
    for step in range(1, schedule.total_steps + 1):
        lr = lr_at(step, schedule)
        idx = next(order)
        batch = mask_batch([ids[i] for i in idx], batch_rng(seed, step), max_len)
        drop_rng = np.random.default_rng([seed, _DROPOUT_STREAM, step])
        value = _step(params, names, lambda: mlm_loss(params, config, batch, "train", drop_rng),
                      state, lr, adam)
        if not math.isfinite(value):
            raise DivergenceError(step, lr, value)
        report.train_loss.append(value)
        if callback:
            callback(step, value)
        if step % report_every == 0 or step == schedule.total_steps:
            record(step, lr)
    return params, report


def finetune(records: Sequence[ProteinRecord], head: str, config: M.ModelConfig, schedule: Schedule,
             seed: int = 0, params: Optional[M.ParameterSet] = None, batch_size: int = 32,
             max_len: Optional[int] = None, num_classes: Optional[int] = None,
             eval_records: Optional[Sequence[ProteinRecord]] = None, report_every: int = 100,
             adam: Optional[AdamConfig] = None, min_sep: int = 6):
    """Train the encoder and one head end to end on labelled records.

    ``head`` is a head kind (``ss3``, ``ss8``, ``fold``, ``contact``,
    ``regress``) or a task name mapped to one.  ``params`` is a pretrained
    parameter set, or ``None`` for a fresh encoder.  The head is always
    freshly initialised.  Returns ``(params, report)``; when
    ``eval_records`` is given, ``report.metrics`` holds its task metrics.
    """
    head = tasks.head_for(head)
    tasks.check_records(records, head, num_classes)
    if head == "fold" and num_classes is None:
        num_classes = max(int(r.label) for r in records) + 1
    adam = adam or AdamConfig()
    max_len = max_len or config.max_positions
    if params is None:
        params = M.init_parameters(config, seed)
    else:
        params = {n: T.Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in params.items()}
        M.check_parameters(params, config)
    M.init_head(params, config, head, seed, num_classes)
    names = [n for n in M.parameter_shapes(config) if n != "mlm.bias"]
    names += list(M.head_shapes(config, head, num_classes))
    state = OptimizerState()
    order = _batches(len(records), batch_size, np.random.default_rng([seed, _ORDER_STREAM]))
    report = TrainReport()
    t0 = time.perf_counter()
    window: List[float] = []
    for step in range(1, schedule.total_steps + 1):
        lr = lr_at(step, schedule)
        chunk = [records[i] for i in next(order)]
        drop_rng = np.random.default_rng([seed, _DROPOUT_STREAM, step])
        value = _step(params, names, lambda: tasks.task_loss(params, config, chunk, head, max_len, "train", drop_rng),
                      state, lr, adam)
        if not math.isfinite(value):
            raise DivergenceError(step, lr, value)
        report.train_loss.append(value)
        window.append(value)
        if step % report_every == 0 or step == schedule.total_steps:
            mean = float(np.mean(window))
            report.rows.append(ReportRow(step, lr, mean, None, time.perf_counter() - t0))
            log.info("step %d lr %.3g %s loss %.4f", step, lr, head, mean)
            window = []
    if eval_records:
        report.metrics = evaluate(params, config, eval_records, head, max_len, min_sep=min_sep)
    return params, report


def evaluate(params, config, records: Sequence[ProteinRecord], head: str, max_len: Optional[int] = None,
             batch_size: int = 32, min_sep: int = 6) -> Dict[str, float]:
    head = tasks.head_for(head)
    max_len = max_len or config.max_positions
    preds = tasks.predict(params, config, records, head, max_len, batch_size)
    return tasks.score_predictions(records, preds, head, min_sep)
