"""
Transformer encoder over amino-acid tokens, the tied MLM head, and the
four downstream heads (per-token class, sequence class, residue-pair
contact, scalar regression).

Parameters are a plain ordered ``dict`` of named :class:`Tensor` objects.
Every tensor is initialised from its own generator seeded by
``(seed, crc32(name))``, so any subset can be regenerated exactly without
materialising the rest.
"""

from __future__ import annotations

import math
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .masking import MaskedBatch
from .tensor import Tensor
from .tokenizer import PAD_ID, VOCAB_SIZE

ParameterSet = Dict[str, Tensor]

INIT_STD = 0.02
HEAD_KINDS = ("ss3", "ss8", "fold", "contact", "regress")


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_size: int = 0  # 0 means 4 * hidden_size
    max_positions: int = 512
    vocab_size: int = VOCAB_SIZE
    dropout: float = 0.1
    pre_ln: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_size == 0:
            object.__setattr__(self, "ffn_size", 4 * self.hidden_size)
        if self.hidden_size < 1 or self.num_layers < 0 or self.num_heads < 1:
            raise ConfigError(f"invalid sizes in {self}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.max_positions < 2:
            raise ConfigError("max_positions must be at least 2")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_text(self) -> str:
        """Canonical ``key=value`` lines in field order."""
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(value.strip(), types[key])
        return cls(**kwargs)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(text: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if text.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"bad boolean {text!r}")
        return text.lower() in ("true", "1")
    if typ == "int":
        return int(text)
    return float(text)


@dataclass
class EncoderOutput:
    hidden: Tensor        # [B, L, H]
    cls: Tensor           # [B, H]
    attention_mask: np.ndarray
    lengths: np.ndarray


# ------------------------------------------------------------------ params


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Names and shapes of the encoder + MLM parameters, in canonical order."""
    H, F, V, P = config.hidden_size, config.ffn_size, config.vocab_size, config.max_positions
    shapes = OrderedDict()
    shapes["embed.token"] = (V, H)
    shapes["embed.position"] = (P, H)
    for l in range(config.num_layers):
        shapes.update(layer_shapes(config, l))
    if config.pre_ln:
        shapes["final_ln.gamma"] = (H,)
        shapes["final_ln.beta"] = (H,)
    shapes["mlm.bias"] = (V,)
    return shapes


def layer_shapes(config: ModelConfig, layer: int) -> "OrderedDict[str, Tuple[int, ...]]":
    H, F = config.hidden_size, config.ffn_size
    p = f"layer{layer}."
    shapes = OrderedDict()
    shapes[p + "ln1.gamma"] = (H,)
    shapes[p + "ln1.beta"] = (H,)
    for proj in "qkvo":
        shapes[p + f"attn.{proj}.w"] = (H, H)
        shapes[p + f"attn.{proj}.b"] = (H,)
    shapes[p + "ln2.gamma"] = (H,)
    shapes[p + "ln2.beta"] = (H,)
    shapes[p + "ffn.in.w"] = (H, F)
    shapes[p + "ffn.in.b"] = (F,)
    shapes[p + "ffn.out.w"] = (F, H)
    shapes[p + "ffn.out.b"] = (H,)
    return shapes


def head_shapes(config: ModelConfig, kind: str, num_classes: Optional[int] = None):
    H = config.hidden_size
    if kind in ("ss3", "ss8"):
        C = 3 if kind == "ss3" else 8
        d_in = H
    elif kind == "fold":
        if num_classes is None or num_classes < 2:
            raise ConfigError("fold head needs num_classes >= 2")
        C, d_in = num_classes, H
    elif kind == "contact":
        C, d_in = 1, 2 * H
    elif kind == "regress":
        C, d_in = 1, H
    else:
        raise ConfigError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")
    p = f"head.{kind}."
    return OrderedDict([(p + "w1", (d_in, H)), (p + "b1", (H,)), (p + "w2", (H, C)), (p + "b2", (C,))])


def init_tensor(name: str, shape: Sequence[int], seed: int) -> Tensor:
    """Initial value of one parameter; depends only on ``(name, shape, seed)``."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        data = np.ones(shape, dtype=np.float32)
    elif leaf in ("beta", "bias") or leaf.startswith("b"):
        data = np.zeros(shape, dtype=np.float32)
    else:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        data = rng.standard_normal(shape, dtype=np.float32)
        data *= np.float32(INIT_STD)
    return Tensor(data, requires_grad=True, name=name)


def init_parameters(config: ModelConfig, seed: int = 0, names: Optional[Iterable[str]] = None) -> ParameterSet:
    shapes = parameter_shapes(config)
    if names is not None:
        shapes = OrderedDict((n, shapes[n]) for n in names)
    return OrderedDict((n, init_tensor(n, s, seed)) for n, s in shapes.items())


def init_head(params: ParameterSet, config: ModelConfig, kind: str, seed: int = 0,
              num_classes: Optional[int] = None) -> ParameterSet:
    """Add (or re-initialise) the parameters of one downstream head in place."""
    for n, s in head_shapes(config, kind, num_classes).items():
        params[n] = init_tensor(n, s, seed)
    return params


def count_parameters(config: ModelConfig, heads: Sequence[Tuple[str, Optional[int]]] = ()) -> int:
    """Closed-form parameter count (encoder, MLM bias, and the given heads)."""
    H, F, V, P, N = (config.hidden_size, config.ffn_size, config.vocab_size,
                     config.max_positions, config.num_layers)
    per_layer = 4 * (H * H + H) + (H * F + F) + (F * H + H) + 4 * H
    total = V * H + P * H + N * per_layer + (2 * H if config.pre_ln else 0) + V
    for kind, c in heads:
        if kind in ("ss3", "ss8"):
            C = 3 if kind == "ss3" else 8
            total += H * H + H + H * C + C
        elif kind == "fold":
            total += H * H + H + H * c + c
        elif kind == "contact":
            total += 2 * H * H + H + H + 1
        elif kind == "regress":
            total += H * H + H + H + 1
        else:
            raise ConfigError(f"unknown head kind {kind!r}")
    return total


def check_parameters(params: ParameterSet, template: ModelConfig) -> None:
    """Raise if ``params`` lacks an encoder tensor or has a wrong shape for ``template``."""
    for name, shape in parameter_shapes(template).items():
        if name not in params:
            raise ContractError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ContractError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


# ----------------------------------------------------------------- forward


def attention(params: ParameterSet, prefix: str, x: Tensor, key_mask: np.ndarray,
              config: ModelConfig, training: bool, rng) -> Tensor:
    """Multi-head scaled dot-product self-attention; ``key_mask`` [B, L] excludes padding keys."""
    B, L, H = x.shape
    nh, dh = config.num_heads, config.head_dim

    def heads(proj):
        y = T.linear(x, params[f"{prefix}{proj}.w"], params[f"{prefix}{proj}.b"])
        return T.transpose(T.reshape(y, (B, L, nh, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = T.softmax_last(scores, key_mask[:, None, None, :])
    probs = T.dropout(probs, config.dropout, rng, training)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B, L, H))
    return T.linear(ctx, params[f"{prefix}o.w"], params[f"{prefix}o.b"])


def feed_forward(params: ParameterSet, prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(T.linear(x, params[prefix + "in.w"], params[prefix + "in.b"]))
    return T.linear(h, params[prefix + "out.w"], params[prefix + "out.b"])


def encoder_layer(params: ParameterSet, layer: int, x: Tensor, key_mask: np.ndarray,
                  config: ModelConfig, training: bool = False, rng=None) -> Tensor:
    p = f"layer{layer}."
    eps, rate = config.ln_eps, config.dropout

    def ln(which, y):
        return T.layer_norm(y, params[p + which + ".gamma"], params[p + which + ".beta"], eps)

    if config.pre_ln:
        a = attention(params, p + "attn.", ln("ln1", x), key_mask, config, training, rng)
        x = T.add(x, T.dropout(a, rate, rng, training))
        f = feed_forward(params, p + "ffn.", ln("ln2", x))
        return T.add(x, T.dropout(f, rate, rng, training))
    a = attention(params, p + "attn.", x, key_mask, config, training, rng)
    x = ln("ln1", T.add(x, T.dropout(a, rate, rng, training)))
    f = feed_forward(params, p + "ffn.", x)
    return ln("ln2", T.add(x, T.dropout(f, rate, rng, training)))


def embed(params: ParameterSet, input_ids: np.ndarray, config: ModelConfig,
          training: bool = False, rng=None) -> Tensor:
    B, L = input_ids.shape
    if L > config.max_positions:
        raise ContractError(f"sequence length {L} exceeds max_positions {config.max_positions}")
    tok = T.embedding_lookup(params["embed.token"], input_ids)
    pos = T.take(params["embed.position"], slice(0, L))
    return T.dropout(T.add(tok, pos), config.dropout, rng, training)


def _batch_arrays(batch) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(batch, MaskedBatch):
        return batch.input_ids, batch.attention_mask, batch.lengths
    ids = np.asarray(batch, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    mask = ids != PAD_ID
    return ids, mask, mask.sum(axis=1)


def encode(params: ParameterSet, batch, config: ModelConfig, mode: str = "eval",
           rng: Optional[np.random.Generator] = None) -> EncoderOutput:
    """Run the encoder on a :class:`MaskedBatch` or an int array of token ids.

    ``mode`` is ``"train"`` (dropout active, needs ``rng``) or ``"eval"``.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    ids, mask, lengths = _batch_arrays(batch)
    x = embed(params, ids, config, training, rng)
    for l in range(config.num_layers):
        x = encoder_layer(params, l, x, mask, config, training, rng)
    if config.pre_ln:
        x = T.layer_norm(x, params["final_ln.gamma"], params["final_ln.beta"], config.ln_eps)
    return EncoderOutput(x, T.take(x, (slice(None), 0)), mask, lengths)


# ------------------------------------------------------------------- heads


def mlm_logits(params: ParameterSet, output: EncoderOutput) -> Tensor:
    """Token logits through the tied input embedding: ``hidden @ E.T + bias``."""
    B, L, H = output.hidden.shape
    flat = T.reshape(output.hidden, (B * L, H))
    logits = T.add(T.matmul(flat, T.transpose(params["embed.token"])), params["mlm.bias"])
    return T.reshape(logits, (B, L, -1))


def _mlp(params: ParameterSet, prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(T.linear(x, params[prefix + "w1"], params[prefix + "b1"]))
    return T.linear(h, params[prefix + "w2"], params[prefix + "b2"])


def token_class_logits(params: ParameterSet, output: EncoderOutput, num_classes: int) -> Tensor:
    if num_classes not in (3, 8):
        raise ConfigError(f"secondary structure head supports 3 or 8 classes, got {num_classes}")
    return _mlp(params, f"head.ss{num_classes}.", output.hidden)


def residue_mask(output: EncoderOutput) -> np.ndarray:
    """True on residue positions (not [CLS], [SEP] or padding)."""
    B, L = output.attention_mask.shape
    pos = np.arange(L)[None, :]
    return (pos >= 1) & (pos < (output.lengths[:, None] - 1))


def seq_class_logits(params: ParameterSet, output: EncoderOutput, num_classes: Optional[int] = None) -> Tensor:
    w2 = params["head.fold.w2"]
    if num_classes is not None and w2.shape[1] != num_classes:
        raise ConfigError(f"fold head has {w2.shape[1]} classes, asked for {num_classes}")
    return _mlp(params, "head.fold.", output.cls)


def regress_scalar(params: ParameterSet, output: EncoderOutput) -> Tensor:
    y = _mlp(params, "head.regress.", output.cls)
    return T.reshape(y, (y.shape[0],))


def pair_contact_logits(params: ParameterSet, output: EncoderOutput,
                        pairs: Sequence[Tuple[int, int]], row: int = 0) -> Tensor:
    """Raw logit ``MLP([h_i ; h_j])`` for each residue pair of batch row ``row``.

    Indices are residue positions (0 = first residue, i.e. token 1).
    """
    n_res = int(output.lengths[row]) - 2
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n_res):
        raise ContractError(f"pair index outside residues [0, {n_res})")
    h = T.take(output.hidden, row)
    hi = T.take(h, pairs[:, 0] + 1)
    hj = T.take(h, pairs[:, 1] + 1)
    y = _mlp(params, "head.contact.", T.concat([hi, hj], axis=-1))
    return T.reshape(y, (len(pairs),))


def contact_logit_matrix(params: ParameterSet, output: EncoderOutput) -> Tensor:
    """Symmetrised pair logits over all token positions, shape [B, L, L].

    Equal to averaging ``pair_contact_logits`` for (i, j) and (j, i); the
    concatenation MLP is evaluated by splitting its first weight matrix.
    """
    B, L, H = output.hidden.shape
    w1 = params["head.contact.w1"]
    left = T.linear(output.hidden, T.take(w1, slice(0, H)))
    right = T.linear(output.hidden, T.take(w1, slice(H, 2 * H)))
    z = T.add(T.add(T.reshape(left, (B, L, 1, H)), T.reshape(right, (B, 1, L, H))), params["head.contact.b1"])
    y = T.linear(T.gelu(z), params["head.contact.w2"], params["head.contact.b2"])
    y = T.reshape(y, (B, L, L))
    return T.scale(T.add(y, T.transpose(y, (0, 2, 1))), 0.5)


def contact_scores(params: ParameterSet, output: EncoderOutput) -> List[np.ndarray]:
    """Per-row residue x residue score matrices (symmetrised logits)."""
    with T.no_grad():
        m = contact_logit_matrix(params, output).data
    return [m[b, 1:n - 1, 1:n - 1].copy() for b, n in enumerate(output.lengths)]
