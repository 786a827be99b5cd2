"""
Named model presets and a one-step smoke run over them.

Preset names follow ``hidden-<H>-layer-<N>-head-<A>``.  Hidden sizes
between 512 and 3072 and 8 to 24 layers are the range reported to train
well at scale; the grid below spans it.

Presets too large to hold parameters and gradients in memory at once run
the same step *streamed*: layer parameters are regenerated from the seed
when needed (every tensor's initial value depends only on its name and the
seed), forward activations between layers are kept, and the backward pass
recomputes one layer at a time.
"""

from __future__ import annotations

import re
import time
from collections import OrderedDict
from typing import Dict

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ConfigError, NonFiniteError
from .masking import mask_batch
from .tokenizer import STANDARD_RESIDUES, encode

PRESET_NAMES = (
    "hidden-512-layer-32-head-8",
    "hidden-768-layer-12-head-6",
    "hidden-768-layer-16-head-16",
    "hidden-768-layer-16-head-24",
    "hidden-1024-layer-12-head-16",
    "hidden-1024-layer-12-head-32",
    "hidden-2048-layer-12-head-16",
    "hidden-2048-layer-24-head-16",
    "hidden-2048-layer-24-head-8",
    "hidden-3072-layer-24-head-16",
)

_NAME = re.compile(r"^hidden-(\d+)-layer-(\d+)-head-(\d+)$")

# parameters + gradients in float32 above this many parameters do not fit comfortably
FULL_STEP_MAX_PARAMS = 200_000_000


def preset(name: str, **overrides) -> M.ModelConfig:
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; known presets: {', '.join(PRESET_NAMES)}")
    hidden, layers, heads = map(int, _NAME.match(name).groups())
    return M.ModelConfig(hidden_size=hidden, num_layers=layers, num_heads=heads, **overrides)


def _probe_batch(length: int, seed: int):
    rng = np.random.default_rng([seed, 7])
    letters = np.array(list(STANDARD_RESIDUES))
    seq = "".join(rng.choice(letters, size=length - 2))
    return mask_batch([encode(seq)], rng, length)


def _layer_rng(seed: int, layer: int):
    # layer -1 is the embedding
    return np.random.default_rng([seed, 11, layer + 1])


def full_step(config: M.ModelConfig, seed: int = 0, length: int = 32):
    """Materialise all parameters and run one MLM forward/backward on a 1 x ``length`` batch."""
    batch = _probe_batch(length, seed)
    params = M.init_parameters(config, seed)
    with T.Tape() as tape:
        out = M.encode(params, batch, config, "train", np.random.default_rng([seed, 11]))
        logits = M.mlm_logits(params, out)
        loss = T.cross_entropy_masked(T.reshape(logits, (length, -1)),
                                      batch.target_ids.reshape(-1), batch.target_mask.reshape(-1))
    tape.backward(loss)
    grads = OrderedDict((n, p.grad) for n, p in params.items())
    return float(loss.data), grads


def streamed_step(config: M.ModelConfig, seed: int = 0, length: int = 32, keep_grads: bool = False):
    """Same step as :func:`full_step`, holding at most one layer's parameters at a time.

    Returns ``(loss, grads)`` where ``grads`` maps name to gradient when
    ``keep_grads`` is set and to the gradient's element count otherwise.
    Raises :class:`NonFiniteError` if any gradient is not finite.
    """
    batch = _probe_batch(length, seed)
    ids, mask = batch.input_ids, batch.attention_mask
    grads: Dict[str, object] = OrderedDict()

    def collect(tensors):
        for n, p in tensors.items():
            if not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient in {n}")
            if keep_grads:
                grads[n] = grads[n] + p.grad if n in grads else p.grad
            else:
                grads[n] = p.size

    emb = M.init_parameters(config, seed, ["embed.token", "embed.position"])
    with T.no_grad():
        x = M.embed(emb, ids, config, True, _layer_rng(seed, -1))
    acts = [x.data]
    for l in range(config.num_layers):
        lp = {n: M.init_tensor(n, s, seed) for n, s in M.layer_shapes(config, l).items()}
        with T.no_grad():
            x = M.encoder_layer(lp, l, T.Tensor(acts[-1]), mask, config, True, _layer_rng(seed, l))
        acts.append(x.data)
        del lp

    top_names = ["embed.token"] + (["final_ln.gamma", "final_ln.beta"] if config.pre_ln else []) + ["mlm.bias"]
    top = M.init_parameters(config, seed, top_names)
    xin = T.Tensor(acts[-1], requires_grad=True)
    with T.Tape() as tape:
        h = xin
        if config.pre_ln:
            h = T.layer_norm(h, top["final_ln.gamma"], top["final_ln.beta"], config.ln_eps)
        out = M.EncoderOutput(h, T.take(h, (slice(None), 0)), mask, batch.lengths)
        logits = M.mlm_logits(top, out)
        loss = T.cross_entropy_masked(T.reshape(logits, (length, -1)),
                                      batch.target_ids.reshape(-1), batch.target_mask.reshape(-1))
    tape.backward(loss)
    dx = xin.grad
    tied = top.pop("embed.token")
    collect(top)

    for l in reversed(range(config.num_layers)):
        lp = {n: M.init_tensor(n, s, seed) for n, s in M.layer_shapes(config, l).items()}
        xin = T.Tensor(acts[l], requires_grad=True)
        with T.Tape() as tape:
            y = M.encoder_layer(lp, l, xin, mask, config, True, _layer_rng(seed, l))
        tape.backward(y, dx)
        dx = xin.grad
        collect(lp)
        del lp

    emb["embed.token"].grad = tied.grad
    with T.Tape() as tape:
        x = M.embed(emb, ids, config, True, _layer_rng(seed, -1))
    tape.backward(x, dx)
    collect(emb)
    return float(loss.data), grads


def grid_step(name: str, seed: int = 0, length: int = 32, max_full_params: int = FULL_STEP_MAX_PARAMS) -> dict:
    """One forward/backward on a preset; reports counts and whether the step was streamed."""
    config = preset(name, max_positions=512)
    expected = M.count_parameters(config)
    t0 = time.perf_counter()
    if expected <= max_full_params:
        loss, grads = full_step(config, seed, length)
        for n, g in grads.items():
            if g is None or not np.isfinite(g).all():
                raise NonFiniteError(f"{name}: bad gradient for {n}")
        counted = sum(g.size for g in grads.values())
        mode = "full"
    else:
        loss, sizes = streamed_step(config, seed, length)
        counted = sum(sizes.values())
        mode = "streamed"
    if not np.isfinite(loss):
        raise NonFiniteError(f"{name}: non-finite loss")
    return {"name": name, "mode": mode, "loss": loss, "parameters": counted,
            "closed_form": expected, "seconds": time.perf_counter() - t0}
