"""
Command-line entry point: ``protlm <command> [options]``.

Commands: gen, pretrain, finetune, eval, visualize, vocab.

Run settings come from defaults, then an optional ``--config`` file of
``key = value`` lines (``#`` starts a comment), then command-line flags.
Exit status is 0 on success, 2 for usage, configuration or input errors and
3 when training diverges.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint, corpus, metrics, tasks, trainer
from . import model as M
from . import tensor as T
from .errors import ConfigError, ContractError, DivergenceError, ProtLMError
from .presets import PRESET_NAMES, preset
from .tokenizer import VOCAB

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3

PRESET_HELP = (
    "named model preset, one of: " + ", ".join(PRESET_NAMES)
    + ". Depth between 8 and 24 layers with hidden size between 512 and 3072 is the range"
      " known to train well at scale; desk runs should use small explicit sizes."
)

# output file names per generator
_GEN_FILES = {
    "motif": ("motif.fasta", None),
    "homology": ("homology.txt", "fold"),
    "ss3": ("ss3.txt", "ss3"),
    "ss8": ("ss8.txt", "ss8"),
    "contact": ("contact.txt", "contact"),
    "mutation": ("mutation_{split}.txt", "fluorescence"),
}


class UsageError(ProtLMError):
    pass


@dataclass
class RunConfig:
    preset: str = ""
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_size: int = 0
    max_positions: int = 128
    dropout: float = 0.1
    pre_ln: bool = True
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    batch_size: int = 32
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0
    report_every: int = 100
    train: str = ""
    valid: str = ""
    out: str = ""
    task: str = ""
    checkpoint: str = ""
    num_classes: int = 0
    min_sep: int = metrics.DEFAULT_MIN_SEP

    def model_config(self) -> M.ModelConfig:
        kw = dict(ffn_size=self.ffn_size, max_positions=self.max_positions,
                  dropout=self.dropout, pre_ln=self.pre_ln)
        if self.preset:
            return preset(self.preset, **kw)
        return M.ModelConfig(hidden_size=self.hidden_size, num_layers=self.num_layers,
                             num_heads=self.num_heads, **kw)

    def schedule(self) -> trainer.Schedule:
        return trainer.Schedule(self.peak_lr, self.warmup_steps, self.total_steps)

    def adam(self) -> trainer.AdamConfig:
        return trainer.AdamConfig(weight_decay=self.weight_decay, clip_norm=self.clip_norm or None)


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_SIZE_KEYS = ("hidden_size", "num_layers", "num_heads")


def _coerce(key: str, text: str):
    typ = _TYPES[key] if isinstance(_TYPES[key], str) else _TYPES[key].__name__
    try:
        if typ == "bool":
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key} (expected {typ})") from None
    return text.strip()


def parse_config_text(text: str, source: str = "config") -> Dict[str, object]:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key = value")
        if key not in _TYPES:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, value.strip())
    return out


def resolve_config(file_values: Dict[str, object], flag_values: Dict[str, object]) -> RunConfig:
    values = {**file_values, **flag_values}
    name = values.get("preset") or ""
    if name:
        if name not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {name!r}")
        expanded = preset(name)
        for key in _SIZE_KEYS:
            if key in values and values[key] != getattr(expanded, key):
                raise ConfigError(f"{key}={values[key]} conflicts with preset {name}")
            values[key] = getattr(expanded, key)
    cfg = RunConfig(**values)
    cfg.model_config()  # validates sizes
    return cfg


def format_config(cfg: RunConfig) -> str:
    return "".join(f"# {k} = {v}\n" for k, v in asdict(cfg).items())


def _add_run_options(p: argparse.ArgumentParser, keys: Sequence[str]):
    p.add_argument("--config", help="file of key = value lines; flags override it")
    for key in keys:
        flag = "--" + key.replace("_", "-")
        kw = {"help": PRESET_HELP} if key == "preset" else {}
        if key == "out":
            p.add_argument("-o", flag, dest=key, default=None, **kw)
        else:
            p.add_argument(flag, dest=key, default=None, metavar=key.upper(), **kw)


_MODEL_KEYS = ("preset", "hidden_size", "num_layers", "num_heads", "ffn_size", "max_positions",
               "dropout", "pre_ln")
_TRAIN_KEYS = ("peak_lr", "warmup_steps", "total_steps", "batch_size", "weight_decay", "clip_norm",
               "seed", "report_every")


def _run_config(args, echo: bool = True) -> RunConfig:
    file_values = {}
    if args.config:
        file_values = parse_config_text(Path(args.config).read_text(), args.config)
    flags = {k: _coerce(k, v) for k, v in vars(args).items() if k in _TYPES and v is not None}
    cfg = resolve_config(file_values, flags)
    if echo:
        sys.stderr.write(format_config(cfg))
    return cfg


def _require(cfg: RunConfig, *keys: str):
    for key in keys:
        if not getattr(cfg, key):
            raise UsageError(f"missing required setting {key!r} (flag --{key.replace('_', '-')})")


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}") from None


def _load_records(path: str, task: str, num_classes: int = 0):
    kw = {"num_classes": num_classes} if num_classes else {}
    return corpus.parse_task_records(_read(path), task, **kw)


# commands

def cmd_gen(args) -> int:
    params: Dict[str, object] = {"count": args.count}
    if args.length:
        lo, _, hi = args.length.partition(":")
        params["length"] = (int(lo), int(hi)) if hi else int(lo)
    for item in args.param or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--param expects key=value, got {item!r}")
        try:
            params[key] = float(value) if "." in value else int(value)
        except ValueError:
            params[key] = value
    records = corpus.gen_synthetic(args.task, params, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name, fmt = _GEN_FILES[args.task]
    if args.task == "mutation":
        groups = {s: [r for r in records if r.family == s] for s in ("train", "test")}
    else:
        groups = {"": records}
    for split, recs in groups.items():
        path = out / name.format(split=split)
        text = corpus.write_fasta(recs) if fmt is None else corpus.serialize_task_records(recs, fmt)
        path.write_text(text)
        print(f"wrote {len(recs)} records to {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _run_config(args)
    _require(cfg, "train", "out")
    train = corpus.parse_fasta(_read(cfg.train))
    valid = corpus.parse_fasta(_read(cfg.valid)) if cfg.valid else None
    config = cfg.model_config()
    state = trainer.OptimizerState()
    params, report = trainer.pretrain(train, config, cfg.schedule(), seed=cfg.seed,
                                      report_every=cfg.report_every, valid=valid,
                                      batch_size=cfg.batch_size, adam=cfg.adam(), state=state)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save_checkpoint(params, config, out / "checkpoint.plm", state)
    (out / "report.csv").write_text(report.to_csv())
    loss = report.final_loss
    print(f"loss={loss:.4f} ppl={trainer.ppl(loss):.4f}")
    return EXIT_OK


def _print_metrics(scores: Dict[str, float]):
    for k, v in scores.items():
        print(f"{k}={v:.4f}")


def _task_of(cfg: RunConfig) -> str:
    _require(cfg, "task")
    if cfg.task not in corpus.TASK_KINDS:
        raise UsageError(f"unknown task {cfg.task!r}; expected one of {', '.join(corpus.TASK_KINDS)}")
    return cfg.task


def cmd_finetune(args) -> int:
    cfg = _run_config(args)
    task = _task_of(cfg)
    _require(cfg, "train", "out")
    head = tasks.head_for(task)
    records = _load_records(cfg.train, task, cfg.num_classes)
    eval_records = _load_records(cfg.valid, task, cfg.num_classes) if cfg.valid else None
    if cfg.checkpoint:
        base, config, _ = checkpoint.load_checkpoint(cfg.checkpoint)
        base = {n: p for n, p in base.items() if not n.startswith("head.")}
    else:
        base, config = None, cfg.model_config()
    params, report = trainer.finetune(records, head, config, cfg.schedule(), seed=cfg.seed, params=base,
                                      batch_size=cfg.batch_size, num_classes=cfg.num_classes or None,
                                      eval_records=eval_records, report_every=cfg.report_every,
                                      adam=cfg.adam(), min_sep=cfg.min_sep)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save_checkpoint(params, config, out / "checkpoint.plm")
    (out / "report.csv").write_text(report.to_csv())
    print(f"loss={report.rows[-1].loss:.4f}")
    _print_metrics(report.metrics)
    return EXIT_OK


def _contact_scores_from(record) -> np.ndarray:
    return record.label.contact.astype(np.float64)


def prediction_list(records, predicted, head: str) -> List:
    """Align predicted records to gold records by id and unpack their labels."""
    by_id = {r.id: r for r in predicted}
    out = []
    for r in records:
        p = by_id.get(r.id)
        if p is None:
            raise UsageError(f"no prediction for record {r.id!r}")
        if p.sequence != r.sequence:
            raise UsageError(f"prediction for {r.id!r} has a different sequence")
        out.append(_contact_scores_from(p) if head == "contact" else p.label)
    return out


def cmd_eval(args) -> int:
    cfg = _run_config(args, echo=False)
    task = _task_of(cfg)
    head = tasks.head_for(task)
    if not args.data:
        raise UsageError("missing --data")
    records = _load_records(args.data, task, cfg.num_classes)
    if args.predictions:
        preds = prediction_list(records, _load_records(args.predictions, task, cfg.num_classes), head)
    elif cfg.checkpoint:
        params, config, _ = checkpoint.load_checkpoint(cfg.checkpoint)
        if f"head.{head}.w1" not in params:
            raise ContractError(f"checkpoint has no {head} head for task {task}")
        preds = tasks.predict(params, config, records, head, config.max_positions, cfg.batch_size)
    else:
        raise UsageError("eval needs --predictions or --checkpoint")
    _print_metrics(tasks.score_predictions(records, preds, head, cfg.min_sep))
    return EXIT_OK


def pgm_bytes(image: np.ndarray) -> bytes:
    """Binary greyscale PGM (P5, maxval 255) of a uint8 matrix; row i is residue i."""
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def truth_image(contact: np.ndarray, band: Optional[str] = None) -> np.ndarray:
    img = np.where(np.asarray(contact, dtype=bool), 255, 0).astype(np.uint8)
    return _apply_band(img, band)


def score_image(scores: np.ndarray, band: Optional[str] = None) -> np.ndarray:
    s = np.clip(np.asarray(scores, dtype=np.float64), 0.0, 1.0)
    return _apply_band(np.rint(255 * s).astype(np.uint8), band)


def _apply_band(img: np.ndarray, band: Optional[str]) -> np.ndarray:
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise UsageError(f"contact matrix must be square, got shape {img.shape}")
    if band == "long":
        i, j = np.indices(img.shape)
        img = np.where(np.abs(i - j) < metrics.LONG_MIN_SEP, 0, img).astype(np.uint8)
    return img


def _read_matrix(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        try:
            return np.load(path)
        except OSError as e:
            raise UsageError(f"cannot read {path}: {e}") from None
    rows = [line.split() for line in _read(path).splitlines() if line.strip() and not line.startswith("#")]
    if not rows or len({len(r) for r in rows}) != 1:
        raise UsageError(f"{path}: rows of unequal length")
    try:
        return np.array(rows, dtype=np.float64)
    except ValueError:
        raise UsageError(f"{path}: non-numeric entry") from None


def cmd_visualize(args) -> int:
    if not (args.truth_out or args.pred_out):
        raise UsageError("nothing to write: give --truth-out and/or --pred-out")
    record = None
    if args.truth:
        records = _load_records(args.truth, "contact")
        if args.id:
            match = [r for r in records if r.id == args.id]
            if not match:
                raise UsageError(f"no record {args.id!r} in {args.truth}")
            record = match[0]
        else:
            record = records[0]
    if args.truth_out:
        if record is None:
            raise UsageError("--truth-out needs --truth")
        Path(args.truth_out).write_bytes(pgm_bytes(truth_image(record.label.contact, args.band)))
    if args.pred_out:
        if args.scores:
            scores = _read_matrix(args.scores)
        elif args.checkpoint and record is not None:
            params, config, _ = checkpoint.load_checkpoint(args.checkpoint)
            logits = tasks.predict(params, config, [record], "contact", config.max_positions)[0]
            scores = 1.0 / (1.0 + np.exp(-logits))
        else:
            raise UsageError("--pred-out needs --scores, or --checkpoint with --truth")
        Path(args.pred_out).write_bytes(pgm_bytes(score_image(scores, args.band)))
    return EXIT_OK


def cmd_vocab(args) -> int:
    sys.stdout.write(VOCAB.dump())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protlm", description="Protein masked language model toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic corpus")
    g.add_argument("--task", required=True, choices=sorted(_GEN_FILES))
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--length", help="residues per sequence, N or LO:HI")
    g.add_argument("--param", action="append", metavar="KEY=VALUE", help="generator parameter")
    g.add_argument("-o", "--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="masked-LM pretraining on FASTA files",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="Depth guidance: 8 < layers < 24 with 512 < hidden < 3072 at scale.")
    _add_run_options(p, _MODEL_KEYS + _TRAIN_KEYS + ("train", "valid", "out"))
    p.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="train a task head (and the encoder) on task records")
    _add_run_options(f, _MODEL_KEYS + _TRAIN_KEYS + ("task", "train", "valid", "checkpoint", "out",
                                                     "num_classes", "min_sep"))
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="print metric=value lines for predictions or a checkpoint")
    _add_run_options(e, ("task", "checkpoint", "num_classes", "min_sep", "batch_size"))
    e.add_argument("--data", help="gold task records")
    e.add_argument("--predictions", help="predicted task records, same format as --data")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="write contact maps as PGM images")
    v.add_argument("--truth", help="contact task records")
    v.add_argument("--id", help="record id (default: first record)")
    v.add_argument("--scores", help="L x L score matrix, .npy or whitespace text")
    v.add_argument("--checkpoint", help="contact-finetuned checkpoint to score --truth's record")
    v.add_argument("--band", choices=["all", "long"], default="all")
    v.add_argument("--truth-out")
    v.add_argument("--pred-out")
    v.set_defaults(func=cmd_visualize)

    c = sub.add_parser("vocab", help="print the token table")
    c.add_argument("action", nargs="?", choices=["dump"], default="dump")
    c.set_defaults(func=cmd_vocab)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ProtLMError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        if isinstance(e, UsageError):
            parser.print_usage(sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
