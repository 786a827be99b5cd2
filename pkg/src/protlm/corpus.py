"""
Sequence and task-record ingestion, family-aware splitting, and synthetic
corpora.

Task records are one per line, whitespace-separated ``key=value`` fields::

    id=p1 sequence=MKVLA ss3=HHECC
    id=p2 sequence=MKVLA fold=17
    id=p3 sequence=MKVLA contacts=0:3,1:4 valid_mask=11111
    id=p4 sequence=MKVLA value=1.25

See docs/FORMATS.md for the full grammar.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, FormatError
from .tokenizer import RESIDUES, STANDARD_RESIDUES

log = logging.getLogger(__name__)

SS3_LABELS = "HEC"
SS8_LABELS = "GHIEBTSC"
NUM_FOLD_CLASSES = 1195

TASK_KINDS = ("ss3", "ss8", "fold", "contact", "fluorescence", "stability")
_LABEL_FIELD = {
    "ss3": "ss3",
    "ss8": "ss8",
    "fold": "fold",
    "contact": "contacts",
    "fluorescence": "value",
    "stability": "value",
}


@dataclass(eq=False)
class ContactMap:
    """Symmetric boolean contact matrix over residues plus the resolved-pair mask."""

    contact: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.contact = np.asarray(self.contact, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        L = self.contact.shape[0]
        if self.contact.shape != (L, L) or self.valid.shape != (L, L):
            raise ContractError("contact and valid must both be L x L")
        if not (self.contact == self.contact.T).all() or not (self.valid == self.valid.T).all():
            raise ContractError("contact map must be symmetric")
        if self.contact.diagonal().any():
            raise ContractError("contact map diagonal must be false")
        if (self.contact & ~self.valid).any():
            raise ContractError("contact at an unresolved pair")

    @property
    def size(self) -> int:
        return self.contact.shape[0]

    @classmethod
    def from_pairs(cls, length: int, pairs: Iterable[Tuple[int, int]], resolved=None) -> "ContactMap":
        contact = np.zeros((length, length), dtype=bool)
        for i, j in pairs:
            if not (0 <= i < length and 0 <= j < length):
                raise ContractError(f"contact ({i},{j}) outside sequence of length {length}")
            if i == j:
                raise ContractError(f"self contact ({i},{i})")
            contact[i, j] = contact[j, i] = True
        if resolved is None:
            resolved = np.ones(length, dtype=bool)
        resolved = np.asarray(resolved, dtype=bool)
        valid = np.outer(resolved, resolved)
        return cls(contact, valid)

    def pairs(self) -> List[Tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.contact, 1))
        return list(zip(i.tolist(), j.tolist()))

    def resolved(self) -> np.ndarray:
        return self.valid.diagonal().copy()

    def __eq__(self, other):
        return (isinstance(other, ContactMap)
                and np.array_equal(self.contact, other.contact)
                and np.array_equal(self.valid, other.valid))


Label = Union[str, int, float, ContactMap, None]


@dataclass
class ProteinRecord:
    id: str
    sequence: str
    family: Optional[str] = None
    label: Label = None

    def __post_init__(self):
        if not self.sequence:
            raise ContractError(f"record {self.id!r}: empty sequence")
        if isinstance(self.label, str) and len(self.label) != len(self.sequence):
            raise ContractError(f"record {self.id!r}: label length {len(self.label)} "
                                f"!= sequence length {len(self.sequence)}")
        if isinstance(self.label, ContactMap) and self.label.size != len(self.sequence):
            raise ContractError(f"record {self.id!r}: contact map size {self.label.size} "
                                f"!= sequence length {len(self.sequence)}")


@dataclass
class DatasetSplit:
    train: List[ProteinRecord] = field(default_factory=list)
    valid: List[ProteinRecord] = field(default_factory=list)
    test: List[ProteinRecord] = field(default_factory=list)
    holdout: List[ProteinRecord] = field(default_factory=list)


# ------------------------------------------------------------------- FASTA


def _text(data) -> str:
    if isinstance(data, (bytes, bytearray)):
        return data.decode("utf-8")
    return data


def parse_fasta(data) -> List[ProteinRecord]:
    """Parse FASTA text. A ``family=NAME`` token in a header sets the family."""
    records = []
    header = None
    header_line = 0
    chunks: List[str] = []

    def flush():
        if header is None:
            return
        seq = "".join(chunks)
        if not seq:
            raise FormatError(f"record {header[0]!r} has an empty sequence", header_line)
        family = None
        for tok in header[1:]:
            if tok.startswith("family="):
                family = tok[len("family="):]
        records.append(ProteinRecord(header[0], seq, family))

    for lineno, line in enumerate(_text(data).splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            header = line[1:].split()
            if not header:
                raise FormatError("header without an id", lineno)
            header_line = lineno
            chunks = []
        elif header is None:
            raise FormatError("sequence data before the first header", lineno)
        else:
            chunks.append("".join(line.split()))
    flush()
    return records


def write_fasta(records: Iterable[ProteinRecord], width: int = 60) -> str:
    out = []
    for r in records:
        head = f">{r.id}" + (f" family={r.family}" if r.family else "")
        out.append(head)
        for k in range(0, len(r.sequence), width):
            out.append(r.sequence[k:k + width])
    return "\n".join(out) + "\n"


# ------------------------------------------------------------ task records


def _parse_fields(line: str, lineno: int) -> Dict[str, str]:
    fields = {}
    for tok in line.split():
        key, sep, value = tok.partition("=")
        if not sep:
            raise FormatError(f"field {tok!r} is not key=value", lineno)
        if key in fields:
            raise FormatError(f"duplicate field {key!r}", lineno)
        fields[key] = value
    return fields


def _parse_contacts(text: str, length: int, lineno: int) -> List[Tuple[int, int]]:
    pairs = []
    if not text:
        return pairs
    for item in text.split(","):
        a, sep, b = item.partition(":")
        try:
            i, j = int(a), int(b)
        except ValueError:
            raise FormatError(f"bad contact pair {item!r}", lineno) from None
        if not sep or i < 0 or j < 0:
            raise FormatError(f"bad contact pair {item!r}", lineno)
        if i >= length or j >= length:
            raise FormatError(f"contact index in {item!r} >= sequence length {length}", lineno)
        if i == j:
            raise FormatError(f"self contact {item!r}", lineno)
        pairs.append((i, j))
    return pairs


def parse_task_records(data, task: str, num_classes: int = NUM_FOLD_CLASSES) -> List[ProteinRecord]:
    """Parse line-delimited task records for one of :data:`TASK_KINDS`."""
    if task not in TASK_KINDS:
        raise ContractError(f"unknown task {task!r}; expected one of {TASK_KINDS}")
    label_key = _LABEL_FIELD[task]
    allowed = {"id", "sequence", "family", label_key}
    if task == "contact":
        allowed.add("valid_mask")
    records = []
    for lineno, line in enumerate(_text(data).splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        f = _parse_fields(line, lineno)
        for key in ("id", "sequence", label_key):
            if key not in f:
                raise FormatError(f"missing field {key!r}", lineno)
        extra = set(f) - allowed
        if extra:
            raise FormatError(f"unexpected fields {sorted(extra)} for task {task}", lineno)
        seq = f["sequence"]
        if not seq:
            raise FormatError("empty sequence", lineno)
        L = len(seq)
        raw = f[label_key]
        if task in ("ss3", "ss8"):
            alphabet = SS3_LABELS if task == "ss3" else SS8_LABELS
            if len(raw) != L:
                raise FormatError(f"{task} label length {len(raw)} != sequence length {L}", lineno)
            bad = set(raw) - set(alphabet)
            if bad:
                raise FormatError(f"{task} labels {sorted(bad)} not in {alphabet}", lineno)
            label: Label = raw
        elif task == "fold":
            try:
                label = int(raw)
            except ValueError:
                raise FormatError(f"fold class {raw!r} is not an integer", lineno) from None
            if not 0 <= label < num_classes:
                raise FormatError(f"fold class {label} outside [0, {num_classes})", lineno)
        elif task == "contact":
            pairs = _parse_contacts(raw, L, lineno)
            mask_text = f.get("valid_mask", "1" * L)
            if len(mask_text) != L or set(mask_text) - {"0", "1"}:
                raise FormatError("valid_mask must be a 0/1 string of sequence length", lineno)
            resolved = np.array([c == "1" for c in mask_text])
            if any(not (resolved[i] and resolved[j]) for i, j in pairs):
                raise FormatError("contact touches an unresolved residue", lineno)
            label = ContactMap.from_pairs(L, pairs, resolved)
        else:
            try:
                label = float(raw)
            except ValueError:
                raise FormatError(f"value {raw!r} is not a number", lineno) from None
            if not math.isfinite(label):
                raise FormatError("value must be finite", lineno)
        records.append(ProteinRecord(f["id"], seq, f.get("family"), label))
    return records


def serialize_task_records(records: Iterable[ProteinRecord], task: str) -> str:
    if task not in TASK_KINDS:
        raise ContractError(f"unknown task {task!r}")
    key = _LABEL_FIELD[task]
    lines = []
    for r in records:
        parts = [f"id={r.id}", f"sequence={r.sequence}"]
        if r.family:
            parts.append(f"family={r.family}")
        if task == "contact":
            cm = r.label
            parts.append("contacts=" + ",".join(f"{i}:{j}" for i, j in cm.pairs()))
            parts.append("valid_mask=" + "".join("1" if v else "0" for v in cm.resolved()))
        elif task in ("fluorescence", "stability"):
            parts.append(f"value={float(r.label)!r}")
        else:
            parts.append(f"{key}={r.label}")
        lines.append(" ".join(parts))
    return "".join(line + "\n" for line in lines)


def truncate_record(record: ProteinRecord, max_residues: int) -> ProteinRecord:
    """Cut a record to ``max_residues``, labels in lockstep."""
    L = len(record.sequence)
    if L <= max_residues:
        return record
    log.warning("truncating %s from %d to %d residues", record.id, L, max_residues)
    label = record.label
    if isinstance(label, str):
        label = label[:max_residues]
    elif isinstance(label, ContactMap):
        n = max_residues
        label = ContactMap(label.contact[:n, :n], label.valid[:n, :n])
    return ProteinRecord(record.id, record.sequence[:max_residues], record.family, label)


# ------------------------------------------------------------------ splits


def family_split(records: Sequence[ProteinRecord], holdout_frac: float = 0.01,
                 valid_frac: float = 0.05, seed: int = 0, test_frac: float = 0.0) -> DatasetSplit:
    """Hold out whole families, then split the rest per record.

    Families are visited in a seeded shuffled order and moved to holdout
    until at least ``holdout_frac`` of the records are held out.  Each
    remaining record goes to valid with probability ``valid_frac`` and to
    test with probability ``test_frac``.
    """
    missing = [r.id for r in records if r.family is None]
    if missing:
        raise ContractError(f"records without a family: {missing[:5]}")
    rng = np.random.default_rng(seed)
    by_family: Dict[str, List[int]] = {}
    for idx, r in enumerate(records):
        by_family.setdefault(r.family, []).append(idx)
    families = sorted(by_family)
    order = rng.permutation(len(families))
    target = holdout_frac * len(records)
    held = set()
    n_held = 0
    for k in order:
        if n_held >= target:
            break
        fam = families[k]
        held.add(fam)
        n_held += len(by_family[fam])

    split = DatasetSplit()
    rest = [r for r in records if r.family not in held]
    split.holdout = [r for r in records if r.family in held]
    u = rng.random(len(rest))
    for r, x in zip(rest, u):
        if x < valid_frac:
            split.valid.append(r)
        elif x < valid_frac + test_frac:
            split.test.append(r)
        else:
            split.train.append(r)
    return split


def hamming_distance(a: str, b: str) -> int:
    if len(a) != len(b):
        raise ContractError(f"hamming distance needs equal lengths, got {len(a)} and {len(b)}")
    return sum(x != y for x, y in zip(a, b))


# ------------------------------------------------------------ synthetic data


def _lengths(params, rng, n) -> np.ndarray:
    length = params.get("length", (32, 48))
    if isinstance(length, int):
        lo = hi = length
    else:
        lo, hi = length
    if lo < 1 or hi < lo:
        raise ContractError(f"bad length range {length!r}")
    return rng.integers(lo, hi + 1, size=n)


def _random_seq(rng, alphabet: str, n: int) -> str:
    letters = np.frombuffer(alphabet.encode(), dtype=np.uint8)
    return letters[rng.integers(0, len(letters), size=n)].tobytes().decode()


def _class_motifs(n_classes: int, k: int, alphabet: str, seed: int) -> List[str]:
    rng = np.random.default_rng([seed, 0x6D6F74])
    motifs: List[str] = []
    while len(motifs) < n_classes:
        m = _random_seq(rng, alphabet, k)
        if m not in motifs:
            motifs.append(m)
    return motifs


def ss_rule(residue: str, task: str = "ss3") -> str:
    """Fixed residue-identity -> secondary-structure label used by the synthetic task."""
    labels = SS3_LABELS if task == "ss3" else SS8_LABELS
    idx = RESIDUES.find(residue)
    return labels[(idx if idx >= 0 else 0) % len(labels)]


def mutation_parent(params: dict, seed: int) -> str:
    rng = np.random.default_rng([seed, 0x706172])
    return params.get("parent") or _random_seq(rng, params.get("alphabet", STANDARD_RESIDUES),
                                               int(params.get("length", 40)))


def mutation_value(parent: str, seq: str) -> float:
    """Smooth additive fitness: each mutated position p contributes 1 + sin(2 pi p / L)."""
    L = len(parent)
    return float(sum(1.0 + math.sin(2 * math.pi * p / L)
                     for p, (a, b) in enumerate(zip(parent, seq)) if a != b))


def gen_synthetic(task: str, params: Optional[dict] = None, seed: int = 0) -> List[ProteinRecord]:
    """Deterministic desk-scale corpora.

    ``task`` is one of ``motif``, ``homology``, ``ss3``, ``ss8``, ``contact``,
    ``mutation``.  ``params`` always takes ``count``; most generators take a
    ``length`` (int or ``(lo, hi)`` inclusive) and an ``alphabet``.
    """
    params = dict(params or {})
    count = int(params.get("count", 64))
    alphabet = params.get("alphabet", STANDARD_RESIDUES)
    rng = np.random.default_rng([seed, sum(map(ord, task))])
    records = []

    if task == "motif":
        motif = params.get("motif", "MKVLA")
        lengths = _lengths(params, rng, count)
        if len(motif) > lengths.min():
            raise ContractError(f"motif of length {len(motif)} does not fit sequences of length {lengths.min()}")
        n_fam = int(params.get("families", 0))
        for n, L in enumerate(lengths):
            seq = _random_seq(rng, alphabet, L)
            off = rng.integers(0, L - len(motif) + 1)
            seq = seq[:off] + motif + seq[off + len(motif):]
            family = f"F{rng.integers(n_fam)}" if n_fam else None
            records.append(ProteinRecord(f"motif{n}", seq, family))

    elif task == "homology":
        n_classes = int(params.get("classes", 8))
        k = int(params.get("k", 5))
        motifs = _class_motifs(n_classes, k, alphabet, seed)
        lengths = _lengths(params, rng, count)
        if k > lengths.min():
            raise ContractError(f"motif of length {k} does not fit sequences of length {lengths.min()}")
        for n, L in enumerate(lengths):
            c = n % n_classes
            seq = _random_seq(rng, alphabet, L)
            off = rng.integers(0, L - k + 1)
            seq = seq[:off] + motifs[c] + seq[off + k:]
            records.append(ProteinRecord(f"hom{n}", seq, f"class{c}", c))

    elif task in ("ss3", "ss8"):
        for n, L in enumerate(_lengths(params, rng, count)):
            seq = _random_seq(rng, alphabet, L)
            records.append(ProteinRecord(f"{task}_{n}", seq, None,
                                         "".join(ss_rule(c, task) for c in seq)))

    elif task == "contact":
        # Contacts sit on the anti-diagonal wherever mirrored residues agree;
        # match_prob raises the contact density above the chance 1/|alphabet|.
        alphabet = params.get("alphabet", "ACDE")
        match_prob = float(params.get("match_prob", 0.0))
        for n, L in enumerate(_lengths(params, rng, count)):
            seq = list(_random_seq(rng, alphabet, L))
            for i in range(L // 2):
                if rng.random() < match_prob:
                    seq[L - 1 - i] = seq[i]
            seq = "".join(seq)
            records.append(ProteinRecord(f"contact{n}", seq, None, contact_rule_map(seq)))

    elif task == "mutation":
        parent = mutation_parent(params, seed)
        L = len(parent)
        max_train = int(params.get("max_train_mutations", 3))
        max_test = int(params.get("max_test_mutations", 6))
        test_count = int(params.get("test_count", count // 4))
        if max_test > L:
            raise ContractError("more mutations requested than parent positions")
        for n in range(count + test_count):
            d = int(rng.integers(1, max_train + 1)) if n < count else int(rng.integers(max_train + 1, max_test + 1))
            pos = rng.choice(L, size=d, replace=False)
            seq = list(parent)
            for p in pos:
                choices = [a for a in alphabet if a != parent[p]]
                seq[p] = choices[rng.integers(len(choices))]
            seq = "".join(seq)
            split = "train" if n < count else "test"
            records.append(ProteinRecord(f"mut{n}", seq, split, mutation_value(parent, seq)))

    else:
        raise ContractError(f"unknown synthetic task {task!r}")
    return records


def contact_rule_map(seq: str) -> ContactMap:
    L = len(seq)
    pairs = [(i, L - 1 - i) for i in range(L // 2) if seq[i] == seq[L - 1 - i]]
    return ContactMap.from_pairs(L, pairs)
