"""Amino-acid vocabulary with BERT-style special tokens."""

from __future__ import annotations

from typing import Iterable, List

import numpy as np

from .errors import ContractError

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
RESIDUES = "ACDEFGHIKLMNPQRSTVWYBZXUO"
STANDARD_RESIDUES = RESIDUES[:20]

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
FIRST_RESIDUE_ID = len(SPECIAL_TOKENS)
VOCAB_SIZE = len(SPECIAL_TOKENS) + len(RESIDUES)


class Vocabulary:
    """Fixed 30-symbol token table. Instances are read-only."""

    def __init__(self):
        self._tokens = tuple(SPECIAL_TOKENS) + tuple(RESIDUES)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}
        # byte -> id lookup for fast encoding; everything unknown maps to [UNK]
        table = np.full(256, UNK_ID, dtype=np.int64)
        for i, letter in enumerate(RESIDUES):
            table[ord(letter)] = FIRST_RESIDUE_ID + i
            table[ord(letter.lower())] = FIRST_RESIDUE_ID + i
        table.setflags(write=False)
        self._byte_table = table

    def __len__(self):
        return len(self._tokens)

    def __iter__(self):
        return iter(self._tokens)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise IndexError(f"token id {idx} outside vocabulary of size {len(self._tokens)}")
        return self._tokens[idx]

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def encode(self, text: str) -> List[int]:
        if not text:
            raise ContractError("cannot encode an empty sequence")
        # one byte per character; anything outside latin-1 becomes '?' -> [UNK]
        raw = np.frombuffer(text.encode("latin-1", errors="replace"), dtype=np.uint8)
        return [CLS_ID, *self._byte_table[raw].tolist(), SEP_ID]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self._tokens):
                raise IndexError(f"token id {i} outside vocabulary of size {len(self._tokens)}")
            if i == UNK_ID:
                out.append("X")
            elif i >= FIRST_RESIDUE_ID:
                out.append(self._tokens[i])
        return "".join(out)

    def dump(self) -> str:
        return "".join(f"{i}\t{tok}\n" for i, tok in enumerate(self._tokens))


VOCAB = Vocabulary()


def encode(text: str) -> List[int]:
    """Encode a residue string as ``[CLS] residues... [SEP]``.

    Lowercase letters are accepted; characters outside the 25-letter residue
    alphabet become ``[UNK]``.

    >>> encode("ACD")
    [2, 5, 6, 7, 3]
    """
    return VOCAB.encode(text)


def decode(ids: Iterable[int]) -> str:
    """Inverse of :func:`encode` on the residue span; ``[UNK]`` renders as ``X``."""
    return VOCAB.decode(ids)
