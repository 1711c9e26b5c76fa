"""Byte-level BPE tokenizer.

Ids 0..255 are the raw bytes, 256/257 are the BOS/PAD specials, and every id
from 258 up is a learned merge. Because the byte base covers every input,
``decode(encode(x)) == x`` for arbitrary byte strings; specials never appear
in encoder output and decode to the empty string.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, FormatVersionError, InputError
from .runtime import sha256_bytes

N_BYTES = 256
BOS_ID = 256
PAD_ID = 257
N_SPECIALS = 2
MIN_VOCAB = N_BYTES + N_SPECIALS

_FORMAT_MAGIC = "BBPE"
_FORMAT_VERSION = 1

# Inputs longer than this are encoded by replaying merges over a numpy array
# (O(merges * n)) instead of the rank-min loop; both paths give identical ids.
_VECTOR_ENCODE_THRESHOLD = 4096


@dataclass
class Tokenizer:
    """Frozen vocabulary: byte table + ordered merge list."""

    vocab: dict[int, bytes]
    merges: list[tuple[int, int]]  # merge k creates id MIN_VOCAB + k
    vocab_size: int
    _ranks: dict[tuple[int, int], int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self._ranks:
            self._ranks = {pair: k for k, pair in enumerate(self.merges)}

    @property
    def bos_id(self) -> int:
        return BOS_ID

    @property
    def pad_id(self) -> int:
        return PAD_ID

    def encode(self, text: bytes | str) -> list[int]:
        if isinstance(text, str):
            text = text.encode("utf-8")
        ids = list(text)
        if len(ids) < 2 or not self.merges:
            return ids
        if len(ids) >= _VECTOR_ENCODE_THRESHOLD:
            return self._encode_replay(np.asarray(ids, dtype=np.int64)).tolist()
        while len(ids) >= 2:
            best_rank = None
            best_pair = None
            for pair in zip(ids, ids[1:]):
                r = self._ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank, best_pair = r, pair
            if best_pair is None:
                break
            ids = _merge_list(ids, best_pair, MIN_VOCAB + best_rank)
        return ids

    def encode_array(self, data: bytes) -> np.ndarray:
        """Encode a large byte blob (corpus path), returning int64 ids."""
        ids = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
        return self._encode_replay(ids)

    def _encode_replay(self, ids: np.ndarray) -> np.ndarray:
        for k, pair in enumerate(self.merges):
            ids = _merge_array(ids, pair, MIN_VOCAB + k)
        return ids

    def decode(self, ids) -> bytes:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.vocab_size:
                raise InputError(f"token id {i} outside vocabulary of size {self.vocab_size}")
            out.append(self.vocab.get(i, b""))
        return b"".join(out)

    def checksum(self) -> str:
        return sha256_bytes(self.dumps().encode("utf-8"))

    # -- serialization: versioned text, one hex vocab entry per line, merges appended

    def dumps(self) -> str:
        lines = [f"{_FORMAT_MAGIC} {_FORMAT_VERSION} {self.vocab_size} {len(self.merges)}"]
        for i in range(self.vocab_size):
            lines.append(self.vocab.get(i, b"").hex())
        for a, b in self.merges:
            lines.append(f"{a} {b}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Tokenizer":
        lines = text.splitlines()
        if not lines:
            raise CorruptionError("empty tokenizer file")
        header = lines[0].split()
        if len(header) != 4 or header[0] != _FORMAT_MAGIC:
            raise CorruptionError("bad tokenizer header")
        version, vocab_size, n_merges = (int(x) for x in header[1:])
        if version != _FORMAT_VERSION:
            raise FormatVersionError(f"unsupported tokenizer format version {version}")
        if len(lines) != 1 + vocab_size + n_merges:
            raise CorruptionError("tokenizer file truncated")
        vocab = {i: bytes.fromhex(lines[1 + i]) for i in range(vocab_size)}
        merges = []
        for k in range(n_merges):
            a, b = lines[1 + vocab_size + k].split()
            merges.append((int(a), int(b)))
        tok = cls(vocab=vocab, merges=merges, vocab_size=vocab_size)
        for k, (a, b) in enumerate(merges):
            if vocab[MIN_VOCAB + k] != vocab[a] + vocab[b]:
                raise CorruptionError(f"merge {k} inconsistent with vocab table")
        return tok

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path) -> "Tokenizer":
        with open(path, "r", encoding="ascii") as f:
            return cls.loads(f.read())


def build(corpus: bytes, vocab_size: int) -> Tokenizer:
    """Learn a tokenizer by greedy highest-frequency pair merging.

    Ties between equally frequent pairs break toward the smaller (a, b) tuple
    so rebuilding on the same corpus is deterministic. Merging stops early if
    no pair occurs at least twice.
    """
    if not corpus:
        raise InputError("cannot build a tokenizer from an empty corpus")
    if vocab_size < MIN_VOCAB:
        raise InputError(f"vocab_size must be >= {MIN_VOCAB}, got {vocab_size}")

    vocab = {i: bytes([i]) for i in range(N_BYTES)}
    vocab[BOS_ID] = b""
    vocab[PAD_ID] = b""

    ids = np.frombuffer(corpus, dtype=np.uint8).astype(np.int64)
    merges: list[tuple[int, int]] = []
    for new_id in range(MIN_VOCAB, vocab_size):
        pair = _top_pair(ids)
        if pair is None:
            break
        ids = _merge_array(ids, pair, new_id)
        merges.append(pair)
        vocab[new_id] = vocab[pair[0]] + vocab[pair[1]]
    return Tokenizer(vocab=vocab, merges=merges, vocab_size=vocab_size)


def _top_pair(ids: np.ndarray) -> tuple[int, int] | None:
    """Most frequent adjacent pair; ties broken by smallest pair. None if no repeat."""
    if ids.size < 2:
        return None
    pairs = ids[:-1] * (1 << 32) + ids[1:]  # pack; ids stay far below 2**32
    uniq, counts = np.unique(pairs, return_counts=True)
    top = counts.max()
    if top < 2:
        return None
    best = uniq[counts == top].min()
    return int(best >> 32), int(best & 0xFFFFFFFF)


def _merge_array(ids: np.ndarray, pair: tuple[int, int], new_id: int) -> np.ndarray:
    """Leftmost non-overlapping replacement of `pair` by `new_id`."""
    hits = np.flatnonzero((ids[:-1] == pair[0]) & (ids[1:] == pair[1]))
    if hits.size == 0:
        return ids
    if pair[0] == pair[1]:
        # drop overlapping matches, keeping the leftmost of each run
        keep = []
        last = -2
        for p in hits.tolist():
            if p > last + 1:
                keep.append(p)
                last = p
        hits = np.asarray(keep, dtype=np.int64)
    out = ids.copy()
    out[hits] = new_id
    mask = np.ones(ids.size, dtype=bool)
    mask[hits + 1] = False
    return out[mask]


def _merge_list(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i = 0
    n = len(ids)
    while i < n:
        if i < n - 1 and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out
