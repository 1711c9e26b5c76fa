"""Target-text sources: random tokens, seen/unseen corpus slices, model output.

Every generator is a pure seeded function; source labels are assigned by
construction and are mutually exclusive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tokenizer as tokenizer_mod
from .errors import InputError
from .tinylm import SamplingSpec, TinyLM, ar_generate, embed
from .tokenizer import Tokenizer

RANDOM = "random"
SEEN = "seen"
UNSEEN = "unseen"
GENERATED = "generated"

SOURCES = (RANDOM, SEEN, UNSEEN, GENERATED)


@dataclass(frozen=True)
class TargetText:
    ids: tuple
    source: str
    text_id: str
    context_id: str | None = None

    def __post_init__(self) -> None:
        if len(self.ids) < 1:
            raise InputError("target text must contain at least one token")
        if self.source not in SOURCES:
            raise InputError(f"unknown source label {self.source!r}")

    def __len__(self) -> int:
        return len(self.ids)

    def prefix(self, n: int) -> "TargetText":
        if not 1 <= n <= len(self.ids):
            raise InputError(f"prefix length {n} outside [1, {len(self.ids)}]")
        return TargetText(
            ids=self.ids[:n],
            source=self.source,
            text_id=f"{self.text_id}:{n}",
            context_id=self.context_id,
        )


def random_token_text(usable_ids, n: int, seed: int) -> TargetText:
    """n ids drawn i.i.d. uniformly from usable_ids."""
    usable = sorted(int(i) for i in usable_ids)
    if not usable:
        raise InputError("usable id set is empty")
    if n < 1:
        raise InputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(usable), size=n)
    ids = tuple(usable[i] for i in draws)
    return TargetText(ids=ids, source=RANDOM, text_id=f"random-s{seed}-n{n}")


def usable_vocabulary(tok: Tokenizer) -> list[int]:
    """All ids that decode to real bytes (specials and dead slots excluded)."""
    return [
        i
        for i in range(tok.vocab_size)
        if i not in (tokenizer_mod.BOS_ID, tokenizer_mod.PAD_ID) and tok.vocab.get(i, b"")
    ]


@dataclass(frozen=True)
class SplitManifest:
    """[start, end) token intervals per split, fixed before pretraining."""

    seen: tuple
    unseen: tuple

    def __post_init__(self) -> None:
        for name, (lo, hi) in (("seen", self.seen), ("unseen", self.unseen)):
            if lo < 0 or hi <= lo:
                raise InputError(f"bad {name} interval [{lo}, {hi})")
        s, u = self.seen, self.unseen
        if not (s[1] <= u[0] or u[1] <= s[0]):
            raise InputError("seen and unseen intervals overlap")

    def interval(self, split: str) -> tuple:
        if split == SEEN:
            return self.seen
        if split == UNSEEN:
            return self.unseen
        raise InputError(f"unknown split {split!r}")

    def dumps(self) -> str:
        return (
            "splits v1\n"
            f"seen {self.seen[0]} {self.seen[1]}\n"
            f"unseen {self.unseen[0]} {self.unseen[1]}\n"
        )

    @classmethod
    def loads(cls, text: str) -> "SplitManifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "splits v1":
            raise InputError("bad split manifest header")
        vals = {}
        for ln in lines[1:]:
            name, lo, hi = ln.split()
            vals[name] = (int(lo), int(hi))
        return cls(seen=vals["seen"], unseen=vals["unseen"])

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        with open(path, "r", encoding="ascii") as f:
            return cls.loads(f.read())


def corpus_slice(
    corpus_ids, manifest: SplitManifest, split: str, index: int, n: int
) -> TargetText:
    """index-th non-overlapping n-token slice of the given split."""
    if n < 1:
        raise InputError("n must be >= 1")
    lo, hi = manifest.interval(split)
    start = lo + index * n
    end = start + n
    if index < 0 or end > hi:
        raise InputError(
            f"slice {index} of length {n} falls outside the {split} interval [{lo}, {hi})"
        )
    ids = tuple(int(i) for i in np.asarray(corpus_ids)[start:end])
    return TargetText(ids=ids, source=split, text_id=f"{split}-{index}-n{n}")


def model_continuation(
    model: TinyLM, context: TargetText, n: int, seed: int
) -> TargetText:
    """Multinomial T=1 continuation of a context; source label 'generated'."""
    if n < 1:
        raise InputError("n must be >= 1")
    prefix = embed(model, list(context.ids))
    sampling = SamplingSpec(mode="multinomial", temperature=1.0, seed=seed)
    ids = ar_generate(model, prefix, n, sampling)
    return TargetText(
        ids=tuple(ids),
        source=GENERATED,
        text_id=f"gen-{context.text_id}-s{seed}-n{n}",
        context_id=context.text_id,
    )


# ---------------------------------------------------------------------------
# demo corpus + canonical preparation pipeline


def make_demo_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Seeded synthetic prose: Zipf-weighted invented lexicon, short sentences.

    Stands in for a user-supplied corpus in tests and demos; regular enough
    that a desk-scale model learns real structure from ~1MB of it.
    """
    if n_bytes < 1:
        raise InputError("n_bytes must be >= 1")
    rng = np.random.default_rng(seed)
    consonants = np.array(list("bcdfghjklmnprstvwz"))
    vowels = np.array(list("aeiou"))
    lexicon = []
    seen = set()
    while len(lexicon) < 1200:
        syllables = rng.integers(1, 4)
        word = ""
        for _ in range(syllables):
            word += rng.choice(consonants) + rng.choice(vowels)
            if rng.random() < 0.3:
                word += rng.choice(consonants)
        if word not in seen:
            seen.add(word)
            lexicon.append(word)
    ranks = np.arange(1, len(lexicon) + 1, dtype=np.float64)
    weights = 1.0 / ranks**1.1
    weights /= weights.sum()
    chunks: list[str] = []
    size = 0
    while size < n_bytes:
        n_words = int(rng.integers(4, 14))
        words = [lexicon[i] for i in rng.choice(len(lexicon), size=n_words, p=weights)]
        if rng.random() < 0.25 and n_words > 5:
            words[n_words // 2] += ","
        sentence = " ".join(words) + ". "
        if rng.random() < 0.08:
            sentence += "\n"
        chunks.append(sentence)
        size += len(sentence)
    return "".join(chunks).encode("ascii")[:n_bytes]


def prepare_corpus(
    corpus: bytes, vocab_size: int = 512, unseen_fraction: float = 0.1
) -> tuple[Tokenizer, np.ndarray, SplitManifest]:
    """Canonical pipeline: split bytes, learn the tokenizer on the seen part
    only, tokenize both parts, and record the token intervals."""
    if not corpus:
        raise InputError("empty corpus")
    if not 0.0 < unseen_fraction < 1.0:
        raise InputError("unseen_fraction must lie in (0, 1)")
    cut = int(len(corpus) * (1.0 - unseen_fraction))
    seen_bytes, unseen_bytes = corpus[:cut], corpus[cut:]
    tok = tokenizer_mod.build(seen_bytes, vocab_size)
    seen_ids = tok.encode_array(seen_bytes)
    unseen_ids = tok.encode_array(unseen_bytes)
    ids = np.concatenate([seen_ids, unseen_ids])
    manifest = SplitManifest(
        seen=(0, int(seen_ids.size)), unseen=(int(seen_ids.size), int(ids.size))
    )
    return tok, ids, manifest
