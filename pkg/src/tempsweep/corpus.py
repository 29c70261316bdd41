"""Vocabulary, whitespace tokenization, corpus files and splits."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
N_RESERVED = len(RESERVED)
DEFAULT_MAX_LEN = 52
SPLITS = ("train", "valid", "test", "generated")


class CorpusError(ValueError):
    pass


def _escape(token: str) -> str:
    # raw text may contain the literal reserved names; keep them distinct from the real ids
    if token in RESERVED or (token.startswith("\\") and token.lstrip("\\") in RESERVED):
        return "\\" + token
    return token


def _unescape(token: str) -> str:
    if token.startswith("\\") and token.lstrip("\\") in RESERVED:
        return token[1:]
    return token


@dataclass(frozen=True)
class Vocab:
    """Token id space. Ids 0-3 are reserved; content tokens start at 4."""

    tokens: tuple[str, ...]
    id_of: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.tokens) < 1:
            raise CorpusError("vocab needs at least one content token")
        if len(set(self.tokens)) != len(self.tokens):
            raise CorpusError("vocab tokens must be unique")
        object.__setattr__(
            self, "id_of", {t: i + N_RESERVED for i, t in enumerate(self.tokens)}
        )

    @property
    def size(self) -> int:
        return len(self.tokens) + N_RESERVED

    def __len__(self) -> int:
        return self.size

    def token(self, idx: int) -> str:
        if idx < N_RESERVED:
            return RESERVED[idx]
        return self.tokens[idx - N_RESERVED]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(lines))

    @classmethod
    def synthetic(cls, size: int) -> "Vocab":
        """Vocab of ``size`` total ids with content tokens named ``t0, t1, ...``."""
        if size < N_RESERVED + 1:
            raise CorpusError(f"vocab size must be >= {N_RESERVED + 1}, got {size}")
        return cls(tuple(f"t{i}" for i in range(size - N_RESERVED)))


def build_vocab(raw_lines: Iterable[str], max_size: int | None = None) -> Vocab:
    """Keep the ``max_size`` most frequent whitespace tokens.

    ``max_size`` counts content tokens only. Ties are broken by first
    occurrence in the input.
    """
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    for line in raw_lines:
        for tok in line.split():
            tok = _escape(tok)
            counts[tok] += 1
            first_seen.setdefault(tok, len(first_seen))
    if not counts:
        raise CorpusError("empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    if max_size is not None:
        if max_size < 1:
            raise CorpusError("max_size must be >= 1")
        ranked = ranked[:max_size]
    return Vocab(tuple(ranked))


def encode(vocab: Vocab, line: str) -> tuple[int, ...]:
    toks = line.split()
    if not toks:
        raise CorpusError("cannot encode an empty line")
    return tuple(vocab.id_of.get(_escape(t), UNK) for t in toks) + (EOS,)


def validate_sentence(sentence: Sequence[int], vocab_size: int, max_len: int | None = None) -> None:
    if len(sentence) < 2 or sentence[-1] != EOS:
        raise CorpusError("sentence must hold >= 1 content token followed by EOS")
    body = sentence[:-1]
    if max_len is not None and len(body) > max_len:
        raise CorpusError(f"sentence length {len(body)} exceeds max_len {max_len}")
    for t in body:
        if t in (PAD, BOS, EOS) or not 0 <= t < vocab_size:
            raise CorpusError(f"invalid token id {t} inside sentence")


def decode(vocab: Vocab, sentence: Sequence[int]) -> str:
    validate_sentence(sentence, vocab.size)
    return " ".join(_unescape(vocab.token(t)) for t in sentence[:-1])


@dataclass(frozen=True)
class Corpus:
    sentences: tuple[tuple[int, ...], ...]
    vocab: Vocab
    split: str = "train"
    max_len: int = DEFAULT_MAX_LEN

    def __post_init__(self) -> None:
        if not self.sentences:
            raise CorpusError("corpus must be nonempty")
        if self.split not in SPLITS:
            raise CorpusError(f"unknown split tag {self.split!r}")
        object.__setattr__(self, "sentences", tuple(tuple(int(t) for t in s) for s in self.sentences))
        for s in self.sentences:
            validate_sentence(s, self.vocab.size, self.max_len)

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def with_split(self, split: str) -> "Corpus":
        return Corpus(self.sentences, self.vocab, split, self.max_len)

    def lines(self) -> list[str]:
        return [decode(self.vocab, s) for s in self.sentences]

    def n_tokens(self) -> int:
        """Predicted tokens, EOS included."""
        return sum(len(s) for s in self.sentences)


def corpus_from_lines(
    lines: Sequence[str], vocab: Vocab, split: str = "train", max_len: int = DEFAULT_MAX_LEN
) -> Corpus:
    sentences = []
    for lineno, line in enumerate(lines, start=1):
        try:
            s = encode(vocab, line)
        except CorpusError as exc:
            raise CorpusError(f"line {lineno}: {exc}") from None
        if len(s) - 1 > max_len:
            raise CorpusError(f"line {lineno}: {len(s) - 1} tokens exceeds max_len {max_len}")
        sentences.append(s)
    return Corpus(tuple(sentences), vocab, split, max_len)


def load_corpus(
    path: str | Path, vocab: Vocab, split: str = "train", max_len: int = DEFAULT_MAX_LEN
) -> Corpus:
    text = Path(path).read_text(encoding="utf-8")
    return corpus_from_lines(text.splitlines(), vocab, split, max_len)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text("".join(line + "\n" for line in corpus.lines()), encoding="utf-8")


def split_corpus(
    corpus: Corpus, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[Corpus, Corpus, Corpus]:
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise CorpusError("need three positive fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError("fractions must sum to 1")
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) < 1:
        raise CorpusError(f"fractions {tuple(fractions)} leave an empty split for {n} sentences")
    cuts = (order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:])
    return tuple(  # type: ignore[return-value]
        Corpus(tuple(corpus.sentences[i] for i in idx), corpus.vocab, tag, corpus.max_len)
        for idx, tag in zip(cuts, ("train", "valid", "test"))
    )
