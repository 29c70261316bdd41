"""Quality and diversity metrics for generated corpora.

BLEU here is the mean of sentence-level BLEU against a whole reference set,
with clipping at the largest count of an n-gram in any single reference,
a closest-reference-length brevity penalty and zero precisions floored at
``epsilon``. Tokens are content tokens; EOS is not part of the n-grams.
"""

from __future__ import annotations

import csv
import io
import math
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import model as M
from .corpus import EOS, UNK, Corpus
from .training import TrainConfig, evaluate_nll, mle_train

EPSILON = 1e-9
REFERENCE_CAP = 5000
REPORT_HEADER = ("metric", "n", "value", "samples", "references", "epsilon", "seed")


class MetricError(ValueError):
    pass


def _content(s: Sequence[int]) -> tuple[int, ...]:
    s = tuple(s)
    return s[:-1] if s and s[-1] == EOS else s


def _ngrams(tokens: Sequence[int], m: int) -> Counter:
    return Counter(tuple(tokens[i:i + m]) for i in range(len(tokens) - m + 1))


@dataclass
class NGramIndex:
    """n-gram statistics of a reference set for orders 1..n_max.

    ``counts`` holds multiset totals; ``top`` holds, per n-gram, the largest
    single-reference count, the reference that holds it, and the runner-up
    count (used for leave-one-out clipping).
    """

    n_max: int
    counts: list[Counter]
    top: list[dict]
    length_counts: Counter
    size: int

    @classmethod
    def build(cls, references: Iterable[Sequence[int]], n_max: int) -> "NGramIndex":
        counts = [Counter() for _ in range(n_max)]
        top: list[dict] = [{} for _ in range(n_max)]
        lengths: Counter = Counter()
        size = 0
        for j, ref in enumerate(references):
            toks = _content(ref)
            lengths[len(toks)] += 1
            size += 1
            for m in range(1, n_max + 1):
                table = top[m - 1]
                for g, c in _ngrams(toks, m).items():
                    counts[m - 1][g] += c
                    best = table.get(g)
                    if best is None:
                        table[g] = (c, j, 0)
                    elif c > best[0]:
                        table[g] = (c, j, best[0])
                    elif c > best[2]:
                        table[g] = (best[0], best[1], c)
        if size == 0:
            raise MetricError("reference set is empty")
        return cls(n_max, counts, top, lengths, size)

    def clip_limit(self, gram: tuple, exclude: int | None = None) -> int:
        entry = self.top[len(gram) - 1].get(gram)
        if entry is None:
            return 0
        return entry[2] if exclude is not None and entry[1] == exclude else entry[0]

    def closest_length(self, hyp_len: int, exclude_len: int | None = None) -> int:
        lens = sorted(length for length, cnt in self.length_counts.items()
                      if cnt > (1 if length == exclude_len else 0))
        if not lens:
            raise MetricError("no reference lengths left")
        i = bisect_left(lens, hyp_len)
        cands = lens[max(i - 1, 0):i + 1]
        return min(cands, key=lambda r: (abs(r - hyp_len), r))


def sentence_bleu(hyp: Sequence[int], index: NGramIndex, n: int, epsilon: float = EPSILON,
                  exclude: int | None = None) -> float:
    """BLEU-n of one hypothesis; ``exclude`` drops one reference (leave-one-out)."""
    toks = _content(hyp)
    c = len(toks)
    if c == 0:
        raise MetricError("empty hypothesis")
    log_sum = 0.0
    for m in range(1, n + 1):
        total = c - m + 1
        if total <= 0:
            p = epsilon
        else:
            clipped = sum(min(cnt, index.clip_limit(g, exclude)) for g, cnt in _ngrams(toks, m).items())
            p = clipped / total if clipped > 0 else epsilon
        log_sum += math.log(p)
    # under leave-one-out the excluded reference is the hypothesis itself
    r = index.closest_length(c, c if exclude is not None else None)
    bp = math.exp(min(0.0, 1.0 - r / c))
    return bp * math.exp(log_sum / n)


def _cap_references(refs: Sequence, cap: int | None, seed: int) -> list:
    if cap is None or len(refs) <= cap:
        return list(refs)
    idx = np.sort(np.random.default_rng(seed).choice(len(refs), size=cap, replace=False))
    return [refs[i] for i in idx]


def _sentences(x) -> list:
    return list(x.sentences) if isinstance(x, Corpus) else list(x)


def bleu_n(hypotheses, references, n: int = 5, epsilon: float = EPSILON,
           reference_cap: int | None = REFERENCE_CAP, seed: int = 0) -> float:
    """Mean sentence BLEU-n of ``hypotheses`` against the full reference set."""
    hyps = _sentences(hypotheses)
    refs = _cap_references(_sentences(references), reference_cap, seed)
    if not hyps or not refs:
        raise MetricError("bleu_n needs nonempty corpora")
    index = NGramIndex.build(refs, n)
    return math.fsum(sentence_bleu(h, index, n, epsilon) for h in hyps) / len(hyps)


def self_bleu_n(corpus, n: int = 5, epsilon: float = EPSILON) -> float:
    """Mean over sentences of BLEU-n against the rest of the corpus."""
    sents = _sentences(corpus)
    if len(sents) < 2:
        raise MetricError("self-BLEU needs at least 2 sentences")
    index = NGramIndex.build(sents, n)
    return math.fsum(sentence_bleu(s, index, n, epsilon, exclude=i) for i, s in enumerate(sents)) / len(sents)


# ---------------------------------------------------------------------------
# likelihood-based metrics


def nll_under_model(scoring: M.RecurrentParams, corpus: Corpus, alpha: float = 1.0) -> float:
    """Mean per-token NLL of ``corpus`` under ``scoring`` (NLL_oracle / NLL_test)."""
    if isinstance(corpus, Corpus) and corpus.vocab.size != scoring.vocab_size:
        raise MetricError(f"vocab mismatch: model {scoring.vocab_size} vs corpus {corpus.vocab.size}")
    return evaluate_nll(scoring, corpus, alpha)


def nll_with_se(scoring: M.RecurrentParams, sentences: Sequence[Sequence[int]], alpha: float = 1.0):
    """Mean per-sentence NLL and its standard error."""
    v = M.sentence_nlls(scoring, list(sentences), alpha)
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


@dataclass(frozen=True)
class LmScoreConfig:
    """Fixed scorer used by LM and reverse-LM scores."""

    hidden_dim: int = 32
    init_scale: float = 0.1
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=10, early_stop_patience=2))
    valid_fraction: float = 0.1


def fit_scoring_lm(train: Corpus, valid: Corpus, cfg: LmScoreConfig) -> M.RecurrentParams:
    init = M.init_params(train.vocab.size, cfg.hidden_dim, seed=cfg.train.seed, scale=cfg.init_scale)
    lm, _ = mle_train(init, train, valid, cfg.train)
    return lm


def lm_score(real_train: Corpus, real_valid: Corpus, generated: Corpus, cfg: LmScoreConfig | None = None,
             scorer: M.RecurrentParams | None = None) -> float:
    """NLL of ``generated`` under an LM fit on real data (lower = higher quality)."""
    cfg = cfg or LmScoreConfig()
    scorer = scorer or fit_scoring_lm(real_train, real_valid, cfg)
    return evaluate_nll(scorer, generated)


def split_generated(generated: Corpus, cfg: LmScoreConfig, batch_size: int | None = None):
    bs = batch_size or cfg.train.batch_size
    if len(generated) < 2 * bs:
        raise MetricError(f"generated corpus of {len(generated)} too small to split (need >= {2 * bs})")
    n_valid = max(1, int(round(cfg.valid_fraction * len(generated))))
    sents = generated.sentences
    return (Corpus(sents[:-n_valid], generated.vocab, "train", generated.max_len),
            Corpus(sents[-n_valid:], generated.vocab, "valid", generated.max_len))


def reverse_lm_score(generated_train: Corpus, generated_valid: Corpus, real_test: Corpus,
                     cfg: LmScoreConfig | None = None) -> float:
    """NLL of real test data under an LM fit on generated data (lower = better coverage)."""
    cfg = cfg or LmScoreConfig()
    lm = fit_scoring_lm(generated_train, generated_valid, cfg)
    return evaluate_nll(lm, real_test)


def unigram_nll(train: Corpus, test: Corpus) -> float:
    """Per-token NLL of test content tokens under add-one unigram counts of train.

    The support is the vocabulary's content tokens, plus UNK when either
    corpus contains it. EOS is not scored.
    """
    counts = Counter(t for s in train.sentences for t in s[:-1])
    test_tokens = [t for s in test.sentences for t in s[:-1]]
    support = len(train.vocab.tokens) + (1 if counts[UNK] or UNK in test_tokens else 0)
    total = sum(counts.values())
    denom = total + support
    return -math.fsum(math.log((counts[t] + 1) / denom) for t in test_tokens) / len(test_tokens)


def sample_entropy_rate(params: M.RecurrentParams, sentences: Sequence[Sequence[int]]):
    """Monte-Carlo per-token entropy estimate: mean own-sample NLL and its standard error."""
    return nll_with_se(params, sentences, 1.0)


# ---------------------------------------------------------------------------
# reporting


@dataclass
class MetricReport:
    metric: str
    value: float
    sample_count: int
    reference_count: int
    n: int | None = None
    epsilon: float | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.value):
            raise MetricError(f"{self.metric}: non-finite value")
        if self.metric in ("bleu", "self_bleu") and not 0.0 <= self.value <= 1.0:
            raise MetricError(f"{self.metric}: value {self.value} outside [0, 1]")

    def row(self) -> list:
        return [self.metric, "" if self.n is None else self.n, repr(self.value), self.sample_count,
                self.reference_count, "" if self.epsilon is None else repr(self.epsilon),
                "" if self.seed is None else self.seed]


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()
