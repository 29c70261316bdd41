"""Sample generation: ancestral/greedy, stochastic beam, and two rejection samplers.

Every sentence (or rejection candidate) with global index ``i`` draws its
randomness from ``default_rng([seed, i])``, so a batch is reproducible and
its prefix does not depend on the requested batch size. Work is vectorised
over chunks of sentences.

Rejection thresholds are on the per-token (length-normalised) natural-log
likelihood under the generator at temperature 1.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import BOS, EOS, PAD, UNK, Corpus, Vocab
from .model import (
    DiscriminatorParams,
    RecurrentParams,
    conditional_dist,
    discriminate_batch,
    initial_state,
    log_softmax,
    step_batch,
)

STRATEGIES = ("ancestral", "greedy", "stochastic_beam", "local_beam", "gen_rejection", "disc_rejection")
CHUNK = 2048


class DecodingError(ValueError):
    pass


class RejectionExhausted(RuntimeError):
    """A rejection sampler hit ``max_attempts`` for one sentence."""

    def __init__(self, message: str, acceptance_rate: float, attempts: int):
        super().__init__(f"{message} (observed acceptance rate {acceptance_rate:.4g} over {attempts} attempts)")
        self.acceptance_rate = acceptance_rate
        self.attempts = attempts


@dataclass(frozen=True)
class DecoderConfig:
    strategy: str = "ancestral"
    alpha: float = 1.0
    beam_size: int = 1
    threshold: float = -1e9          # gen_rejection, nats per token
    disc_threshold: float = 0.5      # disc_rejection, in (0, 1)
    max_attempts: int = 10_000
    max_len: int = 52
    fixed_len: int | None = None     # emit exactly this many content tokens, then EOS
    allow_unk: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise DecodingError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.alpha < 0:
            raise DecodingError("alpha must be >= 0")
        if self.beam_size < 1:
            raise DecodingError("beam_size must be >= 1")
        if self.max_attempts < 1:
            raise DecodingError("max_attempts must be >= 1")
        if not math.isfinite(self.threshold):
            raise DecodingError("threshold must be finite")
        if not 0 < self.disc_threshold < 1:
            raise DecodingError("disc_threshold must lie in (0, 1)")
        if self.max_len < 1:
            raise DecodingError("max_len must be >= 1")
        if self.fixed_len is not None and not 1 <= self.fixed_len <= self.max_len:
            raise DecodingError("fixed_len must lie in [1, max_len]")

    @property
    def length_cap(self) -> int:
        return self.fixed_len if self.fixed_len is not None else self.max_len

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleBatch:
    sentences: list[tuple[int, ...]]
    loglik: np.ndarray            # per-token log-likelihood at alpha=1, one per sentence
    attempts_used: int
    elapsed_seconds: float
    meta: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return len(self.sentences) / self.attempts_used

    def to_corpus(self, vocab: Vocab, max_len: int | None = None) -> Corpus:
        cap = max_len if max_len is not None else max(52, max(len(s) - 1 for s in self.sentences))
        return Corpus(tuple(self.sentences), vocab, "generated", cap)


# ---------------------------------------------------------------------------
# shared helpers


def _banned_ids(allow_unk: bool) -> list[int]:
    return [PAD, BOS] if allow_unk else [PAD, BOS, UNK]


def _step_mask(logits: np.ndarray, t: int, cfg: DecoderConfig) -> tuple[np.ndarray, bool]:
    """Apply support constraints for content position ``t``; returns (logits, force_eos)."""
    if t >= cfg.length_cap:
        return logits, True
    masked = logits.copy()
    masked[..., _banned_ids(cfg.allow_unk)] = -np.inf
    if cfg.fixed_len is not None or t == 0:  # sentences carry at least one content token
        masked[..., EOS] = -np.inf
    return masked, False


def _streams(seed: int, indices: Sequence[int]):
    return [np.random.default_rng([seed, int(i)]) for i in indices]


def _to_sentences(tokens: np.ndarray, lengths: np.ndarray) -> list[tuple[int, ...]]:
    return [tuple(int(t) for t in row[:n]) for row, n in zip(tokens, lengths)]


# ---------------------------------------------------------------------------
# ancestral / greedy


def _ancestral_chunk(params: RecurrentParams, cfg: DecoderConfig, alpha: float, indices: Sequence[int]):
    """Sample one sentence per global index; returns sentences and per-token loglik."""
    B = len(indices)
    cap = cfg.length_cap
    if alpha > 0:
        uniforms = np.stack([1.0 - g.random(cap + 1) for g in _streams(cfg.seed, indices)])
    h, c = initial_state(params, B)
    tokens = np.full((B, cap + 1), PAD, dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    total_lp = np.zeros(B)
    alive = np.ones(B, dtype=bool)
    cur = np.full(B, BOS, dtype=np.int64)
    for t in range(cap + 1):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        hh, cc, logits = step_batch(params, h[:, rows], c[:, rows], cur[rows], t)
        h[:, rows], c[:, rows] = hh, cc
        masked, force_eos = _step_mask(logits, t, cfg)
        if force_eos:
            nxt = np.full(rows.size, EOS, dtype=np.int64)
        elif alpha == 0:
            nxt = np.argmax(masked, axis=-1)
        else:
            cdf = np.cumsum(conditional_dist(masked, alpha), axis=-1)
            u = uniforms[rows, t] * cdf[:, -1]
            nxt = np.minimum((cdf < u[:, None]).sum(axis=-1), logits.shape[-1] - 1)
        lp1 = log_softmax(logits)
        total_lp[rows] += lp1[np.arange(rows.size), nxt]
        tokens[rows, t] = nxt
        lengths[rows] += 1
        cur[rows] = nxt
        alive[rows[nxt == EOS]] = False
    return _to_sentences(tokens, lengths), total_lp / lengths


def ancestral(params: RecurrentParams, cfg: DecoderConfig, n: int, start: int = 0):
    sents: list[tuple[int, ...]] = []
    lls = []
    for lo in range(start, start + n, CHUNK):
        s, ll = _ancestral_chunk(params, cfg, cfg.alpha, range(lo, min(lo + CHUNK, start + n)))
        sents.extend(s)
        lls.append(ll)
    return sents, np.concatenate(lls)


# ---------------------------------------------------------------------------
# beam search


def _beam_chunk(params: RecurrentParams, cfg: DecoderConfig, indices: Sequence[int], stochastic: bool):
    B = len(indices)
    k = cfg.beam_size
    cap = cfg.length_cap
    V = params.vocab_size
    draws = None
    pick_u = np.zeros(B)
    if stochastic:
        gens = _streams(cfg.seed, indices)
        draws = np.empty((B, cap + 1, k, V))
        for r, g in enumerate(gens):
            draws[r] = g.random((cap + 1, k, V))
            pick_u[r] = g.random()
    h, c = initial_state(params, B * k)
    tokens = np.full((B, k, cap + 1), PAD, dtype=np.int64)
    lengths = np.zeros((B, k), dtype=np.int64)
    score = np.full((B, k), -np.inf)
    score[:, 0] = 0.0
    done = np.zeros((B, k), dtype=bool)
    cur = np.full((B, k), BOS, dtype=np.int64)
    for t in range(cap + 1):
        active = np.isfinite(score) & ~done
        if not active.any():
            break
        hh, cc, logits = step_batch(params, h, c, cur.reshape(-1), t)
        logits = logits.reshape(B, k, V)
        masked, force_eos = _step_mask(logits, t, cfg)
        lp1 = log_softmax(logits)
        if force_eos:
            child = np.full((B, k, k), -1, dtype=np.int64)
            child[:, :, 0] = EOS
        else:
            if stochastic:
                with np.errstate(divide="ignore"):
                    logp_a = np.log(conditional_dist(masked, cfg.alpha))
                keys = logp_a - np.log(-np.log(draws[:, t]))
            else:
                keys = log_softmax(masked, cfg.alpha if cfg.alpha > 0 else 1.0)
            # top-k keys in descending order = sampling order without replacement
            order = np.argsort(-keys, axis=-1, kind="stable")[..., :k]
            child = np.where(np.isfinite(np.take_along_axis(keys, order, axis=-1)), order, -1)
            if child.shape[-1] < k:  # beam wider than the vocabulary
                pad = np.full(child.shape[:-1] + (k - child.shape[-1],), -1, dtype=np.int64)
                child = np.concatenate([child, pad], axis=-1)
        valid_child = child >= 0
        child_lp = np.take_along_axis(lp1, np.maximum(child, 0), axis=-1)
        cand = np.where(valid_child, score[..., None] + child_lp, -np.inf)
        cand = np.where(active[..., None], cand, -np.inf)
        # finished hypotheses compete as themselves in their first child slot
        keep_self = done & np.isfinite(score)
        cand[..., 0] = np.where(keep_self, score, cand[..., 0])
        flat = cand.reshape(B, k * k)
        top = np.argsort(-flat, axis=-1, kind="stable")[:, :k]
        parent = top // k
        slot = top % k
        new_score = np.take_along_axis(flat, top, axis=-1)
        rows = np.arange(B)[:, None]
        from_done = done[rows, parent]
        tok = child[rows, parent, slot]
        tokens = tokens[rows, parent]
        lengths = lengths[rows, parent].copy()
        grow = ~from_done & np.isfinite(new_score)
        tokens[grow, t] = tok[grow]
        lengths[grow] += 1
        done = from_done | (grow & (tok == EOS))
        score = new_score
        flat_parent = (np.arange(B)[:, None] * k + parent).reshape(-1)
        h = hh[:, flat_parent]
        c = cc[:, flat_parent]
        cur = np.where(grow, tok, EOS)
    choice = np.zeros(B, dtype=np.int64)
    for r in range(B):
        alive = np.flatnonzero(np.isfinite(score[r]) & done[r])
        if stochastic:
            choice[r] = alive[min(int(pick_u[r] * alive.size), alive.size - 1)]
        else:
            choice[r] = alive[np.argmax(score[r, alive])]
    sel_tokens = tokens[np.arange(B), choice]
    sel_len = lengths[np.arange(B), choice]
    sents = _to_sentences(sel_tokens, sel_len)
    return sents, score[np.arange(B), choice] / sel_len


def beam(params: RecurrentParams, cfg: DecoderConfig, n: int, stochastic: bool = True):
    sents: list[tuple[int, ...]] = []
    lls = []
    chunk = max(1, CHUNK // (4 * cfg.beam_size))
    for lo in range(0, n, chunk):
        s, ll = _beam_chunk(params, cfg, range(lo, min(lo + chunk, n)), stochastic)
        sents.extend(s)
        lls.append(ll)
    return sents, np.concatenate(lls)


def stochastic_beam(params: RecurrentParams, k: int, alpha: float, max_len: int, seed: int,
                    fixed_len: int | None = None, index: int = 0) -> tuple[int, ...]:
    """One sentence from stochastic beam search with beam size ``k``."""
    cfg = DecoderConfig("stochastic_beam", alpha=alpha, beam_size=k, max_len=max_len,
                        fixed_len=fixed_len, seed=seed)
    sents, _ = _beam_chunk(params, cfg, [index], stochastic=True)
    return sents[0]


# ---------------------------------------------------------------------------
# rejection sampling


def _rejection(
    params: RecurrentParams,
    cfg: DecoderConfig,
    n: int,
    accept: Callable[[list[tuple[int, ...]], np.ndarray], np.ndarray],
    label: str,
):
    """Draw ancestral candidates 0, 1, 2, ... and keep those ``accept`` approves."""
    kept: list[tuple[int, ...]] = []
    kept_ll: list[float] = []
    next_idx = 0
    since_last = 0
    rate_est = 1.0
    while len(kept) < n:
        need = n - len(kept)
        block = int(min(CHUNK, max(64, math.ceil(1.1 * need / max(rate_est, 1e-3)))))
        sents, ll = _ancestral_chunk(params, cfg, cfg.alpha, range(next_idx, next_idx + block))
        ok = accept(sents, ll)
        for j in range(block):
            since_last += 1
            if ok[j]:
                kept.append(sents[j])
                kept_ll.append(float(ll[j]))
                since_last = 0
                if len(kept) == n:
                    next_idx += j + 1
                    break
            elif since_last >= cfg.max_attempts:
                used = next_idx + j + 1
                raise RejectionExhausted(
                    f"{label}: no sample accepted in {cfg.max_attempts} attempts", len(kept) / used, used)
        else:
            next_idx += block
        rate_est = max(len(kept), 1) / next_idx
    return kept, np.array(kept_ll), next_idx


def gen_rejection(params: RecurrentParams, threshold: float, alpha: float, max_attempts: int,
                  seed: int, max_len: int = 52, fixed_len: int | None = None,
                  index: int = 0) -> tuple[tuple[int, ...], int]:
    """First candidate with per-token alpha=1 log-likelihood >= threshold, plus attempts used."""
    cfg = DecoderConfig("gen_rejection", alpha=alpha, threshold=threshold, max_attempts=max_attempts,
                        max_len=max_len, fixed_len=fixed_len, seed=seed)
    sents, _, used = _rejection(params, cfg, 1, lambda s, ll: ll >= threshold, "gen_rejection")
    return sents[0], used


def disc_rejection(params: RecurrentParams, disc: DiscriminatorParams, threshold: float,
                   max_attempts: int, seed: int, alpha: float = 1.0, max_len: int = 52,
                   fixed_len: int | None = None) -> tuple[tuple[int, ...], int]:
    cfg = DecoderConfig("disc_rejection", alpha=alpha, disc_threshold=threshold,
                        max_attempts=max_attempts, max_len=max_len, fixed_len=fixed_len, seed=seed)
    sents, _, used = _rejection(params, cfg, 1,
                                lambda s, ll: discriminate_batch(disc, s) >= threshold, "disc_rejection")
    return sents[0], used


# ---------------------------------------------------------------------------
# entry point


def sample(params: RecurrentParams, cfg: DecoderConfig, n: int,
           disc: DiscriminatorParams | None = None) -> SampleBatch:
    """Draw ``n`` sentences with the strategy named in ``cfg``."""
    if n < 1:
        raise DecodingError("n must be >= 1")
    if params.vocab_size <= len(_banned_ids(cfg.allow_unk)) + 1:
        raise DecodingError("vocabulary has no content tokens to emit")
    t0 = time.perf_counter()
    attempts = n
    if cfg.strategy == "ancestral":
        sents, ll = ancestral(params, cfg, n)
    elif cfg.strategy == "greedy":
        sents, ll = ancestral(params, DecoderConfig(**{**cfg.to_dict(), "alpha": 0.0}), n)
    elif cfg.strategy in ("stochastic_beam", "local_beam"):
        sents, ll = beam(params, cfg, n, stochastic=cfg.strategy == "stochastic_beam")
    elif cfg.strategy == "gen_rejection":
        sents, ll, attempts = _rejection(params, cfg, n, lambda s, l: l >= cfg.threshold, "gen_rejection")
    else:
        if disc is None:
            raise DecodingError("disc_rejection needs a discriminator")
        sents, ll, attempts = _rejection(
            params, cfg, n, lambda s, l: discriminate_batch(disc, s) >= cfg.disc_threshold, "disc_rejection")
    elapsed = time.perf_counter() - t0
    return SampleBatch(sents, ll, attempts, elapsed, {"strategy": cfg.strategy, "seed": cfg.seed})
