"""MLE and adversarial (REINFORCE) training, discriminator fitting, gradient checks."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .corpus import BOS, EOS, PAD, Corpus
from .decoding import DecoderConfig, _ancestral_chunk, _step_mask
from .model import DiscriminatorParams, RecurrentParams

log = logging.getLogger(__name__)

TRACE_HEADER = ("step", "phase", "train_nll", "valid_nll", "seconds")
TRAIN_PROBE = 1000


class TrainingDivergence(ArithmeticError):
    pass


class TrainingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configs and trace


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    max_epochs: int = 30
    grad_clip_norm: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 3
    train_temperature: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise TrainingError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not self.train_temperature > 0:
            raise TrainingError("train_temperature must be > 0")
        if self.max_epochs < 0 or self.early_stop_patience < 1:
            raise TrainingError("max_epochs must be >= 0 and early_stop_patience >= 1")


@dataclass(frozen=True)
class AdvConfig:
    rollout_count: int = 4
    pretrain_epochs: int = 0
    disc_steps_per_gen_step: int = 1
    disc_pretrain_steps: int = 50
    gen_learning_rate: float = 0.01
    disc_learning_rate: float = 0.01
    baseline_learning_rate: float = 0.01
    entropy_bonus_weight: float = 0.0
    mle_interleave_ratio: float = 0.0
    adv_steps: int = 200
    batch_size: int = 64
    eval_every: int = 10
    step_level_reward: bool = True
    disc_hidden_dim: int = 32
    collapse_window: int = 20
    grad_clip_norm: float = 5.0
    max_len: int = 52
    fixed_len: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rollout_count < 1:
            raise TrainingError("rollout_count must be >= 1")
        rates = (self.gen_learning_rate, self.disc_learning_rate, self.baseline_learning_rate,
                 self.entropy_bonus_weight)
        if min(rates) < 0:
            raise TrainingError("rates and weights must be >= 0")
        if not 0 <= self.mle_interleave_ratio <= 1:
            raise TrainingError("mle_interleave_ratio must lie in [0, 1]")
        if self.adv_steps < 0 or self.pretrain_epochs < 0 or self.eval_every < 1:
            raise TrainingError("adv_steps, pretrain_epochs must be >= 0 and eval_every >= 1")

    def decoder(self, seed: int) -> DecoderConfig:
        return DecoderConfig("ancestral", 1.0, max_len=self.max_len, fixed_len=self.fixed_len, seed=seed)


@dataclass(frozen=True)
class DiscTrainConfig:
    hidden_dim: int = 32
    learning_rate: float = 0.01
    batch_size: int = 64
    steps: int = 300
    sample_alpha: float = 1.0
    max_len: int = 52
    fixed_len: int | None = None
    seed: int = 0


@dataclass
class TraceRow:
    step: int
    phase: str
    train_nll: float
    valid_nll: float
    seconds: float


@dataclass
class TrainTrace:
    rows: list[TraceRow] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def add(self, step, phase, train_nll, valid_nll, seconds) -> None:
        if self.rows and step < self.rows[-1].step:
            raise TrainingError("trace steps must be monotone")
        for v in (train_nll, valid_nll):
            if not math.isfinite(v):
                raise TrainingDivergence(f"non-finite NLL recorded at step {step}")
        self.rows.append(TraceRow(int(step), phase, float(train_nll), float(valid_nll), float(seconds)))

    def extend(self, other: "TrainTrace", step_offset: int = 0) -> None:
        for r in other.rows:
            self.add(r.step + step_offset, r.phase, r.train_nll, r.valid_nll, r.seconds)
        self.warnings.extend(other.warnings)

    def valid_nlls(self, phase: str | None = None) -> list[float]:
        return [r.valid_nll for r in self.rows if phase is None or r.phase == phase]

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in self.rows:
            w.writerow([r.step, r.phase, repr(r.train_nll), repr(r.valid_nll),
                        repr(r.seconds if timing else 0.0)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    def __init__(self, params: RecurrentParams | dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        blocks = params.blocks if isinstance(params, RecurrentParams) else params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in blocks.items()}
        self.v = {k: np.zeros_like(v) for k, v in blocks.items()}
        self.t = 0

    def step(self, blocks: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            blocks[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# MLE


def evaluate_nll(params: RecurrentParams, corpus: Corpus | Sequence[Sequence[int]], alpha: float = 1.0) -> float:
    """Mean over sentences of per-token NLL (nats), teacher forced."""
    sents = corpus.sentences if isinstance(corpus, Corpus) else corpus
    if params.vocab_size < (corpus.vocab.size if isinstance(corpus, Corpus) else 0):
        raise TrainingError("corpus vocabulary larger than model")
    return float(np.mean(M.sentence_nlls(params, sents, alpha)))


def teacher_forced_loss(params: RecurrentParams, corpus: Corpus, alpha: float) -> float:
    """Same averaging as :func:`evaluate_nll` but with logits divided by ``alpha``."""
    return evaluate_nll(params, corpus, alpha)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def mle_train(
    params: RecurrentParams, train: Corpus, valid: Corpus, cfg: TrainConfig,
    clock: Callable[[], float] = time.perf_counter,
) -> tuple[RecurrentParams, TrainTrace]:
    """Adam on mean per-token NLL of logits / train_temperature, early-stopped on valid NLL.

    Returns a copy holding the best-validation parameters.
    """
    if len(train) == 0 or len(valid) == 0:
        raise TrainingError("empty corpus")
    if train.vocab.size > params.vocab_size:
        raise TrainingError("train vocabulary larger than model")
    params = params.copy()
    opt = Adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    trace = TrainTrace()
    t0 = clock()
    probe = train.sentences[:TRAIN_PROBE]
    best = evaluate_nll(params, valid)
    best_params = params.copy()
    trace.add(0, "mle", evaluate_nll(params, probe), best, clock() - t0)
    step = 0
    bad_epochs = 0
    for epoch in range(cfg.max_epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        for idx in _batches(len(train), cfg.batch_size, rng):
            step += 1
            try:
                loss, grads = M.nll_loss_and_grads(params, [train.sentences[i] for i in idx],
                                                   cfg.train_temperature)
            except M.NumericalOverflow as exc:
                raise TrainingDivergence(f"non-finite loss at step {step}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at step {step}")
            clip_grads(grads, cfg.grad_clip_norm)
            opt.step(params.blocks, grads)
        if not params.is_finite():
            raise TrainingDivergence(f"non-finite parameters after step {step}")
        val = evaluate_nll(params, valid)
        trace.add(step, "mle", evaluate_nll(params, probe), val, clock() - t0)
        log.debug("epoch %d step %d valid %.4f", epoch, step, val)
        if val < best:
            best, best_params, bad_epochs = val, params.copy(), 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.early_stop_patience:
                break
    best_params.lineage = {**params.lineage, "trained_by": "mle", "train_seed": cfg.seed,
                           "train_temperature": cfg.train_temperature}
    return best_params, trace


# ---------------------------------------------------------------------------
# rollouts and rewards


def complete_prefixes(params: RecurrentParams, prefixes: Sequence[Sequence[int]], dec: DecoderConfig,
                      uniforms: np.ndarray) -> list[tuple[int, ...]]:
    """Finish each prefix by ancestral sampling at ``dec.alpha``.

    ``uniforms`` has shape (len(prefixes), length_cap + 1), values in (0, 1].
    """
    B = len(prefixes)
    cap = dec.length_cap
    plen = np.array([len(p) for p in prefixes])
    forced = np.full((B, cap + 1), PAD, dtype=np.int64)
    for r, p in enumerate(prefixes):
        forced[r, :len(p)] = p
    h, c = M.initial_state(params, B)
    tokens = np.full((B, cap + 1), PAD, dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    cur = np.full(B, BOS, dtype=np.int64)
    for t in range(cap + 1):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        hh, cc, logits = M.step_batch(params, h[:, rows], c[:, rows], cur[rows], t)
        h[:, rows], c[:, rows] = hh, cc
        masked, force_eos = _step_mask(logits, t, dec)
        if force_eos:
            nxt = np.full(rows.size, EOS, dtype=np.int64)
        else:
            cdf = np.cumsum(M.conditional_dist(masked, dec.alpha), axis=-1)
            u = uniforms[rows, t] * cdf[:, -1]
            nxt = np.minimum((cdf < u[:, None]).sum(axis=-1), params.vocab_size - 1)
        in_prefix = t < plen[rows]
        nxt = np.where(in_prefix, forced[rows, t], nxt)
        tokens[rows, t] = nxt
        lengths[rows] += 1
        cur[rows] = nxt
        alive[rows[nxt == EOS]] = False
    return [tuple(int(x) for x in row[:n]) for row, n in zip(tokens, lengths)]


def rollout_rewards(
    gen: RecurrentParams, disc: DiscriminatorParams, sentences: Sequence[Sequence[int]],
    k_mc: int, rng: np.random.Generator, dec: DecoderConfig, step_level: bool = True,
) -> np.ndarray:
    """Per-token rewards (B, T_max), zero-padded.

    Position t scores prefix x_1..x_{t+1}: the mean discriminator score of
    ``k_mc`` completions; the final position (EOS) scores the sentence itself.
    """
    B = len(sentences)
    T = max(len(s) for s in sentences)
    full = M.discriminate_batch(disc, sentences)
    Q = np.zeros((B, T))
    for i, s in enumerate(sentences):
        Q[i, len(s) - 1] = full[i]
    if not step_level:
        for i, s in enumerate(sentences):
            Q[i, :len(s)] = full[i]
        return Q
    owners = []
    prefixes = []
    for i, s in enumerate(sentences):
        for t in range(len(s) - 1):
            for _ in range(k_mc):
                owners.append((i, t))
                prefixes.append(s[:t + 1])
    if prefixes:
        uniforms = 1.0 - rng.random((len(prefixes), dec.length_cap + 1))
        done = complete_prefixes(gen, prefixes, dec, uniforms)
        scores = M.discriminate_batch(disc, done)
        for (i, t), sc in zip(owners, scores):
            Q[i, t] += sc / k_mc
    return Q


@dataclass
class Baseline:
    """Linear map from the generator's hidden state to a scalar reward estimate."""

    w: np.ndarray
    b: np.ndarray
    opt: Adam | None = None

    @classmethod
    def zeros(cls, hidden_dim: int, lr: float) -> "Baseline":
        bl = cls(np.zeros(hidden_dim), np.zeros(1))
        bl.opt = Adam({"w": bl.w, "b": bl.b}, lr) if lr > 0 else None
        return bl

    def predict(self, states: np.ndarray) -> np.ndarray:
        return states @ self.w + self.b[0]

    def fit_step(self, states: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
        """One Adam step on masked mean squared error; returns the loss before the step."""
        err = (self.predict(states) - targets) * mask
        n = max(mask.sum(), 1.0)
        loss = float((err ** 2).sum() / n)
        if self.opt is not None:
            g = 2.0 * err / n
            self.opt.step({"w": self.w, "b": self.b},
                          {"w": np.tensordot(g, states, axes=g.ndim), "b": np.array([g.sum()])})
        return loss


def policy_gradient(gen: RecurrentParams, sentences: Sequence[Sequence[int]], advantages: np.ndarray,
                    entropy_weight: float = 0.0):
    """Gradient of -mean_t[A_t log p(x_t)] - entropy_weight * mean_t H_t (per token)."""
    inputs, targets, mask = M.pad_batch(sentences)
    logits, cache = M.lm_logits(gen, inputs)
    logp = M.log_softmax(logits)
    p = np.exp(logp)
    n_tok = mask.sum()
    d = p.copy()
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1)
    d *= (advantages * mask / n_tok)[..., None]
    H = -(p * logp).sum(axis=-1)
    if entropy_weight > 0:
        d += entropy_weight * (p * (logp + H[..., None])) * (mask / n_tok)[..., None]
    grads = M.lm_backward(gen, inputs, cache, d)
    h_states = cache[0]
    return grads, h_states, mask, float((H * mask).sum() / n_tok)


def mean_conditional_entropy(params: RecurrentParams, sentences: Sequence[Sequence[int]]) -> float:
    """Token-averaged entropy (nats) of the model's conditionals along ``sentences``."""
    inputs, _, mask = M.pad_batch(sentences)
    logits, _ = M.lm_logits(params, inputs)
    H = M.entropy(M.conditional_dist(logits, 1.0))
    return float((H * mask).sum() / mask.sum())


# ---------------------------------------------------------------------------
# adversarial training


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _disc_update(disc, opt, real, fake, clip):
    sents = list(real) + list(fake)
    labels = np.concatenate([np.ones(len(real)), np.zeros(len(fake))])
    loss, grads = M.disc_loss_and_grads(disc, sents, labels)
    clip_grads(grads, clip)
    opt.step(disc.blocks, grads)
    probs = M.discriminate_batch(disc, sents)
    acc = float(np.mean((probs >= 0.5) == (labels == 1)))
    return loss, acc


def adversarial_train(
    gen: RecurrentParams, disc: DiscriminatorParams | None, train: Corpus, valid: Corpus,
    cfg: AdvConfig, mle_cfg: TrainConfig | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> tuple[RecurrentParams, DiscriminatorParams, TrainTrace]:
    """SeqGAN-style training: discriminator BCE, generator REINFORCE with rollouts.

    ``pretrain_epochs`` epochs of MLE (``mle_cfg`` with that epoch budget) run
    first. The trace holds MLE rows followed by adversarial rows; its
    ``warnings`` list records reward collapse.
    """
    mle_cfg = mle_cfg or TrainConfig(seed=cfg.seed)
    trace = TrainTrace()
    gen = gen.copy()
    offset = 0
    if cfg.pretrain_epochs > 0:
        gen, pre = mle_train(gen, train, valid, TrainConfig(**{**asdict(mle_cfg), "max_epochs": cfg.pretrain_epochs}))
        trace.extend(pre)
        offset = trace.rows[-1].step
    if disc is None:
        disc = M.init_discriminator(gen.vocab_size, cfg.disc_hidden_dim, seed=_derived_seed(cfg.seed, 17))
    disc = disc.copy()
    t0 = clock()
    probe = train.sentences[:TRAIN_PROBE]
    if cfg.adv_steps == 0:
        return gen, disc, trace
    # phase-transition marker: the starting point of adversarial updates
    base_seconds = trace.rows[-1].seconds if trace.rows else 0.0
    trace.add(offset, "switch", evaluate_nll(gen, probe), evaluate_nll(gen, valid), base_seconds)

    g_opt = Adam(gen, cfg.gen_learning_rate)
    d_opt = Adam(disc, cfg.disc_learning_rate)
    baseline = Baseline.zeros(gen.hidden_dim, cfg.baseline_learning_rate)
    n_real = len(train)

    def real_batch(rng):
        return [train.sentences[i] for i in rng.integers(0, n_real, cfg.batch_size)]

    def fake_batch(*seed_parts):
        sents, _ = _ancestral_chunk(gen, cfg.decoder(_derived_seed(*seed_parts)), 1.0, range(cfg.batch_size))
        return sents

    for j in range(cfg.disc_pretrain_steps):
        rng = np.random.default_rng([cfg.seed, 0, j, 1])
        _disc_update(disc, d_opt, real_batch(rng), fake_batch(cfg.seed, 0, j, 2), cfg.grad_clip_norm)

    perfect_run = 0
    warned = False
    for step in range(1, cfg.adv_steps + 1):
        rng = np.random.default_rng([cfg.seed, 1, step])
        if rng.random() < cfg.mle_interleave_ratio:
            _, grads = M.nll_loss_and_grads(gen, real_batch(rng))
        else:
            fake = fake_batch(cfg.seed, 2, step)
            Q = rollout_rewards(gen, disc, fake, cfg.rollout_count, np.random.default_rng([cfg.seed, 3, step]),
                                cfg.decoder(0), cfg.step_level_reward)
            inputs, _, mask = M.pad_batch(fake)
            _, cache = M.lm_logits(gen, inputs)
            states = cache[0]
            adv = Q - baseline.predict(states)
            baseline.fit_step(states, Q, mask)
            grads, _, _, _ = policy_gradient(gen, fake, adv, cfg.entropy_bonus_weight)
        clip_grads(grads, cfg.grad_clip_norm)
        g_opt.step(gen.blocks, grads)
        if not gen.is_finite():
            raise TrainingDivergence(f"non-finite generator parameters at adversarial step {step}")
        for j in range(cfg.disc_steps_per_gen_step):
            drng = np.random.default_rng([cfg.seed, 4, step, j])
            _, acc = _disc_update(disc, d_opt, real_batch(drng), fake_batch(cfg.seed, 5, step, j),
                                  cfg.grad_clip_norm)
            perfect_run = perfect_run + 1 if acc == 1.0 else 0
            if perfect_run >= cfg.collapse_window and not warned:
                trace.warnings.append(f"reward collapse: discriminator accuracy 1.0 for "
                                      f"{cfg.collapse_window} updates at adversarial step {step}")
                warned = True
        if step % cfg.eval_every == 0 or step == cfg.adv_steps:
            trace.add(offset + step, "adversarial", evaluate_nll(gen, probe), evaluate_nll(gen, valid),
                      base_seconds + clock() - t0)
    gen.lineage = {**gen.lineage, "trained_by": "adversarial", "adv_seed": cfg.seed}
    return gen, disc, trace


# ---------------------------------------------------------------------------
# discriminator-only training


def train_discriminator_only(gen: RecurrentParams, real: Corpus, cfg: DiscTrainConfig) -> DiscriminatorParams:
    """Fit a fresh discriminator on real vs generator samples; ``gen`` is never touched."""
    disc = M.init_discriminator(gen.vocab_size, cfg.hidden_dim, seed=cfg.seed)
    opt = Adam(disc, cfg.learning_rate)
    dec = DecoderConfig("ancestral", cfg.sample_alpha, max_len=cfg.max_len, fixed_len=cfg.fixed_len)
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        real_b = [real.sentences[i] for i in rng.integers(0, len(real), cfg.batch_size)]
        d = DecoderConfig(**{**dec.to_dict(), "seed": _derived_seed(cfg.seed, step, 9)})
        fake_b, _ = _ancestral_chunk(gen, d, cfg.sample_alpha, range(cfg.batch_size))
        _disc_update(disc, opt, real_b, fake_b, 5.0)
    disc.lineage = {**disc.lineage, "trained_by": "discriminator_only", "train_seed": cfg.seed}
    return disc


def disc_accuracy(disc: DiscriminatorParams, real: Sequence, fake: Sequence) -> float:
    p_real = M.discriminate_batch(disc, list(real))
    p_fake = M.discriminate_batch(disc, list(fake))
    return float((np.sum(p_real >= 0.5) + np.sum(p_fake < 0.5)) / (len(real) + len(fake)))


def roc_auc(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Probability a positive outscores a negative, ties counting half."""
    pos = np.asarray(pos_scores)[:, None]
    neg = np.asarray(neg_scores)[None, :]
    return float(((pos > neg).sum() + 0.5 * (pos == neg).sum()) / (pos.size * neg.size))


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    block_errors: dict[str, float]
    tolerance: float
    step: float

    @property
    def max_error(self) -> float:
        return max(self.block_errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("block", "relative_error", "tolerance", "passed"))
        for k in sorted(self.block_errors):
            e = self.block_errors[k]
            w.writerow((k, repr(e), repr(self.tolerance), int(e < self.tolerance)))
        return buf.getvalue()


def gradient_check(
    params: RecurrentParams, sentences: Sequence[Sequence[int]] | Sequence[int], tolerance: float = 1e-3,
    step: float = 1e-4, alpha: float = 1.0,
    grad_fn: Callable[[RecurrentParams, list, float], tuple[float, dict]] | None = None,
) -> GradCheckReport:
    """Compare analytic NLL gradients with central differences, block by block.

    The per-block error is ``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)``.
    """
    if sentences and isinstance(sentences[0], (int, np.integer)):
        sentences = [sentences]  # type: ignore[list-item]
    sents = [tuple(s) for s in sentences]  # type: ignore[union-attr]
    if not sents or any(len(s) < 2 for s in sents):
        raise TrainingError("nothing to check: every sentence needs at least one content token")
    grad_fn = grad_fn or M.nll_loss_and_grads
    work = params.copy()
    _, analytic = grad_fn(work, sents, alpha)
    errors = {}
    for name, block in work.blocks.items():
        numeric = np.zeros_like(block)
        flat = block.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up, _ = M.nll_loss_and_grads(work, sents, alpha)
            flat[i] = old - step
            down, _ = M.nll_loss_and_grads(work, sents, alpha)
            flat[i] = old
            nflat[i] = (up - down) / (2 * step)
        denom = max(np.linalg.norm(analytic[name]), np.linalg.norm(numeric), 1e-12)
        errors[name] = float(np.linalg.norm(analytic[name] - numeric) / denom)
    return GradCheckReport(errors, tolerance, step)
