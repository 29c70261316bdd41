"""Temperature sweeps, AUC summaries, the synthetic-oracle experiment,
decoding benchmarks, the entropy-drop trace and the training-temperature study.

Every artifact is a CSV string with a fixed header. Timing columns are the
only nondeterministic values; pass ``timing=False`` to write them as 0.0.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .corpus import Corpus, Vocab
from .decoding import DecoderConfig, DecodingError, RejectionExhausted, sample
from .metrics import (
    LmScoreConfig, MetricError, NGramIndex, _cap_references, fit_scoring_lm, nll_with_se,
    sentence_bleu, split_generated, unigram_nll, REFERENCE_CAP, EPSILON,
)
from .training import (
    AdvConfig, TrainConfig, TrainTrace, TrainingDivergence, _derived_seed, adversarial_train, mle_train,
)

log = logging.getLogger(__name__)

CONTROLS = ("temperature", "beam", "gen_rejection", "disc_rejection")
METRIC_PAIRS = ("bleu", "lm", "nll")
CURVE_HEADER = ("control", "quality", "diversity", "quality_se", "diversity_se", "seconds", "samples",
                "seed", "flag")
BENCH_HEADER = ("strategy", "alpha", "beam_size", "threshold", "sentences", "attempts", "acceptance_rate",
                "seconds", "mean_loglik")
TABLE_HEADER = ("model", "alpha", "nll_oracle", "nll_oracle_se", "samples")
AUC_HEADER = ("model", "window_lo", "window_hi", "auc")
TEMP_STUDY_HEADER = ("alpha_train", "neg_bleu", "self_bleu", "neg_bleu_se", "self_bleu_se", "samples", "seed")
DEFAULT_ALPHAS = (1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.6, 0.5, 0.4, 0.2, 0.05, 0.001)
COLLAPSE_DISTINCT = 0.5   # below this fraction of distinct samples a point is flagged as collapsed
ENTROPY_DROP_K = 50       # adversarial steps after the switch at which the spike is read off
BENCH_DEFAULT_N = 2000


class SweepError(ValueError):
    pass


# ---------------------------------------------------------------------------
# spec, data and curve types


@dataclass(frozen=True)
class SweepSpec:
    """One sweep: a control knob, its values and the metric pair to record."""

    control: str = "temperature"
    values: tuple[float, ...] = DEFAULT_ALPHAS
    metric_pair: str = "bleu"
    n: int = 5
    samples_per_point: int = 500
    seeds: tuple[int, ...] = (0, 1, 2)
    max_len: int = 52
    fixed_len: int | None = None
    alpha: float = 1.0          # temperature used under the non-temperature controls
    max_attempts: int = 10_000
    mle_model: bool = True      # raising alpha above 1 is flagged for MLE models
    reference_cap: int | None = REFERENCE_CAP
    epsilon: float = EPSILON

    def __post_init__(self) -> None:
        if self.control not in CONTROLS:
            raise SweepError(f"unknown control {self.control!r}; choose from {CONTROLS}")
        if self.metric_pair not in METRIC_PAIRS:
            raise SweepError(f"unknown metric pair {self.metric_pair!r}; choose from {METRIC_PAIRS}")
        if not self.values:
            raise SweepError("a sweep needs at least one control value")
        if self.samples_per_point < 100:
            raise SweepError("samples_per_point must be >= 100")
        if not self.seeds:
            raise SweepError("a sweep needs at least one seed")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        vals = list(self.values)
        # entropy goes down along the sweep: alpha falls, beam width and thresholds rise
        order = sorted(vals, reverse=True) if self.control == "temperature" else sorted(vals)
        if vals != order:
            raise SweepError(f"control values must be ordered from high to low entropy: {vals}")
        if self.control == "beam" and any(v != int(v) or v < 1 for v in vals):
            raise SweepError("beam sizes must be positive integers")

    def decoder(self, value: float, seed: int) -> DecoderConfig:
        base = dict(alpha=self.alpha, max_len=self.max_len, fixed_len=self.fixed_len,
                    max_attempts=self.max_attempts, seed=seed)
        if self.control == "temperature":
            return DecoderConfig("ancestral", **{**base, "alpha": value})
        if self.control == "beam":
            return DecoderConfig("stochastic_beam", beam_size=int(value), **base)
        if self.control == "gen_rejection":
            return DecoderConfig("gen_rejection", threshold=value, **base)
        return DecoderConfig("disc_rejection", disc_threshold=value, **base)


@dataclass
class SweepData:
    """Corpora and fixed models a sweep is scored against."""

    real_train: Corpus
    real_valid: Corpus
    real_test: Corpus
    references: Corpus | None = None          # BLEU references; defaults to real_test
    oracle: M.RecurrentParams | None = None   # needed for the nll pair
    disc: M.DiscriminatorParams | None = None  # needed for disc_rejection
    lm_config: LmScoreConfig = field(default_factory=LmScoreConfig)
    scorer: M.RecurrentParams | None = None   # LM-score model; fit on demand
    _unigram: float | None = None

    @property
    def vocab(self) -> Vocab:
        return self.real_train.vocab

    def unigram_bound(self) -> float:
        if self._unigram is None:
            self._unigram = unigram_nll(self.real_train, self.real_test)
        return self._unigram

    def lm_scorer(self) -> M.RecurrentParams:
        if self.scorer is None:
            self.scorer = fit_scoring_lm(self.real_train, self.real_valid, self.lm_config)
        return self.scorer


@dataclass
class CurvePoint:
    control: float
    quality: float | None
    diversity: float | None
    quality_se: float | None
    diversity_se: float | None
    seconds: float
    samples: int
    seeds: tuple[int, ...]
    flag: str = ""

    @property
    def failed(self) -> bool:
        return self.flag.startswith("failed")

    def row(self, timing: bool = True) -> list:
        def num(v):
            return "" if v is None else repr(float(v))
        return [repr(self.control), num(self.quality), num(self.diversity), num(self.quality_se),
                num(self.diversity_se), repr(float(self.seconds) if timing else 0.0), self.samples,
                ";".join(str(s) for s in self.seeds), self.flag]


@dataclass
class SweepCurve:
    points: list[CurvePoint]
    model_id: str = ""
    spec: SweepSpec | None = None

    def __post_init__(self) -> None:
        if not self.points:
            raise SweepError("a curve needs at least one point")
        for p in self.points:
            if p.failed:
                continue
            if not (math.isfinite(p.quality) and math.isfinite(p.diversity)):
                raise SweepError(f"non-finite value at control {p.control}")

    def usable(self, exclude: Sequence[str] = ()) -> list[CurvePoint]:
        """Points that did not fail and carry none of the ``exclude`` flags."""
        return [p for p in self.points if not p.failed and not set(p.flag.split("+")) & set(exclude)]

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for p in self.points:
            w.writerow(p.row(timing))
        return buf.getvalue()


def _write_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _mean_se(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(math.fsum(v) / v.size), se


# ---------------------------------------------------------------------------
# sweep


def _score_pair(spec: SweepSpec, data: SweepData, gen: M.RecurrentParams, generated: Corpus,
                value: float, seed: int, index: NGramIndex | None):
    """(quality, quality_se, diversity, diversity_se) for one seed at one point."""
    sents = generated.sentences
    if spec.metric_pair == "bleu":
        neg = [-sentence_bleu(s, index, spec.n, spec.epsilon) for s in sents]
        self_index = NGramIndex.build(sents, spec.n)
        sb = [sentence_bleu(s, self_index, spec.n, spec.epsilon, exclude=i) for i, s in enumerate(sents)]
        return (*_mean_se(neg), *_mean_se(sb))
    if spec.metric_pair == "lm":
        q, q_se = nll_with_se(data.lm_scorer(), sents)
        cfg = replace(data.lm_config, train=replace(data.lm_config.train, seed=seed))
        g_train, g_valid = split_generated(generated, cfg)
        rlm = fit_scoring_lm(g_train, g_valid, cfg)
        d, d_se = nll_with_se(rlm, data.real_test.sentences)
        return q, q_se, d, d_se
    if data.oracle is None:
        raise SweepError("the nll metric pair needs an oracle")
    q, q_se = nll_with_se(data.oracle, sents)
    # NLL_test of the decoded distribution: only defined for temperature control
    alpha = value if spec.control == "temperature" else spec.alpha
    if alpha <= 0:
        raise MetricError("NLL_test is undefined at alpha = 0")
    d, d_se = nll_with_se(gen, data.real_test.sentences, alpha)
    return q, q_se, d, d_se


def _flag(spec: SweepSpec, data: SweepData, value: float, diversity: float, distinct: float) -> str:
    flags = []
    if spec.control == "temperature" and spec.mle_model and value > 1.0:
        flags.append("above_mle_ceiling")
    if spec.metric_pair in ("lm", "nll") and diversity >= data.unigram_bound():
        flags.append("below_unigram")
    if distinct < COLLAPSE_DISTINCT:
        flags.append("collapse")
    return "+".join(flags)


def run_sweep(gen: M.RecurrentParams, spec: SweepSpec, data: SweepData, model_id: str = "") -> SweepCurve:
    """Decode and score at every control value; seeds are pooled per point.

    A point's value is the mean over seeds of the per-seed means, with
    standard error ``sqrt(sum se_i**2) / n_seeds``. Decoding or metric
    failures mark the point as failed and the sweep moves on.
    """
    if data.vocab.size != gen.vocab_size:
        raise SweepError(f"vocab mismatch: model {gen.vocab_size} vs data {data.vocab.size}")
    if spec.control == "disc_rejection" and data.disc is None:
        raise SweepError("disc_rejection sweeps need a discriminator")
    indices: dict[int, NGramIndex] = {}
    if spec.metric_pair == "bleu":
        refs = (data.references or data.real_test).sentences
        for seed in spec.seeds:
            capped = _cap_references(refs, spec.reference_cap, seed)
            indices[seed] = NGramIndex.build(capped, spec.n)
    if spec.metric_pair == "lm":
        data.lm_scorer()
    points = []
    cap = max(spec.max_len, max(len(s) - 1 for s in data.real_train.sentences))
    for value in spec.values:
        per_seed = []
        seconds = 0.0
        try:
            for seed in spec.seeds:
                batch = sample(gen, spec.decoder(value, seed), spec.samples_per_point, data.disc)
                seconds += batch.elapsed_seconds
                generated = batch.to_corpus(data.vocab, cap)
                scores = _score_pair(spec, data, gen, generated, value, seed, indices.get(seed))
                distinct = len(set(generated.sentences)) / len(generated)
                per_seed.append((*scores, distinct))
        except (RejectionExhausted, DecodingError, MetricError, M.NumericalOverflow,
                TrainingDivergence) as exc:
            reason = str(exc).replace("\n", " ")
            log.warning("sweep point %s failed: %s", value, reason)
            points.append(CurvePoint(value, None, None, None, None, seconds, 0, spec.seeds, f"failed:{reason}"))
            continue
        arr = np.array(per_seed)
        S = len(spec.seeds)
        q, d = float(arr[:, 0].mean()), float(arr[:, 2].mean())
        q_se = float(math.sqrt(np.sum(arr[:, 1] ** 2)) / S)
        d_se = float(math.sqrt(np.sum(arr[:, 3] ** 2)) / S)
        flag = _flag(spec, data, value, d, float(arr[:, 4].min()))
        points.append(CurvePoint(value, q, d, q_se, d_se, seconds, spec.samples_per_point * S, spec.seeds, flag))
    return SweepCurve(points, model_id, spec)


# ---------------------------------------------------------------------------
# area under the curve


def auc(curve: SweepCurve | Sequence[tuple[float, float]], window: tuple[float, float] | None = None,
        exclude: Sequence[str] = ()) -> float:
    """Trapezoidal integral of quality over diversity inside ``window``.

    Points are sorted by diversity first, so input order does not matter.
    Quality is linearly interpolated at the window edges. ``curve`` may also
    be a sequence of ``(diversity, quality)`` pairs.
    """
    if isinstance(curve, SweepCurve):
        pts = [(p.diversity, p.quality) for p in curve.usable(exclude)]
    else:
        pts = [(float(d), float(q)) for d, q in curve]
    if len(pts) < 2:
        raise SweepError("auc needs at least 2 usable points")
    pts.sort()
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    lo, hi = (x[0], x[-1]) if window is None else (float(window[0]), float(window[1]))
    if not lo < hi:
        raise SweepError(f"empty diversity window [{lo}, {hi}]")
    lo, hi = max(lo, x[0]), min(hi, x[-1])
    if not lo < hi:
        raise SweepError("curve does not intersect the diversity window")
    inside = (x > lo) & (x < hi)
    xs = np.concatenate([[lo], x[inside], [hi]])
    # interp needs distinct x; with ties np.interp picks one side consistently
    ys = np.concatenate([[np.interp(lo, x, y)], y[inside], [np.interp(hi, x, y)]])
    return float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)))


def shared_window(curves: Sequence[SweepCurve], exclude: Sequence[str] = ("collapse",)) -> tuple[float, float]:
    """Overlap of the curves' diversity ranges, ignoring points with ``exclude`` flags.

    Collapsed points are left out by default: their held-out NLL runs off to
    hundreds of nats and would swamp any comparison.
    """
    spans = []
    for c in curves:
        d = [p.diversity for p in c.usable(exclude)]
        if len(d) < 2:
            raise SweepError(f"curve {c.model_id!r} has fewer than 2 usable points")
        spans.append((min(d), max(d)))
    lo, hi = max(s[0] for s in spans), min(s[1] for s in spans)
    if not lo < hi:
        raise SweepError(f"curves share no diversity range ({lo} >= {hi})")
    return lo, hi


# ---------------------------------------------------------------------------
# synthetic-oracle experiment


@dataclass(frozen=True)
class ExperimentConfig:
    vocab_size: int = 100
    oracle_seed: int = 7
    oracle_hidden: int = M.ORACLE_HIDDEN
    seq_len: int = 20
    n_train: int = 10_000
    n_valid: int = 1_000
    n_test: int = 1_000
    student_hidden: int = 32
    init_scale: float = 0.1
    mle: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=15))
    adv: AdvConfig = field(default_factory=lambda: AdvConfig(adv_steps=200, eval_every=10))
    run_adversarial: bool = True
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    table_alphas: tuple[float, ...] = (1.0, 0.4, 0.001)
    samples_per_point: int = 2000
    seed: int = 0


@dataclass
class ExperimentReport:
    table: list[tuple[str, float, float, float, int]]
    curves: dict[str, SweepCurve]
    aucs: dict[str, float]
    window: tuple[float, float] | None
    traces: dict[str, TrainTrace]
    warnings: list[str] = field(default_factory=list)
    models: dict[str, M.RecurrentParams] = field(default_factory=dict, repr=False)
    data: SweepData | None = field(default=None, repr=False)

    def table_csv(self) -> str:
        return _write_csv(TABLE_HEADER, [(m, repr(a), repr(v), repr(se), n) for m, a, v, se, n in self.table])

    def auc_csv(self) -> str:
        lo, hi = self.window if self.window else ("", "")
        return _write_csv(AUC_HEADER, [(m, repr(lo), repr(hi), repr(v)) for m, v in self.aucs.items()])

    def nll_oracle(self, model: str, alpha: float) -> tuple[float, float]:
        for m, a, v, se, _ in self.table:
            if m == model and a == alpha:
                return v, se
        raise KeyError((model, alpha))

    def write(self, out_dir: str | Path, timing: bool = True) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"nll_table.csv": self.table_csv(), "auc.csv": self.auc_csv()}
        for name, c in self.curves.items():
            files[f"curve_{name}.csv"] = c.to_csv(timing)
        for name, t in self.traces.items():
            files[f"trace_{name}.csv"] = t.to_csv(timing)
        written = []
        for fname, text in files.items():
            (out / fname).write_text(text, encoding="utf-8")
            written.append(out / fname)
        return written


def oracle_corpora(oracle: M.RecurrentParams, sizes: Sequence[int], seq_len: int, seed: int,
                   splits: Sequence[str] = ("train", "valid", "test")) -> list[Corpus]:
    """Fixed-length oracle samples, one independent stream per split."""
    vocab = Vocab.synthetic(oracle.vocab_size)
    out = []
    for k, (n, split) in enumerate(zip(sizes, splits)):
        dec = DecoderConfig("ancestral", 1.0, max_len=seq_len, fixed_len=seq_len, seed=_derived_seed(seed, 100 + k))
        out.append(Corpus(tuple(sample(oracle, dec, n).sentences), vocab, split, seq_len))
    return out


def run_synthetic_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Oracle data, MLE student, optional adversarial student, NLL sweeps, NLL_oracle table rows and AUCs."""
    oracle = M.make_oracle(cfg.vocab_size, cfg.oracle_seed, cfg.oracle_hidden)
    train, valid, test = oracle_corpora(oracle, (cfg.n_train, cfg.n_valid, cfg.n_test), cfg.seq_len, cfg.seed)
    init = M.init_params(cfg.vocab_size, cfg.student_hidden, seed=_derived_seed(cfg.seed, 200),
                         scale=cfg.init_scale)
    mle_cfg = replace(cfg.mle, seed=cfg.seed)
    mle_student, mle_trace = mle_train(init, train, valid, mle_cfg)
    students = {"mle": mle_student}
    traces = {"mle": mle_trace}
    warnings: list[str] = []
    if cfg.run_adversarial:
        adv_cfg = replace(cfg.adv, seed=cfg.seed, max_len=cfg.seq_len, fixed_len=cfg.seq_len, pretrain_epochs=0)
        gan, _, adv_trace = adversarial_train(mle_student, None, train, valid, adv_cfg, mle_cfg)
        students["gan"] = gan
        traces["gan"] = adv_trace
        warnings.extend(adv_trace.warnings)
    data = SweepData(train, valid, test, oracle=oracle)
    alphas = tuple(sorted(set(cfg.alphas) | set(cfg.table_alphas), reverse=True))
    curves = {}
    for name, student in students.items():
        spec = SweepSpec("temperature", alphas, "nll", samples_per_point=cfg.samples_per_point,
                         seeds=(cfg.seed,), max_len=cfg.seq_len, fixed_len=cfg.seq_len, mle_model=name == "mle")
        curves[name] = run_sweep(student, spec, data, name)
    table = []
    for name, curve in curves.items():
        for p in curve.points:
            if p.control in cfg.table_alphas and not p.failed:
                table.append((name, p.control, p.quality, p.quality_se, p.samples))
    aucs: dict[str, float] = {}
    window = None
    if len(curves) > 1:
        try:
            window = shared_window(list(curves.values()))
            aucs = {name: auc(c, window, exclude=("collapse",)) for name, c in curves.items()}
        except SweepError as exc:
            warnings.append(f"no AUC comparison: {exc}")
    return ExperimentReport(table, curves, aucs, window, traces, warnings, students, data)


# ---------------------------------------------------------------------------
# decoding benchmark


@dataclass
class BenchRow:
    strategy: str
    alpha: float
    beam_size: int
    threshold: float | None
    sentences: int
    attempts: int
    seconds: float
    mean_loglik: float

    @property
    def acceptance_rate(self) -> float:
        return self.sentences / self.attempts

    def row(self, timing: bool = True) -> list:
        return [self.strategy, repr(self.alpha), self.beam_size, "" if self.threshold is None else repr(self.threshold),
                self.sentences, self.attempts, repr(self.acceptance_rate),
                repr(self.seconds if timing else 0.0), repr(self.mean_loglik)]


def bench_decoding(gen: M.RecurrentParams, configs: Sequence[DecoderConfig], n: int = BENCH_DEFAULT_N,
                   disc: M.DiscriminatorParams | None = None) -> list[BenchRow]:
    """Wall-clock time to decode ``n`` sentences with each config."""
    if n < 100:
        raise SweepError("bench_decoding needs n >= 100")
    rows = []
    for cfg in configs:
        batch = sample(gen, cfg, n, disc)
        threshold = {"gen_rejection": cfg.threshold, "disc_rejection": cfg.disc_threshold}.get(cfg.strategy)
        rows.append(BenchRow(cfg.strategy, cfg.alpha, cfg.beam_size, threshold, len(batch.sentences),
                             batch.attempts_used, batch.elapsed_seconds, float(np.mean(batch.loglik))))
    return rows


def bench_to_csv(rows: Sequence[BenchRow], timing: bool = True) -> str:
    return _write_csv(BENCH_HEADER, [r.row(timing) for r in rows])


# ---------------------------------------------------------------------------
# entropy-drop trace


def entropy_drop_trace(init: M.RecurrentParams, train: Corpus, test: Corpus, pretrain: TrainConfig,
                       adv: AdvConfig) -> TrainTrace:
    """MLE for ``adv.pretrain_epochs`` epochs, then adversarial steps, on one model.

    The held-out column of the trace is the NLL of ``test``; the row with
    phase ``switch`` marks the start of adversarial training.
    """
    if adv.pretrain_epochs < 1:
        raise SweepError("entropy_drop_trace needs pretrain_epochs >= 1")
    _, _, trace = adversarial_train(init, None, train, test, adv, pretrain)
    return trace


def entropy_spike(trace: TrainTrace, k: int = ENTROPY_DROP_K) -> float:
    """Held-out NLL ``k`` adversarial steps after the switch minus its value at the switch."""
    switch = [r for r in trace.rows if r.phase == "switch"]
    if len(switch) != 1:
        raise SweepError("trace must hold exactly one switch row")
    at = switch[0]
    later = [r for r in trace.rows if r.phase == "adversarial" and r.step <= at.step + k]
    if not later:
        raise SweepError(f"no adversarial row within {k} steps of the switch")
    return later[-1].valid_nll - at.valid_nll


# ---------------------------------------------------------------------------
# training-temperature study


@dataclass
class TempStudyRow:
    alpha_train: float
    point: CurvePoint

    def row(self) -> list:
        p = self.point
        num = (lambda v: "" if v is None else repr(v))
        return [repr(self.alpha_train), num(p.quality), num(p.diversity), num(p.quality_se),
                num(p.diversity_se), p.samples, ";".join(map(str, p.seeds))]


def train_temp_study(alphas_train: Sequence[float], base: TrainConfig, init: M.RecurrentParams,
                     data: SweepData, spec: SweepSpec | None = None) -> list[TempStudyRow]:
    """Train one model per training temperature and score each at inference alpha = 1."""
    if any(not a > 0 for a in alphas_train):
        raise SweepError("training temperatures must be > 0")
    spec = spec or SweepSpec("temperature", (1.0,), "bleu", samples_per_point=500, seeds=(base.seed,))
    if spec.control != "temperature" or spec.values != (1.0,) or spec.metric_pair != "bleu":
        raise SweepError("the study scores a single alpha = 1 point on the bleu pair")
    rows = []
    for a in alphas_train:
        lm, _ = mle_train(init, data.real_train, data.real_valid, replace(base, train_temperature=float(a)))
        rows.append(TempStudyRow(float(a), run_sweep(lm, spec, data, f"alpha_train={a}").points[0]))
    return rows


def temp_study_to_csv(rows: Sequence[TempStudyRow]) -> str:
    return _write_csv(TEMP_STUDY_HEADER, [r.row() for r in rows])

