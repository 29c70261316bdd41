"""Command-line entry point: ``tempsweep <subcommand> [--config FILE] [flags]``.

Config files hold flat ``key = value`` lines (``#`` starts a comment) or a
JSON object; keys are the flag names with dashes turned into underscores.
Flags given on the command line override the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from . import sweep as S
from .corpus import Vocab, load_corpus, save_corpus
from .decoding import DecoderConfig, sample
from .metrics import (
    EPSILON, LmScoreConfig, MetricReport, bleu_n, fit_scoring_lm, nll_with_se, reports_to_csv,
    reverse_lm_score, self_bleu_n, split_generated, unigram_nll,
)
from .training import AdvConfig, TrainConfig, adversarial_train, gradient_check, mle_train

log = logging.getLogger("tempsweep")


# ---------------------------------------------------------------------------
# flag plumbing


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _optional(conv):
    def parse(text):
        return None if str(text).strip().lower() in ("", "none") else conv(text)
    return parse


def _tuple_of(conv):
    def parse(text):
        if isinstance(text, (list, tuple)):
            return tuple(conv(v) for v in text)
        return tuple(conv(v) for v in str(text).split(",") if v.strip())
    return parse


_CONVERTERS = {
    "int": int, "float": float, "str": str, "bool": _parse_bool,
    "int | None": _optional(int), "float | None": _optional(float),
    "tuple[float, ...]": _tuple_of(float), "tuple[int, ...]": _tuple_of(int),
}


def _add_fields(parser: argparse.ArgumentParser, cls, prefix: str = "", skip: Sequence[str] = (),
                registry: dict | None = None) -> None:
    """One ``--prefix-field`` flag per scalar dataclass field."""
    for f in dataclasses.fields(cls):
        conv = _CONVERTERS.get(str(f.type))
        if conv is None or f.name in skip:
            continue
        dest = prefix + f.name
        parser.add_argument("--" + dest.replace("_", "-"), dest=dest, type=conv, default=None,
                            help=f"{cls.__name__}.{f.name}")
        if registry is not None:
            registry[dest] = conv


def _build(cls, args: argparse.Namespace, prefix: str = "", base=None, **fixed):
    """Instantiate ``cls`` from flags, falling back to ``base`` or the class defaults."""
    values = {}
    for f in dataclasses.fields(cls):
        v = getattr(args, prefix + f.name, None)
        if v is not None:
            values[f.name] = v
    values.update(fixed)
    return dataclasses.replace(base, **values) if base is not None else cls(**values)


def load_config(path: str | Path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return json.loads(text)
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _write(path: str | Path | None, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def _vocab(args) -> Vocab:
    if args.vocab is None:
        raise SystemExit("--vocab is required")
    return Vocab.load(args.vocab)


def _corpus(path, vocab, split, max_len):
    return None if path is None else load_corpus(path, vocab, split, max_len)


def _sweep_data(args, vocab) -> S.SweepData:
    for name in ("train", "valid", "test"):
        if getattr(args, name) is None:
            raise SystemExit(f"--{name} is required")
    return S.SweepData(
        load_corpus(args.train, vocab, "train", args.corpus_max_len),
        load_corpus(args.valid, vocab, "valid", args.corpus_max_len),
        load_corpus(args.test, vocab, "test", args.corpus_max_len),
        references=_corpus(args.references, vocab, "test", args.corpus_max_len),
        oracle=M.load_params(args.oracle) if args.oracle else None,
        disc=M.load_params(args.disc) if args.disc else None,  # type: ignore[arg-type]
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_oracle_gen(args) -> None:
    cfg = _build(S.ExperimentConfig, args)
    oracle = M.make_oracle(cfg.vocab_size, cfg.oracle_seed, cfg.oracle_hidden)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    M.save_params(oracle, out / "oracle.bin")
    Vocab.synthetic(cfg.vocab_size).save(out / "vocab.txt")
    corpora = S.oracle_corpora(oracle, (cfg.n_train, cfg.n_valid, cfg.n_test), cfg.seq_len, cfg.seed)
    rows = []
    for c in corpora:
        save_corpus(c, out / f"{c.split}.txt")
        rows.append((c.split, len(c), c.n_tokens(), repr(M.sentence_nlls(oracle, c.sentences).mean())))
    _write(out / "summary.csv", S._write_csv(("split", "sentences", "tokens", "nll_oracle"), rows))


def cmd_train(args) -> None:
    vocab = _vocab(args)
    train = load_corpus(args.train, vocab, "train", args.corpus_max_len)
    valid = load_corpus(args.valid, vocab, "valid", args.corpus_max_len)
    cfg = _build(TrainConfig, args)
    init = M.init_params(vocab.size, args.hidden_dim, args.embed_dim, args.num_layers, cfg.seed, args.init_scale)
    params, trace = mle_train(init, train, valid, cfg)
    M.save_params(params, args.out)
    _write(args.trace, trace.to_csv(not args.no_timing))


def cmd_adv_train(args) -> None:
    vocab = _vocab(args)
    train = load_corpus(args.train, vocab, "train", args.corpus_max_len)
    valid = load_corpus(args.valid, vocab, "valid", args.corpus_max_len)
    cfg = _build(AdvConfig, args)
    mle_cfg = _build(TrainConfig, args, prefix="mle_", seed=cfg.seed)
    if args.model:
        gen = M.load_params(args.model)
    else:
        gen = M.init_params(vocab.size, args.hidden_dim, seed=cfg.seed, scale=args.init_scale)
    disc = M.load_params(args.disc) if args.disc else None
    gen, disc, trace = adversarial_train(gen, disc, train, valid, cfg, mle_cfg)  # type: ignore[arg-type]
    for w in trace.warnings:
        log.warning(w)
    M.save_params(gen, args.out)
    if args.disc_out:
        M.save_params(disc, args.disc_out)
    _write(args.trace, trace.to_csv(not args.no_timing))


def cmd_sample(args) -> None:
    vocab = _vocab(args)
    gen = M.load_params(args.model)
    cfg = _build(DecoderConfig, args)
    disc = M.load_params(args.disc) if args.disc else None
    batch = sample(gen, cfg, args.n, disc)  # type: ignore[arg-type]
    corpus = batch.to_corpus(vocab, cfg.length_cap)
    save_corpus(corpus, args.out)
    meta = {"decoder": cfg.to_dict(), "n": args.n, "attempts": batch.attempts_used,
            "acceptance_rate": batch.acceptance_rate, "model_lineage": gen.lineage,
            "elapsed_seconds": batch.elapsed_seconds if not args.no_timing else 0.0}
    Path(str(args.out) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if args.stats:
        rows = [(i, len(s) - 1, repr(float(ll))) for i, (s, ll) in enumerate(zip(batch.sentences, batch.loglik))]
        _write(args.stats, S._write_csv(("index", "length", "loglik"), rows))


METRICS = ("bleu", "self_bleu", "nll", "unigram_nll", "lm", "reverse_lm")


def cmd_eval(args) -> None:
    vocab = _vocab(args)
    gen = load_corpus(args.generated, vocab, "generated", args.corpus_max_len)
    refs = _corpus(args.references, vocab, "test", args.corpus_max_len)
    reports = []
    for metric in args.metrics.split(","):
        if metric not in METRICS:
            raise SystemExit(f"unknown metric {metric!r}; choose from {METRICS}")
        if metric == "bleu":
            if refs is None:
                raise SystemExit("bleu needs --references")
            v = bleu_n(gen, refs, args.n, EPSILON, seed=args.seed)
            reports.append(MetricReport("bleu", v, len(gen), min(len(refs), 5000), args.n, EPSILON, args.seed))
        elif metric == "self_bleu":
            reports.append(MetricReport("self_bleu", self_bleu_n(gen, args.n), len(gen), len(gen), args.n, EPSILON))
        elif metric == "nll":
            if not args.model:
                raise SystemExit("nll needs --model (the scoring model)")
            v, _ = nll_with_se(M.load_params(args.model), gen.sentences, args.alpha)
            reports.append(MetricReport("nll", v, len(gen), 0))
        elif metric == "unigram_nll":
            if args.train is None:
                raise SystemExit("unigram_nll needs --train")
            train = load_corpus(args.train, vocab, "train", args.corpus_max_len)
            reports.append(MetricReport("unigram_nll", unigram_nll(train, gen), len(gen), len(train)))
        else:
            if args.train is None or args.valid is None or refs is None:
                raise SystemExit(f"{metric} needs --train, --valid and --references")
            cfg = LmScoreConfig(train=TrainConfig(max_epochs=10, early_stop_patience=2, seed=args.seed))
            if metric == "lm":
                train = load_corpus(args.train, vocab, "train", args.corpus_max_len)
                valid = load_corpus(args.valid, vocab, "valid", args.corpus_max_len)
                v, _ = nll_with_se(fit_scoring_lm(train, valid, cfg), gen.sentences)
            else:
                g_train, g_valid = split_generated(gen, cfg)
                v = reverse_lm_score(g_train, g_valid, refs, cfg)
            reports.append(MetricReport(metric, v, len(gen), len(refs), seed=args.seed))
    _write(args.out, reports_to_csv(reports))


def cmd_sweep(args) -> None:
    vocab = _vocab(args)
    gen = M.load_params(args.model)
    spec = _build(S.SweepSpec, args)
    curve = S.run_sweep(gen, spec, _sweep_data(args, vocab), Path(args.model).stem)
    _write(args.out, curve.to_csv(not args.no_timing))


def _read_curve(path: str) -> S.SweepCurve:
    import csv
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    pts = []
    for r in rows:
        num = (lambda k: None if r[k] == "" else float(r[k]))
        pts.append(S.CurvePoint(float(r["control"]), num("quality"), num("diversity"), num("quality_se"),
                                num("diversity_se"), float(r["seconds"]), int(r["samples"]),
                                tuple(int(s) for s in r["seed"].split(";") if s), r["flag"]))
    return S.SweepCurve(pts, Path(path).stem)


def cmd_auc(args) -> None:
    curves = [_read_curve(p) for p in args.curves]
    exclude = tuple(f for f in args.window_exclude.split(",") if f)
    if args.window:
        lo, hi = (float(v) for v in args.window.split(","))
    else:
        lo, hi = S.shared_window(curves, exclude)
    rows = [(c.model_id, repr(lo), repr(hi), repr(S.auc(c, (lo, hi), exclude))) for c in curves]
    _write(args.out, S._write_csv(S.AUC_HEADER, rows))


def _decoder_spec(text: str, base: dict) -> DecoderConfig:
    """``strategy=ancestral,alpha=0.5`` style bench entry."""
    values = dict(base)
    conv = {f.name: _CONVERTERS[str(f.type)] for f in dataclasses.fields(DecoderConfig)}
    for part in text.split(","):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in conv:
            raise SystemExit(f"unknown decoder field {key!r} in {text!r}")
        values[key] = conv[key](value.strip())
    return DecoderConfig(**values)


def cmd_bench(args) -> None:
    gen = M.load_params(args.model)
    disc = M.load_params(args.disc) if args.disc else None
    base = {"max_len": args.max_len, "fixed_len": args.fixed_len, "seed": args.seed}
    entries = args.decoders or ["strategy=ancestral,alpha=1.0", "strategy=ancestral,alpha=0.5"]
    n = 10_000 if args.full else args.n
    rows = S.bench_decoding(gen, [_decoder_spec(e, base) for e in entries], n, disc)  # type: ignore[arg-type]
    _write(args.out, S.bench_to_csv(rows, not args.no_timing))


def cmd_grad_check(args) -> None:
    params = M.init_params(args.vocab_size, args.hidden_dim, seed=args.seed, scale=args.init_scale)
    rng = np.random.default_rng(args.seed)
    sents = [tuple(int(t) for t in rng.integers(4, args.vocab_size, rng.integers(1, args.max_len + 1))) + (2,)
             for _ in range(args.n_sentences)]
    report = gradient_check(params, sents, args.tolerance, args.step)
    _write(args.out, report.to_csv())
    if not report.passed:
        raise SystemExit(f"gradient check failed: max relative error {report.max_error:.3g}")


def _experiment_config(args) -> S.ExperimentConfig:
    base = S.ExperimentConfig()
    mle = _build(TrainConfig, args, prefix="mle_", base=base.mle)
    adv = _build(AdvConfig, args, prefix="adv_", base=base.adv)
    return _build(S.ExperimentConfig, args, mle=mle, adv=adv)


def cmd_synthetic_experiment(args) -> None:
    report = S.run_synthetic_experiment(_experiment_config(args))
    for w in report.warnings:
        log.warning(w)
    report.write(args.out_dir, not args.no_timing)


def cmd_entropy_trace(args) -> None:
    cfg = _experiment_config(args)
    oracle = M.make_oracle(cfg.vocab_size, cfg.oracle_seed, cfg.oracle_hidden)
    train, test = S.oracle_corpora(oracle, (cfg.n_train, cfg.n_test), cfg.seq_len, cfg.seed, ("train", "test"))
    init = M.init_params(cfg.vocab_size, cfg.student_hidden, seed=cfg.seed, scale=cfg.init_scale)
    adv = dataclasses.replace(cfg.adv, seed=cfg.seed, max_len=cfg.seq_len, fixed_len=cfg.seq_len,
                              pretrain_epochs=args.adv_pretrain_epochs or 5)
    trace = S.entropy_drop_trace(init, train, test, dataclasses.replace(cfg.mle, seed=cfg.seed), adv)
    _write(args.out, trace.to_csv(not args.no_timing))


def cmd_train_temp_study(args) -> None:
    vocab = _vocab(args)
    data = _sweep_data(args, vocab)
    base = _build(TrainConfig, args)
    init = M.init_params(vocab.size, args.hidden_dim, seed=base.seed, scale=args.init_scale)
    spec = S.SweepSpec("temperature", (1.0,), "bleu", n=args.n, samples_per_point=args.samples,
                       seeds=(base.seed,), max_len=args.corpus_max_len)
    rows = S.train_temp_study(args.alphas_train, base, init, data, spec)
    _write(args.out, S.temp_study_to_csv(rows))


# ---------------------------------------------------------------------------
# parser


def _corpus_flags(p, *names):
    for name in names:
        p.add_argument(f"--{name}", default=None, help=f"{name} corpus file (one sentence per line)")
    p.add_argument("--vocab", default=None, help="vocabulary file (one content token per line)")
    p.add_argument("--corpus-max-len", type=int, default=52)


def _model_flags(p):
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--num-layers", type=int, default=1)
    p.add_argument("--init-scale", type=float, default=0.1)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="tempsweep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)
    registries: dict[str, dict] = {}

    def sub(name, func, help_text):
        p = subs.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="key = value or JSON config file")
        p.add_argument("--no-timing", action="store_true", help="write timing columns as 0.0")
        p.set_defaults(func=func)
        registries[name] = {}
        return p, registries[name]

    p, reg = sub("oracle-gen", cmd_oracle_gen, "build a random oracle and sample train/valid/test corpora")
    _add_fields(p, S.ExperimentConfig, registry=reg)
    p.add_argument("--out-dir", required=True)

    p, reg = sub("train", cmd_train, "MLE training with early stopping")
    _corpus_flags(p, "train", "valid")
    _model_flags(p)
    _add_fields(p, TrainConfig, registry=reg)
    p.add_argument("--out", required=True, help="parameter file to write")
    p.add_argument("--trace", default=None, help="trace CSV (stdout when omitted)")

    p, reg = sub("adv-train", cmd_adv_train, "adversarial (REINFORCE) training")
    _corpus_flags(p, "train", "valid")
    _model_flags(p)
    _add_fields(p, AdvConfig, registry=reg)
    _add_fields(p, TrainConfig, prefix="mle_", registry=reg)
    p.add_argument("--model", default=None, help="generator to start from")
    p.add_argument("--disc", default=None, help="discriminator to start from")
    p.add_argument("--out", required=True)
    p.add_argument("--disc-out", default=None)
    p.add_argument("--trace", default=None)

    p, reg = sub("sample", cmd_sample, "decode sentences from a model")
    p.add_argument("--vocab", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--disc", default=None)
    p.add_argument("--n", type=int, default=1000)
    _add_fields(p, DecoderConfig, registry=reg)
    p.add_argument("--out", required=True, help="corpus file; a .meta.json sidecar is written next to it")
    p.add_argument("--stats", default=None, help="per-sentence CSV (index,length,loglik)")

    p, reg = sub("eval", cmd_eval, "score a generated corpus")
    _corpus_flags(p, "generated", "references", "train", "valid")
    p.add_argument("--metrics", default="bleu,self_bleu")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--model", default=None, help="scoring model for the nll metric")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p, reg = sub("sweep", cmd_sweep, "quality-diversity curve over a control knob")
    _corpus_flags(p, "train", "valid", "test", "references")
    p.add_argument("--model", required=True)
    p.add_argument("--oracle", default=None)
    p.add_argument("--disc", default=None)
    _add_fields(p, S.SweepSpec, registry=reg)
    p.add_argument("--out", default=None)

    p, reg = sub("auc", cmd_auc, "area under curve CSVs over a shared diversity window")
    p.add_argument("curves", nargs="+")
    p.add_argument("--window", default=None, help="lo,hi (default: overlap of the curves)")
    p.add_argument("--window-exclude", default="collapse",
                   help="comma-separated flags whose points do not count toward the default window")
    p.add_argument("--out", default=None)

    p, reg = sub("bench", cmd_bench, "decoding wall-clock benchmark")
    p.add_argument("--model", required=True)
    p.add_argument("--disc", default=None)
    p.add_argument("--decoders", nargs="*", default=None, help="entries like strategy=ancestral,alpha=0.5")
    p.add_argument("--n", type=int, default=S.BENCH_DEFAULT_N)
    p.add_argument("--full", action="store_true", help="decode 10,000 sentences per entry")
    p.add_argument("--max-len", type=int, default=52)
    p.add_argument("--fixed-len", type=_optional(int), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p, reg = sub("grad-check", cmd_grad_check, "finite-difference gradient check")
    p.add_argument("--vocab-size", type=int, default=10)
    p.add_argument("--hidden-dim", type=int, default=6)
    p.add_argument("--init-scale", type=float, default=0.5)
    p.add_argument("--n-sentences", type=int, default=3)
    p.add_argument("--max-len", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    for name, func, text in (("synthetic-experiment", cmd_synthetic_experiment, "end-to-end oracle experiment"),
                             ("entropy-trace", cmd_entropy_trace, "NLL_test across the MLE to adversarial switch")):
        p, reg = sub(name, func, text)
        _add_fields(p, S.ExperimentConfig, registry=reg)
        _add_fields(p, TrainConfig, prefix="mle_", registry=reg)
        _add_fields(p, AdvConfig, prefix="adv_", registry=reg)
        if name == "synthetic-experiment":
            p.add_argument("--out-dir", required=True)
        else:
            p.add_argument("--out", default=None)

    p, reg = sub("train-temp-study", cmd_train_temp_study, "MLE at several training temperatures")
    _corpus_flags(p, "train", "valid", "test", "references")
    _model_flags(p)
    _add_fields(p, TrainConfig, registry=reg, skip=("train_temperature",))
    p.add_argument("--alphas-train", type=_tuple_of(float), default=(0.5, 1.0, 2.0))
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--oracle", default=None)
    p.add_argument("--disc", default=None)
    p.add_argument("--out", default=None)
    return parser, registries


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str], registries: dict) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config", default=None)
    ns, _ = pre.parse_known_args(argv)
    if ns.config and ns.command in registries:
        config = load_config(ns.config)
        sub = parser._subparsers._group_actions[0].choices[ns.command]  # type: ignore[union-attr]
        known = {a.dest: a for a in sub._actions}
        conv = registries[ns.command]
        converted = {}
        for key, value in config.items():
            if key not in known or key in ("config", "help"):
                raise SystemExit(f"{ns.config}: unknown key {key!r} for {ns.command}")
            action = known[key]
            if key in conv:
                value = conv[key](value)
            elif isinstance(action, argparse._StoreTrueAction):
                value = _parse_bool(value)
            elif isinstance(value, str) and action.type is not None:
                value = action.type(value)
            action.required = False
            converted[key] = value
        sub.set_defaults(**converted)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    parser, registries = build_parser()
    args = _apply_config(parser, list(sys.argv[1:] if argv is None else argv), registries)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
