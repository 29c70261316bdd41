"""A tiny end-to-end run of every CLI subcommand, shared by the CLI and acceptance tests."""
from pathlib import Path

from tempsweep.cli import main

SUBCOMMANDS = ("oracle-gen", "train", "adv-train", "sample", "eval", "sweep", "auc", "bench", "grad-check",
               "synthetic-experiment", "entropy-trace", "train-temp-study")

TINY_EXPERIMENT = ["--vocab-size", "16", "--oracle-hidden", "8", "--seq-len", "6", "--n-train", "200",
                   "--n-valid", "64", "--n-test", "64", "--student-hidden", "8", "--mle-max-epochs", "2",
                   "--adv-adv-steps", "4", "--adv-eval-every", "2", "--adv-batch-size", "8",
                   "--adv-rollout-count", "1", "--adv-disc-pretrain-steps", "2", "--adv-disc-hidden-dim", "6",
                   "--samples-per-point", "100"]


def run_pipeline(root: Path) -> dict[str, str]:
    """Run every subcommand under ``root`` with timing disabled; returns CSV name -> text."""
    d = Path(root)
    data = d / "data"
    corp = ["--vocab", str(data / "vocab.txt"), "--corpus-max-len", "6"]
    tv = ["--train", str(data / "train.txt"), "--valid", str(data / "valid.txt")]
    ref = ["--test", str(data / "test.txt"), "--references", str(data / "test.txt")]
    nt = ["--no-timing"]
    runs = [
        ["oracle-gen", "--out-dir", str(data), "--vocab-size", "16", "--oracle-hidden", "8", "--seq-len", "6",
         "--n-train", "300", "--n-valid", "100", "--n-test", "100", "--seed", "1"],
        ["train", *corp, *tv, "--hidden-dim", "8", "--max-epochs", "2", "--out", str(d / "mle.bin"),
         "--trace", str(d / "train_trace.csv"), *nt],
        ["adv-train", *corp, *tv, "--model", str(d / "mle.bin"), "--adv-steps", "4", "--eval-every", "2",
         "--batch-size", "8", "--rollout-count", "1", "--disc-pretrain-steps", "2", "--disc-hidden-dim", "6",
         "--max-len", "6", "--fixed-len", "6", "--out", str(d / "gan.bin"), "--disc-out", str(d / "disc.bin"),
         "--trace", str(d / "adv_trace.csv"), *nt],
        ["sample", "--vocab", str(data / "vocab.txt"), "--model", str(d / "mle.bin"), "--n", "200",
         "--alpha", "0.7", "--max-len", "6", "--seed", "3", "--out", str(d / "gen.txt"),
         "--stats", str(d / "sample_stats.csv"), *nt],
        ["eval", *corp, "--generated", str(d / "gen.txt"), "--references", str(data / "test.txt"),
         "--train", str(data / "train.txt"), "--model", str(data / "oracle.bin"),
         "--metrics", "bleu,self_bleu,nll,unigram_nll", "--n", "3", "--out", str(d / "eval.csv"), *nt],
    ]
    for name, model in (("mle", "mle.bin"), ("gan", "gan.bin")):
        runs.append(["sweep", *corp, *tv, *ref, "--model", str(d / model), "--oracle", str(data / "oracle.bin"),
                     "--values", "1.0,0.5,0.01", "--metric-pair", "nll", "--samples-per-point", "100",
                     "--seeds", "0,1", "--max-len", "6", "--fixed-len", "6", "--out", str(d / f"curve_{name}.csv"),
                     *nt])
    runs += [
        ["auc", str(d / "curve_mle.csv"), str(d / "curve_gan.csv"), "--window-exclude", "", "--out",
         str(d / "auc.csv"), *nt],
        ["bench", "--model", str(d / "mle.bin"), "--n", "100", "--max-len", "6", "--decoders",
         "strategy=ancestral,alpha=1.0", "strategy=stochastic_beam,beam_size=2",
         "strategy=gen_rejection,threshold=-2.75", "--out", str(d / "bench.csv"), *nt],
        ["grad-check", "--out", str(d / "grad.csv"), *nt],
        ["synthetic-experiment", *TINY_EXPERIMENT, "--alphas", "1.0,0.8,0.6,0.4,0.2", "--table-alphas", "1.0,0.4",
         "--out-dir", str(d / "experiment"), *nt],
        ["entropy-trace", *TINY_EXPERIMENT, "--adv-pretrain-epochs", "1", "--out", str(d / "entropy.csv"), *nt],
        ["train-temp-study", *corp, *tv, *ref, "--hidden-dim", "8", "--max-epochs", "2", "--alphas-train",
         "1.0,2.0", "--samples", "100", "--n", "3", "--out", str(d / "temp_study.csv"), *nt],
    ]
    for argv in runs:
        assert main(argv) == 0, argv
    return {str(p.relative_to(d)): p.read_text() for p in sorted(d.rglob("*.csv"))}
