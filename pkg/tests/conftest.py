import numpy as np
import pytest

from tempsweep import model as M
from tempsweep.corpus import EOS, Corpus, Vocab


def random_sentences(rng, n, vocab_size, max_len):
    return [tuple(int(t) for t in rng.integers(4, vocab_size, rng.integers(1, max_len + 1))) + (EOS,)
            for _ in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return M.init_params(12, 6, seed=3, scale=0.5)


@pytest.fixture
def small_corpus():
    vocab = Vocab.synthetic(12)
    sents = random_sentences(np.random.default_rng(5), 40, 12, 6)
    return Corpus(tuple(sents), vocab)


def enumerate_fixed_length(params, length):
    """Every content sequence of ``length`` tokens with its decoder probability and
    per-token alpha=1 log-likelihood, computed by teacher forcing.

    The decoder never emits reserved ids and cannot stop early, so the sampling
    probability renormalises each step over the content tokens.
    """
    from itertools import product
    content = range(4, params.vocab_size)
    out = []
    for seq in product(content, repeat=length):
        sent = seq + (EOS,)
        lp = M.token_logprobs(params, [sent])[0]
        prob = 1.0
        for t in range(length):
            alts = [M.token_logprobs(params, [seq[:t] + (j, EOS)])[0][t] for j in content]
            prob *= np.exp(lp[t]) / np.exp(alts).sum()
        out.append((sent, prob, float(lp.mean())))
    return out
