"""Brute-force BLEU written straight from the definition, used as a differential oracle."""
import math
from collections import Counter

EPSILON = 1e-9


def brute_bleu(hyp, refs, n, eps=EPSILON):
    """Direct transcription of sentence BLEU: no index, no caching."""
    hyp = list(hyp[:-1])
    refs = [list(r[:-1]) for r in refs]
    logs = []
    for m in range(1, n + 1):
        grams = [tuple(hyp[i:i + m]) for i in range(len(hyp) - m + 1)]
        if not grams:
            logs.append(math.log(eps))
            continue
        clipped = 0
        for g, cnt in Counter(grams).items():
            best = max(sum(1 for i in range(len(r) - m + 1) if tuple(r[i:i + m]) == g) for r in refs)
            clipped += min(cnt, best)
        logs.append(math.log(clipped / len(grams) if clipped else eps))
    c = len(hyp)
    r = min((len(x) for x in refs), key=lambda L: (abs(L - c), L))
    return math.exp(min(0.0, 1 - r / c)) * math.exp(sum(logs) / n)


def brute_bleu_corpus(hyps, refs, n):
    return math.fsum(brute_bleu(h, refs, n) for h in hyps) / len(hyps)


def brute_self_bleu(sents, n):
    return math.fsum(brute_bleu(s, sents[:i] + sents[i + 1:], n) for i, s in enumerate(sents)) / len(sents)
