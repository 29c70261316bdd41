import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tempsweep import model as M
from tempsweep.corpus import EOS, UNK
from tempsweep.decoding import (
    STRATEGIES, DecoderConfig, DecodingError, RejectionExhausted, disc_rejection, gen_rejection, sample,
    stochastic_beam,
)

from conftest import enumerate_fixed_length


def two_token_toy():
    """Vocab of 6 (content ids 4 and 5) whose first conditional puts 2/3 on id 4."""
    p = M.zero_params(6, 1)
    p.blocks["lstm0.b"][:] = [30.0, 0.0, 10.0, 30.0]  # i, f, g, o saturated: h is a constant
    h = M.forward_step(p, M.RnnState.zeros(p), 1)[0].h[0, 0]
    p.blocks["W"][4, 0] = math.log(2) / h
    return p


def peaked_model():
    """One-hot conditionals on id 6: every other probability underflows to exactly 0."""
    p = M.zero_params(8, 1)
    p.blocks["lstm0.b"][:] = [30.0, 0.0, 10.0, 30.0]
    p.blocks["W"][6, 0] = 2000.0
    return p


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(strategy="nucleus"), dict(alpha=-1), dict(beam_size=0),
                                        dict(max_attempts=0), dict(threshold=math.inf),
                                        dict(disc_threshold=1.0), dict(max_len=0),
                                        dict(fixed_len=60)])
    def test_invalid(self, kwargs):
        with pytest.raises(DecodingError):
            DecoderConfig(**kwargs)

    def test_n_must_be_positive(self, small_model):
        with pytest.raises(DecodingError):
            sample(small_model, DecoderConfig(), 0)


class TestAncestral:
    def test_greedy_identical_copies(self, small_model):
        b = sample(small_model, DecoderConfig("greedy", max_len=10), 50)
        assert len(set(b.sentences)) == 1
        a0 = sample(small_model, DecoderConfig("ancestral", alpha=0.0, max_len=10, seed=9), 50)
        assert a0.sentences == b.sentences

    def test_two_token_toy_frequency(self):
        p = two_token_toy()
        np.testing.assert_allclose(
            M.conditional_dist(M.forward_step(p, M.RnnState.zeros(p), 1)[1][[4, 5]], 1.0), [2 / 3, 1 / 3],
            atol=1e-12)
        b = sample(p, DecoderConfig(fixed_len=1, max_len=1, seed=0), 100_000)
        freq = sum(s == (4, EOS) for s in b.sentences) / 100_000
        assert abs(freq - 0.666) < 0.01
        assert set(b.sentences) == {(4, EOS), (5, EOS)}

    def test_same_seed_same_batch(self, small_model):
        cfg = DecoderConfig(alpha=0.8, max_len=9, seed=4)
        a, b = sample(small_model, cfg, 300), sample(small_model, cfg, 300)
        assert a.sentences == b.sentences and np.array_equal(a.loglik, b.loglik)

    def test_prefix_independent_of_n(self, small_model):
        cfg = DecoderConfig(max_len=9, seed=4)
        assert sample(small_model, cfg, 3000).sentences[:40] == sample(small_model, cfg, 40).sentences

    def test_lower_alpha_higher_likelihood(self):
        p = M.init_params(30, 8, seed=6, scale=1.0)
        runs = {a: sample(p, DecoderConfig(alpha=a, max_len=12, seed=2), 10_000).loglik for a in (1.0, 0.5)}
        se = math.sqrt(sum(v.var() / v.size for v in runs.values()))
        assert runs[0.5].mean() >= runs[1.0].mean() - 2 * se

    def test_loglik_matches_teacher_forcing(self, small_model):
        b = sample(small_model, DecoderConfig(alpha=0.7, max_len=8, seed=1), 50)
        np.testing.assert_allclose(b.loglik, -M.sentence_nlls(small_model, b.sentences), atol=1e-12)

    def test_no_reserved_ids(self, small_model):
        b = sample(small_model, DecoderConfig(alpha=3.0, max_len=8, seed=1), 500)
        assert all(t >= 4 for s in b.sentences for t in s[:-1])
        b = sample(small_model, DecoderConfig(alpha=3.0, max_len=8, seed=1, allow_unk=True), 2000)
        assert any(UNK in s for s in b.sentences)


class TestLengthCap:
    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from([s for s in STRATEGIES if s != "disc_rejection"]), st.integers(1, 6),
           st.integers(1, 3), st.integers(0, 50))
    def test_every_strategy_respects_max_len(self, strategy, max_len, k, seed):
        p = M.init_params(9, 4, seed=seed, scale=0.3)
        cfg = DecoderConfig(strategy, beam_size=k, max_len=max_len, seed=seed)
        b = sample(p, cfg, 20)
        assert all(1 <= len(s) - 1 <= max_len and s[-1] == EOS for s in b.sentences)
        assert np.isfinite(b.loglik).all() and b.attempts_used >= len(b.sentences)

    def test_fixed_len(self, small_model):
        b = sample(small_model, DecoderConfig(fixed_len=5, max_len=5, seed=1), 200)
        assert {len(s) for s in b.sentences} == {6}


class TestBeam:
    def test_k1_matches_ancestral(self):
        p = M.init_params(20, 8, seed=3, scale=1.0)
        anc = sample(p, DecoderConfig(max_len=10, seed=1), 10_000).loglik
        bm = sample(p, DecoderConfig("stochastic_beam", beam_size=1, max_len=10, seed=2), 10_000).loglik
        se = math.sqrt(anc.var() / anc.size + bm.var() / bm.size)
        assert abs(anc.mean() - bm.mean()) < 2 * se

    def test_deterministic_model_same_for_every_k(self):
        p = peaked_model()
        assert np.count_nonzero(M.conditional_dist(M.forward_step(p, M.RnnState.zeros(p), 1)[1], 1.0)) == 1
        outs = {k: set(sample(p, DecoderConfig("stochastic_beam", beam_size=k, max_len=6, seed=k), 30).sentences)
                for k in (1, 2, 3)}
        assert all(o == {(6,) * 6 + (EOS,)} for o in outs.values())

    def test_full_width_beam_on_enumerable_toy(self):
        p = M.init_params(7, 6, seed=0, scale=1.0)
        table = enumerate_fixed_length(p, 2)
        b = sample(p, DecoderConfig("stochastic_beam", beam_size=9, fixed_len=2, max_len=2, seed=1), 18_000)
        counts = Counter(b.sentences)
        assert set(counts) == {s for s, _, _ in table}
        # all 9 sequences survive, so the uniform pick gives each 1/9
        assert all(abs(c / 18_000 - 1 / 9) < 0.01 for c in counts.values())

    def test_narrow_beam_favours_most_likely(self):
        p = M.init_params(7, 6, seed=0, scale=1.0)
        table = enumerate_fixed_length(p, 2)
        best, p_best, _ = max(table, key=lambda r: r[1])
        b = sample(p, DecoderConfig("stochastic_beam", beam_size=2, fixed_len=2, max_len=2, seed=1), 20_000)
        assert Counter(b.sentences)[best] / 20_000 > p_best + 0.02

    def test_single_sentence_api(self, small_model):
        s = stochastic_beam(small_model, 3, 1.0, 8, seed=5)
        batch = sample(small_model, DecoderConfig("stochastic_beam", beam_size=3, max_len=8, seed=5), 1)
        assert s == batch.sentences[0]

    def test_local_beam_deterministic(self, small_model):
        b = sample(small_model, DecoderConfig("local_beam", beam_size=3, max_len=8, seed=5), 20)
        assert len(set(b.sentences)) == 1


class TestGenRejection:
    def test_vacuous_threshold_is_ancestral(self, small_model):
        rej = sample(small_model, DecoderConfig("gen_rejection", threshold=-1e9, max_len=8, seed=3), 200)
        anc = sample(small_model, DecoderConfig(max_len=8, seed=3), 200)
        assert rej.sentences == anc.sentences and rej.attempts_used == 200

    def test_impossible_threshold(self, small_model):
        with pytest.raises(RejectionExhausted) as info:
            gen_rejection(small_model, 1.0, 1.0, max_attempts=500, seed=0, max_len=8)
        assert info.value.acceptance_rate == 0.0 and info.value.attempts == 500

    def test_enumerated_acceptance(self):
        p = M.init_params(7, 8, seed=3, scale=1.0)
        table = enumerate_fixed_length(p, 3)
        assert abs(sum(r[1] for r in table) - 1.0) < 1e-12
        tau = float(np.median([r[2] for r in table]))
        exact = sum(pr for _, pr, ll in table if ll >= tau)
        b = sample(p, DecoderConfig("gen_rejection", threshold=tau, fixed_len=3, max_len=3, seed=2), 3000)
        assert abs(b.acceptance_rate - exact) < 0.02

    def test_higher_threshold_better_and_costlier(self):
        p = M.init_params(20, 8, seed=3, scale=1.0)
        lo = sample(p, DecoderConfig("gen_rejection", threshold=-3.0, max_len=10, seed=1), 2000)
        hi = sample(p, DecoderConfig("gen_rejection", threshold=-2.5, max_len=10, seed=1), 2000)
        assert hi.loglik.mean() >= lo.loglik.mean()
        assert hi.attempts_used >= lo.attempts_used
        assert (hi.loglik >= -2.5).all()

    def test_single_sentence_api(self, small_model):
        s, used = gen_rejection(small_model, -2.6, 1.0, 10_000, seed=7, max_len=8)
        assert M.sequence_nll(small_model, s) <= 2.6 and used >= 1


class TestDiscRejection:
    def test_tiny_threshold_accepts_all(self, small_model):
        d = M.init_discriminator(12, 4, seed=2)
        b = sample(small_model, DecoderConfig("disc_rejection", disc_threshold=1e-12, max_len=8), 300, disc=d)
        assert b.acceptance_rate == 1.0

    def test_constant_discriminator_never_accepts(self, small_model):
        d = M.zero_params(12, 4, kind="discriminator")
        with pytest.raises(RejectionExhausted):
            disc_rejection(small_model, d, 0.6, max_attempts=300, seed=0, max_len=8)

    def test_needs_discriminator(self, small_model):
        with pytest.raises(DecodingError):
            sample(small_model, DecoderConfig("disc_rejection"), 5)

    def test_two_pass_acceptance(self, small_model):
        d = M.init_discriminator(12, 4, seed=2, scale=1.0)
        free = sample(small_model, DecoderConfig(max_len=8, seed=11), 10_000)
        scores = M.discriminate_batch(d, free.sentences)
        tau = float(np.quantile(scores, 0.4))
        expected = float(np.mean(scores >= tau))
        b = sample(small_model, DecoderConfig("disc_rejection", disc_threshold=tau, max_len=8, seed=3), 3000,
                   disc=d)
        assert abs(b.acceptance_rate - expected) < 0.02
        assert (M.discriminate_batch(d, b.sentences) >= tau).all()
