"""BLEU against hand-counted n-gram oracles.

Expected values are written as the arithmetic they came from: clipped
match / total ratios counted by hand, combined with the geometric mean and
brevity penalty.
"""

import math

import pytest

from mlrf.metrics import corpus_bleu


def toks(*sentences):
    return [s.split() for s in sentences]


class TestCorpusBleu:
    def test_identical_corpora_score_100(self):
        hyp = toks("the cat sat on the mat", "a b c d e")
        assert abs(corpus_bleu(hyp, hyp) - 100.0) < 1e-9

    def test_zero_higher_order_matches_score_zero(self):
        # 3-grams: hyp has {the the the, the the cat}, ref has none of them
        hyp = toks("the the the cat")
        ref = toks("the cat sat")
        assert corpus_bleu(hyp, ref) == 0.0

    def test_perfect_prefix_with_brevity_penalty(self):
        # all precisions 1, hyp len 4 vs ref len 6: BP = exp(1 - 6/4)
        hyp = toks("the cat sat on")
        ref = toks("the cat sat on the mat")
        expect = 100.0 * math.exp(1.0 - 6.0 / 4.0)
        assert abs(corpus_bleu(hyp, ref) - expect) < 1e-6

    def test_clipped_counts_without_brevity_penalty(self):
        # hand counts: p1=5/7 (the/cat clipped to 1 each), p2=4/6, p3=3/5,
        # p4=2/4; hyp longer than ref so BP=1
        hyp = toks("the cat the cat sat down now")
        ref = toks("the cat sat down now")
        expect = 100.0 * ((5 / 7) * (4 / 6) * (3 / 5) * (2 / 4)) ** 0.25
        assert abs(corpus_bleu(hyp, ref) - expect) < 1e-6

    def test_corpus_level_pooling_with_short_second_sentence(self):
        # sentence 2 contributes no 4-grams but sentence 1's keeps the
        # corpus totals alive: every precision is 1, BP = exp(1 - 9/7)
        hyp = toks("a b c d", "e f g")
        ref = toks("a b c d", "e f g h i")
        expect = 100.0 * math.exp(1.0 - 9.0 / 7.0)
        assert abs(corpus_bleu(hyp, ref) - expect) < 1e-6

    def test_mixed_corpus_hand_oracle(self):
        # sentence 1: hyp "x y x y" vs ref "x y z w":
        #   1-grams 2/4 (x,y clipped), 2-grams 1/3, 3-grams 0/2, 4-grams 0/1
        # sentence 2: hyp "p q r s t" vs ref "p q r s t":
        #   5/5, 4/4, 3/3, 2/2
        # pooled: p1=7/9, p2=5/7, p3=3/5, p4=2/3; lens 9 vs 9 -> BP=1
        hyp = toks("x y x y", "p q r s t")
        ref = toks("x y z w", "p q r s t")
        expect = 100.0 * ((7 / 9) * (5 / 7) * (3 / 5) * (2 / 3)) ** 0.25
        assert abs(corpus_bleu(hyp, ref) - expect) < 1e-6

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            corpus_bleu(toks("a"), toks("a", "b"))

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            corpus_bleu([], [])
