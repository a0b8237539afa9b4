"""Native ROUGE family against hand-computed counts."""

from __future__ import annotations

import json
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rstpeft.errors import DataError
from rstpeft.metrics import (
    RougeScore,
    evaluate_corpus,
    rouge_l,
    rouge_lsum,
    rouge_n,
    run_external_metric,
    score_pair,
    sentences,
    tokenize,
)

# Hand-computed oracle fixtures.  Each entry: candidate text, reference
# text, then per-metric (hits, candidate_total, reference_total) counts.
# Newlines mark sentence boundaries (only rougeLsum cares).
ORACLE_PAIRS = [
    # candidate, reference, r1, r2, rL, rLsum
    ("the cat sat", "the cat", (2, 3, 2), (1, 2, 1), (2, 3, 2), (2, 3, 2)),
    ("a b c d e", "a b c d e", (5, 5, 5), (4, 4, 4), (5, 5, 5), (5, 5, 5)),
    ("x y z", "p q r", (0, 3, 3), (0, 2, 2), (0, 3, 3), (0, 3, 3)),
    ("a b c d", "a c d", (3, 4, 3), (1, 3, 2), (3, 4, 3), (3, 4, 3)),
    ("a a b", "a b b", (2, 3, 3), (1, 2, 2), (2, 3, 3), (2, 3, 3)),
    ("", "a b", (0, 0, 2), (0, 0, 1), (0, 0, 2), (0, 0, 2)),
    ("a b", "", (0, 2, 0), (0, 1, 0), (0, 2, 0), (0, 2, 0)),
    ("", "", (0, 0, 0), (0, 0, 0), (0, 0, 0), (0, 0, 0)),
    ("a", "a", (1, 1, 1), (0, 0, 0), (1, 1, 1), (1, 1, 1)),
    ("a", "b", (0, 1, 1), (0, 0, 0), (0, 1, 1), (0, 1, 1)),
    ("a b\nc d", "a b\nx y", (2, 4, 4), (1, 3, 3), (2, 4, 4), (2, 4, 4)),
    ("a b\nb c", "a b c", (3, 4, 3), (2, 3, 2), (3, 4, 3), (3, 4, 3)),
    ("a\na", "a a\na", (2, 2, 3), (1, 1, 2), (2, 2, 3), (2, 2, 3)),
    ("a", "a\na", (1, 1, 2), (0, 0, 1), (1, 1, 2), (1, 1, 2)),
    ("a b a b", "a b a", (3, 4, 3), (2, 3, 2), (3, 4, 3), (3, 4, 3)),
    ("c b a", "a b c", (3, 3, 3), (0, 2, 2), (1, 3, 3), (1, 3, 3)),
    ("the quick brown fox", "the quick fox", (3, 4, 3), (1, 3, 2), (3, 4, 3), (3, 4, 3)),
    ("The CAT", "the cat", (2, 2, 2), (1, 1, 1), (2, 2, 2), (2, 2, 2)),
    ("u v w x", "u v w", (3, 4, 3), (2, 3, 2), (3, 4, 3), (3, 4, 3)),
    ("m n\no p", "m n o p", (4, 4, 4), (3, 3, 3), (4, 4, 4), (4, 4, 4)),
]


def expected(counts):
    return RougeScore.from_counts(*counts)


class TestOracleFixtures:
    @pytest.mark.parametrize("cand,ref,r1,r2,rl,rlsum", ORACLE_PAIRS)
    def test_all_metrics_match_hand_counts(self, cand, ref, r1, r2, rl, rlsum):
        scores = score_pair(cand, ref)
        assert scores["rouge1"] == expected(r1)
        assert scores["rouge2"] == expected(r2)
        assert scores["rougeL"] == expected(rl)
        assert scores["rougeLsum"] == expected(rlsum)

    def test_spec_unigram_example(self):
        s = rouge_n(tokenize("the cat sat"), tokenize("the cat"), 1)
        assert (s.precision, s.recall, s.f1) == (2 / 3, 1.0, 0.8)

    def test_spec_lcs_example(self):
        s = rouge_l(tokenize("a b c d"), tokenize("a c d"))
        assert (s.precision, s.recall, s.f1) == (0.75, 1.0, 6 / 7)

    def test_spec_lsum_example(self):
        s = rouge_lsum(sentences("a b\nc d"), sentences("a b\nx y"))
        assert (s.precision, s.recall, s.f1) == (0.5, 0.5, 0.5)

    def test_rouge3(self):
        s = rouge_n(tokenize("a b c d"), tokenize("a b c"), 3)
        assert s == expected((1, 2, 1))


class TestProperties:
    def test_identity_scores_one(self):
        for text in ("a", "a b", "x y z w"):
            toks = tokenize(text)
            for n in (1, 2):
                if len(toks) >= n:
                    assert rouge_n(toks, toks, n).f1 == 1.0
            assert rouge_l(toks, toks).f1 == 1.0

    def test_lsum_equals_l_on_single_sentences(self):
        for cand, ref in (("a b c d", "a c d"), ("p q", "q p"), ("s t u", "s t u")):
            lsum = rouge_lsum(sentences(cand), sentences(ref))
            l = rouge_l(tokenize(cand), tokenize(ref))
            assert lsum == l

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.sampled_from("abcde"), max_size=12),
        st.lists(st.sampled_from("abcde"), max_size=12),
        st.integers(min_value=1, max_value=3),
    )
    def test_bounds_and_f1_relation(self, cand, ref, n):
        for s in (rouge_n(cand, ref, n), rouge_l(cand, ref)):
            assert 0.0 <= s.precision <= 1.0
            assert 0.0 <= s.recall <= 1.0
            assert 0.0 <= s.f1 <= max(s.precision, s.recall) + 1e-12

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(st.lists(st.sampled_from("abc"), max_size=5), max_size=4),
        st.lists(st.lists(st.sampled_from("abc"), max_size=5), max_size=4),
    )
    def test_lsum_bounded(self, cands, refs):
        s = rouge_lsum(cands, refs)
        assert 0.0 <= s.precision <= 1.0
        assert 0.0 <= s.recall <= 1.0
        assert 0.0 <= s.f1 <= 1.0


class TestCorpus:
    def test_perfect_corpus(self):
        report = evaluate_corpus([("a b", "a b"), ("x y z", "x y z")])
        assert all(report.means[m].f1 == 1.0 for m in ("rouge1", "rouge2", "rougeL", "rougeLsum"))

    def test_mean_is_arithmetic(self):
        report = evaluate_corpus([("a b", "a b"), ("q", "z")])
        assert report.means["rouge1"].f1 == 0.5
        assert report.doc_count == 2

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            evaluate_corpus([])

    def test_report_json_schema(self):
        payload = evaluate_corpus([("a", "a")]).to_json()
        assert payload["version"] == 1
        assert set(payload["corpus"]) == {"rouge1", "rouge2", "rougeL", "rougeLsum"}
        assert payload["doc_count"] == 1


class TestExternalMetricHook:
    def test_plugin_round_trip(self):
        plugin = (
            "import json,sys; d=json.load(sys.stdin); "
            "print(json.dumps({'n_pairs': float(len(d['pairs']))}))"
        )
        out = run_external_metric([sys.executable, "-c", plugin], [("a", "b"), ("c", "d")])
        assert out == {"n_pairs": 2.0}

    def test_plugin_failure_raises(self):
        with pytest.raises(DataError, match="plugin"):
            run_external_metric([sys.executable, "-c", "import sys; sys.exit(3)"], [("a", "b")])
