import math
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudoq.errors import ParseError, ValidationError
from pseudoq.evalkit import (
    JudgmentWarning,
    Qrels,
    evaluate,
    mrr_at_k,
    ndcg_at_k,
    parse_metric,
    read_qrels,
    read_run,
    recall_at_k,
    topk_accuracy,
    write_qrels,
    write_run,
)
from pseudoq.index import RankedEntry, RankedList


def ranked(qid, doc_ids):
    return RankedList(qid, [RankedEntry(d, float(len(doc_ids) - i), i + 1) for i, d in enumerate(doc_ids)])


class TestMRR:
    def test_rank_three(self):
        assert mrr_at_k(ranked("q", ["a", "b", "rel", "c"]), Qrels({("q", "rel"): 1}), 10) == pytest.approx(1 / 3)

    def test_miss(self):
        assert mrr_at_k(ranked("q", ["a", "b", "rel"]), Qrels({("q", "rel"): 1}), 2) == 0.0

    def test_first(self):
        assert mrr_at_k(ranked("q", ["rel"]), Qrels({("q", "rel"): 2}), 10) == 1.0

    def test_unjudged_query_warns(self):
        with pytest.warns(JudgmentWarning):
            assert mrr_at_k(ranked("other", ["x"]), Qrels({("q", "x"): 1}), 10) == 0.0

    def test_zero_grade_is_not_relevant(self):
        qrels = Qrels({("q", "a"): 0, ("q", "b"): 1})
        assert mrr_at_k(ranked("q", ["a", "b"]), qrels, 10) == 0.5


class TestRecall:
    qrels = Qrels({("q", "r1"): 1, ("q", "r2"): 1})

    def test_all(self):
        assert recall_at_k(ranked("q", ["r2", "x", "r1"]), self.qrels, 3) == 1.0

    def test_half(self):
        assert recall_at_k(ranked("q", ["r2", "x", "r1"]), self.qrels, 2) == 0.5

    def test_none(self):
        assert recall_at_k(ranked("q", ["x"]), self.qrels, 5) == 0.0

    def test_undefined(self):
        with pytest.warns(JudgmentWarning):
            assert recall_at_k(ranked("q", ["x"]), Qrels({("q", "x"): 0}), 5) is None


class TestNDCG:
    def test_ideal_ordering(self):
        qrels = Qrels({("q", "a"): 3, ("q", "b"): 2, ("q", "c"): 1})
        assert ndcg_at_k(ranked("q", ["a", "b", "c", "z"]), qrels, 10) == 1.0

    def test_rank_two(self):
        value = ndcg_at_k(ranked("q", ["x", "rel"]), Qrels({("q", "rel"): 1}), 10)
        assert abs(value - 1 / math.log2(3)) <= 1e-6
        assert round(value, 4) == 0.6309

    def test_beyond_k(self):
        assert ndcg_at_k(ranked("q", ["x", "y", "rel"]), Qrels({("q", "rel"): 1}), 2) == 0.0

    def test_graded_gain(self):
        qrels = Qrels({("q", "a"): 1, ("q", "b"): 2})
        got = ndcg_at_k(ranked("q", ["a", "b"]), qrels, 2)
        ideal = 3 + 1 / math.log2(3)
        assert got == pytest.approx((1 + 3 / math.log2(3)) / ideal)

    def test_not_monotone_in_k(self):
        # a grade-3 document ranked low raises the ideal DCG faster than the run's DCG
        qrels = Qrels({("q", "a"): 1, ("q", "b"): 3})
        rl = ranked("q", ["a", "x", "b"])
        assert ndcg_at_k(rl, qrels, 2) < ndcg_at_k(rl, qrels, 1)

    def test_all_zero_warns(self):
        with pytest.warns(JudgmentWarning):
            assert ndcg_at_k(ranked("q", ["a"]), Qrels({("q", "a"): 0}), 5) == 0.0


class TestTopK:
    def test_all_hit(self):
        qrels = Qrels({("q1", "a"): 1, ("q2", "b"): 1})
        assert topk_accuracy([ranked("q1", ["a"]), ranked("q2", ["b"])], qrels, 20) == 1.0

    def test_half(self):
        qrels = Qrels({("q1", "a"): 1, ("q2", "b"): 1})
        assert topk_accuracy([ranked("q1", ["a"]), ranked("q2", ["x", "b"])], qrels, 1) == 0.5

    def test_none(self):
        qrels = Qrels({("q1", "a"): 1})
        assert topk_accuracy([ranked("q1", ["x", "y", "a"])], qrels, 2) == 0.0

    def test_empty(self):
        with pytest.raises(ValidationError):
            topk_accuracy([], Qrels(), 5)


class TestQrels:
    def test_rejects_negative_and_duplicates(self):
        qrels = Qrels()
        qrels.add("q", "d", 1)
        with pytest.raises(ValidationError):
            qrels.add("q", "d", 2)
        with pytest.raises(ValidationError):
            qrels.add("q", "e", -1)

    def test_parse_metric(self):
        assert parse_metric("MRR@10") == ("mrr", 10)
        for bad in ("mrr", "map@10", "ndcg@0", "top@x"):
            with pytest.raises(ValidationError):
                parse_metric(bad)


class TestEvaluate:
    def test_ideal_run_scores_one(self):
        qrels = Qrels({("q1", "a"): 2, ("q1", "b"): 1, ("q2", "c"): 1})
        runs = [ranked("q1", ["a", "b", "x"]), ranked("q2", ["c"])]
        report = evaluate(runs, qrels)
        assert all(v == 1.0 for v in report.means.values())

    def test_exclusions(self):
        qrels = Qrels({("q1", "a"): 1, ("q2", "b"): 0})
        runs = [ranked("q1", ["a"]), ranked("q2", ["b"]), ranked("q3", ["c"])]
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            report = evaluate(runs, qrels, ["mrr@10", "recall@10", "ndcg@10"])
        assert report.excluded == {"mrr@10": 0, "recall@10": 2, "ndcg@10": 2}
        assert report.means["recall@10"] == 1.0 and report.means["mrr@10"] == pytest.approx(1 / 3)
        assert report.unjudged_queries == ["q3"]

    @settings(max_examples=100, deadline=None)
    @given(
        order=st.permutations(list("abcdefgh")),
        grades=st.dictionaries(st.sampled_from(list("abcdefgh")), st.integers(0, 3), min_size=1),
    )
    def test_bounds_and_monotone(self, order, grades):
        qrels = Qrels({("q", d): g for d, g in grades.items()})
        rl = ranked("q", order)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", JudgmentWarning)
            for fn in (mrr_at_k, ndcg_at_k, recall_at_k):
                vals = [fn(rl, qrels, k) for k in range(1, 10)]
                if vals[0] is None:
                    continue
                assert all(0.0 <= v <= 1.0 + 1e-12 for v in vals)
                if fn is not ndcg_at_k:
                    assert vals == sorted(vals)
            if any(g > 0 for g in grades.values()):
                ideal = sorted(order, key=lambda d: -grades.get(d, 0))
                assert ndcg_at_k(ranked("q", ideal), qrels, 8) == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(order=st.permutations(list("wxyz")))
    def test_mrr_ignores_irrelevant_tail(self, order):
        qrels = Qrels({("q", "a"): 1})
        assert mrr_at_k(ranked("q", ["b", "a", *order]), qrels, 10) == 0.5


class TestFiles:
    def test_qrels_line(self, tmp_path):
        path = tmp_path / "q.txt"
        path.write_text("q1 0 d7 1\n\n")
        assert read_qrels(path)[("q1", "d7")] == 1

    def test_qrels_round_trip(self, tmp_path):
        qrels = Qrels({("q1", "d1"): 1, ("q1", "d2"): 0, ("q2", "d1"): 3})
        write_qrels(qrels, tmp_path / "q.txt")
        assert read_qrels(tmp_path / "q.txt") == qrels

    def test_qrels_parse_error(self, tmp_path):
        path = tmp_path / "q.txt"
        path.write_text("q1 0 d7 1\nq1 0 d8\n")
        with pytest.raises(ParseError, match=":2:") as exc:
            read_qrels(path)
        assert exc.value.lineno == 2

    def test_run_round_trip(self, tmp_path):
        runs = [
            RankedList("q1", [RankedEntry("d1", 0.1 + 0.2, 1), RankedEntry("d2", -1e-300, 2)]),
            RankedList("q2", [RankedEntry("d3", 1.0 / 3.0, 1)]),
        ]
        path = tmp_path / "run.txt"
        write_run(runs, path, tag="t1")
        assert read_run(path) == runs
        assert path.read_text().splitlines()[0].split() == ["q1", "Q0", "d1", "1", repr(0.1 + 0.2), "t1"]

    def test_run_parse_error(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text("q1 Q0 d1 1 0.5 t\nq1 Q0 d2\n")
        with pytest.raises(ParseError, match=":2:"):
            read_run(path)

    def test_bad_tag(self, tmp_path):
        with pytest.raises(ValidationError):
            write_run([], tmp_path / "r", tag="two words")
