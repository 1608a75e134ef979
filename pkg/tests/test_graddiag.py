import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pseudoq.cluster import PseudoQuerySet
from pseudoq.embedstub import embed_text
from pseudoq.errors import ValidationError
from pseudoq.graddiag import (
    DIAGNOSTICS_COLUMNS,
    BatchInstance,
    Strategy,
    batch_loss,
    central_differences,
    diagnose_strategies,
    finite_difference_check,
    grad_loss_wrt_positive_centroids,
    grad_score_wrt_centroids,
    in_batch_negatives,
    max_relative_error,
    positive_probability,
    r_weights,
    r_weights_simplified,
    representation,
    run_diagnostics,
    write_diagnostics_csv,
)
from pseudoq.score import QueryEmbedding, pool_query

HAND_Q = np.array([1.0, 0.0])
HAND_C = np.array([[2.0, 0.0], [0.0, 2.0]])
A0 = math.exp(2.0) / (math.exp(2.0) + 1.0)
R_HAND = np.array([A0 * (1 + 2 - 2 * A0), (1 - A0) * (1 - 2 * A0)])  # y = 2*a0


def doc(C, doc_id="d"):
    return PseudoQuerySet(doc_id, np.asarray(C, dtype=np.float64))


def q(v, qid="q"):
    return QueryEmbedding(qid, np.asarray(v, dtype=np.float64))


def instance_with_scores(y_pos, y_negs):
    # a k=1 document [y, 0] scores exactly y against e_q=(1, 0)
    return BatchInstance(q(HAND_Q), doc([[y_pos, 0.0]]), [doc([[y, 0.0]], f"n{i}") for i, y in enumerate(y_negs)])


@st.composite
def random_instance(draw):
    h = draw(st.integers(1, 32))
    k = draw(st.integers(1, 8))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, size=h), rng.uniform(-1, 1, size=(k, h))


class TestLoss:
    def test_tie_is_ln2(self):
        assert batch_loss(instance_with_scores(0.7, [0.7])) == pytest.approx(math.log(2), abs=1e-15)

    def test_dominant_positive(self):
        assert batch_loss(instance_with_scores(50.0, [0.0])) < 1e-20

    def test_hand_value(self):
        expect = -math.log(math.e / (math.e + 1 + math.exp(0.5)))
        loss = batch_loss(instance_with_scores(1.0, [0.0, 0.5]))
        assert loss == pytest.approx(expect, abs=1e-12)
        assert round(loss, 4) == 0.6803

    def test_equal_scores(self):
        assert batch_loss(instance_with_scores(0.3, [0.3] * 4)) == pytest.approx(math.log(5), abs=1e-12)

    def test_needs_negatives(self):
        with pytest.raises(ValidationError):
            BatchInstance(q(HAND_Q), doc(HAND_C), [])

    def test_dim_mismatch(self):
        with pytest.raises(ValidationError):
            BatchInstance(q(HAND_Q), doc(HAND_C), [doc([[1.0, 2.0, 3.0]])])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
    def test_non_negative(self, ys):
        assert batch_loss(instance_with_scores(ys[0], ys[1:])) >= 0.0


class TestRWeights:
    def test_k1(self):
        assert r_weights(HAND_Q, HAND_C[:1]).values.tolist() == [1.0]

    def test_equal_logits(self):
        r = r_weights(np.ones(2), np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]))
        assert np.allclose(r.values, 1 / 3) and r.var == pytest.approx(0.0, abs=1e-30)

    def test_hand_example(self):
        r = r_weights(HAND_Q, HAND_C).values
        np.testing.assert_allclose(r, R_HAND, atol=1e-12)
        assert np.round(r, 4).tolist() == [1.0908, -0.0908]
        assert r.sum() == pytest.approx(1.0, abs=1e-12)

    def test_max_and_population_variance(self):
        r = r_weights(HAND_Q, HAND_C)
        assert r.max == pytest.approx(R_HAND[0])
        assert r.var == pytest.approx(np.var(R_HAND))

    @settings(max_examples=300, deadline=None)
    @given(random_instance())
    def test_sum_to_one_and_forms_agree(self, inst):
        e_q, C = inst
        r = r_weights(e_q, C).values
        assert abs(r.sum() - 1.0) <= 1e-9
        np.testing.assert_allclose(r, r_weights_simplified(e_q, C), rtol=0, atol=1e-9)


class TestGradients:
    def test_k1_is_query(self, rng):
        e_q = rng.normal(size=5)
        assert np.allclose(grad_score_wrt_centroids(e_q, rng.normal(size=(1, 5))), e_q[None])

    def test_hand_example(self):
        g = grad_score_wrt_centroids(HAND_Q, HAND_C)
        np.testing.assert_allclose(g, np.outer(R_HAND, HAND_Q), atol=1e-12)

    def test_zero_query(self, rng):
        assert not grad_score_wrt_centroids(np.zeros(3), rng.normal(size=(4, 3))).any()

    def test_loss_gradient_vanishes_when_converged(self):
        g = grad_loss_wrt_positive_centroids(instance_with_scores(50.0, [0.0]))
        assert np.abs(g).max() < 1e-20

    def test_loss_gradient_tie(self):
        inst = instance_with_scores(0.4, [0.4])
        assert positive_probability(inst) == pytest.approx(0.5)
        np.testing.assert_allclose(grad_loss_wrt_positive_centroids(inst), [-0.5 * HAND_Q], atol=1e-15)

    def test_loss_gradient_zero_query(self, rng):
        inst = BatchInstance(q(np.zeros(3)), doc(rng.normal(size=(2, 3))), [doc(rng.normal(size=(3, 3)))])
        assert not grad_loss_wrt_positive_centroids(inst).any()

    @settings(max_examples=60, deadline=None)
    @given(random_instance(), st.integers(0, 2**31))
    def test_loss_gradient_matches_fd(self, inst, seed):
        e_q, C = inst
        rng = np.random.default_rng(seed)
        negs = [doc(rng.uniform(-1, 1, size=(int(rng.integers(1, 5)), C.shape[1])), f"n{i}") for i in range(3)]
        base = BatchInstance(q(e_q), doc(C), negs)

        def loss(c):
            return batch_loss(BatchInstance(base.query, doc(c), negs))

        numeric = central_differences(loss, C, 1e-3, order=4)
        assert max_relative_error(grad_loss_wrt_positive_centroids(base), numeric) <= 1e-5


class TestFiniteDifferences:
    def test_k1_linear(self, rng):
        # y is linear in c_1, so the widest allowed step leaves only rounding error
        for _ in range(50):
            h = int(rng.integers(1, 33))
            err = finite_difference_check(rng.uniform(-1, 1, h), rng.uniform(-1, 1, (1, h)), epsilon=1e-2)
            assert err <= 1e-10

    def test_well_conditioned(self):
        # logits spread out and every gradient entry far from zero
        e_q = np.array([0.9, -0.7, 0.8])
        C = np.array([[0.8, -0.6, 0.9], [0.2, 0.1, -0.3], [-0.5, 0.4, 0.6]])
        assert np.abs(grad_score_wrt_centroids(e_q, C)).min() > 1e-2
        assert finite_difference_check(e_q, C, epsilon=1e-6) <= 1e-6

    @pytest.mark.parametrize("eps", [0.0, -1e-6, 0.02])
    def test_epsilon_range(self, eps):
        with pytest.raises(ValidationError):
            finite_difference_check(HAND_Q, HAND_C, eps)

    def test_stencil_order(self):
        with pytest.raises(ValidationError):
            finite_difference_check(HAND_Q, HAND_C, 1e-3, order=3)

    def test_fourth_order_exact_on_cubic(self):
        f = lambda x: float((x**3).sum())  # noqa: E731
        x = np.array([0.3, -1.2, 2.0])
        np.testing.assert_allclose(central_differences(f, x, 1e-2, order=4), 3 * x**2, rtol=1e-10)

    def test_relative_error_denominator(self):
        assert max_relative_error(np.array([0.0]), np.array([0.0])) == 0.0
        assert max_relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


class TestBatches:
    def pairs(self, n):
        rng = np.random.default_rng(n)
        return [(q(rng.normal(size=4), f"q{i}"), doc(rng.normal(size=(2, 4)), f"d{i}")) for i in range(n)]

    def test_batch_of_two(self):
        assert all(len(b.negatives) == 1 for b in in_batch_negatives(self.pairs(2)))

    def test_batch_of_five(self):
        batch = self.pairs(5)
        out = in_batch_negatives(batch)
        assert [len(b.negatives) for b in out] == [4] * 5
        assert all(b.positive.doc_id not in {n.doc_id for n in b.negatives} for b in out)

    def test_batch_of_one(self):
        with pytest.raises(ValidationError):
            in_batch_negatives(self.pairs(1))


class TestDiagnostics:
    def test_k1_positives(self):
        insts = in_batch_negatives([(q([1.0, 2.0]), doc([[0.5, 0.1]], "a")), (q([0.3, -1.0]), doc([[1.0, 1.0]], "b"))])
        for s in run_diagnostics(insts):
            assert s.max_r == 1.0 and s.var_r == 0.0

    def test_symmetric_instance(self):
        inst = BatchInstance(q([1.0, 1.0]), doc([[1.0, 0.0], [0.0, 1.0]]), [doc([[1.0, 1.0]], "n")])
        assert run_diagnostics([inst])[0].var_r == pytest.approx(0.0, abs=1e-30)

    def test_steps_and_empty(self):
        insts = in_batch_negatives(TestBatches().pairs(4))
        assert [s.step for s in run_diagnostics(insts, steps=2)] == [0, 1]
        with pytest.raises(ValidationError):
            run_diagnostics([])

    def test_representations(self):
        mat = embed_text("a b c d e f g h", 16, doc_id="x")
        first = representation(mat, "first_k", 3)
        assert np.array_equal(first.centroids, mat.rows[1:4].astype(np.float64))
        rand = representation(mat, "random_k", 3, seed=5)
        assert rand == representation(mat, "random_k", 3, seed=5) and rand.k_effective == 3
        assert representation(mat, "centroids", 3).k_effective == 3

    def test_strategies_and_csv(self, tmp_path):
        texts = ["alpha beta gamma alpha", "delta epsilon zeta", "eta theta iota eta", "kappa lambda mu"]
        mats = [embed_text(t, 16, doc_id=f"d{i}") for i, t in enumerate(texts)]
        pairs = [(pool_query(embed_text(t.split()[0], 16), qid=f"q{i}"), m) for i, (t, m) in enumerate(zip(texts, mats))]
        res = diagnose_strategies(pairs, list(Strategy), k=2, batch_size=3)
        assert set(res) == set(Strategy)
        assert all(len(v) == 4 for v in res.values())  # trailing batch of one merged
        path = tmp_path / "diag.csv"
        write_diagnostics_csv(res, path)
        rows = list(csv.reader(path.open()))
        assert tuple(rows[0]) == DIAGNOSTICS_COLUMNS and len(rows) == 13

    def test_batch_size_validation(self):
        with pytest.raises(ValidationError):
            diagnose_strategies(TestBatchesPairs(), ["first_k"], k=2, batch_size=1)


def TestBatchesPairs():
    mats = [embed_text(t, 8, doc_id=t) for t in ("a b", "c d")]
    return [(pool_query(m), m) for m in mats]
