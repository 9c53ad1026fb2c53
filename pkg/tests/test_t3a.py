import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from occmil.errors import EmptyInput, ZeroVector
from occmil.mathkern import Prng, softmax_stable
from occmil.model import forward, init_params, zeros_like
from occmil.t3a import SupportSets, Template, adapt_evaluate, adapt_predict, entropy, init_support

from conftest import random_bag_features


def two_d_params(w0=(1.0, 0.0), w1=(0.0, 1.0)):
    p = zeros_like(init_params(2, 2, 1, Prng(0)))
    p.W_bag = np.array([w0, w1], dtype=np.float64).T
    return p


class TestSupport:
    def test_fresh(self):
        p = init_params(5, 4, 3, Prng(2))
        p.b_bag = np.array([5.0, -5.0])
        s = init_support(p, 10)
        assert [len(c) for c in s.classes] == [1, 1]
        assert np.array_equal(s.classes[1][0].vector, p.W_bag[:, 1])
        assert s.classes[0][0].is_seed and s.classes[0][0].entropy == 0.0
        # the bias never enters the support sets
        assert np.array_equal(s.centroids(), p.W_bag.T)

    def test_bad_capacity(self):
        with pytest.raises(ValueError):
            init_support(two_d_params(), 0)

    def test_entropy_filter(self):
        s = init_support(two_d_params(), C=1)
        for e, v in [(0.5, [0.0, 1.0]), (0.1, [1.0, 0.0]), (0.9, [0.6, 0.8])]:
            s.classes[0].append(Template(np.array(v), e))
        kept = s.retained(0)
        assert len(kept) == 2 and kept[0].is_seed and kept[1].entropy == 0.1
        assert np.allclose(s.centroid(0), [1.0, 0.0], atol=1e-12)

    def test_centroid_is_mean_of_retained(self):
        s = init_support(two_d_params(), C=3)
        vecs = Prng(1).gauss(10).reshape(5, 2)
        for i, v in enumerate(vecs):
            s.classes[1].append(Template(v / np.linalg.norm(v), 0.1 * i))
        expected = np.mean([[0.0, 1.0]] + [v / np.linalg.norm(v) for v in vecs[:3]], axis=0)
        assert np.allclose(s.centroid(1), expected, atol=1e-12)

    def test_entropy(self):
        assert entropy(np.array([0.5, 0.5])) == pytest.approx(np.log(2))
        assert entropy(np.array([1.0, 0.0])) == 0.0


class TestAdaptPredict:
    def test_hand_example(self):
        s = init_support(two_d_params(), 10)
        label, s, prob = adapt_predict(s, np.array([2.0, 0.0]))
        assert label == 0
        assert len(s.classes[0]) == 2 and np.allclose(s.classes[0][1].vector, [1.0, 0.0])
        assert np.allclose(s.centroid(0), [1.0, 0.0])
        assert prob.sum() == pytest.approx(1.0, abs=1e-12)

    def test_classifier_decides_the_support_list(self):
        s = init_support(two_d_params(), 10)
        adapt_predict(s, np.array([2.0, 0.0]), raw_prob=np.array([0.2, 0.8]))
        assert len(s.classes[1]) == 2 and len(s.classes[0]) == 1
        assert s.classes[1][1].entropy == pytest.approx(entropy(np.array([0.2, 0.8])))

    def test_tie_goes_to_class_zero(self):
        label, _, _ = adapt_predict(init_support(two_d_params(), 3), np.array([1.0, 1.0]))
        assert label == 0

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            adapt_predict(init_support(two_d_params(), 3), np.zeros(2))

    @given(st.integers(0, 2**32))
    def test_fresh_matches_bias_free_argmax(self, seed):
        p = init_params(6, 5, 3, Prng(seed))
        p.b_bag = Prng(seed).derive(9).gauss(2) * 3
        t = forward(p, random_bag_features(seed, 7, 6))
        if not t.Z.any():
            return
        label, _, _ = adapt_predict(init_support(p, 10), t.Z, t.bag_prob)
        logits = t.Z @ p.W_bag
        assert label == int(logits[1] > logits[0])

    @given(st.integers(0, 2**32), st.integers(1, 12))
    def test_invariants_over_a_stream(self, seed, n):
        p = init_params(4, 3, 2, Prng(seed))
        s = init_support(p, 2)
        for i in range(n):
            t = forward(p, random_bag_features(seed + i, 5, 4))
            if not t.Z.any():
                continue
            _, s, prob = adapt_predict(s, t.Z, t.bag_prob)
            assert abs(prob.sum() - 1) <= 1e-12
        for c in (0, 1):
            kept = s.retained(c)
            assert sum(t.is_seed for t in kept) == 1
            assert all(abs(np.linalg.norm(t.vector) - 1) <= 1e-12 for t in s.classes[c] if not t.is_seed)
            assert all(t.entropy >= 0 for t in s.classes[c])
            assert np.allclose(s.centroid(c), np.mean([t.vector for t in kept], axis=0), atol=1e-12)


class TestAdaptEvaluate:
    def bags(self, n, seed=0):
        return [random_bag_features(seed + i, 6, 5) for i in range(n)]

    def test_single_bag_equals_fresh_predict(self):
        p = init_params(5, 4, 3, Prng(1))
        bag = self.bags(1)[0]
        labels, scores = adapt_evaluate(p, [bag], 10)
        t = forward(p, bag)
        label, _, prob = adapt_predict(init_support(p, 10), t.Z, t.bag_prob)
        assert labels[0] == label and scores[0] == prob[1]

    def test_identical_bags_order_invariant(self):
        p = init_params(5, 4, 3, Prng(1))
        bag = self.bags(1)[0]
        a = adapt_evaluate(p, [bag, bag.copy()], 10)
        b = adapt_evaluate(p, [bag.copy(), bag], 10)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_order_matters_in_general(self):
        p = init_params(5, 4, 3, Prng(3))
        bags = self.bags(30, seed=50)
        fwd = adapt_evaluate(p, bags, 2)[1]
        rev = adapt_evaluate(p, bags[::-1], 2)[1][::-1]
        assert not np.array_equal(fwd, rev)

    def test_empty(self):
        with pytest.raises(EmptyInput):
            adapt_evaluate(init_params(5, 4, 3, Prng(1)), [], 10)
