import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from occmil.bagstore import Bag, BagLabel
from occmil.errors import BadMagic, CorruptHeader, DimMismatch, EmptyBag, TraceMismatch
from occmil.mathkern import Prng
from occmil.model import (
    PARAM_NAMES,
    Confident,
    Head,
    aggregate,
    attention,
    attach_instances,
    backward,
    classify,
    decode_params,
    encode_params,
    forward,
    init_params,
    load_params,
    refine,
    save_params,
    zeros_like,
)
from occmil.trainer import total_loss

from conftest import random_bag_features


def tiny(d_ref=2, D=1):
    p = zeros_like(init_params(2, d_ref, D, Prng(0)))
    return p


def loss_at(params, h, confident, y, alpha1):
    trace = forward(params, h)
    attach_instances(params, trace, confident)
    return total_loss(trace, y, alpha1)


def finite_difference_errors(seed, d_in=6, d_ref=4, D=3, k=5, eps=1e-5):
    """Per-tensor max relative error of backward() against central differences."""
    prng = Prng(seed)
    params = init_params(d_in, d_ref, D, prng.derive(1))
    # non-zero biases so every code path carries signal
    for name in ("b_refine", "b_neg", "b_pos", "b_bag"):
        setattr(params, name, 0.1 * prng.derive(2).gauss(getattr(params, name).size))
    h = prng.derive(3).gauss(k * d_in).reshape(k, d_in)
    y = int(seed % 2)
    conf = Confident.from_sets([0, 3], [1, 4])  # M = 2 on each side
    alpha1 = 0.6
    trace = forward(params, h)
    attach_instances(params, trace, conf)
    grads = backward(params, trace, y, alpha1)
    errors = {}
    for name in PARAM_NAMES:
        theta = getattr(params, name)
        g = getattr(grads, name)
        worst = 0.0
        for idx in np.ndindex(theta.shape):
            old = theta[idx]
            theta[idx] = old + eps
            up = loss_at(params, h, conf, y, alpha1)
            theta[idx] = old - eps
            down = loss_at(params, h, conf, y, alpha1)
            theta[idx] = old
            numeric = (up - down) / (2 * eps)
            if abs(g[idx]) > 1e-8:
                worst = max(worst, abs(g[idx] - numeric) / max(abs(g[idx]), abs(numeric)))
        errors[name] = worst
    return errors


class TestInit:
    def test_biases_zero(self):
        p = init_params(8, 4, 3, Prng(1))
        for name in ("b_refine", "b_neg", "b_pos", "b_bag"):
            assert not getattr(p, name).any()

    def test_deterministic(self):
        a, b = init_params(8, 4, 3, Prng(5)), init_params(8, 4, 3, Prng(5))
        assert encode_params(a) == encode_params(b)

    def test_glorot_bound(self):
        p = init_params(8, 4, 3, Prng(2))
        assert np.abs(p.W_refine).max() <= math.sqrt(6 / 12)
        assert np.abs(p.V_att).max() <= math.sqrt(6 / 7)

    def test_shapes(self):
        p = init_params(8, 4, 3, Prng(2))
        assert p.dims == (8, 4, 3)
        assert p.W_bag.shape == (4, 2) and p.w_att.shape == (3,)


class TestLayers:
    def test_refine_identity(self):
        p = tiny()
        p.W_refine = np.eye(2)
        assert np.array_equal(refine(p, np.array([1.0, 2.0])), [1.0, 2.0])
        p.b_refine = np.array([-5.0, -5.0])
        assert np.array_equal(refine(p, np.array([1.0, 2.0])), [0.0, 0.0])

    def test_refine_scalar_oracle(self):
        p = init_params(3, 2, 1, Prng(4))
        p.b_refine = np.array([0.2, -0.1])
        h = np.array([0.5, -1.5, 2.0])
        expect = [max(0.0, sum(p.W_refine[i, j] * h[i] for i in range(3)) + p.b_refine[j]) for j in range(2)]
        assert np.allclose(refine(p, h), expect, atol=1e-12, rtol=0)

    def test_refine_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            refine(tiny(), np.ones(3))

    def test_attention_singleton(self):
        p = init_params(2, 3, 2, Prng(0))
        _, a = attention(p, np.ones((1, 3)))
        assert a.tolist() == [1.0]

    def test_attention_identical(self):
        p = init_params(2, 3, 2, Prng(0))
        _, a = attention(p, np.tile([0.3, 1.0, 0.0], (4, 1)))
        assert np.allclose(a, 0.25, atol=1e-15)

    def test_attention_hand_example(self):
        p = tiny()
        p.V_att = np.array([[1.0], [0.0]])
        p.U_att = np.array([[0.0], [1.0]])
        p.w_att = np.array([1.0])
        e, a = attention(p, np.array([[1.0, 0.0], [0.0, 1.0]]))
        e1 = math.tanh(1.0) * 0.5
        assert e == pytest.approx([e1, 0.0], abs=1e-12)
        assert e1 == pytest.approx(0.380797, abs=1e-6)
        assert a[0] == pytest.approx(math.exp(e1) / (math.exp(e1) + 1.0), abs=1e-12)
        assert a[0] == pytest.approx(0.5940653, abs=1e-7)

    def test_attention_empty(self):
        with pytest.raises(EmptyBag):
            attention(tiny(), np.zeros((0, 2)))

    def test_aggregate(self):
        zs = np.array([[1.0, 2.0], [3.0, 5.0], [8.0, -1.0]])
        assert np.allclose(aggregate(np.full(3, 1 / 3), zs), zs.mean(axis=0))
        assert np.array_equal(aggregate(np.array([0.0, 0.0, 1.0]), zs), zs[2])
        assert np.allclose(aggregate(np.array([0.25, 0.75]), np.array([[4.0, 0.0], [0.0, 4.0]])), [1.0, 3.0])
        with pytest.raises(DimMismatch):
            aggregate(np.array([1.0]), zs)

    def test_classify(self):
        p = tiny()
        assert np.array_equal(classify(Head.BAG, p, np.array([3.0, -2.0])), [0.5, 0.5])
        p.W_bag = np.eye(2)
        assert np.allclose(classify(Head.BAG, p, np.array([math.log(3.0), 0.0])), [0.75, 0.25], atol=1e-15)

    @given(st.integers(0, 10_000), st.integers(1, 30))
    def test_probabilities_and_attention_valid(self, seed, k):
        p = init_params(5, 4, 3, Prng(seed))
        h = random_bag_features(seed, k, 5) * 3
        t = forward(p, h, Confident.from_sets(range(min(k, 2)), []))
        assert (t.a > 0).all() and (t.a <= 1).all() and abs(t.a.sum() - 1) <= 1e-9
        assert abs(t.bag_prob.sum() - 1) <= 1e-12
        assert np.allclose(t.prob_neg.sum(axis=1), 1, atol=1e-12)
        assert (t.z >= 0).all()


class TestForward:
    def test_single_instance(self):
        p = init_params(3, 4, 2, Prng(3))
        h = np.array([[0.4, -0.2, 1.0]])
        t = forward(p, h)
        assert t.a.tolist() == [1.0]
        assert np.array_equal(t.Z, refine(p, h[0]))

    @given(st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        p = init_params(6, 4, 3, Prng(seed))
        h = random_bag_features(seed, 9, 6)
        perm = Prng(seed + 1).permutation(9)
        a, b = forward(p, h).bag_prob, forward(p, h[perm]).bag_prob
        assert np.allclose(a, b, atol=1e-10, rtol=0)
        assert np.argmax(a) == np.argmax(b) or abs(a[0] - a[1]) < 1e-12

    def test_empty_confident(self):
        t = forward(init_params(3, 2, 2, Prng(0)), np.ones((4, 3)))
        assert t.prob_neg is None and t.prob_pos is None and len(t.confident) == 0

    def test_accepts_bag(self):
        p = init_params(3, 2, 2, Prng(0))
        bag = Bag("b", "c", BagLabel.POSITIVE, np.ones((2, 3)))
        assert np.array_equal(forward(p, bag).bag_prob, forward(p, np.ones((2, 3))).bag_prob)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            forward(init_params(3, 2, 2, Prng(0)), np.ones((4, 5)))


class TestBackward:
    def test_no_active_terms(self):
        p = init_params(6, 4, 3, Prng(0))
        t = forward(p, random_bag_features(1, 5, 6))
        g = backward(p, t, 1, alpha1=0.0)
        assert all(not v.any() for v in g.tensors().values())

    def test_alpha_one_freezes_instance_heads(self):
        p = init_params(6, 4, 3, Prng(0))
        t = forward(p, random_bag_features(1, 5, 6), Confident.from_sets([0], [1]))
        g = backward(p, t, 1, alpha1=1.0)
        for name in ("W_neg", "b_neg", "W_pos", "b_pos"):
            assert not getattr(g, name).any()
        assert g.W_bag.any()

    def test_trace_mismatch(self):
        p = init_params(6, 4, 3, Prng(0))
        t = forward(p, random_bag_features(1, 5, 6))
        with pytest.raises(TraceMismatch):
            backward(p.copy(), t, 0, 0.5)

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        errors = finite_difference_errors(seed)
        assert max(errors.values()) < 1e-4, errors


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = init_params(7, 5, 3, Prng(9))
        save_params(p, tmp_path / "m.mbhp")
        q = load_params(tmp_path / "m.mbhp")
        assert all(np.array_equal(getattr(p, n), getattr(q, n)) for n in PARAM_NAMES)

    def test_header(self):
        buf = encode_params(init_params(7, 5, 3, Prng(9)))
        assert buf[:4] == b"MBHP" and buf[4:18] == bytes.fromhex("0100") + (7).to_bytes(4, "little") + (5).to_bytes(4, "little") + (3).to_bytes(4, "little")

    def test_corrupt(self):
        buf = encode_params(init_params(3, 2, 2, Prng(0)))
        with pytest.raises(BadMagic):
            decode_params(b"ZZZZ" + buf[4:])
        with pytest.raises(CorruptHeader):
            decode_params(buf[:-3])
        with pytest.raises(CorruptHeader):
            decode_params(buf + b"\0")
