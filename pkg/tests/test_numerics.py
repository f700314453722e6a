import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ulim import numerics as nx

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def op_grad_check(op, inputs, diff, attrs=None, h=1e-6, seed=0):
    """Max error of ``op.backward`` against central differences of ``sum(g * out)``.

    Relative to the gradient norm, absolute once the norm drops below one.
    """
    attrs = attrs or {}
    out, cache = op.forward(*inputs, **attrs)
    g = np.random.default_rng(seed).normal(size=np.shape(out))
    grads = op.backward(g, cache)
    worst = 0.0
    for i in diff:
        x = inputs[i]
        num = np.zeros_like(x)
        for j in range(x.size):
            orig = x.flat[j]
            x.flat[j] = orig + h
            up = (g * op.forward(*inputs, **attrs)[0]).sum()
            x.flat[j] = orig - h
            down = (g * op.forward(*inputs, **attrs)[0]).sum()
            x.flat[j] = orig
            num.flat[j] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(num), np.linalg.norm(grads[i]), 1.0)
        worst = max(worst, np.linalg.norm(num - grads[i]) / scale)
    return worst


class TestFunctional:
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
    def test_softmax_rows_sum_to_one(self, x):
        p = nx.softmax(x)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)

    @given(arrays(np.float64, 5, elements=finite), st.floats(-50, 50))
    def test_softmax_shift_invariant(self, x, c):
        np.testing.assert_allclose(nx.softmax(x), nx.softmax(x + c), atol=1e-12)

    def test_softmax_temperature(self):
        x = np.array([1.0, 2.0, 4.0])
        np.testing.assert_allclose(nx.softmax(x, temperature=2.0), nx.softmax(x / 2.0))
        with pytest.raises(nx.ConfigError):
            nx.softmax(x, temperature=0.0)
        with pytest.raises(ValueError):
            nx.softmax(np.array([]))

    def test_softmax_large_logits_are_finite(self):
        p = nx.softmax(np.array([1000.0, 1000.0, -1000.0]))
        np.testing.assert_allclose(p, [0.5, 0.5, 0.0])

    def test_masked_softmax_ignores_masked_and_zeroes_empty_rows(self):
        s = np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]])
        m = np.array([[True, False, True], [False, False, False]])
        out = nx.masked_softmax(s, m)
        np.testing.assert_allclose(out[0], nx.softmax(np.array([1.0, 3.0]))[[0, 0, 1]] * [1, 0, 1])
        np.testing.assert_array_equal(out[1], 0.0)

    @given(arrays(np.float64, 7, elements=st.floats(-800, 800)))
    def test_sigmoid_stable_and_bounded(self, x):
        s = nx.sigmoid(x)
        assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))
        np.testing.assert_allclose(s + nx.sigmoid(-x), 1.0, atol=1e-12)

    def test_logsumexp_oracle(self):
        x = np.array([[0.0, math.log(3.0)], [700.0, 700.0]])
        np.testing.assert_allclose(nx.logsumexp(x), [math.log(4.0), 700.0 + math.log(2.0)])

    def test_matmul_shape_errors(self):
        with pytest.raises(nx.DimensionError):
            nx.matmul(np.ones((2, 3)), np.ones((4, 2)))
        np.testing.assert_array_equal(nx.matmul(np.eye(2), np.ones((2, 3))), np.ones((2, 3)))

    def test_mlp_relu_between_layers_none_on_output(self):
        w1, b1 = np.array([[1.0, -1.0]]), np.zeros(2)
        w2, b2 = np.array([[1.0], [1.0]]), np.array([-5.0])
        out = nx.mlp_forward(np.array([[2.0]]), [(w1, b1), (w2, b2)])
        # hidden relu(2, -2) = (2, 0); the output stays negative
        np.testing.assert_allclose(out, [[-3.0]])
        np.testing.assert_allclose(nx.mlp_forward(np.array([[2.0]]), [(w1, b1), (w2, b2)], "none"), [[-5.0]])
        with pytest.raises(nx.DimensionError):
            nx.mlp_forward(np.ones((1, 3)), [(w1, b1)])

    def test_mhsa_single_head_oracle(self, rng):
        t, d = 4, 6
        x = rng.normal(size=(t, d))
        p = {k: rng.normal(size=(d, d)) if k.startswith("W") else rng.normal(size=d) for k in nx.MHSA_KEYS}
        q, k, v = x @ p["Wq"] + p["bq"], x @ p["Wk"] + p["bk"], x @ p["Wv"] + p["bv"]
        att = nx.softmax(q @ k.T / math.sqrt(d))
        expected = att @ v @ p["Wo"] + p["bo"]
        np.testing.assert_allclose(nx.mhsa_forward(x, p, heads=1), expected, atol=1e-10)

    def test_mhsa_is_permutation_equivariant_without_positions(self, rng):
        x = rng.normal(size=(5, 4))
        p = {k: rng.normal(size=(4, 4)) if k.startswith("W") else rng.normal(size=4) for k in nx.MHSA_KEYS}
        perm = rng.permutation(5)
        np.testing.assert_allclose(nx.mhsa_forward(x[perm], p, 2), nx.mhsa_forward(x, p, 2)[perm], atol=1e-10)

    def test_mhsa_mask_hides_padding(self, rng):
        p = {k: rng.normal(size=(4, 4)) if k.startswith("W") else rng.normal(size=4) for k in nx.MHSA_KEYS}
        x = rng.normal(size=(3, 4))
        padded = np.vstack([x, rng.normal(size=(2, 4))])
        mask = np.array([True, True, True, False, False])
        np.testing.assert_allclose(nx.mhsa_forward(padded, p, 2, mask)[:3], nx.mhsa_forward(x, p, 2), atol=1e-10)

    def test_target_attention_oracle(self, rng):
        d = 4
        q, keys, vals = rng.normal(size=d), rng.normal(size=(3, d)), rng.normal(size=(3, d))
        p = {"Wq": rng.normal(size=(d, d)), "Wk": rng.normal(size=(d, d)),
             "Wo": rng.normal(size=(d, d)), "bo": rng.normal(size=d)}
        w = nx.softmax((keys @ p["Wk"]) @ (q @ p["Wq"]) / math.sqrt(d))
        np.testing.assert_allclose(nx.target_attention_forward(q, keys, vals, p), (w @ vals) @ p["Wo"] + p["bo"])
        with pytest.raises(nx.EmptySequenceError):
            nx.target_attention_forward(q, np.zeros((0, d)), np.zeros((0, d)), p)


class TestOpGradients:
    def test_linear(self, rng):
        assert op_grad_check(nx.Linear, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)),
                                         rng.normal(size=5)], [0, 1, 2]) < 1e-7

    def test_relu_away_from_kink(self, rng):
        x = rng.normal(size=(3, 4))
        x[np.abs(x) < 0.1] = 0.5
        assert op_grad_check(nx.Relu, [x], [0]) < 1e-7

    def test_sigmoid_add_combine(self, rng):
        assert op_grad_check(nx.Sigmoid, [rng.normal(size=(3, 2))], [0]) < 1e-7
        assert op_grad_check(nx.Add, [rng.normal(size=(3, 4)), rng.normal(size=4)], [0, 1]) < 1e-7
        assert op_grad_check(nx.Combine, [rng.normal(size=(3, 2)), rng.normal(size=(3, 2))], [0, 1],
                             {"coefs": (0.3, rng.normal(size=(3, 1)))}) < 1e-7

    def test_gather_with_repeated_indices(self, rng):
        idx = np.array([[0, 2, 2], [4, 0, 2]])
        assert op_grad_check(nx.Gather, [rng.normal(size=(5, 3)), idx], [0]) < 1e-7

    def test_gather_backward_matches_add_at(self, rng):
        idx = rng.integers(0, 6, size=(4, 5))
        g = rng.normal(size=(4, 5, 3))
        expected = np.zeros((6, 3))
        np.add.at(expected, idx.reshape(-1), g.reshape(-1, 3))
        np.testing.assert_allclose(nx.Gather.backward(g, ((6, 3), idx))[0], expected, atol=1e-12)

    def test_concat_stack_meanpool(self, rng):
        assert op_grad_check(nx.Concat, [rng.normal(size=(2, 3)), rng.normal(size=(2, 4))], [0, 1]) < 1e-7
        assert op_grad_check(nx.Stack, [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))], [0, 1]) < 1e-7
        mask = np.array([[True, True, False], [True, False, False]])
        assert op_grad_check(nx.MeanPool, [rng.normal(size=(2, 3, 4)), mask], [0]) < 1e-7

    def test_mhsa(self, rng):
        d = 4
        mask = np.array([[True, True, True], [True, True, False]])
        ins = [rng.normal(size=(2, 3, d)), mask]
        for k in nx.MHSA_KEYS:
            ins.append(rng.normal(size=(d, d)) if k.startswith("W") else rng.normal(size=d))
        assert op_grad_check(nx.MHSA, ins, [0] + list(range(2, 10)), {"heads": 2}) < 1e-6

    def test_mhsa_key_bias_gradient_is_zero(self, rng):
        # bk shifts every score of a query row by the same amount; softmax ignores that
        d = 4
        ins = [rng.normal(size=(1, 3, d)), np.ones((1, 3), dtype=bool)]
        for k in nx.MHSA_KEYS:
            ins.append(rng.normal(size=(d, d)) if k.startswith("W") else rng.normal(size=d))
        out, cache = nx.MHSA.forward(*ins, heads=2)
        grads = nx.MHSA.backward(rng.normal(size=out.shape), cache)
        np.testing.assert_allclose(grads[5], 0.0, atol=1e-12)

    def test_attention_weights_and_weighted_sum(self, rng):
        mask = np.array([[True, True, False], [True, True, True]])
        ins = [rng.normal(size=(2, 4)), rng.normal(size=(2, 3, 4)), mask,
               rng.normal(size=(4, 4)), rng.normal(size=(4, 4))]
        assert op_grad_check(nx.AttentionWeights, ins, [0, 1, 3, 4]) < 1e-6
        w = nx.softmax(rng.normal(size=(2, 3)))
        assert op_grad_check(nx.WeightedSum, [w, rng.normal(size=(2, 3, 4))], [0, 1]) < 1e-7

    def test_softmax_and_losses(self, rng):
        assert op_grad_check(nx.Softmax, [rng.normal(size=(2, 5))], [0]) < 1e-7
        assert op_grad_check(nx.SoftmaxCrossEntropy, [rng.normal(size=(3, 4)), np.array([0, 3, 1])], [0]) < 1e-7
        assert op_grad_check(nx.SampledSoftmax, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4)),
                                                  rng.normal(size=(5, 4))], [0, 1, 2]) < 1e-7

    def test_scatter_blend_probnll(self, rng):
        w = nx.softmax(rng.normal(size=(2, 3)))
        idx = np.array([[4, 1, 0], [2, 3, 0]])
        mask = np.array([[True, True, True], [True, True, False]])
        assert op_grad_check(nx.ScatterNormalize, [w, idx, mask], [0], {"n": 6}) < 1e-6
        p = nx.sigmoid(rng.normal(size=(2, 1)))
        assert op_grad_check(nx.Blend, [p, nx.softmax(rng.normal(size=(2, 4))),
                                        nx.softmax(rng.normal(size=(2, 4)))], [0, 1, 2]) < 1e-7
        y = nx.softmax(rng.normal(size=(3, 4)))
        assert op_grad_check(nx.ProbNLL, [y, np.array([1, 0, 3])], [0], {"eps": 1e-9}) < 1e-6


class TestSampledSoftmax:
    def test_equal_logits_gives_log_of_candidates(self):
        v = np.ones((1, 3))
        e = np.ones((1, 3))
        for m in (1, 4, 63):
            loss, _ = nx.SampledSoftmax.forward(v, e, np.ones((m, 3)))
            assert float(loss) == pytest.approx(math.log(m + 1), abs=1e-12)

    def test_positive_in_denominator(self, rng):
        v, pos, neg = rng.normal(size=(1, 3)), rng.normal(size=(1, 3)), rng.normal(size=(4, 3))
        logits = np.concatenate([[v[0] @ pos[0]], neg @ v[0]])
        expected = -logits[0] + math.log(np.exp(logits).sum())
        assert float(nx.SampledSoftmax.forward(v, pos, neg)[0]) == pytest.approx(expected)


class TestTape:
    def test_backward_accumulates_shared_params(self, rng):
        tape = nx.Tape()
        w = tape.param("w", rng.normal(size=(3, 3)))
        x = rng.normal(size=(2, 3))
        a = tape.apply(nx.Linear, x, w, np.zeros(3))
        b = tape.apply(nx.Linear, x, w, np.zeros(3))
        s = tape.apply(nx.Combine, a, b, coefs=(1.0, 2.0))
        grads = tape.backward(s, np.ones((2, 3)))
        np.testing.assert_allclose(grads.params["w"], 3.0 * x.T @ np.ones((2, 3)))

    def test_unused_param_gets_zero_grad_and_input_grads_returned(self, rng):
        tape = nx.Tape()
        tape.param("unused", np.ones(4))
        x = tape.input("x", rng.normal(size=(2, 3)))
        out = tape.apply(nx.Sigmoid, x)
        grads = nx.backward(tape, out)
        np.testing.assert_array_equal(grads.params["unused"], 0.0)
        s = nx.sigmoid(x.value)
        np.testing.assert_allclose(grads.inputs["x"], s * (1 - s))

    def test_backward_without_forward_raises(self):
        with pytest.raises(nx.TapeError):
            nx.Tape().backward(nx.Var(np.ones(1)))

    def test_record_false_keeps_nothing(self):
        tape = nx.Tape(record=False)
        tape.apply(nx.Sigmoid, np.ones(2))
        with pytest.raises(nx.TapeError):
            tape.backward(nx.Var(np.ones(2)))


class TestAdam:
    def test_first_step_moves_by_lr_against_gradient_sign(self):
        p = {"w": np.array([1.0, -2.0, 3.0], dtype=np.float32)}
        nx.Adam(0.1).step(p, {"w": np.array([0.5, -4.0, 0.0])})
        np.testing.assert_allclose(p["w"], [0.9, -1.9, 3.0], atol=1e-6)
        assert p["w"].dtype == np.float32

    def test_two_step_oracle(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        g1, g2 = 2.0, -1.0
        m = (1 - b1) * g1
        v = (1 - b2) * g1 ** 2
        x = 1.0 - lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
        m = b1 * m + (1 - b1) * g2
        v = b2 * v + (1 - b2) * g2 ** 2
        x -= lr * (m / (1 - b1 ** 2)) / (math.sqrt(v / (1 - b2 ** 2)) + eps)
        p = {"w": np.array([1.0])}
        opt = nx.Adam(lr)
        opt.step(p, {"w": np.array([g1])})
        opt.step(p, {"w": np.array([g2])})
        assert p["w"][0] == pytest.approx(x, rel=1e-12)

    def test_zero_lr_leaves_params_bit_identical(self, rng):
        w = rng.normal(size=(3, 2)).astype(np.float32)
        p = {"w": w.copy()}
        opt = nx.Adam(0.0)
        for _ in range(3):
            opt.step(p, {"w": rng.normal(size=(3, 2))})
        np.testing.assert_array_equal(p["w"], w)


class TestInit:
    @settings(deadline=None)
    @given(st.integers(1, 64), st.integers(0, 2 ** 16))
    def test_uniform_bounds(self, fan_in, seed):
        w = nx.init_uniform(np.random.default_rng(seed), (8, 5), fan_in)
        assert w.dtype == np.float32
        assert np.all(np.abs(w) <= 1.0 / math.sqrt(fan_in) + 1e-7)

    def test_linear_init_zero_bias(self, rng):
        p = {}
        nx.init_linear(p, rng, "l", 4, 3)
        assert p["l.W"].shape == (4, 3)
        np.testing.assert_array_equal(p["l.b"], 0.0)


class TestFiniteDifference:
    def test_quadratic_exact(self):
        a = np.array([[2.0, 1.0], [1.0, 3.0]])
        params = {"x": np.array([0.5, -1.0])}

        def loss(p):
            return 0.5 * p["x"] @ a @ p["x"]

        err = nx.finite_difference_check(loss, params, {"x": a @ params["x"]})
        assert err["x"] < 1e-9

    def test_detects_wrong_gradient(self):
        params = {"x": np.array([1.0, 2.0])}
        err = nx.finite_difference_check(lambda p: float((p["x"] ** 2).sum()), params, {"x": np.array([2.0, 0.0])})
        assert err["x"] > 0.5
