"""Numeric kernel tests: softmax, reverse-mode gradients, Adam, clipping,
dropout. Every differentiable op is checked against central finite
differences on random small inputs."""

import math

import numpy as np
import pytest

from conftest import finite_difference, max_rel_err
from faceforge import autodiff as ad
from faceforge.autodiff import Adam, Tape, Tensor
from faceforge.errors import NumericError, StructuralError, UsageError


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax_rows([0.0, 0.0]).value
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-15)

    def test_hand_value(self):
        out = ad.softmax_rows([math.log(2), 0.0]).value
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_shift_invariance(self):
        a = ad.softmax_rows([5.0, 5.0, 5.0]).value
        b = ad.softmax_rows([0.0, 0.0, 0.0]).value
        np.testing.assert_array_equal(a, b)

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = rng.normal(scale=8, size=(3, 7))
            y = ad.softmax_rows(x).value
            assert np.all(y > 0)
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)

    def test_non_finite_input_rejected(self):
        with pytest.raises(NumericError):
            ad.softmax_rows([np.inf, 0.0])


def _gradcheck(op, arrays, rng, h=1e-5, tol=1e-6):
    """Project the op output onto a random direction and compare the
    analytic gradient of each input against finite differences."""
    out_shape = op(*[Tensor(a) for a in arrays]).value.shape
    proj = rng.normal(size=out_shape)

    tape = Tape()
    leaves = [tape.watch(a) for a in arrays]
    loss = ad.sum_all(op(*leaves) * Tensor(proj))
    tape.backward(loss)

    for leaf, arr in zip(leaves, arrays):
        def f():
            out = op(*[Tensor(a) for a in arrays])
            return float((out.value * proj).sum())

        fd = finite_difference(f, arr, h=h)
        assert max_rel_err(leaf.grad, fd) < tol, f"{op} gradient mismatch"


class TestOpGradients:
    @pytest.mark.parametrize("shapes,op", [
        (((3, 4), (3, 4)), ad.add),
        (((3, 4), (1, 4)), ad.add),          # row-bias broadcast
        (((3, 4), (3, 1)), ad.add),          # column broadcast
        (((3, 4), (3, 4)), ad.sub),
        (((3, 4), (3, 4)), ad.mul),
        (((3, 4), (3, 1)), ad.mul),
        (((3, 4), (1, 1)), ad.mul),
        (((3, 4), (4, 2)), ad.matmul),
    ])
    def test_binary(self, shapes, op):
        rng = np.random.default_rng(hash((shapes, op.__name__)) % 2**32)
        arrays = [rng.normal(size=s) for s in shapes]
        _gradcheck(op, arrays, rng)

    @pytest.mark.parametrize("op", [ad.tanh, ad.sigmoid, ad.neg, ad.sum_all,
                                    ad.sum_rows, ad.softmax_rows])
    def test_unary(self, op):
        rng = np.random.default_rng(abs(hash(op.__name__)) % 2**32)
        _gradcheck(op, [rng.normal(size=(3, 5))], rng)

    def test_log(self):
        rng = np.random.default_rng(5)
        _gradcheck(ad.log, [rng.uniform(0.2, 3.0, size=(2, 4))], rng)

    def test_reciprocal(self):
        rng = np.random.default_rng(6)
        _gradcheck(ad.reciprocal, [rng.uniform(0.5, 2.0, size=(2, 4))], rng)

    def test_maximum_scalar(self):
        rng = np.random.default_rng(7)
        # entries away from the kink so finite differences are clean
        x = rng.uniform(0.3, 2.0, size=(2, 5))
        x[0, :2] = rng.uniform(-2.0, -0.3, size=2)
        _gradcheck(lambda t: ad.maximum_scalar(t, 0.0), [x], rng)

    def test_entropy(self):
        rng = np.random.default_rng(8)
        p = ad.softmax_rows(rng.normal(size=(3, 6))).value
        _gradcheck(ad.entropy_rows, [p], rng, tol=1e-5)

    def test_concat_cols(self):
        rng = np.random.default_rng(9)
        arrays = [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))]
        _gradcheck(lambda a, b: ad.concat_cols([a, b]), arrays, rng)

    def test_col(self):
        rng = np.random.default_rng(10)
        _gradcheck(lambda t: ad.col(t, 2), [rng.normal(size=(3, 5))], rng)

    def test_gather_rows(self):
        rng = np.random.default_rng(11)
        ids = [2, 0, 2, 1]  # repeated index exercises scatter-add
        _gradcheck(lambda t: ad.gather_rows(t, ids), [rng.normal(size=(4, 3))], rng)

    def test_gather_cols(self):
        rng = np.random.default_rng(12)
        ids = [1, 4, 0]
        _gradcheck(lambda t: ad.gather_cols(t, ids), [rng.normal(size=(3, 5))], rng)

    def test_ce_of_softmax_chain(self):
        rng = np.random.default_rng(13)
        w = rng.normal(size=(3, 6))
        x = rng.normal(size=(1, 3))

        def chain(wt):
            probs = ad.softmax_rows(ad.matmul(Tensor(x), wt))
            return ad.neg(ad.log(ad.gather_cols(probs, [4])))

        _gradcheck(chain, [w], rng)


class TestBackward:
    def test_sum_gives_ones(self):
        tape = Tape()
        w = tape.watch(np.arange(6.0).reshape(2, 3))
        tape.backward(ad.sum_all(w))
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_unreachable_parameter_gets_zero(self):
        tape = Tape()
        a = tape.watch(np.ones((2, 2)))
        b = tape.watch(np.ones((2, 2)))
        tape.backward(ad.sum_all(a * 2.0))
        np.testing.assert_array_equal(b.grad, np.zeros((2, 2)))

    def test_loss_must_be_scalar(self):
        tape = Tape()
        a = tape.watch(np.ones((2, 2)))
        with pytest.raises(StructuralError):
            tape.backward(a * 1.0)

    def test_loss_from_other_tape_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.watch(np.ones((1, 1)))
        with pytest.raises(UsageError):
            t2.backward(a * 1.0)

    def test_mixed_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.watch(np.ones((1, 1)))
        b = t2.watch(np.ones((1, 1)))
        with pytest.raises(UsageError):
            ad.add(a, b)

    def test_cyclic_tape_detected(self):
        tape = Tape()
        a = tape.watch(np.ones((1, 1)))
        b = a * 2.0
        c = ad.sum_all(b * 3.0)
        b._parents = (c,)  # forge a forward reference
        with pytest.raises(StructuralError):
            tape.backward(c)

    def test_constants_are_not_recorded(self):
        before = Tensor(np.ones((2, 2)))
        out = before * 2.0 + 1.0
        assert out.tape is None
        tape = Tape()
        w = tape.watch(np.ones((2, 2)))
        n_nodes = len(tape.nodes)
        _ = Tensor(np.ones((2, 2))) * 3.0
        assert len(tape.nodes) == n_nodes

    def test_recorded_non_finite_is_hard_error(self):
        tape = Tape()
        a = tape.watch(np.array([[1e308]]))
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            ad.add(a, a)  # overflows to inf


class TestAdam:
    def test_first_step_magnitude(self):
        params = {"w": np.zeros((2, 2))}
        opt = Adam(params)
        opt.step({"w": np.ones((2, 2))})
        delta = np.abs(params["w"])
        assert np.all(delta >= 0.00099) and np.all(delta <= 0.001)

    def test_zero_gradient_is_fixed_point(self):
        params = {"w": np.full((2, 3), 1.5)}
        opt = Adam(params)
        for _ in range(3):
            opt.step({"w": np.zeros((2, 3))})
        np.testing.assert_array_equal(params["w"], np.full((2, 3), 1.5))

    def test_constant_gradient_moves_monotonically(self):
        params = {"w": np.zeros((1, 1))}
        opt = Adam(params)
        opt.step({"w": np.ones((1, 1))})
        first = params["w"][0, 0]
        opt.step({"w": np.ones((1, 1))})
        second = params["w"][0, 0]
        assert first < 0 and second < first

    def test_two_step_hand_value(self):
        # replay the bias-corrected update by hand for g = 1
        lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
        w = 0.0
        m = v = 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * 1.0
            v = b2 * v + (1 - b2) * 1.0
            w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        params = {"w": np.zeros((1, 1))}
        opt = Adam(params)
        opt.step({"w": np.ones((1, 1))})
        opt.step({"w": np.ones((1, 1))})
        np.testing.assert_allclose(params["w"][0, 0], w, atol=1e-15)

    def test_shape_mismatch(self):
        opt = Adam({"w": np.zeros((2, 2))})
        with pytest.raises(StructuralError):
            opt.step({"w": np.zeros((3, 2))})

    def test_missing_gradient_treated_as_zero(self):
        params = {"w": np.ones((1, 1)), "b": np.ones((1, 1))}
        opt = Adam(params)
        opt.step({"w": np.ones((1, 1))})
        assert params["b"][0, 0] == 1.0

    def test_state_roundtrip(self):
        params = {"w": np.zeros((2, 2))}
        opt = Adam(params)
        opt.step({"w": np.ones((2, 2))})
        state = opt.state()
        opt2 = Adam({"w": np.zeros((2, 2))})
        opt2.load_state(state)
        assert opt2.step_count == 1
        np.testing.assert_array_equal(opt2.m["w"], opt.m["w"])
        np.testing.assert_array_equal(opt2.v["w"], opt.v["w"])


class TestClipGlobalNorm:
    def test_halves_when_norm_ten_max_five(self):
        g = {"a": np.full((2, 2), 2.5), "b": np.full((4, 1), 2.5)}
        # norm = sqrt(8 * 2.5^2) = sqrt(50) ... use exact norm-10 setup instead
        g = {"a": np.array([[6.0, 8.0]])}  # norm 10
        norm = ad.clip_global_norm(g, 5.0)
        assert norm == pytest.approx(10.0)
        np.testing.assert_allclose(g["a"], [[3.0, 4.0]], atol=1e-12)

    def test_under_limit_unchanged(self):
        g = {"a": np.array([[3.0]])}
        ad.clip_global_norm(g, 5.0)
        np.testing.assert_array_equal(g["a"], [[3.0]])

    def test_zero_gradients_unchanged(self):
        g = {"a": np.zeros((2, 2))}
        ad.clip_global_norm(g, 5.0)
        np.testing.assert_array_equal(g["a"], np.zeros((2, 2)))

    def test_output_norm_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            g = {k: rng.normal(scale=rng.uniform(0.1, 10), size=(3, 3))
                 for k in "abc"}
            ad.clip_global_norm(g, 5.0)
            out = math.sqrt(sum(float((v * v).sum()) for v in g.values()))
            assert out <= 5.0 + 1e-9

    def test_rejects_bad_max_norm(self):
        with pytest.raises(ValueError):
            ad.clip_global_norm({"a": np.ones((1, 1))}, 0.0)


class TestDropoutMask:
    def test_p_zero_is_identity(self):
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(ad.dropout_mask((4, 4), 0.0, rng),
                                      np.ones((4, 4)))

    def test_keep_fraction(self):
        rng = np.random.default_rng(1)
        mask = ad.dropout_mask((100000,), 0.1, rng)
        kept = (mask > 0).mean()
        assert abs(kept - 0.9) < 0.01
        # inverted scaling: surviving entries are 1/(1-p)
        assert np.allclose(mask[mask > 0], 1.0 / 0.9)

    def test_deterministic_under_seed(self):
        a = ad.dropout_mask((50, 50), 0.3, np.random.default_rng(42))
        b = ad.dropout_mask((50, 50), 0.3, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_p_out_of_range(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            ad.dropout_mask((2, 2), 1.0, rng)
        with pytest.raises(ValueError):
            ad.dropout_mask((2, 2), -0.1, rng)


class TestTensorBasics:
    def test_scalar_and_vector_promotion(self):
        assert Tensor(3.0).shape == (1, 1)
        assert Tensor([1.0, 2.0, 3.0]).shape == (1, 3)

    def test_rejects_3d(self):
        with pytest.raises(StructuralError):
            Tensor(np.zeros((2, 2, 2)))

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            Tensor([np.nan])

    def test_item(self):
        assert Tensor(2.5).item() == 2.5
        with pytest.raises(StructuralError):
            Tensor([1.0, 2.0]).item()
