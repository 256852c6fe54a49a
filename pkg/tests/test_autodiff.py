import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtgnn import autodiff as ad
from mtgnn.autodiff import BatchNormState, Tape, Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f over every entry of x."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def check_grad(build, *arrays, tol=1e-4):
    """build(*tensors) -> scalar tensor; compares tape gradients to finite differences."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape():
        loss = build(*tensors)
    ad.backward(loss)
    for i, t in enumerate(tensors):
        def f(x, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = Tensor(x)
            return build(*args).item()
        num = numeric_grad(f, arrays[i].copy())
        assert rel_err(t.grad, num) < tol, (i, t.grad, num)


class TestMatmul:
    def test_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(x)).values, x)

    def test_hand_product(self):
        out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.values, [[3], [7]])

    def test_grad_of_sum_is_ones_times_bt(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))
        ta = Tensor(a, requires_grad=True)
        with Tape():
            loss = ad.tsum(ad.matmul(ta, Tensor(b)))
        ad.backward(loss)
        np.testing.assert_allclose(ta.grad, np.ones((3, 2)) @ b.T)
        check_grad(lambda x, y: ad.tsum(ad.matmul(x, y)), a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestScatterSum:
    def test_single_segment(self):
        src = Tensor([[1.0, 2.0]])
        np.testing.assert_array_equal(ad.scatter_sum(src, [0], 1).values, src.values)

    def test_hand_sum(self):
        out = ad.scatter_sum(Tensor([[1.0], [2.0], [3.0]]), [0, 0, 1], 2)
        np.testing.assert_array_equal(out.values, [[3], [3]])

    def test_empty_segment_is_zero(self):
        out = ad.scatter_sum(Tensor([[1.0, 1.0], [2.0, 2.0]]), [0, 2], 3)
        np.testing.assert_array_equal(out.values[1], [0, 0])

    def test_index_out_of_range(self):
        with pytest.raises(ad.IndexOutOfRange):
            ad.scatter_sum(Tensor([[1.0]]), [3], 2)

    def test_backward_routes_to_segment_rows(self):
        src = Tensor(np.ones((4, 2)), requires_grad=True)
        upstream = np.array([[1.0, 2.0], [5.0, 7.0]])
        with Tape():
            out = ad.scatter_sum(src, [1, 0, 1, 1], 2)
            loss = ad.tsum(ad.mul(out, Tensor(upstream)))
        ad.backward(loss)
        np.testing.assert_array_equal(src.grad, upstream[[1, 0, 1, 1]])


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(Tensor([[-1.0, 2.0, 0.0]])).values, [[0, 2, 0]])

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor([[0.0]], requires_grad=True)
        with Tape():
            loss = ad.tsum(ad.relu(x))
        ad.backward(loss)
        assert x.grad[0, 0] == 0.0

    def test_leaky_relu(self):
        assert ad.leaky_relu(Tensor([[-1.0]]), 0.2).item() == pytest.approx(-0.2)

    def test_add_zeros(self):
        x = np.random.default_rng(1).normal(size=(3, 2))
        np.testing.assert_array_equal(ad.add(Tensor(x), Tensor(np.zeros((3, 2)))).values, x)

    def test_add_mismatch(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_concat_mismatch(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.concat_cols(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_sum_grad_is_ones(self):
        x = Tensor(np.random.default_rng(2).normal(size=(3, 5)), requires_grad=True)
        with Tape():
            loss = ad.tsum(x)
        ad.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 5)))

    def test_sum_of_squares_grad(self):
        v = np.random.default_rng(3).normal(size=(4, 2))
        x = Tensor(v, requires_grad=True)
        with Tape():
            loss = ad.tsum(ad.mul(x, x))
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * v)


class TestSoftmaxSegments:
    def test_single_entry(self):
        assert ad.softmax_segments(Tensor([[3.7]]), [0]).item() == 1.0

    def test_equal_scores(self):
        out = ad.softmax_segments(Tensor([[2.0], [2.0]]), [0, 0]).values
        np.testing.assert_allclose(out, [[0.5], [0.5]])

    def test_ln3(self):
        out = ad.softmax_segments(Tensor([[0.0], [np.log(3.0)]]), [0, 0]).values
        np.testing.assert_allclose(out, [[0.25], [0.75]], atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.integers(1, 5), st.integers(0, 10**6))
    def test_segments_sum_to_one(self, scores, segs, seed):
        rng = np.random.default_rng(seed)
        index = rng.integers(0, segs, size=len(scores))
        out = ad.softmax_segments(Tensor(np.array(scores).reshape(-1, 1)), index, segs).values[:, 0]
        assert np.all(out > 0) and np.all(out <= 1)
        sums = np.bincount(index, weights=out, minlength=segs)
        present = np.bincount(index, minlength=segs) > 0
        np.testing.assert_allclose(sums[present], 1.0, atol=1e-12)


class TestBatchnorm:
    def _params(self, d):
        return Tensor(np.ones((1, d)), requires_grad=True), Tensor(np.zeros((1, d)), requires_grad=True)

    def test_two_values(self):
        g, b = self._params(1)
        out = ad.batchnorm(Tensor([[0.0], [2.0]]), BatchNormState(1, eps=0.0), g, b, "train")
        np.testing.assert_allclose(out.values, [[-1.0], [1.0]])

    def test_constant_column_is_zero(self):
        g, b = self._params(2)
        out = ad.batchnorm(Tensor(np.full((4, 2), 3.0)), BatchNormState(2), g, b, "train")
        np.testing.assert_array_equal(out.values, 0.0)

    def test_eval_identity(self):
        g, b = self._params(3)
        x = np.random.default_rng(4).normal(size=(5, 3))
        out = ad.batchnorm(Tensor(x), BatchNormState(3, eps=0.0), g, b, "eval")
        np.testing.assert_allclose(out.values, x)

    def test_running_stats_update(self):
        g, b = self._params(1)
        st_ = BatchNormState(1, momentum=0.1)
        ad.batchnorm(Tensor([[0.0], [2.0]]), st_, g, b, "train")
        assert st_.running_mean[0, 0] == pytest.approx(0.1)
        assert st_.running_var[0, 0] == pytest.approx(0.9 + 0.1 * 2.0)

    def test_degenerate(self):
        g, b = self._params(1)
        with pytest.raises(ad.DegenerateBatch):
            ad.batchnorm(Tensor([[1.0]]), BatchNormState(1), g, b, "train")


class TestDropout:
    def test_p_zero_identity(self):
        x = Tensor(np.ones((3, 3)))
        rng = np.random.default_rng(0)
        for mode in ("train", "eval"):
            np.testing.assert_array_equal(ad.dropout(x, 0.0, mode, rng).values, x.values)

    def test_eval_identity(self):
        x = Tensor(np.ones((3, 3)))
        np.testing.assert_array_equal(ad.dropout(x, 0.3, "eval", None).values, x.values)

    def test_invalid(self):
        with pytest.raises(ad.InvalidProbability):
            ad.dropout(Tensor([[1.0]]), 1.0, "train", np.random.default_rng())

    def test_expectation_preserved(self):
        rng = np.random.Generator(np.random.Philox(key=7))
        x = Tensor(np.full((1000, 200), 2.0))
        mean = ad.dropout(x, 0.3, "train", rng).values.mean()
        assert abs(mean - 2.0) / 2.0 < 0.02

    def test_seeded_replay(self):
        x = Tensor(np.ones((10, 10)))
        a = ad.dropout(x, 0.3, "train", np.random.Generator(np.random.Philox(key=3))).values
        b = ad.dropout(x, 0.3, "train", np.random.Generator(np.random.Philox(key=3))).values
        np.testing.assert_array_equal(a, b)


class TestBackward:
    def test_not_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape():
            y = ad.scale(x, 2.0)
        with pytest.raises(ad.NotScalar):
            ad.backward(y)

    def test_tape_consumed(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape():
            loss = ad.tsum(x)
        ad.backward(loss)
        with pytest.raises(ad.TapeConsumed):
            ad.backward(loss)

    def test_reverse_order_visit(self):
        x = Tensor([[2.0]], requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)
            z = ad.add(y, x)
            loss = ad.tsum(z)
        assert [r.output for r in tape.records][-1] is loss
        ad.backward(loss)
        assert x.grad[0, 0] == pytest.approx(5.0)


RNG = np.random.default_rng(12345)


def U(*shape):
    return RNG.uniform(-2, 2, shape)


W_CAT = U(5, 1)
W_SOFT = U(5, 1)


@pytest.mark.parametrize("name,build,arrays", [
    ("matmul", lambda a, b: ad.tsum(ad.square(ad.matmul(a, b))), (U(3, 4), U(4, 2))),
    ("add_row", lambda a, b: ad.tsum(ad.square(ad.add(a, b))), (U(3, 4), U(1, 4))),
    ("sub_col", lambda a, b: ad.tsum(ad.square(ad.sub(a, b))), (U(3, 4), U(3, 1))),
    ("mul_scalar", lambda a, b: ad.tsum(ad.square(ad.mul(a, b))), (U(3, 4), U(1, 1))),
    ("scale", lambda a: ad.tsum(ad.square(ad.scale(a, -1.7))), (U(2, 3),)),
    ("relu", lambda a: ad.tsum(ad.square(ad.relu(a))), (U(4, 3),)),
    ("leaky", lambda a: ad.tsum(ad.square(ad.leaky_relu(a, 0.2))), (U(4, 3),)),
    ("sigmoid", lambda a: ad.tsum(ad.square(ad.sigmoid(a))), (U(4, 3),)),
    ("tanh", lambda a: ad.tsum(ad.square(ad.tanh(a))), (U(4, 3),)),
    ("sqrt", lambda a: ad.sqrt(ad.tsum(ad.square(a))), (U(4, 3),)),
    ("concat", lambda a, b: ad.tsum(ad.square(ad.matmul(ad.concat_cols(a, b), Tensor(W_CAT)))),
     (U(3, 2), U(3, 3))),
    ("gather", lambda a: ad.tsum(ad.square(ad.gather_rows(a, [0, 2, 2, 1]))), (U(3, 2),)),
    ("scatter", lambda a: ad.tsum(ad.square(ad.scatter_sum(a, [1, 0, 1, 1], 3))), (U(4, 2),)),
    ("softmax", lambda a: ad.tsum(ad.mul(ad.softmax_segments(a, [0, 1, 0, 1, 1], 2), Tensor(W_SOFT))),
     (U(5, 1),)),
])
def test_op_gradients_match_finite_differences(name, build, arrays):
    check_grad(build, *arrays)


def test_batchnorm_train_gradient():
    w = U(6, 3)

    def build(x, g, b):
        return ad.tsum(ad.mul(ad.batchnorm(x, BatchNormState(3), g, b, "train"), Tensor(w)))

    check_grad(build, U(6, 3), U(1, 3), U(1, 3))


def test_batchnorm_eval_gradient():
    state = BatchNormState(3)
    state.running_mean = U(1, 3)
    state.running_var = RNG.uniform(0.5, 2, (1, 3))
    w = U(6, 3)
    check_grad(lambda x, g, b: ad.tsum(ad.mul(ad.batchnorm(x, state, g, b, "eval"), Tensor(w))),
               U(6, 3), U(1, 3), U(1, 3))


def test_dropout_gradient_uses_same_mask():
    w = U(5, 4)

    def build(x):
        rng = np.random.Generator(np.random.Philox(key=11))
        return ad.tsum(ad.mul(ad.dropout(x, 0.3, "train", rng), Tensor(w)))

    check_grad(build, U(5, 4))
