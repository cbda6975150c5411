import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmtm import tensor as T
from cmtm.errors import DimensionError, UsageError
from cmtm.tensor import Tape, Tensor, backward

from conftest import check_op_grad

OP_TOL = 1e-4


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_arithmetic(self):
        assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_of_sum(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        assert check_op_grad(T.matmul, a, b) < OP_TOL

    def test_grad_of_sum_wrt_a_is_rowsum_of_b(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=(4, 2)), dtype=np.float64)
        backward(T.sum(T.matmul(a, b)))
        np.testing.assert_allclose(a.grad, np.tile(b.data.sum(axis=1), (3, 1)))

    def test_batched_weight_grad_sums_over_batch(self, rng):
        assert check_op_grad(T.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))) < OP_TOL


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-7)

    def test_large_logits_stay_finite(self):
        out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-7)

    def test_grad(self, rng):
        assert check_op_grad(T.softmax_rows, rng.normal(size=(4, 5))) < OP_TOL

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        out = T.softmax_rows(Tensor(x)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = T.layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_zero_gamma_gives_beta(self, rng):
        beta = rng.normal(size=5)
        out = T.layer_norm(Tensor(rng.normal(size=(3, 5))), Tensor(np.zeros(5)), Tensor(beta))
        np.testing.assert_allclose(out.data, np.tile(beta, (3, 1)).astype(np.float32))

    def test_normalises_rows(self, rng):
        out = T.layer_norm(Tensor(rng.normal(3, 4, size=(6, 8))), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        assert np.all(np.abs(out.mean(axis=1)) < 1e-5)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)

    def test_grad(self, rng):
        err = check_op_grad(lambda x, g, b: T.layer_norm(x, g, b, 1e-5),
                            rng.normal(size=(6, 8)), rng.normal(size=8), rng.normal(size=8))
        assert err < OP_TOL

    def test_affine_shape_checked(self):
        with pytest.raises(DimensionError):
            T.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestConcat:
    def test_rows(self):
        assert T.concat_rows(Tensor([[1, 2]]), Tensor([[3, 4]])).data.tolist() == [[1, 2], [3, 4]]

    def test_round_trip_is_bitwise(self, rng):
        a, b = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(4, 5)))
        top, bottom = T.split_rows(T.concat_rows(a, b), 3)
        assert top.data.tobytes() == a.data.tobytes()
        assert bottom.data.tobytes() == b.data.tobytes()

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat_rows(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3))))

    def test_grad_of_second_half_reaches_only_b(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=np.float64)

        def loss():
            return T.sum(T.split_rows(T.concat_rows(a, b), 2)[1])

        backward(loss())
        from cmtm.harness.gradcheck import central_difference

        np.testing.assert_allclose(a.grad, central_difference(lambda: loss().item(), a.data), atol=1e-9)
        np.testing.assert_allclose(b.grad, central_difference(lambda: loss().item(), b.data), atol=1e-9)
        np.testing.assert_array_equal(a.grad, 0.0)
        np.testing.assert_array_equal(b.grad, 1.0)

    def test_grad(self, rng):
        assert check_op_grad(T.concat_rows, rng.normal(size=(2, 3)), rng.normal(size=(5, 3))) < OP_TOL


@pytest.mark.parametrize("name, fn, shapes", [
    ("add", T.add, [(3, 4), (4,)]),
    ("sub", T.sub, [(3, 4), (3, 4)]),
    ("mul", T.mul, [(3, 4), (1, 4)]),
    ("gelu", T.gelu, [(3, 4)]),
    ("sigmoid", T.sigmoid, [(3, 4)]),
    ("scale", lambda x: T.scale(x, -2.5), [(3, 4)]),
    ("transpose", lambda x: T.transpose(x, (2, 0, 1)), [(2, 3, 4)]),
    ("swap_last", T.swap_last, [(2, 3, 4)]),
    ("reshape", lambda x: T.reshape(x, (6, 2)), [(3, 4)]),
    ("sum_axis", lambda x: T.sum(x, axis=1), [(3, 4)]),
    ("mean", lambda x: T.mean(x, axis=0), [(3, 4)]),
    ("upsample", lambda x: T.upsample_nearest(x, 2), [(1, 2, 3, 2)]),
    ("slice", lambda x: T.slice_axis(x, 1, 3, axis=0), [(4, 2)]),
    ("where", lambda a, b: T.where(np.array([[True], [False], [True]]), a, b), [(3, 4), (4,)]),
])
def test_elementwise_and_structural_grads(name, fn, shapes, rng):
    assert check_op_grad(fn, *[rng.normal(size=s) for s in shapes]) < OP_TOL, name


class TestBce:
    def test_zero_logits_give_ln2(self):
        loss = T.bce_with_logits(Tensor(np.zeros((4, 4))), np.eye(4))
        assert loss.item() == pytest.approx(np.log(2), abs=1e-7)

    def test_grad(self, rng):
        y = (rng.random((3, 5)) > 0.5).astype(np.float64)
        assert check_op_grad(lambda z: T.bce_with_logits(z, y), rng.normal(size=(3, 5)) * 3) < OP_TOL


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_shared_parent_accumulates(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        backward(T.sum(T.add(x, x)))
        np.testing.assert_array_equal(x.grad, 2.0)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(UsageError):
            backward(Tensor(np.ones(3), requires_grad=True))

    def test_graph_is_single_use(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.sum(x)
        backward(loss)
        with pytest.raises(UsageError):
            backward(loss)

    def test_grads_reset_each_call(self):
        x = Tensor(np.ones(3), requires_grad=True)
        backward(T.sum(x))
        backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_tape_is_topologically_ordered(self, rng):
        a = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        b = T.gelu(a)
        c = T.matmul(b, a)
        loss = T.sum(T.add(c, b))
        tape = Tape.from_loss(loss)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        assert len(pos) == len(tape.nodes)
        for node in tape.nodes:
            for p in node._parents:
                assert pos[id(p)] < pos[id(node)]

    def test_deterministic(self, rng):
        x = rng.normal(size=(5, 6))

        def run():
            t = Tensor(x, requires_grad=True)
            out = T.softmax_rows(T.matmul(t, T.swap_last(t)))
            backward(T.sum(T.mul(out, out)))
            return out.data.tobytes(), t.grad.tobytes()

        assert run() == run()

    def test_float32_by_default(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32
