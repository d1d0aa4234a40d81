import math

import numpy as np
import pytest

from core.errors import ContractError, ShapeError
from ssf.tensor import Tape, Tensor, backward, ops

from tests.helpers import numeric_grad


def t64(values, requires_grad=False):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


# =============================================================================
# Forward ops
# =============================================================================

class TestForwardOps:
    def test_matmul_identity_and_worked_example(self):
        a = t64([[1, 2], [3, 4]])
        assert np.array_equal(ops.matmul(t64(np.eye(2)), a).data, a.data)
        out = ops.matmul(a, t64([[5, 6], [7, 8]]))
        assert np.array_equal(out.data, [[19, 22], [43, 50]])

    def test_matmul_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            ops.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 2))))
        assert "[2, 3]" in str(err.value) and "[2, 2]" in str(err.value)

    def test_softmax_rows(self):
        assert np.allclose(ops.softmax_rows(t64([[0, 0, 0]])).data, 1.0 / 3.0)
        assert np.allclose(ops.softmax_rows(t64([[1000.0, 1000.0]])).data, [[0.5, 0.5]])
        assert np.allclose(ops.softmax_rows(t64([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        x = t64(np.random.default_rng(0).standard_normal((5, 7)) * 30)
        assert np.allclose(ops.softmax_rows(x).data.sum(axis=-1), 1.0)

    def test_layernorm_examples(self):
        ones, zeros = t64([1, 1, 1]), t64([0, 0, 0])
        assert np.allclose(ops.layernorm(t64([[1, 1, 1]]), ones, zeros, 1e-6).data, 0.0)
        out = ops.layernorm(t64([[-1, 1]]), t64([1, 1]), t64([0, 0]), 1e-6).data
        assert np.allclose(out, [[-1, 1]], atol=1e-5)

    def test_layernorm_zero_gain_returns_shift(self):
        x = t64(np.random.default_rng(1).standard_normal((3, 4)))
        b = t64([0.5, -1.0, 2.0, 0.0])
        out = ops.layernorm(x, t64(np.zeros(4)), b, 1e-6).data
        assert np.array_equal(out, np.broadcast_to(b.data, (3, 4)))

    def test_gelu(self):
        assert ops.gelu(t64([0.0])).data[0] == 0.0
        assert ops.gelu(t64([1.0])).data[0] == pytest.approx(0.8413447460685429, abs=1e-12)

    def test_linear_identity(self):
        x = t64(np.random.default_rng(2).standard_normal((4, 3)))
        assert np.array_equal(ops.linear(x, t64(np.eye(3)), t64(np.zeros(3))).data, x.data)

    def test_linear_bias_mismatch(self):
        with pytest.raises(ShapeError):
            ops.linear(t64(np.ones((2, 3))), t64(np.ones((4, 3))), t64(np.ones(3)))

    def test_add_broadcasts_suffix_only(self):
        x = t64(np.zeros((2, 3, 4)))
        assert ops.add(x, t64(np.ones(4))).shape == (2, 3, 4)
        assert ops.add(x, t64(np.ones((3, 4)))).shape == (2, 3, 4)
        with pytest.raises(ShapeError):
            ops.add(x, t64(np.ones(3)))

    def test_concat_and_slice_tokens(self):
        x = t64(np.zeros((1, 17, 8)))
        p = t64(np.ones((1, 3, 8)))
        out = ops.concat_tokens(x, p)
        assert out.shape == (1, 20, 8)
        assert np.array_equal(ops.slice_tokens(out, 17, 20).data, p.data)
        with pytest.raises(ShapeError):
            ops.slice_tokens(out, 5, 30)

    def test_cross_entropy_uniform_logits(self):
        loss = ops.cross_entropy(t64(np.zeros((3, 4))), np.array([0, 1, 3]))
        assert loss.ndim == 0
        assert loss.item() == pytest.approx(math.log(4.0))

    def test_patchify_row_major(self):
        images = np.arange(2 * 1 * 4 * 4, dtype=np.float64).reshape(2, 1, 4, 4)
        patches = ops.patchify(images, 2)
        assert patches.shape == (2, 4, 4)
        assert np.array_equal(patches[0, 1], [2, 3, 6, 7])


# =============================================================================
# Tape
# =============================================================================

class TestTape:
    def test_backward_requires_scalar(self):
        x = t64([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, x)
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_backward_outside_tape(self):
        with pytest.raises(ContractError):
            backward(t64(1.0))

    def test_reused_tensor_accumulates(self):
        x = t64([1.0, -2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(x, x))
            tape.backward(loss)
        assert np.allclose(x.grad, 2.0 * x.data)

    def test_independent_parameter_gets_no_gradient(self):
        x = t64([1.0, 2.0], requires_grad=True)
        p = t64([5.0], requires_grad=True)
        with Tape() as tape:
            tape.backward(ops.sum_all(x))
        assert p.grad is None or not p.grad.any()

    def test_frozen_inputs_are_not_recorded(self):
        x = t64([1.0, 2.0])
        with Tape() as tape:
            ops.mul(x, x)
        assert tape.nodes == []

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal((2, 3, 4))
        w = t64(rng.standard_normal((5, 4)))
        b = t64(rng.standard_normal(5))
        g, beta = t64(1.0 + 0.1 * rng.standard_normal(4)), t64(0.1 * rng.standard_normal(4))
        labels = np.array([1, 4])

        def loss_of(arr, requires_grad=False):
            x = Tensor(arr, requires_grad=requires_grad)
            h = ops.layernorm(x, g, beta, 1e-6)
            h = ops.gelu(ops.linear(h, w, b))
            logits = ops.reshape(ops.slice_tokens(h, 0, 1), (2, 5))
            return x, ops.cross_entropy(logits, labels)

        with Tape() as tape:
            x, loss = loss_of(x0, requires_grad=True)
            tape.backward(loss)
        numeric = numeric_grad(lambda a: loss_of(a)[1].item(), x0)
        assert np.allclose(x.grad, numeric, atol=1e-7)

    def test_backward_is_deterministic(self):
        rng = np.random.default_rng(11)
        x0, w0 = rng.standard_normal((3, 5, 8)), rng.standard_normal((6, 8))
        labels = np.array([0, 5, 2])

        def grads():
            x = Tensor(x0.astype(np.float32), requires_grad=True)
            w = Tensor(w0.astype(np.float32), requires_grad=True)
            with Tape() as tape:
                h = ops.softmax_rows(ops.linear(x, w))
                logits = ops.reshape(ops.slice_tokens(h, 0, 1), (3, 6))
                tape.backward(ops.cross_entropy(logits, labels))
            return x.grad, w.grad

        (gx1, gw1), (gx2, gw2) = grads(), grads()
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)


class TestTensor:
    def test_item_of_a_scalar(self):
        assert t64(2.5).item() == 2.5
        assert t64([[3.0]]).item() == 3.0

    def test_item_rejects_non_scalars(self):
        with pytest.raises(ShapeError):
            t64([1.0, 2.0]).item()
