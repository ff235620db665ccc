import math

import numpy as np
import pytest

from fadct import engine as E
from fadct.engine import DomainError, ShapeError, Tensor
from fadct.gradcheck import check_gradients, finite_difference, grad_error


def test_sigmoid_at_zero():
    assert E.sigmoid(Tensor(0.0)).item() == 0.5


def test_exp_log_inverse_pair():
    assert abs(E.exp(E.log(Tensor(3.0))).item() - 3.0) < 1e-12


def test_sigmoid_gradient_at_zero_matches_finite_difference():
    x = Tensor(0.0, requires_grad=True)
    E.sigmoid(x).backward()
    assert abs(x.grad.reshape(()) - 0.25) < 1e-12
    numeric = finite_difference(lambda: E.sigmoid(x).item(), x, h=1e-6)
    assert abs(x.grad - numeric).max() < 1e-7


def test_matmul_identity():
    v = np.array([[1.5], [-2.0], [0.25]])
    out = E.matmul(Tensor(np.eye(3)), Tensor(v))
    assert np.array_equal(out.data, v)


def test_matmul_hand_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    assert np.array_equal(E.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_gradient_matches_finite_difference():
    rng = np.random.default_rng(11)
    a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    worst = check_gradients(lambda: E.tsum(E.matmul(a, b)), [a, b])
    assert worst < 1e-6


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ShapeError) as err:
        E.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_elementwise_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        E.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    assert "(2, 3)" in str(err.value) and "(3, 2)" in str(err.value)


def test_scalar_broadcast_with_0d_tensor():
    s = Tensor(2.0, requires_grad=True)
    x = Tensor(np.arange(6.0).reshape(2, 3))
    out = E.tsum(E.mul(s, x))
    out.backward()
    assert out.item() == 30.0
    assert s.grad.shape == ()
    assert float(s.grad) == 15.0


def test_softmax_uniform():
    out = E.softmax(Tensor(np.zeros(4)))
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_softmax_exact_exponentials():
    v = Tensor(np.log([1.0, 2.0, 3.0, 4.0]))
    assert np.abs(E.softmax(v).data - [0.1, 0.2, 0.3, 0.4]).max() < 1e-12


def test_softmax_shift_invariance_and_simplex():
    rng = np.random.default_rng(3)
    for _ in range(10):
        v = rng.normal(size=7) * 5
        p1 = E.softmax(Tensor(v)).data
        p2 = E.softmax(Tensor(v + 100.0)).data
        assert np.abs(p1 - p2).max() < 1e-12
        assert (p1 >= 0).all()
        assert abs(p1.sum() - 1.0) < 1e-12


def test_softmax_empty_is_domain_error():
    with pytest.raises(DomainError):
        E.softmax(Tensor(np.zeros(0)))


def test_cross_entropy_uniform_logits():
    loss = E.cross_entropy(Tensor(np.zeros(4)), 1)
    assert abs(loss.item() - math.log(4.0)) < 1e-12


def test_cross_entropy_saturated_logits_no_overflow():
    logits = np.zeros(5)
    logits[2] = 1000.0
    loss = E.cross_entropy(Tensor(logits), 2)
    assert np.isfinite(loss.item())
    assert loss.item() < 1e-9


def test_cross_entropy_gradient_identity():
    # analytic gradient of -log softmax[label] is softmax(logits) - one_hot
    rng = np.random.default_rng(5)
    logits = Tensor(rng.normal(size=5) * 3, requires_grad=True)
    E.cross_entropy(logits, 3).backward()
    probs = E.softmax(Tensor(logits.data)).data
    onehot = np.eye(5)[3]
    assert np.abs(logits.grad - (probs - onehot)).max() < 1e-9


def test_cross_entropy_label_out_of_range():
    with pytest.raises(DomainError):
        E.cross_entropy(Tensor(np.zeros(4)), 4)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(5.0), requires_grad=True)
    E.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones(5))


def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    E.tsum(E.mul(x, x)).backward()
    assert np.abs(x.grad - 2 * x.data).max() < 1e-12


def test_graph_reuse_accumulates_both_branches():
    x = Tensor(3.0, requires_grad=True)
    (x + x).backward()
    assert float(x.grad) == 2.0


def test_backward_requires_scalar_root():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(DomainError):
        (x + x).backward()


def test_backward_twice_on_same_graph_is_an_error():
    x = Tensor(2.0, requires_grad=True)
    loss = E.mul(x, x)
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_leaf_grads_accumulate_across_graphs():
    x = Tensor(2.0, requires_grad=True)
    E.mul(x, x).backward()
    E.mul(x, x).backward()
    assert float(x.grad) == 8.0  # 2x twice


def test_every_reachable_tensor_gets_a_grad_buffer():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    mid = E.exp(x)
    out = E.tsum(E.mul(mid, mid))
    out.backward()
    for t in (x, mid, out):
        assert t.grad is not None
        assert t.grad.shape == t.shape


def test_backward_into_dict_leaves_grad_untouched():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    grads: dict = {}
    E.tsum(E.mul(x, x)).backward(into=grads)
    assert x.grad is None
    assert np.array_equal(grads[x], 2 * x.data)


def test_no_grad_disables_graph_recording():
    x = Tensor(1.0, requires_grad=True)
    with E.no_grad():
        out = E.exp(x)
    assert not out.requires_grad
    assert out._backward is None


def test_expand_requires_unit_axis():
    with pytest.raises(ShapeError):
        E.expand(Tensor(np.zeros((2, 3))), 0, 4)


def test_matmul_shared_matrix_over_stack():
    rng = np.random.default_rng(9)
    a = Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    out = E.matmul(a, b)
    assert out.shape == (3, 2, 5)
    worst = check_gradients(lambda: E.tsum(E.mul(E.matmul(a, b), E.matmul(a, b))), [a, b])
    assert worst < 1e-6


def test_matmul_stack_mismatch_rejected():
    with pytest.raises(ShapeError):
        E.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((3, 4, 5))))


def test_concat_and_slice_roundtrip_gradients():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.arange(6.0, 12.0).reshape(2, 3), requires_grad=True)
    joined = E.concat([a, b], axis=0)
    E.tsum(E.tslice(joined, (slice(1, 3), slice(None)))).backward()
    assert np.array_equal(a.grad, [[0, 0, 0], [1, 1, 1]])
    assert np.array_equal(b.grad, [[1, 1, 1], [0, 0, 0]])


def test_division_by_tensor_gradients():
    a = Tensor(np.array([2.0, 4.0]), requires_grad=True)
    b = Tensor(np.array([4.0, 8.0]), requires_grad=True)
    E.tsum(E.div(a, b)).backward()
    assert np.abs(a.grad - 1.0 / b.data).max() < 1e-12
    assert np.abs(b.grad - (-a.data / b.data ** 2)).max() < 1e-12


def test_grad_error_metric_near_zero_uses_absolute_tolerance():
    assert grad_error(np.array([0.0]), np.array([5e-8])) < 1e-4
    assert grad_error(np.array([0.0]), np.array([5e-7])) > 1e-4
