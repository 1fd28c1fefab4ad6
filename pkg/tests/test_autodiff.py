"""Gradient checks for the reverse-mode tape.

Every op's analytic gradient is compared against central finite differences
(h = 1e-6) on random inputs drawn in [-2, 2], over 20 seeds per op.  The
comparison uses per-element error |ad - fd| <= tol * (1 + |fd|).
"""

import numpy as np
import pytest

import mrine.autodiff as ad
from mrine.autodiff import AutodiffError, Graph, SingularMatrixError, Tensor

H = 1e-6
TOL = 1e-5
SEEDS = range(20)


def fd_grads(f, arrays, h=H):
    """Central finite differences of the scalar float(f(*arrays))."""

    def val():
        # graphless Tensors so f sees the same op set in both modes
        return float(f(*(Tensor(x) for x in arrays)).data)

    out = []
    for x in arrays:
        g = np.zeros_like(x)
        xf, gf = x.reshape(-1), g.reshape(-1)
        for j in range(xf.size):
            orig = xf[j]
            xf[j] = orig + h
            fp = val()
            xf[j] = orig - h
            fm = val()
            xf[j] = orig
            gf[j] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def ad_grads(f, arrays):
    ts = [Tensor(x, requires_grad=True) for x in arrays]
    with Graph() as g:
        g.backward(f(*ts))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def check_grads(f, arrays, tol=TOL):
    got = ad_grads(f, [x.copy() for x in arrays])
    want = fd_grads(f, [x.copy() for x in arrays])
    for a, b in zip(got, want):
        assert np.all(np.abs(a - b) <= tol * (1.0 + np.abs(b))), (a, b)


def rand(rng, *shape):
    return rng.uniform(-2.0, 2.0, shape)


# ---------------------------------------------------------------------------
# elementwise ops vs finite differences


@pytest.mark.parametrize("seed", SEEDS)
def test_add_sub_mul_grads(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 3, 4), rand(rng, 3, 4)
    check_grads(lambda x, y: (x + y).sum(), [a, b])
    check_grads(lambda x, y: (x - y).sum(), [a, b])
    check_grads(lambda x, y: (x * y).sum(), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_broadcast_grads(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 3, 1), rand(rng, 1, 4)
    check_grads(lambda x, y: (x * y + x).sum(), [a, b])
    c = rand(rng, 4)
    check_grads(lambda x, y: (x + y).sum(), [rand(rng, 2, 3, 4), c])


@pytest.mark.parametrize("seed", SEEDS)
def test_unary_grads(seed):
    rng = np.random.default_rng(seed)
    a = rand(rng, 2, 5)
    check_grads(lambda x: ad.square(x).sum(), [a])
    check_grads(lambda x: ad.exp(x).sum(), [a])
    check_grads(lambda x: ad.tanh(x).sum(), [a])
    check_grads(lambda x: ad.softplus(x).sum(), [a])
    pos = rng.uniform(0.1, 2.0, (2, 5))
    check_grads(lambda x: ad.log(x).sum(), [pos])


@pytest.mark.parametrize("seed", SEEDS)
def test_clip_grad_inside_bounds(seed):
    rng = np.random.default_rng(seed)
    # keep samples away from the kinks so finite differences stay valid
    a = rng.uniform(-0.9, 0.9, (3, 3))
    check_grads(lambda x: ad.clip(x, -1.0, 1.0).sum(), [a])


def test_clip_grad_zero_outside_bounds():
    x = Tensor(np.array([-5.0, 0.0, 5.0]), requires_grad=True)
    with Graph() as g:
        g.backward(ad.clip(x, -1.0, 1.0).sum())
    assert np.array_equal(x.grad, np.array([0.0, 1.0, 0.0]))


@pytest.mark.parametrize("seed", SEEDS)
def test_reduction_grads(seed):
    rng = np.random.default_rng(seed)
    a = rand(rng, 3, 4)
    check_grads(lambda x: x.sum(), [a])
    check_grads(lambda x: ad.square(x.sum(axis=0)).sum(), [a])
    check_grads(lambda x: ad.square(x.sum(axis=1, keepdims=True)).sum(), [a])
    check_grads(lambda x: x.mean(), [a])
    check_grads(lambda x: ad.square(x.mean(axis=1)).sum(), [a])


@pytest.mark.parametrize("seed", SEEDS)
def test_shape_op_grads(seed):
    rng = np.random.default_rng(seed)
    a = rand(rng, 3, 4)
    check_grads(lambda x: ad.square(ad.reshape(x, (4, 3))).sum(), [a])
    check_grads(lambda x: ad.square(ad.transpose(x)).sum(), [a])
    check_grads(lambda x: ad.square(x[1:3]).sum(), [a])
    check_grads(lambda x: ad.square(x[:, 2]).sum(), [a])


@pytest.mark.parametrize("seed", SEEDS)
def test_take_rows_grads_with_duplicates(seed):
    rng = np.random.default_rng(seed)
    a = rand(rng, 5, 3)
    idx = np.array([0, 2, 2, 4, 1])
    check_grads(lambda x: ad.square(ad.take_rows(x, idx)).sum(), [a])


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_stack_grads(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 2, 3), rand(rng, 2, 3)
    check_grads(lambda x, y: ad.square(ad.concat([x, y], axis=1)).sum(), [a, b])
    check_grads(lambda x, y: ad.square(ad.concat([x, y], axis=0)).sum(), [a, b])
    check_grads(lambda x, y: ad.square(ad.stack([x, y], axis=0)).sum(), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_grads(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    check_grads(lambda x, y: ad.square(x @ y).sum(), [a, b])
    # batched left operand against a shared right matrix
    c = rand(rng, 2, 3, 4)
    check_grads(lambda x, y: ad.square(x @ y).sum(), [c, b])


def _well_conditioned(rng, n):
    return 0.3 * rng.uniform(-2.0, 2.0, (n, n)) + 2.0 * np.eye(n)


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_solve_grads(seed):
    rng = np.random.default_rng(seed)
    a = _well_conditioned(rng, 3)
    b = rand(rng, 3, 2)
    check_grads(lambda x, y: ad.square(ad.linear_solve(x, y)).sum(), [a, b], tol=1e-4)


@pytest.mark.parametrize("seed", SEEDS)
def test_matrix_inverse_grads(seed):
    rng = np.random.default_rng(seed)
    a = _well_conditioned(rng, 3)
    check_grads(lambda x: ad.square(ad.matrix_inverse(x)).sum(), [a], tol=1e-4)


@pytest.mark.parametrize("seed", SEEDS)
def test_cholesky_grads(seed):
    rng = np.random.default_rng(seed)
    # x @ x.T + n I keeps the cholesky input symmetric PD under perturbation
    a = rand(rng, 3, 3)
    check_grads(
        lambda x: ad.square(ad.cholesky(x @ ad.transpose(x) + 3.0 * np.eye(3))).sum(),
        [a], tol=1e-4)


# ---------------------------------------------------------------------------
# analytic spot values


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((a @ np.eye(2)).data, a.data)


def test_softplus_zero_is_log_two():
    assert abs(float(ad.softplus(Tensor(0.0)).data) - np.log(2.0)) < 1e-12


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Graph() as g:
        g.backward(ad.square(x).sum())
    assert np.allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-12)
    check_grads(lambda v: ad.square(v).sum(), [np.array([1.0, 2.0, 3.0])])


def test_identity_loss_gradient_is_one():
    x = Tensor(3.5, requires_grad=True)
    with Graph() as g:
        g.backward(x + 0.0)
    assert x.grad == 1.0


def test_zero_times_x_gradient_is_zero():
    x = Tensor(3.5, requires_grad=True)
    with Graph() as g:
        g.backward(x * 0.0)
    assert x.grad == 0.0


def test_log_exp_gradient_is_one():
    x = Tensor(3.0, requires_grad=True)
    with Graph() as g:
        g.backward(ad.log(ad.exp(x)))
    assert abs(float(x.grad) - 1.0) < 1e-10
    check_grads(lambda v: ad.log(ad.exp(v)), [np.array(3.0)])


def test_fanout_grad_sums_both_paths():
    def f(x):
        return (ad.square(x) + ad.tanh(x) * 3.0).sum()

    rng = np.random.default_rng(11)
    check_grads(f, [rand(rng, 4)])


# ---------------------------------------------------------------------------
# numeric properties


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_associativity(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1.0, 1.0, (5, 8))
    b = rng.uniform(-1.0, 1.0, (8, 7))
    c = rng.uniform(-1.0, 1.0, (7, 6))
    left = ((Tensor(a) @ b) @ c).data
    right = (Tensor(a) @ (Tensor(b) @ c).data).data
    assert np.abs(left - right).max() <= 1e-10


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_solve_residual(seed):
    rng = np.random.default_rng(seed)
    a = _well_conditioned(rng, 4)
    assert np.linalg.cond(a) < 1e6
    b = rand(rng, 4, 3)
    x = ad.linear_solve(Tensor(a), Tensor(b)).data
    assert np.abs(a @ x - b).max() <= 1e-9


def test_matrix_inverse_matches_solve():
    rng = np.random.default_rng(5)
    a = _well_conditioned(rng, 4)
    inv = ad.matrix_inverse(Tensor(a)).data
    assert np.allclose(a @ inv, np.eye(4), atol=1e-10)


def test_cholesky_reconstructs_input():
    rng = np.random.default_rng(6)
    m = rand(rng, 4, 4)
    spd = m @ m.T + 4.0 * np.eye(4)
    l = ad.cholesky(Tensor(spd)).data
    assert np.allclose(np.tril(l), l)
    assert np.allclose(l @ l.T, spd, atol=1e-10)


# ---------------------------------------------------------------------------
# tape mechanics and error paths


def test_ops_outside_graph_keep_no_history():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ad.square(x).sum()
    assert y._backward is None and y._parents == ()
    assert not y.requires_grad


def test_graph_records_only_grad_paths():
    with Graph() as g:
        _ = ad.square(Tensor([1.0, 2.0])) + 1.0
        assert g.nodes == []
        _ = ad.square(Tensor([1.0], requires_grad=True))
        assert len(g.nodes) == 1


def test_backward_rejects_nonscalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        y = ad.square(x)
        with pytest.raises(AutodiffError):
            g.backward(y)


def test_backward_twice_raises():
    x = Tensor(2.0, requires_grad=True)
    with Graph() as g:
        y = ad.square(x)
        g.backward(y)
        with pytest.raises(AutodiffError):
            g.backward(y)


def test_nested_graphs_restore_outer():
    with Graph() as outer:
        with Graph():
            pass
        _ = ad.square(Tensor(1.0, requires_grad=True))
        assert len(outer.nodes) == 1


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ValueError):
        _ = Tensor(np.ones((2, 3))) @ np.ones((2, 3))
    with pytest.raises(ValueError):
        _ = Tensor(np.ones(3)) @ np.ones((3, 2))


def test_singular_solve_raises():
    singular = np.array([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(SingularMatrixError):
        ad.linear_solve(Tensor(singular), Tensor(np.ones((2, 1))))
    with pytest.raises(SingularMatrixError):
        ad.matrix_inverse(Tensor(singular))


def test_cholesky_rejects_non_pd():
    with pytest.raises(SingularMatrixError):
        ad.cholesky(Tensor(np.array([[1.0, 0.0], [0.0, -1.0]])))


def test_transpose_needs_two_dims():
    with pytest.raises(ValueError):
        ad.transpose(Tensor(np.ones(3)))


def test_has_nonfinite():
    assert ad.has_nonfinite(Tensor([1.0, np.nan]))
    assert ad.has_nonfinite(Tensor([np.inf]))
    assert not ad.has_nonfinite(Tensor([1.0, -2.0]))
