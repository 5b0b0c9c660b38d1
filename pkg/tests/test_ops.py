import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtplab.errors import ConfigError, EvaluationError, ShapeError
from mtplab.tensorcore import DifferentiableOp, Rng, Tensor, composite, grad_check
from mtplab.tensorcore import gap, leaky_relu, matmul, softmax_rows
from mtplab.tensorcore import gradcheck as gc
from mtplab.tensorcore import ops
from mtplab.tensorcore.autodiff import Var, apply_op


# ----------------------------------------------------------------- oracles


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def softmax_oracle_highprec(x: np.ndarray) -> np.ndarray:
    import mpmath

    with mpmath.workdps(50):
        out = np.zeros_like(x)
        for i in range(x.shape[0]):
            exps = [mpmath.e ** mpmath.mpf(v) for v in x[i]]
            total = sum(exps)
            out[i] = [float(e / total) for e in exps]
        return out


# ----------------------------------------------------------------- matmul


def test_matmul_identity():
    out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_hand_case():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert np.array_equal(out.data, [[11.0]])


def test_matmul_matches_triple_loop_oracle():
    rng = Rng(11)
    a = rng.normals((3, 4))
    b = rng.normals((4, 2))
    out = matmul(Tensor(a), Tensor(b))
    assert np.max(np.abs(out.data - matmul_oracle(a, b))) <= 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_bit_deterministic():
    rng = Rng(12)
    a, b = Tensor(rng.normals((5, 7))), Tensor(rng.normals((7, 3)))
    first = matmul(a, b)
    for _ in range(5):
        assert matmul(a, b).bitwise_equal(first)


# ----------------------------------------------------------------- softmax


def test_softmax_symmetric_row():
    out = softmax_rows(Tensor([[0.0, 0.0]]))
    assert np.allclose(out.data, [[0.5, 0.5]], atol=0)


def test_softmax_no_overflow_on_large_inputs():
    out = softmax_rows(Tensor([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0, 0] > 1.0 - 1e-12
    assert out.data[0, 1] < 1e-12


def test_softmax_matches_high_precision_oracle():
    x = Rng(13).normals((4, 4)) * 3.0
    out = softmax_rows(Tensor(x))
    assert np.max(np.abs(out.data - softmax_oracle_highprec(x))) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.lists(st.floats(min_value=-1e4, max_value=1e4), min_size=3, max_size=3),
        min_size=1,
        max_size=4,
    )
)
def test_softmax_rows_sum_to_one(rows):
    out = softmax_rows(Tensor(rows))
    assert np.max(np.abs(out.data.sum(axis=1) - 1.0)) <= 1e-6
    assert np.all(out.data >= 0.0)


# ----------------------------------------------------------------- gap


def test_gap_constant_channel():
    out = gap(Tensor(np.full((2, 3, 3), 7.0)))
    assert np.array_equal(out.data, [7.0, 7.0])


def test_gap_hand_case():
    out = gap(Tensor([[[1.0, 3.0], [5.0, 7.0]]]))
    assert np.array_equal(out.data, [4.0])


def test_gap_matches_naive_sum_oracle():
    x = Rng(14).normals((3, 5, 5))
    out = gap(Tensor(x))
    naive = np.array([sum(x[c, i, j] for i in range(5) for j in range(5)) / 25 for c in range(3)])
    assert np.max(np.abs(out.data - naive)) <= 1e-12


# ----------------------------------------------------------------- leaky relu


def test_leaky_relu_values():
    out = leaky_relu(Tensor([2.0, -3.0, 0.0]), slope=0.01)
    assert np.array_equal(out.data, [2.0, -0.03, 0.0])


@pytest.mark.parametrize("slope", [0.0, 1.0, -0.1, 1.5])
def test_leaky_relu_slope_validation(slope):
    with pytest.raises(ConfigError):
        leaky_relu(Tensor([1.0]), slope=slope)


# ----------------------------------------------------------------- grad_check harness


def test_grad_check_exact_linear_op():
    op = DifferentiableOp(
        "triple",
        lambda x: Tensor(3.0 * x.data),
        lambda xs, y, c: (Tensor(3.0 * c.data),),
    )
    err = grad_check(op, (Tensor([2.0]),), h=1e-5, rng=Rng(0))
    assert err <= 1e-10


def test_grad_check_softmax():
    err = grad_check(ops.softmax_rows_op, (Tensor(Rng(3).normals((3, 3))),), h=1e-5, rng=Rng(4))
    assert err <= 1e-6


def test_grad_check_composed_gap_leaky_relu():
    op = composite(
        "gap_of_leaky_relu",
        lambda x: apply_op(ops.gap_op, apply_op(ops.leaky_relu_op(0.01), x)),
    )
    err = grad_check(op, (Tensor(Rng(6).normals((2, 3, 3))),), h=1e-5, rng=Rng(7))
    assert err <= 1e-6


def test_grad_check_h_validation():
    with pytest.raises(ConfigError):
        grad_check(ops.gelu_op, (Tensor([1.0]),), h=1e-2)
    with pytest.raises(ConfigError):
        grad_check(ops.gelu_op, (Tensor([1.0]),), h=1e-8)


def test_grad_check_nonfinite_forward_raises():
    def _log_fwd(x):
        with np.errstate(invalid="ignore"):
            return Tensor._wrap(np.log(x.data))

    op = DifferentiableOp(
        "log", _log_fwd, lambda xs, y, c: (Tensor._wrap(c.data / xs[0].data),)
    )
    with pytest.raises(EvaluationError):
        grad_check(op, (Tensor([-1.0]),), h=1e-5)


def test_all_registered_ops_pass_grad_check_quick():
    # 3 seeds here; the acceptance suite runs 10 per op
    for name in gc.case_names():
        for seed in range(3):
            err = gc.run_case(name, seed=seed)
            assert err <= 1e-4, f"{name} seed {seed}: {err}"


def test_wrapped_bce_matches_reference_values():
    # BCE at logit 0 against target 1 is ln 2
    op = ops.bce_mean_op(np.array([1.0]))
    assert abs(op.forward(Tensor([0.0])).item() - math.log(2.0)) < 1e-12


def test_vjp_linear_in_cotangent():
    rng = Rng(15)
    a, b = Tensor(rng.normals((3, 4))), Tensor(rng.normals((4, 2)))
    out = ops.matmul_op.forward(a, b)
    c1 = Tensor(rng.normals(out.shape))
    c2 = Tensor(rng.normals(out.shape))
    g1 = ops.matmul_op.vjp((a, b), out, c1)
    g2 = ops.matmul_op.vjp((a, b), out, c2)
    both = ops.matmul_op.vjp((a, b), out, Tensor(c1.data + 2.0 * c2.data))
    for i in range(2):
        assert np.allclose(both[i].data, g1[i].data + 2.0 * g2[i].data, atol=1e-12)
