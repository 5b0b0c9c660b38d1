"""Central finite-difference checking of DifferentiableOp VJPs.

For an op f with inputs x and a cotangent w, the analytic gradient of the
scalar sum(w * f(x)) w.r.t. every input coordinate is vjp(x, f(x), w). The
harness perturbs one coordinate at a time and reports

    max over coordinates of |analytic - central| / max(1, |analytic|, |central|).

Random cotangents are used by default: a constant cotangent can null out
whole Jacobian rows (e.g. softmax rows sum to one, so an all-ones cotangent
sees a zero derivative everywhere).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ConfigError, EvaluationError
from .autodiff import DifferentiableOp
from .rng import Rng
from .tensor import Tensor


def grad_check(
    op: DifferentiableOp,
    inputs: tuple[Tensor, ...],
    h: float = 1e-5,
    cotangent: Tensor | None = None,
    rng: Rng | None = None,
) -> float:
    """Max relative error between the VJP and central differences."""
    if not (1e-7 <= h <= 1e-3):
        raise ConfigError(f"step h must lie in [1e-7, 1e-3], got {h}")
    out = op.forward(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError(f"{op.name}: non-finite forward output")
    if cotangent is None:
        r = rng if rng is not None else Rng(0)
        cotangent = Tensor._wrap(r.normals(out.shape))
    analytic = op.vjp(inputs, out, cotangent)
    w = cotangent.data

    def scalar_at(xs) -> float:
        y = op.forward(*xs).data
        if not np.all(np.isfinite(y)):
            raise EvaluationError(f"{op.name}: non-finite forward output")
        return float((w * y).sum())

    worst = 0.0
    for i, x in enumerate(inputs):
        a = analytic[i]
        a_flat = (
            a.data.reshape(-1) if a is not None else np.zeros(x.size, dtype=np.float64)
        )
        base = x.data.reshape(-1)
        for j in range(x.size):
            saved = base[j]
            perturbed = base.copy()
            perturbed[j] = saved + h
            xs_hi = list(inputs)
            xs_hi[i] = Tensor._wrap(perturbed.reshape(x.shape))
            f_hi = scalar_at(xs_hi)
            perturbed2 = base.copy()
            perturbed2[j] = saved - h
            xs_lo = list(inputs)
            xs_lo[i] = Tensor._wrap(perturbed2.reshape(x.shape))
            f_lo = scalar_at(xs_lo)
            numeric = (f_hi - f_lo) / (2.0 * h)
            denom = max(1.0, abs(a_flat[j]), abs(numeric))
            worst = max(worst, abs(a_flat[j] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# named check cases, extensible by other modules

# name -> builder(rng) -> (op, inputs)
CaseBuilder = Callable[[Rng], tuple[DifferentiableOp, tuple[Tensor, ...]]]
_CASES: dict[str, CaseBuilder] = {}


def register_case(name: str, builder: CaseBuilder) -> None:
    _CASES[name] = builder


def case_names() -> list[str]:
    return list(_CASES)


def build_case(name: str, rng: Rng) -> tuple[DifferentiableOp, tuple[Tensor, ...]]:
    if name not in _CASES:
        raise KeyError(name)
    return _CASES[name](rng)


def run_case(name: str, seed: int, h: float = 1e-5) -> float:
    rng = Rng(seed)
    op, inputs = build_case(name, rng.derive(1))
    return grad_check(op, inputs, h=h, rng=rng.derive(2))


def _t(rng: Rng, shape) -> Tensor:
    return Tensor._wrap(rng.normals(shape))


def _register_core_cases() -> None:
    from . import ops

    register_case("add", lambda r: (ops.add_op, (_t(r, (3, 4)), _t(r, (3, 4)))))
    register_case("mul", lambda r: (ops.mul_op, (_t(r, (3, 4)), _t(r, (3, 4)))))
    register_case("matmul", lambda r: (ops.matmul_op, (_t(r, (3, 4)), _t(r, (4, 2)))))
    register_case(
        "add_bias_rows", lambda r: (ops.add_bias_rows_op, (_t(r, (3, 4)), _t(r, (4,))))
    )
    register_case("softmax_rows", lambda r: (ops.softmax_rows_op, (_t(r, (3, 3)),)))
    register_case("gap", lambda r: (ops.gap_op, (_t(r, (3, 5, 5)),)))
    register_case("leaky_relu", lambda r: (ops.leaky_relu_op(0.01), (_t(r, (4, 5)),)))
    register_case("gelu", lambda r: (ops.gelu_op, (_t(r, (4, 5)),)))
    register_case(
        "layer_norm",
        lambda r: (ops.layer_norm_rows_op(), (_t(r, (4, 6)), _t(r, (6,)), _t(r, (6,)))),
    )
    register_case("mean_all", lambda r: (ops.mean_all_op, (_t(r, (3, 4)),)))
    register_case("patchify", lambda r: (ops.patchify_op(2), (_t(r, (2, 4, 4)),)))
    register_case(
        "upsample_bilinear", lambda r: (ops.upsample_bilinear_op(6, 6), (_t(r, (2, 3, 3)),))
    )

    def _sample_case(r: Rng):
        s = 3
        half = (s - 1) / 2.0
        ry, rx = np.meshgrid(
            np.arange(s, dtype=np.float64) - half,
            np.arange(s, dtype=np.float64) - half,
            indexing="ij",
        )
        op = ops.sample_window_points_op(3.5, 3.5, rx, ry)
        feat = _t(r, (2, 8, 8))
        params = Tensor._wrap(r.normals((5,)) * 0.3)
        return op, (feat, params)

    register_case("sample_window", _sample_case)

    def _semantic_case(r: Rng):
        labels = np.array([[0, 1, 255], [2, 255, 1], [0, 0, 2]], dtype=np.int64)
        return ops.semantic_ce_op(labels), (_t(r, (3, 3, 3)),)

    register_case("loss_semantic", _semantic_case)
    register_case(
        "attention", lambda r: (ops.attention_op, (_t(r, (4, 3)), _t(r, (4, 3)), _t(r, (4, 3))))
    )

    def _kv_sample_case(r: Rng):
        s = 3
        half = (s - 1) / 2.0
        ry, rx = np.meshgrid(
            np.arange(s, dtype=np.float64) - half,
            np.arange(s, dtype=np.float64) - half,
            indexing="ij",
        )
        op = ops.window_kv_sample_op(3.5, 3.5, rx, ry, heads=2)
        params = Tensor._wrap(r.normals((10,)) * 0.3)
        return op, (_t(r, (4, 8, 8)), _t(r, (4, 8, 8)), params)

    register_case("window_kv_sample", _kv_sample_case)
    register_case(
        "bce_mean",
        lambda r: (ops.bce_mean_op(np.array([[1.0, 0.0], [0.0, 1.0]])), (_t(r, (2, 2)),)),
    )
    register_case(
        "ce_rows_mean",
        lambda r: (ops.ce_rows_mean_op(np.array([2, 0, 1])), (_t(r, (3, 3)),)),
    )
    register_case(
        "smooth_l1_mean",
        lambda r: (
            ops.smooth_l1_mean_op(np.array([[0.3, -1.4], [2.0, 0.1]])),
            (_t(r, (2, 2)),),
        ),
    )


_register_core_cases()
