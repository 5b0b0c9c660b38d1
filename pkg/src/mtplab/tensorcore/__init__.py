"""Minimal dense-array numerics: tensors, deterministic RNG, per-op VJPs,
and the finite-difference gradient-check harness."""

from .autodiff import DifferentiableOp, Var, apply_op, backward, composite
from .gradcheck import grad_check
from .rng import Rng
from .tensor import (
    Tensor,
    read_container,
    read_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
    write_container,
    write_tensor,
)
from .ops import gap, leaky_relu, matmul, softmax_rows

__all__ = [
    "DifferentiableOp",
    "Rng",
    "Tensor",
    "Var",
    "apply_op",
    "backward",
    "composite",
    "gap",
    "grad_check",
    "leaky_relu",
    "matmul",
    "read_container",
    "read_tensor",
    "softmax_rows",
    "tensor_from_bytes",
    "tensor_to_bytes",
    "write_container",
    "write_tensor",
]
