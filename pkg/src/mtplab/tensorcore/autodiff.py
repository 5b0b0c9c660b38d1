"""Reverse-mode differentiation built from per-operation VJPs.

The tested contract is the ``DifferentiableOp``: a pure forward function
plus a vector-Jacobian product. ``Var`` is a thin tape node so that graphs
of ops can be composed and differentiated end to end; ``composite`` turns
any Var-level function back into a single DifferentiableOp whose VJP runs
the tape, which is how whole layers and loss pipelines are gradient-checked
with the same harness as the primitives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor

# vjp(inputs, output, cotangent) -> one cotangent per input (None = no flow)
VjpFn = Callable[[tuple[Tensor, ...], Tensor, Tensor], tuple[Optional[Tensor], ...]]


@dataclass(frozen=True)
class DifferentiableOp:
    name: str
    forward: Callable[..., Tensor]
    vjp: VjpFn


class Var:
    """Tape node: a Tensor value plus the recipe to push cotangents back."""

    __slots__ = ("value", "parents", "_vjp")

    def __init__(self, value: Tensor, parents: tuple["Var", ...] = (), vjp=None):
        self.value = value
        self.parents = parents
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return self.value.item()


def apply_op(op: DifferentiableOp, *args: Var) -> Var:
    inputs = tuple(a.value for a in args)
    out = op.forward(*inputs)

    def _vjp(cotangent: Tensor, _inputs=inputs, _out=out, _op=op):
        return _op.vjp(_inputs, _out, cotangent)

    return Var(out, parents=args, vjp=_vjp)


def _topo_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, cotangent: Tensor | None = None) -> dict[Var, Tensor]:
    """Accumulate cotangents from ``root`` to every reachable node.

    Accumulation order is fixed by the (deterministic) graph construction
    order, so repeated runs are bit-identical.
    """
    if cotangent is None:
        cotangent = Tensor._wrap(np.ones(root.value.shape, dtype=np.float64))
    grads: dict[Var, Tensor] = {root: cotangent}
    for node in reversed(_topo_order(root)):
        g = grads.get(node)
        if g is None or node._vjp is None:
            continue
        parts = node._vjp(g)
        for parent, part in zip(node.parents, parts):
            if part is None:
                continue
            acc = grads.get(parent)
            if acc is None:
                grads[parent] = part
            else:
                grads[parent] = Tensor._wrap(acc.data + part.data)
    return grads


def composite(name: str, fn: Callable[..., Var]) -> DifferentiableOp:
    """Package a Var-level pipeline as one DifferentiableOp.

    ``fn`` must be pure: the VJP re-runs it on fresh leaves and backpropagates
    the given cotangent through the recorded tape.
    """

    def forward(*inputs: Tensor) -> Tensor:
        return fn(*(Var(x) for x in inputs)).value

    def vjp(inputs: tuple[Tensor, ...], output: Tensor, cotangent: Tensor):
        leaves = tuple(Var(x) for x in inputs)
        out = fn(*leaves)
        grads = backward(out, cotangent)
        return tuple(grads.get(leaf) for leaf in leaves)

    return DifferentiableOp(name, forward, vjp)


def leaves_of(params: dict[str, Tensor]) -> dict[str, Var]:
    """Wrap a parameter dict as leaf Vars, preserving insertion order."""
    return {k: Var(v) for k, v in params.items()}


def grads_by_name(
    grads: dict[Var, Tensor], leaves: dict[str, Var], like: dict[str, Tensor]
) -> dict[str, Tensor]:
    """Collect named gradients, filling zeros for parameters off the graph."""
    out: dict[str, Tensor] = {}
    for name, leaf in leaves.items():
        g = grads.get(leaf)
        out[name] = g if g is not None else Tensor.zeros(like[name].shape)
    return out
