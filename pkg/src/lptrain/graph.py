"""Operator graphs and their per-step tensor sets.

A graph is a sequence of operators ``1..m``.  Operator ``i`` consumes
earlier activation tensors and produces activation ``x_{i+1}``; ``x_1`` is
the network input.  Training touches four tensor families per step:

* ``x{i}``   forward activations, ``i = 1..m+1``
* ``dx{i}``  their gradients
* ``w{j}``   the rounded weight copy of each parameterized operator
* ``dw{j}``  its gradient

The trailing operators (those with a loss kind) form the objective; the
leading ``model_op_count`` operators are the model.  GEMM-backed operators
(dense, conv2d) dominate cost, so tensors are grouped into contiguous
chunks that close after each GEMM; the final activation pair joins the
last group.  Groups are the unit at which precision is demoted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

__all__ = [
    "GEMM_KINDS",
    "LOSS_KINDS",
    "OP_KINDS",
    "InputRef",
    "OpNode",
    "TensorMeta",
    "Graph",
    "TensorGroup",
    "build_graph",
    "make_graph",
    "group_tensors",
    "total_size",
]

GEMM_KINDS = frozenset({"dense", "conv2d"})
LOSS_KINDS = frozenset({"softmax_cross_entropy", "l1_loss"})
OP_KINDS = GEMM_KINDS | LOSS_KINDS | frozenset(
    {"relu", "global_avg_pool", "split", "add", "scale", "sum"}
)


@dataclass(frozen=True)
class InputRef:
    """Reference to an activation tensor, optionally a slice of it.

    ``start``/``stop`` select a contiguous run of features from a rank-1
    tensor, letting an operator read one component of the input without a
    separate materialized tensor.
    """

    tensor: int
    start: Optional[int] = None
    stop: Optional[int] = None

    @property
    def is_slice(self) -> bool:
        return self.start is not None


@dataclass(frozen=True)
class OpNode:
    index: int
    kind: str
    inputs: tuple[InputRef, ...]
    out_shape: tuple[int, ...]
    param_shape: Optional[tuple[int, ...]] = None
    kernel_size: int = 0
    padding: int = 0
    scale: float = 1.0

    @property
    def is_gemm(self) -> bool:
        return self.kind in GEMM_KINDS

    @property
    def has_params(self) -> bool:
        return self.param_shape is not None

    @property
    def is_loss(self) -> bool:
        return self.kind in LOSS_KINDS


@dataclass(frozen=True)
class TensorMeta:
    id: str
    kind: str  # fwd_activation | bwd_activation | fwd_weight | bwd_weight
    shape: tuple[int, ...]
    owner_op: int  # the subscript in the tensor id

    @property
    def size(self) -> int:
        return int(math.prod(self.shape)) if self.shape else 1

    @property
    def is_forward(self) -> bool:
        return self.kind in ("fwd_activation", "fwd_weight")

    @property
    def is_backward(self) -> bool:
        return not self.is_forward


@dataclass(frozen=True)
class TensorGroup:
    index: int
    members: frozenset[str]
    total_size: int


@dataclass(frozen=True)
class Graph:
    ops: tuple[OpNode, ...]
    model_op_count: int
    input_shape: tuple[int, ...]
    tensors: dict[str, TensorMeta] = field(repr=False)

    @property
    def op_count(self) -> int:
        return len(self.ops)

    def meta(self, tensor_id: str) -> TensorMeta:
        try:
            return self.tensors[tensor_id]
        except KeyError:
            raise KeyError(f"unknown tensor id {tensor_id!r}") from None

    def tensor_ids(self) -> list[str]:
        return list(self.tensors)

    def forward_ids(self) -> list[str]:
        return [t.id for t in self.tensors.values() if t.is_forward]

    def backward_ids(self) -> list[str]:
        return [t.id for t in self.tensors.values() if t.is_backward]

    def weight_ids(self) -> list[str]:
        return [t.id for t in self.tensors.values() if t.kind == "fwd_weight"]

    def weight_grad_ids(self) -> list[str]:
        return [t.id for t in self.tensors.values() if t.kind == "bwd_weight"]

    def activation_shape(self, i: int) -> tuple[int, ...]:
        """Shape of activation x_i (x_1 is the graph input)."""
        return self.input_shape if i == 1 else self.ops[i - 2].out_shape

    def total_elements(self) -> int:
        return sum(t.size for t in self.tensors.values())


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _ref_shape(ref: InputRef, shape_of) -> tuple[int, ...]:
    shape = shape_of(ref.tensor)
    if not ref.is_slice:
        return shape
    if len(shape) != 1:
        raise ValueError(f"sliced input ref on non rank-1 tensor x{ref.tensor}")
    start, stop = ref.start, ref.stop
    if not (0 <= start < stop <= shape[0]):
        raise ValueError(f"slice [{start}:{stop}) out of range for x{ref.tensor} of shape {shape}")
    return (stop - start,)


def _infer_out_shape(op: OpNode, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    """Output shape of ``op`` given its input shapes; raises on mismatch."""
    kind = op.kind
    if kind == "dense":
        (s,) = in_shapes
        if len(s) != 1:
            raise ValueError(f"op {op.index}: dense needs a rank-1 input, got {s}")
        out, inp = op.param_shape
        if inp != s[0]:
            raise ValueError(f"op {op.index}: dense expects {inp} features, got {s[0]}")
        return (out,)
    if kind == "conv2d":
        (s,) = in_shapes
        if len(s) != 3:
            raise ValueError(f"op {op.index}: conv2d needs a (C,H,W) input, got {s}")
        oc, ic, kh, kw = op.param_shape
        if ic != s[0]:
            raise ValueError(f"op {op.index}: conv2d expects {ic} channels, got {s[0]}")
        h = s[1] + 2 * op.padding - kh + 1
        w = s[2] + 2 * op.padding - kw + 1
        if h < 1 or w < 1:
            raise ValueError(f"op {op.index}: kernel {kh} does not fit input {s}")
        return (oc, h, w)
    if kind in ("relu", "scale", "split"):
        (s,) = in_shapes
        return s
    if kind == "add":
        a, b = in_shapes
        if a != b:
            raise ValueError(f"op {op.index}: add needs equal shapes, got {a} and {b}")
        return a
    if kind == "global_avg_pool":
        (s,) = in_shapes
        if len(s) != 3:
            raise ValueError(f"op {op.index}: global_avg_pool needs (C,H,W), got {s}")
        return (s[0],)
    if kind == "sum":
        return ()
    if kind == "softmax_cross_entropy":
        (s,) = in_shapes
        if len(s) != 1:
            raise ValueError(f"op {op.index}: softmax_cross_entropy needs logits, got {s}")
        return ()
    if kind == "l1_loss":
        (s,) = in_shapes
        if s not in ((), (1,)):
            raise ValueError(f"op {op.index}: l1_loss needs a scalar input, got {s}")
        return ()
    raise ValueError(f"unknown op kind {kind!r}")


def make_graph(ops: Sequence[OpNode], model_op_count: int, input_shape: Sequence[int]) -> Graph:
    """Assemble and validate a graph from fully specified operators.

    Checks index contiguity, reference ordering, shape consistency against
    each kind's inference rule, loss ops trailing, and that every
    intermediate activation is consumed.
    """
    ops = tuple(ops)
    input_shape = tuple(int(d) for d in input_shape)
    if not ops:
        raise ValueError("graph needs at least one operator")
    m = len(ops)
    if [op.index for op in ops] != list(range(1, m + 1)):
        raise ValueError("operator indices must be 1..m in order")
    if not 1 <= model_op_count <= m - 1:
        raise ValueError("model_op_count must leave at least one trailing loss op")

    def shape_of(i: int) -> tuple[int, ...]:
        return input_shape if i == 1 else ops[i - 2].out_shape

    consumed = set()
    for op in ops:
        if op.kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {op.kind!r}")
        if not op.inputs:
            raise ValueError(f"op {op.index} has no inputs")
        for ref in op.inputs:
            if not 1 <= ref.tensor <= op.index:
                raise ValueError(
                    f"op {op.index} reads x{ref.tensor}, which is not produced yet"
                )
            consumed.add(ref.tensor)
        in_shapes = [_ref_shape(ref, shape_of) for ref in op.inputs]
        expect = _infer_out_shape(op, in_shapes)
        if tuple(op.out_shape) != expect:
            raise ValueError(
                f"op {op.index} declares output {op.out_shape}, inference gives {expect}"
            )
        if op.is_loss and op.index <= model_op_count:
            raise ValueError(f"loss op {op.index} inside the model segment")
        if not op.is_loss and op.index > model_op_count:
            raise ValueError(f"non-loss op {op.index} after the model segment")
        if op.has_params and op.index > model_op_count:
            raise ValueError(f"loss op {op.index} cannot carry parameters")
    missing = set(range(1, m + 1)) - consumed
    if missing:
        raise ValueError(f"activations never consumed: x{sorted(missing)}")

    tensors: dict[str, TensorMeta] = {}
    for i in range(1, m + 2):
        shape = input_shape if i == 1 else ops[i - 2].out_shape
        tensors[f"x{i}"] = TensorMeta(f"x{i}", "fwd_activation", shape, i)
    for i in range(1, m + 2):
        shape = tensors[f"x{i}"].shape
        tensors[f"dx{i}"] = TensorMeta(f"dx{i}", "bwd_activation", shape, i)
    for op in ops:
        if op.has_params:
            tensors[f"w{op.index}"] = TensorMeta(
                f"w{op.index}", "fwd_weight", op.param_shape, op.index
            )
            tensors[f"dw{op.index}"] = TensorMeta(
                f"dw{op.index}", "bwd_weight", op.param_shape, op.index
            )
    return Graph(ops, model_op_count, input_shape, tensors)


_LAYER_ARITY = {  # config-facing chain layers
    "dense": 1,
    "conv2d": 3,
    "relu": 0,
    "global_avg_pool": 0,
    "scale": 1,
    "softmax_cross_entropy": 0,
}


def build_graph(layers: Sequence[tuple[str, dict]], input_shape: Sequence[int]) -> Graph:
    """Build a chain graph from ``(kind, attrs)`` layer descriptions.

    Each layer reads the previous activation.  The last layer must be
    ``softmax_cross_entropy``; everything before it is the model.  Shapes
    are inferred front to back.
    """
    if not layers:
        raise ValueError("empty layer list")
    if layers[-1][0] != "softmax_cross_entropy":
        raise ValueError("the last layer must be softmax_cross_entropy")
    input_shape = tuple(int(d) for d in input_shape)
    ops = []
    shape = input_shape
    for i, (kind, attrs) in enumerate(layers, start=1):
        param_shape = None
        kernel = 0
        padding = 0
        scale = 1.0
        if kind == "dense":
            if len(shape) != 1:
                raise ValueError(f"layer {i}: dense needs a rank-1 input, got {shape}")
            param_shape = (int(attrs["out"]), shape[0])
        elif kind == "conv2d":
            if len(shape) != 3:
                raise ValueError(f"layer {i}: conv2d needs a (C,H,W) input, got {shape}")
            kernel = int(attrs.get("kernel", 3))
            padding = int(attrs.get("padding", 0))
            param_shape = (int(attrs["out"]), shape[0], kernel, kernel)
        elif kind == "scale":
            scale = float(attrs["by"])
        elif kind not in _LAYER_ARITY:
            raise ValueError(f"unknown layer kind {kind!r}")
        op = OpNode(
            index=i,
            kind=kind,
            inputs=(InputRef(i),),
            out_shape=(),  # placeholder, inferred below
            param_shape=param_shape,
            kernel_size=kernel,
            padding=padding,
            scale=scale,
        )
        out = _infer_out_shape(op, [shape])
        ops.append(
            OpNode(i, kind, (InputRef(i),), out, param_shape, kernel, padding, scale)
        )
        shape = out
    return make_graph(ops, model_op_count=len(ops) - 1, input_shape=input_shape)


# ---------------------------------------------------------------------------
# grouping and sizes
# ---------------------------------------------------------------------------


def group_tensors(g: Graph) -> list[TensorGroup]:
    """Partition the tensor set into contiguous groups closed after each GEMM.

    Walking operators front to back, each op contributes its activation
    pair (plus its weight pair when parameterized); a group closes right
    after every GEMM op, and the final activation pair lands in the last
    group.  A graph with no GEMMs yields a single group equal to the whole
    tensor set.
    """
    groups: list[TensorGroup] = []
    current: list[str] = []

    def close() -> None:
        members = frozenset(current)
        groups.append(TensorGroup(len(groups), members, total_size(g, members)))
        current.clear()

    for op in g.ops:
        i = op.index
        current += [f"x{i}", f"dx{i}"]
        if op.has_params:
            current += [f"w{i}", f"dw{i}"]
        if op.is_gemm:
            close()
    current += [f"x{g.op_count + 1}", f"dx{g.op_count + 1}"]
    close()
    return groups


def total_size(g: Graph, tensor_ids: Iterable[str]) -> int:
    """Total element count of the given tensors (batch dimension excluded)."""
    return sum(g.meta(t).size for t in tensor_ids)
