"""Knapsack embedded into optimal precision assignment.

Given a 0/1 knapsack instance (weights w, profits p, capacity W), build a
one-step training problem whose optimal precision assignment encodes an
optimal knapsack selection:

* one dense branch per item, branch i mapping input component ``x_i``
  (a low-precision rounding of ``sqrt(p_i/w_i)``) through ``w_i`` weights,
* a global-sum combine and a single scaled L1 loss against a target
  ``y < 0`` chosen slightly below anything the one-step model can reach,
* weights initialised to zero, learning rate ``2**-lr_exp``, one epoch
  consisting of one step, masters kept in the wide format.

The two formats are searched so that every rounding along the gradient
path is either exact (wide format) or flushes to zero (narrow format).
Item i then survives into the updated model iff its weight gradient, its
branch gradient, and the shared combine gradient are all assigned the
wide format, which costs exactly ``2*w_i`` wide elements per item plus one
for the combine gradient.  Under a footprint constraint keeping at most
``2W+1`` elements wide, accuracy-optimal assignments are optimal knapsack
selections (and the achievable accuracies obey a closed form).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .assign import PrecisionAssignment, PrecisionCandidate, candidate_uniform
from .engine import forward_backward, raw_loss, sgd_step
from .fpnum import FpFormat, round_array, round_value
from .graph import Graph, InputRef, OpNode, make_graph

__all__ = [
    "KnapsackInstance",
    "ReductionInstance",
    "knapsack_bruteforce",
    "choose_formats",
    "build_instance",
    "closed_form_accuracy",
    "simulate_assignment",
    "solve_tradeoff_bruteforce",
    "extract_selection",
    "verify_reduction",
]

ENUMERATION_LIMIT = 18  # solve_tradeoff_bruteforce walks 2**|TS| assignments


@dataclass(frozen=True)
class KnapsackInstance:
    weights: tuple[int, ...]
    profits: tuple[int, ...]
    capacity: int

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(int(w) for w in self.weights))
        object.__setattr__(self, "profits", tuple(int(p) for p in self.profits))
        if len(self.weights) != len(self.profits) or not self.weights:
            raise ValueError("need equally many weights and profits, at least one item")
        if any(w < 1 for w in self.weights) or any(p < 1 for p in self.profits):
            raise ValueError("weights and profits must be positive integers")
        if self.capacity < 0:
            raise ValueError("capacity must be non-negative")

    @property
    def item_count(self) -> int:
        return len(self.weights)


def knapsack_bruteforce(
    inst: KnapsackInstance, max_items: int = 20
) -> tuple[tuple[int, ...], int]:
    """Exhaustive 0/1 knapsack; ties go to the lexicographically smallest
    selection vector."""
    n = inst.item_count
    if n > max_items:
        raise ValueError(f"refusing exhaustive search over {n} > {max_items} items")
    best: tuple[int, ...] = ()
    best_profit = -1
    for alpha in itertools.product((0, 1), repeat=n):
        if sum(a * w for a, w in zip(alpha, inst.weights)) <= inst.capacity:
            profit = sum(a * p for a, p in zip(alpha, inst.profits))
            if profit > best_profit:
                best, best_profit = alpha, profit
    return best, best_profit


# ---------------------------------------------------------------------------
# format search
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _format_pool(max_exp_bits: int, max_man_bits: int, max_bits: int) -> tuple[FpFormat, ...]:
    fmts = [
        FpFormat(e, m, b)
        for e in range(1, max_exp_bits + 1)
        for m in range(0, max_man_bits + 1)
        for b in range(-14, 15)
        if 1 + e + m <= max_bits
    ]
    fmts.sort(key=lambda f: (f.bitwidth, f.exp_bits, f.man_bits, abs(f.extra_bias), f.extra_bias))
    return tuple(fmts)


def _exact(fmt: FpFormat, v: float) -> bool:
    return round_value(fmt, v).value == v


def _pick_target(x: Sequence[float], weights: Sequence[int], k: int, l: int) -> float:
    """Largest-magnitude negative power of two strictly below the most
    negative value the updated model can output."""
    bound = math.ldexp(sum(w * xi * xi for w, xi in zip(weights, x)), -(k + l))
    _, q = math.frexp(bound)  # bound < 2**q
    return -math.ldexp(1.0, q)


def _min_loss_exp(fmt_lo: FpFormat, x: Sequence[float]) -> int:
    """Smallest k for which 2**-k and 2**-k * x_i all flush to zero in lo."""
    top = max(1.0, max(x))
    k = max(1, math.ceil(math.log2(2.0 * top / fmt_lo.min_subnormal) - 1e-9))
    while round_value(fmt_lo, math.ldexp(top, -k)).value != 0.0 and k < 80:
        k += 1
    return k


@lru_cache(maxsize=1024)
def _search_formats(
    weights: tuple[int, ...],
    profits: tuple[int, ...],
    loss_exp: Optional[int],
    lr_exp: int,
    max_lo_bits: int,
    max_hi_bits: int,
):
    """First (lo, hi) pair, by bitwidth, meeting every rounding condition.

    Conditions, all checked constructively with the rounding kernel:

    * lo rounds each sqrt(p_i/w_i) to a nonzero x_i within relative error
      1/(6 n max p), and represents 1 exactly;
    * 2**-k, 2**-k*x_i all flush to zero in lo;
    * hi has at least as many exponent and mantissa bits as lo, a strictly
      larger bitwidth, and represents 1, the x_i, 2**-k, 2**-k*x_i,
      2**-(k+l)*x_i, and the target y exactly.

    Capacity never enters, so results are cached per (weights, profits)
    and shared across knapsack instances that differ only in capacity.
    Returns (k, lo, hi, x, y) or None.
    """
    n = len(weights)
    roots = [math.sqrt(p / w) for p, w in zip(profits, weights)]
    err = 1.0 / (6.0 * n * max(profits))
    for lo in _format_pool(6, 10, max_lo_bits):
        if not _exact(lo, 1.0):
            continue
        x = [round_value(lo, s).value for s in roots]
        if any(xi == 0.0 for xi in x):
            continue
        if any(abs(xi - s) >= s * err for xi, s in zip(x, roots)):
            continue
        k = _min_loss_exp(lo, x) if loss_exp is None else loss_exp
        flush = [math.ldexp(1.0, -k)] + [math.ldexp(xi, -k) for xi in x]
        if any(round_value(lo, v).value != 0.0 for v in flush):
            continue
        y = _pick_target(x, weights, k, lr_exp)
        need_exact = [1.0, y] + x + flush + [math.ldexp(xi, -(k + lr_exp)) for xi in x]
        for hi in _format_pool(8, 26, max_hi_bits):
            if hi.exp_bits < lo.exp_bits or hi.man_bits < lo.man_bits:
                continue
            if hi.bitwidth <= lo.bitwidth:
                continue
            if all(_exact(hi, v) for v in need_exact):
                return k, lo, hi, tuple(x), y
    return None


def choose_formats(
    inst: KnapsackInstance,
    loss_exp: Optional[int] = None,
    lr_exp: int = 1,
    max_lo_bits: int = 16,
    max_hi_bits: int = 32,
) -> Optional[tuple[FpFormat, FpFormat]]:
    """Search (lo, hi) formats for the reduction; None when none exists
    within the bitwidth caps.  ``loss_exp=None`` also searches the
    loss-downscale exponent."""
    found = _search_formats(
        inst.weights, inst.profits, loss_exp, lr_exp, max_lo_bits, max_hi_bits
    )
    if found is None:
        return None
    _, lo, hi, _, _ = found
    return lo, hi


# ---------------------------------------------------------------------------
# instance construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReductionInstance:
    """A fully materialised tradeoff instance for one knapsack input."""

    knapsack: KnapsackInstance
    loss_exp: int
    lr_exp: int
    fmt_lo: FpFormat
    fmt_hi: FpFormat
    branch_inputs: tuple[float, ...]
    target: float
    min_low_ratio: float
    min_low_elements: int
    graph: Graph
    candidate: PrecisionCandidate

    @property
    def item_count(self) -> int:
        return self.knapsack.item_count

    @property
    def tensor_order(self) -> tuple[str, ...]:
        """Canonical enumeration order (x*, dx*, then weight pairs)."""
        return tuple(self.graph.tensors)

    def combine_grad_id(self) -> str:
        return f"dx{self.item_count + 2}"

    def branch_grad_id(self, i: int) -> str:
        """Gradient of branch i's output, 1-based."""
        return f"dx{i + 1}"

    def weight_grad_id(self, i: int) -> str:
        return f"dw{i}"


def build_instance(
    inst: KnapsackInstance,
    loss_exp: Optional[int] = None,
    lr_exp: int = 1,
) -> ReductionInstance:
    """Materialise the tradeoff instance: formats, inputs, target, graph,
    and the footprint floor ``max(0, 1 - (2W+1)/size(TS))``."""
    found = _search_formats(inst.weights, inst.profits, loss_exp, lr_exp, 16, 32)
    if found is None:
        raise ValueError(f"no format pair satisfies the rounding conditions for {inst}")
    k, lo, hi, x, y = found
    n = inst.item_count
    ops = []
    for i, w in enumerate(inst.weights, start=1):
        ops.append(
            OpNode(i, "dense", (InputRef(1, i - 1, i),), (w,), param_shape=(w, 1))
        )
    ops.append(OpNode(n + 1, "sum", tuple(InputRef(j) for j in range(2, n + 2)), ()))
    ops.append(
        OpNode(n + 2, "l1_loss", (InputRef(n + 2),), (), scale=math.ldexp(1.0, -k))
    )
    g = make_graph(ops, model_op_count=n + 1, input_shape=(n,))
    total = g.total_elements()
    min_low = max(0, total - (2 * inst.capacity + 1))
    return ReductionInstance(
        knapsack=inst,
        loss_exp=k,
        lr_exp=lr_exp,
        fmt_lo=lo,
        fmt_hi=hi,
        branch_inputs=x,
        target=y,
        min_low_ratio=min_low / total,
        min_low_elements=min_low,
        graph=g,
        candidate=candidate_uniform(g, lo, hi),
    )


# ---------------------------------------------------------------------------
# accuracy: closed form, engine simulation, exhaustive table
# ---------------------------------------------------------------------------


def closed_form_accuracy(ri: ReductionInstance, selection: Sequence[int]) -> float:
    """Accuracy reached after the single step when exactly the selected
    items survive the gradient path.  Exact in float64."""
    if len(selection) != ri.item_count:
        raise ValueError("selection length must match the item count")
    k, l = ri.loss_exp, ri.lr_exp
    kept = sum(
        a * w * xi * xi
        for a, w, xi in zip(selection, ri.knapsack.weights, ri.branch_inputs)
    )
    return math.ldexp(ri.target, -k) + math.ldexp(kept, -(2 * k + l))


LevelsLike = Union[PrecisionAssignment, Mapping[str, str]]


def _levels_of(arg: LevelsLike) -> Mapping[str, str]:
    return arg.level_of if isinstance(arg, PrecisionAssignment) else arg


def simulate_assignment(ri: ReductionInstance, assignment: LevelsLike) -> float:
    """Run the real engine for one step under the given assignment and
    report the exact (unrounded float64) accuracy of the updated model."""
    levels = _levels_of(assignment)
    formats = {
        t: ri.fmt_hi if levels[t] == "hi" else ri.fmt_lo for t in ri.graph.tensors
    }
    weights = {
        op.index: np.zeros(op.param_shape) for op in ri.graph.ops if op.has_params
    }
    x = np.asarray(ri.branch_inputs)[None, :]
    y = np.array([ri.target])
    st = forward_backward(ri.graph, formats, weights, x, y, loss_scale=1.0)
    updated = sgd_step(
        weights, st.grads, math.ldexp(1.0, -ri.lr_exp), master_format=ri.fmt_hi
    )
    return -raw_loss(ri.graph, updated, x, y)


def _mixed_round(ri, bits, tensor_id, value):
    """Round ``value`` under hi where the assignment bit is set, lo elsewhere.

    ``value`` may be a scalar (constant across assignments) or an array over
    assignment codes; scalars stay scalar when both formats agree."""
    if np.ndim(value) == 0:
        v = float(value)
        h = round_value(ri.fmt_hi, v).value
        l = round_value(ri.fmt_lo, v).value
        if h == l:
            return h
        return np.where(bits[tensor_id], h, l)
    h, _ = round_array(ri.fmt_hi, value)
    l, _ = round_array(ri.fmt_lo, value)
    return np.where(bits[tensor_id], h, l)


def _accuracy_table(ri: ReductionInstance) -> np.ndarray:
    """Exact accuracy for every assignment code.

    Walks the one training step with all constant-valued roundings folded:
    zero-initialised weights make every forward tensor 0 except the input
    (exact in both formats by construction) and the loss output (consumed
    by nothing), so only the gradient-path roundings vary per assignment.
    The folds are asserted, not assumed.
    """
    order = ri.tensor_order
    codes = np.arange(1 << len(order), dtype=np.uint32)
    bits = {
        tid: ((codes >> t) & np.uint32(1)).astype(bool) for t, tid in enumerate(order)
    }
    n = ri.item_count
    k, l = ri.loss_exp, ri.lr_exp
    w = ri.knapsack.weights
    x = ri.branch_inputs

    for i, xi in enumerate(x, start=1):
        assert _exact(ri.fmt_lo, xi) and _exact(ri.fmt_hi, xi), f"x{i} must round exactly"
    assert ri.target < 0.0
    for fmt in (ri.fmt_lo, ri.fmt_hi):
        assert round_value(fmt, 0.0).value == 0.0

    seed = _mixed_round(ri, bits, f"dx{n + 3}", 1.0)
    assert np.ndim(seed) == 0 and float(seed) == 1.0, "backward seed must be exact"
    # l1 backward: scale * sign(0 - y) * seed with y < 0
    combine_grad = _mixed_round(ri, bits, ri.combine_grad_id(), math.ldexp(1.0, -k))
    model_out = np.zeros(len(codes))
    for i in range(1, n + 1):
        branch_grad = _mixed_round(ri, bits, ri.branch_grad_id(i), combine_grad)
        weight_grad = _mixed_round(ri, bits, ri.weight_grad_id(i), branch_grad * x[i - 1])
        updated, _ = round_array(ri.fmt_hi, -math.ldexp(1.0, -l) * weight_grad)
        # all w_i weights of branch i carry the same value
        model_out += w[i - 1] * updated * x[i - 1]
    return -(math.ldexp(1.0, -k) * np.abs(model_out - ri.target))


# the table is a pure function of these fields; capacity (and therefore the
# footprint floor) only masks it later, so instances that differ in capacity
# alone share one table
_TABLE_CACHE: dict[tuple, np.ndarray] = {}
_TABLE_CACHE_LIMIT = 8


def _cached_accuracy_table(ri: ReductionInstance) -> np.ndarray:
    key = (
        ri.knapsack.weights,
        ri.loss_exp,
        ri.lr_exp,
        ri.fmt_lo,
        ri.fmt_hi,
        ri.branch_inputs,
        ri.target,
    )
    table = _TABLE_CACHE.get(key)
    if table is None:
        if len(_TABLE_CACHE) >= _TABLE_CACHE_LIMIT:
            _TABLE_CACHE.clear()
        table = _accuracy_table(ri)
        table.setflags(write=False)
        _TABLE_CACHE[key] = table
    return table


def solve_tradeoff_bruteforce(
    ri: ReductionInstance,
) -> tuple[PrecisionAssignment, float]:
    """Accuracy-maximising assignment over all 2**|TS| choices that keep at
    least ``min_low_elements`` elements at the lo level.

    Assignments are encoded as integers: bit t (least significant first,
    following ``tensor_order``) set means hi.  Accuracy ties resolve to the
    smallest code, i.e. the least-hi-leaning assignment in that order.
    """
    order = ri.tensor_order
    if len(order) > ENUMERATION_LIMIT:
        raise ValueError(
            f"tensor set of {len(order)} exceeds the {ENUMERATION_LIMIT}-bit enumeration guard"
        )
    accs = _cached_accuracy_table(ri)
    codes = np.arange(1 << len(order), dtype=np.uint32)
    hi_elements = np.zeros(len(codes))
    for t, tid in enumerate(order):
        hi_elements += ((codes >> t) & np.uint32(1)) * float(ri.graph.meta(tid).size)
    lo_elements = ri.graph.total_elements() - hi_elements
    feasible = lo_elements >= ri.min_low_elements
    assert feasible.any(), "the all-lo assignment is always feasible"
    best = int(np.argmax(np.where(feasible, accs, -np.inf)))
    levels = {
        tid: "hi" if (best >> t) & 1 else "lo" for t, tid in enumerate(order)
    }
    return PrecisionAssignment(levels), float(accs[best])


def extract_selection(ri: ReductionInstance, assignment: LevelsLike) -> tuple[int, ...]:
    """Item i is selected iff its weight gradient, its branch gradient, and
    the combine gradient are all held at the hi level."""
    levels = _levels_of(assignment)
    combine_hi = levels[ri.combine_grad_id()] == "hi"
    return tuple(
        int(
            combine_hi
            and levels[ri.weight_grad_id(i)] == "hi"
            and levels[ri.branch_grad_id(i)] == "hi"
        )
        for i in range(1, ri.item_count + 1)
    )


def verify_reduction(
    inst: KnapsackInstance,
    loss_exp: Optional[int] = None,
    lr_exp: int = 1,
) -> bool:
    """End-to-end check: the selection extracted from the accuracy-optimal
    assignment is capacity-feasible and matches the exhaustive knapsack
    optimum's profit."""
    ri = build_instance(inst, loss_exp, lr_exp)
    best_assignment, _ = solve_tradeoff_bruteforce(ri)
    alpha = extract_selection(ri, best_assignment)
    weight = sum(a * w for a, w in zip(alpha, inst.weights))
    profit = sum(a * p for a, p in zip(alpha, inst.profits))
    _, best_profit = knapsack_bruteforce(inst)
    return weight <= inst.capacity and profit == best_profit
