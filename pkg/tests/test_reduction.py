"""The knapsack embedding, cross-checked three ways: closed form,
vectorised enumeration, and the real engine."""

import itertools
import math
from dataclasses import replace

import numpy as np
import pytest

from lptrain.fpnum import round_value
from lptrain.reduction import (
    KnapsackInstance,
    build_instance,
    choose_formats,
    closed_form_accuracy,
    extract_selection,
    knapsack_bruteforce,
    simulate_assignment,
    solve_tradeoff_bruteforce,
    verify_reduction,
)

# ---------------------------------------------------------------------------
# knapsack brute force
# ---------------------------------------------------------------------------


def test_knapsack_examples():
    inst = KnapsackInstance((1, 2), (3, 1), 2)
    assert knapsack_bruteforce(inst) == ((1, 0), 3)
    # capacity swallows everything
    assert knapsack_bruteforce(KnapsackInstance((1, 2), (3, 1), 3)) == ((1, 1), 4)
    assert knapsack_bruteforce(KnapsackInstance((2, 2), (5, 5), 0)) == ((0, 0), 0)


def test_knapsack_tie_breaks_lexicographically():
    # items are interchangeable; the lexicographically smallest winner
    # selects the later item
    inst = KnapsackInstance((1, 1), (2, 2), 1)
    assert knapsack_bruteforce(inst) == ((0, 1), 2)


def test_knapsack_guards():
    with pytest.raises(ValueError, match="20"):
        knapsack_bruteforce(KnapsackInstance((1,) * 21, (1,) * 21, 3))
    with pytest.raises(ValueError):
        KnapsackInstance((0, 1), (1, 1), 2)
    with pytest.raises(ValueError):
        KnapsackInstance((1,), (1, 2), 2)
    with pytest.raises(ValueError):
        KnapsackInstance((1,), (1,), -1)


# ---------------------------------------------------------------------------
# format search
# ---------------------------------------------------------------------------


def test_choose_formats_satisfies_conditions():
    inst = KnapsackInstance((1, 2), (3, 1), 2)
    ri = build_instance(inst)
    lo, hi = ri.fmt_lo, ri.fmt_hi
    assert hi.exp_bits >= lo.exp_bits and hi.man_bits >= lo.man_bits
    assert hi.bitwidth > lo.bitwidth
    err = 1.0 / (6 * 2 * max(inst.profits))
    for xi, (p, w) in zip(ri.branch_inputs, zip(inst.profits, inst.weights)):
        s = math.sqrt(p / w)
        assert xi != 0.0
        assert abs(xi - s) < s * err
        # exact in both formats, flushed at the scaled magnitudes
        assert round_value(lo, xi).value == xi
        assert round_value(hi, xi).value == xi
        for v in (
            math.ldexp(xi, -ri.loss_exp),
            math.ldexp(1.0, -ri.loss_exp),
        ):
            assert round_value(lo, v).value == 0.0
            assert round_value(hi, v).value == v
        small = math.ldexp(xi, -(ri.loss_exp + ri.lr_exp))
        assert round_value(hi, small).value == small
    assert round_value(hi, ri.target).value == ri.target
    assert round_value(lo, 1.0).value == 1.0
    assert round_value(hi, 1.0).value == 1.0


def test_choose_formats_trivial_instance_is_narrow():
    lohib = choose_formats(KnapsackInstance((1, 1), (1, 1), 1))
    assert lohib is not None
    lo, hi = lohib
    assert hi.bitwidth <= 32


def test_target_strictly_below_reachable():
    ri = build_instance(KnapsackInstance((1, 2), (3, 1), 2))
    bound = math.ldexp(
        sum(w * x * x for w, x in zip(ri.knapsack.weights, ri.branch_inputs)),
        -(ri.loss_exp + ri.lr_exp),
    )
    assert ri.target < -0.0
    assert ri.target < -bound
    # the chosen magnitude is minimal among powers of two
    assert -ri.target / 2 <= bound


# ---------------------------------------------------------------------------
# instance geometry
# ---------------------------------------------------------------------------


def test_instance_sizes_and_ratio():
    inst = KnapsackInstance((1, 2), (3, 1), 2)
    ri = build_instance(inst)
    g = ri.graph
    assert [g.meta(t).shape for t in ("w1", "w2")] == [(1, 1), (2, 1)]
    # hand count: inputs 2, branch outputs 1+2, combine 1, loss 1 => 7
    # forward; doubled for gradients; plus 2*(1+2) weight elements
    assert g.total_elements() == 2 * 7 + 2 * 3 == 20
    assert len(g.tensors) == 14
    assert ri.min_low_elements == 20 - (2 * 2 + 1) == 15
    assert ri.min_low_ratio == 15 / 20
    # capacity large enough: no floor at all
    wide = build_instance(KnapsackInstance((1, 2), (3, 1), 10))
    assert wide.min_low_elements == 0 and wide.min_low_ratio == 0.0


def test_closed_form_endpoints():
    ri = build_instance(KnapsackInstance((1, 2), (3, 1), 2))
    k, l = ri.loss_exp, ri.lr_exp
    none = closed_form_accuracy(ri, (0, 0))
    assert none == math.ldexp(ri.target, -k)
    both = closed_form_accuracy(ri, (1, 1))
    kept = sum(w * x * x for w, x in zip(ri.knapsack.weights, ri.branch_inputs))
    assert both == math.ldexp(ri.target, -k) + math.ldexp(kept, -(2 * k + l))
    assert both > none
    with pytest.raises(ValueError):
        closed_form_accuracy(ri, (1,))


def test_profit_gap_below_half():
    # sum_i |beta_i (w_i x_i^2 - p_i)| < 1/2 for every subset
    for inst in (
        KnapsackInstance((1, 2), (3, 1), 2),
        KnapsackInstance((2, 1, 2), (4, 2, 3), 3),
    ):
        ri = build_instance(inst)
        for beta in itertools.product((0, 1), repeat=inst.item_count):
            approx = sum(
                b * w * x * x
                for b, w, x in zip(beta, inst.weights, ri.branch_inputs)
            )
            exact = sum(b * p for b, p in zip(beta, inst.profits))
            assert abs(approx - exact) < 0.5


# ---------------------------------------------------------------------------
# simulation equals closed form equals enumeration
# ---------------------------------------------------------------------------


def test_engine_simulation_matches_closed_form_exhaustively():
    ri = build_instance(KnapsackInstance((2, 1), (1, 3), 2))
    order = ri.tensor_order
    for code in range(1 << len(order)):
        levels = {
            tid: "hi" if (code >> t) & 1 else "lo" for t, tid in enumerate(order)
        }
        acc = simulate_assignment(ri, levels)
        assert acc == closed_form_accuracy(ri, extract_selection(ri, levels)), (
            f"engine/closed-form mismatch at code {code}"
        )


def test_solver_matches_engine_on_its_optimum():
    ri = build_instance(KnapsackInstance((1, 2), (3, 1), 2))
    assignment, acc = solve_tradeoff_bruteforce(ri)
    assert acc == simulate_assignment(ri, assignment)
    assert acc == closed_form_accuracy(ri, extract_selection(ri, assignment))


def test_solver_respects_floor():
    ri = build_instance(KnapsackInstance((1, 2), (3, 1), 2))
    assignment, _ = solve_tradeoff_bruteforce(ri)
    hi_elems = sum(
        ri.graph.meta(t).size for t, lvl in assignment.level_of.items() if lvl == "hi"
    )
    assert ri.graph.total_elements() - hi_elems >= ri.min_low_elements


def test_solver_r0_keeps_everything_high():
    # no floor: all-hi is feasible and uniquely maximises accuracy when
    # every selection gain is positive
    ri = build_instance(KnapsackInstance((1, 2), (3, 1), 10))
    assignment, acc = solve_tradeoff_bruteforce(ri)
    assert extract_selection(ri, assignment) == (1, 1)
    assert acc == closed_form_accuracy(ri, (1, 1))


def test_solver_r1_forces_all_low():
    ri = build_instance(KnapsackInstance((1, 2), (3, 1), 2))
    pinned = replace(
        ri, min_low_elements=ri.graph.total_elements(), min_low_ratio=1.0
    )
    assignment, acc = solve_tradeoff_bruteforce(pinned)
    assert set(assignment.level_of.values()) == {"lo"}
    assert acc == closed_form_accuracy(ri, (0, 0))


def test_enumeration_guard():
    ri = build_instance(KnapsackInstance((2, 2, 2, 2), (1, 1, 1, 1), 2))
    assert len(ri.tensor_order) == 22
    with pytest.raises(ValueError, match="guard"):
        solve_tradeoff_bruteforce(ri)


# ---------------------------------------------------------------------------
# end-to-end verification
# ---------------------------------------------------------------------------


def test_verify_reduction_spot_instances():
    assert verify_reduction(KnapsackInstance((1, 2), (3, 1), 2))
    assert verify_reduction(KnapsackInstance((1,), (1,), 0))
    assert verify_reduction(KnapsackInstance((2, 2, 1), (3, 4, 1), 4))


def test_verify_reduction_with_explicit_params():
    inst = KnapsackInstance((1, 2), (3, 1), 2)
    ri = build_instance(inst)
    # re-running with the searched parameters pinned gives the same result
    assert verify_reduction(inst, loss_exp=ri.loss_exp, lr_exp=ri.lr_exp)


def test_extraction_requires_whole_gradient_path():
    ri = build_instance(KnapsackInstance((1, 2), (3, 1), 2))
    all_lo = {t: "lo" for t in ri.tensor_order}
    assert extract_selection(ri, all_lo) == (0, 0)
    path = dict(all_lo)
    path[ri.weight_grad_id(1)] = "hi"
    path[ri.branch_grad_id(1)] = "hi"
    assert extract_selection(ri, path) == (0, 0)  # combine grad still lo
    path[ri.combine_grad_id()] = "hi"
    assert extract_selection(ri, path) == (1, 0)
