"""Per-tensor precision assignment schemes.

A candidate pairs two formats per tensor (a narrow "lo" and a wide "hi");
an assignment picks one level per tensor.  The low-precision ratio of an
assignment is the fraction of tensor-set elements held at the lo level.

Schemes:

* ``assign_uniform``      every tensor lo
* ``assign_op_based``     lo around interior GEMMs only, two flavours
* ``assign_ours``         greedy group demotion until a target ratio is hit

``forced_hi`` tensors are pinned at hi; demotion skips them but their
elements still count toward group sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .fpnum import FP32, FpFormat
from .graph import Graph, group_tensors

__all__ = [
    "PrecisionCandidate",
    "PrecisionAssignment",
    "candidate_hfp8",
    "candidate_uniform",
    "candidate_fp32",
    "materialize_formats",
    "low_precision_ratio",
    "assign_uniform",
    "assign_op_based",
    "assign_ours",
    "assign_all_high",
]

HI_16 = FpFormat(6, 9, 0)
LO_FWD_8 = FpFormat(4, 3, 4)
LO_BWD_8 = FpFormat(5, 2, 0)


@dataclass(frozen=True)
class PrecisionCandidate:
    """Per-tensor (lo, hi) format pairs.

    All lo formats share one bitwidth, all hi formats share one strictly
    larger bitwidth, so element counts translate directly into footprint.
    """

    lo_of: Mapping[str, FpFormat]
    hi_of: Mapping[str, FpFormat]

    def __post_init__(self) -> None:
        if set(self.lo_of) != set(self.hi_of):
            raise ValueError("lo and hi must cover the same tensors")
        if not self.lo_of:
            raise ValueError("candidate covers no tensors")
        lo_bits = {f.bitwidth for f in self.lo_of.values()}
        hi_bits = {f.bitwidth for f in self.hi_of.values()}
        if len(lo_bits) != 1 or len(hi_bits) != 1:
            raise ValueError("candidate formats must have uniform bitwidths per level")
        if lo_bits.pop() >= hi_bits.pop():
            raise ValueError("lo bitwidth must be strictly below hi bitwidth")

    @property
    def lo_bitwidth(self) -> int:
        return next(iter(self.lo_of.values())).bitwidth

    @property
    def hi_bitwidth(self) -> int:
        return next(iter(self.hi_of.values())).bitwidth


@dataclass
class PrecisionAssignment:
    """One level ("lo" or "hi") per tensor, with an immutable forced-hi set."""

    level_of: dict[str, str]
    forced_hi: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        bad = {lvl for lvl in self.level_of.values() if lvl not in ("lo", "hi")}
        if bad:
            raise ValueError(f"unknown levels: {sorted(bad)}")
        missing = self.forced_hi - set(self.level_of)
        if missing:
            raise ValueError(f"forced_hi names unknown tensors: {sorted(missing)}")
        for t in self.forced_hi:
            if self.level_of[t] != "hi":
                raise ValueError(f"forced-hi tensor {t} assigned lo")

    def copy(self) -> "PrecisionAssignment":
        return PrecisionAssignment(dict(self.level_of), self.forced_hi)

    def low_ids(self) -> list[str]:
        return [t for t, lvl in self.level_of.items() if lvl == "lo"]

    def high_ids(self) -> list[str]:
        return [t for t, lvl in self.level_of.items() if lvl == "hi"]


def materialize_formats(
    candidate: PrecisionCandidate, assignment: PrecisionAssignment
) -> dict[str, FpFormat]:
    """Resolve the concrete format each tensor is rounded to."""
    out = {}
    for t, lvl in assignment.level_of.items():
        out[t] = candidate.hi_of[t] if lvl == "hi" else candidate.lo_of[t]
    return out


def low_precision_ratio(g: Graph, assignment: PrecisionAssignment) -> float:
    """Fraction of tensor-set elements assigned the lo level.

    1.0 when everything is lo, 0.0 when everything is hi.
    """
    total = g.total_elements()
    low = sum(g.meta(t).size for t, lvl in assignment.level_of.items() if lvl == "lo")
    return low / total


# ---------------------------------------------------------------------------
# candidates
# ---------------------------------------------------------------------------


def candidate_hfp8(g: Graph) -> PrecisionCandidate:
    """16-bit hi everywhere; 8-bit lo split between forward and backward.

    Forward tensors get the heavily biased fp(4,3,4) (small range, fine
    grain), backward tensors get fp(5,2,0) (wide range for gradients).
    """
    lo = {}
    hi = {}
    for t in g.tensors.values():
        hi[t.id] = HI_16
        lo[t.id] = LO_FWD_8 if t.is_forward else LO_BWD_8
    return PrecisionCandidate(lo, hi)


def candidate_uniform(g: Graph, lo: FpFormat, hi: FpFormat) -> PrecisionCandidate:
    """The same (lo, hi) pair for every tensor."""
    ids = g.tensor_ids()
    return PrecisionCandidate({t: lo for t in ids}, {t: hi for t in ids})


def candidate_fp32(g: Graph) -> PrecisionCandidate:
    """Candidate whose hi level is fp32; an all-high assignment under it
    reproduces full-precision training.  The lo slot is never used."""
    return candidate_uniform(g, HI_16, FP32)


# ---------------------------------------------------------------------------
# schemes
# ---------------------------------------------------------------------------


def _base_levels(g: Graph, level: str, forced_hi: Iterable[str]) -> PrecisionAssignment:
    if not g.tensors:
        raise ValueError("graph has no tensors")
    forced = frozenset(forced_hi)
    levels = {t: level for t in g.tensor_ids()}
    for t in forced:
        if t not in levels:
            raise ValueError(f"forced_hi names unknown tensor {t!r}")
        levels[t] = "hi"
    return PrecisionAssignment(levels, forced)


def assign_uniform(g: Graph, forced_hi: Iterable[str] = ()) -> PrecisionAssignment:
    """Everything at the lo level (except forced-hi tensors)."""
    return _base_levels(g, "lo", forced_hi)


def assign_all_high(g: Graph, forced_hi: Iterable[str] = ()) -> PrecisionAssignment:
    """Everything at the hi level."""
    return _base_levels(g, "hi", forced_hi)


def assign_op_based(
    g: Graph, variant: str = "op", forced_hi: Iterable[str] = ()
) -> PrecisionAssignment:
    """Low precision only around GEMMs that are neither first nor last.

    ``variant="op"`` lowers each interior GEMM's input, weight, and output
    gradient; ``variant="op_prime"`` additionally lowers its output, input
    gradient, and weight gradient.  A graph with two or fewer GEMMs comes
    out all-hi.
    """
    if variant not in ("op", "op_prime"):
        raise ValueError(f"unknown variant {variant!r}")
    out = _base_levels(g, "hi", forced_hi)
    gemms = [op.index for op in g.ops if op.is_gemm]
    for i in gemms:
        if i == gemms[0] or i == gemms[-1]:
            continue
        low = [f"x{i}", f"w{i}", f"dx{i + 1}"]
        if variant == "op_prime":
            low += [f"x{i + 1}", f"dx{i}", f"dw{i}"]
        for t in low:
            if t not in out.forced_hi:
                out.level_of[t] = "lo"
    return out


def assign_ours(
    g: Graph,
    ratio: float,
    order: str = "decreasing",
    seed: Optional[int] = None,
    forced_hi: Iterable[str] = (),
) -> PrecisionAssignment:
    """Greedy group demotion until the low-precision ratio reaches ``ratio``.

    Starts all-hi and demotes whole tensor groups, largest first by
    default, stopping as soon as the ratio is met (checked before each
    demotion, so ``ratio=0`` demotes nothing).  ``order`` may be
    ``decreasing``, ``increasing``, or ``random`` (seeded); size ties break
    toward the earlier group.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    out = _base_levels(g, "hi", forced_hi)
    groups = group_tensors(g)
    if order == "decreasing":
        groups.sort(key=lambda grp: (-grp.total_size, grp.index))
    elif order == "increasing":
        groups.sort(key=lambda grp: (grp.total_size, grp.index))
    elif order == "random":
        rng = np.random.default_rng(seed)
        rng.shuffle(groups)
    else:
        raise ValueError(f"unknown demotion order {order!r}")
    for grp in groups:
        if low_precision_ratio(g, out) >= ratio:
            break
        for t in grp.members:
            if t not in out.forced_hi:
                out.level_of[t] = "lo"
    return out
