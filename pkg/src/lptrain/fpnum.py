"""Bit-exact simulation of small saturating floating-point formats.

A format has one sign bit, ``exp_bits`` exponent bits, ``man_bits`` mantissa
bits, and an ``extra_bias`` added on top of the usual base bias
``2**(exp_bits-1) - 1``.  Unlike IEEE 754 there are no infinities or NaNs:
every exponent code encodes finite values (code 0 holds zero and the
subnormals, the all-ones code is an ordinary normal binade).  Rounding is
round-to-nearest with ties to the value whose mantissa code is even, and
magnitudes strictly above ``max_magnitude`` saturate to the signed maximum.

All arithmetic is carried out in float64, which represents every value of
every format narrow enough to be interesting here exactly, so rounding is
reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FpFormat",
    "FP32",
    "RoundOutcome",
    "RoundedTensor",
    "round_value",
    "round_array",
    "round_tensor",
    "enumerate_values",
]


@dataclass(frozen=True)
class FpFormat:
    """A simulated float format: 1 sign bit, ``exp_bits`` exponent bits,
    ``man_bits`` mantissa bits, and an extra exponent bias.

    A positive ``extra_bias`` shifts the whole representable range toward
    smaller magnitudes, a negative one toward larger magnitudes.
    """

    exp_bits: int
    man_bits: int
    extra_bias: int = 0

    def __post_init__(self) -> None:
        if self.exp_bits < 1:
            raise ValueError("exp_bits must be >= 1")
        if self.man_bits < 0:
            raise ValueError("man_bits must be >= 0")

    @property
    def bitwidth(self) -> int:
        return 1 + self.exp_bits + self.man_bits

    @property
    def base_bias(self) -> int:
        return 2 ** (self.exp_bits - 1) - 1

    @property
    def min_normal_exp(self) -> int:
        """Binade exponent of the smallest normal value."""
        return 1 - self.base_bias - self.extra_bias

    @property
    def max_exp(self) -> int:
        """Binade exponent of the largest (all-ones exponent code) binade."""
        return 2**self.exp_bits - 1 - self.base_bias - self.extra_bias

    @property
    def max_magnitude(self) -> float:
        return math.ldexp(2.0 - math.ldexp(1.0, -self.man_bits), self.max_exp)

    @property
    def min_subnormal(self) -> float:
        """Smallest positive representable value (a subnormal when man_bits > 0)."""
        return math.ldexp(1.0, self.min_normal_exp - self.man_bits)

    def __str__(self) -> str:
        return f"fp({self.exp_bits},{self.man_bits},{self.extra_bias})"


#: Format behaving like IEEE binary32 on its finite range.
FP32 = FpFormat(8, 23, 0)


@dataclass(frozen=True)
class RoundOutcome:
    """Result of rounding a single scalar."""

    value: float
    overflowed: bool
    underflowed_to_zero: bool


@dataclass(frozen=True)
class RoundedTensor:
    """Result of rounding an array: values plus overflow bookkeeping."""

    values: np.ndarray
    overflow_count: int
    element_count: int


def round_array(fmt: FpFormat, values) -> tuple[np.ndarray, np.ndarray]:
    """Round every element of ``values`` to the nearest value of ``fmt``.

    Returns ``(rounded, overflowed)``.  ``overflowed`` marks elements whose
    magnitude was strictly above ``fmt.max_magnitude`` before rounding; they
    saturate to the signed maximum.  A magnitude exactly equal to the maximum
    is representable and does not count as overflow.  Non-finite input is a
    domain error.
    """
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot round non-finite values")
    a = np.abs(x)
    # frexp: a = f * 2**e with f in [0.5, 1), so the binade exponent is e - 1.
    _, e = np.frexp(a)
    # Spacing of representable values around a: 2**(binade - man_bits) for
    # normals, clamped at the subnormal spacing below the normal range.
    quantum = np.maximum(e - 1, fmt.min_normal_exp) - fmt.man_bits
    q = np.rint(np.ldexp(a, -quantum))  # ties to even mantissa code
    r = np.ldexp(q, quantum)
    over = a > fmt.max_magnitude
    r = np.where(over, fmt.max_magnitude, r)
    return np.copysign(r, x), over


def round_value(fmt: FpFormat, x: float) -> RoundOutcome:
    """Round one finite scalar, reporting saturation and underflow-to-zero."""
    arr, over = round_array(fmt, float(x))
    v = float(arr)
    return RoundOutcome(v, bool(over), v == 0.0 and x != 0.0)


def round_tensor(fmt: FpFormat, values) -> RoundedTensor:
    """Round an array and count how many elements saturated."""
    arr, over = round_array(fmt, values)
    return RoundedTensor(arr, int(np.count_nonzero(over)), arr.size)


def enumerate_values(fmt: FpFormat) -> list[float]:
    """All representable values of a narrow format, sorted ascending.

    Refuses formats wider than 16 bits (the list would be pointlessly big).
    With both zero codes collapsed the list has ``2**bitwidth - 1`` entries.
    """
    if fmt.bitwidth > 16:
        raise ValueError(f"refusing to enumerate {fmt}: wider than 16 bits")
    positives = []
    for f in range(1, 2**fmt.man_bits):
        positives.append(math.ldexp(f, fmt.min_normal_exp - fmt.man_bits))
    for code in range(1, 2**fmt.exp_bits):
        binade = code - fmt.base_bias - fmt.extra_bias
        for f in range(2**fmt.man_bits):
            positives.append(math.ldexp(2**fmt.man_bits + f, binade - fmt.man_bits))
    return sorted({-v for v in positives} | {0.0} | set(positives))
