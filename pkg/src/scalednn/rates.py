"""Layer-wise learning-rate schedules for scaled networks.

Each parameter group (the outer weights C and each layer W^k) gets a rate of
the form  constant * prod_i N_i^{e_i}  where every exponent e_i is a rational
expression in the scaling exponents gamma_i. Exponents are kept symbolic
(fractions.Fraction) and exponentiated exactly once, so identities between the
depth-specific formulas and the general-depth ladder can be checked exactly in
exponent space rather than numerically.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .core_model import DomainError

__all__ = ["RateSchedule", "rates_two_layer", "rates_three_layer", "rates_general"]


def _frac_gamma(g: float) -> Fraction:
    if not 0.5 <= g <= 1.0:
        raise DomainError(f"gamma {g} outside [1/2, 1]")
    return Fraction(g)  # exact binary rational of the float


def _check_widths(N):
    for n in N:
        if int(n) != n or n < 1:
            raise DomainError("widths must be positive integers")
    return [int(n) for n in N]


@dataclass(frozen=True)
class RateSchedule:
    """Per-group learning rates with their generating exponents.

    exponents maps a group label ("C", "W1", ..., "Wm") to a tuple of
    Fractions, one per width N_1..N_m; constants maps labels to the base
    order-one constants. values() evaluates constant * prod N_i^{e_i}.
    """

    depth: int
    widths: tuple[int, ...]
    exponents: dict[str, tuple[Fraction, ...]]
    constants: dict[str, float]

    def __post_init__(self):
        for label, exps in self.exponents.items():
            if len(exps) != self.depth:
                raise DomainError(f"group {label}: need one exponent per width")
        for label, c in self.constants.items():
            if c <= 0:
                raise DomainError(f"group {label}: nonpositive base constant")

    @property
    def groups(self) -> list[str]:
        return ["C"] + [f"W{k}" for k in range(1, self.depth + 1)]

    def value(self, group: str) -> float:
        exps = self.exponents[group]
        v = self.constants[group]
        for n, e in zip(self.widths, exps):
            v *= float(n) ** float(e)
        if not v > 0:
            raise DomainError(f"group {group}: rate not positive")
        return v

    def values(self) -> dict[str, float]:
        return {g: self.value(g) for g in self.groups}

    def as_text(self) -> str:
        """Canonical "group=value" form, one line per group."""
        return "\n".join(f"{g}={self.value(g)!r}" for g in self.groups)


def rates_two_layer(
    N1: int,
    N2: int,
    gamma1: float,
    gamma2: float,
    alpha_C: float = 1.0,
    alpha_W1: float = 1.0,
    alpha_W2: float = 1.0,
) -> RateSchedule:
    """Two-layer schedule:

    rate_C  = alpha_C  * N2^(2 gamma2 - 2)
    rate_W1 = alpha_W1 * N1^(2 gamma1 - 1) N2^(2 gamma2 - 3)
    rate_W2 = alpha_W2 * N1^(2 gamma1 - 1) N2^(2 gamma2 - 2)
    """
    widths = tuple(_check_widths([N1, N2]))
    g1, g2 = _frac_gamma(gamma1), _frac_gamma(gamma2)
    exponents = {
        "C": (Fraction(0), 2 * g2 - 2),
        "W1": (2 * g1 - 1, 2 * g2 - 3),
        "W2": (2 * g1 - 1, 2 * g2 - 2),
    }
    constants = {"C": float(alpha_C), "W1": float(alpha_W1), "W2": float(alpha_W2)}
    return RateSchedule(2, widths, exponents, constants)


def rates_three_layer(
    N1: int,
    N2: int,
    N3: int,
    gamma1: float,
    gamma2: float,
    gamma3: float,
    alpha_C: float = 1.0,
    alpha_W1: float = 1.0,
    alpha_W2: float = 1.0,
    alpha_W3: float = 1.0,
) -> RateSchedule:
    """Three-layer schedule:

    rate_C  = alpha_C  * N3^(2 gamma3 - 2)
    rate_W1 = alpha_W1 * N1^(2 gamma1 - 1) N2^(2 gamma2 - 2) N3^(2 gamma3 - 3)
    rate_W2 = alpha_W2 * N1^(2 gamma1 - 1) N2^(2 gamma2 - 1) N3^(2 gamma3 - 3)
    rate_W3 = alpha_W3 * N2^(2 gamma2 - 1) N3^(2 gamma3 - 2)
    """
    widths = tuple(_check_widths([N1, N2, N3]))
    g1, g2, g3 = _frac_gamma(gamma1), _frac_gamma(gamma2), _frac_gamma(gamma3)
    exponents = {
        "C": (Fraction(0), Fraction(0), 2 * g3 - 2),
        "W1": (2 * g1 - 1, 2 * g2 - 2, 2 * g3 - 3),
        "W2": (2 * g1 - 1, 2 * g2 - 1, 2 * g3 - 3),
        "W3": (Fraction(0), 2 * g2 - 1, 2 * g3 - 2),
    }
    constants = {
        "C": float(alpha_C),
        "W1": float(alpha_W1),
        "W2": float(alpha_W2),
        "W3": float(alpha_W3),
    }
    return RateSchedule(3, widths, exponents, constants)


def rates_general(m: int, N, gammas, constants=None) -> RateSchedule:
    """Arbitrary-depth ladder.

    Group C sees only the top width: exponent 2 gamma_m - 2 on N_m. Group W^m
    adds 2 gamma_{m-1} - 1 on N_{m-1}. Every deeper group W^j (j <= m-1) has
    exponent 2 gamma_{j-1} - 1 on N_{j-1} (absent for j = 1), 2 gamma_j - 1 on
    N_j, 2 gamma_i - 2 on each intermediate N_i (j < i < m), and
    2 gamma_m - 3 on N_m. At m = 2 and m = 3 this reproduces the depth-specific
    schedules exactly, exponent by exponent.
    """
    if m < 2:
        raise DomainError("general-depth rates need m >= 2")
    widths = tuple(_check_widths(N))
    if len(widths) != m or len(gammas) != m:
        raise DomainError("need m widths and m gammas")
    g = [_frac_gamma(x) for x in gammas]
    zero = Fraction(0)

    def exps_for(group_index: int) -> tuple[Fraction, ...]:
        # group_index: 0 for C, j for W^j
        e = [zero] * m
        if group_index == 0:
            e[m - 1] = 2 * g[m - 1] - 2
        elif group_index == m:
            e[m - 1] = 2 * g[m - 1] - 2
            e[m - 2] = 2 * g[m - 2] - 1
        else:
            j = group_index
            if j >= 2:
                e[j - 2] = 2 * g[j - 2] - 1
            e[j - 1] = 2 * g[j - 1] - 1
            for i in range(j + 1, m):
                e[i - 1] = 2 * g[i - 1] - 2
            e[m - 1] = 2 * g[m - 1] - 3
        return tuple(e)

    labels = ["C"] + [f"W{k}" for k in range(1, m + 1)]
    exponents = {label: exps_for(i) for i, label in enumerate(labels)}
    if constants is None:
        constants = {label: 1.0 for label in labels}
    else:
        constants = dict(constants)
        missing = set(labels) - set(constants)
        if missing:
            raise DomainError(f"missing base constants for {sorted(missing)}")
    return RateSchedule(m, widths, exponents, constants)
