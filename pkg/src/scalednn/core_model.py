"""Scaled feed-forward networks and their forward passes.

A depth-m network with widths N_1..N_m and scaling exponents gamma_1..gamma_m
(each in [1/2, 1]) maps an input x through

    Z^1 = W^1 x,                       H^1 = sigma(Z^1)
    Z^k = N_{k-1}^{-gamma_{k-1}} W^k H^{k-1},   H^k = sigma(Z^k)   (k = 2..m)
    g   = N_m^{-gamma_m} C . H^m

All layer normalizations are explicit powers of the widths; nothing is folded
into the weights, so the same Theta can be re-read under different exponents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .kernels import InitLaw

__all__ = [
    "ActivationSpec",
    "ScalingConfig",
    "Theta",
    "ForwardTrace",
    "init_params",
    "forward",
    "forward_batch",
]


MAX_SIGMA_ORDER = 3


class DomainError(ValueError):
    """A precondition on the mathematical domain was violated."""


@dataclass(frozen=True)
class ActivationSpec:
    """Smooth bounded nonlinearity with derivatives through order 3.

    kind: "tanh" (default) or "logistic" (logistic sigmoid shifted to
    mean-zero output, sigma(x) = 1/(1+e^-x) - 1/2).
    """

    kind: str = "tanh"

    def __post_init__(self):
        if self.kind not in ("tanh", "logistic"):
            raise DomainError(f"unknown activation kind: {self.kind!r}")

    def value(self, x):
        return self.deriv(x, 0)

    def deriv(self, x, order: int):
        """order-th derivative at x; order 0 is the value itself."""
        if not 0 <= order <= MAX_SIGMA_ORDER:
            raise DomainError(
                f"activation derivative order {order} unavailable (max {MAX_SIGMA_ORDER})"
            )
        x = np.asarray(x, dtype=float)
        if self.kind == "tanh":
            t = np.tanh(x)
            s = 1.0 - t * t
            if order == 0:
                return t
            if order == 1:
                return s
            if order == 2:
                return -2.0 * t * s
            return s * (6.0 * t * t - 2.0)
        # logistic, shifted: sigma = p - 1/2 with p = 1/(1+e^-x)
        p = 0.5 * (1.0 + np.tanh(0.5 * x))  # numerically stable logistic
        q = p * (1.0 - p)
        if order == 0:
            return p - 0.5
        if order == 1:
            return q
        if order == 2:
            return q * (1.0 - 2.0 * p)
        return q * (1.0 - 6.0 * p + 6.0 * p * p)

    @property
    def sup_value(self) -> float:
        """sup |sigma| over the reals."""
        return 1.0 if self.kind == "tanh" else 0.5


@dataclass(frozen=True)
class ScalingConfig:
    """Widths, exponents and base rate constants of a depth-m network.

    rate_constants is ordered (alpha_C, alpha_W1, ..., alpha_Wm); defaults to
    all ones.
    """

    widths: tuple[int, ...]
    gammas: tuple[float, ...]
    rate_constants: tuple[float, ...] = ()
    activation: ActivationSpec = field(default_factory=ActivationSpec)

    def __post_init__(self):
        widths = tuple(int(n) for n in self.widths)
        gammas = tuple(float(g) for g in self.gammas)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "gammas", gammas)
        if len(widths) < 1:
            raise DomainError("need at least one layer width")
        if len(gammas) != len(widths):
            raise DomainError("gammas and widths must have equal length")
        if any(n < 1 for n in widths):
            raise DomainError("all widths must be >= 1")
        if any(not 0.5 <= g <= 1.0 for g in gammas):
            raise DomainError("every gamma must lie in [1/2, 1]")
        alphas = tuple(float(a) for a in self.rate_constants)
        if not alphas:
            alphas = (1.0,) * (len(widths) + 1)
        if len(alphas) != len(widths) + 1:
            raise DomainError("need one rate constant for C plus one per layer")
        if any(a <= 0 or not math.isfinite(a) for a in alphas):
            raise DomainError("rate constants must be positive and finite")
        object.__setattr__(self, "rate_constants", alphas)

    @property
    def depth(self) -> int:
        return len(self.widths)


@dataclass
class Theta:
    """Full parameter set of a depth-m scaled network.

    W1:    (N_1, d) first-layer rows.
    inner: tuple of W^k with shape (N_{k-1}, N_k), k = 2..m (empty for m=1).
    C:     outer weights, shape (N_m,) for scalar output or
           (n_classes, N_m) for a classification head.
    """

    W1: np.ndarray
    inner: tuple[np.ndarray, ...]
    C: np.ndarray

    def validate(self, config: ScalingConfig) -> None:
        widths = config.widths
        if self.W1.ndim != 2 or self.W1.shape[0] != widths[0]:
            raise DomainError("W1 shape inconsistent with config")
        if len(self.inner) != config.depth - 1:
            raise DomainError("wrong number of inner weight matrices")
        for k, w in enumerate(self.inner, start=2):
            if w.shape != (widths[k - 2], widths[k - 1]):
                raise DomainError(f"W{k} shape inconsistent with config")
        if self.C.shape[-1] != widths[-1]:
            raise DomainError("C length inconsistent with config")
        for name, arr in self.groups():
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"non-finite entries in {name}")

    def groups(self):
        """(label, array) pairs in the order C, W1, W2, ..., Wm."""
        out = [("C", self.C), ("W1", self.W1)]
        for k, w in enumerate(self.inner, start=2):
            out.append((f"W{k}", w))
        return out

    def copy(self) -> "Theta":
        return Theta(self.W1.copy(), tuple(w.copy() for w in self.inner), self.C.copy())


@dataclass
class ForwardTrace:
    """Per-layer pre-activations Z^k, activations H^k, and the output g."""

    Z: tuple[np.ndarray, ...]
    H: tuple[np.ndarray, ...]
    g: float | np.ndarray


def init_params(
    config: ScalingConfig,
    law: "InitLaw",
    seed: int,
    n_classes: int | None = None,
) -> Theta:
    """Draw a parameter set: W1 takes the law's frozen atoms, everything else
    is i.i.d. from the law's one-dimensional components. Deterministic in seed.
    """
    law.validate()
    if law.w1_atoms.shape[0] != config.widths[0]:
        raise DomainError("law atom count differs from N_1")
    rng = np.random.default_rng(np.uint64(seed))
    W1 = np.array(law.w1_atoms, dtype=float, copy=True)
    inner = []
    for k in range(2, config.depth + 1):
        shape = (config.widths[k - 2], config.widths[k - 1])
        inner.append(law.mu_w2.sample(rng, shape))
    c_shape = (config.widths[-1],) if n_classes is None else (n_classes, config.widths[-1])
    C = law.mu_c.sample(rng, c_shape)
    theta = Theta(W1, tuple(inner), C)
    theta.validate(config)
    return theta


def forward(config: ScalingConfig, theta: Theta, x: np.ndarray) -> ForwardTrace:
    """Evaluate the network at a single input, keeping every Z and H."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != theta.W1.shape[1]:
        raise DomainError("input dimension mismatch")
    sigma = config.activation
    Z = [theta.W1 @ x]
    H = [sigma.value(Z[0])]
    for k in range(2, config.depth + 1):
        scale = float(config.widths[k - 2]) ** (-config.gammas[k - 2])
        z = scale * (H[-1] @ theta.inner[k - 2])
        Z.append(z)
        H.append(sigma.value(z))
    out_scale = float(config.widths[-1]) ** (-config.gammas[-1])
    g = out_scale * (theta.C @ H[-1])
    if g.ndim == 0:
        g = float(g)
    return ForwardTrace(tuple(Z), tuple(H), g)


def forward_batch(config: ScalingConfig, theta: Theta, X: np.ndarray) -> np.ndarray:
    """Vectorized outputs over the rows of X: (B,) for a scalar head,
    (B, n_classes) otherwise. Agrees with forward row by row."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DomainError("X must be a 2-d array of row inputs")
    if X.shape[1] != theta.W1.shape[1]:
        raise DomainError("input dimension mismatch")
    sigma = config.activation
    H = sigma.value(X @ theta.W1.T)  # (B, N_1)
    for k in range(2, config.depth + 1):
        scale = float(config.widths[k - 2]) ** (-config.gammas[k - 2])
        H = sigma.value(scale * (H @ theta.inner[k - 2]))
    out_scale = float(config.widths[-1]) ** (-config.gammas[-1])
    return out_scale * (H @ theta.C.T if theta.C.ndim == 2 else H @ theta.C)
