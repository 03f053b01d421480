"""Wide-network limit dynamics and the width expansion.

On a training set of M points the limit output path h solves the linear ODE

    dh/dt = (1/M) A (y - h),        h_0 = 0,

with A the kernel matrix assembled from the B tables. Around h, corrections
enter in powers of the top width: writing phi = 1 - gamma_2, the network value
expands as

    h + N_2^{-phi} Q_1 + N_2^{-2 phi} Q_2 + ... + N_2^{-(gamma_2 - 1/2)} Q_nu

where the first orders solve forced linear ODEs driven by path functionals
l_n(f) of test functions, and the last order is a Gaussian-initialized pure
decay. The exponent gamma_2 selects how many forced orders exist: nu is the
index of the half-open window [(2 nu - 1)/(2 nu), (2 nu + 1)/(2 nu + 2))
containing gamma_2, and at the left edge the Gaussian order merges with the
last forced one.

Named first- and second-order integrators (K, the functional L, Psi) and the
general recursion assemble their right-hand sides independently; they share
only the static kernel tables, the h path, the Runge-Kutta stepper, and the
trapezoid accumulator, so their agreement is a real consistency check.

States step with classical RK4 (forcing enters substages as F_k,
(F_k + F_{k+1})/2, F_{k+1}); path functionals accumulate with the cumulative
trapezoid rule on the same grid.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .core_model import DomainError
from .kernels import (
    FunctionSpace,
    InitLaw,
    KernelTables,
    TestFunction,
    DerivativeOrderError,
    expect,
    initial_fluctuation_cov,
    kernel_tf_B1,
    kernel_tf_B2,
    kernel_tf_B3,
    operators_Cf1_Cf2_C3,
)

__all__ = [
    "RegimeInfo",
    "classify_regime",
    "OdeState",
    "LBundle",
    "ExpansionState",
    "time_grid",
    "rk4",
    "rk4_forced",
    "path_integral",
    "integrate_h",
    "integrate_l",
    "kernel_l_paths",
    "integrate_K",
    "integrate_L",
    "kernel_L_paths",
    "integrate_Psi",
    "sample_initial_fluctuation",
    "expansion_recursion",
    "reconstruct",
]

MAX_EXPANSION_NU = 3  # bounded by activation derivative order 3


# ---------------------------------------------------------------------------
# regime bookkeeping


@dataclass(frozen=True)
class RegimeInfo:
    """Window data for an exponent gamma_2 in [1/2, 1).

    nu: index of the window [(2nu-1)/(2nu), (2nu+1)/(2nu+2)) holding gamma_2.
    exponent: leading fluctuation size, min(1 - gamma_2, gamma_2 - 1/2).
    boundary: gamma_2 sits at the window's left edge, where the Gaussian
    order coincides with the last forced order.
    network_order: highest order in the expansion (nu, or nu - 1 on a
    boundary).
    """

    gamma2: float
    nu: int
    exponent: float
    boundary: bool
    network_order: int


def classify_regime(gamma2: float) -> RegimeInfo:
    g = float(gamma2)
    if not 0.5 <= g <= 1.0:
        raise DomainError("gamma2 outside [1/2, 1]")
    if g == 1.0:
        raise DomainError("gamma2 = 1 admits no width expansion")
    r = 1.0 / (2.0 * (1.0 - g))
    nu = int(math.floor(r + 1e-9))
    edge = (2 * nu - 1) / (2 * nu)
    boundary = abs(g - edge) <= 1e-12
    exponent = min(1.0 - g, g - 0.5)
    order = nu - 1 if boundary else nu
    return RegimeInfo(g, nu, exponent, boundary, order)


# ---------------------------------------------------------------------------
# grids, steppers, accumulators


def time_grid(T: float, dt: float) -> np.ndarray:
    if not (dt > 0 and T > 0):
        raise DomainError("need positive T and dt")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-8 * max(1.0, abs(T)):
        raise DomainError("T must be an integer multiple of dt")
    return np.linspace(0.0, n * dt, n + 1)


def rk4(rhs, y0: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Classical RK4 for dy/dt = rhs(t, y) on a uniform grid."""
    y0 = np.asarray(y0, dtype=float)
    out = np.empty((t.shape[0],) + y0.shape)
    out[0] = y0
    y = y0.copy()
    dt = float(t[1] - t[0]) if t.shape[0] > 1 else 0.0
    for k in range(t.shape[0] - 1):
        tk = t[k]
        k1 = rhs(tk, y)
        k2 = rhs(tk + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = rhs(tk + 0.5 * dt, y + 0.5 * dt * k2)
        k4 = rhs(tk + dt, y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = y
    return out


def rk4_forced(linop, F: np.ndarray, y0: np.ndarray, t: np.ndarray) -> np.ndarray:
    """RK4 for dy/dt = linop(y) + F(t) with F sampled on the grid.

    Substage forcing uses the endpoint samples and their average at the
    midpoint; every forced system in this module steps through here, so the
    discretizations of independently assembled equations match exactly.
    """
    y0 = np.asarray(y0, dtype=float)
    if F.shape[0] != t.shape[0]:
        raise DomainError("forcing samples must match the time grid")
    out = np.empty((t.shape[0],) + y0.shape)
    out[0] = y0
    y = y0.copy()
    dt = float(t[1] - t[0]) if t.shape[0] > 1 else 0.0
    for k in range(t.shape[0] - 1):
        f0 = F[k]
        f1 = F[k + 1]
        fm = 0.5 * (f0 + f1)
        k1 = linop(y) + f0
        k2 = linop(y + 0.5 * dt * k1) + fm
        k3 = linop(y + 0.5 * dt * k2) + fm
        k4 = linop(y + dt * k3) + f1
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = y
    return out


def path_integral(values: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Cumulative trapezoid of samples along the grid, starting at 0."""
    return cumulative_trapezoid(values, t, axis=0, initial=0.0)


# ---------------------------------------------------------------------------
# states


@dataclass
class OdeState:
    """A solution path on a time grid plus the static data that drove it."""

    t: np.ndarray
    components: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.components[name]

    def to_csv(self, path: str) -> None:
        names = list(self.components)
        cols = ["t"]
        for name in names:
            cols += [f"{name}_{i + 1}" for i in range(self.components[name].shape[1])]
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in range(self.t.shape[0]):
                row = [repr(float(self.t[r]))]
                for name in names:
                    row += [repr(float(v)) for v in self.components[name][r]]
                fh.write(",".join(row) + "\n")


@dataclass
class LBundle:
    """Paths of a functional applied to every kernel entry.

    B1: (n_t, M, M); B2: (n_t, N1, M, M); B3: (n_t, N1, M).
    """

    B1: np.ndarray
    B2: np.ndarray
    B3: np.ndarray


@dataclass
class ExpansionState:
    """Orders Q_0..Q_last of the width expansion on a shared grid.

    orders[n] has shape (n_t, M); meta may carry the kernel matrix, the
    targets, and recorded l_n paths of a user function family.
    """

    t: np.ndarray
    orders: list[np.ndarray]
    regime: RegimeInfo | None
    meta: dict = field(default_factory=dict)

    def to_csv(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write("t,order,component_index,value\n")
            for n, Q in enumerate(self.orders):
                for r in range(self.t.shape[0]):
                    for c in range(Q.shape[1]):
                        fh.write(f"{float(self.t[r])!r},{n},{c},{float(Q[r, c])!r}\n")

    @staticmethod
    def from_csv(path: str, gamma2: float | None = None) -> "ExpansionState":
        rows: list[tuple[float, int, int, float]] = []
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "t,order,component_index,value":
                raise DomainError(f"malformed expansion header in {path}")
            for line in fh:
                if not line.strip():
                    continue
                a, b, c, d = line.strip().split(",")
                rows.append((float(a), int(b), int(c), float(d)))
        if not rows:
            raise DomainError(f"empty expansion file {path}")
        n_orders = max(r[1] for r in rows) + 1
        m = max(r[2] for r in rows) + 1
        t = sorted({r[0] for r in rows})
        t_index = {v: i for i, v in enumerate(t)}
        t = np.asarray(t)
        orders = [np.zeros((t.shape[0], m)) for _ in range(n_orders)]
        for tv, n, c, v in rows:
            orders[n][t_index[tv], c] = v
        regime = classify_regime(gamma2) if gamma2 is not None else None
        return ExpansionState(t, orders, regime)


# ---------------------------------------------------------------------------
# the limit ODE and first-order functionals


def integrate_h(A: np.ndarray, targets: np.ndarray, T: float, dt: float,
                h0: np.ndarray | None = None) -> OdeState:
    """Solve dh/dt = (1/M) A (y - h) from h0 (default 0) with RK4."""
    A = np.asarray(A, dtype=float)
    y = np.asarray(targets, dtype=float).reshape(-1)
    M = y.shape[0]
    if A.shape != (M, M):
        raise DomainError("kernel matrix shape inconsistent with targets")
    t = time_grid(T, dt)
    start = np.zeros(M) if h0 is None else np.asarray(h0, dtype=float).reshape(M).copy()
    path = rk4(lambda _s, h: (A @ (y - h)) / M, start, t)
    return OdeState(t, {"h": path}, {"A": A, "targets": y, "M": M})


def _static_drift_coefficients(f: TestFunction, tables: KernelTables, law: InitLaw):
    """Per-point pieces of <drift of f at x'> under the initialization law.

    Returns (e1, e2, g0) with e1[x'] = <part 1>, e2[x'] = <part 2>, and
    g0[x', j] = <grad_{w1_j} f . x'>; the B3 brackets come from the tables.
    """
    sp = tables.space
    M = tables.m_points
    e1 = np.empty(M)
    e2 = np.empty(M)
    g0 = np.empty((M, sp.n1))
    for p in range(M):
        c1, c2, _ = operators_Cf1_Cf2_C3(f, p)
        e1[p] = expect(c1, law)
        e2[p] = expect(c2, law)
        xp = sp.points[p]
        for j in range(sp.n1):
            g0[p, j] = expect(f.d_w1_dir(j, xp), law)
    return e1, e2, g0


def integrate_l(f: TestFunction, h_state: OdeState, tables: KernelTables, law: InitLaw) -> np.ndarray:
    """First-order path functional of f along the limit:

        l_t(f) = int_0^t (1/M) sum_{x'} (y - h_s)(x') <drift of f at x'> ds,

    where the bracket is constant in s. Returns the path on the grid.
    """
    if f.space is not tables.space:
        raise DomainError("test function built on a different function space")
    sp = tables.space
    e1, e2, g0 = _static_drift_coefficients(f, tables, law)
    coef = e1 + sp.kappa * e2 + sp.kappa * np.einsum("jp,pj->p", tables.B3, g0)
    resid = h_state.meta["targets"][None, :] - h_state["h"]  # (n_t, M)
    integrand = (resid @ coef) / h_state.meta["M"]
    return path_integral(integrand, h_state.t)


def kernel_l_paths(h_state: OdeState, tables: KernelTables, law: InitLaw) -> LBundle:
    """l paths of every kernel entry: the forcing inputs one order up."""
    sp = tables.space
    M = tables.m_points
    n1 = sp.n1
    n_t = h_state.t.shape[0]
    lB1 = np.empty((n_t, M, M))
    lB2 = np.empty((n_t, n1, M, M))
    lB3 = np.empty((n_t, n1, M))
    for a in range(M):
        for b in range(M):
            lB1[:, a, b] = integrate_l(kernel_tf_B1(sp, a, b), h_state, tables, law)
            for j in range(n1):
                lB2[:, j, a, b] = integrate_l(kernel_tf_B2(sp, j, a, b), h_state, tables, law)
    for j in range(n1):
        for a in range(M):
            lB3[:, j, a] = integrate_l(kernel_tf_B3(sp, j, a), h_state, tables, law)
    return LBundle(lB1, lB2, lB3)


# ---------------------------------------------------------------------------
# Gaussian initial data


def sample_initial_fluctuation(dataset, law: InitLaw, n1: int, gamma1: float, seed: int,
                               space: FunctionSpace | None = None) -> np.ndarray:
    """Draw the limiting initial fluctuation on the dataset points: a centered
    Gaussian vector with covariance <c^2 sigma(Z(x)) sigma(Z(x'))>."""
    cov = initial_fluctuation_cov(dataset, law, n1, gamma1, space)
    w, V = np.linalg.eigh(cov)
    w = np.clip(w, 0.0, None)
    z = np.random.default_rng(np.uint64(seed)).standard_normal(cov.shape[0])
    return V @ (np.sqrt(w) * z)


def _resolve_ic(ic, gaussian_wanted: bool, tables, law, dataset, seed, M) -> np.ndarray:
    if isinstance(ic, (list, tuple, np.ndarray)):
        arr = np.asarray(ic, dtype=float).reshape(-1)
        if arr.shape[0] != M:
            raise DomainError("initial condition length differs from the dataset")
        return arr
    if ic == "auto":
        ic = "gaussian" if gaussian_wanted else "zero"
    if ic == "zero":
        return np.zeros(M)
    if ic == "gaussian":
        if tables is None or law is None or dataset is None:
            raise DomainError("gaussian initial condition needs tables, law, and dataset")
        return sample_initial_fluctuation(dataset, law, tables.space.n1, tables.space.gamma1,
                                          seed, tables.space)
    raise DomainError(f"unknown initial condition {ic!r}")


# ---------------------------------------------------------------------------
# first fluctuation order K


def _k_forcing(h_state: OdeState, tables: KernelTables, gram: np.ndarray, lb: LBundle) -> np.ndarray:
    R = h_state.meta["targets"][None, :] - h_state["h"]  # (n_t, M)
    n1 = tables.B2.shape[0]
    M = h_state.meta["M"]
    W = lb.B1 + lb.B2.sum(axis=1) / n1  # (n_t, M, M)
    F = np.einsum("sab,sb->sa", W, R) / M
    T3 = tables.B3  # (n1, M)
    F += np.einsum("sja,ab,jb,sb->sa", lb.B3, gram, T3, R) / (n1 * M)
    F += np.einsum("ja,ab,sjb,sb->sa", T3, gram, lb.B3, R) / (n1 * M)
    return F


def integrate_K(
    h_state: OdeState,
    gamma2: float,
    tables: KernelTables | None = None,
    law: InitLaw | None = None,
    dataset=None,
    ic="auto",
    seed: int = 0,
    lpaths: LBundle | None = None,
) -> OdeState:
    """First-order fluctuation around the limit.

    gamma_2 in [1/2, 3/4): K is the Gaussian order and decays freely,
    dK/dt = -(1/M) A K. gamma_2 in [3/4, 1): K is forced by the l paths of
    the kernels; the initial condition is Gaussian exactly at 3/4 (where the
    orders merge) and zero above.
    """
    g = float(gamma2)
    if not 0.5 <= g < 1.0:
        raise DomainError("gamma2 outside [1/2, 1)")
    A = h_state.meta["A"]
    M = h_state.meta["M"]
    t = h_state.t
    forced = g >= 0.75
    boundary = abs(g - 0.75) <= 1e-12
    K0 = _resolve_ic(ic, (not forced) or boundary, tables, law, dataset, seed, M)
    if not forced:
        path = rk4(lambda _s, k: -(A @ k) / M, K0, t)
        return OdeState(t, {"K": path}, {"A": A, "case": "decay"})
    if tables is None:
        raise DomainError("forced K needs the kernel tables")
    X = tables_points(tables)
    gram = X @ X.T
    if lpaths is None:
        if law is None:
            raise DomainError("forced K needs the initialization law")
        lpaths = kernel_l_paths(h_state, tables, law)
    F = _k_forcing(h_state, tables, gram, lpaths)
    path = rk4_forced(lambda k: -(A @ k) / M, F, K0, t)
    return OdeState(t, {"K": path}, {"A": A, "case": "forced"})


def tables_points(tables: KernelTables) -> np.ndarray:
    return np.stack(tables.space.points[: tables.m_points])


# ---------------------------------------------------------------------------
# second-order functional L and second fluctuation order Psi


def integrate_L(
    f: TestFunction,
    h_state: OdeState,
    K_state: OdeState,
    tables: KernelTables,
    law: InitLaw,
    lpaths: LBundle | None = None,
) -> np.ndarray:
    """Second-order path functional of f: the l equation one level up, with
    the first-order paths feeding the drift and K replacing the residual in
    the correction term. Five contributions per point x':

        (y - h) l(part1), kappa (y - h) l(part2),
        kappa (y - h) sum_j <B3^j> l(grad_j f . x'),
        kappa (y - h) sum_j l(B3^j) <grad_j f . x'>,
        - K <drift of f at x'>,

    each averaged over x' and integrated in time.
    """
    if f.space is not tables.space:
        raise DomainError("test function built on a different function space")
    sp = tables.space
    M = tables.m_points
    t = h_state.t
    resid = h_state.meta["targets"][None, :] - h_state["h"]
    K = K_state["K"]
    if lpaths is None:
        lpaths = kernel_l_paths(h_state, tables, law)
    e1, e2, g0 = _static_drift_coefficients(f, tables, law)
    integrand = np.zeros(t.shape[0])
    for p in range(M):
        c1, c2, _ = operators_Cf1_Cf2_C3(f, p)
        l_c1 = integrate_l(c1, h_state, tables, law)
        l_c2 = integrate_l(c2, h_state, tables, law)
        xp = sp.points[p]
        cross = np.zeros(t.shape[0])
        for j in range(sp.n1):
            l_dir = integrate_l(f.d_w1_dir(j, xp), h_state, tables, law)
            cross += tables.B3[j, p] * l_dir + lpaths.B3[:, j, p] * g0[p, j]
        coef0 = e1[p] + sp.kappa * e2[p] + sp.kappa * float(tables.B3[:, p] @ g0[p])
        integrand += resid[:, p] * (l_c1 + sp.kappa * l_c2 + sp.kappa * cross)
        integrand -= K[:, p] * coef0
    return path_integral(integrand / M, t)


def kernel_L_paths(
    h_state: OdeState,
    K_state: OdeState,
    tables: KernelTables,
    law: InitLaw,
    lpaths: LBundle | None = None,
) -> LBundle:
    """L paths of every kernel entry: the forcing inputs two orders up."""
    sp = tables.space
    M = tables.m_points
    n1 = sp.n1
    n_t = h_state.t.shape[0]
    if lpaths is None:
        lpaths = kernel_l_paths(h_state, tables, law)
    LB1 = np.empty((n_t, M, M))
    LB2 = np.empty((n_t, n1, M, M))
    LB3 = np.empty((n_t, n1, M))
    for a in range(M):
        for b in range(M):
            LB1[:, a, b] = integrate_L(kernel_tf_B1(sp, a, b), h_state, K_state, tables, law, lpaths)
            for j in range(n1):
                LB2[:, j, a, b] = integrate_L(
                    kernel_tf_B2(sp, j, a, b), h_state, K_state, tables, law, lpaths
                )
    for j in range(n1):
        for a in range(M):
            LB3[:, j, a] = integrate_L(kernel_tf_B3(sp, j, a), h_state, K_state, tables, law, lpaths)
    return LBundle(LB1, LB2, LB3)


def _psi_forcing(
    h_state: OdeState,
    K_state: OdeState,
    tables: KernelTables,
    gram: np.ndarray,
    lb: LBundle,
    Lb: LBundle,
) -> np.ndarray:
    R = h_state.meta["targets"][None, :] - h_state["h"]
    K = K_state["K"]
    n1 = tables.B2.shape[0]
    M = h_state.meta["M"]
    T3 = tables.B3
    WL = Lb.B1 + Lb.B2.sum(axis=1) / n1
    Wl = lb.B1 + lb.B2.sum(axis=1) / n1
    F = np.einsum("sab,sb->sa", WL, R) / M
    F += np.einsum("sja,ab,jb,sb->sa", Lb.B3, gram, T3, R) / (n1 * M)
    F += np.einsum("ja,ab,sjb,sb->sa", T3, gram, Lb.B3, R) / (n1 * M)
    F += np.einsum("sja,ab,sjb,sb->sa", lb.B3, gram, lb.B3, R) / (n1 * M)
    F -= np.einsum("sab,sb->sa", Wl, K) / M
    F -= np.einsum("sja,ab,jb,sb->sa", lb.B3, gram, T3, K) / (n1 * M)
    F -= np.einsum("ja,ab,sjb,sb->sa", T3, gram, lb.B3, K) / (n1 * M)
    return F


def integrate_Psi(
    h_state: OdeState,
    K_state: OdeState,
    gamma2: float,
    tables: KernelTables | None = None,
    law: InitLaw | None = None,
    dataset=None,
    ic="auto",
    seed: int = 0,
    lpaths: LBundle | None = None,
    Lpaths: LBundle | None = None,
) -> OdeState:
    """Second-order fluctuation around the limit.

    gamma_2 in [3/4, 5/6): Psi is the Gaussian order, dPsi/dt = -(1/M) A Psi.
    gamma_2 in [5/6, 1): Psi is forced by the L paths of the kernels, the
    l-path cross products, and the K-weighted drift correction; the initial
    condition is Gaussian exactly at 5/6 and zero above.
    """
    g = float(gamma2)
    if not 0.75 <= g < 1.0:
        raise DomainError("second fluctuation order needs gamma2 in [3/4, 1)")
    A = h_state.meta["A"]
    M = h_state.meta["M"]
    t = h_state.t
    forced = g >= 5.0 / 6.0 - 1e-12
    boundary = abs(g - 5.0 / 6.0) <= 1e-12
    P0 = _resolve_ic(ic, (not forced) or boundary, tables, law, dataset, seed, M)
    if not forced:
        path = rk4(lambda _s, p: -(A @ p) / M, P0, t)
        return OdeState(t, {"Psi": path}, {"A": A, "case": "decay"})
    if tables is None or law is None:
        raise DomainError("forced Psi needs the kernel tables and the law")
    X = tables_points(tables)
    gram = X @ X.T
    if lpaths is None:
        lpaths = kernel_l_paths(h_state, tables, law)
    if Lpaths is None:
        Lpaths = kernel_L_paths(h_state, K_state, tables, law, lpaths)
    F = _psi_forcing(h_state, K_state, tables, gram, lpaths, Lpaths)
    path = rk4_forced(lambda p: -(A @ p) / M, F, P0, t)
    return OdeState(t, {"Psi": path}, {"A": A, "case": "forced"})


# ---------------------------------------------------------------------------
# the general recursion


class _Engine:
    """Lazily computes the ladder of path functionals l_n(f).

    l_0(f) = <f>; for n >= 1 the integrand at level n uses the residual
    against Q_0 and subtracts the lower orders Q_1..Q_{n-1} against the
    drift paths one level down. Paths are memoized by (n, f.key).
    """

    def __init__(self, tables: KernelTables, law: InitLaw, t: np.ndarray,
                 targets: np.ndarray, orders: list[np.ndarray]):
        self.tables = tables
        self.law = law
        self.sp = tables.space
        self.t = t
        self.y = targets
        self.M = tables.m_points
        self.orders = orders  # live list; grows as the driver appends
        self._memo: dict[tuple[int, str], np.ndarray] = {}
        self._parts: dict[tuple[str, int], tuple] = {}

    def _drift_parts(self, f: TestFunction, p: int):
        key = (f.key, p)
        hit = self._parts.get(key)
        if hit is None:
            c1, c2, c3 = operators_Cf1_Cf2_C3(f, p)
            dirs = tuple(f.d_w1_dir(j, self.sp.points[p]) for j in range(self.sp.n1))
            hit = (c1, c2, c3, dirs)
            self._parts[key] = hit
        return hit

    def l(self, n: int, f: TestFunction) -> np.ndarray:
        if n == 0:
            key = (0, f.key)
            path = self._memo.get(key)
            if path is None:
                path = np.full(self.t.shape[0], expect(f, self.law))
                self._memo[key] = path
            return path
        key = (n, f.key)
        path = self._memo.get(key)
        if path is not None:
            return path
        kappa = self.sp.kappa
        resid0 = self.y[None, :] - self.orders[0]
        integrand = np.zeros(self.t.shape[0])
        for p in range(self.M):
            c1, c2, c3, dirs = self._drift_parts(f, p)

            def drift_path(m: int) -> np.ndarray:
                base = self.l(m, c1) + kappa * self.l(m, c2)
                cross = np.zeros(self.t.shape[0])
                for j in range(self.sp.n1):
                    for k in range(m + 1):
                        cross += self.l(k, c3[j]) * self.l(m - k, dirs[j])
                return base + kappa * cross

            integrand += resid0[:, p] * drift_path(n - 1)
            for m in range(1, n):
                integrand -= self.orders[n - m][:, p] * drift_path(m - 1)
        path = path_integral(integrand / self.M, self.t)
        self._memo[key] = path
        return path

    def kernel_table(self, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(l_n(B1), l_n(B2), l_n(B3)) stacked over all kernel entries."""
        sp = self.sp
        n_t = self.t.shape[0]
        M = self.M
        n1 = sp.n1
        b1 = np.empty((n_t, M, M))
        b2 = np.empty((n_t, n1, M, M))
        b3 = np.empty((n_t, n1, M))
        for a in range(M):
            for b in range(M):
                b1[:, a, b] = self.l(n, kernel_tf_B1(sp, a, b))
                for j in range(n1):
                    b2[:, j, a, b] = self.l(n, kernel_tf_B2(sp, j, a, b))
        for j in range(n1):
            for a in range(M):
                b3[:, j, a] = self.l(n, kernel_tf_B3(sp, j, a))
        return b1, b2, b3


def _formula_forcing(engine: _Engine, n: int, gram: np.ndarray) -> np.ndarray:
    """Forcing of the order-n equation: kernel paths at level n against the
    residual, minus levels m < n against the already-built orders Q_{n-m}.
    The m = 0 term is the linear decay and is stepped implicitly by RK4."""
    n1 = engine.sp.n1
    M = engine.M
    tabs = {m: engine.kernel_table(m) for m in range(n + 1)}
    R0 = engine.y[None, :] - engine.orders[0]

    def pair_term(level: int, weight: np.ndarray) -> np.ndarray:
        b1, b2, _ = tabs[level]
        W = b1 + b2.sum(axis=1) / n1
        out = np.einsum("sab,sb->sa", W, weight) / M
        for k in range(level + 1):
            left = tabs[k][2]
            right = tabs[level - k][2]
            out += np.einsum("sja,ab,sjb,sb->sa", left, gram, right, weight) / (n1 * M)
        return out

    F = pair_term(n, R0)
    for m in range(1, n):
        F -= pair_term(m, engine.orders[n - m])
    return F


def expansion_recursion(
    dataset,
    law: InitLaw,
    gamma2: float,
    T: float,
    dt: float,
    tables: KernelTables | None = None,
    n1: int | None = None,
    gamma1: float | None = None,
    seed: int = 0,
    ic="auto",
    f_family: tuple[tuple[str, TestFunction], ...] = (),
    family_orders: int | None = None,
) -> ExpansionState:
    """Build every order of the width expansion for the window of gamma_2.

    Interior window nu: Q_0 = h, Q_1..Q_{nu-1} solve forced equations from
    zero, Q_nu decays from a Gaussian draw. On a window boundary the Gaussian
    draw seeds the last forced order instead. For each function in f_family
    the paths l_0..l_{family_orders} are recorded.
    """
    regime = classify_regime(gamma2)
    if regime.nu > MAX_EXPANSION_NU:
        raise DerivativeOrderError(
            f"window {regime.nu} needs activation derivatives beyond order 3"
        )
    X = np.asarray(getattr(dataset, "X", dataset), dtype=float)
    y = np.asarray(getattr(dataset, "y"), dtype=float).reshape(-1)
    if tables is None:
        if n1 is None or gamma1 is None:
            raise DomainError("need kernel tables or (n1, gamma1) to build them")
        from .kernels import kernel_B

        tables = kernel_B(X, law, n1, gamma1)
    from .kernels import assemble_A

    A = tables.A if tables.A is not None else assemble_A(tables, X)
    gram = X @ X.T

    G = _resolve_ic(ic, True, tables, law, X, seed, X.shape[0])
    h0 = G if (regime.boundary and regime.network_order == 0) else None
    h_state = integrate_h(A, y, T, dt, h0=h0)
    t = h_state.t

    orders: list[np.ndarray] = [h_state["h"]]
    engine = _Engine(tables, law, t, y, orders)

    M = X.shape[0]
    last = regime.network_order
    for n in range(1, last + 1):
        if (not regime.boundary) and n == regime.nu:
            Qn = rk4(lambda _s, q: -(A @ q) / M, G, t)
        else:
            q0 = G if (regime.boundary and n == last) else np.zeros(M)
            F = _formula_forcing(engine, n, gram)
            Qn = rk4_forced(lambda q: -(A @ q) / M, F, q0, t)
        orders.append(Qn)

    meta = {"A": A, "targets": y, "gram": gram}
    if f_family:
        depth = regime.network_order if family_orders is None else int(family_orders)
        fam = {}
        for name, f in f_family:
            if f.space is not tables.space:
                raise DomainError("family function built on a different function space")
            fam[name] = np.stack([engine.l(n, f) for n in range(depth + 1)])
        meta["l_family"] = fam
    return ExpansionState(t, orders, regime, meta)


def reconstruct(state: ExpansionState, n2: int) -> np.ndarray:
    """Sum the expansion at top width N_2: orders weighted by
    N_2^{-n(1-gamma_2)}, the final one by N_2^{-(gamma_2-1/2)} (equal on a
    boundary)."""
    if state.regime is None:
        raise DomainError("expansion state carries no regime information")
    g = state.regime.gamma2
    n2 = float(n2)
    out = np.zeros_like(state.orders[0])
    last = len(state.orders) - 1
    for n, Q in enumerate(state.orders):
        exp = (g - 0.5) if n == last and n > 0 else n * (1.0 - g)
        out += n2 ** (-exp) * Q
    return out
