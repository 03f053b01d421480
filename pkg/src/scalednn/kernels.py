"""Initialization law, test-function algebra, and limit kernels.

A single "particle" of the wide network is theta = (c, w2, w1) with c a real,
w2 a vector of length N_1, and w1 the shared (N_1, d) first-layer matrix. The
initialization measure gamma0 is a product: the realized first-layer rows are
frozen as atoms, while c and the entries of w2 stay random with mean-zero
compactly supported one-dimensional laws.

Test functions are built compositionally from coordinates, sigma(Z(x)) with
Z(x) = N_1^{-gamma_1} sum_j w2_j sigma(w1_j . x), and sigma(w1_j . x) factors.
Every node knows its exact symbolic derivatives in c, in each w2_j, and in any
direction of each w1_j, up to activation derivative order 3; deeper orders
raise instead of approximating. Evaluation is vectorized over particle batches
with per-session structural caching, which is what makes exact enumeration of
the many thousands of expectations behind the fluctuation systems affordable.

Kernels: B1_{x,x'} = sigma(Z(x'))sigma(Z(x)),
B2^j_{x,x'} = c^2 sigma'(Z(x'))sigma'(Z(x))sigma(w1_j.x')sigma(w1_j.x),
B3^j_x = c w2_j sigma'(w1_j.x)sigma'(Z(x)); the M x M driving matrix is
A_{x,x'} = <B1> + (1/N_1) sum_j [<B2^j> + (x.x') <B3^j_x><B3^j_{x'}>].
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core_model import ActivationSpec, DomainError, MAX_SIGMA_ORDER

__all__ = [
    "Law1D",
    "InitLaw",
    "FunctionSpace",
    "TestFunction",
    "KernelTables",
    "DerivativeOrderError",
    "expect",
    "kernel_B",
    "assemble_A",
    "operator_C",
    "operators_Cf1_Cf2_C3",
    "lambda_sq",
    "initial_fluctuation_cov",
]

ENUM_GRID_LIMIT = 1 << 22


class DerivativeOrderError(DomainError):
    """The requested derivative exceeds the available activation order."""


# ---------------------------------------------------------------------------
# one-dimensional laws and the product initialization law


@dataclass(frozen=True)
class Law1D:
    """Mean-zero one-dimensional law: discrete atoms, uniform, or gaussian.

    Gaussian is offered only so its rejection (unbounded support) can be
    exercised; the laws actually used for limits must be bounded.
    """

    kind: str
    atoms: tuple[float, ...] = ()
    weights: tuple[float, ...] = ()
    lo: float = 0.0
    hi: float = 0.0
    sd: float = 1.0

    @staticmethod
    def rademacher() -> "Law1D":
        return Law1D("discrete", atoms=(-1.0, 1.0), weights=(0.5, 0.5))

    @staticmethod
    def point_mass(v: float) -> "Law1D":
        return Law1D("discrete", atoms=(float(v),), weights=(1.0,))

    @staticmethod
    def discrete(atoms: Sequence[float], weights: Sequence[float]) -> "Law1D":
        return Law1D("discrete", atoms=tuple(map(float, atoms)), weights=tuple(map(float, weights)))

    @staticmethod
    def uniform(lo: float, hi: float) -> "Law1D":
        return Law1D("uniform", lo=float(lo), hi=float(hi))

    @staticmethod
    def gaussian(sd: float) -> "Law1D":
        return Law1D("gaussian", sd=float(sd))

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete"

    @property
    def bounded(self) -> bool:
        return self.kind in ("discrete", "uniform")

    @property
    def mean(self) -> float:
        if self.kind == "discrete":
            return float(np.dot(self.atoms, self.weights))
        if self.kind == "uniform":
            return 0.5 * (self.lo + self.hi)
        return 0.0

    def validate(self) -> None:
        if self.kind == "discrete":
            if len(self.atoms) == 0 or len(self.atoms) != len(self.weights):
                raise DomainError("discrete law needs matching atoms and weights")
            if any(w < 0 for w in self.weights):
                raise DomainError("negative weight in discrete law")
            if abs(sum(self.weights) - 1.0) > 1e-12:
                raise DomainError("discrete law weights must sum to 1")
        elif self.kind == "uniform":
            if not self.hi > self.lo:
                raise DomainError("uniform law needs hi > lo")
        elif self.kind != "gaussian":
            raise DomainError(f"unknown law kind {self.kind!r}")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        self.validate()
        if self.kind == "discrete":
            idx = rng.choice(len(self.atoms), size=shape, p=np.asarray(self.weights))
            return np.asarray(self.atoms, dtype=float)[idx]
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, size=shape)
        return rng.normal(0.0, self.sd, size=shape)

    def nodes(self, n_quad: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """(points, probability weights) for exact sums or quadrature."""
        self.validate()
        if self.kind == "discrete":
            return np.asarray(self.atoms, dtype=float), np.asarray(self.weights, dtype=float)
        if self.kind == "uniform":
            xs, ws = np.polynomial.legendre.leggauss(n_quad)
            half = 0.5 * (self.hi - self.lo)
            mid = 0.5 * (self.hi + self.lo)
            return mid + half * xs, ws * 0.5  # ws sum to 2 on [-1, 1]
        raise DomainError("no bounded node rule for gaussian law")


@dataclass(frozen=True)
class InitLaw:
    """Product initialization measure: frozen w1 atoms x mu_w2^(xN1) x mu_c."""

    w1_atoms: np.ndarray
    mu_w2: Law1D
    mu_c: Law1D

    def __post_init__(self):
        object.__setattr__(self, "w1_atoms", np.asarray(self.w1_atoms, dtype=float))
        self.validate()

    def validate(self) -> None:
        if self.w1_atoms.ndim != 2:
            raise DomainError("w1 atoms must be an (N1, d) array")
        if not np.all(np.isfinite(self.w1_atoms)):
            raise DomainError("non-finite w1 atom")
        for name, law in (("mu_w2", self.mu_w2), ("mu_c", self.mu_c)):
            law.validate()
            if not law.bounded:
                raise DomainError(f"{name} has unbounded support")
            if abs(law.mean) > 1e-12:
                raise DomainError(f"{name} is not mean-zero")

    @property
    def n1(self) -> int:
        return self.w1_atoms.shape[0]

    @staticmethod
    def default(n1: int, d: int, seed: int) -> "InitLaw":
        """Rademacher c and w2, uniform [-1,1]^d first-layer atoms."""
        rng = np.random.default_rng(np.uint64(seed))
        atoms = rng.uniform(-1.0, 1.0, size=(n1, d))
        return InitLaw(atoms, Law1D.rademacher(), Law1D.rademacher())


# ---------------------------------------------------------------------------
# particle batches and evaluation sessions


@dataclass
class ParticleBatch:
    """Vectorized particles: c (S,), w2 (S, N1), shared w1 (N1, d)."""

    c: np.ndarray
    w2: np.ndarray
    w1: np.ndarray
    weights: np.ndarray | None = None  # enumeration / quadrature weights


class _EvalSession:
    __slots__ = ("batch", "cache")

    def __init__(self, batch: ParticleBatch):
        self.batch = batch
        self.cache: dict[str, object] = {}


# ---------------------------------------------------------------------------
# test-function expression nodes


class TestFunction:
    """A function of one particle, with exact parameter derivatives.

    Nodes form a closed algebra under sums, products, scalar multiples, and
    the derivative maps d_c, d_w2(j), d_w1_dir(j, v). Structural keys make
    evaluation cacheable across the whole session.
    """

    __slots__ = ("space", "key")

    def __init__(self, space: "FunctionSpace", key: str):
        self.space = space
        self.key = key

    # -- evaluation

    def _eval(self, s: _EvalSession):
        raise NotImplementedError

    def eval_batch(self, batch: ParticleBatch, session: _EvalSession | None = None):
        s = session if session is not None else _EvalSession(batch)
        v = s.cache.get(self.key)
        if v is None:
            v = self._eval(s)
            s.cache[self.key] = v
        return v

    def value(self, c: float, w2: np.ndarray, w1: np.ndarray) -> float:
        batch = ParticleBatch(
            np.asarray([c], dtype=float),
            np.asarray(w2, dtype=float).reshape(1, -1),
            np.asarray(w1, dtype=float),
        )
        out = self.eval_batch(batch)
        return float(np.asarray(out).reshape(-1)[0]) if np.ndim(out) else float(out)

    # -- derivatives (symbolic, return new TestFunctions)

    def d_c(self) -> "TestFunction":
        raise NotImplementedError

    def d_w2(self, j: int) -> "TestFunction":
        raise NotImplementedError

    def d_w1_dir(self, j: int, v: np.ndarray) -> "TestFunction":
        """Directional derivative in w1_j along the vector v."""
        raise NotImplementedError

    def grad_w1(self, j: int) -> list["TestFunction"]:
        d = self.space.dim
        basis = np.eye(d)
        return [self.d_w1_dir(j, basis[i]) for i in range(d)]

    def __repr__(self):
        k = self.key if len(self.key) <= 60 else self.key[:57] + "..."
        return f"TestFunction({k})"


class _Const(TestFunction):
    __slots__ = ("a",)

    def __init__(self, space, a: float):
        self.a = float(a)
        super().__init__(space, f"k:{self.a!r}")

    def _eval(self, s):
        return self.a

    def d_c(self):
        return self.space.const(0.0)

    def d_w2(self, j):
        return self.space.const(0.0)

    def d_w1_dir(self, j, v):
        return self.space.const(0.0)


class _CoordC(TestFunction):
    __slots__ = ()

    def __init__(self, space):
        super().__init__(space, "c")

    def _eval(self, s):
        return s.batch.c

    def d_c(self):
        return self.space.const(1.0)

    def d_w2(self, j):
        return self.space.const(0.0)

    def d_w1_dir(self, j, v):
        return self.space.const(0.0)


class _CoordW2(TestFunction):
    __slots__ = ("j",)

    def __init__(self, space, j: int):
        self.j = int(j)
        super().__init__(space, f"w2[{self.j}]")

    def _eval(self, s):
        return s.batch.w2[:, self.j]

    def d_c(self):
        return self.space.const(0.0)

    def d_w2(self, j):
        return self.space.const(1.0 if j == self.j else 0.0)

    def d_w1_dir(self, j, v):
        return self.space.const(0.0)


class _SigZ(TestFunction):
    """sigma^(order)(Z(x_pt)) with Z(x) = N1^{-gamma1} sum_j w2_j sigma(w1_j.x)."""

    __slots__ = ("order", "pt")

    def __init__(self, space, order: int, pt: int):
        self.order = int(order)
        self.pt = int(pt)
        super().__init__(space, f"sz{self.order}[{self.pt}]")

    def _eval(self, s):
        zkey = f"_Z[{self.pt}]"
        z = s.cache.get(zkey)
        if z is None:
            x = self.space.points[self.pt]
            hid = self.space.activation.value(s.batch.w1 @ x)  # (N1,)
            z = self.space.z_scale * (s.batch.w2 @ hid)  # (S,)
            s.cache[zkey] = z
        return self.space.activation.deriv(z, self.order)

    def d_c(self):
        return self.space.const(0.0)

    def d_w2(self, j):
        sp = self.space
        return sp.prod(
            [sp.sig_z(self.order + 1, self.pt), sp.sig_w(0, j, self.pt)],
            coeff=sp.z_scale,
        )

    def d_w1_dir(self, j, v):
        sp = self.space
        dot = float(np.dot(sp.points[self.pt], np.asarray(v, dtype=float)))
        return sp.prod(
            [sp.sig_z(self.order + 1, self.pt), sp.coord_w2(j), sp.sig_w(1, j, self.pt)],
            coeff=sp.z_scale * dot,
        )


class _SigW(TestFunction):
    """sigma^(order)(w1_j . x_pt)."""

    __slots__ = ("order", "j", "pt")

    def __init__(self, space, order: int, j: int, pt: int):
        self.order = int(order)
        self.j = int(j)
        self.pt = int(pt)
        super().__init__(space, f"sw{self.order}[{self.j},{self.pt}]")

    def _eval(self, s):
        x = self.space.points[self.pt]
        return float(self.space.activation.deriv(float(s.batch.w1[self.j] @ x), self.order))

    def d_c(self):
        return self.space.const(0.0)

    def d_w2(self, j):
        return self.space.const(0.0)

    def d_w1_dir(self, j, v):
        if j != self.j:
            return self.space.const(0.0)
        sp = self.space
        dot = float(np.dot(sp.points[self.pt], np.asarray(v, dtype=float)))
        return sp.scale(dot, sp.sig_w(self.order + 1, self.j, self.pt))


class _Scale(TestFunction):
    __slots__ = ("a", "child")

    def __init__(self, space, a: float, child: TestFunction):
        self.a = float(a)
        self.child = child
        super().__init__(space, f"(s {self.a!r} {child.key})")

    def _eval(self, s):
        return self.a * self.child.eval_batch(s.batch, s)

    def d_c(self):
        return self.space.scale(self.a, self.child.d_c())

    def d_w2(self, j):
        return self.space.scale(self.a, self.child.d_w2(j))

    def d_w1_dir(self, j, v):
        return self.space.scale(self.a, self.child.d_w1_dir(j, v))


class _Sum(TestFunction):
    __slots__ = ("terms",)

    def __init__(self, space, terms: tuple[TestFunction, ...]):
        self.terms = terms
        super().__init__(space, "(+ " + " ".join(t.key for t in terms) + ")")

    def _eval(self, s):
        out = self.terms[0].eval_batch(s.batch, s)
        for t in self.terms[1:]:
            out = out + t.eval_batch(s.batch, s)
        return out

    def d_c(self):
        return self.space.sum([t.d_c() for t in self.terms])

    def d_w2(self, j):
        return self.space.sum([t.d_w2(j) for t in self.terms])

    def d_w1_dir(self, j, v):
        return self.space.sum([t.d_w1_dir(j, v) for t in self.terms])


class _Prod(TestFunction):
    __slots__ = ("factors",)

    def __init__(self, space, factors: tuple[TestFunction, ...]):
        self.factors = factors
        super().__init__(space, "(* " + " ".join(f.key for f in factors) + ")")

    def _eval(self, s):
        out = self.factors[0].eval_batch(s.batch, s)
        for f in self.factors[1:]:
            out = out * f.eval_batch(s.batch, s)
        return out

    def _leibniz(self, dmap: Callable[[TestFunction], TestFunction]):
        sp = self.space
        terms = []
        for i, f in enumerate(self.factors):
            df = dmap(f)
            if isinstance(df, _Const) and df.a == 0.0:
                continue
            terms.append(sp.prod([df] + [g for k, g in enumerate(self.factors) if k != i]))
        return sp.sum(terms)

    def d_c(self):
        return self._leibniz(lambda f: f.d_c())

    def d_w2(self, j):
        return self._leibniz(lambda f: f.d_w2(j))

    def d_w1_dir(self, j, v):
        return self._leibniz(lambda f: f.d_w1_dir(j, v))


class FunctionSpace:
    """Factory and cache for test functions over a fixed point set.

    Binds the dataset points, the activation, N_1 and gamma_1. Functions from
    different spaces must not be mixed; expectations are cached per law.
    """

    def __init__(self, points: np.ndarray, n1: int, gamma1: float, activation: ActivationSpec | None = None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2:
            raise DomainError("points must be an (M, d) array")
        self.points: list[np.ndarray] = [pts[i].copy() for i in range(pts.shape[0])]
        self.n1 = int(n1)
        self.gamma1 = float(gamma1)
        if not 0.5 <= self.gamma1 <= 1.0:
            raise DomainError("gamma1 outside [1/2, 1]")
        self.activation = activation if activation is not None else ActivationSpec()
        self.z_scale = float(self.n1) ** (-self.gamma1)
        self.kappa = float(self.n1) ** (-(1.0 - self.gamma1))
        self.dim = pts.shape[1]
        self._interned: dict[str, TestFunction] = {}
        self._law_sessions: dict[int, tuple[InitLaw, _EvalSession]] = {}
        self._expect_cache: dict[tuple[int, str], float] = {}

    # -- interning ---------------------------------------------------------

    def _intern(self, node: TestFunction) -> TestFunction:
        found = self._interned.get(node.key)
        if found is not None:
            return found
        self._interned[node.key] = node
        return node

    def point_index(self, x) -> int:
        """Index of a point, appending it if unseen."""
        if isinstance(x, (int, np.integer)):
            if not 0 <= int(x) < len(self.points):
                raise DomainError("point index out of range")
            return int(x)
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.dim:
            raise DomainError("point dimension mismatch")
        for i, p in enumerate(self.points):
            if p.shape == x.shape and np.array_equal(p, x):
                return i
        self.points.append(x.copy())
        return len(self.points) - 1

    # -- primitives --------------------------------------------------------

    def const(self, a: float) -> TestFunction:
        return self._intern(_Const(self, a))

    def coord_c(self) -> TestFunction:
        return self._intern(_CoordC(self))

    def coord_w2(self, j: int) -> TestFunction:
        if not 0 <= j < self.n1:
            raise DomainError("w2 index out of range")
        return self._intern(_CoordW2(self, j))

    def sig_z(self, order: int, x) -> TestFunction:
        if order > MAX_SIGMA_ORDER:
            raise DerivativeOrderError(
                f"activation derivative order {order} exhausted (max {MAX_SIGMA_ORDER})"
            )
        return self._intern(_SigZ(self, order, self.point_index(x)))

    def sig_w(self, order: int, j: int, x) -> TestFunction:
        if order > MAX_SIGMA_ORDER:
            raise DerivativeOrderError(
                f"activation derivative order {order} exhausted (max {MAX_SIGMA_ORDER})"
            )
        if not 0 <= j < self.n1:
            raise DomainError("w1 row index out of range")
        return self._intern(_SigW(self, order, j, self.point_index(x)))

    # -- combinators -------------------------------------------------------

    def scale(self, a: float, f: TestFunction) -> TestFunction:
        a = float(a)
        if a == 0.0:
            return self.const(0.0)
        if isinstance(f, _Const):
            return self.const(a * f.a)
        if isinstance(f, _Scale):
            return self.scale(a * f.a, f.child)
        if a == 1.0:
            return f
        return self._intern(_Scale(self, a, f))

    def sum(self, terms: Sequence[TestFunction]) -> TestFunction:
        flat: list[TestFunction] = []
        const_acc = 0.0
        stack = list(terms)
        while stack:
            t = stack.pop()
            if isinstance(t, _Sum):
                stack.extend(t.terms)
            elif isinstance(t, _Const):
                const_acc += t.a
            else:
                flat.append(t)
        if const_acc != 0.0:
            flat.append(self.const(const_acc))
        if not flat:
            return self.const(0.0)
        if len(flat) == 1:
            return flat[0]
        flat.sort(key=lambda t: t.key)
        return self._intern(_Sum(self, tuple(flat)))

    def prod(self, factors: Sequence[TestFunction], coeff: float = 1.0) -> TestFunction:
        flat: list[TestFunction] = []
        a = float(coeff)
        stack = list(factors)
        while stack:
            f = stack.pop()
            if isinstance(f, _Prod):
                stack.extend(f.factors)
            elif isinstance(f, _Scale):
                a *= f.a
                stack.append(f.child)
            elif isinstance(f, _Const):
                a *= f.a
            else:
                flat.append(f)
        if a == 0.0:
            return self.const(0.0)
        if not flat:
            return self.const(a)
        flat.sort(key=lambda t: t.key)
        core = flat[0] if len(flat) == 1 else self._intern(_Prod(self, tuple(flat)))
        return self.scale(a, core)

    # -- expectation sessions ------------------------------------------------

    def _grid_batch(self, law: InitLaw, n_quad: int = 64) -> ParticleBatch:
        c_nodes, c_w = law.mu_c.nodes(n_quad)
        w_nodes, w_w = law.mu_w2.nodes(n_quad)
        a = len(w_nodes)
        total = len(c_nodes) * a**self.n1
        if total > ENUM_GRID_LIMIT:
            raise DomainError(
                f"expectation grid of {total} nodes exceeds limit; use monte-carlo"
            )
        combos = np.array(list(itertools.product(range(a), repeat=self.n1)), dtype=int)
        w2 = w_nodes[combos]  # (a^N1, N1)
        w2_weight = np.prod(w_w[combos], axis=1)
        c = np.repeat(c_nodes, w2.shape[0])
        w2_full = np.tile(w2, (len(c_nodes), 1))
        weights = np.repeat(c_w, w2.shape[0]) * np.tile(w2_weight, len(c_nodes))
        return ParticleBatch(c, w2_full, law.w1_atoms, weights)

    def _session_for(self, law: InitLaw) -> _EvalSession:
        entry = self._law_sessions.get(id(law))
        if entry is None:
            if law.n1 != self.n1:
                raise DomainError("law atom count differs from the space's N1")
            batch = self._grid_batch(law)
            entry = (law, _EvalSession(batch))
            self._law_sessions[id(law)] = entry
        return entry[1]

    def expect_grid(self, f: TestFunction, law: InitLaw) -> float:
        """Exact enumeration (all-discrete law) or tensor quadrature."""
        ckey = (id(law), f.key)
        v = self._expect_cache.get(ckey)
        if v is None:
            s = self._session_for(law)
            vals = f.eval_batch(s.batch, s)
            if np.ndim(vals) == 0:
                v = float(vals) * float(np.sum(s.batch.weights))
            else:
                v = float(np.dot(s.batch.weights, vals))
            self._expect_cache[ckey] = v
        return v


# ---------------------------------------------------------------------------
# public expectation entry point


def expect(
    f: TestFunction,
    law: InitLaw,
    method: str = "auto",
    mc_samples: int = 100_000,
    seed: int = 0,
    with_se: bool = False,
):
    """<f, gamma0> by exact enumeration, tensor quadrature, or Monte Carlo.

    enumerate requires a fully discrete law; quadrature is the tensor
    Gauss-Legendre rule (64 nodes per continuous component) and is feasible
    only for small N_1; monte-carlo reports (value, standard error) when
    with_se is true.
    """
    law.validate()
    space = f.space
    if method == "auto":
        method = "enumerate" if (law.mu_c.is_discrete and law.mu_w2.is_discrete) else "quadrature"
    if method == "enumerate":
        if not (law.mu_c.is_discrete and law.mu_w2.is_discrete):
            raise DomainError("enumeration requested on a continuous law")
        return space.expect_grid(f, law)
    if method == "quadrature":
        return space.expect_grid(f, law)
    if method == "monte-carlo":
        rng = np.random.default_rng(np.uint64(seed))
        c = law.mu_c.sample(rng, mc_samples)
        w2 = law.mu_w2.sample(rng, (mc_samples, space.n1))
        batch = ParticleBatch(c, w2, law.w1_atoms)
        vals = np.broadcast_to(np.asarray(f.eval_batch(batch), dtype=float), (mc_samples,))
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / np.sqrt(mc_samples)) if mc_samples > 1 else float("nan")
        return (mean, se) if with_se else mean
    raise DomainError(f"unknown expectation method {method!r}")


# ---------------------------------------------------------------------------
# kernels


@dataclass
class KernelTables:
    """Dataset-indexed expectations of the B kernels plus the assembled A."""

    B1: np.ndarray  # (M, M)
    B2: np.ndarray  # (N1, M, M)
    B3: np.ndarray  # (N1, M)
    space: FunctionSpace
    law: InitLaw
    A: np.ndarray | None = None

    @property
    def m_points(self) -> int:
        return self.B1.shape[0]

    def to_csv(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "kernel_b1.csv"), "w") as fh:
            fh.write("x_index,xp_index,value\n")
            for a in range(self.B1.shape[0]):
                for b in range(self.B1.shape[1]):
                    fh.write(f"{a},{b},{float(self.B1[a, b])!r}\n")
        with open(os.path.join(out_dir, "kernel_b2.csv"), "w") as fh:
            fh.write("j,x_index,xp_index,value\n")
            for j in range(self.B2.shape[0]):
                for a in range(self.B2.shape[1]):
                    for b in range(self.B2.shape[2]):
                        fh.write(f"{j},{a},{b},{float(self.B2[j, a, b])!r}\n")
        with open(os.path.join(out_dir, "kernel_b3.csv"), "w") as fh:
            fh.write("j,x_index,value\n")
            for j in range(self.B3.shape[0]):
                for a in range(self.B3.shape[1]):
                    fh.write(f"{j},{a},{float(self.B3[j, a])!r}\n")
        if self.A is not None:
            with open(os.path.join(out_dir, "kernel_a.csv"), "w") as fh:
                fh.write("x_index,xp_index,value\n")
                for a in range(self.A.shape[0]):
                    for b in range(self.A.shape[1]):
                        fh.write(f"{a},{b},{float(self.A[a, b])!r}\n")


def _dataset_points(dataset) -> np.ndarray:
    X = getattr(dataset, "X", dataset)
    return np.asarray(X, dtype=float)


def kernel_tf_B1(space: FunctionSpace, a: int, b: int) -> TestFunction:
    return space.prod([space.sig_z(0, a), space.sig_z(0, b)])


def kernel_tf_B2(space: FunctionSpace, j: int, a: int, b: int) -> TestFunction:
    c = space.coord_c()
    return space.prod(
        [c, c, space.sig_z(1, a), space.sig_z(1, b), space.sig_w(0, j, a), space.sig_w(0, j, b)]
    )


def kernel_tf_B3(space: FunctionSpace, j: int, a: int) -> TestFunction:
    return space.prod(
        [space.coord_c(), space.coord_w2(j), space.sig_w(1, j, a), space.sig_z(1, a)]
    )


def kernel_B(
    dataset,
    law: InitLaw,
    n1: int,
    gamma1: float,
    activation: ActivationSpec | None = None,
    space: FunctionSpace | None = None,
    method: str = "auto",
) -> KernelTables:
    """Expectation tables <B1>, <B2^j>, <B3^j> over the dataset points."""
    X = _dataset_points(dataset)
    if space is None:
        space = FunctionSpace(X, n1, gamma1, activation)
    elif space.n1 != n1 or space.gamma1 != float(gamma1):
        raise DomainError("function space inconsistent with n1/gamma1")
    M = X.shape[0]
    B1 = np.empty((M, M))
    B2 = np.empty((n1, M, M))
    B3 = np.empty((n1, M))
    for a in range(M):
        for b in range(M):
            B1[a, b] = expect(kernel_tf_B1(space, a, b), law, method)
            for j in range(n1):
                B2[j, a, b] = expect(kernel_tf_B2(space, j, a, b), law, method)
    for j in range(n1):
        for a in range(M):
            B3[j, a] = expect(kernel_tf_B3(space, j, a), law, method)
    return KernelTables(B1, B2, B3, space, law)


def assemble_A(tables: KernelTables, dataset) -> np.ndarray:
    """A = <B1> + (1/N1) sum_j [<B2^j> + (x.x') <B3^j_x><B3^j_x'>]."""
    X = _dataset_points(dataset)
    gram = X @ X.T
    n1 = tables.B2.shape[0]
    cross = np.einsum("ja,jb->ab", tables.B3, tables.B3)
    A = tables.B1 + (tables.B2.sum(axis=0) + gram * cross) / n1
    tables.A = A
    return A


# ---------------------------------------------------------------------------
# measure-evolution operators


def operators_Cf1_Cf2_C3(
    f: TestFunction, x, gamma1: float | None = None, n1: int | None = None
) -> tuple[TestFunction, TestFunction, list[TestFunction]]:
    """Building blocks of the measure drift applied to f at the point x:

    part 1: d_c f * sigma(Z(x));
    part 2: c sigma'(Z(x)) sum_j sigma(w1_j.x) d_{w2_j} f;
    part 3: the vector c sigma'(Z(x)) sigma'(w1_j.x) w2_j, one entry per j
            (the same functions as the B3 kernels at x).
    """
    sp = f.space
    if n1 is not None and n1 != sp.n1:
        raise DomainError("n1 inconsistent with the function space")
    if gamma1 is not None and float(gamma1) != sp.gamma1:
        raise DomainError("gamma1 inconsistent with the function space")
    p = sp.point_index(x)
    c1 = sp.prod([f.d_c(), sp.sig_z(0, p)])
    c2 = sp.sum(
        [
            sp.prod([sp.coord_c(), sp.sig_z(1, p), sp.sig_w(0, j, p), f.d_w2(j)])
            for j in range(sp.n1)
        ]
    )
    c3 = [kernel_tf_B3(sp, j, p) for j in range(sp.n1)]
    return c1, c2, c3


def operator_C(
    f: TestFunction,
    x_prime,
    law: InitLaw,
    n1: int | None = None,
    gamma1: float | None = None,
) -> TestFunction:
    """The full drift operator applied to f at x':

    part 1 + N1^{-(1-gamma1)} part 2
           + N1^{-(1-gamma1)} sum_j <B3^j_{x'}> (grad_{w1_j} f . x')
    with the bracket taken under the law.
    """
    sp = f.space
    c1, c2, c3 = operators_Cf1_Cf2_C3(f, x_prime, gamma1, n1)
    p = sp.point_index(x_prime)
    xp = sp.points[p]
    grad_terms = []
    for j in range(sp.n1):
        b3j = expect(c3[j], law)
        if b3j != 0.0:
            grad_terms.append(sp.scale(b3j, f.d_w1_dir(j, xp)))
    return sp.sum([c1, sp.scale(sp.kappa, c2), sp.scale(sp.kappa, sp.sum(grad_terms))])


def lambda_sq(x, law: InitLaw, n1: int, gamma1: float, space: FunctionSpace | None = None) -> float:
    """Variance of the initialization fluctuation at x: <|c sigma(Z(x))|^2>."""
    if space is None:
        space = FunctionSpace(np.asarray(x, dtype=float).reshape(1, -1), n1, gamma1)
    p = space.point_index(x)
    c = space.coord_c()
    f = space.prod([c, c, space.sig_z(0, p), space.sig_z(0, p)])
    return expect(f, law)


def initial_fluctuation_cov(dataset, law: InitLaw, n1: int, gamma1: float,
                            space: FunctionSpace | None = None) -> np.ndarray:
    """Joint covariance <c^2 sigma(Z(x)) sigma(Z(x'))> over the dataset points;
    the diagonal equals lambda_sq at each point."""
    X = _dataset_points(dataset)
    if space is None:
        space = FunctionSpace(X, n1, gamma1)
    M = X.shape[0]
    cov = np.empty((M, M))
    c = space.coord_c()
    for a in range(M):
        for b in range(a, M):
            f = space.prod([c, c, space.sig_z(0, a), space.sig_z(0, b)])
            cov[a, b] = cov[b, a] = expect(f, law)
    return cov
