"""SGD training of scaled networks with layer-wise learning rates.

One step at sample (x_k, y_k) updates every parameter group simultaneously
from the pre-update parameters:

    delta(param) = rate(group) * residual * d g(x_k) / d param

with the quadratic residual y - g (or the softmax residual for the
classification head). The group rates carry the width powers, so the updates
match the layer-wise schedules exactly; the network normalizations live in
the gradient itself. Time is step count over the top width, t_k = k / N_m.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .core_model import DomainError, ForwardTrace, ScalingConfig, Theta, forward, forward_batch, init_params
from .kernels import (
    FunctionSpace,
    InitLaw,
    ParticleBatch,
    TestFunction,
    kernel_tf_B1,
    kernel_tf_B2,
    kernel_tf_B3,
)
from .rates import RateSchedule

__all__ = [
    "TrainConfig",
    "Trajectory",
    "sgd_step_two_layer",
    "sgd_step_three_layer",
    "train",
    "one_step_decomposition_check",
]


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the data and the init law.

    horizon is the trained time T; the step count is floor(N_m * T) unless
    n_steps overrides it. batch > 1 averages the per-sample forcing over the
    minibatch before applying the rates (the single-sample recursion is the
    canonical one; minibatching is the extension used by the image runs).
    record_stride controls how often the trajectory is sampled (the initial
    and final states are always recorded). test_functions are (name, function)
    pairs averaged over the outer particles at record times; they are only
    meaningful for depth-2 scalar networks.
    """

    scaling: ScalingConfig
    rates: RateSchedule
    horizon: float = 1.0
    n_steps: int | None = None
    batch: int = 1
    record_stride: int = 1
    seed: int = 0
    loss: str = "quadratic"
    sampling: str = "iid"
    param_bound: float = 1e6
    n_classes: int | None = None
    test_functions: tuple[tuple[str, TestFunction], ...] = ()

    def __post_init__(self):
        if self.loss not in ("quadratic", "cross-entropy"):
            raise DomainError(f"unknown loss {self.loss!r}")
        if self.sampling not in ("iid", "epoch_shuffle"):
            raise DomainError(f"unknown sampling mode {self.sampling!r}")
        if self.horizon <= 0 and self.n_steps is None:
            raise DomainError("horizon must be positive")
        if self.batch < 1:
            raise DomainError("batch must be >= 1")
        if self.record_stride < 1:
            raise DomainError("record_stride must be >= 1")
        if self.loss == "cross-entropy" and self.n_classes is None:
            raise DomainError("cross-entropy needs n_classes")
        if self.test_functions and (self.scaling.depth != 2 or self.n_classes is not None):
            raise DomainError("test-function recording needs a depth-2 scalar network")

    @property
    def steps(self) -> int:
        if self.n_steps is not None:
            return int(self.n_steps)
        return int(math.floor(self.scaling.widths[-1] * self.horizon))


@dataclass
class Trajectory:
    """Recorded path of a run: times, network values on the evaluation
    points, per-group max absolute parameters, optional function averages.
    theta is the final parameter state (not serialized)."""

    times: np.ndarray  # (R,)
    h: np.ndarray  # (R, M)
    max_abs: dict[str, np.ndarray]  # group -> (R,)
    tf_names: tuple[str, ...] = ()
    tf_values: np.ndarray | None = None  # (R, n_funcs)
    theta: Theta | None = None

    @property
    def n_records(self) -> int:
        return self.times.shape[0]

    def header(self) -> list[str]:
        cols = ["t"]
        cols += [f"h_{i + 1}" for i in range(self.h.shape[1])]
        cols += [f"max_abs_{g}" for g in self.max_abs]
        cols += [f"f_{name}" for name in self.tf_names]
        return cols

    def to_csv(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(",".join(self.header()) + "\n")
            for r in range(self.n_records):
                row = [repr(float(self.times[r]))]
                row += [repr(float(v)) for v in self.h[r]]
                row += [repr(float(self.max_abs[g][r])) for g in self.max_abs]
                if self.tf_values is not None:
                    row += [repr(float(v)) for v in self.tf_values[r]]
                fh.write(",".join(row) + "\n")

    @staticmethod
    def from_csv(path: str) -> "Trajectory":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            rows = [list(map(float, line.strip().split(","))) for line in fh if line.strip()]
        if not header or header[0] != "t":
            raise DomainError(f"malformed trajectory header in {path}")
        data = np.asarray(rows, dtype=float)
        h_cols = [i for i, c in enumerate(header) if c.startswith("h_")]
        g_cols = [(c[len("max_abs_"):], i) for i, c in enumerate(header) if c.startswith("max_abs_")]
        f_cols = [(c[len("f_"):], i) for i, c in enumerate(header) if c.startswith("f_")]
        times = data[:, 0]
        h = data[:, h_cols] if h_cols else np.zeros((data.shape[0], 0))
        max_abs = {g: data[:, i] for g, i in g_cols}
        names = tuple(n for n, _ in f_cols)
        vals = data[:, [i for _, i in f_cols]] if f_cols else None
        return Trajectory(times, h, max_abs, names, vals)


# ---------------------------------------------------------------------------
# gradients and steps


def _residual(loss: str, g, y):
    """Descent residual: y - g, or one-hot(y) - softmax(g)."""
    if loss == "quadratic":
        return float(y) - float(g)
    logits = np.asarray(g, dtype=float)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    r = -p
    r[int(y)] += 1.0
    return r


def _backprop(config: ScalingConfig, theta: Theta, trace: ForwardTrace, x: np.ndarray, resid):
    """Exact residual-weighted gradients d g / d param, one array per group.

    Returns {group: sum_k resid_k * grad g_k} (scalar resid for a scalar
    head). Shapes match the parameter arrays.
    """
    sigma = config.activation
    m = config.depth
    scale = [float(config.widths[k]) ** (-config.gammas[k]) for k in range(m)]
    grads: dict[str, np.ndarray] = {}
    if theta.C.ndim == 2:
        r = np.asarray(resid, dtype=float)
        grads["C"] = scale[m - 1] * np.outer(r, trace.H[m - 1])
        s = scale[m - 1] * (r @ theta.C)  # (N_m,)
    else:
        grads["C"] = scale[m - 1] * float(resid) * trace.H[m - 1]
        s = scale[m - 1] * float(resid) * theta.C
    for k in range(m, 1, -1):
        d = s * sigma.deriv(trace.Z[k - 1], 1)  # (N_k,)
        grads[f"W{k}"] = scale[k - 2] * np.outer(trace.H[k - 2], d)
        s = scale[k - 2] * (theta.inner[k - 2] @ d)  # (N_{k-1},)
    d1 = s * sigma.deriv(trace.Z[0], 1)
    grads["W1"] = np.outer(d1, x)
    return grads


def _apply_step(
    config: ScalingConfig,
    rates: RateSchedule,
    theta: Theta,
    x: np.ndarray,
    y,
    loss: str,
) -> Theta:
    trace = forward(config, theta, x)
    resid = _residual(loss, trace.g, y)
    grads = _backprop(config, theta, trace, x, resid)
    new = theta.copy()
    new.C += rates.value("C") * grads["C"]
    new.W1 += rates.value("W1") * grads["W1"]
    for k in range(2, config.depth + 1):
        w = new.inner[k - 2]
        w += rates.value(f"W{k}") * grads[f"W{k}"]
    return new


def _apply_step_batch(
    config: ScalingConfig,
    rates: RateSchedule,
    theta: Theta,
    X: np.ndarray,
    y: np.ndarray,
) -> Theta:
    """One minibatch step: the per-sample forcing averaged over the batch,
    all applied simultaneously from the pre-update parameters. The head type
    picks the residual: scalar head quadratic, matrix head softmax."""
    sigma = config.activation
    m = config.depth
    scale = [float(config.widths[k]) ** (-config.gammas[k]) for k in range(m)]
    B = X.shape[0]

    Z: list[np.ndarray] = [X @ theta.W1.T]  # (B, N_1)
    H: list[np.ndarray] = [sigma.value(Z[0])]
    for k in range(2, m + 1):
        Z.append(scale[k - 2] * (H[-1] @ theta.inner[k - 2]))
        H.append(sigma.value(Z[-1]))

    grads: dict[str, np.ndarray] = {}
    if theta.C.ndim == 2:
        logits = scale[m - 1] * (H[m - 1] @ theta.C.T)  # (B, n_classes)
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        r = -p
        r[np.arange(B), y.astype(int)] += 1.0
        grads["C"] = scale[m - 1] * (r.T @ H[m - 1]) / B
        s = scale[m - 1] * (r @ theta.C)  # (B, N_m)
    else:
        g = scale[m - 1] * (H[m - 1] @ theta.C)  # (B,)
        r = np.asarray(y, dtype=float) - g
        grads["C"] = scale[m - 1] * (H[m - 1].T @ r) / B
        s = scale[m - 1] * np.outer(r, theta.C)  # (B, N_m)
    for k in range(m, 1, -1):
        d = s * sigma.deriv(Z[k - 1], 1)  # (B, N_k)
        grads[f"W{k}"] = scale[k - 2] * (H[k - 2].T @ d) / B
        s = scale[k - 2] * (d @ theta.inner[k - 2].T)  # (B, N_{k-1})
    d1 = s * sigma.deriv(Z[0], 1)
    grads["W1"] = (d1.T @ X) / B

    new = theta.copy()
    new.C += rates.value("C") * grads["C"]
    new.W1 += rates.value("W1") * grads["W1"]
    for k in range(2, m + 1):
        w = new.inner[k - 2]
        w += rates.value(f"W{k}") * grads[f"W{k}"]
    return new


def sgd_step_two_layer(
    config: ScalingConfig, rates: RateSchedule, theta: Theta, x: np.ndarray, y: float
) -> Theta:
    """One simultaneous SGD step of a two-layer network on the squared loss."""
    if config.depth != 2:
        raise DomainError("sgd_step_two_layer needs depth 2")
    return _apply_step(config, rates, theta, np.asarray(x, dtype=float), y, "quadratic")


def sgd_step_three_layer(
    config: ScalingConfig, rates: RateSchedule, theta: Theta, x: np.ndarray, y: float
) -> Theta:
    """One simultaneous SGD step of a three-layer network on the squared loss."""
    if config.depth != 3:
        raise DomainError("sgd_step_three_layer needs depth 3")
    return _apply_step(config, rates, theta, np.asarray(x, dtype=float), y, "quadratic")


# ---------------------------------------------------------------------------
# the training loop


def _check_state(theta: Theta, bound: float, step: int) -> None:
    for name, arr in theta.groups():
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"parameter group {name} diverged (non-finite) at step {step}")
        if np.max(np.abs(arr)) > bound:
            raise DomainError(f"parameter group {name} exceeded bound {bound:g} at step {step}")


def _tf_averages(cfg: TrainConfig, theta: Theta) -> np.ndarray:
    batch = ParticleBatch(theta.C, theta.inner[0].T, theta.W1)
    out = np.empty(len(cfg.test_functions))
    for i, (_, f) in enumerate(cfg.test_functions):
        vals = f.eval_batch(batch)
        out[i] = float(np.mean(vals)) if np.ndim(vals) else float(vals)
    return out


def train(config: TrainConfig, dataset, law: InitLaw, theta0: Theta | None = None) -> Trajectory:
    """Run SGD over uniformly sampled dataset points and record the path.

    The step count is config.steps; samples are drawn i.i.d. uniform (or by
    per-epoch shuffling) with the run's own generator, so the whole path is a
    deterministic function of (config, dataset, law). theta0 warm-starts the
    run in place of a fresh draw.
    """
    X = np.asarray(getattr(dataset, "X", dataset), dtype=float)
    y = np.asarray(getattr(dataset, "y"))
    M = X.shape[0]
    if M < 1 or y.shape[0] != M:
        raise DomainError("dataset needs matching X rows and targets")
    scaling = config.scaling
    if theta0 is None:
        theta = init_params(scaling, law, config.seed, config.n_classes)
    else:
        theta = theta0.copy()
        theta.validate(scaling)
    rng = np.random.default_rng([np.uint64(config.seed), np.uint64(1)])
    steps = config.steps
    n_top = scaling.widths[-1]
    batch = config.batch
    if batch > M:
        raise DomainError(f"batch {batch} exceeds dataset size {M}")
    steps_per_epoch = M // batch

    record_at = list(range(0, steps, config.record_stride))
    if not record_at or record_at[-1] != steps:
        record_at.append(steps)
    record_set = set(record_at)

    times = np.empty(len(record_at))
    h = np.empty((len(record_at), M))
    max_abs = {name: np.empty(len(record_at)) for name, _ in theta.groups()}
    tf_vals = np.empty((len(record_at), len(config.test_functions))) if config.test_functions else None

    def record(slot: int, k: int) -> None:
        times[slot] = k / n_top
        out = forward_batch(scaling, theta, X)
        if out.ndim == 2:  # classification head: track the true-class output
            out = out[np.arange(M), y.astype(int)]
        h[slot] = out
        for name, arr in theta.groups():
            max_abs[name][slot] = float(np.max(np.abs(arr)))
        if tf_vals is not None:
            tf_vals[slot] = _tf_averages(config, theta)

    perm = np.empty(0, dtype=int)
    slot = 0
    for k in range(steps + 1):
        if k in record_set:
            _check_state(theta, config.param_bound, k)
            record(slot, k)
            slot += 1
        if k == steps:
            break
        if config.sampling == "iid":
            idx = rng.integers(0, M, size=batch)
        else:
            pos = (k % steps_per_epoch) * batch
            if pos == 0:
                perm = rng.permutation(M)
            idx = perm[pos : pos + batch]
        if batch == 1:
            i = int(idx[0])
            theta = _apply_step(scaling, config.rates, theta, X[i], y[i], config.loss)
            g_now = forward(scaling, theta, X[i]).g
        else:
            theta = _apply_step_batch(scaling, config.rates, theta, X[idx], y[idx])
            g_now = forward(scaling, theta, X[int(idx[0])]).g
        if not np.all(np.isfinite(np.asarray(g_now))):
            _check_state(theta, config.param_bound, k + 1)

    names = tuple(n for n, _ in config.test_functions)
    return Trajectory(times, h, max_abs, names, tf_vals, theta)


# ---------------------------------------------------------------------------
# one-step increment decomposition


def one_step_decomposition_check(
    config: ScalingConfig,
    rates: RateSchedule,
    theta: Theta,
    x: np.ndarray,
    x_k: np.ndarray,
    y_k: float,
    gamma1: float | None = None,
) -> dict:
    """Compare the actual one-step change of g(x) after a step at (x_k, y_k)
    against the kernel form of the increment,

        (1/N_2) (y_k - g(x_k)) [ a_C <B1_{x,x_k}>
                                 + (a_W2/N_1) sum_j <B2^j_{x,x_k}>
                                 + (a_W1/N_1) (x.x_k) sum_j <B3^j_x><B3^j_x_k> ]

    with brackets under the empirical particle measure of theta. The gap is
    the higher-order remainder, of size O(N_2^-(1+gamma_2)) under the
    canonical schedules. Depth 2, scalar head only.
    """
    if config.depth != 2:
        raise DomainError("decomposition check needs depth 2")
    if theta.C.ndim != 1:
        raise DomainError("decomposition check needs a scalar head")
    x = np.asarray(x, dtype=float)
    x_k = np.asarray(x_k, dtype=float)
    n1, n2 = config.widths
    g1 = config.gammas[0] if gamma1 is None else float(gamma1)

    g_before = forward(config, theta, x).g
    g_at_sample = forward(config, theta, x_k).g
    theta_next = sgd_step_two_layer(config, rates, theta, x_k, y_k)
    g_after = forward(config, theta_next, x).g
    actual = g_after - g_before

    space = FunctionSpace(np.stack([x, x_k]), n1, g1, config.activation)
    batch = ParticleBatch(theta.C, theta.inner[0].T, theta.W1)

    def emp(f: TestFunction) -> float:
        vals = f.eval_batch(batch)
        return float(np.mean(vals)) if np.ndim(vals) else float(vals)

    b1 = emp(kernel_tf_B1(space, 0, 1))
    b2 = sum(emp(kernel_tf_B2(space, j, 0, 1)) for j in range(n1))
    b3 = sum(emp(kernel_tf_B3(space, j, 0)) * emp(kernel_tf_B3(space, j, 1)) for j in range(n1))

    a_c = rates.constants["C"]
    a_w1 = rates.constants["W1"]
    a_w2 = rates.constants["W2"]
    bracket = a_c * b1 + a_w2 * b2 / n1 + a_w1 * float(x @ x_k) * b3 / n1
    predicted = (y_k - g_at_sample) * bracket / n2
    return {
        "actual": float(actual),
        "predicted": float(predicted),
        "error": float(abs(actual - predicted)),
        "residual": float(y_k - g_at_sample),
    }
