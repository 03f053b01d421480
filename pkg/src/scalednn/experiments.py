"""Desk-scale experiment harnesses: datasets, ensembles, diagnostics.

Everything here is deterministic in its seeds so that reruns reproduce byte
identical outputs: synthetic regression sets, IDX image files and their
loader, threaded Monte Carlo ensembles with a seed-ordered reduce, log-log
scaling fits, and a Kolmogorov-Smirnov normality check for initialization
fluctuations.
"""

from __future__ import annotations

import dataclasses
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core_model import DomainError, ScalingConfig, Theta, forward_batch
from .kernels import InitLaw
from .rates import RateSchedule, rates_two_layer, rates_three_layer
from .trainer import TrainConfig, Trajectory, train

__all__ = [
    "Dataset",
    "synth_dataset",
    "load_mnist",
    "write_idx",
    "synth_image_set",
    "EnsembleResult",
    "mc_ensemble",
    "ScalingFitReport",
    "scaling_fit",
    "NormalityReport",
    "normality_check",
    "accuracy_eval",
    "mnist_sweep",
    "interp_path",
]

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


@dataclass
class Dataset:
    """Inputs X (M, d) with targets y: floats for regression, integer class
    labels (with n_classes set) for classification."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y)
        self.validate()

    def validate(self) -> None:
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise DomainError("X must be a non-empty (M, d) array")
        if self.y.shape != (self.X.shape[0],):
            raise DomainError("y length differs from the number of rows of X")
        if not np.all(np.isfinite(self.X)):
            raise DomainError("non-finite input entries")
        if np.unique(self.X, axis=0).shape[0] != self.X.shape[0]:
            raise DomainError("duplicate input rows")
        if self.n_classes is not None:
            labels = self.y.astype(int)
            if np.any(labels < 0) or np.any(labels >= self.n_classes):
                raise DomainError("class label out of range")
        else:
            if not np.all(np.isfinite(self.y.astype(float))):
                raise DomainError("non-finite targets")
            self._check_directions()

    def _check_directions(self) -> None:
        # regression theory needs pairwise distinct directions: no input may
        # be a positive scalar multiple of another (that would kill the
        # positive definiteness of the limit kernel)
        norms = np.linalg.norm(self.X, axis=1)
        if np.any(norms < 1e-12):
            raise DomainError("zero input row in regression data")
        unit = self.X / norms[:, None]
        gram = unit @ unit.T
        iu = np.triu_indices(self.X.shape[0], k=1)
        if iu[0].size and np.any(gram[iu] > 1.0 - 1e-10):
            raise DomainError("two inputs share a direction (positive scalar multiples)")

    @property
    def m(self) -> int:
        return self.X.shape[0]


def synth_dataset(m: int, d: int, seed: int, min_angle_deg: float = 10.0) -> Dataset:
    """m unit-norm inputs in d dimensions with pairwise angles at least
    min_angle_deg, and smooth targets in [-1, 1]. Rejection sampling; raises
    if the sphere cannot fit the requested separation."""
    if m < 1 or d < 1:
        raise DomainError("need m >= 1 and d >= 1")
    rng = np.random.default_rng(np.uint64(seed))
    cos_cap = math.cos(math.radians(min_angle_deg))
    rows: list[np.ndarray] = []
    attempts = 0
    cap = 1000 * m
    while len(rows) < m:
        attempts += 1
        if attempts > cap:
            raise DomainError(
                f"could not place {m} directions at {min_angle_deg} degrees in {cap} attempts"
            )
        v = rng.standard_normal(d)
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            continue
        v /= norm
        if all(abs(float(v @ u)) <= cos_cap for u in rows):
            rows.append(v)
    X = np.stack(rows)
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    y = np.sin(3.0 * (X @ u))
    return Dataset(X, y)


# ---------------------------------------------------------------------------
# IDX image files


def write_idx(images_path: str, labels_path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise DomainError("need (n, rows, cols) images and matching labels")
    n, r, c = images.shape
    for path in (images_path, labels_path):
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, r, c))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, n))
        fh.write(labels.tobytes())


def _read_exact(fh, count: int, path: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise DomainError(f"truncated IDX file {path}")
    return data


def load_mnist(images_path: str, labels_path: str, subset: int | None = None,
               seed: int = 0) -> Dataset:
    """Load an IDX image/label pair into a classification dataset.

    Pixels are scaled to [0, 1] and flattened; labels stay integers. subset
    draws that many examples without replacement, deterministically in seed.
    """
    with open(images_path, "rb") as fh:
        magic, n, r, c = struct.unpack(">iiii", _read_exact(fh, 16, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise DomainError(f"bad magic {magic} in {images_path} (want {IDX_IMAGES_MAGIC})")
        if n < 1 or r < 1 or c < 1:
            raise DomainError(f"empty image file {images_path}")
        raw = _read_exact(fh, n * r * c, images_path)
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, r * c)
    with open(labels_path, "rb") as fh:
        magic, n_lab = struct.unpack(">ii", _read_exact(fh, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise DomainError(f"bad magic {magic} in {labels_path} (want {IDX_LABELS_MAGIC})")
        labels = np.frombuffer(_read_exact(fh, n_lab, labels_path), dtype=np.uint8)
    if n_lab != n:
        raise DomainError(f"image count {n} does not match label count {n_lab}")
    if subset is not None:
        if not 0 < subset <= n:
            raise DomainError(f"subset must be in 1..{n}")
        idx = np.sort(np.random.default_rng(np.uint64(seed)).choice(n, subset, replace=False))
        images = images[idx]
        labels = labels[idx]
    X = images.astype(float) / 255.0
    return Dataset(X, labels.astype(int), n_classes=int(labels.max()) + 1 if labels.size else 1)


def synth_image_set(out_dir: str, n_train: int, n_test: int, seed: int,
                    side: int = 28, n_classes: int = 10,
                    amplitude: float = 40.0, noise_sigma: float = 90.0) -> dict[str, str]:
    """Write a deterministic learnable image-classification corpus in IDX
    format: one fixed prototype per class plus heavy pixel noise. The
    amplitude-to-noise ratio is tuned so a desk-scale network needs its full
    step budget: accuracy then reflects the effective learning speed rather
    than saturating for every configuration. Returns the four file paths
    keyed train_images/train_labels/test_images/test_labels."""
    rng = np.random.default_rng(np.uint64(seed))
    protos = rng.uniform(0.0, 1.0, size=(n_classes, side, side))
    protos = (protos > 0.5).astype(float) * amplitude

    def make(count: int) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, n_classes, size=count)
        noise = rng.normal(0.0, noise_sigma, size=(count, side, side))
        images = np.clip(protos[labels] + noise, 0, 255).astype(np.uint8)
        return images, labels.astype(np.uint8)

    paths = {
        "train_images": os.path.join(out_dir, "train-images-idx3-ubyte"),
        "train_labels": os.path.join(out_dir, "train-labels-idx1-ubyte"),
        "test_images": os.path.join(out_dir, "t10k-images-idx3-ubyte"),
        "test_labels": os.path.join(out_dir, "t10k-labels-idx1-ubyte"),
    }
    tr_im, tr_lab = make(n_train)
    te_im, te_lab = make(n_test)
    write_idx(paths["train_images"], paths["train_labels"], tr_im, tr_lab)
    write_idx(paths["test_images"], paths["test_labels"], te_im, te_lab)
    return paths


# ---------------------------------------------------------------------------
# Monte Carlo ensembles


@dataclass
class EnsembleResult:
    """Seed-ordered ensemble statistics of a trajectory statistic (one value
    per record time, or a vector per record time)."""

    t: np.ndarray  # (R,)
    values: np.ndarray  # (n_members, R) or (n_members, R, K)
    seeds: tuple[int, ...]

    @property
    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    @property
    def var(self) -> np.ndarray:
        return self.values.var(axis=0, ddof=1)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.var / self.values.shape[0])

    def to_csv(self, path: str, n2: int, gamma2: float) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        mean, var, se = self.mean, self.var, self.se
        if mean.ndim > 1:  # serialize the first tracked component
            mean, var, se = mean[:, 0], var[:, 0], se[:, 0]
        with open(path, "w") as fh:
            fh.write("n2,gamma2,t,mean,var,se\n")
            for r in range(self.t.shape[0]):
                fh.write(
                    f"{n2},{float(gamma2)!r},{float(self.t[r])!r},"
                    f"{float(mean[r])!r},{float(var[r])!r},{float(se[r])!r}\n"
                )


def mc_ensemble(
    config: TrainConfig,
    dataset,
    law: InitLaw,
    n_members: int,
    statistic=None,
    base_seed: int | None = None,
    threads: int | None = None,
) -> EnsembleResult:
    """Train n_members independent runs (seeds base_seed, base_seed+1, ...)
    sharing the frozen first-layer atoms, and collect a statistic of each
    trajectory (default: the output path on the first dataset point). Workers
    run in a thread pool; the reduce is ordered by member index, so the result
    does not depend on scheduling."""
    if n_members < 2:
        raise DomainError("an ensemble needs at least 2 members")
    start = config.seed if base_seed is None else int(base_seed)
    seeds = tuple(start + i for i in range(n_members))
    stat = statistic if statistic is not None else (lambda traj: traj.h[:, 0])

    def member(seed: int) -> tuple[np.ndarray, np.ndarray]:
        try:
            traj = train(dataclasses.replace(config, seed=seed), dataset, law)
            return traj.times, np.asarray(stat(traj), dtype=float)
        except Exception as exc:
            raise DomainError(f"ensemble member with seed {seed} failed: {exc}") from exc

    max_workers = threads if threads and threads > 0 else min(8, n_members)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(member, seeds))
    t0 = results[0][0]
    values = np.empty((n_members,) + results[0][1].shape)
    for i, (ti, vi) in enumerate(results):
        if ti.shape != t0.shape or not np.allclose(ti, t0):
            raise DomainError("ensemble members recorded on different grids")
        if vi.shape[0] != t0.shape[0] or vi.shape != values.shape[1:]:
            raise DomainError("statistic must return one value per record time")
        values[i] = vi
    return EnsembleResult(t0, values, seeds)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class ScalingFitReport:
    """Least-squares slope of log(error) against log(width), with the
    theoretical exponent it is tested against (when one is declared)."""

    slope: float
    intercept: float
    stderr: float
    r_squared: float
    n_points: int
    theory: float | None = None
    tolerance: float | None = None

    @property
    def passed(self) -> bool | None:
        if self.theory is None or self.tolerance is None:
            return None
        return abs(self.slope - self.theory) <= self.tolerance


def scaling_fit(widths, errors, theory: float | None = None,
                tolerance: float | None = None) -> ScalingFitReport:
    """Fit log(error) = slope * log(width) + intercept by least squares.

    Requires at least 3 widths spanning a factor of 10 and strictly positive
    errors. Passing a theoretical exponent and tolerance arms the report's
    pass flag: |slope - theory| <= tolerance.
    """
    w = np.asarray(widths, dtype=float)
    e = np.asarray(errors, dtype=float)
    if w.shape != e.shape or w.ndim != 1:
        raise DomainError("widths and errors must be matching 1-d arrays")
    if w.shape[0] < 3:
        raise DomainError("scaling fit needs at least 3 widths")
    if np.any(w <= 0) or w.max() / w.min() < 10.0:
        raise DomainError("widths must be positive and span at least one decade")
    if np.any(e <= 0) or not np.all(np.isfinite(e)):
        raise DomainError("errors must be positive and finite")
    lx = np.log(w)
    ly = np.log(e)
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    n = w.shape[0]
    sxx = float(np.sum((lx - lx.mean()) ** 2))
    stderr = math.sqrt(ss_res / (n - 2) / sxx) if n > 2 else 0.0
    return ScalingFitReport(float(slope), float(intercept), stderr, r2, n,
                            theory, tolerance)


@dataclass(frozen=True)
class NormalityReport:
    statistic: float
    pvalue: float
    n_samples: int


def normality_check(samples, variance: float) -> NormalityReport:
    """Kolmogorov-Smirnov test of the samples against N(0, variance)."""
    s = np.asarray(samples, dtype=float).reshape(-1)
    if s.shape[0] < 500:
        raise DomainError("normality check needs at least 500 samples")
    if not variance > 0:
        raise DomainError("variance must be positive")
    res = stats.kstest(s, "norm", args=(0.0, math.sqrt(variance)))
    return NormalityReport(float(res.statistic), float(res.pvalue), s.shape[0])


def accuracy_eval(config: ScalingConfig, theta: Theta, dataset: Dataset) -> float:
    """Fraction of points whose largest logit (lowest index on ties) matches
    the label."""
    if dataset.n_classes is None:
        raise DomainError("accuracy needs a classification dataset")
    logits = forward_batch(config, theta, dataset.X)
    if logits.ndim != 2:
        raise DomainError("accuracy needs a classification head")
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == dataset.y.astype(int)))


def interp_path(t_query: np.ndarray, t_grid: np.ndarray, path: np.ndarray) -> np.ndarray:
    """Linear interpolation of a (n_t, M) grid path onto query times."""
    t_query = np.asarray(t_query, dtype=float)
    path = np.asarray(path, dtype=float)
    if path.ndim == 1:
        return np.interp(t_query, t_grid, path)
    out = np.empty((t_query.shape[0], path.shape[1]))
    for c in range(path.shape[1]):
        out[:, c] = np.interp(t_query, t_grid, path[:, c])
    return out


# ---------------------------------------------------------------------------
# classification sweep


def mnist_sweep(
    train_set: Dataset,
    test_set: Dataset,
    gamma_grid,
    widths,
    epochs: int,
    batch: int = 1,
    seed: int = 0,
    rate_constants: tuple[float, ...] | None = None,
    out_csv: str | None = None,
) -> list[dict]:
    """Train one classification network per gamma combination, evaluating
    train and test accuracy after every epoch of shuffled minibatch passes.

    gamma_grid: iterable of (gamma1, gamma2) or (gamma1, gamma2, gamma3)
    tuples; widths must have matching depth. Rows go to out_csv with header
    epoch,gamma1,gamma2[,gamma3],train_acc,test_acc.
    """
    if train_set.n_classes is None or test_set.n_classes is None:
        raise DomainError("sweep needs classification datasets")
    gamma_grid = [tuple(float(g) for g in gs) for gs in gamma_grid]
    widths = tuple(int(n) for n in widths)
    if not gamma_grid:
        raise DomainError("empty gamma grid")
    depth = len(gamma_grid[0])
    if any(len(gs) != depth for gs in gamma_grid) or len(widths) != depth:
        raise DomainError("gamma tuples and widths must share one depth")
    if depth not in (2, 3):
        raise DomainError("sweep supports depth 2 or 3")
    n_classes = max(train_set.n_classes, test_set.n_classes)
    law = InitLaw.default(widths[0], train_set.X.shape[1], seed)

    rows: list[dict] = []
    for gammas in gamma_grid:
        scaling = ScalingConfig(widths, gammas)
        if depth == 2:
            rates = rates_two_layer(widths[0], widths[1], *gammas)
        else:
            rates = rates_three_layer(widths[0], widths[1], widths[2], *gammas)
        if rate_constants is not None:
            rates = dataclasses.replace(
                rates, constants={g: float(c) for g, c in zip(rates.groups, rate_constants)}
            )
        theta = None
        for epoch in range(1, epochs + 1):
            steps = train_set.m // batch
            cfg = TrainConfig(
                scaling,
                rates,
                n_steps=steps,
                batch=batch,
                record_stride=steps,
                seed=seed + epoch,
                loss="cross-entropy",
                sampling="epoch_shuffle",
                n_classes=n_classes,
            )
            traj = train(cfg, train_set, law, theta0=theta)
            theta = traj.theta
            row = {"epoch": epoch}
            for i, g in enumerate(gammas, start=1):
                row[f"gamma{i}"] = g
            row["train_acc"] = accuracy_eval(scaling, theta, train_set)
            row["test_acc"] = accuracy_eval(scaling, theta, test_set)
            rows.append(row)

    if out_csv is not None:
        os.makedirs(os.path.dirname(os.path.abspath(out_csv)), exist_ok=True)
        gamma_cols = [f"gamma{i}" for i in range(1, depth + 1)]
        with open(out_csv, "w") as fh:
            fh.write(",".join(["epoch"] + gamma_cols + ["train_acc", "test_acc"]) + "\n")
            for row in rows:
                cells = [str(row["epoch"])]
                cells += [repr(row[c]) for c in gamma_cols]
                cells += [repr(row["train_acc"]), repr(row["test_acc"])]
                fh.write(",".join(cells) + "\n")
    return rows
