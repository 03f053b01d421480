"""Shared fixtures: the default desk-scale regression problem, a pair of
asymmetric mean-zero init laws (their third moments keep every forced
fluctuation path away from zero), and finite-difference helpers."""

import numpy as np
import pytest
from hypothesis import settings

import scalednn as s

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def dataset3():
    return s.synth_dataset(3, 3, 0)


@pytest.fixture(scope="session")
def law10(dataset3):
    return s.InitLaw.default(10, 3, 0)


def asymmetric_law(w1_atoms):
    # mean-zero but with nonzero third moments: <(w2)^3> = 0.75, <c^3> = 2
    return s.InitLaw(
        w1_atoms=w1_atoms,
        mu_w2=s.Law1D.discrete([1.5, -0.5], [0.25, 0.75]),
        mu_c=s.Law1D.discrete([2.0, -1.0], [1.0 / 3.0, 2.0 / 3.0]),
    )


def central_fd(fn, x0, eps):
    return (fn(x0 + eps) - fn(x0 - eps)) / (2.0 * eps)


def richardson_fd(fn, x0, eps):
    d1 = (fn(x0 + eps) - fn(x0 - eps)) / (2.0 * eps)
    d2 = (fn(x0 + eps / 2) - fn(x0 - eps / 2)) / eps
    return (4.0 * d2 - d1) / 3.0


def rel_gap(a, b, floor=1e-12):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)
