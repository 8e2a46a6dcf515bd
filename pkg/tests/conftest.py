import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedtail_lab.losses import Batch
from fedtail_lab.model import ModelSpec, init



def quadratic(diag):
    """Builder for 0.5 * theta^T diag(A) theta."""
    a = np.asarray(diag, dtype=float)
    return lambda p: (p * p * a).sum() * 0.5


def perturbed(params, scale, seed):
    rng = np.random.default_rng(seed)
    return params.with_values(params.values + scale * rng.standard_normal(len(params)))


def min_preactivation(params, x):
    """Smallest |pre-activation| over every ReLU unit for inputs x (class path and discriminator)."""
    w = params.arrays()
    spec = params.spec
    h = np.asarray(x, dtype=float)
    worst = np.inf
    for i in range(len(spec.feature_dims)):
        z = h @ w[f"F.w{i}"] + w[f"F.b{i}"]
        worst = min(worst, np.abs(z).min())
        h = np.maximum(z, 0)
    for i in range(2):
        z = h @ w[f"D.w{i}"] + w[f"D.b{i}"]
        worst = min(worst, np.abs(z).min())
        h = np.maximum(z, 0)
    return worst


@pytest.fixture
def small_spec():
    return ModelSpec(input_dim=3, num_classes=3, num_domains=2, feature_dims=(8, 6),
                     discriminator_dims=(4, 4), seed=7)


@pytest.fixture
def small_params(small_spec):
    return perturbed(init(small_spec), 0.1, 11)


@pytest.fixture
def batch4():
    x = np.array([[0.5, -1.0, 0.3], [1.2, 0.1, -0.7], [-0.4, 0.8, 0.9], [0.0, -0.3, 1.5]])
    return Batch(x, np.array([0, 2, 1, 2]), 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
