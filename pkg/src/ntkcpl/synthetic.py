"""Gaussian-mixture feature sets standing in for frozen encoder features."""

from __future__ import annotations

import numpy as np
from pydantic import BaseModel, Field

from .dataset import FeatureSet


class MixtureSpec(BaseModel):
    n_train: int = Field(2000, ge=1)
    n_test: int = Field(2000, ge=1)
    dim: int = Field(16, ge=1)
    n_classes: int = Field(8, ge=2)
    sigma: float = Field(1.2, gt=0)  # linear probe near 0.9 at the default separation
    separation: float = Field(1.0, gt=0)
    seed: int = 0


def class_means(spec: MixtureSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    return spec.separation * rng.standard_normal((spec.n_classes, spec.dim))


def sample_mixture(spec: MixtureSpec, n: int, stream: int) -> FeatureSet:
    """Balanced draw of ``n`` points (class sizes differ by at most one)."""
    means = class_means(spec)
    rng = np.random.default_rng([spec.seed, stream])
    labels = np.arange(n) % spec.n_classes
    rng.shuffle(labels)
    X = means[labels] + spec.sigma * rng.standard_normal((n, spec.dim))
    return FeatureSet.from_arrays(X, labels, spec.n_classes)


def make_mixture(spec: MixtureSpec) -> tuple[FeatureSet, FeatureSet]:
    """Train and test sets drawn from the same class means."""
    return sample_mixture(spec, spec.n_train, 1), sample_mixture(spec, spec.n_test, 2)
