"""Synthetic datasets with a known ground-truth miscalibration field.

Both generators share the same logistic skeleton: a latent logit
l(x) = w.x + noise defines the reported confidence f = sigm(l), while the
true outcome probability is eta = sigm(l + shift(x)). The shift is what a
field estimator should recover, since true_field = eta - f.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from calibfield.dataio import Dataset

_DEF_CENTERS = ((0.0, 0.0), (3.0, 0.0), (1.5, 2.6))
_DEF_W = (1.5 / np.sqrt(2.0), -1.5 / np.sqrt(2.0))


@dataclass(frozen=True)
class ThreeClusterSpec:
    """Mixture of three 2-D Gaussian clusters with per-cluster logit shifts."""

    n: int = 10000
    cluster_centers: tuple = _DEF_CENTERS
    cluster_std: float = 0.6
    logit_direction: tuple = _DEF_W
    logit_noise_std: float = 0.5
    shifts: tuple = (-1.0, 0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if len(self.cluster_centers) != 3:
            raise ValueError("need exactly 3 cluster centers")
        if len(self.shifts) != 3:
            raise ValueError("need exactly 3 shifts")
        if self.cluster_std <= 0:
            raise ValueError("cluster_std must be positive")
        if self.logit_noise_std < 0:
            raise ValueError("logit_noise_std must be nonnegative")


@dataclass(frozen=True)
class SinusoidSpec:
    """Uniform points on the unit square with a sinusoidal logit-shift field."""

    n: int = 10000
    amplitude: float = 1.0
    frequency: int = 1
    direction: tuple = (1.0, 0.0)
    logit_direction: tuple = _DEF_W
    logit_noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be nonnegative")
        if int(self.frequency) != self.frequency or self.frequency < 1:
            raise ValueError("frequency must be a positive integer")
        u = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(u) - 1.0) > 1e-12:
            raise ValueError("direction must be a unit vector")
        if self.logit_noise_std < 0:
            raise ValueError("logit_noise_std must be nonnegative")


def _streams(seed: int):
    """Independent RNGs for positions, logit noise, and labels.

    Split per purpose so changing e.g. the noise level cannot reshuffle
    cluster assignments or label draws.
    """
    kids = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.default_rng(k) for k in kids)


def _assemble(x, logit, shift, rng_labels, groups=None, names=None) -> Dataset:
    f = expit(logit)
    eta = expit(logit + shift)
    y = (rng_labels.random(x.shape[0]) < eta).astype(np.float64)
    return Dataset(
        embeddings=x,
        confidences=f,
        outcomes=y,
        true_field=eta - f,
        group_labels=groups,
        group_names=names,
    )


def gen_three_cluster(spec: ThreeClusterSpec) -> Dataset:
    """Draw a three-cluster dataset; group labels record the source cluster."""
    if spec.n < 3:
        raise ValueError(f"n must be >= 3, got {spec.n}")
    rng_pos, rng_logit, rng_labels = _streams(spec.seed)
    centers = np.asarray(spec.cluster_centers, dtype=np.float64)
    c = rng_pos.integers(0, 3, size=spec.n)
    x = centers[c] + spec.cluster_std * rng_pos.standard_normal((spec.n, 2))
    w = np.asarray(spec.logit_direction, dtype=np.float64)
    logit = x @ w + spec.logit_noise_std * rng_logit.standard_normal(spec.n)
    shift = np.asarray(spec.shifts, dtype=np.float64)[c]
    names = {i: f"cluster_{i}" for i in range(3)}
    return _assemble(x, logit, shift, rng_labels, groups=c.astype(np.int64), names=names)


def gen_sinusoidal(spec: SinusoidSpec) -> Dataset:
    """Draw a sinusoidal-field dataset on the unit square; no group labels."""
    rng_pos, rng_logit, rng_labels = _streams(spec.seed)
    x = rng_pos.random((spec.n, 2))
    w = np.asarray(spec.logit_direction, dtype=np.float64)
    u = np.asarray(spec.direction, dtype=np.float64)
    logit = x @ w + spec.logit_noise_std * rng_logit.standard_normal(spec.n)
    shift = spec.amplitude * np.sin(2.0 * np.pi * spec.frequency * (x @ u))
    return _assemble(x, logit, shift, rng_labels)
