"""Calibration and recovery metrics: Brier, binned reliability, smECE, correlations.

smECE smooths residuals against confidences with a reflected Gaussian kernel
and reports the fixed point where the smoothing bandwidth equals the smoothed
calibration error itself, so no bin width or bandwidth has to be chosen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

SMECE_LO = 1e-4
SMECE_HI = 1.0
SMECE_TOL = 1e-6
SMECE_MAX_ITER = 100
_WINDOW_SIGMAS = 9.0
_QUERY_CHUNK = 512


class ConvergenceError(RuntimeError):
    """An iterative metric computation failed to converge."""


def brier(f: np.ndarray, y: np.ndarray) -> float:
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if f.shape != y.shape:
        raise ValueError(f"length mismatch: {f.shape} vs {y.shape}")
    d = y - f
    return float(np.mean(d * d))


@dataclass(frozen=True)
class ReliabilityDiagram:
    """Equal-width confidence bins with per-bin mean confidence and accuracy.

    Empty bins keep NaN means and are listed in ``empty_bins`` rather than
    being interpolated away.
    """

    edges: np.ndarray       # (n_bins + 1,)
    mean_conf: np.ndarray   # (n_bins,), NaN where empty
    accuracy: np.ndarray    # (n_bins,), NaN where empty
    count: np.ndarray       # (n_bins,) integers

    @property
    def n_bins(self) -> int:
        return self.count.shape[0]

    @property
    def empty_bins(self) -> np.ndarray:
        return np.flatnonzero(self.count == 0)

    @property
    def max_deviation(self) -> float:
        """Largest |accuracy - mean confidence| over nonempty bins."""
        ok = self.count > 0
        if not np.any(ok):
            return float("nan")
        return float(np.max(np.abs(self.accuracy[ok] - self.mean_conf[ok])))

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,mean_conf,accuracy,count"]
        for i in range(self.n_bins):
            lines.append(
                f"{self.edges[i]!r},{self.edges[i + 1]!r},"
                f"{self.mean_conf[i]!r},{self.accuracy[i]!r},{int(self.count[i])}"
            )
        return "\n".join(lines) + "\n"


def binned_reliability(f: np.ndarray, y: np.ndarray, n_bins: int = 10) -> ReliabilityDiagram:
    """Bin confidences into equal-width bins on [0, 1]; last bin right-closed."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if f.shape != y.shape:
        raise ValueError("length mismatch")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.minimum((f * n_bins).astype(np.int64), n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=f, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=y, minlength=n_bins)
    with np.errstate(invalid="ignore"):
        safe = np.where(count > 0, count, 1)
        mean_conf = np.where(count > 0, conf_sum / safe, np.nan)
        accuracy = np.where(count > 0, acc_sum / safe, np.nan)
    return ReliabilityDiagram(edges=edges, mean_conf=mean_conf, accuracy=accuracy, count=count)


@dataclass(frozen=True)
class SmeceResult:
    value: float
    fixed_point_bandwidth: float
    iterations: int

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"smECE value {self.value} outside [0, 1]")
        if not self.fixed_point_bandwidth > 0:
            raise ValueError("bandwidth must be positive")


def _reflected_sources(f: np.ndarray, r: np.ndarray):
    """Mirror sources across both boundaries of [0, 1], plus the period-2 images.

    The image set {b, -b, 2-b, b+2, b-2} maps onto itself under b -> 1-b, which
    makes the smoothed error symmetric under (f, y) -> (1-f, 1-y).
    """
    pos = np.concatenate([f, -f, 2.0 - f, f + 2.0, f - 2.0])
    val = np.concatenate([r] * 5)
    order = np.argsort(pos, kind="stable")
    return pos[order], val[order]


def smece_at_bandwidth(f: np.ndarray, y: np.ndarray, sigma: float) -> float:
    """Mean |smoothed residual| at the sample points for a fixed bandwidth."""
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = y - f
    pos, val = _reflected_sources(f, r)
    q = np.sort(f)
    total = 0.0
    half = _WINDOW_SIGMAS * sigma
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for lo in range(0, q.shape[0], _QUERY_CHUNK):
        chunk = q[lo:lo + _QUERY_CHUNK]
        a = np.searchsorted(pos, chunk[0] - half, side="left")
        b = np.searchsorted(pos, chunk[-1] + half, side="right")
        d = chunk[:, None] - pos[None, a:b]
        K = np.exp(-(d * d) * inv2s2)
        num = K @ val[a:b]
        den = K.sum(axis=1)
        total += float(np.sum(np.abs(num / den)))
    return total / q.shape[0]


def smece(f: np.ndarray, y: np.ndarray) -> SmeceResult:
    """Fixed-point smoothed calibration error.

    Finds sigma* with smece_at_bandwidth(sigma*) = sigma* by bisection on
    [1e-4, 1]. If the smoothed error at the smallest bandwidth is already at
    or below that bandwidth, the value there is returned directly.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] < 2:
        raise ValueError("smECE needs at least 2 points")
    lo, hi = SMECE_LO, SMECE_HI
    s_lo = smece_at_bandwidth(f, y, lo)
    if s_lo - lo <= 0.0:
        return SmeceResult(value=s_lo, fixed_point_bandwidth=lo, iterations=0)
    for it in range(1, SMECE_MAX_ITER + 1):
        mid = 0.5 * (lo + hi)
        s_mid = smece_at_bandwidth(f, y, mid)
        g = s_mid - mid
        if abs(g) <= SMECE_TOL:
            return SmeceResult(value=s_mid, fixed_point_bandwidth=mid, iterations=it)
        if g > 0.0:
            lo = mid
        else:
            hi = mid
    raise ConvergenceError(f"smECE bisection did not converge; bracket [{lo}, {hi}]")


def pearson(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """Pearson correlation, or None when either input has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.shape[0] < 2:
        raise ValueError("need two equal-length vectors with n >= 2")
    da = a - a.mean()
    db = b - b.mean()
    va = float(np.sum(da * da))
    vb = float(np.sum(db * db))
    if va == 0.0 or vb == 0.0:
        return None
    return float(np.sum(da * db) / np.sqrt(va * vb))


def spearman(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """Spearman correlation: Pearson on average ranks; None when degenerate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.shape[0] < 2:
        raise ValueError("need two equal-length vectors with n >= 2")
    return pearson(rankdata(a), rankdata(b))
