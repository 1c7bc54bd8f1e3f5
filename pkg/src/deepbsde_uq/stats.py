"""Normality assessment of solver ensembles: D'Agostino-Pearson K^2 and a
density histogram with a fitted normal curve."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError
from .metrics import write_dat

MIN_SAMPLES = 20


@dataclass(frozen=True)
class NormalityReport:
    n: int
    skewness: float  # g1
    kurtosis: float  # g2, excess
    z_skew: float
    z_kurt: float
    k2: float
    p_value: float


def _central_moments(x: np.ndarray) -> tuple[float, float, float]:
    d = x - x.mean()
    d2 = d * d
    return float(d2.mean()), float((d2 * d).mean()), float((d2 * d2).mean())


def skew_z(g1: float, n: int) -> float:
    """Normal approximation of the sample skewness under normality."""
    y = g1 * np.sqrt((n + 1) * (n + 3) / (6.0 * (n - 2)))
    beta2 = 3.0 * (n * n + 27 * n - 70) * (n + 1) * (n + 3) / ((n - 2.0) * (n + 5) * (n + 7) * (n + 9))
    w2 = -1.0 + np.sqrt(2.0 * (beta2 - 1.0))
    delta = 1.0 / np.sqrt(0.5 * np.log(w2))
    alpha = np.sqrt(2.0 / (w2 - 1.0))
    u = y / alpha
    return float(delta * np.log(u + np.sqrt(u * u + 1.0)))


def kurtosis_z(b2: float, n: int) -> float:
    """Normal approximation of the (non-excess) sample kurtosis under normality."""
    mean = 3.0 * (n - 1) / (n + 1)
    var = 24.0 * n * (n - 2) * (n - 3) / ((n + 1.0) ** 2 * (n + 3) * (n + 5))
    x = (b2 - mean) / np.sqrt(var)
    sqrt_beta1 = (6.0 * (n * n - 5 * n + 2) / ((n + 7.0) * (n + 9))
                  * np.sqrt(6.0 * (n + 3) * (n + 5) / (n * (n - 2.0) * (n - 3))))
    A = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + np.sqrt(1.0 + 4.0 / sqrt_beta1**2))
    term1 = 1.0 - 2.0 / (9.0 * A)
    denom = 1.0 + x * np.sqrt(2.0 / (A - 4.0))
    if denom == 0:
        return float("nan")
    term2 = np.sign(denom) * np.cbrt((1.0 - 2.0 / A) / abs(denom))
    return float((term1 - term2) / np.sqrt(2.0 / (9.0 * A)))


def dagostino_pearson(sample) -> NormalityReport:
    """Omnibus K^2 test; ``p = exp(-K^2 / 2)`` is the exact chi-square(2) tail."""
    x = np.asarray(sample, dtype=np.float64).ravel()
    n = x.size
    if n < MIN_SAMPLES:
        raise DomainError(f"normality test needs at least {MIN_SAMPLES} samples, got {n}")
    m2, m3, m4 = _central_moments(x)
    if m2 == 0:
        raise DomainError("normality test undefined for a constant sample")
    g1 = m3 / m2**1.5
    b2 = m4 / m2**2
    z1, z2 = skew_z(g1, n), kurtosis_z(b2, n)
    k2 = z1 * z1 + z2 * z2
    return NormalityReport(n, float(g1), float(b2 - 3.0), z1, z2, float(k2), float(np.exp(-0.5 * k2)))


@dataclass(frozen=True)
class HistogramFit:
    edges: np.ndarray
    density: np.ndarray
    mu: float
    sigma: float  # biased

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.exp(-0.5 * ((x - self.mu) / self.sigma) ** 2) / (self.sigma * np.sqrt(2 * np.pi))


def histogram_with_normal_fit(sample, bins: int = 30) -> HistogramFit:
    x = np.asarray(sample, dtype=np.float64).ravel()
    if x.size < 2:
        raise DomainError("histogram needs at least 2 samples")
    if bins < 1:
        raise DomainError("bin count must be positive")
    if x.max() == x.min():
        raise DomainError("degenerate sample: all values equal")
    counts, edges = np.histogram(x, bins=bins)
    density = counts / (x.size * np.diff(edges))
    mu = float(x.mean())
    return HistogramFit(edges, density, mu, float(np.sqrt(np.mean((x - mu) ** 2))))


def write_histogram(prefix, fit: HistogramFit, meta: dict | None = None, curve_points: int = 200):
    """``<prefix>_hist.dat`` (bins) and ``<prefix>_fit.dat`` (fitted normal density)."""
    prefix = Path(prefix)
    left, right = fit.edges[:-1], fit.edges[1:]
    hist = write_dat(prefix.with_name(prefix.name + "_hist.dat"),
                     {"left": left, "right": right, "center": 0.5 * (left + right), "density": fit.density},
                     meta)
    xs = np.linspace(fit.edges[0], fit.edges[-1], curve_points)
    curve = write_dat(prefix.with_name(prefix.name + "_fit.dat"), {"x": xs, "pdf": fit.pdf(xs)},
                      {**(meta or {}), "mu": repr(fit.mu), "sigma": repr(fit.sigma)})
    return hist, curve
