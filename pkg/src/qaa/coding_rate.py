"""Coding rate of query-level features and its distribution over images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class CodingRateConfig:
    epsilon: float = 0.001

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"coding-rate epsilon must be > 0, got {self.epsilon}")


def coding_rate(p_hat, cfg: CodingRateConfig = CodingRateConfig()) -> float:
    """``0.5 * logdet(I + C_f / (N_q eps^2) * P^T P)`` in nats, via Cholesky."""
    p = np.asarray(p_hat, dtype=float)
    if p.ndim != 2:
        raise ValueError(f"coding rate needs an N_q x C_f matrix, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise NumericError("coding rate: features contain non-finite values")
    n_q, c_f = p.shape
    a = np.eye(c_f) + (c_f / (n_q * cfg.epsilon ** 2)) * (p.T @ p)
    try:
        c, _ = cho_factor(a, lower=True)
    except LinAlgError:
        w = np.linalg.eigvalsh(a)
        raise NumericError(
            f"coding rate: Cholesky failed on {c_f}x{c_f} matrix, eigenvalues in [{w.min():.3g}, {w.max():.3g}]"
        ) from None
    return float(np.sum(np.log(np.diag(c))))


def coding_rates(features, cfg: CodingRateConfig = CodingRateConfig()) -> np.ndarray:
    return np.array([coding_rate(p, cfg) for p in features])


def query_column_norms(p_hat) -> np.ndarray:
    """Per-query feature norms, a secondary diagnostic next to the per-image rate."""
    return np.linalg.norm(np.asarray(p_hat, dtype=float), axis=-1)


@dataclass
class RateHistogram:
    edges: np.ndarray
    counts: np.ndarray
    label: str
    mean: float
    variance: float
    rates: np.ndarray

    def to_csv(self) -> str:
        lines = ["label,left,right,count"]
        for lo, hi, n in zip(self.edges[:-1], self.edges[1:], self.counts):
            lines.append(f"{self.label},{lo:.9g},{hi:.9g},{int(n)}")
        return "\n".join(lines) + "\n"


def rate_histogram(features, cfg: CodingRateConfig = CodingRateConfig(), bins: int = 20,
                   label: str = "") -> RateHistogram:
    """Bin per-image coding rates over ``[min, max]``.

    A single distinct rate gets a unit-width bin centred on it so the edges
    stay strictly increasing.
    """
    features = list(features)
    if not features:
        raise ValueError("rate_histogram needs at least one feature matrix")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    rates = coding_rates(features, cfg)
    lo, hi = float(rates.min()), float(rates.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(rates, bins=bins, range=(lo, hi))
    return RateHistogram(edges, counts, label, float(rates.mean()), float(rates.var()), rates)
