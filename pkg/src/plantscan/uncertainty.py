"""Per-point uncertainty estimators over Monte Carlo class-probability samples.

Five methods: predictive entropy, aleatoric entropy, epistemic difference,
predicted-class probability variance, and 95% credible-interval overlap.
Entropies are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from plantscan.errors import ValidationError

ENTROPY_SLACK = 1e-9


@dataclass(frozen=True)
class PredictiveSamples:
    """K Monte Carlo forward passes: probs has shape (K, n_pts, m)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise ValidationError("probs must be (K, n_pts, m)")
        if p.min() < -1e-9 or p.max() > 1 + 1e-9:
            raise ValidationError("probabilities outside [0, 1]")
        sums = p.sum(axis=2)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValidationError("probability rows must sum to 1 within 1e-6")
        object.__setattr__(self, "probs", p)

    @property
    def K(self) -> int:
        return self.probs.shape[0]

    @property
    def n_points(self) -> int:
        return self.probs.shape[1]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[2]

    def mean_probs(self) -> np.ndarray:
        return self.probs.mean(axis=0)


def _entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy along the last axis, 0*log 0 := 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def predict_class(samples: PredictiveSamples) -> np.ndarray:
    """Argmax of the MC-mean probabilities; ties go to the lowest class index."""
    return samples.mean_probs().argmax(axis=1)


def predictive_uncertainty(samples: PredictiveSamples) -> np.ndarray:
    """Entropy of the MC-mean distribution."""
    return _entropy(samples.mean_probs())


def aleatoric_uncertainty(samples: PredictiveSamples) -> np.ndarray:
    """Mean over samples of each sample's entropy."""
    return _entropy(samples.probs).mean(axis=0)


def epistemic_uncertainty(samples: PredictiveSamples) -> np.ndarray:
    """Predictive minus aleatoric, clamped at zero from below."""
    u = predictive_uncertainty(samples) - aleatoric_uncertainty(samples)
    return np.maximum(u, 0.0)


def predictive_variance(samples: PredictiveSamples) -> np.ndarray:
    """Unbiased variance (divisor K-1) of the predicted class's probability
    across the K samples."""
    if samples.K < 2:
        raise ValidationError("variance needs K >= 2 samples")
    pred = predict_class(samples)
    trace = samples.probs[:, np.arange(samples.n_points), pred]  # (K, n)
    return trace.var(axis=0, ddof=1)


def credible_intervals(samples: PredictiveSamples, level: float = 0.95) -> np.ndarray:
    """Empirical per-class credible intervals, shape (n_pts, m, 2).

    Linear-interpolation percentiles at (1-level)/2 and 1-(1-level)/2.
    """
    if samples.K < 2:
        raise ValidationError("credible intervals need K >= 2 samples")
    alpha = 100.0 * (1.0 - level) / 2.0
    lo = np.percentile(samples.probs, alpha, axis=0)
    hi = np.percentile(samples.probs, 100.0 - alpha, axis=0)
    return np.stack([lo, hi], axis=-1)


def credible_certain(samples: PredictiveSamples, level: float = 0.95) -> np.ndarray:
    """True where the predicted class's interval is disjoint from every other
    class's interval."""
    ci = credible_intervals(samples, level)
    pred = predict_class(samples)
    n = samples.n_points
    pred_lo = ci[np.arange(n), pred, 0]
    other_hi = ci[..., 1].copy()
    other_hi[np.arange(n), pred] = -np.inf
    return pred_lo > other_hi.max(axis=1)


def flag_uncertain(values: np.ndarray, k_sigma: float = 2.0) -> np.ndarray:
    """True (uncertain) where value > mean + k_sigma * std (std with ddof=1)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValidationError("need >= 2 values to set a threshold")
    return values > values.mean() + k_sigma * values.std(ddof=1)


def filter_certain(cloud, labels: np.ndarray, uncertain: np.ndarray):
    """Drop uncertain points; returns (kept cloud, kept labels, drop fraction)."""
    uncertain = np.asarray(uncertain, dtype=bool)
    if len(uncertain) != len(cloud):
        raise ValidationError("flags not aligned with cloud")
    keep = ~uncertain
    frac = float(uncertain.mean()) if len(uncertain) else 0.0
    return cloud.select(keep), np.asarray(labels)[keep], frac


def report(samples: PredictiveSamples, k_sigma: float = 2.0) -> dict:
    """All five estimators plus certain/uncertain flags, keyed by method."""
    u_pred = predictive_uncertainty(samples)
    u_alea = aleatoric_uncertainty(samples)
    return {
        "u_pred": u_pred,
        "u_alea": u_alea,
        "u_ep": epistemic_uncertainty(samples),
        "var": predictive_variance(samples),
        "ci": credible_intervals(samples),
        "flag_pred": flag_uncertain(u_pred, k_sigma),
        "flag_alea": flag_uncertain(u_alea, k_sigma),
        "flag_ep": flag_uncertain(epistemic_uncertainty(samples), k_sigma),
        "flag_var": flag_uncertain(predictive_variance(samples), k_sigma),
        "ci_certain": credible_certain(samples),
    }
