import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from config import HORIZON_STEPS, QUANTILE_LEVELS
from sampler import ForecastEnsemble

_INV_SQRT_PI: float = 1.0 / np.sqrt(np.pi)


class MetricsError(ValueError):
    """Raised for malformed forecast or observation arrays."""


@dataclass
class EvalReport:
    """Aggregate probabilistic and point scores of an ensemble forecast."""

    crps_mean: float
    crps_sum: float
    mae: float
    ql: dict[str, float]
    horizons: dict[str, dict[str, float]] = field(default_factory=dict)

    def values(self) -> list[float]:
        scores = [self.crps_mean, self.crps_sum, self.mae, *self.ql.values()]
        for breakdown in self.horizons.values():
            scores.extend(breakdown.values())
        return scores

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values())))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _pairwise_mean_abs(samples: np.ndarray) -> np.ndarray:
    # Mean of |X_s - X_s'| over all S^2 ordered pairs, along the last axis
    ordered = np.sort(samples, axis=-1)
    s = ordered.shape[-1]
    coeff = 2.0 * np.arange(1, s + 1) - s - 1
    return 2.0 * np.sum(coeff * ordered, axis=-1) / s**2


def crps_samples(samples: np.ndarray, y: float | np.ndarray) -> float | np.ndarray:
    """
    Sample CRPS, mean|X - y| - 0.5 mean|X - X'|.

    The last axis of `samples` holds the S draws; `y` broadcasts against the
    remaining axes.

    Raises:
        MetricsError: If fewer than two samples are given.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.shape[-1] < 2:
        raise MetricsError("CRPS needs at least two samples")

    y = np.asarray(y, dtype=float)
    score = np.mean(np.abs(samples - y[..., None]), axis=-1) - 0.5 * _pairwise_mean_abs(samples)
    score = np.maximum(score, 0.0)
    return float(score) if score.ndim == 0 else score


def crps_gaussian(mu: float, sigma: float, y: float) -> float:
    """Closed-form CRPS of N(mu, sigma^2) at y."""
    if not sigma > 0:
        raise MetricsError(f"sigma must be positive, got {sigma}")
    z = (y - mu) / sigma
    return float(sigma * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - _INV_SQRT_PI))


def pinball_loss(y: np.ndarray, prediction: np.ndarray, q: float) -> np.ndarray:
    """rho_q(y, y_hat) = max(q (y - y_hat), (q - 1)(y - y_hat))."""
    diff = np.asarray(y, dtype=float) - np.asarray(prediction, dtype=float)
    return np.maximum(q * diff, (q - 1.0) * diff)


def empirical_quantile(samples: np.ndarray, q: float, axis: int = 0) -> np.ndarray:
    """Empirical quantile with linear interpolation between order statistics."""
    return np.quantile(samples, q, axis=axis, method="linear")


def _normaliser(actuals: np.ndarray) -> float:
    total = float(np.sum(np.abs(actuals)))
    return total if total > 0 else 1.0


def _scores(samples: np.ndarray, actuals: np.ndarray, quantiles: tuple[float, ...]) -> dict:
    # samples (S, ..., N), actuals (..., N)
    cells = crps_samples(np.moveaxis(samples, 0, -1), actuals)
    scale = _normaliser(actuals)
    scores = {
        "crps_mean": float(np.mean(cells)),
        "crps_sum": float(np.sum(cells) / scale),
        "mae": float(np.mean(np.abs(samples.mean(axis=0) - actuals))),
    }
    for q in quantiles:
        loss = pinball_loss(actuals, empirical_quantile(samples, q), q)
        scores[f"ql{q:g}"] = float(np.sum(loss) / scale)
    return scores


def evaluate(
    ensemble: ForecastEnsemble,
    actuals: np.ndarray,
    quantiles: tuple[float, ...] = QUANTILE_LEVELS,
    horizon_steps: tuple[int, ...] = HORIZON_STEPS,
) -> EvalReport:
    """
    Scores an ensemble against the realised Q x N actuals.

    CRPS_sum and the quantile losses are normalised by the sum of absolute
    actuals; the per-horizon breakdown is reported when Q >= max(horizon_steps).

    Raises:
        MetricsError: If the shapes disagree.
    """
    samples = ensemble.samples
    actuals = np.asarray(actuals, dtype=float)
    if actuals.shape != samples.shape[1:]:
        raise MetricsError(f"actuals shape {actuals.shape} does not match forecast {samples.shape[1:]}")

    scores = _scores(samples, actuals, quantiles)
    horizons = {}
    if horizon_steps and samples.shape[1] >= max(horizon_steps):
        for step in horizon_steps:
            breakdown = _scores(samples[:, step - 1], actuals[step - 1], quantiles)
            horizons[str(step)] = {key: breakdown[key] for key in ("crps_mean", "crps_sum", "mae")}

    return EvalReport(
        crps_mean=scores["crps_mean"],
        crps_sum=scores["crps_sum"],
        mae=scores["mae"],
        ql={key: value for key, value in scores.items() if key.startswith("ql")},
        horizons=horizons,
    )
