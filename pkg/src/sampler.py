import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import linalg

from config import EWMA_DECAY, THREADS
from covariance import CovarianceError, assemble, conditional_next_step, mixture_correlation
from forecaster import (
    Heads,
    ModelParams,
    SpatialContext,
    Snapshots,
    TrainConfig,
    encode,
    heads,
    kernel_bank,
    spatial_state,
)
from graph import WeightedGraph


class SamplingError(RuntimeError):
    """Raised when refinement or rollout fails; `step` is the horizon index, if known."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class VolatilityTracker:
    """Per-node EWMA of squared one-step residuals."""

    s2: np.ndarray
    rho: float = EWMA_DECAY

    def __post_init__(self):
        s2 = np.array(self.s2, dtype=float)
        if not 0 <= self.rho < 1:
            raise ValueError(f"decay must lie in [0, 1), got {self.rho}")
        if np.any(s2 < 0) or not np.all(np.isfinite(s2)):
            raise ValueError("volatility estimates must be finite and nonnegative")
        s2.setflags(write=False)
        object.__setattr__(self, "s2", s2)

    @property
    def scale(self) -> np.ndarray:
        return np.sqrt(self.s2)


@dataclass(frozen=True)
class ForecastEnsemble:
    """Sample paths of shape (S, Q, N) produced after observing `origin` steps."""

    samples: np.ndarray
    origin: int = 0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 3 or samples.shape[0] < 1:
            raise ValueError(f"samples must have shape (S, Q, N) with S >= 1, got {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("ensemble contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def horizon(self) -> int:
        return self.samples.shape[1]

    @property
    def nodes(self) -> int:
        return self.samples.shape[2]

    def to_frame(self) -> pd.DataFrame:
        """Long format with columns sample, step, node, value."""
        s, q, n = self.samples.shape
        grid = np.indices((s, q, n)).reshape(3, -1)
        return pd.DataFrame(
            {"sample": grid[0], "step": grid[1], "node": grid[2], "value": self.samples.reshape(-1)}
        )

    def save_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    def save_npz(self, path: Path) -> None:
        np.savez_compressed(path, samples=self.samples, origin=np.array(self.origin))

    @classmethod
    def load_npz(cls, path: Path) -> "ForecastEnsemble":
        with np.load(path) as archive:
            return cls(samples=archive["samples"], origin=int(archive["origin"]))

    @classmethod
    def load_csv(cls, path: Path, origin: int = 0) -> "ForecastEnsemble":
        frame = pd.read_csv(path, float_precision="round_trip")
        shape = tuple(int(frame[col].max()) + 1 for col in ("sample", "step", "node"))
        samples = np.full(shape, np.nan)
        samples[frame["sample"], frame["step"], frame["node"]] = frame["value"].to_numpy()
        return cls(samples=samples, origin=origin)


def update_volatility(tracker: VolatilityTracker, residual: np.ndarray) -> VolatilityTracker:
    """s^2 <- rho s^2 + (1 - rho) r^2."""
    r = np.asarray(residual, dtype=float)
    return VolatilityTracker(tracker.rho * tracker.s2 + (1.0 - tracker.rho) * r**2, tracker.rho)


def init_tracker(residuals: np.ndarray, rho: float = EWMA_DECAY) -> VolatilityTracker:
    """Starts the tracker at the per-node mean squared residual."""
    residuals = np.atleast_2d(np.asarray(residuals, dtype=float))
    if residuals.shape[0] == 0:
        raise ValueError("need at least one residual to initialise the volatility tracker")
    return VolatilityTracker(np.mean(residuals**2, axis=0), rho)


def track_volatility(
    residuals: np.ndarray,
    warmup: int,
    rho: float = EWMA_DECAY,
    tracker: VolatilityTracker | None = None,
) -> VolatilityTracker:
    """
    Runs the tracker over chronological one-step residuals.

    The first `warmup` rows belong to the training split: they set the starting
    level when no tracker is given and are skipped otherwise. Every later row
    is one EWMA update.
    """
    residuals = np.atleast_2d(np.asarray(residuals, dtype=float))
    warmup = max(0, min(warmup, residuals.shape[0]))
    if tracker is None:
        tracker = init_tracker(residuals[:warmup], rho)
    for r in residuals[warmup:]:
        tracker = update_volatility(tracker, r)
    return tracker


def correlation_decompose(sigma_cond: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Splits a covariance into marginal scales and a correlation matrix.

    Returns:
        (S, R) with S = diag(sqrt(diag(Sigma))) and R = S^{-1} Sigma S^{-1}.
    """
    sigma_cond = np.asarray(sigma_cond, dtype=float)
    variances = np.diag(sigma_cond)
    if np.any(variances <= 0):
        raise SamplingError("conditional covariance has a nonpositive diagonal entry")

    scale = np.sqrt(variances)
    correlation = sigma_cond / np.outer(scale, scale)
    correlation = 0.5 * (correlation + correlation.T)
    np.fill_diagonal(correlation, 1.0)
    return np.diag(scale), correlation


def _refine(mu_cond: np.ndarray, r_cond: np.ndarray, scale: np.ndarray, xi: np.ndarray) -> np.ndarray:
    try:
        root = linalg.cholesky(r_cond, lower=True)
    except linalg.LinAlgError as e:
        raise SamplingError(f"conditional correlation is not positive definite: {e}") from e
    return mu_cond + scale * (np.asarray(xi, dtype=float) @ root.T)


def refined_sample(
    mu_cond: np.ndarray, r_cond: np.ndarray, tracker: VolatilityTracker, xi: np.ndarray
) -> np.ndarray:
    """
    Volatility-scaled residual draw mu_cond + diag(s) chol(R_cond) xi.

    `xi` may hold one standard-normal vector or a batch of shape (..., N).
    """
    return _refine(mu_cond, r_cond, tracker.scale, xi)


def _sampling_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence([int(seed), zlib.crc32(b"sampling")]).spawn(count)


def rollout(
    params: ModelParams,
    history: np.ndarray,
    snapshots: Snapshots | WeightedGraph,
    horizon: int,
    n_samples: int,
    seed: int,
    config: TrainConfig | None = None,
    tracker: VolatilityTracker | None = None,
    rho: float = EWMA_DECAY,
    volatility: bool = True,
    zero_noise: bool = False,
    train_end: int | None = None,
) -> ForecastEnsemble:
    """
    Multi-step sample paths with conditional-Gaussian residual refinement.

    Each step encodes the lag window, builds the window covariance over the
    latest steps, conditions the next residual on the preceding ones (observed
    residuals before the origin, sampled ones inside the horizon) and draws it
    with the tracker's node-wise scale. The tracker follows the observed
    residuals and is frozen inside the horizon.

    Args:
        params: Trained parameters.
        history: Observed T0 x N series, T0 >= max(P, D - 1).
        snapshots: Graph snapshots indexed by absolute step, or a static graph.
        horizon: Number of steps Q to forecast.
        n_samples: Number of sample paths S.
        seed: Seed of the sampling stream; paths use independent spawned streams.
        config: Model settings (window D, kernel bank, variance floor).
        tracker: Starting volatility; defaults to the mean squared training residual.
        rho: EWMA decay when the tracker is created here.
        volatility: False keeps the conditional marginal scale (no volatility scaling).
        zero_noise: Forces xi = 0, giving the conditional-mean trajectory.
        train_end: Rows of `history` in the training split. Their residuals
            initialise the tracker; only residuals from later rows update it.

    Raises:
        SamplingError: On a non-finite sample or a failed factorisation, with the step index.
    """
    config = config or TrainConfig()
    history = np.asarray(history, dtype=float)
    lag, n, window = params.lag, params.n_nodes, config.horizon
    origin = history.shape[0]
    if horizon < 1 or n_samples < 1:
        raise ValueError(f"horizon and sample count must be >= 1, got {horizon}, {n_samples}")
    if origin < max(lag, window - 1) or history.shape[1:] != (n,):
        raise ValueError(f"history must be at least {max(lag, window - 1)} x {n}, got {history.shape}")

    observed_heads = {
        s: heads(params, encode(params, history[s - lag : s]), config.d_floor) for s in range(lag, origin)
    }
    observed_residuals = {s: history[s] - out.mu for s, out in observed_heads.items()}

    # train_end defaults to the whole history for a fresh tracker, to none of it for a given one
    if train_end is None:
        train_end = origin if tracker is None else lag
    warmup = max(0, min(train_end, origin) - lag)
    if tracker is None and warmup == 0:
        raise ValueError("no training residuals: pass a volatility tracker explicitly")
    tracker = track_volatility(
        np.array([observed_residuals[s] for s in range(lag, origin)]).reshape(-1, n), warmup, rho, tracker
    )

    bank = kernel_bank(window, params.mixtures, config.length_scale_step)
    context = SpatialContext(snapshots, window)
    factors = [spatial_state(params.spatial, *context(origin + q)).G for q in range(horizon)]

    def sample_path(stream: np.random.SeedSequence) -> np.ndarray:
        rng = np.random.default_rng(stream)
        values = np.vstack([history, np.zeros((horizon, n))])
        path_heads: dict[int, Heads] = dict(observed_heads)
        residuals = dict(observed_residuals)

        for q in range(horizon):
            t = origin + q
            current = heads(params, encode(params, values[t - lag : t]), config.d_floor)
            path_heads[t] = current
            steps = range(t - min(window - 1, t - lag), t + 1)
            span = len(steps)

            try:
                correlation = mixture_correlation(bank, current.logits, config.nugget)[-span:, -span:]
                cov = assemble(
                    [path_heads[s].factor for s in steps],
                    correlation,
                    factors[q],
                    np.concatenate([path_heads[s].d for s in steps]),
                )
                past = np.concatenate([residuals[s] for s in steps[:-1]]) if span > 1 else np.zeros(0)
                mu_cond, sigma_cond = conditional_next_step(cov, past)
                scale, r_cond = correlation_decompose(sigma_cond)
            except CovarianceError as e:
                raise SamplingError(f"conditioning failed at horizon step {q}: {e}", step=q) from e

            # Correlation from the model, marginal scale from the tracker
            xi = np.zeros(n) if zero_noise else rng.standard_normal(n)
            marginal = tracker.scale if volatility else np.diag(scale)
            eta = _refine(mu_cond, r_cond, marginal, xi)
            values[t] = current.mu + eta
            if not np.all(np.isfinite(values[t])):
                raise SamplingError(f"non-finite sample at horizon step {q}", step=q)
            # Sampled residuals feed the next step's conditioning
            residuals[t] = eta

        return values[origin:]

    # One spawned stream per path keeps results independent of the thread count
    with ThreadPoolExecutor(max_workers=THREADS) as pool:
        paths = list(pool.map(sample_path, _sampling_seeds(seed, n_samples)))

    logging.info(f"Rolled out {n_samples} paths over {horizon} steps from origin {origin}")
    return ForecastEnsemble(samples=np.stack(paths), origin=origin)
