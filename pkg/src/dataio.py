import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.spatial.distance import pdist, squareform

from config import (
    DEFAULT_SPLIT,
    GRAPH_RETRIES,
    KERNEL_THRESHOLD,
    SYNTH_A,
    SYNTH_AMPLITUDE,
    SYNTH_B,
    SYNTH_NODES,
    SYNTH_OBS_NOISE,
    SYNTH_PERIOD,
    SYNTH_PHI,
    SYNTH_STEPS,
)
from graph import WeightedGraph, is_connected, laplacian


class DataError(ValueError):
    """Raised for malformed datasets, files or generator settings."""


def named_rng(seed: int, name: str) -> np.random.Generator:
    """
    Independent random stream for one named concern (data, init, training, sampling).

    The same (seed, name) pair always yields the same stream.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class Dataset:
    """Multivariate series of T observations over N nodes, oldest first."""

    values: np.ndarray
    coords: np.ndarray | None = None
    timestamps: np.ndarray | None = None
    name: str = "dataset"
    frequency: str = "step"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise DataError(f"values must be a non-empty T x N array, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("values must be finite")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int, name: str | None = None) -> "Dataset":
        return Dataset(
            values=self.values[start:stop],
            coords=self.coords,
            timestamps=None if self.timestamps is None else self.timestamps[start:stop],
            name=name or self.name,
            frequency=self.frequency,
        )


@dataclass
class SynthConfig:
    """Settings of the synthetic spatio-temporal generator."""

    N: int = SYNTH_NODES
    T: int = SYNTH_STEPS
    seed: int = 42
    phi: float = SYNTH_PHI
    a: float = SYNTH_A
    b: float = SYNTH_B
    amplitude: float = SYNTH_AMPLITUDE
    obs_noise: float = SYNTH_OBS_NOISE
    period: int = SYNTH_PERIOD

    def validate(self) -> None:
        if self.N < 2 or self.T < 1:
            raise DataError(f"need N >= 2 and T >= 1, got N={self.N}, T={self.T}")
        if not abs(self.phi) < 1:
            raise DataError(f"AR coefficient must satisfy |phi| < 1, got {self.phi}")
        if not self.a > 0 or not self.b >= 0:
            raise DataError(f"need a > 0 and b >= 0, got a={self.a}, b={self.b}")
        if self.obs_noise < 0 or self.period < 1:
            raise DataError("observation noise must be >= 0 and period >= 1")


@dataclass
class GroundTruth:
    """Everything the generator knows that a model has to recover."""

    sigma_star: np.ndarray
    noise: np.ndarray
    seasonal: np.ndarray
    config: SynthConfig
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": vars(self.config),
            "sigma_star": self.sigma_star.tolist(),
            **self.extra,
        }


class StaticSnapshots:
    """The same graph at every step."""

    def __init__(self, graph: WeightedGraph):
        self.graph = graph

    def __getitem__(self, step: int) -> WeightedGraph:
        return self.graph


class SnapshotSequence:
    """
    Dynamic graph snapshots: every edge weight is multiplied by an independent
    uniform factor in [low, high], drawn from a stream keyed by the step index.
    """

    def __init__(self, graph: WeightedGraph, seed: int, low: float = 0.8, high: float = 1.2):
        if not 0 <= low <= high:
            raise DataError(f"invalid perturbation range [{low}, {high}]")
        self.graph = graph
        self.seed = int(seed)
        self.low = low
        self.high = high

    def __getitem__(self, step: int) -> WeightedGraph:
        if step < 0:
            raise DataError(f"snapshot step must be nonnegative, got {step}")
        rng = np.random.default_rng([self.seed, int(step)])
        factors = np.triu(rng.uniform(self.low, self.high, size=self.graph.weights.shape), k=1)
        return WeightedGraph(self.graph.weights * (factors + factors.T))


def build_graph_from_coords(
    coords: np.ndarray, threshold: float = KERNEL_THRESHOLD
) -> WeightedGraph:
    """
    Thresholded Gaussian kernel graph A_ij = exp(-d_ij^2 / (2 sigma^2)) if >= threshold.

    sigma is the standard deviation of all pairwise Euclidean distances.

    Raises:
        DataError: If fewer than two points are given or sigma is zero.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[0] < 2:
        raise DataError(f"need at least two coordinates, got shape {coords.shape}")

    distances = pdist(coords)
    sigma = float(np.std(distances))
    if sigma == 0:
        raise DataError("degenerate coordinates: pairwise distances have zero spread")

    kernel = np.exp(-squareform(distances) ** 2 / (2.0 * sigma**2))
    kernel[kernel < threshold] = 0.0
    np.fill_diagonal(kernel, 0.0)
    return WeightedGraph(kernel)


def synth_generate(config: SynthConfig) -> tuple[Dataset, GroundTruth, WeightedGraph]:
    """
    Generates a seasonal AR(1) series whose innovations have covariance
    Sigma* = (aI + bL)^{-1} + obs_noise^2 I on a random geometric graph.

    Returns:
        The dataset (with coordinates), the ground truth and the static graph.
    """
    config.validate()
    rng = named_rng(config.seed, "data")

    for attempt in range(GRAPH_RETRIES):
        coords = rng.uniform(size=(config.N, 2))
        graph = build_graph_from_coords(coords)
        if is_connected(graph):
            break
        logging.warning(f"Synthetic graph attempt {attempt + 1} is disconnected, regenerating.")
    else:
        raise DataError(f"no connected graph after {GRAPH_RETRIES} attempts")

    n = config.N
    precision = config.a * np.eye(n) + config.b * laplacian(graph)
    sigma_star = linalg.cho_solve(linalg.cho_factor(precision), np.eye(n))
    sigma_star = 0.5 * (sigma_star + sigma_star.T) + config.obs_noise**2 * np.eye(n)
    chol = linalg.cholesky(sigma_star, lower=True)

    noise = rng.standard_normal((config.T, n)) @ chol.T
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n)
    steps = np.arange(config.T)[:, None]
    seasonal = config.amplitude * np.sin(2.0 * np.pi * steps / config.period + phase)

    values = np.empty((config.T, n))
    values[0] = seasonal[0] + noise[0]
    for t in range(1, config.T):
        values[t] = seasonal[t] + config.phi * (values[t - 1] - seasonal[t - 1]) + noise[t]

    dataset = Dataset(values=values, coords=coords, name=f"synthetic-{config.seed}")
    truth = GroundTruth(sigma_star=sigma_star, noise=noise, seasonal=seasonal, config=config)
    logging.info(f"Generated synthetic data: T={config.T}, N={n}, edges={len(graph.edges())}")
    return dataset, truth, graph


def save_csv(ds: Dataset, path: Path) -> None:
    """Writes the wide format: header t,node_0,...,node_{N-1}."""
    frame = pd.DataFrame(ds.values, columns=[f"node_{i}" for i in range(ds.N)])
    frame.insert(0, "t", ds.timestamps if ds.timestamps is not None else np.arange(ds.T))
    frame.to_csv(path, index=False, lineterminator="\n")


def load_csv(path: Path) -> Dataset:
    """
    Reads a wide-format CSV; rows are taken as chronological in file order.

    Raises:
        DataError: On ragged rows or missing / non-numeric cells, naming the row.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: ragged rows: {e}") from e

    if frame.shape[1] < 2 or frame.columns[0] != "t":
        raise DataError(f"{path}: expected header t,node_0,...")

    cells = frame.iloc[:, 1:]
    numeric = cells.apply(pd.to_numeric, errors="coerce")
    bad = (numeric.isna() | ~np.isfinite(numeric)).any(axis=1).to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataError(f"{path}: row {row} has a missing or non-numeric cell")

    timestamps = frame["t"].to_numpy()
    numeric_t = pd.to_numeric(frame["t"], errors="coerce")
    if not numeric_t.isna().any():
        timestamps = numeric_t.to_numpy()

    return Dataset(
        values=cells.to_numpy().astype(float),
        timestamps=timestamps,
        name=path.stem,
    )


def chronological_split(
    ds: Dataset, fractions: tuple[float, float, float] = DEFAULT_SPLIT
) -> tuple[Dataset, Dataset, Dataset]:
    """
    Contiguous train / validation / test split at floor(T * cumulative fraction).

    Raises:
        DataError: If the fractions are invalid or any part is empty.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise DataError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {sum(fractions)}")

    # Small slack so 0.7 + 0.1 lands on 0.8 exactly
    first = int(np.floor(ds.T * fractions[0] + 1e-9))
    second = int(np.floor(ds.T * (fractions[0] + fractions[1]) + 1e-9))
    if not 0 < first < second < ds.T:
        raise DataError(f"split of T={ds.T} by {fractions} leaves an empty part")

    return (
        ds.slice(0, first, f"{ds.name}-train"),
        ds.slice(first, second, f"{ds.name}-val"),
        ds.slice(second, ds.T, f"{ds.name}-test"),
    )


def save_ground_truth(truth: GroundTruth, path: Path) -> None:
    with open(path, "w") as f:
        json.dump(truth.to_dict(), f, indent=2)
