import hashlib
import json
import logging
import threading
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, NamedTuple, Protocol

import numpy as np
import pandas as pd
from scipy.special import expit

from config import (
    ABLATIONS,
    ALPHA,
    BATCH_HORIZON,
    BATCH_WINDOWS,
    BETA,
    BOTTLENECK_STRENGTH,
    CHECKPOINT_VERSION,
    CORRELATION_NUGGET,
    CURVATURE_THRESHOLD,
    D_FLOOR,
    DEFAULT_SEED,
    DEFAULT_SPLIT,
    GRAD_CLIP,
    HIDDEN_DIM,
    INIT_RESIDUAL_SHARE,
    LAG_WINDOW,
    LEARNING_RATE,
    LENGTH_SCALE_STEP,
    LOW_RANK_DIM,
    MAX_EPOCHS,
    MAX_STEPS,
    MIXTURE_COMPONENTS,
    SENSITIVITY,
    SIGMA_MIN,
    THREADS,
    WEIGHT_DECAY,
)
from covariance import (
    BatchCovariance,
    CovarianceError,
    KernelBank,
    SpatialFactorParams,
    assemble,
    build_kernel_bank,
    factor_for_loading,
    mixture_correlation,
    mixture_weights,
    nll,
    nll_with_gradient,
    principal_loading,
    spatial_factor,
    spatial_factor_backward,
)
from dataio import Dataset, StaticSnapshots, chronological_split, named_rng
from graph import (
    CurvatureReport,
    WeightedGraph,
    batch_average,
    bottleneck_scores,
    curvature_matrix,
    laplacian,
    laplacian_backward,
    reweight,
    symmetrize,
)

# Lower bounds enforced on the constrained spatial scalars after every step
_ALPHA_MIN: float = 1e-6
_TAU_MIN: float = 1e-3

# Named parameter paths, in checkpoint order
_HEAD_FIELDS: dict[str, str] = {
    "backbone.weight": "backbone_weight",
    "backbone.bias": "backbone_bias",
    "head_mu.weight": "mu_weight",
    "head_mu.bias": "mu_bias",
    "head_L.weight": "factor_weight",
    "head_L.bias": "factor_bias",
    "head_logd.weight": "logd_weight",
    "head_logd.bias": "logd_bias",
    "head_logits.weight": "logits_weight",
    "head_logits.bias": "logits_bias",
}
_SPATIAL_SCALARS: tuple[str, ...] = ("alpha", "beta", "kappa0", "tau", "lam")
PARAM_PATHS: tuple[str, ...] = (
    *_HEAD_FIELDS,
    *(f"spatial.{name}" for name in _SPATIAL_SCALARS),
    "spatial.projection",
)


class TrainingError(RuntimeError):
    """
    Raised when training diverges or produces a non-finite gradient.

    Carries the last good parameters and, for gradient failures, the name of
    the offending parameter.
    """

    def __init__(self, message: str, params: "ModelParams | None" = None, parameter: str | None = None):
        super().__init__(message)
        self.params = params
        self.parameter = parameter


class Snapshots(Protocol):
    def __getitem__(self, step: int) -> WeightedGraph: ...


@dataclass
class TrainConfig:
    """Training and model-shape settings; defaults follow the tuned hyperparameters."""

    learning_rate: float = LEARNING_RATE
    max_epochs: int = MAX_EPOCHS
    max_steps: int = MAX_STEPS
    grad_clip: float = GRAD_CLIP
    weight_decay: float = WEIGHT_DECAY
    horizon: int = BATCH_HORIZON
    rank: int = LOW_RANK_DIM
    mixtures: int = MIXTURE_COMPONENTS
    lag: int = LAG_WINDOW
    hidden: int = HIDDEN_DIM
    batch_windows: int = BATCH_WINDOWS
    length_scale_step: float = LENGTH_SCALE_STEP
    d_floor: float = D_FLOOR
    nugget: float = CORRELATION_NUGGET
    alpha: float = ALPHA
    beta: float = BETA
    kappa0: float = CURVATURE_THRESHOLD
    tau: float = SENSITIVITY
    lam: float = BOTTLENECK_STRENGTH
    seed: int = DEFAULT_SEED
    ablate: str = "none"
    split: tuple[float, float, float] = DEFAULT_SPLIT

    def __post_init__(self):
        self.split = tuple(self.split)
        for name in ("max_epochs", "max_steps", "horizon", "rank", "mixtures", "lag", "hidden", "batch_windows"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("learning_rate", "grad_clip", "length_scale_step", "d_floor", "alpha", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("weight_decay", "nugget", "beta", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.ablate not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablate!r}, expected one of {ABLATIONS}")

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["split"] = list(self.split)
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        return cls(**payload)


@dataclass
class ModelParams:
    """Every trainable array of the forecaster plus the shared spatial parameters."""

    backbone_weight: np.ndarray
    backbone_bias: np.ndarray
    mu_weight: np.ndarray
    mu_bias: np.ndarray
    factor_weight: np.ndarray
    factor_bias: np.ndarray
    logd_weight: np.ndarray
    logd_bias: np.ndarray
    logits_weight: np.ndarray
    logits_bias: np.ndarray
    spatial: SpatialFactorParams

    @property
    def n_nodes(self) -> int:
        return self.mu_bias.size

    @property
    def hidden(self) -> int:
        return self.backbone_bias.size

    @property
    def rank(self) -> int:
        return self.factor_bias.size // self.n_nodes

    @property
    def lag(self) -> int:
        return self.backbone_weight.shape[1] // self.n_nodes

    @property
    def mixtures(self) -> int:
        return self.logits_bias.size

    def named(self) -> dict[str, np.ndarray]:
        """All parameters keyed by their checkpoint path; scalars as 0-d arrays."""
        arrays = {path: getattr(self, attr) for path, attr in _HEAD_FIELDS.items()}
        for name in _SPATIAL_SCALARS:
            arrays[f"spatial.{name}"] = np.asarray(getattr(self.spatial, name), dtype=float)
        arrays["spatial.projection"] = self.spatial.projection
        return arrays

    @classmethod
    def from_named(cls, arrays: dict, sigma_min: float = SIGMA_MIN) -> "ModelParams":
        missing = [path for path in PARAM_PATHS if path not in arrays]
        if missing:
            raise KeyError(f"missing parameters: {', '.join(missing)}")

        spatial = SpatialFactorParams(
            projection=np.array(arrays["spatial.projection"], dtype=float),
            sigma_min=sigma_min,
            **{name: float(arrays[f"spatial.{name}"]) for name in _SPATIAL_SCALARS},
        )
        fields = {attr: np.array(arrays[path], dtype=float) for path, attr in _HEAD_FIELDS.items()}
        return cls(spatial=spatial, **fields)

    def copy(self) -> "ModelParams":
        return ModelParams.from_named(self.named(), self.spatial.sigma_min)


class Heads(NamedTuple):
    mu: np.ndarray
    factor: np.ndarray
    d: np.ndarray
    logits: np.ndarray


class SpatialContext:
    """
    Window graphs and their curvature, cached per window end.

    The snapshots of the D steps in a window are averaged and symmetrised;
    curvature depends only on the support, so it is shared between windows
    whose averaged graphs coincide.
    """

    def __init__(self, snapshots: Snapshots | WeightedGraph, window: int):
        self.snapshots = as_snapshots(snapshots)
        self.window = window
        self._windows: dict[int, tuple[WeightedGraph, np.ndarray]] = {}
        self._curvature: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def __call__(self, t: int) -> tuple[WeightedGraph, np.ndarray]:
        with self._lock:
            if t not in self._windows:
                steps = range(max(0, t - self.window + 1), t + 1)
                graph = symmetrize(batch_average([self.snapshots[s].weights for s in steps]))
                key = hashlib.sha1(graph.support().tobytes()).hexdigest()
                if key not in self._curvature:
                    self._curvature[key] = curvature_matrix(graph)
                self._windows[t] = (graph, self._curvature[key])
            return self._windows[t]


class SpatialState(NamedTuple):
    graph: WeightedGraph
    kappa: np.ndarray
    report: CurvatureReport
    laplacian: np.ndarray
    G: np.ndarray


class _WindowPass(NamedTuple):
    steps: range
    inputs: list[np.ndarray]
    hidden: list[np.ndarray]
    heads: list[Heads]
    eta: np.ndarray
    weights: np.ndarray
    spatial: SpatialState
    cov: BatchCovariance


def as_snapshots(snapshots: Snapshots | WeightedGraph) -> Snapshots:
    if isinstance(snapshots, WeightedGraph):
        return StaticSnapshots(snapshots)
    return snapshots


@lru_cache(maxsize=16)
def kernel_bank(window: int, components: int, length_scale_step: float) -> KernelBank:
    return build_kernel_bank(window, components, length_scale_step)


def frozen_paths(ablate: str) -> set[str]:
    """Parameters held fixed by an ablation variant."""
    return {
        "no-rewiring": {"spatial.lam"},
        "reweight-only": {"spatial.projection"},
        "diagonal": {"head_L.weight", "head_L.bias"},
    }.get(ablate, set())


def init_params(
    n_nodes: int,
    config: TrainConfig,
    seed: int | None = None,
    mean: np.ndarray | None = None,
    var: np.ndarray | None = None,
) -> ModelParams:
    """
    Deterministic initialisation from the "init" random stream.

    Head weights start at zero, so every head begins at its bias: the mean at
    the per-node training mean and the log-variance at the log training
    variance. The factor bias is a small random loading unless the diagonal
    variant removes it.
    """
    rng = named_rng(config.seed if seed is None else seed, "init")
    lag, hidden, rank, mixtures = config.lag, config.hidden, config.rank, config.mixtures
    mean = np.zeros(n_nodes) if mean is None else np.asarray(mean, dtype=float)
    var = np.ones(n_nodes) if var is None else np.maximum(np.asarray(var, dtype=float), config.d_floor)
    scale = np.repeat(np.sqrt(var), rank)

    factor_bias = 0.01 * scale * rng.standard_normal(n_nodes * rank)
    if config.ablate == "diagonal":
        factor_bias[:] = 0.0

    spatial = SpatialFactorParams(
        alpha=config.alpha,
        beta=config.beta,
        projection=rng.standard_normal((n_nodes, rank)),
        kappa0=config.kappa0,
        tau=config.tau,
        lam=0.0 if config.ablate == "no-rewiring" else config.lam,
        sigma_min=SIGMA_MIN,
    )
    return ModelParams(
        backbone_weight=rng.normal(0.0, 1.0 / np.sqrt(lag * n_nodes), size=(hidden, lag * n_nodes)),
        backbone_bias=np.zeros(hidden),
        mu_weight=np.zeros((n_nodes, hidden)),
        mu_bias=mean.copy(),
        factor_weight=np.zeros((n_nodes * rank, hidden)),
        factor_bias=factor_bias,
        logd_weight=np.zeros((n_nodes, hidden)),
        logd_bias=np.log(var),
        logits_weight=np.zeros((mixtures, hidden)),
        logits_bias=np.zeros(mixtures),
        spatial=spatial,
    )


def init_from_data(values: np.ndarray, config: TrainConfig, context: SpatialContext, t: int) -> ModelParams:
    """
    Initialisation matched to the training series.

    The factor bias starts at the probabilistic-PCA loading W of the training
    covariance, rescaled against the spatial factor G_t at step t so that
    L G_t L^T = W W^T. The log-variance bias starts at the PPCA residual,
    floored at a share of each node's variance. The untrained model therefore
    reproduces the training covariance at every step. The diagonal variant
    keeps the plain per-node variance and no factor.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n = values.shape[1]
    mean, var = values.mean(axis=0), values.var(axis=0)
    if config.ablate == "diagonal":
        return init_params(n, config, mean=mean, var=var)

    loading, residual = principal_loading(values, config.rank)
    params = init_params(n, config, mean=mean, var=np.maximum(residual, INIT_RESIDUAL_SHARE * var))
    G = spatial_state(params.spatial, *context(t)).G
    params.factor_bias = factor_for_loading(loading, G).reshape(-1)
    logging.debug(f"Initial loading explains {np.sum(loading**2):.4f} of total variance {np.sum(var):.4f}")
    return params


def encode(params: ModelParams, history: np.ndarray) -> np.ndarray:
    """
    Latent state h = tanh(W vec(history) + b) of the last P observations.

    Raises:
        ValueError: If the history does not hold exactly P rows of N values.
    """
    history = np.asarray(history, dtype=float)
    expected = (params.lag, params.n_nodes)
    if history.shape != expected:
        raise ValueError(f"history must have shape {expected}, got {history.shape}")
    return np.tanh(params.backbone_weight @ history.reshape(-1) + params.backbone_bias)


def heads(params: ModelParams, h: np.ndarray, d_floor: float = D_FLOOR) -> Heads:
    """Affine heads of the latent state: mean, N x R factor, diagonal variances, mixture logits."""
    n, rank = params.n_nodes, params.rank
    return Heads(
        mu=params.mu_weight @ h + params.mu_bias,
        factor=(params.factor_weight @ h + params.factor_bias).reshape(n, rank),
        d=np.exp(params.logd_weight @ h + params.logd_bias) + d_floor,
        logits=params.logits_weight @ h + params.logits_bias,
    )


def spatial_state(spatial: SpatialFactorParams, graph: WeightedGraph, kappa: np.ndarray) -> SpatialState:
    """Curvature scores, reweighting and the spatial factor covariance G for one graph."""
    report = bottleneck_scores(graph, spatial.kappa0, spatial.tau, kappa=kappa)
    rewired = laplacian(reweight(graph, report, spatial.lam))
    G, _ = spatial_factor(rewired, spatial)
    return SpatialState(graph, kappa, report, rewired, G)


def _spatial_backward(grad_g: np.ndarray, state: SpatialState, spatial: SpatialFactorParams) -> dict:
    back = spatial_factor_backward(grad_g, state.G, state.laplacian, spatial)
    grad_rewired = laplacian_backward(back["laplacian"])

    weights = state.graph.weights
    scores = state.report.score_matrix(state.graph.n)
    # Curvature is combinatorial: it enters as a constant through the scores
    slope = expit(spatial.tau * (spatial.kappa0 - state.kappa)) * state.graph.support()
    grad_scores = grad_rewired * weights * spatial.lam

    return {
        "spatial.alpha": np.asarray(back["alpha"]),
        "spatial.beta": np.asarray(back["beta"]),
        "spatial.projection": back["projection"],
        "spatial.lam": np.asarray(np.sum(grad_rewired * weights * scores)),
        "spatial.kappa0": np.asarray(np.sum(grad_scores * slope) * spatial.tau),
        "spatial.tau": np.asarray(np.sum(grad_scores * slope * (spatial.kappa0 - state.kappa))),
    }


def _window_pass(
    params: ModelParams,
    values: np.ndarray,
    t: int,
    context: SpatialContext,
    config: TrainConfig,
) -> _WindowPass:
    bank = kernel_bank(config.horizon, params.mixtures, config.length_scale_step)
    lag = params.lag
    steps = range(t - config.horizon + 1, t + 1)
    if steps.start - lag < 0 or t >= len(values):
        raise ValueError(f"not enough history for a window ending at step {t}")

    inputs, hidden, outputs, residuals = [], [], [], []
    for s in steps:
        u = values[s - lag : s].reshape(-1)
        h = np.tanh(params.backbone_weight @ u + params.backbone_bias)
        out = heads(params, h, config.d_floor)
        inputs.append(u)
        hidden.append(h)
        outputs.append(out)
        residuals.append(values[s] - out.mu)

    logits = outputs[-1].logits
    correlation = mixture_correlation(bank, logits, config.nugget)
    state = spatial_state(params.spatial, *context(t))
    cov = assemble(
        [out.factor for out in outputs], correlation, state.G, np.concatenate([out.d for out in outputs])
    )
    return _WindowPass(
        steps, inputs, hidden, outputs, np.concatenate(residuals), mixture_weights(logits), state, cov
    )


def window_nll(
    params: ModelParams,
    values: np.ndarray,
    t: int,
    context: SpatialContext,
    config: TrainConfig,
) -> float:
    """
    Batch NLL of the window of D steps ending at step t.

    Args:
        params: Model parameters.
        values: T x N observations; the window needs P earlier rows for its first lag window.
        t: Index of the last step in the window.
        context: Window graphs and cached curvature.
        config: Supplies D, the kernel bank settings and the variance floor.
    """
    state = _window_pass(params, values, t, context, config)
    return nll(state.cov, state.eta)


def gradient(
    params: ModelParams,
    values: np.ndarray,
    t: int,
    context: SpatialContext,
    config: TrainConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    """
    Window NLL and its exact gradient with respect to every named parameter.

    Raises:
        TrainingError: If any gradient entry is non-finite, naming the parameter.
    """
    state = _window_pass(params, values, t, context, config)
    value, grad_cov = nll_with_gradient(state.cov, state.eta)
    bank = kernel_bank(config.horizon, params.mixtures, config.length_scale_step)
    n = params.n_nodes

    grads = {path: np.zeros_like(array) for path, array in params.named().items()}

    # Mixture weights: C = (sum_m w_m K_m + eps I) / (1 + eps)
    grad_w = np.tensordot(bank.kernels, grad_cov.C, axes=([1, 2], [0, 1])) / (1.0 + config.nugget)
    w = state.weights
    grad_logits = w * (grad_w - w @ grad_w)

    last = len(state.steps) - 1
    for index in range(len(state.steps)):
        rows = slice(index * n, (index + 1) * n)
        h = state.hidden[index]
        grad_mu = -grad_cov.eta[rows]
        grad_factor = grad_cov.blocks[index].reshape(-1)
        grad_logd = grad_cov.d[rows] * (state.heads[index].d - config.d_floor)

        grads["head_mu.weight"] += np.outer(grad_mu, h)
        grads["head_mu.bias"] += grad_mu
        grads["head_L.weight"] += np.outer(grad_factor, h)
        grads["head_L.bias"] += grad_factor
        grads["head_logd.weight"] += np.outer(grad_logd, h)
        grads["head_logd.bias"] += grad_logd

        grad_h = (
            params.mu_weight.T @ grad_mu
            + params.factor_weight.T @ grad_factor
            + params.logd_weight.T @ grad_logd
        )
        if index == last:
            grads["head_logits.weight"] += np.outer(grad_logits, h)
            grads["head_logits.bias"] += grad_logits
            grad_h += params.logits_weight.T @ grad_logits

        grad_pre = grad_h * (1.0 - h**2)
        grads["backbone.weight"] += np.outer(grad_pre, state.inputs[index])
        grads["backbone.bias"] += grad_pre

    grads.update(_spatial_backward(grad_cov.G, state.spatial, params.spatial))

    for path, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for {path}", parameter=path)
    return value, grads


def batch_gradient(
    params: ModelParams,
    values: np.ndarray,
    ends: Iterable[int],
    context: SpatialContext,
    config: TrainConfig,
    executor: Executor | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean NLL and gradient over several windows, reduced in the order given."""
    ends = [int(t) for t in ends]
    run = executor.map if executor is not None else map
    results = list(run(lambda t: gradient(params, values, t, context, config), ends))

    loss = float(np.mean([value for value, _ in results]))
    total = {path: np.zeros_like(array) for path, array in results[0][1].items()}
    for _, grads in results:
        for path, grad in grads.items():
            total[path] += grad
    return loss, {path: grad / len(results) for path, grad in total.items()}


def validation_nll(
    params: ModelParams,
    values: np.ndarray,
    ends: Iterable[int],
    context: SpatialContext,
    config: TrainConfig,
    executor: Executor | None = None,
) -> float:
    run = executor.map if executor is not None else map
    return float(np.mean(list(run(lambda t: window_nll(params, values, int(t), context, config), ends))))


def _project(params: ModelParams) -> ModelParams:
    spatial = params.spatial
    spatial.alpha = max(spatial.alpha, _ALPHA_MIN)
    spatial.beta = max(spatial.beta, 0.0)
    spatial.tau = max(spatial.tau, _TAU_MIN)
    spatial.lam = max(spatial.lam, 0.0)
    return params


def _descend(
    params: ModelParams, grads: dict[str, np.ndarray], config: TrainConfig, frozen: set[str]
) -> ModelParams:
    arrays = params.named()
    steps = {}
    for path, array in arrays.items():
        if path in frozen:
            steps[path] = np.zeros_like(array)
        else:
            steps[path] = grads[path] + config.weight_decay * array

    norm = float(np.sqrt(sum(np.sum(step**2) for step in steps.values())))
    if norm > config.grad_clip:
        logging.debug(f"Clipping gradient norm {norm:.3f} to {config.grad_clip}")
        steps = {path: step * (config.grad_clip / norm) for path, step in steps.items()}

    updated = {path: arrays[path] - config.learning_rate * steps[path] for path in arrays}
    return _project(ModelParams.from_named(updated, params.spatial.sigma_min))


def one_step_residuals(params: ModelParams, values: np.ndarray, d_floor: float = D_FLOOR) -> np.ndarray:
    """Residuals x_s - mu_s for every step s >= P of a series."""
    lag = params.lag
    return np.array(
        [values[s] - heads(params, encode(params, values[s - lag : s]), d_floor).mu for s in range(lag, len(values))]
    ).reshape(-1, params.n_nodes)


def fit(
    dataset: Dataset, snapshots: Snapshots | WeightedGraph, config: TrainConfig
) -> tuple[ModelParams, pd.DataFrame]:
    """
    Trains every parameter by clipped gradient descent on randomly sampled windows.

    The chronological split provides the training windows and the validation
    windows used for model selection; the test part is never touched.

    Returns:
        The best-validation parameters and the per-epoch loss trace.

    Raises:
        TrainingError: If the splits are too short or training diverges; the
            exception carries the last good parameters.
    """
    train, val, _ = chronological_split(dataset, config.split)
    values = dataset.values[: train.T + val.T]
    first = config.lag + config.horizon - 1
    train_ends = np.arange(first, train.T)
    val_ends = np.arange(max(first, train.T), train.T + val.T)
    if train_ends.size == 0 or val_ends.size == 0:
        raise TrainingError(f"splits too short for windows of {config.horizon} steps with lag {config.lag}")

    context = SpatialContext(snapshots, config.horizon)
    try:
        params = init_from_data(train.values, config, context, int(train_ends[0]))
    except CovarianceError as e:
        raise TrainingError(f"initialisation failed: {e}") from e
    rng = named_rng(config.seed, "training")
    frozen = frozen_paths(config.ablate)
    batch = min(config.batch_windows, train_ends.size)
    steps_per_epoch = max(1, train_ends.size // batch)

    logging.info(
        f"Training on {train_ends.size} windows ({steps_per_epoch} steps/epoch), "
        f"validating on {val_ends.size}; ablation={config.ablate}"
    )

    with ThreadPoolExecutor(max_workers=THREADS) as pool:
        try:
            best_val = validation_nll(params, values, val_ends, context, config, pool)
        except CovarianceError as e:
            raise TrainingError(f"initial parameters invalid: {e}", params=params) from e
        best_params = params.copy()
        rows = [{"epoch": 0, "step": 0, "train_nll": float("nan"), "val_nll": best_val, "best_val_nll": best_val}]

        step = 0
        for epoch in range(1, config.max_epochs + 1):
            losses = []
            for _ in range(steps_per_epoch):
                if step >= config.max_steps:
                    break
                # Random windows from the training split only
                ends = rng.choice(train_ends, size=batch, replace=False)
                try:
                    loss, grads = batch_gradient(params, values, ends, context, config, pool)
                except (TrainingError, CovarianceError) as e:
                    raise TrainingError(f"training diverged at step {step}: {e}", params=best_params,
                                        parameter=getattr(e, "parameter", None)) from e
                if not np.isfinite(loss):
                    raise TrainingError(f"training diverged at step {step}: NLL is {loss}", params=best_params)
                params = _descend(params, grads, config, frozen)
                losses.append(loss)
                step += 1

            if not losses:
                break

            try:
                val_nll = validation_nll(params, values, val_ends, context, config, pool)
            except CovarianceError as e:
                raise TrainingError(f"validation failed after epoch {epoch}: {e}", params=best_params) from e
            if not np.isfinite(val_nll):
                raise TrainingError(f"validation NLL is {val_nll} after epoch {epoch}", params=best_params)
            # Keep the parameters with the best validation NLL
            if val_nll < best_val:
                best_val = val_nll
                best_params = params.copy()

            rows.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "train_nll": float(np.mean(losses)),
                    "val_nll": val_nll,
                    "best_val_nll": best_val,
                }
            )
            logging.info(f"Epoch {epoch}: train NLL {np.mean(losses):.4f}, val NLL {val_nll:.4f}, best {best_val:.4f}")

    return best_params, pd.DataFrame(rows)


def save_checkpoint(params: ModelParams, config: TrainConfig, path: Path) -> None:
    """Writes a versioned JSON checkpoint; floats round-trip exactly."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "sigma_min": params.spatial.sigma_min,
        "params": {path_: array.tolist() for path_, array in params.named().items()},
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load_checkpoint(path: Path) -> tuple[ModelParams, TrainConfig]:
    with open(path, "r") as f:
        payload = json.load(f)

    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    params = ModelParams.from_named(payload["params"], payload.get("sigma_min", SIGMA_MIN))
    return params, TrainConfig.from_dict(payload["config"])
