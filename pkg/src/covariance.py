import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import softmax

from config import CORRELATION_NUGGET, DENSE_ORACLE_MAX_DIM, LENGTH_SCALE_STEP, SIGMA_MIN

LOG_2PI: float = float(np.log(2.0 * np.pi))


class CovarianceError(ValueError):
    """Raised when a covariance component is malformed or not positive definite."""


@dataclass(frozen=True)
class KernelBank:
    """M squared-exponential correlation kernels over a window of D steps."""

    kernels: np.ndarray
    length_scale_step: float

    @property
    def window(self) -> int:
        return self.kernels.shape[1]

    @property
    def components(self) -> int:
        return self.kernels.shape[0]


@dataclass
class SpatialFactorParams:
    """
    Time-invariant parameters of the curvature-aware spatial factor.

    `projection` is the raw N x R matrix; it is column-normalised before use.
    `sigma_min` is a fixed jitter and is never trained.
    """

    alpha: float
    beta: float
    projection: np.ndarray
    kappa0: float
    tau: float
    lam: float
    sigma_min: float = SIGMA_MIN

    def validate(self) -> None:
        if not self.alpha > 0:
            raise CovarianceError(f"alpha must be positive, got {self.alpha}")
        if not self.beta >= 0:
            raise CovarianceError(f"beta must be nonnegative, got {self.beta}")
        if not self.sigma_min > 0:
            raise CovarianceError(f"sigma_min must be positive, got {self.sigma_min}")
        if not self.tau > 0:
            raise CovarianceError(f"tau must be positive, got {self.tau}")
        if not self.lam >= 0:
            raise CovarianceError(f"lambda must be nonnegative, got {self.lam}")
        if np.ndim(self.projection) != 2:
            raise CovarianceError("projection must be an N x R matrix")


@dataclass(frozen=True)
class BatchCovariance:
    """
    Implicit window covariance blkdiag(L_s) (C kron G) blkdiag(L_s)^T + diag(d).

    blocks has shape (D, N, R); d is ordered step-major (step s, node i at s*N + i).
    """

    blocks: np.ndarray
    C: np.ndarray
    G: np.ndarray
    d: np.ndarray

    @property
    def steps(self) -> int:
        return self.blocks.shape[0]

    @property
    def nodes(self) -> int:
        return self.blocks.shape[1]

    @property
    def rank(self) -> int:
        return self.blocks.shape[2]

    def loading(self) -> np.ndarray:
        """The block-diagonal DN x DR loading matrix U."""
        return linalg.block_diag(*self.blocks)

    def dense(self) -> np.ndarray:
        u = self.loading()
        return u @ np.kron(self.C, self.G) @ u.T + np.diag(self.d)

    def sub_window(self, start: int, stop: int) -> "BatchCovariance":
        """Covariance of the contiguous steps start..stop-1."""
        n = self.nodes
        return BatchCovariance(
            blocks=self.blocks[start:stop],
            C=self.C[start:stop, start:stop],
            G=self.G,
            d=self.d[start * n : stop * n],
        )

    def factorize(self) -> "WoodburyFactor":
        return WoodburyFactor.from_covariance(self)


def _cholesky(matrix: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    try:
        return linalg.cho_factor(matrix, lower=True)
    except linalg.LinAlgError as e:
        raise CovarianceError(f"{what}: {e}") from e


def _logdet(factor: tuple[np.ndarray, bool]) -> float:
    return float(2.0 * np.sum(np.log(np.diag(factor[0]))))


@dataclass(frozen=True)
class WoodburyFactor:
    """
    Reusable factorisation of a BatchCovariance.

    Sigma^{-1} = D^{-1} - D^{-1} U M^{-1} U^T D^{-1} with the DR x DR middle
    matrix M = C^{-1} kron G^{-1} + U^T D^{-1} U.
    """

    loading: np.ndarray
    d_inv: np.ndarray
    scaled_loading: np.ndarray
    gram: np.ndarray
    middle: tuple[np.ndarray, bool]
    logdet: float

    @classmethod
    def from_covariance(cls, cov: BatchCovariance) -> "WoodburyFactor":
        u = cov.loading()
        d_inv = 1.0 / cov.d
        scaled = u * d_inv[:, None]
        gram = u.T @ scaled

        c_factor = _cholesky(cov.C, "temporal correlation is not positive definite")
        g_factor = _cholesky(cov.G, "spatial factor covariance is not positive definite")
        c_inv = linalg.cho_solve(c_factor, np.eye(cov.steps))
        g_inv = linalg.cho_solve(g_factor, np.eye(cov.rank))

        middle = np.kron(c_inv, g_inv) + gram
        middle = 0.5 * (middle + middle.T)
        middle_factor = _cholesky(middle, "indefinite middle matrix")

        # Determinant lemma with |C kron G| = |C|^R |G|^D
        logdet = (
            _logdet(middle_factor)
            + cov.rank * _logdet(c_factor)
            + cov.steps * _logdet(g_factor)
            + float(np.sum(np.log(cov.d)))
        )
        return cls(u, d_inv, scaled, gram, middle_factor, logdet)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Sigma^{-1} rhs for a vector or a matrix of right-hand sides."""
        rhs = np.asarray(rhs, dtype=float)
        scale = self.d_inv if rhs.ndim == 1 else self.d_inv[:, None]
        inner = linalg.cho_solve(self.middle, self.scaled_loading.T @ rhs)
        return rhs * scale - self.scaled_loading @ inner

    def inverse_diagonal(self) -> np.ndarray:
        inner = linalg.cho_solve(self.middle, self.scaled_loading.T)
        return self.d_inv - np.einsum("ij,ji->i", self.scaled_loading, inner)


@dataclass(frozen=True)
class CovarianceGradient:
    """Gradient of the window NLL with respect to each covariance component."""

    eta: np.ndarray
    blocks: np.ndarray
    C: np.ndarray
    G: np.ndarray
    d: np.ndarray


def build_kernel_bank(
    window: int, components: int, length_scale_step: float = LENGTH_SCALE_STEP
) -> KernelBank:
    """
    Squared-exponential kernels K_m[s, u] = exp(-(s - u)^2 / (2 (m sigma')^2)), m = 1..M.
    """
    if window < 1 or components < 1:
        raise CovarianceError(f"window and components must be >= 1, got {window}, {components}")
    if not length_scale_step > 0:
        raise CovarianceError(f"length-scale step must be positive, got {length_scale_step}")

    lag = np.subtract.outer(np.arange(window), np.arange(window)).astype(float)
    scales = length_scale_step * np.arange(1, components + 1)
    kernels = np.exp(-(lag[None, :, :] ** 2) / (2.0 * scales[:, None, None] ** 2))
    return KernelBank(kernels=kernels, length_scale_step=float(length_scale_step))


def mixture_weights(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise CovarianceError("non-finite mixture logit")
    return softmax(logits)


def mixture_correlation(
    bank: KernelBank, logits: np.ndarray, nugget: float = CORRELATION_NUGGET
) -> np.ndarray:
    """
    Temporal correlation C = sum_m softmax(logits)_m K_m.

    The optional nugget mixes in the identity as (C + eps I) / (1 + eps), which
    keeps the unit diagonal and bounds the smallest eigenvalue away from zero.
    """
    weights = mixture_weights(logits)
    if weights.size != bank.components:
        raise CovarianceError(f"expected {bank.components} logits, got {weights.size}")

    correlation = np.tensordot(weights, bank.kernels, axes=1)
    if nugget > 0:
        correlation = (correlation + nugget * np.eye(bank.window)) / (1.0 + nugget)
    return correlation


def colnorm(projection: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise l2 normalisation; returns the normalised matrix and the norms."""
    norms = np.linalg.norm(projection, axis=0)
    if np.any(norms == 0):
        raise CovarianceError("degenerate projection: zero column")
    return projection / norms, norms


def spatial_factor(
    rewired_laplacian: np.ndarray, params: SpatialFactorParams
) -> tuple[np.ndarray, np.ndarray]:
    """
    Spatial factor covariance from the rewired Laplacian.

    Q = (alpha + sigma_min) I_R + beta P^T L' P with P = colnorm(Pi), and G = Q^{-1}.

    Returns:
        The pair (G, Q).
    """
    params.validate()
    p_hat, _ = colnorm(np.asarray(params.projection, dtype=float))
    reduced = p_hat.T @ rewired_laplacian @ p_hat
    reduced = 0.5 * (reduced + reduced.T)
    rank = p_hat.shape[1]
    precision = (params.alpha + params.sigma_min) * np.eye(rank) + params.beta * reduced

    factor = _cholesky(precision, "spatial precision is not positive definite")
    covariance = linalg.cho_solve(factor, np.eye(rank))
    return 0.5 * (covariance + covariance.T), precision


def spatial_factor_backward(
    grad_g: np.ndarray,
    g: np.ndarray,
    rewired_laplacian: np.ndarray,
    params: SpatialFactorParams,
) -> dict[str, np.ndarray | float]:
    """
    Back-propagates a gradient on G through G = Q^{-1} to alpha, beta, the raw
    projection and the rewired Laplacian.
    """
    p_hat, norms = colnorm(np.asarray(params.projection, dtype=float))
    reduced = p_hat.T @ rewired_laplacian @ p_hat
    reduced = 0.5 * (reduced + reduced.T)

    grad_g = 0.5 * (grad_g + grad_g.T)
    grad_q = -g @ grad_g @ g

    grad_reduced = params.beta * grad_q
    grad_reduced = 0.5 * (grad_reduced + grad_reduced.T)
    grad_p_hat = 2.0 * rewired_laplacian @ p_hat @ grad_reduced
    # d(pi / |pi|) = (I - p p^T) d pi / |pi| column by column
    grad_projection = (grad_p_hat - p_hat * np.sum(p_hat * grad_p_hat, axis=0)) / norms

    return {
        "alpha": float(np.trace(grad_q)),
        "beta": float(np.sum(grad_q * reduced)),
        "projection": grad_projection,
        "laplacian": p_hat @ grad_reduced @ p_hat.T,
    }


def principal_loading(values: np.ndarray, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Probabilistic PCA of the sample covariance S of a T x N series.

    The top eigenpairs above the mean of the discarded eigenvalues form the
    loading; whatever they leave unexplained on the diagonal is the residual
    variance, so W W^T + diag(residual) reproduces diag(S) exactly.

    Returns:
        (W, residual): N x rank loading and the per-node residual variances.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n = values.shape[1]
    if values.shape[0] < 2:
        return np.zeros((n, rank)), np.zeros(n)

    sample = np.atleast_2d(np.cov(values, rowvar=False))
    eigvals, eigvecs = linalg.eigh(sample)
    eigvals, eigvecs = np.clip(eigvals[::-1], 0.0, None), eigvecs[:, ::-1]

    kept = min(rank, n)
    noise = float(eigvals[kept:].mean()) if kept < n else 0.0
    loading = np.zeros((n, rank))
    loading[:, :kept] = eigvecs[:, :kept] * np.sqrt(np.maximum(eigvals[:kept] - noise, 0.0))
    residual = np.maximum(np.diag(sample) - np.sum(loading**2, axis=1), 0.0)
    return loading, residual


def factor_for_loading(loading: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Returns L = W G^{-1/2}, the factor block with L G L^T = W W^T."""
    g, vectors = linalg.eigh(0.5 * (G + G.T))
    if np.any(g <= 0):
        raise CovarianceError("spatial factor covariance is not positive definite")
    return np.asarray(loading, dtype=float) @ (vectors / np.sqrt(g)) @ vectors.T


def assemble(
    blocks: np.ndarray | list[np.ndarray], C: np.ndarray, G: np.ndarray, d: np.ndarray
) -> BatchCovariance:
    """
    Validates the components of a window covariance without densifying it.

    Raises:
        CovarianceError: On dimension mismatch or a nonpositive diagonal entry.
    """
    blocks = np.asarray(blocks, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    d = np.asarray(d, dtype=float).reshape(-1)

    if blocks.ndim != 3:
        raise CovarianceError(f"blocks must have shape (D, N, R), got {blocks.shape}")
    steps, nodes, rank = blocks.shape
    if C.shape != (steps, steps):
        raise CovarianceError(f"C must be {steps}x{steps}, got {C.shape}")
    if G.shape != (rank, rank):
        raise CovarianceError(f"G must be {rank}x{rank}, got {G.shape}")
    if d.size != steps * nodes:
        raise CovarianceError(f"d must have {steps * nodes} entries, got {d.size}")
    if not np.all(np.isfinite(blocks)) or not np.all(np.isfinite(d)):
        raise CovarianceError("covariance components must be finite")
    if np.any(d <= 0):
        raise CovarianceError("nonpositive diagonal variance")
    if not np.allclose(C, C.T) or not np.allclose(G, G.T):
        raise CovarianceError("C and G must be symmetric")

    return BatchCovariance(blocks=blocks, C=C, G=G, d=d)


def nll(cov: BatchCovariance, eta: np.ndarray) -> float:
    """
    Gaussian negative log-likelihood of the stacked residuals via Woodbury and
    the matrix determinant lemma.
    """
    eta = np.asarray(eta, dtype=float)
    factor = cov.factorize()
    quad = float(eta @ factor.solve(eta))
    return 0.5 * (eta.size * LOG_2PI + factor.logdet + quad)


def nll_with_gradient(cov: BatchCovariance, eta: np.ndarray) -> tuple[float, CovarianceGradient]:
    """
    NLL together with its gradient with respect to eta, every L_s, C, G and d.

    With a = Sigma^{-1} eta and K = C kron G:
    dNLL/dU = Sigma^{-1} U K - a (K U^T a)^T, dNLL/dK = (U^T Sigma^{-1} U - U^T a a^T U) / 2,
    dNLL/dd = (diag Sigma^{-1} - a^2) / 2.
    """
    eta = np.asarray(eta, dtype=float)
    factor = cov.factorize()
    steps, nodes, rank = cov.blocks.shape

    a = factor.solve(eta)
    value = 0.5 * (eta.size * LOG_2PI + factor.logdet + float(eta @ a))

    u = factor.loading
    k = np.kron(cov.C, cov.G)
    ua = u.T @ a
    inv_u = factor.solve(u)

    grad_u = inv_u @ k - np.outer(a, k @ ua)
    grad_blocks = np.stack(
        [grad_u[s * nodes : (s + 1) * nodes, s * rank : (s + 1) * rank] for s in range(steps)]
    )
    grad_k = 0.5 * (u.T @ inv_u - np.outer(ua, ua))
    grad_k = grad_k.reshape(steps, rank, steps, rank)

    return value, CovarianceGradient(
        eta=a,
        blocks=grad_blocks,
        C=np.einsum("arbq,rq->ab", grad_k, cov.G),
        G=np.einsum("arbq,ab->rq", grad_k, cov.C),
        d=0.5 * (factor.inverse_diagonal() - a**2),
    )


def nll_dense_oracle(
    cov: BatchCovariance, eta: np.ndarray, max_dim: int = DENSE_ORACLE_MAX_DIM
) -> float:
    """Reference NLL from the densified covariance and a direct Cholesky factorisation."""
    eta = np.asarray(eta, dtype=float)
    if eta.size > max_dim:
        raise CovarianceError(f"dense oracle limited to {max_dim} dimensions, got {eta.size}")

    factor = _cholesky(cov.dense(), "dense covariance is not positive definite")
    quad = float(eta @ linalg.cho_solve(factor, eta))
    return 0.5 * (eta.size * LOG_2PI + _logdet(factor) + quad)


def conditional_next_step(
    cov: BatchCovariance, eta_obs: np.ndarray, method: str = "woodbury"
) -> tuple[np.ndarray, np.ndarray]:
    """
    Conditions the last step of a window on the residuals observed in the
    preceding steps.

    Args:
        cov: Window covariance over D steps, the last one being the step to predict.
        eta_obs: Observed residuals for the first D - 1 steps, step-major.
        method: "woodbury" solves against the implicit past block; "dense"
            factorises it explicitly.

    Returns:
        (mu_cond, Sigma_cond) of the Gaussian conditional for the last step.
    """
    steps, nodes, rank = cov.blocks.shape
    eta_obs = np.asarray(eta_obs, dtype=float).reshape(-1)
    if eta_obs.size != (steps - 1) * nodes:
        raise CovarianceError(
            f"expected {(steps - 1) * nodes} observed residuals, got {eta_obs.size}"
        )

    future = cov.blocks[-1]
    future_cov = cov.C[-1, -1] * future @ cov.G @ future.T + np.diag(cov.d[-nodes:])
    if steps == 1:
        return np.zeros(nodes), 0.5 * (future_cov + future_cov.T)

    past = cov.sub_window(0, steps - 1)
    cross_kernel = np.kron(cov.C[:-1, -1][:, None], cov.G)
    cross = past.loading() @ cross_kernel @ future.T

    if method == "woodbury":
        weights = past.factorize().solve(cross)
    elif method == "dense":
        if eta_obs.size > DENSE_ORACLE_MAX_DIM:
            raise CovarianceError(
                f"dense conditioning limited to {DENSE_ORACLE_MAX_DIM} dimensions"
            )
        factor = _cholesky(past.dense(), "past block is not positive definite")
        weights = linalg.cho_solve(factor, cross)
    else:
        raise ValueError(f"unknown conditioning method {method!r}")

    mean = weights.T @ eta_obs
    conditional = future_cov - cross.T @ weights
    conditional = 0.5 * (conditional + conditional.T)
    _cholesky(conditional, "conditional covariance is not positive definite")
    return mean, conditional


def dump_csv(matrix: np.ndarray, path: Path) -> None:
    """Writes a dense matrix to CSV for debugging."""
    pd.DataFrame(np.atleast_2d(matrix)).to_csv(path, header=False, index=False, lineterminator="\n")
    logging.debug(f"Dumped {np.shape(matrix)} matrix to {path}")
