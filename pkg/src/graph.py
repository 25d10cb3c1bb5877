import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from config import BRUTE_FORCE_MAX_NODES, CONNECTIVITY_TOL, EDGE_THRESHOLD

# Number of candidate cuts scored per vectorised chunk in cheeger_brute
_CUT_CHUNK: int = 1 << 15


class GraphError(ValueError):
    """Raised when a graph, cut or curvature request violates its preconditions."""


@dataclass(frozen=True)
class WeightedGraph:
    """
    Undirected weighted graph stored as a dense symmetric adjacency matrix.

    The matrix is copied and made read-only on construction, so a graph is a
    value that can be shared freely between threads.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
            raise GraphError(f"adjacency must be a non-empty square matrix, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise GraphError("adjacency contains non-finite entries")
        if np.any(w < 0):
            raise GraphError("negative weight in adjacency")
        if not np.array_equal(w, w.T):
            raise GraphError("adjacency is not symmetric")
        if np.any(np.diag(w) != 0):
            raise GraphError("adjacency has self-loops")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def support(self, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
        """Boolean adjacency of the unweighted support graph."""
        return self.weights > threshold

    def degrees(self, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
        return self.support(threshold).sum(axis=1)

    def edges(self, threshold: float = EDGE_THRESHOLD) -> list[tuple[int, int]]:
        """Undirected edges as (i, j) pairs with i < j, in row-major order."""
        rows, cols = np.nonzero(np.triu(self.support(threshold), k=1))
        return list(zip(rows.tolist(), cols.tolist()))


@dataclass(frozen=True)
class CurvatureReport:
    """Per-edge curvature and bottleneck scores from one scoring pass."""

    edges: list[tuple[int, int, float, float]]
    kappa0: float
    tau: float

    def score_matrix(self, n: int) -> np.ndarray:
        """Symmetric N x N matrix holding b_ij on every listed edge, 0 elsewhere."""
        scores = np.zeros((n, n))
        for i, j, _, b in self.edges:
            scores[i, j] = scores[j, i] = b
        return scores

    def to_dict(self) -> dict:
        return {
            "params": {"kappa0": self.kappa0, "tau": self.tau},
            "edges": [
                {"i": i, "j": j, "kappa": kappa, "b": b} for i, j, kappa, b in self.edges
            ],
        }


@dataclass(frozen=True)
class DiagnosticsReport:
    """
    Graph measures before and after curvature-aware reweighting.

    Ratios are percentages oriented so that an improvement reads below 100:
    K(W')/K(W), lambda_{n-1}/lambda'_{n-1} and the mean over cuts of
    phi_W(S)/phi_W'(S).
    """

    kirchhoff_before: float
    kirchhoff_after: float
    lambda_top_before: float
    lambda_top_after: float
    fiedler_before: float
    fiedler_after: float
    conductance_pairs: list[tuple[str, float, float]]
    ratios: dict[str, float]
    cut_sets: dict[str, list[int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["conductance_pairs"] = [list(pair) for pair in self.conductance_pairs]
        return payload

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def batch_average(adjacencies: Sequence[np.ndarray]) -> np.ndarray:
    """
    Averages a batch of adjacency snapshots entrywise.

    Args:
        adjacencies: Nonempty list of N x N nonnegative matrices.

    Returns:
        The entrywise arithmetic mean.

    Raises:
        GraphError: If the batch is empty or the shapes differ.
    """
    if len(adjacencies) == 0:
        raise GraphError("empty batch")

    matrices = [np.asarray(a, dtype=float) for a in adjacencies]
    shape = matrices[0].shape
    for index, matrix in enumerate(matrices):
        if matrix.shape != shape:
            raise GraphError(
                f"shape mismatch in batch: item {index} has {matrix.shape}, expected {shape}"
            )

    return np.sum(matrices, axis=0) / len(matrices)


def symmetrize(adjacency: np.ndarray) -> WeightedGraph:
    """Builds W = (A + A^T) / 2 with the diagonal cleared."""
    a = np.asarray(adjacency, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise GraphError(f"adjacency must be square, got {a.shape}")
    if np.any(a < 0):
        raise GraphError("negative weight in adjacency")

    w = 0.5 * (a + a.T)
    np.fill_diagonal(w, 0.0)
    return WeightedGraph(w)


def laplacian(g: WeightedGraph) -> np.ndarray:
    """Unnormalised graph Laplacian L = D - W."""
    return np.diag(g.weights.sum(axis=1)) - g.weights


def laplacian_backward(grad_laplacian: np.ndarray) -> np.ndarray:
    """
    Adjoint of `laplacian` with respect to the adjacency entries.

    Each ordered entry W_ij (i != j) enters L_ii with +1 and L_ij with -1.
    """
    grad = np.diag(grad_laplacian)[:, None] - grad_laplacian
    np.fill_diagonal(grad, 0.0)
    return grad


def _edge_curvature(support: np.ndarray, degrees: np.ndarray, i: int, j: int) -> float:
    # Triangles and 4-cycles are counted on the unweighted support
    nbr_i = support[i]
    nbr_j = support[j]
    d_i = int(degrees[i])
    d_j = int(degrees[j])
    d_max = max(d_i, d_j)
    d_min = min(d_i, d_j)

    triangles = int(np.count_nonzero(nbr_i & nbr_j))

    # 4-cycle i-k-w-j-i without diagonals: k ~ i, k !~ j, w ~ j, w !~ i, k ~ w
    cand_k = nbr_i & ~nbr_j
    cand_k[j] = False
    cand_w = nbr_j & ~nbr_i
    cand_w[i] = False
    links = support[np.ix_(cand_k, cand_w)]
    through_k = links.sum(axis=1)
    through_w = links.sum(axis=0)
    squares_i = int(np.count_nonzero(through_k))
    squares_j = int(np.count_nonzero(through_w))
    gamma_max = int(max(through_k.max(initial=0), through_w.max(initial=0)))

    kappa = 2.0 / d_i + 2.0 / d_j - 2.0
    if triangles > 0:
        kappa += 2.0 * triangles / d_max + triangles / d_min
    if gamma_max > 0:
        kappa += (squares_i + squares_j) / (gamma_max * d_max)
    return kappa


def curvature_matrix(g: WeightedGraph, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """
    Balanced Forman curvature of every edge.

    Returns:
        Symmetric N x N matrix with kappa_ij on edges of the support graph and
        zero elsewhere.
    """
    support = g.support(threshold)
    degrees = support.sum(axis=1)
    kappa = np.zeros((g.n, g.n))
    for i, j in g.edges(threshold):
        kappa[i, j] = kappa[j, i] = _edge_curvature(support, degrees, i, j)
    return kappa


def balanced_forman_curvature(
    g: WeightedGraph, edge: tuple[int, int], threshold: float = EDGE_THRESHOLD
) -> float:
    """
    Balanced Forman curvature of a single edge of the support graph.

    Args:
        g: The weighted graph; only its support (weights above `threshold`) matters.
        edge: Node pair (i, j).
        threshold: Support threshold.

    Raises:
        GraphError: If (i, j) is not an edge.
    """
    i, j = edge
    support = g.support(threshold)
    if i == j or not support[i, j]:
        raise GraphError(f"({i}, {j}) is not an edge")
    return _edge_curvature(support, support.sum(axis=1), i, j)


def bottleneck_scores(
    g: WeightedGraph,
    kappa0: float,
    tau: float,
    kappa: np.ndarray | None = None,
    threshold: float = EDGE_THRESHOLD,
) -> CurvatureReport:
    """
    Scores each edge by b_ij = softplus(tau * (kappa0 - kappa_ij)).

    A precomputed curvature matrix can be passed as `kappa`; curvature depends
    only on the support, so callers cache it per graph.
    """
    if not tau > 0:
        raise GraphError(f"tau must be positive, got {tau}")

    if kappa is None:
        kappa = curvature_matrix(g, threshold)

    edges = []
    for i, j in g.edges(threshold):
        k = float(kappa[i, j])
        b = float(np.logaddexp(0.0, tau * (kappa0 - k)))
        edges.append((i, j, k, b))
    return CurvatureReport(edges=edges, kappa0=float(kappa0), tau=float(tau))


def reweight(
    g: WeightedGraph,
    report: CurvatureReport,
    lam: float,
    threshold: float = EDGE_THRESHOLD,
) -> WeightedGraph:
    """Strengthens every edge as W'_ij = W_ij (1 + lam * b_ij)."""
    if lam < 0:
        raise GraphError(f"bottleneck strength must be nonnegative, got {lam}")
    if [(i, j) for i, j, _, _ in report.edges] != g.edges(threshold):
        raise GraphError("curvature report does not match the graph's edge set")

    return WeightedGraph(g.weights * (1.0 + lam * report.score_matrix(g.n)))


def rewire(
    g: WeightedGraph,
    kappa0: float,
    tau: float,
    lam: float,
    kappa: np.ndarray | None = None,
) -> tuple[WeightedGraph, CurvatureReport]:
    """Curvature scoring followed by reweighting, returning both results."""
    report = bottleneck_scores(g, kappa0, tau, kappa=kappa)
    return reweight(g, report, lam), report


def spectrum(matrix: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric matrix in nondecreasing order."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise GraphError(f"spectrum needs a square matrix, got {m.shape}")
    if not np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
        raise GraphError("spectrum needs a symmetric matrix")
    return linalg.eigh(m, eigvals_only=True)


def _connected(eigenvalues: np.ndarray) -> bool:
    if eigenvalues.size == 1:
        return True
    return bool(eigenvalues[1] > CONNECTIVITY_TOL * eigenvalues[-1] and eigenvalues[-1] > 0)


def is_connected(g: WeightedGraph) -> bool:
    """Spectral connectivity test: lambda_2 > tol * lambda_max."""
    return _connected(spectrum(laplacian(g)))


def scaled_kirchhoff(lap: np.ndarray) -> float:
    """
    Scaled Kirchhoff index, the sum of reciprocals of the nonzero Laplacian eigenvalues.

    Raises:
        GraphError: If the graph is disconnected.
    """
    eigenvalues = spectrum(lap)
    if eigenvalues.size < 2 or not _connected(eigenvalues):
        raise GraphError("graph disconnected")
    return float(np.sum(1.0 / eigenvalues[1:]))


def _cut_mask(n: int, subset: Iterable[int]) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    members = list(subset)
    if any(node < 0 or node >= n for node in members):
        raise GraphError(f"cut contains nodes outside 0..{n - 1}")
    mask[members] = True
    if not mask.any() or mask.all():
        raise GraphError("trivial cut")
    return mask


def cut_conductance(g: WeightedGraph, subset: Iterable[int]) -> float:
    """
    Cut conductance phi(S) = cut(S) / min(vol(S), vol(V \\ S)).

    A side with zero volume has no crossing weight either; its conductance is
    reported as 0.
    """
    mask = _cut_mask(g.n, subset)
    w = g.weights
    cut = w[mask][:, ~mask].sum()
    volume = min(w[mask].sum(), w[~mask].sum())
    if volume == 0:
        return 0.0
    return float(cut / volume)


def cheeger_brute(g: WeightedGraph) -> tuple[float, list[int]]:
    """
    Cheeger constant by exhaustive enumeration of the 2^(N-1) - 1 nontrivial cuts.

    Node N-1 is kept outside S so every cut is visited once.

    Returns:
        The minimum conductance and one minimizing node set, sorted.
    """
    n = g.n
    if n > BRUTE_FORCE_MAX_NODES:
        raise GraphError(f"graph with {n} nodes is too large for brute force")
    if n < 2:
        raise GraphError("trivial cut: graph has a single node")

    w = g.weights
    degrees = w.sum(axis=1)
    total = degrees.sum()
    bits = np.arange(n - 1)

    best_value = np.inf
    best_code = 1
    for start in range(1, 1 << (n - 1), _CUT_CHUNK):
        codes = np.arange(start, min(start + _CUT_CHUNK, 1 << (n - 1)))
        members = np.zeros((codes.size, n))
        members[:, : n - 1] = (codes[:, None] >> bits) & 1
        vol_s = members @ degrees
        cut = np.einsum("cj,cj->c", members @ w, 1.0 - members)
        volume = np.minimum(vol_s, total - vol_s)
        with np.errstate(divide="ignore", invalid="ignore"):
            phi = np.where(volume > 0, cut / volume, 0.0)
        index = int(np.argmin(phi))
        if phi[index] < best_value:
            best_value = float(phi[index])
            best_code = int(codes[index])

    subset = [node for node in range(n - 1) if best_code >> node & 1]
    return best_value, subset


def random_bisections(n: int, count: int, seed: int) -> list[list[int]]:
    """Random balanced node bisections, each given by its sorted first half."""
    rng = np.random.default_rng(seed)
    return [sorted(rng.permutation(n)[: n // 2].tolist()) for _ in range(count)]


def diagnostics(
    g: WeightedGraph,
    g_rewired: WeightedGraph,
    cuts: Mapping[str, Sequence[int]] | Sequence[Sequence[int]],
) -> DiagnosticsReport:
    """
    Compares Kirchhoff index, top spectrum and cut conductance before and after
    reweighting.

    Args:
        g: Original graph.
        g_rewired: Reweighted graph on the same nodes, entrywise >= g.
        cuts: Node subsets to report conductance for, either a list or a
            mapping from cut id to subset.

    Raises:
        GraphError: If the node sets differ, the rewired graph is weaker
            somewhere, or either graph is disconnected.
    """
    if g.n != g_rewired.n:
        raise GraphError(f"node sets differ: {g.n} vs {g_rewired.n}")
    if g.n < 2:
        raise GraphError("diagnostics need at least two nodes")
    if np.any(g_rewired.weights < g.weights - 1e-12):
        raise GraphError("rewired graph must dominate the original entrywise")

    if not isinstance(cuts, Mapping):
        cuts = {f"cut-{index}": subset for index, subset in enumerate(cuts)}

    before = spectrum(laplacian(g))
    after = spectrum(laplacian(g_rewired))
    kirchhoff_before = scaled_kirchhoff(laplacian(g))
    kirchhoff_after = scaled_kirchhoff(laplacian(g_rewired))

    pairs = []
    cut_sets = {}
    for cut_id, subset in cuts.items():
        members = sorted(int(node) for node in subset)
        pairs.append((cut_id, cut_conductance(g, members), cut_conductance(g_rewired, members)))
        cut_sets[cut_id] = members

    conductance_ratio = (
        float(np.mean([phi / phi_new for _, phi, phi_new in pairs])) if pairs else float("nan")
    )
    ratios = {
        "kirchhoff": 100.0 * kirchhoff_after / kirchhoff_before,
        "lambda_top": 100.0 * before[-2] / after[-2],
        "conductance": 100.0 * conductance_ratio,
    }
    logging.info(
        f"Rewiring diagnostics: Kirchhoff {ratios['kirchhoff']:.2f}%, "
        f"lambda_(n-1) {ratios['lambda_top']:.2f}%, conductance {ratios['conductance']:.2f}%"
    )

    return DiagnosticsReport(
        kirchhoff_before=kirchhoff_before,
        kirchhoff_after=kirchhoff_after,
        lambda_top_before=float(before[-2]),
        lambda_top_after=float(after[-2]),
        fiedler_before=float(before[1]),
        fiedler_after=float(after[1]),
        conductance_pairs=pairs,
        ratios=ratios,
        cut_sets=cut_sets,
    )


def save_graph_csv(g: WeightedGraph, path: Path) -> None:
    """Writes the edge list as CSV with header i,j,w (0-based ids, i < j)."""
    rows, cols = np.nonzero(np.triu(g.weights, k=1))
    frame = pd.DataFrame({"i": rows, "j": cols, "w": g.weights[rows, cols]})
    frame.to_csv(path, index=False, lineterminator="\n")


def load_graph_csv(path: Path, n: int | None = None) -> WeightedGraph:
    """
    Reads an edge-list CSV written by `save_graph_csv`.

    Args:
        path: CSV file with columns i, j, w.
        n: Node count; defaults to the largest node id plus one.
    """
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != ["i", "j", "w"]:
        raise GraphError(f"{path}: expected header i,j,w, got {','.join(frame.columns)}")

    i = frame["i"].to_numpy(dtype=int)
    j = frame["j"].to_numpy(dtype=int)
    w = frame["w"].to_numpy(dtype=float)
    if n is None:
        n = int(max(i.max(initial=-1), j.max(initial=-1))) + 1
    if np.any(i == j):
        raise GraphError(f"{path}: self-loop in edge list")
    if np.any((i < 0) | (j < 0) | (i >= n) | (j >= n)):
        raise GraphError(f"{path}: node id outside 0..{n - 1}")

    weights = np.zeros((n, n))
    weights[i, j] = w
    weights[j, i] = w
    return WeightedGraph(weights)
