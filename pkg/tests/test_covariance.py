import time

import numpy as np
import pytest
from scipy import linalg

from covariance import (
    BatchCovariance,
    CovarianceError,
    SpatialFactorParams,
    assemble,
    build_kernel_bank,
    colnorm,
    conditional_next_step,
    dump_csv,
    factor_for_loading,
    mixture_correlation,
    mixture_weights,
    nll,
    nll_dense_oracle,
    nll_with_gradient,
    principal_loading,
    spatial_factor,
    spatial_factor_backward,
)
from graph import WeightedGraph, laplacian, rewire


def random_covariance(rng: np.random.Generator, n: int, steps: int, rank: int) -> BatchCovariance:
    bank = build_kernel_bank(steps, 3)
    a = rng.standard_normal((rank, rank))
    return assemble(
        blocks=rng.standard_normal((steps, n, rank)),
        C=mixture_correlation(bank, rng.standard_normal(3)),
        G=a @ a.T / rank + 0.5 * np.eye(rank),
        d=rng.uniform(0.5, 2.0, size=steps * n),
    )


def random_laplacian(rng: np.random.Generator, n: int) -> np.ndarray:
    w = np.triu(rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < 0.4), k=1)
    return laplacian(WeightedGraph(w + w.T))


def random_spatial(rng: np.random.Generator, n: int, rank: int) -> SpatialFactorParams:
    return SpatialFactorParams(
        alpha=float(rng.uniform(1e-3, 1.0)),
        beta=float(rng.uniform(0.0, 3.0)),
        projection=rng.standard_normal((n, rank)),
        kappa0=0.0,
        tau=5.0,
        lam=1.0,
    )


def relative_gap(value: float, oracle: float) -> float:
    return abs(value - oracle) / (1.0 + abs(oracle))


# --- temporal kernels -------------------------------------------------------


def test_kernel_bank_values():
    bank = build_kernel_bank(4, 2, length_scale_step=1.5)
    assert bank.kernels.shape == (2, 4, 4)
    assert bank.kernels[1, 0, 3] == pytest.approx(np.exp(-9 / (2 * 3.0**2)))
    np.testing.assert_array_equal(np.diagonal(bank.kernels, axis1=1, axis2=2), 1.0)


def test_kernel_bank_is_positive_semidefinite():
    for window in (1, 2, 6, 12, 24):
        for components in (1, 4, 8):
            for kernel in build_kernel_bank(window, components).kernels:
                eigenvalues = np.linalg.eigvalsh(kernel)
                assert eigenvalues[0] >= -1e-10 * eigenvalues[-1]


def test_kernel_bank_rejects_bad_sizes():
    with pytest.raises(CovarianceError):
        build_kernel_bank(0, 2)
    with pytest.raises(CovarianceError):
        build_kernel_bank(3, 2, length_scale_step=0.0)


def test_mixture_correlation_is_convex_combination():
    bank = build_kernel_bank(5, 3)
    logits = np.array([0.3, -1.0, 2.0])
    weights = mixture_weights(logits)
    assert weights.sum() == pytest.approx(1.0)

    expected = sum(w * k for w, k in zip(weights, bank.kernels))
    np.testing.assert_allclose(mixture_correlation(bank, logits, nugget=0.0), expected, rtol=1e-14)
    np.testing.assert_allclose(np.diag(mixture_correlation(bank, logits)), 1.0, rtol=1e-14)


def test_mixture_correlation_literal_cases():
    bank = build_kernel_bank(4, 2)
    single = build_kernel_bank(4, 1)
    for logit in (-3.0, 0.0, 7.5):
        np.testing.assert_array_equal(mixture_correlation(single, np.array([logit]), nugget=0.0), single.kernels[0])
    np.testing.assert_allclose(
        mixture_correlation(bank, np.zeros(2), nugget=0.0), 0.5 * (bank.kernels[0] + bank.kernels[1]), rtol=1e-14
    )
    saturated = mixture_correlation(bank, np.array([10.0, -10.0]), nugget=0.0)
    assert np.max(np.abs(saturated - bank.kernels[0])) < 1e-4


def test_mixture_correlation_errors():
    bank = build_kernel_bank(3, 2)
    with pytest.raises(CovarianceError):
        mixture_correlation(bank, np.array([0.0, np.inf]))
    with pytest.raises(CovarianceError):
        mixture_correlation(bank, np.zeros(3))


# --- spatial factor ---------------------------------------------------------


def test_colnorm_rejects_zero_column():
    with pytest.raises(CovarianceError, match="degenerate projection"):
        colnorm(np.array([[1.0, 0.0], [2.0, 0.0]]))


def test_spatial_factor_matches_definition():
    rng = np.random.default_rng(0)
    lap = random_laplacian(rng, 8)
    params = random_spatial(rng, 8, 3)
    G, Q = spatial_factor(lap, params)

    p_hat = params.projection / np.linalg.norm(params.projection, axis=0)
    expected_q = (params.alpha + params.sigma_min) * np.eye(3) + params.beta * p_hat.T @ lap @ p_hat
    np.testing.assert_allclose(Q, expected_q, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(G, np.linalg.inv(expected_q), rtol=1e-9)


def test_spatial_factor_literal_cases():
    rng = np.random.default_rng(3)
    params = random_spatial(rng, 5, 2)
    isotropic = np.eye(2) / (params.alpha + params.sigma_min)

    flat = SpatialFactorParams(alpha=params.alpha, beta=0.0, projection=params.projection, kappa0=0.0, tau=5.0, lam=1.0)
    np.testing.assert_allclose(spatial_factor(random_laplacian(rng, 5), flat)[0], isotropic, rtol=1e-12)
    np.testing.assert_allclose(spatial_factor(np.zeros((5, 5)), params)[0], isotropic, rtol=1e-12)

    w = np.triu(rng.uniform(0.1, 1.0, size=(6, 6)), k=1)
    tuned = SpatialFactorParams(alpha=0.01, beta=1.0, projection=rng.standard_normal((6, 3)), kappa0=0.0, tau=5.0, lam=1.0)
    G, Q = spatial_factor(laplacian(WeightedGraph(w + w.T)), tuned)
    assert np.max(np.abs(G @ Q - np.eye(3))) < 1e-8
    assert np.all(np.linalg.eigvalsh(G) > 0)


def test_spatial_factor_validates_parameters():
    params = random_spatial(np.random.default_rng(1), 4, 2)
    params.alpha = 0.0
    with pytest.raises(CovarianceError):
        spatial_factor(np.zeros((4, 4)), params)


def test_spatial_pipeline_is_positive_definite():
    rng = np.random.default_rng(2)
    for _ in range(500):
        n = int(rng.integers(2, 30))
        rank = int(rng.integers(1, n + 1))
        w = np.triu(rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < 0.5), k=1)
        params = random_spatial(rng, n, rank)
        rewired, _ = rewire(WeightedGraph(w + w.T), float(rng.uniform(-1, 1)), float(rng.uniform(0.5, 10)), float(rng.uniform(0, 3)))
        lap = laplacian(rewired)
        p_hat, _ = colnorm(params.projection)
        reduced = p_hat.T @ lap @ p_hat

        for matrix in (lap, reduced):
            eigenvalues = np.linalg.eigvalsh(0.5 * (matrix + matrix.T))
            assert eigenvalues[0] >= -1e-10 * max(1.0, np.abs(eigenvalues).max())

        G, Q = spatial_factor(lap, params)
        linalg.cholesky(Q, lower=True)
        linalg.cholesky(G, lower=True)


def test_spatial_factor_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    n, rank, eps = 6, 3, 1e-6
    lap = random_laplacian(rng, n)
    params = random_spatial(rng, n, rank)
    weights = rng.standard_normal((rank, rank))

    def objective(p: SpatialFactorParams, lap_: np.ndarray) -> float:
        return float(np.sum(weights * spatial_factor(lap_, p)[0]))

    G, _ = spatial_factor(lap, params)
    grads = spatial_factor_backward(weights, G, lap, params)

    def shifted(**changes) -> SpatialFactorParams:
        return SpatialFactorParams(**{**vars(params), **changes})

    for name in ("alpha", "beta"):
        value = getattr(params, name)
        numeric = (objective(shifted(**{name: value + eps}), lap) - objective(shifted(**{name: value - eps}), lap)) / (2 * eps)
        assert grads[name] == pytest.approx(numeric, rel=1e-5, abs=1e-8)

    for index in np.ndindex(n, rank):
        step = np.zeros((n, rank))
        step[index] = eps
        plus = objective(shifted(projection=params.projection + step), lap)
        minus = objective(shifted(projection=params.projection - step), lap)
        assert grads["projection"][index] == pytest.approx((plus - minus) / (2 * eps), rel=1e-5, abs=1e-8)

    for a, b in [(0, 1), (2, 5), (3, 3)]:
        step = np.zeros((n, n))
        step[a, b] = step[b, a] = eps
        numeric = (objective(params, lap + step) - objective(params, lap - step)) / (2 * eps)
        expected = grads["laplacian"][a, b] + (grads["laplacian"][b, a] if a != b else 0.0)
        assert expected == pytest.approx(numeric, rel=1e-5, abs=1e-8)


# --- batch covariance -------------------------------------------------------


def test_assemble_validates_components():
    rng = np.random.default_rng(4)
    cov = random_covariance(rng, 3, 2, 2)
    with pytest.raises(CovarianceError):
        assemble(cov.blocks, np.eye(3), cov.G, cov.d)
    with pytest.raises(CovarianceError):
        assemble(cov.blocks, cov.C, np.eye(3), cov.d)
    with pytest.raises(CovarianceError):
        assemble(cov.blocks, cov.C, cov.G, cov.d[:-1])
    with pytest.raises(CovarianceError, match="nonpositive"):
        assemble(cov.blocks, cov.C, cov.G, np.where(np.arange(cov.d.size) == 0, 0.0, cov.d))


def test_dense_reconstruction_is_symmetric_positive_definite():
    rng = np.random.default_rng(5)
    for _ in range(20):
        cov = random_covariance(rng, int(rng.integers(1, 8)), int(rng.integers(1, 5)), int(rng.integers(1, 4)))
        dense = cov.dense()
        np.testing.assert_allclose(dense, dense.T, atol=1e-12)
        assert np.linalg.eigvalsh(dense)[0] > 0


def test_sub_window_matches_dense_block():
    cov = random_covariance(np.random.default_rng(6), 4, 5, 2)
    sub = cov.sub_window(1, 4)
    np.testing.assert_allclose(sub.dense(), cov.dense()[4:16, 4:16], rtol=1e-12)


def test_woodbury_factor_solves_and_inverts():
    cov = random_covariance(np.random.default_rng(7), 5, 3, 2)
    factor = cov.factorize()
    dense_inv = np.linalg.inv(cov.dense())
    rhs = np.random.default_rng(8).standard_normal((15, 4))

    np.testing.assert_allclose(factor.solve(rhs), dense_inv @ rhs, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(factor.inverse_diagonal(), np.diag(dense_inv), rtol=1e-9)
    assert factor.logdet == pytest.approx(np.linalg.slogdet(cov.dense())[1], rel=1e-10)


def test_small_instance_matches_dense_oracle():
    rng = np.random.default_rng(9)
    cov = random_covariance(rng, 6, 3, 2)
    eta = rng.standard_normal(18)
    assert relative_gap(nll(cov, eta), nll_dense_oracle(cov, eta)) <= 1e-8


def test_woodbury_matches_dense_oracle_on_random_instances():
    rng = np.random.default_rng(10)
    for _ in range(200):
        n, steps, rank = int(rng.integers(1, 41)), int(rng.integers(1, 7)), int(rng.integers(1, 5))
        cov = random_covariance(rng, n, steps, rank)
        eta = 2.0 * rng.standard_normal(n * steps)
        assert relative_gap(nll(cov, eta), nll_dense_oracle(cov, eta)) <= 1e-8


def test_nll_literal_cases():
    rng = np.random.default_rng(19)
    steps, n, rank = 3, 2, 2
    C = mixture_correlation(build_kernel_bank(steps, 1), np.zeros(1), nugget=0.0)
    eta = rng.standard_normal(steps * n)
    const = 0.5 * steps * n * np.log(2 * np.pi)

    independent = assemble(np.zeros((steps, n, rank)), C, np.eye(rank), np.ones(steps * n))
    assert nll(independent, eta) == pytest.approx(const + 0.5 * eta @ eta, rel=1e-10)

    cov = random_covariance(rng, n, steps, rank)
    _, logdet = np.linalg.slogdet(cov.dense())
    assert nll(cov, np.zeros(steps * n)) == pytest.approx(const + 0.5 * logdet, rel=1e-10)


def test_nll_scalar_factor_by_hand():
    a, b, g, d1, d2 = 0.8, -1.3, 2.0, 0.5, 1.5
    cov = assemble(np.array([[[a], [b]]]), np.ones((1, 1)), np.array([[g]]), np.array([d1, d2]))
    eta = np.array([0.4, -0.9])

    s11, s12, s22 = g * a * a + d1, g * a * b, g * b * b + d2
    det = s11 * s22 - s12**2
    quad = (s22 * eta[0] ** 2 - 2 * s12 * eta[0] * eta[1] + s11 * eta[1] ** 2) / det
    expected = np.log(2 * np.pi) + 0.5 * np.log(det) + 0.5 * quad

    assert nll(cov, eta) == pytest.approx(expected, rel=1e-12)
    assert nll_dense_oracle(cov, eta) == pytest.approx(expected, rel=1e-12)


def test_dense_oracle_enforces_dimension_limit():
    cov = random_covariance(np.random.default_rng(11), 5, 2, 2)
    with pytest.raises(CovarianceError):
        nll_dense_oracle(cov, np.zeros(10), max_dim=8)


@pytest.mark.slow
def test_woodbury_is_faster_than_dense_oracle():
    rng = np.random.default_rng(12)
    cov = random_covariance(rng, 200, 12, 10)
    eta = rng.standard_normal(2400)

    start = time.perf_counter()
    for _ in range(3):
        value = nll(cov, eta)
    woodbury = time.perf_counter() - start

    start = time.perf_counter()
    for _ in range(3):
        oracle = nll_dense_oracle(cov, eta, max_dim=2400)
    dense = time.perf_counter() - start

    assert relative_gap(value, oracle) <= 1e-8
    assert dense >= 5.0 * woodbury


def test_nll_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    eps = 1e-6
    for _ in range(5):
        cov = random_covariance(rng, 4, 3, 2)
        eta = rng.standard_normal(12)
        value, grad = nll_with_gradient(cov, eta)
        assert value == pytest.approx(nll(cov, eta), rel=1e-12)

        def numeric(**changes) -> float:
            plus = {name: part + step for name, (part, step) in changes.items()}
            minus = {name: part - step for name, (part, step) in changes.items()}
            fields = {"blocks": cov.blocks, "C": cov.C, "G": cov.G, "d": cov.d}
            e_plus = plus.pop("eta", eta)
            e_minus = minus.pop("eta", eta)
            return (nll(BatchCovariance(**{**fields, **plus}), e_plus) - nll(BatchCovariance(**{**fields, **minus}), e_minus)) / (2 * eps)

        for index in range(12):
            step = np.zeros(12)
            step[index] = eps
            assert grad.eta[index] == pytest.approx(numeric(eta=(eta, step)), rel=1e-5, abs=1e-8)
            assert grad.d[index] == pytest.approx(numeric(d=(cov.d, step)), rel=1e-5, abs=1e-8)

        for index in np.ndindex(cov.blocks.shape):
            step = np.zeros(cov.blocks.shape)
            step[index] = eps
            assert grad.blocks[index] == pytest.approx(numeric(blocks=(cov.blocks, step)), rel=1e-5, abs=1e-8)

        for name, matrix in (("C", cov.C), ("G", cov.G)):
            analytic = getattr(grad, name)
            for a, b in zip(*np.triu_indices(matrix.shape[0])):
                step = np.zeros(matrix.shape)
                step[a, b] = step[b, a] = eps
                expected = analytic[a, b] + (analytic[b, a] if a != b else 0.0)
                assert expected == pytest.approx(numeric(**{name: (matrix, step)}), rel=1e-5, abs=1e-8)


# --- conditioning -----------------------------------------------------------


def test_conditional_matches_textbook_gaussian_conditioning():
    rng = np.random.default_rng(14)
    n, steps = 4, 3
    cov = random_covariance(rng, n, steps, 2)
    past = rng.standard_normal((steps - 1) * n)

    dense = cov.dense()
    split = (steps - 1) * n
    s11, s12, s22 = dense[:split, :split], dense[:split, split:], dense[split:, split:]
    expected_mean = s12.T @ np.linalg.solve(s11, past)
    expected_cov = s22 - s12.T @ np.linalg.solve(s11, s12)

    for method in ("woodbury", "dense"):
        mean, conditional = conditional_next_step(cov, past, method=method)
        np.testing.assert_allclose(mean, expected_mean, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(conditional, expected_cov, rtol=1e-8, atol=1e-10)


def test_conditional_woodbury_matches_dense_method():
    rng = np.random.default_rng(15)
    for _ in range(20):
        cov = random_covariance(rng, int(rng.integers(1, 10)), int(rng.integers(2, 6)), int(rng.integers(1, 4)))
        past = rng.standard_normal((cov.steps - 1) * cov.nodes)
        mean_w, cov_w = conditional_next_step(cov, past, method="woodbury")
        mean_d, cov_d = conditional_next_step(cov, past, method="dense")
        np.testing.assert_allclose(mean_w, mean_d, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(cov_w, cov_d, rtol=1e-8, atol=1e-10)


def test_conditional_without_history_is_the_marginal():
    cov = random_covariance(np.random.default_rng(16), 3, 1, 2)
    mean, conditional = conditional_next_step(cov, np.zeros(0))
    np.testing.assert_array_equal(mean, np.zeros(3))
    np.testing.assert_allclose(conditional, cov.dense(), rtol=1e-12)


def test_conditional_of_independent_steps_is_the_future_marginal():
    rng = np.random.default_rng(20)
    C = mixture_correlation(build_kernel_bank(3, 2), rng.standard_normal(2))
    d = rng.uniform(0.5, 2.0, size=6)
    cov = assemble(np.zeros((3, 2, 1)), C, np.eye(1), d)
    mean, conditional = conditional_next_step(cov, rng.standard_normal(4))
    np.testing.assert_array_equal(mean, np.zeros(2))
    np.testing.assert_allclose(conditional, np.diag(d[-2:]), rtol=1e-14)


def test_conditional_bivariate_hand_formula():
    C = mixture_correlation(build_kernel_bank(2, 1), np.zeros(1), nugget=0.0)
    # unit marginals with correlation 0.5 exp(-1/2)
    cov = assemble(np.ones((2, 1, 1)), C, np.array([[0.5]]), np.full(2, 0.5))
    rho = 0.5 * np.exp(-0.5)
    mean, conditional = conditional_next_step(cov, np.array([1.7]))
    assert mean[0] == pytest.approx(rho * 1.7, rel=1e-12)
    assert conditional[0, 0] == pytest.approx(1.0 - rho**2, rel=1e-12)


def test_conditional_moments_match_monte_carlo():
    rng = np.random.default_rng(21)
    cov = random_covariance(rng, 2, 2, 1)
    observed = np.array([0.6, -1.1])
    mean, conditional = conditional_next_step(cov, observed)

    count = 100_000
    draws = rng.multivariate_normal(np.zeros(4), cov.dense(), size=count)
    past, future = draws[:, :2], draws[:, 2:]
    coef, *_ = np.linalg.lstsq(past, future, rcond=None)
    residual = future - past @ coef

    mean_band = np.sqrt(observed @ np.linalg.solve(past.T @ past, observed) * np.diag(conditional))
    assert np.all(np.abs(observed @ coef - mean) <= 4.0 * mean_band)
    empirical = np.cov(residual, rowvar=False)
    cov_band = np.sqrt((np.outer(np.diag(conditional), np.diag(conditional)) + conditional**2) / count)
    assert np.all(np.abs(empirical - conditional) <= 4.0 * cov_band)


def test_conditional_errors():
    cov = random_covariance(np.random.default_rng(17), 3, 2, 2)
    with pytest.raises(CovarianceError):
        conditional_next_step(cov, np.zeros(2))
    with pytest.raises(ValueError):
        conditional_next_step(cov, np.zeros(3), method="qr")


# --- data-driven initialisation ---------------------------------------------


def test_principal_loading_with_full_rank_reproduces_the_covariance():
    values = np.random.default_rng(23).standard_normal((50, 3)) @ np.array([[1.0, 0.5, 0.0], [0.0, 1.0, 0.3], [0.0, 0.0, 1.0]])
    loading, residual = principal_loading(values, 3)
    np.testing.assert_allclose(loading @ loading.T, np.cov(values, rowvar=False), atol=1e-12)
    np.testing.assert_allclose(residual, 0.0, atol=1e-12)


def test_principal_loading_keeps_the_top_directions():
    rng = np.random.default_rng(24)
    values = rng.standard_normal((400, 1)) @ np.array([[2.0, 2.0, 2.0, 2.0]]) + 0.5 * rng.standard_normal((400, 4))
    sample = np.cov(values, rowvar=False)
    loading, residual = principal_loading(values, 2)
    eigvals = np.sort(np.linalg.eigvalsh(sample))[::-1]

    np.testing.assert_allclose(np.diag(loading @ loading.T) + residual, np.diag(sample), rtol=1e-12)
    np.testing.assert_allclose(np.sum(loading**2, axis=0), eigvals[:2] - eigvals[2:].mean(), rtol=1e-10)
    assert np.all(residual >= 0)


def test_principal_loading_of_a_single_row_is_empty():
    loading, residual = principal_loading(np.ones((1, 3)), 2)
    assert loading.shape == (3, 2) and not loading.any()
    assert not residual.any()


def test_factor_for_loading_absorbs_the_spatial_factor():
    rng = np.random.default_rng(25)
    loading = rng.standard_normal((5, 3))
    a = rng.standard_normal((3, 3))
    G = a @ a.T + 0.1 * np.eye(3)
    factor = factor_for_loading(loading, G)
    np.testing.assert_allclose(factor @ G @ factor.T, loading @ loading.T, rtol=1e-9, atol=1e-12)

    with pytest.raises(CovarianceError):
        factor_for_loading(loading, -np.eye(3))


def test_dump_csv_writes_dense_matrix(tmp_path):
    matrix = random_covariance(np.random.default_rng(18), 2, 2, 1).dense()
    path = tmp_path / "sigma.csv"
    dump_csv(matrix, path)
    rows = path.read_text().splitlines()
    assert len(rows) == 4
    np.testing.assert_allclose(np.loadtxt(path, delimiter=","), matrix, rtol=1e-15)
