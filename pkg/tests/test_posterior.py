import numpy as np
import pytest
from scipy.stats import norm

from maternglm.glm import assemble_conditional_posterior, precompute_lagged
from maternglm.krylov import DenseOracle, sample_posterior
from maternglm.lattice import box_lattice
from maternglm.posterior import (
    PosteriorError, compute_ppm, conditional_means, contrast_moments, posterior_mean, rbmc_marginal_cov, summarize,
)
from maternglm.priors import SpatialPrior


def _system(n=4, seed=0):
    lat = box_lattice(n, n, n)
    rng = np.random.default_rng(seed)
    X = np.column_stack([(np.arange(30) % 10 < 5).astype(float), np.ones(30)])
    Y = rng.standard_normal((30, lat.N)) + 5
    priors = [SpatialPrior("M2", lat, tau2=2.0, kappa2=0.5), SpatialPrior("GS", lat, tau2=1e-12)]
    return assemble_conditional_posterior(precompute_lagged(X, Y, 1), np.full(lat.N, 0.8),
                                          np.full((1, lat.N), 0.3), priors)


def test_mean_matches_dense():
    s = _system(5)
    ref = DenseOracle(s).mean()
    assert np.linalg.norm(posterior_mean(s, tol=1e-11) - ref) / np.linalg.norm(ref) <= 1e-8


def test_conditional_means_match_dense_formula():
    s = _system(3)
    Q = s.matrix().toarray()
    x = np.random.default_rng(1).standard_normal((s.K, s.N, 2))
    got = conditional_means(s, x)
    N = s.N
    for n in (0, 13):
        idx = [n, N + n]
        rest = np.setdiff1d(np.arange(2 * N), idx)
        for j in range(2):
            xv = x[..., j].ravel()
            ref = np.linalg.solve(Q[np.ix_(idx, idx)], s.b.ravel()[idx] - Q[np.ix_(idx, rest)] @ xv[rest])
            assert np.allclose(got[:, n, j], ref, rtol=1e-10)


def test_rbmc_is_unbiased():
    s = _system(3, seed=2)
    exact = DenseOracle(s).voxel_covariances()
    mu = DenseOracle(s).mean()
    rng = np.random.default_rng(3)
    est = np.stack([rbmc_marginal_cov(s, sample_posterior(s, rng, 20), mean=mu) for _ in range(50)])
    m, se = est.mean(axis=0), est.std(axis=0, ddof=1) / np.sqrt(50)
    z = np.abs(m - exact) / np.maximum(se, 1e-15)
    assert np.mean(z <= 3) >= 0.97
    # without the exact mean the sample mean is used
    alt = rbmc_marginal_cov(s, sample_posterior(s, rng, 200))
    assert np.allclose(alt, exact, rtol=0.3)
    with pytest.raises(PosteriorError):
        rbmc_marginal_cov(s, sample_posterior(s, rng, 1))


def test_summarize_shapes_and_symmetry():
    s = _system()
    out = summarize(s, np.random.default_rng(0), n_rbmc=10)
    assert out.mean.shape == (2, s.N) and out.cov.shape == (s.N, 2, 2)
    assert np.allclose(out.cov, np.transpose(out.cov, (0, 2, 1)))
    assert np.all(np.linalg.eigvalsh(out.cov) > 0)


def test_ppm_is_half_at_the_mean_and_monotone():
    rng = np.random.default_rng(4)
    mean = rng.standard_normal((2, 10))
    L = rng.standard_normal((10, 2, 2))
    cov = L @ np.transpose(L, (0, 2, 1)) + 0.1 * np.eye(2)
    c = np.array([1.0, -1.0])
    mu, var = contrast_moments(mean, cov, c)
    assert np.allclose(compute_ppm(mean, cov, c, mu), 0.5)
    assert np.allclose(compute_ppm(mean, cov, c, mu + np.sqrt(var)), norm.sf(1.0))
    p = [compute_ppm(mean, cov, c, g) for g in (-1.0, 0.0, 1.0)]
    assert np.all(p[0] >= p[1]) and np.all(p[1] >= p[2])
    with pytest.raises(PosteriorError):
        contrast_moments(mean, cov, [1.0])
    with pytest.raises(PosteriorError):
        compute_ppm(mean, np.zeros_like(cov), c, 0.0)
