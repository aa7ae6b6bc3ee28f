"""Summaries of the conditional posterior N(Qt^-1 b, Qt^-1) of the coefficients."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import _kernels
from .krylov import DEFAULT_TOL, sample_posterior


class PosteriorError(ValueError):
    pass


def posterior_mean(system, tol=DEFAULT_TOL, x0=None):
    """Posterior mean (K, N) by PCG."""
    return system.solve(system.b, tol=tol, x0=x0)


def conditional_means(system, draws):
    """E(W[:, n] | W at all other voxels) for every draw, shape (K, N, m).

    Uses mu_n|rest = B_n^-1 (b_n - (Qt x)_n + B_n x_n), where B_n is the
    voxel's K x K diagonal block.
    """
    Qx = system.apply(draws)
    Bx = _kernels.block_apply(system.voxel_blocks(), draws)
    rhs = system.b[..., None] - Qx + Bx
    return _kernels.block_apply(system.voxel_block_inverses(), rhs)


def rbmc_marginal_cov(system, draws, mean=None):
    """Rao-Blackwellized estimate of every voxel's K x K marginal covariance.

    Parameters
    ----------
    system : PosteriorSystem
    draws : ndarray (K, N, m)
        Posterior samples, e.g. from :func:`~maternglm.krylov.sample_posterior`.
    mean : ndarray (K, N), optional
        Exact posterior mean; when given the spread of the conditional means is
        measured around it (unbiased), otherwise around their sample mean.

    Returns
    -------
    ndarray (N, K, K)
        Inverse diagonal block plus the covariance of the conditional means.
    """
    m = draws.shape[-1]
    if m < 2 and mean is None:
        raise PosteriorError("need at least two draws without a known mean")
    cm = conditional_means(system, draws)
    if mean is None:
        dev = cm - cm.mean(axis=-1, keepdims=True)
        denom = m - 1
    else:
        dev = cm - mean[..., None]
        denom = m
    term2 = np.einsum("anj,bnj->nab", dev, dev) / denom
    return system.voxel_block_inverses() + term2


@dataclass
class PosteriorSummary:
    mean: np.ndarray          # (K, N)
    cov: np.ndarray           # (N, K, K)
    n_rbmc: int


def summarize(system, rng, n_rbmc=100, tol=DEFAULT_TOL, workers=1, mean=None):
    """Posterior mean and RBMC marginal covariances."""
    mu = posterior_mean(system, tol=tol) if mean is None else mean
    draws = sample_posterior(system, rng, n_rbmc, tol=tol, workers=workers)
    return PosteriorSummary(mu, rbmc_marginal_cov(system, draws, mean=mu), n_rbmc)


def contrast_moments(mean, cov, c):
    """c^T W[:, n] and c^T Sigma_n c for contrast ``c`` (K,)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (mean.shape[0],):
        raise PosteriorError(f"contrast must have length K={mean.shape[0]}")
    return c @ mean, np.einsum("a,nab,b->n", c, cov, c)


def compute_ppm(mean, cov, c, gamma):
    """Marginal posterior probability that c^T W[:, n] exceeds ``gamma``."""
    mu, var = contrast_moments(mean, cov, c)
    if np.any(var <= 0):
        raise PosteriorError("contrast variance must be positive at every voxel")
    return norm.sf((gamma - mu) / np.sqrt(var))
