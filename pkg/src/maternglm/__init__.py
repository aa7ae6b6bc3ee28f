"""Empirical-Bayes spatial regression on 3D lattices with (an)isotropic Matern GMRF priors."""

from .lattice import MaskedLattice, build_lattice, box_lattice, graph_laplacian, connected_components
from .priors import SpatialPrior, make_prior, sample_prior, sigma_rho, icar_variance_constant
from .glm import Dataset, precompute_lagged, loglik_term, assemble_conditional_posterior, ar_process_variance
from .krylov import PosteriorSystem, pcg_solve, hutchinson_trace, sample_posterior, dense_oracle, ProbeStream
from .eb import EBModel, OptimizerConfig, fit_dataset, init_noise, run_optimizer
from .posterior import posterior_mean, rbmc_marginal_cov, compute_ppm
from .evalsim import simulate_dataset, cv_errors, proper_scores, gibbs_oracle

__version__ = "0.1.0"

__all__ = [
    "MaskedLattice", "build_lattice", "box_lattice", "graph_laplacian", "connected_components",
    "SpatialPrior", "make_prior", "sample_prior", "sigma_rho", "icar_variance_constant",
    "Dataset", "precompute_lagged", "loglik_term", "assemble_conditional_posterior", "ar_process_variance",
    "PosteriorSystem", "pcg_solve", "hutchinson_trace", "sample_posterior", "dense_oracle", "ProbeStream",
    "EBModel", "OptimizerConfig", "fit_dataset", "init_noise", "run_optimizer",
    "posterior_mean", "rbmc_marginal_cov", "compute_ppm",
    "simulate_dataset", "cv_errors", "proper_scores", "gibbs_oracle",
]
