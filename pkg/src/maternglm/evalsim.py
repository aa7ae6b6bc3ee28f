"""Synthetic data, cross-validated predictive scores and a conjugate Gibbs sampler."""

from dataclasses import dataclass, field
import math

import numpy as np
import scipy.linalg as sla
from scipy.stats import norm

from .glm import Dataset, ar_process_variances, noise_quadratics, precompute_lagged, simulate_ar_noise
from .krylov import DEFAULT_TOL, DENSE_LIMIT, sample_posterior
from .lattice import graph_laplacian, n_components
from .posterior import rbmc_marginal_cov
from .priors import SpatialPrior, sample_prior, tau2_kappa2_from


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def boxcar_design(T, n_conditions, block=10, intercept=True):
    """Alternating task/rest blocks cycling through the conditions, plus an intercept column."""
    X = np.zeros((T, n_conditions))
    period = 2 * block * n_conditions
    for t in range(T):
        phase = t % period
        c, r = divmod(phase, 2 * block)
        if r < block:
            X[t, c] = 1.0
    if intercept:
        X = np.column_stack([X, np.ones(T)])
    return X


@dataclass(frozen=True)
class Condition:
    """True activity field: an AM2 (or M2 when hx = hy = 1) field with given std and range.

    ``rho_mm`` is converted to lattice units with the (isotropic) voxel size.
    """

    sigma: float
    rho_mm: float
    hx: float = 1.0
    hy: float = 1.0


@dataclass(frozen=True, eq=False)
class SimulationSpec:
    lattice: object
    conditions: tuple
    T: int = 100
    noise_sd: float = 2.0
    ar: tuple = (0.3,)
    intercept: float = 100.0
    block: int = 10
    seed: int = 0
    noise: bool = True

    def __post_init__(self):
        if not self.conditions:
            raise EvalError("at least one condition is required")


@dataclass
class SimulatedData:
    dataset: Dataset
    W: np.ndarray        # (K, N) true coefficients
    lam: np.ndarray      # (N,) innovation precisions
    A: np.ndarray        # (P, N)
    priors: tuple        # true activity priors


def condition_prior(cond, lattice):
    vox = lattice.voxel_size[0]
    tau2, kappa2 = tau2_kappa2_from(cond.sigma, cond.rho_mm / vox)
    kind = "AM2" if (cond.hx, cond.hy) != (1.0, 1.0) else "M2"
    return SpatialPrior(kind, lattice, tau2=tau2, kappa2=kappa2, hx=cond.hx, hy=cond.hy)


def simulate_dataset(spec):
    """Draw activity fields and AR noise; Y = X W + E."""
    lat = spec.lattice
    N, C = lat.N, len(spec.conditions)
    ss = np.random.SeedSequence(spec.seed)
    s_fields, s_noise = ss.spawn(2)
    X = boxcar_design(spec.T, C, spec.block)
    priors = tuple(condition_prior(c, lat) for c in spec.conditions)
    rngs = [np.random.default_rng(s) for s in s_fields.spawn(C)]
    W = np.vstack([sample_prior(p, rng=r) for p, r in zip(priors, rngs)] + [np.full(N, spec.intercept)])
    a = np.asarray(spec.ar, dtype=np.float64)
    A = np.repeat(a[:, None], N, axis=1)
    # innovation precision giving the requested marginal noise std
    unit_var = ar_process_variances(a[:, None], np.ones(1))[0]
    lam = np.full(N, unit_var / spec.noise_sd**2)
    Y = X @ W
    if spec.noise:
        Y = Y + simulate_ar_noise(np.random.default_rng(s_noise), spec.T, lam, A)
    ds = Dataset(Y, X, lat, activity=tuple(range(C)))
    return SimulatedData(ds, W, lam, A, priors)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CvPlan:
    leave_out: float = 0.9
    n_splits: int = 50
    seed: int = 0
    n_rbmc: int = 100

    def __post_init__(self):
        if not 0 < self.leave_out < 1:
            raise EvalError("leave_out must lie strictly between 0 and 1")

    def splits(self, N):
        rng = np.random.default_rng(self.seed)
        n_out = int(round(self.leave_out * N))
        return [np.sort(rng.choice(N, size=n_out, replace=False)) for _ in range(self.n_splits)]


def _nuisance_refit(Xn, R, A, lam, P, tau2=1e-12):
    """Per-voxel AR-prewhitened least squares of R on the nuisance columns."""
    st = precompute_lagged(Xn, R, P)
    _, q, blocks = noise_quadratics(st, A)
    k = Xn.shape[1]
    lhs = blocks * lam[:, None, None] + tau2 * np.eye(k)
    rhs = (q * lam[None, :]).T[..., None]
    return np.linalg.solve(lhs, rhs)[..., 0].T  # (Kn, |D|)


def cv_errors(fit, dataset, left_out, tol=DEFAULT_TOL, return_system=False):
    """Cross-validation error series E (T, |D|) for the left-out voxels ``D``.

    The activity coefficients of D are predicted from the other voxels by
    zeroing their likelihood blocks; nuisance coefficients are then refit per
    voxel on the residual. An empty D gives the in-sample errors.
    """
    D = np.asarray(left_out, dtype=np.int64)
    act, nui = list(dataset.activity), list(dataset.nuisance)
    X, Y = dataset.X, dataset.Y
    system = fit.system()
    if D.size == 0:
        E = Y - X @ fit.mean
        return (E, system) if return_system else E
    sysD = system.with_left_out(D)
    M = sysD.solve(sysD.b, tol=tol, x0=fit.mean)
    R = Y[:, D] - X[:, act] @ M[act][:, D]
    if nui:
        Wn = _nuisance_refit(X[:, nui], R, fit.A[:, D], fit.lam[D], fit.A.shape[0])
        E = R - X[:, nui] @ Wn
    else:
        E = R
    return (E, sysD, M) if return_system else E


def predictive_variance(fit, dataset, left_out, sysD, rng, n_rbmc=100, tol=DEFAULT_TOL, mean=None):
    """Predictive variance (T, |D|) of the CV errors.

    AR stationary variance plus x_act,t^T Var(W_act[:, n] | Y_-D) x_act,t with
    the activity covariance from RBMC on the zeroed system.
    """
    D = np.asarray(left_out, dtype=np.int64)
    act = list(dataset.activity)
    gamma0 = ar_process_variances(fit.A[:, D], fit.lam[D])
    draws = sample_posterior(sysD, rng, n_rbmc, tol=tol)
    if mean is None:
        mean = sysD.solve(sysD.b, tol=tol)
    cov = rbmc_marginal_cov(sysD, draws, mean=mean)[D][:, act][:, :, act]
    Xa = dataset.X[:, act]
    return gamma0[None, :] + np.einsum("ta,nab,tb->tn", Xa, cov, Xa)


@dataclass
class ScoreReport:
    MAE: float
    RMSE: float
    CRPS: float
    IGN: float
    INT: float

    def as_dict(self):
        return {"MAE": self.MAE, "RMSE": self.RMSE, "CRPS": self.CRPS, "IGN": self.IGN, "INT": self.INT}


def crps_gaussian(x, sigma, mu=0.0):
    z = (x - mu) / sigma
    return sigma * (z * (2 * norm.cdf(z) - 1) + 2 * norm.pdf(z) - 1 / math.sqrt(math.pi))


def ign_gaussian(x, sigma, mu=0.0):
    z = (x - mu) / sigma
    return -(norm.logpdf(z) - np.log(sigma))


def int_gaussian(x, sigma, mu=0.0, u=0.05):
    a = norm.ppf(1 - u / 2)
    lo, hi = mu - a * sigma, mu + a * sigma
    return 2 * a * sigma + (2 / u) * ((lo - x) * (x < lo) + (x - hi) * (x > hi))


def proper_scores(errors, variances, u=0.05):
    """Mean MAE, RMSE, CRPS, IGN and INT (all smaller-is-better) for N(0, variance) predictives."""
    x = np.asarray(errors, dtype=np.float64)
    var = np.broadcast_to(np.asarray(variances, dtype=np.float64), x.shape)
    if np.any(var <= 0):
        raise EvalError("predictive variances must be positive")
    s = np.sqrt(var)
    return ScoreReport(
        MAE=float(np.mean(np.abs(x))),
        RMSE=float(np.sqrt(np.mean(x**2))),
        CRPS=float(np.mean(crps_gaussian(x, s))),
        IGN=float(np.mean(ign_gaussian(x, s))),
        INT=float(np.mean(int_gaussian(x, s, u=u))),
    )


def cv_scores(fit, dataset, plan, splits=None, workers=1):
    """One :class:`ScoreReport` per split of ``plan``."""
    out = []
    splits = plan.splits(dataset.N) if splits is None else splits
    ss = np.random.SeedSequence(plan.seed).spawn(len(splits))
    for D, s in zip(splits, ss):
        E, sysD, M = cv_errors(fit, dataset, D, return_system=True)
        var = predictive_variance(fit, dataset, D, sysD, np.random.default_rng(s), plan.n_rbmc, mean=M)
        out.append(proper_scores(E, var))
    return out


# ---------------------------------------------------------------------------
# Gibbs oracle
# ---------------------------------------------------------------------------

@dataclass
class GibbsResult:
    mean: np.ndarray            # Rao-Blackwellized E(W | Y), (K, N)
    sd: np.ndarray              # marginal posterior std of W, (K, N)
    tau2: np.ndarray            # chain of the activity precision, (n_keep,)
    lam: np.ndarray             # chain mean of lam, (N,)
    extra: dict = field(default_factory=dict)


def gibbs_oracle(dataset, q_scale=10.0, q_shape=0.1, u_scale=10.0, u_shape=0.1,
                 n_iter=3000, burn_in=500, seed=0, nuisance_tau2=1e-12, tau2_init=1.0):
    """Blocked Gibbs sampler for an ICAR1 activity prior with a Gamma(scale, shape) tau2 prior.

    White noise (P = 0); lam_n ~ Gamma(u_scale, u_shape); nuisance columns get a
    fixed GS prior with precision ``nuisance_tau2``. The coefficient block is
    drawn with a dense Cholesky factor, so K N is limited.
    """
    lat = dataset.lattice
    X, Y = dataset.X, dataset.Y
    T, K = X.shape
    N = dataset.N
    if K * N > DENSE_LIMIT:
        raise EvalError(f"Gibbs oracle limited to K*N <= {DENSE_LIMIT}")
    if len(dataset.activity) != 1:
        raise EvalError("Gibbs oracle supports a single activity regressor")
    ka = dataset.activity[0]
    G = graph_laplacian(lat).toarray()
    rank = N - n_components(lat)
    rng = np.random.default_rng(seed)
    XtX, XtY = X.T @ X, X.T @ Y
    tau2 = tau2_init
    lam = np.ones(N)
    W = np.zeros((K, N))
    keep_tau, mean_acc, sq_acc, lam_acc = [], np.zeros((K, N)), np.zeros((K, N)), np.zeros(N)
    prior_diag = np.full(K, nuisance_tau2)

    for it in range(n_iter):
        # W | tau2, lam
        Q = np.kron(np.diag(prior_diag), np.eye(N))
        Q[ka * N:(ka + 1) * N, ka * N:(ka + 1) * N] = tau2 * G
        idx = np.arange(N)
        for a in range(K):
            for b in range(K):
                Q[a * N + idx, b * N + idx] += lam * XtX[a, b]
        rhs = (XtY * lam).ravel()
        L = np.linalg.cholesky(Q)
        mu = sla.cho_solve((L, True), rhs)
        W = (mu + sla.solve_triangular(L.T, rng.standard_normal(K * N), lower=False)).reshape(K, N)
        if it >= burn_in:
            mean_acc += mu.reshape(K, N)
            sq_acc += W**2
        # tau2 | W
        wa = W[ka]
        tau2 = rng.gamma(q_shape + 0.5 * rank, 1.0 / (1.0 / q_scale + 0.5 * wa @ G @ wa))
        # lam | W
        resid = np.sum((Y - X @ W) ** 2, axis=0)
        lam = rng.gamma(u_shape + 0.5 * T, 1.0 / (1.0 / u_scale + 0.5 * resid))
        if it >= burn_in:
            keep_tau.append(tau2)
            lam_acc += lam
    n_keep = n_iter - burn_in
    mean = mean_acc / n_keep
    sd = np.sqrt(np.maximum(sq_acc / n_keep - mean**2, 0.0))
    return GibbsResult(mean, sd, np.array(keep_tau), lam_acc / n_keep)
