"""Empirical-Bayes estimation of the spatial and noise hyperparameters.

The target is the log marginal posterior of theta = (spatial coordinates,
log noise precisions lam0, transformed AR coefficients A0):

    L(theta) = sum_n [(T-P)/2 log lam_n - lam_n c_n / 2]
               + sum_k 1/2 log|Q_k|* - 1/2 log|Qt| + 1/2 b^T Qt^-1 b
               + log p(theta)

up to an additive constant, where |Q_k|* is the product of the non-zero
eigenvalues. Gradients need traces of Qt^-1 times derivative matrices, which
are estimated with Rademacher probes (or computed exactly on small problems).
"""

from dataclasses import dataclass, field, replace
import csv
import math

import numpy as np

from .glm import (GLMError, assemble_conditional_posterior, noise_quadratic_derivatives, noise_quadratics,
                  precompute_lagged, residual_form)
from .krylov import (DEFAULT_TOL, DenseKTraces, DenseOracle, HutchinsonKTraces, ProbeStream)
from . import _kernels


class EBError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# reparameterizations
# ---------------------------------------------------------------------------

def lam_to_lam0(lam):
    return np.log(lam)


def lam0_to_lam(lam0):
    return np.exp(lam0)


def A_to_A0(A):
    """A0 = log((1 + A)/2) - log((1 - A)/2), i.e. 2 artanh(A)."""
    A = np.asarray(A, dtype=np.float64)
    return np.log1p(A) - np.log1p(-A)


def A0_to_A(A0):
    return np.tanh(0.5 * np.asarray(A0, dtype=np.float64))


def A_chain(A):
    """dA / dA0."""
    return 0.5 * (1.0 - np.asarray(A) ** 2)


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoisePrior:
    """lam_n ~ Gamma(scale, shape) and each AR coefficient ~ N(0, 1/tau_A2)."""

    lam_scale: float = 10.0
    lam_shape: float = 0.1
    tau_A2: float = 1e-3

    def logpdf(self, lam, A):
        lam0 = np.log(lam)
        from scipy.special import gammaln
        lp = np.sum((self.lam_shape - 1) * lam0 - lam / self.lam_scale
                    - gammaln(self.lam_shape) - self.lam_shape * math.log(self.lam_scale))
        lp += np.sum(-0.5 * self.tau_A2 * A**2 + 0.5 * math.log(self.tau_A2 / (2 * math.pi)))
        return float(lp)


@dataclass(frozen=True)
class OptimizerConfig:
    n_iter: int = 200
    gamma1: float = 0.2
    gamma2: float = 0.9
    eta_mom: float = 0.5
    eta_n: float = 0.001
    eta0: float = 0.9
    decay: float = 0.1
    decay_start: int = 100
    n_polyak: int = 10
    n_probes: int = 50
    n_warmup: int = 5
    trace: str = "hutchinson"
    pcg_tol: float = DEFAULT_TOL
    workers: int = 1
    lam_max: float = 1e12
    A_clip: float = 0.99
    warmup_max_step: float = 1.0

    def __post_init__(self):
        if self.trace not in ("hutchinson", "exact"):
            raise ValueError(f"trace must be 'hutchinson' or 'exact', got {self.trace!r}")
        if self.n_iter < 1 or self.n_polyak < 1 or self.n_probes < 1:
            raise ValueError("n_iter, n_polyak and n_probes must be positive")
        if not (0 <= self.gamma1 < 1 and 0 <= self.gamma2 < 1):
            raise ValueError("averaging weights must lie in [0, 1)")

    def eta(self, j):
        return self.eta0 / (self.decay * max(0, j - self.decay_start) + 1.0)


@dataclass(frozen=True, eq=False)
class HyperState:
    """All hyperparameters in unconstrained coordinates.

    ``spatial`` holds one dict of coordinates per regressor (see
    :meth:`SpatialPrior.coords`); ``lam0`` is (N,) and ``A0`` is (P, N).
    """

    spatial: tuple
    lam0: np.ndarray
    A0: np.ndarray

    @property
    def lam(self):
        return lam0_to_lam(self.lam0)

    @property
    def A(self):
        return A0_to_A(self.A0)

    def with_spatial(self, k, name, value):
        sp = [dict(d) for d in self.spatial]
        sp[k][name] = float(value)
        return replace(self, spatial=tuple(sp))

    def with_noise(self, lam0=None, A0=None):
        return replace(self, lam0=self.lam0 if lam0 is None else np.asarray(lam0, dtype=np.float64),
                       A0=self.A0 if A0 is None else np.asarray(A0, dtype=np.float64))


@dataclass
class Gradient:
    """Gradient of L and the approximate Hessian of the spatial coordinates."""

    spatial: dict            # (k, name) -> gradient
    spatial_hess: dict       # (k, name) -> approximate second derivative
    lam0: np.ndarray
    A0: np.ndarray
    mean: np.ndarray = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class EBModel:
    """Log marginal posterior of the hyperparameters and its derivatives.

    Parameters
    ----------
    stats : LaggedStats
    priors : sequence of SpatialPrior
        Templates; their ``optimize`` tuples select the spatial coordinates and
        their ``hyperpriors`` give log p(theta_s).
    noise_prior : NoisePrior
    """

    def __init__(self, stats, priors, noise_prior=NoisePrior(), preconditioner="block_jacobi"):
        if len(priors) != stats.K:
            raise EBError(f"need {stats.K} priors, got {len(priors)}")
        self.stats = stats
        self.priors = tuple(priors)
        self.noise_prior = noise_prior
        self.preconditioner = preconditioner

    @property
    def spatial_names(self):
        return [(k, c) for k, p in enumerate(self.priors) for c in p.optimize]

    def initial_state(self, lam, A):
        return HyperState(tuple(p.coords() for p in self.priors), lam_to_lam0(np.asarray(lam, dtype=np.float64)),
                          A_to_A0(np.asarray(A, dtype=np.float64).reshape(self.stats.P, self.stats.N)))

    def priors_at(self, state):
        return tuple(p.with_coords(state.spatial[k]) for k, p in enumerate(self.priors))

    def system_at(self, state, priors=None):
        priors = self.priors_at(state) if priors is None else priors
        sys_ = assemble_conditional_posterior(self.stats, state.lam, state.A, priors)
        sys_.preconditioner = self.preconditioner
        return sys_

    # -- objective -----------------------------------------------------------

    def log_posterior_dense(self, state):
        """L(theta) with dense log-determinants (small problems only)."""
        priors = self.priors_at(state)
        system = self.system_at(state, priors)
        oracle = DenseOracle(system)
        M = oracle.mean()
        lam, A = state.lam, state.A
        c, q, blocks = noise_quadratics(self.stats, A)
        # -lam c / 2 + b^T M / 2 rewritten at the mode to avoid cancellation
        L = float(np.sum(0.5 * self.stats.T_eff * np.log(lam) - 0.5 * lam * residual_form(c, q, blocks, M)))
        L -= 0.5 * sum(float(M[k] @ p.apply(M[k])) for k, p in enumerate(priors))
        L += sum(p.half_logdet() for p in priors)
        L -= 0.5 * oracle.logdet
        for p in priors:
            if p.optimize:
                L += p.hyperprior_eval()[0]
        L += self.noise_prior.logpdf(lam, A)
        return L

    # -- gradient --------------------------------------------------------------

    def gradient(self, state, probes=None, iteration=0, n_probes=50, x0=None, tol=DEFAULT_TOL, workers=1):
        """Gradient of L and approximate spatial Hessian.

        With ``probes`` (a :class:`ProbeStream`) traces are Hutchinson
        estimates from ``n_probes`` probes indexed by ``iteration``; with
        ``probes=None`` they are computed exactly from a dense inverse.
        """
        stats = self.stats
        priors = self.priors_at(state)
        system = self.system_at(state, priors)
        K, N, P = stats.K, stats.N, stats.P
        lam, A = state.lam, state.A
        c, q, blocks = noise_quadratics(stats, A)
        dc, dq, dblocks = noise_quadratic_derivatives(stats, A)

        if probes is None:
            oracle = DenseOracle(system)
            M = oracle.mean()
            Sinv = oracle.inverse
            vcov = oracle.voxel_covariances()
            tr_lam = np.einsum("nab,nba->n", vcov, blocks)
            tr_A = np.einsum("nab,pnba->pn", vcov, dblocks)
            eye = np.eye(N)

            def tr_prior(k, op):
                S = Sinv[k * N:(k + 1) * N, k * N:(k + 1) * N]
                return float(np.sum(S * op(eye).T))

            def ktraces(k, prior):
                return DenseKTraces(prior)
        else:
            M = system.solve(system.b, tol=tol, x0=x0)
            V = probes.batch(iteration * n_probes, n_probes, (K, N))
            U = system.solve_many(V, tol=tol, workers=workers)
            tr_lam = _kernels.block_quadform(U, blocks, V) / n_probes
            tr_A = np.stack([_kernels.block_quadform(U, np.ascontiguousarray(dblocks[p]), V) / n_probes
                             for p in range(P)]) if P else np.zeros((0, N))

            def tr_prior(k, op):
                return float(np.sum(U[k] * op(V[k])) / n_probes)

            def ktraces(k, prior):
                return HutchinsonKTraces(prior, V[k])

        g_sp, h_sp = {}, {}
        for k, prior in enumerate(priors):
            if not prior.optimize:
                continue
            _, hp_g, hp_h = prior.hyperprior_eval()
            kt = None
            Mk = M[k]
            for coord in prior.optimize:
                if coord != "tau0" and kt is None:
                    kt = ktraces(k, prior)
                g0, h0 = prior.half_logdet_derivs(coord, kt)
                d1 = lambda v, cc=coord: prior.dQ_apply(cc, v)  # noqa: E731
                d2 = lambda v, cc=coord: prior.d2Q_apply(cc, v)  # noqa: E731
                g_sp[(k, coord)] = g0 - 0.5 * tr_prior(k, d1) - 0.5 * float(Mk @ d1(Mk)) + hp_g[coord]
                h_sp[(k, coord)] = h0 - 0.5 * tr_prior(k, d2) - 0.5 * float(Mk @ d2(Mk)) + hp_h[coord]

        np_ = self.noise_prior
        lres = residual_form(c, q, blocks, M)
        g_lam = lam * (0.5 * stats.T_eff / lam - 0.5 * tr_lam - 0.5 * lres)
        g_lam += (np_.lam_shape - 1.0) - lam / np_.lam_scale
        if P:
            dl = dc - 2.0 * np.einsum("pkn,kn->pn", dq, M) + np.stack(
                [_kernels.block_quadform(M, np.ascontiguousarray(dblocks[p]), M) for p in range(P)])
            g_A = A_chain(A) * (-0.5 * lam * dl - 0.5 * lam * tr_A - np_.tau_A2 * A)
        else:
            g_A = np.zeros((0, N))
        return Gradient(g_sp, h_sp, g_lam, g_A, M)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_noise(X, Y, P, lam_max=1e12, A_clip=0.99):
    """Least-squares pre-estimate of (lam, A) without spatial priors.

    Returns ``lam`` (N,), ``A`` (P, N) and the least-squares coefficients (K, N).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    T, K = X.shape
    if np.linalg.matrix_rank(X) < K:
        raise GLMError("design matrix is rank deficient")
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    E = Y - X @ W
    N = Y.shape[1]
    A = np.zeros((P, N))
    if P:
        lags = np.stack([E[P - p - 1:T - p - 1] for p in range(P)])  # (P, T-P, N)
        G = np.einsum("ptn,qtn->npq", lags, lags)
        h = np.einsum("ptn,tn->np", lags, E[P:])
        ok = np.linalg.det(G) > 1e-300
        A[:, ok] = np.linalg.solve(G[ok], h[ok][..., None])[..., 0].T
        A = np.clip(A, -A_clip, A_clip)
    innov = E[P:].copy()
    for p in range(P):
        innov -= A[p] * E[P - p - 1:T - p - 1]
    var = np.mean(innov**2, axis=0)
    with np.errstate(divide="ignore"):
        lam = np.where(var > 0, 1.0 / np.where(var > 0, var, 1.0), lam_max)
    lam = np.minimum(lam, lam_max)
    return lam, A, W


# ---------------------------------------------------------------------------
# Algorithm 1
# ---------------------------------------------------------------------------

@dataclass
class OptimizerTrace:
    rows: list = field(default_factory=list)

    def add(self, iteration, name, value, grad, step):
        self.rows.append((iteration, name, float(value), float(grad), float(step)))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "coordinate", "value", "gradient", "step"])
            for r in self.rows:
                w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4])])


def algorithm1(s0, z0, grad_fn, config, names=None, trace=None, callback=None):
    """Averaged, momentum-accelerated stochastic Newton/gradient ascent.

    Parameters
    ----------
    s0 : ndarray
        Initial spatial coordinates (Newton steps with momentum).
    z0 : ndarray
        Initial noise coordinates (plain scaled gradient steps).
    grad_fn : callable
        ``grad_fn(s, z, j) -> (G_s, H_s, G_z)`` with ``j`` a call counter.
    config : OptimizerConfig

    Returns
    -------
    s_hat, z_hat : ndarray
        Polyak averages of the last ``config.n_polyak`` iterates.
    """
    s = np.array(s0, dtype=np.float64)
    z = np.array(z0, dtype=np.float64)
    names = names or [f"s{i}" for i in range(s.size)]
    Gs_bar = Hs_bar = Gz_bar = None
    delta = np.zeros_like(s)
    calls = 0

    def averaged(Gs, Hs, Gz):
        nonlocal Gs_bar, Hs_bar, Gz_bar
        g1, g2 = config.gamma1, config.gamma2
        if Gs_bar is None:
            Gs_bar, Hs_bar, Gz_bar = Gs.copy(), Hs.copy(), Gz.copy()
        else:
            Gs_bar = g1 * Gs_bar + (1 - g1) * Gs
            Hs_bar = g2 * Hs_bar + (1 - g2) * Hs
            Gz_bar = g1 * Gz_bar + (1 - g1) * Gz

    def check(j):
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(z))):
            raise EBError(f"non-finite hyperparameters at iteration {j}")

    # warm-up: plain gradient steps with a small rate; spatial steps are clipped
    # because their gradients scale with N
    rate = config.eta_n * config.eta(1)
    for w in range(config.n_warmup):
        Gs, Hs, Gz = grad_fn(s, z, calls)
        calls += 1
        averaged(Gs, Hs, Gz)
        step_s = np.clip(rate * Gs_bar, -config.warmup_max_step, config.warmup_max_step)
        s = s + step_s
        z = z + rate * Gz_bar
        check(-w)
        if trace is not None:
            for i, nm in enumerate(names):
                trace.add(-(config.n_warmup - w - 1), nm, s[i], Gs[i], step_s[i])

    window = []
    for j in range(1, config.n_iter + 1):
        Gs, Hs, Gz = grad_fn(s, z, calls)
        calls += 1
        averaged(Gs, Hs, Gz)
        eta = config.eta(j)
        H = np.where(Hs_bar < 0, Hs_bar, -np.abs(Hs_bar))
        H = np.where(H == 0, -1e-300, H)
        delta = config.eta_mom * delta - eta / H * Gs_bar
        s = s + delta
        z = z + config.eta_n * eta * Gz_bar
        check(j)
        if trace is not None:
            for i, nm in enumerate(names):
                trace.add(j, nm, s[i], Gs[i], delta[i])
        if callback is not None:
            callback(j, s, z, Gs, Gz)
        window.append((s.copy(), z.copy()))
        if len(window) > config.n_polyak:
            window.pop(0)
    s_hat = np.mean([w[0] for w in window], axis=0)
    z_hat = np.mean([w[1] for w in window], axis=0)
    return s_hat, z_hat


@dataclass
class FitResult:
    model: EBModel
    state: HyperState
    priors: tuple
    mean: np.ndarray
    trace: OptimizerTrace

    @property
    def lam(self):
        return self.state.lam

    @property
    def A(self):
        return self.state.A

    def system(self):
        return self.model.system_at(self.state, self.priors)


def run_optimizer(model, lam_init, A_init, config=OptimizerConfig(), seed=0):
    """Optimize the hyperparameters of ``model`` from the given noise start.

    Spatial coordinates start at the priors' current values. Returns a
    :class:`FitResult` at the Polyak-averaged estimate.
    """
    state0 = model.initial_state(lam_init, A_init)
    names = model.spatial_names
    N, P = model.stats.N, model.stats.P
    probes = ProbeStream(seed) if config.trace == "hutchinson" else None
    cache = {"M": None}

    def unpack(s, z):
        st = state0
        sp = [dict(d) for d in st.spatial]
        for (k, c), v in zip(names, s):
            sp[k][c] = float(v)
        return HyperState(tuple(sp), z[:N].copy(), z[N:].reshape(P, N).copy())

    def grad_fn(s, z, j):
        st = unpack(s, z)
        g = model.gradient(st, probes=probes, iteration=j, n_probes=config.n_probes, x0=cache["M"],
                           tol=config.pcg_tol, workers=config.workers)
        cache["M"] = g.mean
        Gs = np.array([g.spatial[n] for n in names])
        Hs = np.array([g.spatial_hess[n] for n in names])
        Gz = np.concatenate([g.lam0, g.A0.ravel()])
        if not (np.all(np.isfinite(Gs)) and np.all(np.isfinite(Hs)) and np.all(np.isfinite(Gz))):
            raise EBError(f"non-finite gradient at call {j}")
        return Gs, Hs, Gz

    s0 = np.array([state0.spatial[k][c] for k, c in names])
    z0 = np.concatenate([state0.lam0, state0.A0.ravel()])
    tr = OptimizerTrace()
    labels = [f"k{k}.{c}" for k, c in names]

    def record_noise(j, s, z, Gs, Gz):
        tr.add(j, "lam0.mean", np.mean(z[:N]), np.mean(Gz[:N]), 0.0)
        if P:
            tr.add(j, "A0.mean", np.mean(z[N:]), np.mean(Gz[N:]), 0.0)

    s_hat, z_hat = algorithm1(s0, z0, grad_fn, config, names=labels, trace=tr, callback=record_noise)
    state = unpack(s_hat, z_hat)
    lam = np.minimum(state.lam, config.lam_max)
    state = state.with_noise(lam0=np.log(lam))
    priors = model.priors_at(state)
    system = model.system_at(state, priors)
    mean = system.solve(system.b, tol=config.pcg_tol, x0=cache["M"])
    return FitResult(model, state, priors, mean, tr)


def fit_dataset(dataset, kinds, P=1, config=OptimizerConfig(), seed=0, sigma0_percent=2.0,
                hyperpriors=None, noise_prior=NoisePrior(), preconditioner="block_jacobi", optimize=None):
    """Fit the model with one spatial prior kind per activity regressor.

    Nuisance regressors get the fixed GS prior. ``hyperpriors`` and
    ``optimize`` optionally map an activity index to its hyperprior terms or
    optimized coordinates. ``sigma0`` of the default hyperpriors is
    ``sigma0_percent`` of the global mean signal.
    """
    from .priors import make_prior

    kinds = [kinds] * len(dataset.activity) if isinstance(kinds, str) else list(kinds)
    if len(kinds) != len(dataset.activity):
        raise EBError(f"need one prior kind per activity regressor ({len(dataset.activity)})")
    sigma0 = sigma0_percent / 100.0 * abs(dataset.global_mean)
    hyperpriors = hyperpriors or {}
    optimize = optimize or {}
    priors = []
    for k in range(dataset.K):
        if k in dataset.activity:
            kind = kinds[dataset.activity.index(k)]
            opt = optimize.get(k)
            if kind == "GS" and opt is None:
                opt = ("tau0",)
            priors.append(make_prior(kind, dataset.lattice, hyperpriors=hyperpriors.get(k), optimize=opt,
                                     sigma0=sigma0))
        else:
            priors.append(make_prior("GS", dataset.lattice))
    stats = precompute_lagged(dataset.X, dataset.Y, P)
    lam, A, _ = init_noise(dataset.X, dataset.Y, P, config.lam_max, config.A_clip)
    model = EBModel(stats, priors, noise_prior, preconditioner)
    return run_optimizer(model, lam, A, config, seed)
