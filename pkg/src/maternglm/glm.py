"""Voxelwise linear model with AR(P) noise: lagged sufficient statistics and the
conditional posterior of the regression coefficients.

Arrays follow a (K, N) or voxel-major (N, K, K) layout. For voxel n with AR
coefficients a and coefficients w, the prewhitened residual sum of squares is

    l_n(w) = c_n - 2 q_n^T w + w^T Qt_n w

with c_n, q_n, Qt_n quadratic in a and computed without touching the time axis.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels


class GLMError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations ``Y`` (T, N) on ``lattice`` with design ``X`` (T, K).

    ``activity`` lists the design columns that receive spatial priors; the
    remaining columns are nuisance regressors.
    """

    Y: np.ndarray
    X: np.ndarray
    lattice: object
    activity: tuple = (0,)

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=np.float64)
        X = np.asarray(self.X, dtype=np.float64)
        if Y.ndim != 2 or X.ndim != 2:
            raise GLMError("Y must be (T, N) and X must be (T, K)")
        if Y.shape[0] != X.shape[0]:
            raise GLMError(f"Y has {Y.shape[0]} time points but X has {X.shape[0]} rows")
        if Y.shape[1] != self.lattice.N:
            raise GLMError(f"Y has {Y.shape[1]} voxels but the lattice has {self.lattice.N}")
        act = tuple(int(k) for k in self.activity)
        if len(set(act)) != len(act) or any(k < 0 or k >= X.shape[1] for k in act):
            raise GLMError(f"activity indices {act} invalid for K={X.shape[1]}")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "activity", act)

    @property
    def T(self):
        return self.Y.shape[0]

    @property
    def N(self):
        return self.Y.shape[1]

    @property
    def K(self):
        return self.X.shape[1]

    @property
    def nuisance(self):
        return tuple(k for k in range(self.K) if k not in self.activity)

    @property
    def global_mean(self):
        return float(self.Y.mean())


@dataclass(frozen=True, eq=False)
class LaggedStats:
    """Sufficient statistics over the usable rows t = P..T-1.

    With ``Yu = Y[P:]``, ``Xu = X[P:]``, lagged data ``d_p = Y[P-p:T-p]`` and
    lagged design ``Xl_p = X[P-p:T-p]``:

    ``xtx`` (K,K) = Xu^T Xu, ``xty`` (K,N) = Xu^T Yu, ``yty`` (N,),
    ``r`` (P,K,K) with r[p] = Xu^T Xl_p, ``s`` (P,K,K,P) with
    s[p,:,:,q] = Xl_p^T Xl_q, ``ytd`` (P,N) = Yu^T d_p, ``dd`` (P,P,N) = d_p^T d_q,
    ``B`` (P,K,N) = Xu^T d_p + Xl_p^T Yu and ``Dx`` (P,K,P,N) = Xl_p^T d_q.
    """

    P: int
    T_eff: int
    xtx: np.ndarray
    xty: np.ndarray
    yty: np.ndarray
    r: np.ndarray
    s: np.ndarray
    ytd: np.ndarray
    dd: np.ndarray
    B: np.ndarray
    Dx: np.ndarray

    @property
    def K(self):
        return self.xtx.shape[0]

    @property
    def N(self):
        return self.yty.shape[0]

    def subset(self, voxels):
        """Statistics restricted to a subset of voxels (shared parts kept)."""
        v = np.asarray(voxels)
        return LaggedStats(self.P, self.T_eff, self.xtx, self.xty[:, v], self.yty[v], self.r, self.s,
                           self.ytd[:, v], self.dd[..., v], self.B[..., v], self.Dx[..., v])


def precompute_lagged(X, Y, P):
    """Compute :class:`LaggedStats` for AR order ``P`` (one pass over time)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    T, K = X.shape
    if P < 0 or P >= T:
        raise GLMError(f"AR order P={P} must satisfy 0 <= P < T={T}")
    N = Y.shape[1]
    Yu, Xu = Y[P:], X[P:]
    Xl = np.stack([X[P - p - 1:T - p - 1] for p in range(P)]) if P else np.zeros((0, T - P, K))
    d = np.stack([Y[P - p - 1:T - p - 1] for p in range(P)]) if P else np.zeros((0, T - P, N))
    xtx = Xu.T @ Xu
    xty = Xu.T @ Yu
    yty = np.einsum("tn,tn->n", Yu, Yu)
    r = np.einsum("ta,ptb->pab", Xu, Xl)
    s = np.einsum("pta,qtb->pabq", Xl, Xl)
    ytd = np.einsum("tn,ptn->pn", Yu, d)
    dd = np.einsum("ptn,qtn->pqn", d, d)
    B = np.einsum("ta,ptn->pan", Xu, d) + np.einsum("pta,tn->pan", Xl, Yu)
    Dx = np.einsum("pta,qtn->paqn", Xl, d)
    return LaggedStats(P, T - P, xtx, xty, yty, np.ascontiguousarray(r), np.ascontiguousarray(s),
                       ytd, dd, B, Dx)


def _coef(stats, A):
    A = np.asarray(A, dtype=np.float64)
    if stats.P == 0:
        return np.zeros((0, stats.N))
    A = A.reshape(stats.P, -1)
    if A.shape[1] != stats.N:
        raise GLMError("A must have one column per voxel")
    return A


def noise_quadratics(stats, A):
    """(c, q, blocks) of the prewhitened residual form for AR coefficients ``A`` (P, N).

    ``c`` (N,), ``q`` (K, N), ``blocks`` (N, K, K); none is scaled by lambda.
    """
    A = _coef(stats, A)
    c = stats.yty - 2.0 * np.einsum("pn,pn->n", A, stats.ytd) + np.einsum("pn,pqn,qn->n", A, stats.dd, A)
    q = stats.xty - np.einsum("pn,pkn->kn", A, stats.B) + np.einsum("pn,pkqn,qn->kn", A, stats.Dx, A)
    blocks = _kernels.assemble_blocks(stats.xtx, stats.r, stats.s, A)
    return c, q, np.ascontiguousarray(blocks)


def noise_quadratic_derivatives(stats, A):
    """Derivatives of (c, q, blocks) with respect to each AR coefficient.

    Returns ``dc`` (P, N), ``dq`` (P, K, N), ``dblocks`` (P, N, K, K).
    """
    A = _coef(stats, A)
    dc = -2.0 * stats.ytd + 2.0 * np.einsum("pqn,qn->pn", stats.dd, A)
    dq = -stats.B + np.einsum("pkqn,qn->pkn", stats.Dx, A) + np.einsum("qkpn,qn->pkn", stats.Dx, A)
    rr = stats.r + np.transpose(stats.r, (0, 2, 1))
    ss = np.einsum("pabq,qn->pnab", stats.s, A) + np.einsum("qabp,qn->pnab", stats.s, A)
    dblocks = ss - rr[:, None]
    return dc, dq, dblocks


def residual_form(c, q, blocks, W):
    """l_n(W[:, n]) for every voxel, given the quadratic parts."""
    return c - 2.0 * np.einsum("kn,kn->n", q, W) + _kernels.block_quadform(W, blocks, W)


def loglik_term(stats, W, A):
    """Prewhitened residual sum of squares l_n for every voxel (N,)."""
    c, q, blocks = noise_quadratics(stats, A)
    return residual_form(c, q, blocks, np.asarray(W, dtype=np.float64))


def loglik_term_naive(X, Y, W, A):
    """Reference O(T) computation of l_n by explicit prewhitening."""
    X, Y, W = (np.asarray(a, dtype=np.float64) for a in (X, Y, W))
    A = np.asarray(A, dtype=np.float64).reshape(-1, Y.shape[1])
    P = A.shape[0]
    E = Y - X @ W
    T = E.shape[0]
    Et = E[P:].copy()
    for p in range(P):
        Et -= A[p] * E[P - p - 1:T - p - 1]
    return np.sum(Et**2, axis=0)


def log_likelihood(stats, W, lam, A):
    """Gaussian log-likelihood of the usable rows, summed over voxels."""
    l = loglik_term(stats, W, A)
    lam = np.asarray(lam, dtype=np.float64)
    return float(np.sum(0.5 * stats.T_eff * np.log(lam / (2 * np.pi)) - 0.5 * lam * l))


def assemble_conditional_posterior(stats, lam, A, priors):
    """Conditional Gaussian posterior of W given noise parameters and priors.

    Returns a :class:`~maternglm.krylov.PosteriorSystem` holding the per-voxel
    likelihood blocks lam_n Qt_n, the prior operators and b[k, n] = lam_n q_n[k].
    """
    from .krylov import PosteriorSystem

    if len(priors) != stats.K:
        raise GLMError(f"need one prior per regressor: got {len(priors)} for K={stats.K}")
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (stats.N,):
        raise GLMError(f"lambda must have shape ({stats.N},)")
    _, q, blocks = noise_quadratics(stats, A)
    lik = np.ascontiguousarray(blocks * lam[:, None, None])
    b = q * lam[None, :]
    return PosteriorSystem(lik, b, tuple(priors))


def ar_process_variance(a, lam):
    """Stationary variance gamma_0 of AR(P) noise with innovation precision ``lam``.

    Solves the Yule-Walker equations for the autocovariances.
    """
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    P = a.shape[0]
    if P == 0:
        return 1.0 / lam
    roots = np.roots(np.concatenate([[1.0], -a]))
    if np.any(np.abs(roots) >= 1.0):
        raise GLMError(f"AR coefficients {a} are not stationary")
    M = np.eye(P + 1)
    for k in range(P + 1):
        for p in range(1, P + 1):
            M[k, abs(k - p)] -= a[p - 1]
    rhs = np.zeros(P + 1)
    rhs[0] = 1.0 / lam
    return float(np.linalg.solve(M, rhs)[0])


def ar_process_variances(A, lam):
    """:func:`ar_process_variance` for every voxel; ``A`` (P, N), ``lam`` (N,)."""
    A = np.asarray(A, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if A.shape[0] == 0:
        return 1.0 / lam
    if A.shape[0] == 1:
        if np.any(np.abs(A[0]) >= 1):
            raise GLMError("AR(1) coefficient outside (-1, 1)")
        return 1.0 / (lam * (1.0 - A[0] ** 2))
    return np.array([ar_process_variance(A[:, n], lam[n]) for n in range(lam.shape[0])])


def simulate_ar_noise(rng, T, lam, A, burn_in=200):
    """AR(P) noise series (T, N) with innovation precisions ``lam`` and coefficients ``A``."""
    lam = np.asarray(lam, dtype=np.float64)
    N = lam.shape[0]
    A = np.asarray(A, dtype=np.float64).reshape(-1, N)
    P = A.shape[0]
    innov = rng.standard_normal((T + burn_in, N)) / np.sqrt(lam)
    e = np.zeros((T + burn_in, N))
    for t in range(T + burn_in):
        e[t] = innov[t]
        for p in range(min(P, t)):
            e[t] += A[p] * e[t - p - 1]
    return e[burn_in:]
