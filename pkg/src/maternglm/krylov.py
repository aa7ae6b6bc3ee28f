"""Matrix-free linear algebra for the conditional posterior precision.

The posterior precision over W (K, N) is

    Qt = P_KN^T blockdiag(lam_n Qt_n) P_KN + blockdiag(Q_1, ..., Q_K)

i.e. per-voxel K x K likelihood blocks coupling regressors plus one spatial
prior per regressor. Vectors are stored as (K, N) arrays (or (K, N, m) for m
right-hand sides); flattening in C order gives the k-major layout.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 2000
DENSE_LIMIT = 6000
PROBE_CHUNK = 10


class PCGError(RuntimeError):
    """Raised when PCG fails to reach the tolerance; carries the final residual."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


# ---------------------------------------------------------------------------
# PCG
# ---------------------------------------------------------------------------

def pcg_solve(apply, b, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, precond=None, x0=None,
              batched=False, return_info=False):
    """Preconditioned conjugate gradients for a symmetric positive definite operator.

    Parameters
    ----------
    apply : callable
        ``apply(x)`` returns the operator times ``x``. It is always called with
        a trailing column axis, shape ``b.shape + (1,)`` or ``b.shape`` if
        ``batched``.
    b : ndarray
        Right-hand side. With ``batched=True`` the last axis indexes independent
        systems, each with its own step lengths and stopping test.
    tol : float
        Relative residual ``||A x - b|| / ||b||`` required for every column.
    precond : callable, optional
        Applies an approximation of the inverse operator.
    x0 : ndarray, optional
        Initial guess (warm start).

    Returns
    -------
    x : ndarray
        Same shape as ``b``. With ``return_info`` also a dict with the
        iteration count and the history of the largest relative residual.
    """
    b = np.asarray(b, dtype=np.float64)
    B = b if batched else b[..., None]
    axes = tuple(range(B.ndim - 1))
    X = np.zeros_like(B) if x0 is None else np.array(x0 if batched else np.asarray(x0)[..., None], dtype=np.float64)
    bnorm = np.sqrt(np.sum(B * B, axis=axes))
    zero = bnorm == 0
    X[..., zero] = 0.0
    bnorm = np.where(zero, 1.0, bnorm)
    M = (lambda r: r) if precond is None else precond

    R = B - apply(X)
    rel = np.sqrt(np.sum(R * R, axis=axes)) / bnorm
    done = zero | (rel <= tol)
    Z = M(R)
    Pd = Z.copy()
    rz = np.sum(R * Z, axis=axes)
    history = [float(rel.max())]
    it = 0
    while not done.all():
        if it >= max_iter:
            raise PCGError(f"PCG did not converge in {max_iter} iterations (relative residual {rel.max():.3e})",
                           float(rel.max()))
        it += 1
        AP = apply(Pd)
        pap = np.sum(Pd * AP, axis=axes)
        if np.any((pap <= 0) & ~done):
            raise PCGError("operator is not positive definite along a search direction", float(rel.max()))
        alpha = np.where(done, 0.0, rz / np.where(done, 1.0, pap))
        X += alpha * Pd
        R -= alpha * AP
        rel = np.where(done, rel, np.sqrt(np.sum(R * R, axis=axes)) / bnorm)
        done = done | (rel <= tol)
        history.append(float(rel.max()))
        Z = M(R)
        rz_new = np.sum(R * Z, axis=axes)
        beta = np.where(done, 0.0, rz_new / np.where(rz == 0, 1.0, rz))
        rz = rz_new
        Pd = Z + beta * Pd
    out = X if batched else X[..., 0]
    if return_info:
        return out, {"iterations": it, "residuals": history}
    return out


def solve_chunked(solve, rhs, chunk=PROBE_CHUNK, workers=1, x0=None):
    """Solve for the columns of ``rhs`` (..., m) in fixed-size chunks.

    Chunk boundaries do not depend on ``workers``, so the result is bitwise
    identical for any number of threads.
    """
    m = rhs.shape[-1]
    starts = list(range(0, m, chunk))

    def one(s):
        sl = slice(s, min(s + chunk, m))
        return solve(rhs[..., sl], None if x0 is None else x0[..., sl])

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, starts))
    else:
        parts = [one(s) for s in starts]
    return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# the posterior operator
# ---------------------------------------------------------------------------

class PosteriorSystem:
    """Qt x = b for the conditional posterior of W (K, N).

    Parameters
    ----------
    lik_blocks : ndarray (N, K, K)
        Per-voxel likelihood precision blocks lam_n Qt_n.
    b : ndarray (K, N)
        Right-hand side lam_n q_n.
    priors : sequence of SpatialPrior
        One prior per regressor, all on the same lattice.
    """

    def __init__(self, lik_blocks, b, priors, preconditioner="block_jacobi"):
        self.lik = np.ascontiguousarray(lik_blocks, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.priors = tuple(priors)
        N, K, _ = self.lik.shape
        if self.b.shape != (K, N) or len(self.priors) != K:
            raise ValueError("inconsistent shapes for likelihood blocks, b and priors")
        if preconditioner not in ("block_jacobi", "jacobi", None):
            raise ValueError(f"unknown preconditioner {preconditioner!r}")
        self.K, self.N = K, N
        self.preconditioner = preconditioner
        self._cache = {}

    @property
    def dim(self):
        return self.K * self.N

    def apply(self, x):
        out = _kernels.block_apply(self.lik, x)
        for k, prior in enumerate(self.priors):
            out[k] += prior.apply(x[k])
        return out

    def prior_diagonals(self):
        if "pdiag" not in self._cache:
            self._cache["pdiag"] = np.stack([p.diagonal() for p in self.priors])
        return self._cache["pdiag"]

    def diagonal(self):
        """Diagonal of Qt as a (K, N) array."""
        return np.einsum("nkk->kn", self.lik) + self.prior_diagonals()

    def voxel_blocks(self):
        """The K x K diagonal block of Qt at every voxel, (N, K, K)."""
        if "vblocks" not in self._cache:
            blk = self.lik.copy()
            idx = np.arange(self.K)
            blk[:, idx, idx] += self.prior_diagonals().T
            self._cache["vblocks"] = blk
        return self._cache["vblocks"]

    def voxel_block_inverses(self):
        if "vinv" not in self._cache:
            self._cache["vinv"] = np.ascontiguousarray(np.linalg.inv(self.voxel_blocks()))
        return self._cache["vinv"]

    def precond(self, kind=None):
        kind = self.preconditioner if kind is None else kind
        if kind is None:
            return None
        if kind == "jacobi":
            inv = 1.0 / self.diagonal()
            return lambda r: r * (inv[..., None] if r.ndim == 3 else inv)
        if kind == "block_jacobi":
            binv = self.voxel_block_inverses()
            return lambda r: _kernels.block_apply(binv, r)
        raise ValueError(f"unknown preconditioner {kind!r}")

    def solve(self, rhs, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, x0=None, precond="default"):
        """Qt^-1 rhs for rhs (K, N) or (K, N, m)."""
        pc = self.precond() if precond == "default" else (None if precond is None else self.precond(precond))
        batched = rhs.ndim == 3
        return pcg_solve(self.apply, rhs, tol=tol, max_iter=max_iter, precond=pc, x0=x0, batched=batched)

    def solve_many(self, rhs, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, workers=1, chunk=PROBE_CHUNK, x0=None):
        """Batched solve of (K, N, m) right-hand sides in fixed chunks."""
        return solve_chunked(lambda r, g: self.solve(r, tol=tol, max_iter=max_iter, x0=g), rhs,
                             chunk=chunk, workers=workers, x0=x0)

    def mean(self, tol=DEFAULT_TOL, x0=None):
        return self.solve(self.b, tol=tol, x0=x0)

    def with_left_out(self, voxels):
        """Copy with the likelihood blocks and b of ``voxels`` set to zero."""
        lik = self.lik.copy()
        b = self.b.copy()
        lik[voxels] = 0.0
        b[:, voxels] = 0.0
        return PosteriorSystem(lik, b, self.priors, self.preconditioner)

    def lik_sqrt(self):
        """Per-voxel L with L L^T = lik block (symmetric eigen square root)."""
        if "lsqrt" not in self._cache:
            w, V = np.linalg.eigh(self.lik)
            self._cache["lsqrt"] = np.ascontiguousarray(V * np.sqrt(np.clip(w, 0.0, None))[:, None, :])
        return self._cache["lsqrt"]

    def matrix(self):
        """Sparse Qt in the k-major layout (oracle and small problems)."""
        K, N = self.K, self.N
        rows, cols, vals = [], [], []
        n = np.arange(N)
        for a in range(K):
            for c in range(K):
                rows.append(a * N + n)
                cols.append(c * N + n)
                vals.append(self.lik[:, a, c])
        L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(K * N, K * N))
        return (L + sp.block_diag([p.matrix() for p in self.priors])).tocsr()


# ---------------------------------------------------------------------------
# probes and trace estimation
# ---------------------------------------------------------------------------

class ProbeStream:
    """Rademacher probe vectors indexed by an integer, reproducible from ``seed``.

    Probe ``j`` is drawn from its own generator seeded by ``(seed, j)``, so any
    subset of probes can be produced independently and in any order.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)

    def probe(self, index, shape):
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(index),))
        rng = np.random.default_rng(ss)
        return rng.integers(0, 2, size=shape, dtype=np.int8).astype(np.float64) * 2.0 - 1.0

    def batch(self, start, count, shape):
        """Probes ``start .. start+count-1`` stacked along a trailing axis."""
        shape = tuple(np.atleast_1d(shape))
        out = np.empty(shape + (count,))
        for j in range(count):
            out[..., j] = self.probe(start + j, shape)
        return out


def hutchinson_trace(solve, T_apply, probes):
    """Estimate tr(Qt^-1 T) from probe columns.

    Parameters
    ----------
    solve : callable
        Applies Qt^-1 to a batch of probe columns (..., m).
    T_apply : callable
        Applies T to a batch of probe columns.
    probes : ndarray (..., m)

    Returns
    -------
    estimate : float
    per_probe : ndarray (m,)
        The individual terms v_j^T Qt^-1 T v_j, for standard errors.
    """
    axes = tuple(range(probes.ndim - 1))
    U = solve(probes)
    per = np.sum(U * T_apply(probes), axis=axes)
    return float(per.mean()), per


class DenseKTraces:
    """Exact traces tr(K^-1 A) and tr(K^-1 A K^-1 B) for a prior's K."""

    def __init__(self, prior):
        self.prior = prior
        self.Kinv = np.linalg.inv(prior.K_matrix().toarray())
        self.eye = np.eye(prior.N)

    def _m(self, op):
        return self.eye if op is None else op(self.eye)

    def tr1(self, A):
        return float(np.sum(self.Kinv * self._m(A).T))

    def tr2(self, A, B):
        left = self.Kinv @ self._m(A)
        right = self.Kinv @ self._m(B)
        return float(np.sum(left * right.T))


class HutchinsonKTraces:
    """Stochastic K-traces from probe columns ``Z`` (N, m) with one sparse LU of K."""

    def __init__(self, prior, Z):
        self.prior = prior
        self.lu = spla.splu(prior.K_matrix().tocsc())
        self.Z = Z
        self.W = self.lu.solve(Z)  # K^-1 z

    def _ap(self, op, v):
        return v if op is None else op(v)

    def tr1(self, A):
        return float(np.mean(np.sum(self.W * self._ap(A, self.Z), axis=0)))

    def tr2(self, A, B):
        inner = self.lu.solve(self._ap(B, self.Z))
        return float(np.mean(np.sum(self.W * self._ap(A, inner), axis=0)))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def perturbed_rhs(system, rng, m):
    """b + sum over parts of (part)^(1/2) z, shape (K, N, m)."""
    K, N = system.K, system.N
    z = rng.standard_normal((K, N, m))
    out = system.b[..., None] + _kernels.block_apply(system.lik_sqrt(), z)
    for k, prior in enumerate(system.priors):
        out[k] += prior.perturbation(rng, m)
    return out


def sample_posterior(system, rng, n_samples=1, tol=DEFAULT_TOL, workers=1, chunk=PROBE_CHUNK):
    """Exact draws from N(Qt^-1 b, Qt^-1) by perturbation and PCG.

    Returns (K, N, n_samples).
    """
    rhs = perturbed_rhs(system, rng, n_samples)
    return system.solve_many(rhs, tol=tol, workers=workers, chunk=chunk)


# ---------------------------------------------------------------------------
# dense oracle
# ---------------------------------------------------------------------------

class DenseOracle:
    """Exact dense quantities of a :class:`PosteriorSystem` for validation."""

    def __init__(self, system):
        if system.dim > DENSE_LIMIT:
            raise ValueError(f"dense oracle limited to {DENSE_LIMIT} unknowns, got {system.dim}")
        self.system = system
        self.matrix = system.matrix().toarray()
        self._chol = sla.cho_factor(self.matrix, lower=True)
        self._inv = None

    @property
    def K(self):
        return self.system.K

    @property
    def N(self):
        return self.system.N

    @property
    def logdet(self):
        return float(2.0 * np.sum(np.log(np.diag(self._chol[0]))))

    @property
    def inverse(self):
        if self._inv is None:
            self._inv = sla.cho_solve(self._chol, np.eye(self.matrix.shape[0]))
        return self._inv

    def solve(self, rhs):
        flat = rhs.reshape(self.K * self.N, -1)
        return sla.cho_solve(self._chol, flat).reshape(rhs.shape)

    def mean(self):
        return self.solve(self.system.b)

    def trace(self, T):
        """tr(Qt^-1 T) for a dense matrix T."""
        return float(np.sum(self.inverse * np.asarray(T).T))

    def block(self, k, l=None):
        """Sigma_{kl}: the (N, N) block of the inverse for regressors k and l."""
        l = k if l is None else l
        N = self.N
        return self.inverse[k * N:(k + 1) * N, l * N:(l + 1) * N]

    def voxel_covariances(self):
        """(N, K, K) marginal covariance of W[:, n] at every voxel."""
        K, N = self.K, self.N
        S = self.inverse.reshape(K, N, K, N)
        n = np.arange(N)
        return S[:, n, :, n]  # advanced indices first: (N, K, K)


def dense_oracle(system):
    return DenseOracle(system)
