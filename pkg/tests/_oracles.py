"""Dense reference constructions built directly from voxel coordinates.

Nothing here calls the package's operators or solvers; these are the
independent side of the dual-route checks.
"""

import numpy as np


def axis_laplacians(coords):
    """Dense graph Laplacians (Gx, Gy, Gz) of the 6-neighbour lattice on ``coords`` (N, 3)."""
    c = np.asarray(coords, dtype=np.int64)
    diff = c[:, None, :] - c[None, :, :]
    out = []
    for a in range(3):
        others = [b for b in range(3) if b != a]
        adj = (np.abs(diff[..., a]) == 1) & np.all(diff[..., others] == 0, axis=-1)
        adj = adj.astype(float)
        out.append(np.diag(adj.sum(axis=1)) - adj)
    return out


def k_matrix(coords, kappa2, hx=1.0, hy=1.0):
    gx, gy, gz = axis_laplacians(coords)
    return kappa2 * np.eye(len(coords)) + hx * gx + hy * gy + gz / (hx * hy)


def prior_precision(kind, coords, tau2, kappa2=0.0, hx=1.0, hy=1.0):
    n = len(coords)
    if kind == "GS":
        return tau2 * np.eye(n)
    K = k_matrix(coords, kappa2, hx, hy)
    if kind in ("ICAR1", "M1"):
        return tau2 * K
    return tau2 * K @ K


def precision_derivatives(kind, coords, coord, tau2, kappa2, hx=1.0, hy=1.0):
    """First and second derivatives of Q in a log coordinate, by the product rule on dense K."""
    Q = prior_precision(kind, coords, tau2, kappa2, hx, hy)
    if coord == "tau0":
        return Q, Q
    n = len(coords)
    gx, gy, gz = axis_laplacians(coords)
    hz = 1.0 / (hx * hy)
    K = kappa2 * np.eye(n) + hx * gx + hy * gy + hz * gz
    if coord == "kappa0":
        d1 = d2 = kappa2 * np.eye(n)
    elif coord == "h0x":
        d1, d2 = hx * gx - hz * gz, hx * gx + hz * gz
    elif coord == "h0y":
        d1, d2 = hy * gy - hz * gz, hy * gy + hz * gz
    else:
        raise KeyError(coord)
    if kind == "M1":
        return tau2 * d1, tau2 * d2
    return tau2 * (d1 @ K + K @ d1), tau2 * (d2 @ K + 2 * d1 @ d1 + K @ d2)


def half_logdet(Q, nullity=0):
    ev = np.sort(np.linalg.eigvalsh(Q))[nullity:]
    return 0.5 * float(np.sum(np.log(ev)))


def filtered(X, y, a):
    """AR-prewhitened design and data for one voxel with lag coefficients ``a`` (P,)."""
    P = len(a)
    T = len(y)
    Xf = X[P:].copy()
    yf = y[P:].copy()
    for p in range(1, P + 1):
        Xf -= a[p - 1] * X[P - p:T - p]
        yf -= a[p - 1] * y[P - p:T - p]
    return Xf, yf


def dense_posterior(X, Y, lam, A, precisions):
    """Dense Qt (k-major), b, and the per-voxel filtered data."""
    T, K = X.shape
    N = Y.shape[1]
    Qt = np.zeros((K * N, K * N))
    b = np.zeros(K * N)
    per = []
    for n in range(N):
        Xf, yf = filtered(X, Y[:, n], A[:, n])
        per.append((Xf, yf))
        idx = np.arange(K) * N + n
        Qt[np.ix_(idx, idx)] += lam[n] * Xf.T @ Xf
        b[idx] += lam[n] * Xf.T @ yf
    for k, Qk in enumerate(precisions):
        Qt[k * N:(k + 1) * N, k * N:(k + 1) * N] += Qk
    return Qt, b, per


def log_posterior(X, Y, lam, A, precisions, nullities, extra_logp=0.0):
    """Log marginal posterior of the hyperparameters up to an additive constant.

    Evaluated at the conditional mode mu as
    sum_n [(T-P)/2 log lam_n - lam_n/2 |y_n - X_n mu_n|^2] - 1/2 sum_k mu_k^T Q_k mu_k
    + sum_k 1/2 logdet* Q_k - 1/2 logdet Qt + ``extra_logp``.
    """
    T, K = X.shape
    N = Y.shape[1]
    P = A.shape[0]
    Qt, b, per = dense_posterior(X, Y, lam, A, precisions)
    L = np.linalg.cholesky(Qt)
    mu = np.linalg.solve(L.T, np.linalg.solve(L, b))
    M = mu.reshape(K, N)
    out = 0.0
    for n, (Xf, yf) in enumerate(per):
        r = yf - Xf @ M[:, n]
        out += 0.5 * (T - P) * np.log(lam[n]) - 0.5 * lam[n] * r @ r
    for k, Qk in enumerate(precisions):
        out -= 0.5 * M[k] @ Qk @ M[k]
        out += half_logdet(Qk, nullities[k])
    out -= float(np.sum(np.log(np.diag(L))))
    return out + extra_logp


def simulate_ar1(rng, T, N, a, sd):
    """Stationary AR(1) noise with innovation sd ``sd``."""
    e = np.empty((T, N))
    e[0] = rng.standard_normal(N) * sd / np.sqrt(1 - a**2)
    for t in range(1, T):
        e[t] = a * e[t - 1] + sd * rng.standard_normal(N)
    return e


def path_eigenvalues(n):
    """Eigenvalues of the Laplacian of a path with n vertices."""
    return 2.0 - 2.0 * np.cos(np.pi * np.arange(n) / n)
