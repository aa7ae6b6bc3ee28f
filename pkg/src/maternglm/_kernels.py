"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with the same signature. The numba path is
used unless ``MATERNGLM_NUMBA=0`` is set in the environment (read at import
time) or numba cannot be imported. Both paths must agree to round-off; the
test-suite checks that and ``benchmarks/bench_kernels.py`` times them.
"""

import os

import numpy as np

_WANT_NUMBA = os.environ.get("MATERNGLM_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised by env flag in CI
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def stencil_apply_np(nbr, diag, weights, v):
    """Apply a weighted 7-point operator ``diag*v - sum_d w_d v[nbr_d]``.

    ``nbr`` is (N, 6) with -1 for a missing neighbour, ordered
    (x-, x+, y-, y+, z-, z+); ``weights`` holds one weight per axis.
    ``v`` is (N,) or (N, m).
    """
    n = nbr.shape[0]
    squeeze = v.ndim == 1
    vv = v.reshape(n, -1)
    pad = np.concatenate([vv, np.zeros((1, vv.shape[1]))], axis=0)
    idx = np.where(nbr < 0, n, nbr)
    out = diag[:, None] * vv
    for d in range(6):
        w = weights[d // 2]
        if w != 0.0:
            out -= w * pad[idx[:, d]]
    return out[:, 0] if squeeze else out


def block_apply_np(blocks, x):
    """Per-voxel K x K products: out[:, n] = blocks[n] @ x[:, n]."""
    if x.ndim == 2:
        return np.einsum("nab,bn->an", blocks, x)
    return np.einsum("nab,bnm->anm", blocks, x)


def block_quadform_np(u, blocks, v):
    """Per-voxel sum over columns of u[:, n, j]^T blocks[n] v[:, n, j]."""
    if u.ndim == 2:
        return np.einsum("an,nab,bn->n", u, blocks, v)
    return np.einsum("anm,nab,bnm->n", u, blocks, v)


def assemble_blocks_np(xtx, r, s, a):
    """Per-voxel likelihood precision blocks for AR(P) noise.

    ``xtx`` (K,K), ``r`` (P,K,K) with r[p] = X^T Xlag_p, ``s`` (P,K,K,P),
    ``a`` (P,N). Returns (N,K,K).
    """
    ra = np.einsum("pn,pab->nab", a, r)
    sa = np.einsum("pn,pabq,qn->nab", a, s, a)
    return xtx[None] - ra - np.transpose(ra, (0, 2, 1)) + sa


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _stencil_apply_2d(nbr, diag, weights, v):
        n, m = v.shape
        out = np.empty((n, m))
        for i in range(n):
            di = diag[i]
            for j in range(m):
                out[i, j] = di * v[i, j]
            for d in range(6):
                k = nbr[i, d]
                if k >= 0:
                    w = weights[d // 2]
                    for j in range(m):
                        out[i, j] -= w * v[k, j]
        return out

    @njit(cache=True)
    def _block_apply_3d(blocks, x):
        kk, n, m = x.shape
        out = np.zeros((kk, n, m))
        for i in range(n):
            for a in range(kk):
                for b in range(kk):
                    c = blocks[i, a, b]
                    if c != 0.0:
                        for j in range(m):
                            out[a, i, j] += c * x[b, i, j]
        return out

    @njit(cache=True)
    def _block_quadform_3d(u, blocks, v):
        kk, n, m = u.shape
        out = np.zeros(n)
        for i in range(n):
            acc = 0.0
            for a in range(kk):
                for b in range(kk):
                    c = blocks[i, a, b]
                    if c != 0.0:
                        for j in range(m):
                            acc += u[a, i, j] * c * v[b, i, j]
            out[i] = acc
        return out

    @njit(cache=True)
    def _assemble_blocks(xtx, r, s, a):
        p_ord, n = a.shape
        kk = xtx.shape[0]
        out = np.empty((n, kk, kk))
        for i in range(n):
            for k1 in range(kk):
                for k2 in range(kk):
                    val = xtx[k1, k2]
                    for p in range(p_ord):
                        val -= a[p, i] * (r[p, k1, k2] + r[p, k2, k1])
                        for q in range(p_ord):
                            val += a[p, i] * a[q, i] * s[p, k1, k2, q]
                    out[i, k1, k2] = val
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def stencil_apply(nbr, diag, weights, v):
    if not USE_NUMBA:
        return stencil_apply_np(nbr, diag, weights, v)
    squeeze = v.ndim == 1
    vv = np.ascontiguousarray(v.reshape(v.shape[0], -1), dtype=np.float64)
    out = _stencil_apply_2d(nbr, diag, np.asarray(weights, dtype=np.float64), vv)
    return out[:, 0] if squeeze else out


def block_apply(blocks, x):
    if not USE_NUMBA:
        return block_apply_np(blocks, x)
    squeeze = x.ndim == 2
    xx = np.ascontiguousarray(x[..., None] if squeeze else x, dtype=np.float64)
    out = _block_apply_3d(blocks, xx)
    return out[..., 0] if squeeze else out


def block_quadform(u, blocks, v):
    if not USE_NUMBA:
        return block_quadform_np(u, blocks, v)
    if u.ndim == 2:
        u, v = u[..., None], v[..., None]
    return _block_quadform_3d(
        np.ascontiguousarray(u, dtype=np.float64), blocks, np.ascontiguousarray(v, dtype=np.float64)
    )


def assemble_blocks(xtx, r, s, a):
    if not USE_NUMBA or a.shape[0] == 0:
        return assemble_blocks_np(xtx, r, s, a)
    return _assemble_blocks(xtx, r, s, np.ascontiguousarray(a, dtype=np.float64))
