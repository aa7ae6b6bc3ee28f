import os
import subprocess
import sys

import numpy as np
import pytest

from maternglm import _kernels as kr
from maternglm.lattice import ball_mask, build_lattice, graph_laplacian


@pytest.fixture(scope="module")
def lat():
    return build_lattice(ball_mask((7, 6, 5)))


def _rng():
    return np.random.default_rng(0)


@pytest.mark.parametrize("cols", [None, 4])
def test_stencil_parity_and_oracle(lat, cols):
    v = _rng().standard_normal(lat.N if cols is None else (lat.N, cols))
    diag = lat.neighbor_counts().astype(float) + 0.3
    w = np.array([1.0, 0.0, 2.5])
    a, b = kr.stencil_apply(lat.nbr, diag, w, v), kr.stencil_apply_np(lat.nbr, diag, w, v)
    assert a.shape == v.shape
    assert np.max(np.abs(a - b)) <= 1e-13
    if cols is None:
        G = graph_laplacian(lat).toarray()
        assert np.allclose(kr.stencil_apply_np(lat.nbr, np.diag(G).copy(), np.ones(3), v), G @ v)


@pytest.mark.parametrize("ndim", [2, 3])
def test_block_kernels_parity(ndim):
    rng = _rng()
    K, N, m = 3, 50, 6
    blocks = rng.standard_normal((N, K, K))
    x = rng.standard_normal((K, N) if ndim == 2 else (K, N, m))
    y = rng.standard_normal(x.shape)
    assert np.allclose(kr.block_apply(blocks, x), kr.block_apply_np(blocks, x), rtol=1e-13, atol=1e-13)
    assert np.allclose(kr.block_quadform(x, blocks, y), kr.block_quadform_np(x, blocks, y), rtol=1e-12)
    # loop reference
    n = 7
    ref = blocks[n] @ (x[:, n] if ndim == 2 else x[:, n, :])
    assert np.allclose(kr.block_apply(blocks, x)[:, n], ref)


@pytest.mark.parametrize("P", [0, 1, 3])
def test_assemble_blocks_parity(P):
    rng = _rng()
    K, N = 4, 30
    xtx = rng.standard_normal((K, K))
    r = rng.standard_normal((P, K, K))
    s = rng.standard_normal((P, K, K, P))
    a = rng.uniform(-0.5, 0.5, (P, N))
    got = kr.assemble_blocks(xtx, r, s, a)
    assert got.shape == (N, K, K)
    assert np.allclose(got, kr.assemble_blocks_np(xtx, r, s, a), rtol=1e-13, atol=1e-13)


def test_env_flag_selects_numpy_path():
    code = ("import numpy as np; from maternglm import _kernels as k; "
            "from maternglm.lattice import box_lattice; from maternglm.priors import SpatialPrior; "
            "p = SpatialPrior('M2', box_lattice(4, 4, 4), tau2=2.0, kappa2=0.5); "
            "print(k.USE_NUMBA); print(repr(float(p.apply(np.arange(64.0)).sum())))")
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, MATERNGLM_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        out[flag] = res.stdout.split()
    assert out["0"][0] == "False"
    assert out["1"][0] == str(kr.HAS_NUMBA)
    assert float(out["0"][1]) == pytest.approx(float(out["1"][1]), rel=1e-13)
