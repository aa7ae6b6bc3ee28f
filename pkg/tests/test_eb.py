import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import _oracles as orc
from maternglm.eb import (
    A0_to_A, A_chain, A_to_A0, EBError, EBModel, NoisePrior, OptimizerConfig, OptimizerTrace, algorithm1,
    fit_dataset, init_noise, lam0_to_lam, lam_to_lam0,
)
from maternglm.glm import Dataset, precompute_lagged
from maternglm.krylov import ProbeStream
from maternglm.lattice import box_lattice
from maternglm.priors import make_prior


def _model(n=4, P=1, T=30, seed=0, kind="M2"):
    lat = box_lattice(n, n, n)
    rng = np.random.default_rng(seed)
    X = np.column_stack([(np.arange(T) % 10 < 5).astype(float), np.ones(T)])
    W = np.vstack([np.sin(lat.coords[:, 0]), np.full(lat.N, 5.0)])
    Y = X @ W + orc.simulate_ar1(rng, T, lat.N, 0.3, 1.0)
    priors = [make_prior(kind, lat, tau2=3.0, kappa2=0.4, sigma0=2.0), make_prior("GS", lat)]
    model = EBModel(precompute_lagged(X, Y, P), priors)
    lam, A = rng.uniform(0.5, 2, lat.N), rng.uniform(-0.4, 0.4, (P, lat.N))
    return model, model.initial_state(lam, A)


def test_transform_round_trips():
    A = np.array([-0.9, 0.0, 0.3, 0.9])
    assert np.allclose(A0_to_A(A_to_A0(A)), A, atol=1e-12)
    assert A_to_A0(0.0) == 0.0
    assert lam_to_lam0(1.0) == 0.0 and lam0_to_lam(0.0) == 1.0
    h = 1e-6
    A0 = A_to_A0(A)
    assert np.allclose(A_chain(A), (A0_to_A(A0 + h) - A0_to_A(A0 - h)) / (2 * h), rtol=1e-8)


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(trace="other")
    with pytest.raises(ValueError):
        OptimizerConfig(n_iter=0)
    with pytest.raises(ValueError):
        OptimizerConfig(gamma1=1.0)
    c = OptimizerConfig(eta0=0.9, decay=0.1, decay_start=100)
    assert c.eta(50) == 0.9 and c.eta(110) == pytest.approx(0.45)


def test_noise_prior_density():
    from scipy import stats
    np_ = NoisePrior(10.0, 0.1, 2.0)
    lam, A = np.array([0.3, 4.0]), np.array([[0.2, -0.5]])
    ref = stats.gamma(0.1, scale=10.0).logpdf(lam).sum() + stats.norm(0, 1 / np.sqrt(2.0)).logpdf(A).sum()
    assert np_.logpdf(lam, A) == pytest.approx(ref, rel=1e-12)


def test_state_updates_are_copies():
    model, s = _model()
    s2 = s.with_spatial(0, "tau0", 1.5)
    assert s2.spatial[0]["tau0"] == 1.5 and s.spatial[0]["tau0"] != 1.5
    s3 = s.with_noise(lam0=np.zeros(model.stats.N))
    assert np.all(s3.lam == 1.0) and np.array_equal(s3.A0, s.A0)


@pytest.mark.parametrize("P", [0, 2])
def test_noise_gradients_match_finite_differences(P):
    model, s = _model(n=3, P=P)
    g = model.gradient(s)
    h = 1e-5
    for n in (0, 13):
        e = np.zeros(model.stats.N)
        e[n] = h
        fd = (model.log_posterior_dense(s.with_noise(lam0=s.lam0 + e))
              - model.log_posterior_dense(s.with_noise(lam0=s.lam0 - e))) / (2 * h)
        assert g.lam0[n] == pytest.approx(fd, rel=1e-6, abs=1e-7)
        for p in range(P):
            E = np.zeros_like(s.A0)
            E[p, n] = h
            fd = (model.log_posterior_dense(s.with_noise(A0=s.A0 + E))
                  - model.log_posterior_dense(s.with_noise(A0=s.A0 - E))) / (2 * h)
            assert g.A0[p, n] == pytest.approx(fd, rel=1e-6, abs=1e-7)


def test_hutchinson_gradient_is_unbiased():
    model, s = _model(n=3)
    exact = model.gradient(s)
    probes = ProbeStream(4)
    runs = [model.gradient(s, probes=probes, iteration=i, n_probes=20, tol=1e-12) for i in range(60)]
    for key in exact.spatial:
        v = np.array([r.spatial[key] for r in runs])
        assert abs(v.mean() - exact.spatial[key]) <= 4 * v.std(ddof=1) / np.sqrt(v.size) + 1e-9
    v = np.array([r.lam0 for r in runs])
    z = np.abs(v.mean(axis=0) - exact.lam0) / (v.std(axis=0, ddof=1) / np.sqrt(len(runs)) + 1e-12)
    assert np.mean(z < 3) >= 0.9


def test_init_noise_recovers_ar_coefficient():
    rng = np.random.default_rng(1)
    T, N = 400, 60
    X = np.column_stack([rng.standard_normal(T), np.ones(T)])
    e = orc.simulate_ar1(rng, T, N, 0.5, 1.0)
    lam, A, W = init_noise(X, X @ np.ones((2, N)) + e, 1)
    assert abs(A.mean() - 0.5) <= 0.05
    assert lam.mean() == pytest.approx(1.0, rel=0.1)
    white = rng.standard_normal((T, N))
    _, A, _ = init_noise(X, white, 1)
    assert abs(A.mean()) <= 3 / np.sqrt(T * N)
    lam, A, _ = init_noise(X, X @ np.ones((2, N)), 1)
    assert np.all(lam == 1e12) and np.all(np.abs(A) <= 0.99)


def test_algorithm1_on_a_concave_quadratic():
    target = np.array([1.0, -2.0])
    zt = np.array([0.5])

    def grad(s, z, j):
        return -3.0 * (s - target), np.full(2, -3.0), -(z - zt) * 1000.0

    cfg = OptimizerConfig(n_iter=300, n_warmup=3, eta_n=1e-3)
    tr = OptimizerTrace()
    s, z = algorithm1(np.zeros(2), np.zeros(1), grad, cfg, names=["a", "b"], trace=tr)
    assert np.allclose(s, target, atol=1e-6)
    assert np.allclose(z, zt, atol=1e-3)
    assert len(tr.rows) == 2 * (300 + 3)


def test_algorithm1_polyak_average_and_warmup_clip():
    calls = []

    def grad(s, z, j):
        calls.append(s.copy())
        return np.full(1, 1e9), np.full(1, -1.0), np.zeros(0)

    cfg = OptimizerConfig(n_iter=1, n_warmup=1, n_polyak=1)
    algorithm1(np.zeros(1), np.zeros(0), grad, cfg)
    assert calls[1][0] == pytest.approx(1.0)  # warm-up step clipped

    cfg = OptimizerConfig(n_iter=5, n_warmup=0, n_polyak=5)
    s, _ = algorithm1(np.full(1, 2.0), np.zeros(0), lambda s, z, j: (np.zeros(1), -np.ones(1), np.zeros(0)), cfg)
    assert s[0] == 2.0


def test_algorithm1_rejects_nonfinite():
    cfg = OptimizerConfig(n_iter=2, n_warmup=0)
    with pytest.raises(EBError):
        algorithm1(np.zeros(1), np.zeros(0), lambda s, z, j: (np.full(1, np.nan), -np.ones(1), np.zeros(0)), cfg)


def test_trace_csv(tmp_path):
    tr = OptimizerTrace()
    tr.add(1, "k0.tau0", 0.5, -1.25, 0.1)
    tr.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines == ["iteration,coordinate,value,gradient,step", "1,k0.tau0,0.5,-1.25,0.1"]


def test_fit_has_negative_curvature_at_convergence():
    lat = box_lattice(4, 4, 4)
    rng = np.random.default_rng(5)
    T = 40
    X = np.column_stack([(np.arange(T) % 10 < 5).astype(float), np.ones(T)])
    W = np.vstack([2 * np.sin(0.6 * lat.coords[:, 0]), np.full(lat.N, 50.0)])
    ds = Dataset(X @ W + rng.standard_normal((T, lat.N)), X, lat, activity=[0])
    fit = fit_dataset(ds, "M1", P=1, config=OptimizerConfig(n_iter=60, trace="exact"), seed=0)
    g = fit.model.gradient(fit.state)
    assert all(h < 0 for h in g.spatial_hess.values())
    assert all(np.isfinite(v) for v in fit.state.spatial[0].values())
    assert fit.mean.shape == (2, lat.N)


def test_fit_dataset_errors():
    lat = box_lattice(2, 2, 2)
    X = np.column_stack([np.arange(10.0), np.ones(10)])
    ds = Dataset(np.random.default_rng(0).standard_normal((10, lat.N)), X, lat, activity=[0])
    with pytest.raises(EBError):
        fit_dataset(ds, ["M2", "M2"])
    with pytest.raises(EBError):
        EBModel(precompute_lagged(X, ds.Y, 0), [make_prior("GS", lat)])


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.999, 0.999))
def test_ar_transform_is_monotone_bijection(a):
    a0 = A_to_A0(a)
    assert np.isfinite(a0)
    assert A0_to_A(a0) == pytest.approx(a, abs=1e-12)
    assert A_to_A0(a + 1e-4) > a0 if a < 0.998 else True
