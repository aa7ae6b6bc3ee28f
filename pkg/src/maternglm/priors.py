"""Spatial GMRF priors on activity maps and the hyperpriors on their parameters.

Precision matrices per prior kind (tau2 > 0, kappa2 > 0 unless ICAR):

=======  =========================================================
GS       tau2 * I
ICAR1    tau2 * G
M1       tau2 * K,        K = kappa2 I + G
ICAR2    tau2 * G G
M2       tau2 * K K,      K = kappa2 I + G
AM2      tau2 * K K,      K = kappa2 I + hx Gx + hy Gy + hz Gz, hz = 1/(hx hy)
=======  =========================================================

Hyperparameters are optimized in log coordinates ``tau0 = log tau2``,
``kappa0 = log kappa2``, ``h0x = log hx``, ``h0y = log hy``.
"""

from dataclasses import dataclass, field, replace
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import gammaln

from . import _kernels
from .lattice import connected_components, graph_laplacian, incidence_matrix, n_components

KINDS = ("GS", "ICAR1", "M1", "ICAR2", "M2", "AM2")
ALPHA = {"ICAR1": 1, "M1": 1, "ICAR2": 2, "M2": 2, "AM2": 2}
COORDS = {
    "GS": ("tau0",),
    "ICAR1": ("tau0",),
    "ICAR2": ("tau0",),
    "M1": ("tau0", "kappa0"),
    "M2": ("tau0", "kappa0"),
    "AM2": ("tau0", "kappa0", "h0x", "h0y"),
}
GS_DEFAULT_TAU2 = 1e-12


class PriorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

def matern_variance_constant(nu, d=3):
    """Gamma(nu) / (Gamma(nu + d/2) (4 pi)^(d/2)), so sigma^2 = c / (tau2 kappa^(2 nu))."""
    return math.exp(gammaln(nu) - gammaln(nu + d / 2.0)) / (4.0 * math.pi) ** (d / 2.0)


def sigma_rho(tau2, kappa2, alpha=2, d=3):
    """Marginal variance and range (in lattice units) of a Matern field.

    Raises :class:`PriorError` when the smoothness ``nu = alpha - d/2`` is not
    positive or ``kappa2`` is zero (ICAR and M1 have no finite variance/range).
    """
    nu = alpha - d / 2.0
    if nu <= 0 or kappa2 <= 0:
        raise PriorError("marginal variance and range are undefined for this kind (need nu > 0 and kappa > 0)")
    if tau2 <= 0:
        raise PriorError("tau2 must be positive")
    kappa = math.sqrt(kappa2)
    sigma2 = matern_variance_constant(nu, d) / (tau2 * kappa ** (2 * nu))
    rho = math.sqrt(8 * nu) / kappa
    return sigma2, rho


def tau2_kappa2_from(sigma, rho, alpha=2, d=3):
    """Inverse of :func:`sigma_rho`: (tau2, kappa2) giving std ``sigma`` and range ``rho``."""
    nu = alpha - d / 2.0
    if nu <= 0:
        raise PriorError("need nu > 0")
    kappa = math.sqrt(8 * nu) / rho
    tau2 = matern_variance_constant(nu, d) / (sigma**2 * kappa ** (2 * nu))
    return tau2, kappa**2


# ---------------------------------------------------------------------------
# hyperpriors; each returns (logp, grad, hess) keyed by coordinate name
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PCMatern:
    """Joint PC prior on (tau2, kappa) for alpha = 2 Matern fields.

    Pr(range < rho0) = xi1 and Pr(sigma > sigma0) = xi2. ``rho0`` in lattice
    units, ``sigma0`` in data units.
    """

    rho0: float = 2.0
    sigma0: float = 1.0
    xi1: float = 0.05
    xi2: float = 0.05
    nu: float = 0.5
    d: int = 3

    def __post_init__(self):
        for name in ("rho0", "sigma0", "xi1", "xi2"):
            if not getattr(self, name) > 0:
                raise PriorError(f"PC prior constant {name} must be positive")

    @property
    def lam1(self):
        return -math.log(self.xi1) * (self.rho0 / math.sqrt(8 * self.nu)) ** (self.d / 2.0)

    @property
    def lam3(self):
        return -math.log(self.xi2) / self.sigma0 * math.sqrt(matern_variance_constant(self.nu, self.d))

    def evaluate(self, c):
        t0, k0 = c["tau0"], c["kappa0"]
        nu, d = self.nu, self.d
        l1, l3 = self.lam1, self.lam3
        ek = math.exp(d * k0 / 4.0)  # kappa^(d/2)
        e3 = math.exp(-nu * k0 / 2.0 - t0 / 2.0)  # kappa^-nu tau^-1
        logp = -1.5 * t0 + (d / 2.0 - 1 - nu) * k0 / 2.0 - l1 * ek - l3 * e3
        grad = {
            "tau0": -1.5 + 0.5 * l3 * e3,
            "kappa0": 0.5 * (d / 2.0 - 1 - nu) - l1 * (d / 4.0) * ek + l3 * (nu / 2.0) * e3,
        }
        hess = {
            "tau0": -0.25 * l3 * e3,
            "kappa0": -l1 * (d / 4.0) ** 2 * ek - l3 * (nu / 2.0) ** 2 * e3,
        }
        return logp, grad, hess

    def median_coords(self):
        kappa = (math.log(2) / self.lam1) ** (2.0 / self.d)
        inv_tau = math.log(2) * kappa**self.nu / self.lam3
        return {"tau0": -2 * math.log(inv_tau), "kappa0": 2 * math.log(kappa)}


@dataclass(frozen=True)
class LogNormal:
    """Independent normal priors on the log coordinates (M1 default)."""

    mu_tau0: float = math.log(0.01)
    sd_tau0: float = 4.0
    mu_kappa0: float = math.log(0.1)
    sd_kappa0: float = 1.0

    def __post_init__(self):
        if not (self.sd_tau0 > 0 and self.sd_kappa0 > 0):
            raise PriorError("log-normal scales must be positive")

    def evaluate(self, c):
        logp, grad, hess = 0.0, {}, {}
        for name, mu, sd in (("tau0", self.mu_tau0, self.sd_tau0), ("kappa0", self.mu_kappa0, self.sd_kappa0)):
            if name in c:
                z = (c[name] - mu) / sd
                logp += -0.5 * z * z - math.log(sd * math.sqrt(2 * math.pi))
                grad[name] = -z / sd
                hess[name] = -1.0 / sd**2
        return logp, grad, hess

    def median_coords(self):
        return {"tau0": self.mu_tau0, "kappa0": self.mu_kappa0}


@dataclass(frozen=True)
class PCPrecision:
    """PC prior for a precision tau2 whose field variance is ``variance_constant / tau2``.

    Pr(sqrt(variance_constant / tau2) > sigma0) = xi2. The constant is 1 for GS,
    1/6 (ICAR1) and 1/42 (ICAR2) for conditional variances of interior voxels,
    or a simulated mean marginal variance (see :func:`icar_variance_constant`).
    """

    sigma0: float = 1.0
    xi2: float = 0.05
    variance_constant: float = 1.0

    def __post_init__(self):
        if not (self.sigma0 > 0 and 0 < self.xi2 < 1 and self.variance_constant > 0):
            raise PriorError("PC precision prior needs sigma0 > 0, 0 < xi2 < 1, variance_constant > 0")

    @property
    def lam2(self):
        return -math.log(self.xi2) * math.sqrt(self.variance_constant) / self.sigma0

    def evaluate(self, c):
        t0 = c["tau0"]
        l2 = self.lam2
        e = math.exp(-t0 / 2.0)
        logp = math.log(l2 / 2.0) - 1.5 * t0 - l2 * e
        return logp, {"tau0": -1.5 + 0.5 * l2 * e}, {"tau0": -0.25 * l2 * e}

    def median_coords(self):
        return {"tau0": 2 * math.log(self.lam2 / math.log(2))}


@dataclass(frozen=True)
class GammaPrecision:
    """Gamma prior on tau2 with ``scale`` q1 and ``shape`` q2 (mean q1*q2)."""

    scale: float = 10.0
    shape: float = 0.1

    def __post_init__(self):
        if not (self.scale > 0 and self.shape > 0):
            raise PriorError("gamma prior needs positive scale and shape")

    def evaluate(self, c):
        t0 = c["tau0"]
        tau2 = math.exp(t0)
        logp = (self.shape - 1) * t0 - tau2 / self.scale - gammaln(self.shape) - self.shape * math.log(self.scale)
        return logp, {"tau0": self.shape - 1 - tau2 / self.scale}, {"tau0": -tau2 / self.scale}

    def median_coords(self):
        return {"tau0": math.log(self.scale * self.shape)}


@dataclass(frozen=True)
class LogNormalAniso:
    """(log hx, log hy) ~ N(0, sigma_h2 [[1, -1/2], [-1/2, 1]])."""

    sigma_h2: float = 0.01

    def __post_init__(self):
        if not self.sigma_h2 > 0:
            raise PriorError("sigma_h2 must be positive")

    def evaluate(self, c):
        hx, hy = c["h0x"], c["h0y"]
        s = self.sigma_h2
        quad = hx * hx + hx * hy + hy * hy
        logp = -2.0 / (3.0 * s) * quad - math.log(2 * math.pi * s * math.sqrt(0.75))
        grad = {"h0x": -2.0 / (3.0 * s) * (2 * hx + hy), "h0y": -2.0 / (3.0 * s) * (2 * hy + hx)}
        hess = {"h0x": -4.0 / (3.0 * s), "h0y": -4.0 / (3.0 * s)}
        return logp, grad, hess

    def median_coords(self):
        return {"h0x": 0.0, "h0y": 0.0}


ICAR_CONDITIONAL_CONSTANT = {"ICAR1": 1.0 / 6.0, "ICAR2": 1.0 / 42.0}


def default_hyperpriors(kind, sigma0=1.0):
    """Default hyperprior terms for ``kind`` given sigma0 in data units."""
    if kind in ("M2", "AM2"):
        terms = [PCMatern(rho0=2.0, sigma0=sigma0)]
        if kind == "AM2":
            terms.append(LogNormalAniso())
        return tuple(terms)
    if kind == "M1":
        return (LogNormal(),)
    if kind in ICAR_CONDITIONAL_CONSTANT:
        return (PCPrecision(sigma0=sigma0, variance_constant=ICAR_CONDITIONAL_CONSTANT[kind]),)
    if kind == "GS":
        return (PCPrecision(sigma0=sigma0, variance_constant=1.0),)
    raise PriorError(f"unknown prior kind {kind!r}")


# ---------------------------------------------------------------------------
# the prior operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpatialPrior:
    """One regressor's spatial prior with current hyperparameters.

    Instances are immutable; :meth:`with_coords` returns an updated copy.
    """

    kind: str
    lattice: object
    tau2: float = 1.0
    kappa2: float = 0.0
    hx: float = 1.0
    hy: float = 1.0
    hyperpriors: tuple = ()
    optimize: tuple = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PriorError(f"unknown prior kind {self.kind!r}")
        if not self.tau2 > 0:
            raise PriorError("tau2 must be positive")
        if self.kind in ("ICAR1", "ICAR2"):
            if self.kappa2 != 0:
                raise PriorError(f"{self.kind} requires kappa2 = 0")
        elif self.kind in ("M1", "M2", "AM2"):
            if not self.kappa2 > 0:
                raise PriorError(f"{self.kind} requires kappa2 > 0")
        if self.kind != "AM2" and (self.hx != 1.0 or self.hy != 1.0):
            raise PriorError("hx, hy are only used by AM2")
        if not (self.hx > 0 and self.hy > 0):
            raise PriorError("hx, hy must be positive")
        if self.optimize is None:
            default = () if self.kind == "GS" else COORDS[self.kind]
            object.__setattr__(self, "optimize", tuple(default))
        bad = set(self.optimize) - set(COORDS[self.kind])
        if bad:
            raise PriorError(f"{self.kind} has no coordinates {sorted(bad)}")

    # -- parameters ---------------------------------------------------------

    @property
    def N(self):
        return self.lattice.N

    @property
    def hz(self):
        return 1.0 / (self.hx * self.hy)

    @property
    def alpha(self):
        return ALPHA.get(self.kind)

    def coords(self):
        c = {"tau0": math.log(self.tau2)}
        if self.kind in ("M1", "M2", "AM2"):
            c["kappa0"] = math.log(self.kappa2)
        if self.kind == "AM2":
            c["h0x"] = math.log(self.hx)
            c["h0y"] = math.log(self.hy)
        return c

    def with_coords(self, coords):
        upd = {}
        if "tau0" in coords:
            upd["tau2"] = math.exp(coords["tau0"])
        if "kappa0" in coords:
            upd["kappa2"] = math.exp(coords["kappa0"])
        if "h0x" in coords:
            upd["hx"] = math.exp(coords["h0x"])
        if "h0y" in coords:
            upd["hy"] = math.exp(coords["h0y"])
        return replace(self, _cache={}, **upd)

    def sigma_rho(self):
        return sigma_rho(self.tau2, self.kappa2, self.alpha or 0)

    @property
    def nullity(self):
        return n_components(self.lattice) if self.kind in ("ICAR1", "ICAR2") else 0

    @property
    def rank(self):
        return self.N - self.nullity

    # -- the K stencil ------------------------------------------------------

    def _stencil(self):
        if "stencil" not in self._cache:
            lat = self.lattice
            if self.kind == "AM2":
                w = np.array([self.hx, self.hy, self.hz])
                diag = self.kappa2 + sum(w[a] * lat.neighbor_counts(ax) for a, ax in enumerate("xyz"))
            else:
                w = np.ones(3)
                diag = self.kappa2 + lat.neighbor_counts("all")
            self._cache["stencil"] = (np.ascontiguousarray(diag), w)
        return self._cache["stencil"]

    def K_apply(self, v):
        """K v, with K = kappa2 I + (weighted) G; for ICAR kinds K = G."""
        diag, w = self._stencil()
        return _kernels.stencil_apply(self.lattice.nbr, diag, w, v)

    def _axis_apply(self, axis, v):
        lat = self.lattice
        a = "xyz".index(axis)
        w = np.zeros(3)
        w[a] = 1.0
        return _kernels.stencil_apply(lat.nbr, np.ascontiguousarray(lat.neighbor_counts(axis)), w, v)

    def K_matrix(self):
        """Sparse K (CSR)."""
        lat = self.lattice
        n = lat.N
        if self.kind == "AM2":
            K = (self.hx * graph_laplacian(lat, "x") + self.hy * graph_laplacian(lat, "y")
                 + self.hz * graph_laplacian(lat, "z"))
        else:
            K = graph_laplacian(lat)
        return (K + self.kappa2 * sp.identity(n)).tocsr()

    # -- precision ----------------------------------------------------------

    def apply(self, v):
        """Q v for v of shape (N,) or (N, m); never forms K K."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.N:
            raise PriorError(f"vector length {v.shape[0]} does not match N={self.N}")
        if self.kind == "GS":
            return self.tau2 * v
        Kv = self.K_apply(v)
        if self.alpha == 1:
            return self.tau2 * Kv
        return self.tau2 * self.K_apply(Kv)

    def diagonal(self):
        lat = self.lattice
        n_all = lat.neighbor_counts("all")
        if self.kind == "GS":
            return np.full(self.N, self.tau2)
        diag, w = self._stencil()
        if self.alpha == 1:
            return self.tau2 * diag
        # (K K)_ii = K_ii^2 + sum of squared off-diagonals
        off2 = sum(w[a] ** 2 * lat.neighbor_counts(ax) for a, ax in enumerate("xyz"))
        if self.kind != "AM2":
            off2 = n_all
        return self.tau2 * (diag**2 + off2)

    def matrix(self):
        """Sparse Q, for oracles and small problems only."""
        n = self.N
        if self.kind == "GS":
            return self.tau2 * sp.identity(n, format="csr")
        K = self.K_matrix()
        if self.alpha == 1:
            return (self.tau2 * K).tocsr()
        return (self.tau2 * (K @ K)).tocsr()

    def perturbation(self, rng, m=None):
        """Draw w with Cov(w) = Q, shape (N,) or (N, m)."""
        shape = (self.N,) if m is None else (self.N, m)
        t = math.sqrt(self.tau2)
        if self.kind == "GS":
            return t * rng.standard_normal(shape)
        if self.alpha == 2:
            return t * self.K_apply(rng.standard_normal(shape))
        D = incidence_matrix(self.lattice)
        w = t * (D.T @ rng.standard_normal((D.shape[0],) + shape[1:]))
        if self.kind == "M1":
            w = w + t * math.sqrt(self.kappa2) * rng.standard_normal(shape)
        return w

    # -- derivatives with respect to the log coordinates ---------------------

    def _dK(self, coord, v, second=False):
        """dK/dcoord v (or the second derivative)."""
        if coord == "kappa0":
            return self.kappa2 * v
        other = {"h0x": ("x", self.hx), "h0y": ("y", self.hy)}[coord]
        ax, h = other
        sign = 1.0 if second else -1.0
        return h * self._axis_apply(ax, v) + sign * self.hz * self._axis_apply("z", v)

    def dQ_apply(self, coord, v):
        """First derivative of Q with respect to ``coord`` applied to v."""
        if coord == "tau0":
            return self.apply(v)
        if self.kind == "M1" and coord == "kappa0":
            return self.tau2 * self.kappa2 * v
        if coord == "kappa0":
            return 2.0 * self.tau2 * self.kappa2 * self.K_apply(v)
        # AM2 h: d(KK) = K'K + KK'
        return self.tau2 * (self._dK(coord, self.K_apply(v)) + self.K_apply(self._dK(coord, v)))

    def d2Q_apply(self, coord, v):
        """Second derivative of Q with respect to ``coord`` applied to v."""
        if coord == "tau0":
            return self.apply(v)
        if self.kind == "M1" and coord == "kappa0":
            return self.tau2 * self.kappa2 * v
        if coord == "kappa0":
            return 2.0 * self.tau2 * self.kappa2 * (self.K_apply(v) + self.kappa2 * v)
        Kv = self.K_apply(v)
        d1v = self._dK(coord, v)
        return self.tau2 * (
            self._dK(coord, Kv, second=True)
            + 2.0 * self._dK(coord, d1v)
            + self.K_apply(self._dK(coord, v, second=True))
        )

    def K_derivative_ops(self, coord):
        """(K', K'') as callables for the log-determinant traces of ``coord``."""
        if coord == "kappa0":
            f = lambda v: self.kappa2 * v  # noqa: E731
            return f, f
        return (lambda v: self._dK(coord, v)), (lambda v: self._dK(coord, v, second=True))

    def half_logdet_derivs(self, coord, ktr):
        """First and second derivatives of (1/2) log|Q| in ``coord``.

        ``ktr`` provides ``tr1(A) = tr(K^-1 A)`` and ``tr2(A, B) = tr(K^-1 A K^-1 B)``
        (``None`` meaning identity). Only Matern kinds need it.
        """
        if coord == "tau0":
            return 0.5 * self.rank, 0.0
        d1, d2 = self.K_derivative_ops(coord)
        if coord == "kappa0":
            k2 = self.kappa2
            t1 = ktr.tr1(None)
            t2 = ktr.tr2(None, None)
            g = k2 * t1
            h = k2 * t1 - k2 * k2 * t2
            if self.kind == "M1":
                return 0.5 * g, 0.5 * h
            return g, h
        g = ktr.tr1(d1)
        h = ktr.tr1(d2) - ktr.tr2(d1, d1)
        return g, h

    def hyperprior_eval(self):
        """Log hyperprior with gradient and diagonal second derivatives per coordinate."""
        c = self.coords()
        logp, grad, hess = 0.0, {k: 0.0 for k in c}, {k: 0.0 for k in c}
        for term in self.hyperpriors:
            lp, g, h = term.evaluate(c)
            logp += lp
            for k, v in g.items():
                grad[k] += v
            for k, v in h.items():
                hess[k] += v
        return logp, grad, hess

    def half_logdet(self):
        """(1/2) generalized log-determinant of Q (dense; oracle use only)."""
        Q = self.matrix().toarray()
        ev = np.linalg.eigvalsh(Q)
        ev = np.sort(ev)[self.nullity:]
        return 0.5 * float(np.sum(np.log(ev)))


def make_prior(kind, lattice, tau2=None, kappa2=None, hx=1.0, hy=1.0, hyperpriors=None,
               optimize=None, sigma0=1.0):
    """Build a :class:`SpatialPrior`, starting at the hyperprior median when values are omitted."""
    hp = default_hyperpriors(kind, sigma0) if hyperpriors is None else tuple(hyperpriors)
    start = {}
    for term in hp:
        start.update(term.median_coords())
    if kind == "GS":
        if tau2 is None:
            tau2 = math.exp(start["tau0"]) if optimize and "tau0" in optimize else GS_DEFAULT_TAU2
        kappa2 = 0.0
    else:
        if tau2 is None:
            tau2 = math.exp(start.get("tau0", 0.0))
        if kind in ("ICAR1", "ICAR2"):
            kappa2 = 0.0
        elif kappa2 is None:
            kappa2 = math.exp(start.get("kappa0", math.log(0.1)))
    return SpatialPrior(kind, lattice, tau2=tau2, kappa2=kappa2, hx=hx, hy=hy, hyperpriors=hp,
                        optimize=optimize)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

class _PinnedLaplacianSolver:
    """Solves G u = w for w orthogonal to the per-component constants.

    One voxel per component is pinned to zero, the reduced Laplacian is
    factorized once, and the solution is projected to zero mean per component,
    which yields the pseudo-inverse solution G^+ w.
    """

    def __init__(self, lattice):
        labels = connected_components(lattice)
        self.labels = labels
        self.ncomp = int(labels.max()) + 1
        pinned = np.zeros(lattice.N, dtype=bool)
        pinned[np.unique(labels, return_index=True)[1]] = True
        self.free = np.flatnonzero(~pinned)
        G = graph_laplacian(lattice)
        self.counts = np.bincount(labels).astype(float)
        self.lu = spla.splu(G[self.free][:, self.free].tocsc()) if len(self.free) else None

    def project(self, u):
        means = np.zeros((self.ncomp,) + u.shape[1:])
        np.add.at(means, self.labels, u)
        means /= self.counts.reshape((-1,) + (1,) * (u.ndim - 1))
        return u - means[self.labels]

    def solve(self, w):
        u = np.zeros_like(w)
        if self.lu is not None:
            u[self.free] = self.lu.solve(np.ascontiguousarray(w[self.free]))
        return self.project(u)


def sample_prior(prior, seed=None, n_samples=None, rng=None):
    """Draw field(s) u ~ N(0, Q^-1); ICAR kinds sample in the complement of the nullspace.

    Returns shape (N,) or (N, n_samples).
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    shape = (prior.N,) if n_samples is None else (prior.N, n_samples)
    kind = prior.kind
    try:
        if kind == "GS":
            return rng.standard_normal(shape) / math.sqrt(prior.tau2)
        if kind in ("M2", "AM2"):
            lu = spla.splu(prior.K_matrix().tocsc())
            return lu.solve(rng.standard_normal(shape)) / math.sqrt(prior.tau2)
        w = prior.perturbation(rng, None if n_samples is None else n_samples)
        if kind == "M1":
            lu = spla.splu(prior.K_matrix().tocsc())
            return lu.solve(w) / prior.tau2
        solver = _PinnedLaplacianSolver(prior.lattice)
        if kind == "ICAR1":
            return solver.solve(w) / prior.tau2
        return solver.solve(solver.solve(w)) / prior.tau2
    except RuntimeError as exc:  # splu raises RuntimeError on singular factors
        raise PriorError(f"factorization failed for {kind}: {exc}") from exc


def icar_variance_constant(lattice, kind="ICAR1", n_sim=200, seed=0):
    """Mean over voxels of the nullspace-conditioned marginal variance at tau2 = 1.

    Monte Carlo over ``n_sim`` prior draws; the field variance is this value
    divided by tau2.
    """
    if kind not in ("ICAR1", "ICAR2"):
        raise PriorError("variance constants are defined for ICAR kinds only")
    prior = SpatialPrior(kind, lattice, tau2=1.0)
    u = sample_prior(prior, seed=seed, n_samples=n_sim)
    return float(np.mean(u**2))


# ---------------------------------------------------------------------------
# spectral quadrature oracle
# ---------------------------------------------------------------------------

def spectral_variance_oracle(alpha=2, kappa=1.0, tau=1.0, h_diag=(1.0, 1.0, 1.0), n_ang=48, n_rad=96, rtol=1e-9):
    """Lag-0 integral of the (an)isotropic SPDE spectral density over R^3.

    Spherical coordinates: Gauss-Legendre in cos(theta), trapezoid in phi
    (periodic), and Gauss-Legendre in t after the radial map r = t / (1 - t).
    The resolution is doubled once; disagreement beyond ``rtol`` raises.
    """
    h = np.asarray(h_diag, dtype=float)
    if alpha <= 1.5:
        raise PriorError("the lag-0 integral diverges for alpha <= d/2")

    def integral(na, nr):
        mu, wmu = np.polynomial.legendre.leggauss(na)
        phi = np.arange(2 * na) * (np.pi / na)
        wphi = np.pi / na
        t, wt = np.polynomial.legendre.leggauss(nr)
        t = 0.5 * (t + 1.0)
        wt = 0.5 * wt
        st = np.sqrt(1 - mu**2)
        ux = st[:, None] * np.cos(phi)[None, :]
        uy = st[:, None] * np.sin(phi)[None, :]
        uz = np.broadcast_to(mu[:, None], ux.shape)
        g = h[0] * ux**2 + h[1] * uy**2 + h[2] * uz**2
        r = t / (1 - t)
        jac = 1.0 / (1 - t) ** 2
        dens = (r**2 * jac)[None, None, :] / (kappa**2 + g[..., None] * r[None, None, :] ** 2) ** alpha
        radial = dens @ wt
        total = np.sum(wmu[:, None] * wphi * radial)
        return total / ((2 * np.pi) ** 3 * tau**2)

    a = integral(n_ang, n_rad)
    b = integral(2 * n_ang, 2 * n_rad)
    if abs(a - b) > rtol * abs(b):
        raise PriorError(f"spectral quadrature not converged: {a} vs {b}")
    return float(b)
