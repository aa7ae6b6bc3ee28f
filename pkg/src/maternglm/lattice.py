"""Masked 3D voxel lattices and their graph Laplacians."""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _cc

AXES = ("x", "y", "z")


class LatticeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MaskedLattice:
    """In-mask voxels of a 3D grid with x-fastest linear ordering.

    ``coords`` is (N, 3) integer grid coordinates, ``index_grid`` maps each grid
    cell to its linear index (-1 outside the mask) and ``nbr`` lists the
    6-connected in-mask neighbours as (x-, x+, y-, y+, z-, z+), -1 if absent.
    """

    dims: tuple
    voxel_size: tuple
    inside: np.ndarray
    coords: np.ndarray
    index_grid: np.ndarray
    nbr: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def N(self):
        return self.coords.shape[0]

    def index_of(self, ijk):
        i, j, k = ijk
        idx = int(self.index_grid[i, j, k])
        if idx < 0:
            raise KeyError(f"voxel {tuple(ijk)} is outside the mask")
        return idx

    def coord_of(self, n):
        return tuple(int(c) for c in self.coords[n])

    def neighbor_counts(self, axis="all"):
        """Number of in-mask neighbours per voxel along ``axis``."""
        cols = _axis_columns(axis)
        return (self.nbr[:, cols] >= 0).sum(axis=1).astype(np.float64)

    def to_volume(self, values, fill=0.0):
        """Scatter per-voxel ``values`` (N,) or (N, T) back onto the grid."""
        values = np.asarray(values)
        shape = tuple(self.dims) + values.shape[1:]
        out = np.full(shape, fill, dtype=np.float64)
        out[tuple(self.coords.T)] = values
        return out

    def from_volume(self, vol):
        """Gather in-mask values from a 3D (or 4D, time last) array."""
        vol = np.asarray(vol)
        return vol[tuple(self.coords.T)]


def _axis_columns(axis):
    if axis == "all":
        return [0, 1, 2, 3, 4, 5]
    try:
        a = AXES.index(axis)
    except ValueError:
        raise LatticeError(f"unknown axis {axis!r}") from None
    return [2 * a, 2 * a + 1]


def build_lattice(mask_volume, voxel_size=(1.0, 1.0, 1.0)):
    """Build a :class:`MaskedLattice` from a 3D boolean mask."""
    mask = np.asarray(mask_volume).astype(bool)
    if mask.ndim != 3:
        raise LatticeError(f"mask must be 3D, got shape {mask.shape}")
    if not mask.any():
        raise LatticeError("mask has no in-mask voxels")
    dims = mask.shape
    # x-fastest raster order is Fortran order over (x, y, z)
    flat = np.flatnonzero(mask.ravel(order="F"))
    coords = np.stack(np.unravel_index(flat, dims, order="F"), axis=1).astype(np.int64)
    index_grid = np.full(dims, -1, dtype=np.int64)
    index_grid[tuple(coords.T)] = np.arange(len(flat))

    nbr = np.full((len(flat), 6), -1, dtype=np.int64)
    for a in range(3):
        for s, col in ((-1, 2 * a), (1, 2 * a + 1)):
            c = coords.copy()
            c[:, a] += s
            ok = (c[:, a] >= 0) & (c[:, a] < dims[a])
            nbr[ok, col] = index_grid[tuple(c[ok].T)]
    return MaskedLattice(
        dims=tuple(int(d) for d in dims),
        voxel_size=tuple(float(v) for v in voxel_size),
        inside=mask,
        coords=coords,
        index_grid=index_grid,
        nbr=nbr,
    )


def box_lattice(nx, ny, nz, voxel_size=(1.0, 1.0, 1.0)):
    return build_lattice(np.ones((nx, ny, nz), dtype=bool), voxel_size)


def graph_laplacian(lattice, axis="all"):
    """Sparse CSR Laplacian G (or Gx, Gy, Gz) of the masked 6-neighbour graph."""
    key = ("G", axis)
    if key in lattice._cache:
        return lattice._cache[key]
    cols = _axis_columns(axis)
    n = lattice.N
    sub = lattice.nbr[:, cols]
    rows = np.repeat(np.arange(n), len(cols))
    nb = sub.ravel()
    ok = nb >= 0
    off = sp.csr_matrix((-np.ones(ok.sum()), (rows[ok], nb[ok])), shape=(n, n))
    G = (off + sp.diags(lattice.neighbor_counts(axis))).tocsr()
    G.sort_indices()
    lattice._cache[key] = G
    return G


def incidence_matrix(lattice):
    """Oriented edge-voxel incidence D (E x N) with D^T D = G."""
    key = ("D",)
    if key in lattice._cache:
        return lattice._cache[key]
    n = lattice.N
    src = []
    dst = []
    for col in (1, 3, 5):  # forward neighbours only, each edge once
        nb = lattice.nbr[:, col]
        ok = nb >= 0
        src.append(np.flatnonzero(ok))
        dst.append(nb[ok])
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    e = len(src)
    rows = np.concatenate([np.arange(e), np.arange(e)])
    cols = np.concatenate([src, dst])
    vals = np.concatenate([np.ones(e), -np.ones(e)])
    D = sp.csr_matrix((vals, (rows, cols)), shape=(e, n))
    lattice._cache[key] = D
    return D


def connected_components(lattice):
    """Component label per voxel (labels 0..c-1) under 6-connectivity."""
    key = ("cc",)
    if key not in lattice._cache:
        _, labels = _cc(graph_laplacian(lattice), directed=False)
        lattice._cache[key] = labels
    return lattice._cache[key]


def n_components(lattice):
    return int(connected_components(lattice).max()) + 1


def remove_small_clusters(mask_volume, min_size):
    """Drop 6-connected clusters smaller than ``min_size`` voxels from a mask."""
    lat = build_lattice(mask_volume)
    labels = connected_components(lat)
    sizes = np.bincount(labels)
    keep = sizes[labels] >= min_size
    out = np.zeros(lat.dims, dtype=bool)
    out[tuple(lat.coords[keep].T)] = True
    return out


def ball_mask(shape, radius=None, center=None):
    """Ellipsoid-ish test mask: voxels within ``radius`` of the grid centre."""
    shape = tuple(shape)
    if center is None:
        center = [(s - 1) / 2.0 for s in shape]
    if radius is None:
        radius = min(shape) / 2.0
    grids = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
    r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return r2 <= radius**2
