"""Densities and plans on uniform cell-centred grids.

A grid node is the centre of a cell of width ``spacing``; integrals are
midpoint-rule sums of node values times the cell volume.  A plan on
``(R^d)^N`` is stored either as a dense table over a :class:`ProductGrid`
(one block of ``d`` axes per marginal slot) or as a finite list of weighted
atoms (:class:`AtomicPlan`).

Factor indices ``j`` are zero-based throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

MASS_TOL = 1e-6


@dataclass(frozen=True)
class AxisGrid:
    """Uniform cell-centred grid on a box in R^dim, same nodes on every axis."""

    origin: float
    spacing: float
    count: int
    dim: int = 1

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.count < 2:
            raise ValueError(f"count must be >= 2, got {self.count}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")

    @classmethod
    def covering(cls, lo: float, hi: float, count: int, dim: int = 1) -> "AxisGrid":
        """Grid of ``count`` cells partitioning ``[lo, hi]`` on each axis."""
        if not hi > lo:
            raise ValueError("need hi > lo")
        h = (hi - lo) / count
        return cls(lo + 0.5 * h, h, count, dim)

    @property
    def nodes(self) -> np.ndarray:
        """1D node coordinates along one axis."""
        return self.origin + self.spacing * np.arange(self.count)

    @property
    def edges(self) -> np.ndarray:
        return self.origin - 0.5 * self.spacing + self.spacing * np.arange(self.count + 1)

    @property
    def lo(self) -> float:
        return self.origin - 0.5 * self.spacing

    @property
    def hi(self) -> float:
        return self.origin + (self.count - 0.5) * self.spacing

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.count,) * self.dim

    @property
    def size(self) -> int:
        return self.count**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    def points(self) -> np.ndarray:
        """All nodes as a ``(size, dim)`` array in row-major order."""
        axes = np.meshgrid(*([self.nodes] * self.dim), indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=-1)

    def extended(self, cells: int) -> "AxisGrid":
        """Same spacing, padded by ``cells`` nodes on both ends of every axis."""
        return AxisGrid(self.origin - cells * self.spacing, self.spacing,
                        self.count + 2 * cells, self.dim)

    def refined(self) -> "AxisGrid":
        """Same box, twice as many cells per axis."""
        return AxisGrid.covering(self.lo, self.hi, 2 * self.count, self.dim)

    def coarsened(self) -> "AxisGrid":
        if self.count % 2:
            raise ValueError("cannot coarsen an odd cell count")
        return AxisGrid.covering(self.lo, self.hi, self.count // 2, self.dim)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, self.dim)
        return np.all((pts >= self.lo) & (pts < self.hi), axis=1)


@dataclass(frozen=True)
class ProductGrid:
    """Grid on (R^d)^N: one :class:`AxisGrid` per marginal slot."""

    factors: tuple[AxisGrid, ...]

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if len(self.factors) < 1:
            raise ValueError("a product grid needs at least one factor")
        dims = {f.dim for f in self.factors}
        if len(dims) != 1:
            raise ValueError(f"all factors must share the same dim, got {sorted(dims)}")

    @classmethod
    def power(cls, factor: AxisGrid, n_factors: int) -> "ProductGrid":
        return cls((factor,) * n_factors)

    @property
    def N(self) -> int:
        return len(self.factors)

    @property
    def d(self) -> int:
        return self.factors[0].dim

    @property
    def shape(self) -> tuple[int, ...]:
        return sum((f.shape for f in self.factors), ())

    @property
    def factor_sizes(self) -> tuple[int, ...]:
        return tuple(f.size for f in self.factors)

    @property
    def size(self) -> int:
        return int(np.prod(self.factor_sizes))

    @property
    def cell_volume(self) -> float:
        return float(np.prod([f.cell_volume for f in self.factors]))

    @property
    def spacings(self) -> tuple[float, ...]:
        """Spacing of every one of the N*d axes."""
        return tuple(f.spacing for f in self.factors for _ in range(f.dim))

    def factor_axes(self, j: int) -> tuple[int, ...]:
        return tuple(range(j * self.d, (j + 1) * self.d))

    def coordinates(self) -> np.ndarray:
        """Node coordinates as an array of shape ``self.shape + (N*d,)``."""
        axes = [f.nodes for f in self.factors for _ in range(f.dim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def refined(self) -> "ProductGrid":
        return ProductGrid(tuple(f.refined() for f in self.factors))

    def coarsened(self) -> "ProductGrid":
        return ProductGrid(tuple(f.coarsened() for f in self.factors))


Grid = AxisGrid | ProductGrid


def _grid_shape(grid: Grid) -> tuple[int, ...]:
    return grid.shape


@dataclass(frozen=True)
class DensityField:
    """Nonnegative density sampled at the nodes of a grid.

    ``values`` is stored read-only with shape ``grid.shape``.  The
    ``probability`` flag asserts unit mass within ``mass_tol``.
    """

    grid: Grid
    values: np.ndarray
    probability: bool = False
    mass_tol: float = MASS_TOL
    label: str = field(default="", compare=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        shape = _grid_shape(self.grid)
        if vals.size != int(np.prod(shape)):
            raise ValueError(f"values have {vals.size} entries, grid has {int(np.prod(shape))} nodes")
        vals = vals.reshape(shape)
        if not np.all(np.isfinite(vals)):
            raise ValueError("density values must be finite")
        if vals.min(initial=0.0) < 0:
            raise ValueError(f"density values must be >= 0 (min {vals.min():.3e})")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if self.probability and abs(self.mass - 1.0) > self.mass_tol:
            raise ValueError(f"probability field has mass {self.mass!r}")

    @cached_property
    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def with_values(self, values: np.ndarray, probability: bool | None = None) -> "DensityField":
        prob = self.probability if probability is None else probability
        return DensityField(self.grid, values, prob, self.mass_tol, self.label)

    def normalized(self) -> "DensityField":
        if self.mass <= 0:
            raise ValueError("cannot normalize a field with zero mass")
        return DensityField(self.grid, self.values / self.mass, True, self.mass_tol, self.label)


@dataclass(frozen=True)
class AtomicPlan:
    """Finitely many weighted atoms in (R^d)^N.

    ``locations`` has shape ``(M, N, d)``; ``weights`` sums to one.
    """

    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        loc = np.array(self.locations, dtype=float)
        w = np.array(self.weights, dtype=float).ravel()
        if loc.ndim == 2:
            loc = loc[:, :, None]
        if loc.ndim != 3 or loc.shape[0] != w.size:
            raise ValueError("locations must have shape (M, N, d) matching the weights")
        if np.any(w <= 0):
            raise ValueError("atom weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"atom weights sum to {w.sum()!r}, not 1")
        loc.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "weights", w)

    @property
    def M(self) -> int:
        return self.weights.size

    @property
    def N(self) -> int:
        return self.locations.shape[1]

    @property
    def d(self) -> int:
        return self.locations.shape[2]

    def coordinates(self) -> np.ndarray:
        """Atom locations flattened to ``(M, N*d)``."""
        return self.locations.reshape(self.M, -1)

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        """Exact integral of ``fn`` (acting on ``(..., N*d)`` points) against the plan."""
        return float(np.dot(self.weights, fn(self.coordinates())))


@dataclass(frozen=True)
class MarginalSet:
    """The N single-slot probability densities of a plan."""

    marginals: tuple[DensityField, ...]

    def __post_init__(self):
        object.__setattr__(self, "marginals", tuple(self.marginals))
        if not self.marginals:
            raise ValueError("empty marginal set")
        for k, m in enumerate(self.marginals):
            if not isinstance(m.grid, AxisGrid):
                raise ValueError(f"marginal {k} is not on a single-factor grid")
            if not m.probability:
                raise ValueError(f"marginal {k} is not flagged as a probability")
        if len({m.grid.dim for m in self.marginals}) != 1:
            raise ValueError("marginals must share the dimension d")

    def __len__(self) -> int:
        return len(self.marginals)

    def __getitem__(self, j: int) -> DensityField:
        return self.marginals[j]

    def __iter__(self):
        return iter(self.marginals)

    @property
    def N(self) -> int:
        return len(self.marginals)

    @property
    def d(self) -> int:
        return self.marginals[0].grid.dim

    def product_grid(self) -> ProductGrid:
        return ProductGrid(tuple(m.grid for m in self.marginals))


def mass(field: DensityField) -> float:
    return field.mass


def sample_density(grid: Grid, fn: Callable[[np.ndarray], np.ndarray], *,
                   probability: bool = False, normalize: bool = False,
                   label: str = "") -> DensityField:
    """Evaluate ``fn`` on the grid nodes.

    ``fn`` receives an array of shape ``grid.shape + (D,)`` where ``D`` is the
    total ambient dimension.
    """
    if isinstance(grid, AxisGrid):
        pts = grid.points().reshape(grid.shape + (grid.dim,))
    else:
        pts = grid.coordinates()
    vals = np.asarray(fn(pts), dtype=float).reshape(grid.shape)
    out = DensityField(grid, vals, False, label=label)
    if normalize:
        return out.normalized()
    if probability:
        return DensityField(grid, vals, True, label=label)
    return out


def gaussian(grid: AxisGrid, mean=0.0, var: float = 1.0, *, normalize: bool = True) -> DensityField:
    """Isotropic Gaussian density N(mean, var I_d) on a single-factor grid."""
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (grid.dim,))

    def pdf(x):
        r2 = np.sum((x - mean) ** 2, axis=-1)
        return np.exp(-r2 / (2 * var)) / (2 * np.pi * var) ** (grid.dim / 2)

    return sample_density(grid, pdf, probability=not normalize, normalize=normalize,
                          label=f"N({mean.tolist()},{var})")


def gaussian_plan(grid: ProductGrid, mean: Sequence[float], cov: np.ndarray,
                  *, normalize: bool = True) -> DensityField:
    """Correlated Gaussian density on (R^d)^N with the given N*d covariance."""
    cov = np.asarray(cov, dtype=float)
    mean = np.asarray(mean, dtype=float)
    prec = np.linalg.inv(cov)
    norm = 1.0 / np.sqrt((2 * np.pi) ** cov.shape[0] * np.linalg.det(cov))

    def pdf(x):
        z = x - mean
        return norm * np.exp(-0.5 * np.einsum("...i,ij,...j->...", z, prec, z))

    return sample_density(grid, pdf, probability=not normalize, normalize=normalize,
                          label="gaussian_plan")


def marginal(plan_density: DensityField, j: int) -> DensityField:
    """Project a product-grid density onto factor ``j`` by summing out the rest."""
    grid = plan_density.grid
    if not isinstance(grid, ProductGrid):
        raise TypeError("marginal() needs a density over a ProductGrid")
    if not 0 <= j < grid.N:
        raise IndexError(f"factor index {j} out of range for N={grid.N}")
    keep = set(grid.factor_axes(j))
    others = tuple(a for a in range(len(grid.shape)) if a not in keep)
    other_vol = grid.cell_volume / grid.factors[j].cell_volume
    vals = plan_density.values.sum(axis=others) * other_vol
    return DensityField(grid.factors[j], vals, plan_density.probability,
                        plan_density.mass_tol, label=f"marginal[{j}]")


def marginal_atoms(plan: AtomicPlan, j: int, grid: AxisGrid) -> DensityField:
    """Histogram of the atoms' ``j``-th coordinates, as a density on ``grid``."""
    if not 0 <= j < plan.N:
        raise IndexError(f"factor index {j} out of range for N={plan.N}")
    if grid.dim != plan.d:
        raise ValueError("grid dimension does not match the plan")
    pts = plan.locations[:, j, :]
    inside = grid.contains(pts)
    if not inside.all():
        bad = int(np.flatnonzero(~inside)[0])
        raise ValueError(f"atom {bad} at {pts[bad].tolist()} lies outside the grid box")
    idx = np.floor((pts - grid.lo) / grid.spacing).astype(int)
    idx = np.clip(idx, 0, grid.count - 1)
    flat = np.ravel_multi_index(tuple(idx.T), grid.shape)
    vals = np.bincount(flat, weights=plan.weights, minlength=grid.size) / grid.cell_volume
    return DensityField(grid, vals, True, label=f"binned[{j}]")


def product_plan(marginals: MarginalSet, grid: ProductGrid | None = None) -> DensityField:
    """The independent coupling rho_1 x ... x rho_N as a product-grid density."""
    expected = marginals.product_grid()
    if grid is None:
        grid = expected
    elif grid != expected:
        raise ValueError("product grid factors do not match the marginal grids")
    vals = marginals[0].values
    for m in marginals.marginals[1:]:
        vals = np.multiply.outer(vals, m.values)
    return DensityField(grid, vals, True, label="product")


def _quantile_function(field: DensityField) -> Callable[[np.ndarray], np.ndarray]:
    g = field.grid
    cdf = np.concatenate([[0.0], np.cumsum(field.values) * g.spacing])
    cdf /= cdf[-1]
    edges = g.edges
    return lambda u: np.interp(u, cdf, edges)


def quantile_coupling(marginals: MarginalSet, M: int) -> AtomicPlan:
    """Comonotone coupling of two 1D marginals as ``M`` equal-weight atoms.

    Atom ``i`` sits at ``(F1^-1(u_i), F2^-1(u_i))`` with ``u_i = (i + 1/2)/M``,
    where the quantile functions invert the piecewise-linear quadrature CDFs.
    """
    if marginals.N != 2 or marginals.d != 1:
        raise ValueError("quantile_coupling supports only d=1, N=2")
    if M < 1:
        raise ValueError("M must be positive")
    u = (np.arange(M) + 0.5) / M
    locs = np.stack([_quantile_function(m)(u) for m in marginals], axis=1)
    return AtomicPlan(locs[:, :, None], np.full(M, 1.0 / M))


def mixture_plan(plans: Sequence[tuple[DensityField, float]]) -> DensityField:
    """Convex combination of plan densities defined on the same grid."""
    if not plans:
        raise ValueError("empty mixture")
    grid = plans[0][0].grid
    weights = np.array([w for _, w in plans], dtype=float)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError(f"mixture weights must be nonnegative and sum to 1, got {weights.tolist()}")
    vals = np.zeros(grid.shape)
    for f, w in plans:
        if f.grid != grid:
            raise ValueError("mixture components live on different grids")
        vals = vals + w * f.values
    prob = all(f.probability for f, _ in plans)
    return DensityField(grid, vals, prob, label="mixture")


def l1_distance(a: DensityField, b: DensityField) -> float:
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")
    return float(np.abs(a.values - b.values).sum() * a.grid.cell_volume)


def sup_distance(a: DensityField, b: DensityField) -> float:
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")
    return float(np.abs(a.values - b.values).max())
