"""Gaussian mollifier, its tail bounds, and convolutions on grids.

The kernel of variance ``epsilon`` in ``R^d`` is

    eta(z) = (2 pi eps)^(-d/2) exp(-|z|^2 / (2 eps)),

with gradient ``-(z/eps) eta(z)``.  Convolutions are dense separable sums
(one ``n x n`` matrix per axis), which keeps every output node strictly
positive and makes the quadrature error easy to reason about.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .grids import AtomicPlan, AxisGrid, DensityField, Grid, ProductGrid

ATOM_MARGIN_SIGMAS = 6.0


@dataclass(frozen=True)
class KernelSpec:
    epsilon: float
    dim: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.epsilon)

    @property
    def peak(self) -> float:
        return (2 * math.pi * self.epsilon) ** (-self.dim / 2)


@dataclass(frozen=True)
class KernelConstants:
    """Numbers attached to the kernel at a given ``epsilon`` and exponent ``p``.

    ``c_d_over_eps`` is ``∫|∇eta|^2/eta`` and ``c_d_p_eps`` is
    ``∫|∇eta|^p / eta^(p-1)`` with the componentwise p-norm of the gradient.
    The ``*_quad`` fields hold the quadrature cross-checks.
    """

    epsilon: float
    dim: int
    p: float
    K_d: float
    c_d_over_eps: float
    c_d_over_eps_quad: float
    c_d_p_eps: float
    c_d_p_eps_quad: float
    c_p: float

    @property
    def c_d(self) -> float:
        """The dimension constant in ``c(d)/eps``; equals ``d`` for the Gaussian."""
        return self.c_d_over_eps * self.epsilon

    @property
    def c_d_p(self) -> float:
        """Constant ``c(d,p)`` such that ``(c_d_p_eps)^(1/p) / p = c(d,p)/sqrt(eps)``."""
        return (self.c_d_p_eps * self.epsilon ** (self.p / 2)) ** (1 / self.p) / self.p

    def as_dict(self) -> dict:
        out = dict(self.__dict__)
        out["c_d"] = self.c_d
        out["c_d_p"] = self.c_d_p
        return out


def eta(z, spec: KernelSpec) -> np.ndarray:
    """Kernel values at points ``z`` of shape ``(..., dim)`` (or scalars when dim=1)."""
    z = np.asarray(z, dtype=float)
    if spec.dim == 1 and (z.ndim == 0 or z.shape[-1] != 1):
        r2 = z**2
    else:
        r2 = np.sum(z**2, axis=-1)
    return spec.peak * np.exp(-r2 / (2 * spec.epsilon))


def grad_eta(z, spec: KernelSpec) -> np.ndarray:
    """Closed-form gradient ``-(z/eps) eta(z)``, same trailing shape as ``z``."""
    z = np.asarray(z, dtype=float)
    if spec.dim == 1 and (z.ndim == 0 or z.shape[-1] != 1):
        return -(z / spec.epsilon) * eta(z, spec)
    return -(z / spec.epsilon) * eta(z, spec)[..., None]


def eta_1d(z: np.ndarray, epsilon: float) -> np.ndarray:
    return np.exp(-np.asarray(z) ** 2 / (2 * epsilon)) / math.sqrt(2 * math.pi * epsilon)


def sphere_area(d: int) -> float:
    """Surface measure of the unit sphere in ``R^d``."""
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


def tail_constant(d: int) -> float:
    """``K(d) = (sigma_d / 2) (2/pi)^(d/2) Gamma(d/2)``; simplifies to ``2^(d/2)``."""
    return 0.5 * sphere_area(d) * (2 / math.pi) ** (d / 2) * math.gamma(d / 2)


def tail_mass(tau: float, spec: KernelSpec) -> tuple[float, float]:
    """Kernel mass outside the ball of radius ``tau`` and its exponential bound.

    The measured value is a radial quadrature of the density of ``|z|``;
    the bound is ``K(d) exp(-tau^2 / (4 eps))``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    d, eps = spec.dim, spec.epsilon
    area = sphere_area(d)

    def radial(r):
        return area * r ** (d - 1) * (2 * math.pi * eps) ** (-d / 2) * math.exp(-r * r / (2 * eps))

    measured, err = integrate.quad(radial, tau, np.inf, epsabs=1e-15, epsrel=1e-12, limit=200)
    # chi-square survival function as an independent evaluation
    closed = float(special.gammaincc(d / 2, tau * tau / (2 * eps)))
    if abs(measured - closed) > 1e-9 * max(closed, 1e-300) + 1e-14:
        raise ArithmeticError(f"tail quadrature disagrees with the closed form: {measured} vs {closed}")
    bound = tail_constant(d) * math.exp(-tau * tau / (4 * eps))
    return measured, bound


def _axis_matrix(src: AxisGrid, dst: AxisGrid, epsilon: float) -> np.ndarray:
    """``A[i, j] = eta_1d(dst_i - src_j) * h_src`` so that ``A @ f`` is the convolution."""
    diff = dst.nodes[:, None] - src.nodes[None, :]
    return eta_1d(diff, epsilon) * src.spacing


def _apply_axes(values: np.ndarray, mats: list[np.ndarray]) -> np.ndarray:
    out = values
    for ax, A in enumerate(mats):
        out = np.moveaxis(np.tensordot(A, out, axes=([1], [ax])), 0, ax)
    return out


def convolve(field: DensityField, spec: KernelSpec, target: Grid | None = None) -> DensityField:
    """Convolve a grid density with the kernel, one axis at a time.

    The output is sampled on ``target`` (default: the input grid), which must
    have the same factor structure.  All kernel weights are kept, however
    small, so the result is strictly positive wherever the input has mass.
    """
    grid = field.grid
    target = grid if target is None else target
    if isinstance(grid, AxisGrid):
        if not isinstance(target, AxisGrid) or target.dim != grid.dim:
            raise ValueError("target grid does not match the field's structure")
        if spec.dim != grid.dim:
            raise ValueError("kernel dimension does not match the grid")
        src_axes, dst_axes = [grid] * grid.dim, [target] * grid.dim
    else:
        if not isinstance(target, ProductGrid) or target.N != grid.N or target.d != grid.d:
            raise ValueError("target grid does not match the field's structure")
        if spec.dim != grid.d:
            raise ValueError("kernel dimension does not match the grid")
        src_axes = [f for f in grid.factors for _ in range(f.dim)]
        dst_axes = [f for f in target.factors for _ in range(f.dim)]
    mats = [_axis_matrix(s, t, spec.epsilon) for s, t in zip(src_axes, dst_axes)]
    vals = _apply_axes(field.values, mats)
    return DensityField(target, vals, False, label=f"{field.label}*eta")


def _factor_kernel_table(points: np.ndarray, grid: AxisGrid, spec: KernelSpec) -> np.ndarray:
    """``T[i, node] = eta(node - points[i])`` flattened over the factor grid."""
    nodes = grid.points()
    diff = nodes[None, :, :] - points[:, None, :]
    return spec.peak * np.exp(-np.sum(diff**2, axis=-1) / (2 * spec.epsilon))


def convolve_atoms(plan: AtomicPlan, spec: KernelSpec, grid: ProductGrid) -> DensityField:
    """Exact kernel sum ``Σ_i w_i Π_k eta(y_k - a_{i,k})`` at the grid nodes."""
    if grid.N != plan.N or grid.d != plan.d or spec.dim != plan.d:
        raise ValueError("grid/kernel dimensions do not match the plan")
    margin = ATOM_MARGIN_SIGMAS * spec.sigma
    for k, fac in enumerate(grid.factors):
        pts = plan.locations[:, k, :]
        if pts.min() - margin < fac.lo or pts.max() + margin > fac.hi:
            tails = [fac.lo - (pts.min() - margin), (pts.max() + margin) - fac.hi]
            warnings.warn(f"factor {k}: atoms are within {ATOM_MARGIN_SIGMAS} kernel widths of the "
                          f"grid edge (shortfall {max(tails):.3g}); kernel mass will be truncated",
                          RuntimeWarning, stacklevel=2)
            break
    tables = [_factor_kernel_table(plan.locations[:, k, :], fac, spec) for k, fac in enumerate(grid.factors)]
    vals = _outer_weighted_sum(plan.weights, tables)
    out = DensityField(grid, vals.reshape(grid.shape), False, label="lambda")
    lost = 1.0 - out.mass
    if lost > 1e-6:
        warnings.warn(f"kernel sum lost mass {lost:.3e} to the grid edges", RuntimeWarning, stacklevel=2)
    return out


def _outer_weighted_sum(weights: np.ndarray, tables: list[np.ndarray]) -> np.ndarray:
    """``Σ_i w_i ⊗_k tables[k][i, :]`` as a flat array over the product of the node sets."""
    letters = "abcdefghjklmnopq"
    if len(tables) > len(letters):
        raise ValueError("too many factors")
    spec = "i," + ",".join(f"i{letters[k]}" for k in range(len(tables)))
    spec += "->" + letters[: len(tables)]
    return np.einsum(spec, weights, *tables, optimize=True)


def _abs_moment_quad(p: float, epsilon: float) -> float:
    """``∫ |z/eps|^p eta_1d(z) dz`` by adaptive quadrature."""
    s = math.sqrt(epsilon)

    def f(z):
        return abs(z / epsilon) ** p * math.exp(-z * z / (2 * epsilon)) / math.sqrt(2 * math.pi * epsilon)

    val, err = integrate.quad(f, 0.0, 40 * s, epsabs=0.0, epsrel=1e-12, limit=200)
    if not np.isfinite(val) or err > 1e-8 * abs(val):
        raise ArithmeticError(f"kernel moment quadrature did not converge (p={p}, eps={epsilon})")
    return 2 * val


def kernel_constants(spec: KernelSpec, p: float = 2.0) -> KernelConstants:
    """Analytic kernel constants with quadrature cross-checks.

    Raises :class:`ArithmeticError` if a quadrature value disagrees with its
    closed form by more than 1e-6 relative.
    """
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    d, eps = spec.dim, spec.epsilon
    c2 = d / eps
    # |∇eta|^p / eta^(p-1) = Σ_i |z_i/eps|^p eta(z); the integral factorizes per coordinate
    c2_quad = d * _abs_moment_quad(2.0, eps)
    cp = d * 2 ** (p / 2) * math.gamma((p + 1) / 2) / (math.sqrt(math.pi) * eps ** (p / 2))
    cp_quad = d * _abs_moment_quad(p, eps)
    for name, exact, quad in (("c_d_over_eps", c2, c2_quad), ("c_d_p_eps", cp, cp_quad)):
        if abs(exact - quad) > 1e-6 * exact:
            raise ArithmeticError(f"{name}: quadrature {quad!r} disagrees with closed form {exact!r}")
    return KernelConstants(epsilon=eps, dim=d, p=float(p), K_d=tail_constant(d),
                           c_d_over_eps=c2, c_d_over_eps_quad=c2_quad,
                           c_d_p_eps=cp, c_d_p_eps_quad=cp_quad,
                           c_p=2 ** ((p - 1) / p))
