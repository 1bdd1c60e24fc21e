"""Marginal-preserving Gaussian smoothing of transport plans.

For a plan ``mu`` on ``(R^d)^N`` with marginals ``rho_1..rho_N`` the operator
produces

    Theta(X) = ∫ Π_k rho_k(x_k) eta(y_k - x_k) / sigma_k(y_k)  dLambda(Y),

where ``Lambda = mu * (eta ⊗ ... ⊗ eta)`` and ``sigma_k = rho_k * eta``.
Integrating out the ``Y`` variables factor by factor gives

    Theta(X) = Σ_s w_s Π_k rho_k(x_k) g_k(x_k, a_{s,k}),
    g_k(x, a) = ∫ eta(y - x) eta(y - a) / sigma_k(y) dy,

so nothing larger than one factor grid times the number of sources is ever
materialized.  The ``y`` integral runs over the factor grid padded by
``ceil(8 sqrt(eps) / h)`` nodes on each side.  Each kernel column
``eta(. - x)`` is rescaled to unit discrete mass on that padded grid and
``sigma_k`` is formed from the same rescaled table, which makes the marginal
identity ``∫ Theta dX_{-j} = rho_j`` hold to rounding error even when ``h``
is comparable to ``sqrt(eps)``.

Atomic plans are handled by *quantile transfer* (``transfer="quantile"``,
the default for ``d = 1``): atom ``i`` with cumulative weight interval
``[C_{i-1}, C_i]`` in factor ``k`` is replaced by the restriction of
``rho_k`` to the same quantile interval.  The resulting plan has exactly the
supplied marginals and converges weakly to the atomic plan as the atoms
refine.  ``transfer="none"`` evaluates ``g_k`` at the atom positions
themselves; its marginals then carry the binning error of the atoms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import special

from .grids import (AtomicPlan, AxisGrid, DensityField, MarginalSet, ProductGrid,
                    l1_distance, marginal, marginal_atoms)
from .kernel import (KernelSpec, convolve, convolve_atoms, eta_1d, kernel_constants,
                     tail_constant)
from .sobolev import GradientField, SobolevConfig, energy, gradient, p_root_gradient

Y_MARGIN_SIGMAS = 8.0
MAX_PLAN_MISMATCH = 0.1
DELTA_CLAMP = 1e-10


@dataclass(frozen=True)
class SmoothingConfig:
    epsilon: float
    p: float = 2.0
    d: int = 1
    N: int = 2
    density_floor: float = 1e-12
    marginal_tol: float = 1e-6

    def __post_init__(self):
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not (np.isfinite(self.p) and self.p >= 1):
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.N < 2:
            raise ValueError(f"N must be >= 2, got {self.N}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if not self.density_floor > 0:
            raise ValueError("density_floor must be > 0")
        if not self.marginal_tol > 0:
            raise ValueError("marginal_tol must be > 0")

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(self.epsilon, self.d)

    def sobolev(self, p: float | None = None) -> SobolevConfig:
        return SobolevConfig(self.p if p is None else p, self.density_floor)

    def with_(self, **kw) -> "SmoothingConfig":
        vals = dict(self.__dict__)
        vals.update(kw)
        return SmoothingConfig(**vals)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class BoundCertificate:
    """A measured quantity next to the value it must not exceed."""

    name: str
    measured: float
    bound: float
    details: dict = field(default_factory=dict, compare=False)

    @property
    def margin(self) -> float:
        return self.bound - self.measured

    @property
    def passed(self) -> bool:
        return bool(self.margin >= -1e-8 * max(1.0, abs(self.bound)))

    def as_dict(self) -> dict:
        return {"name": self.name, "measured": float(self.measured), "bound": float(self.bound),
                "margin": float(self.margin), "passed": self.passed,
                "details": _jsonable(self.details)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


@dataclass(frozen=True)
class FactorKernel:
    """Per-factor quadrature tables for ``g_k`` and its ``x``-derivatives.

    ``B`` maps sources to factor nodes: ``B[x, s]`` is ``g_k(x, source s)``
    after any quantile transfer; ``dB[c]`` is the derivative in ``x_c``;
    ``pB`` is ``∫ Σ_c |(y_c - x_c)/eps|^p eta eta / sigma``.
    """

    grid: AxisGrid
    ygrid: AxisGrid
    sigma: np.ndarray
    B: np.ndarray
    dB: tuple[np.ndarray, ...]
    pB: np.ndarray | None


@dataclass(frozen=True)
class SmoothedPlan:
    theta: DensityField
    lam: DensityField
    gradients: tuple[GradientField, ...]
    source: Any
    marginals: MarginalSet
    config: SmoothingConfig
    transfer: str
    plan_mismatch: float
    factors: tuple[FactorKernel, ...] = field(repr=False)
    source_weights: np.ndarray = field(repr=False)

    @property
    def grid(self) -> ProductGrid:
        return self.theta.grid

    @property
    def is_atomic(self) -> bool:
        return isinstance(self.source, AtomicPlan)


def y_grid(grid: AxisGrid, epsilon: float) -> AxisGrid:
    """Factor grid padded by ``ceil(8 sqrt(eps)/h)`` nodes per side."""
    return grid.extended(int(math.ceil(Y_MARGIN_SIGMAS * math.sqrt(epsilon) / grid.spacing)))


def _pair_tables(x_pts: np.ndarray, y_pts: np.ndarray, epsilon: float):
    """Kernel table ``eta(y - x)`` and the coordinate offsets ``(y - x)/eps``."""
    off = (y_pts[:, None, :] - x_pts[None, :, :]) / epsilon
    d = x_pts.shape[1]
    k = np.prod(eta_1d(off * epsilon, epsilon), axis=-1) if d > 1 else eta_1d(off[..., 0] * epsilon, epsilon)
    return k, off


def _factor_kernel(rho: DensityField, spec: KernelSpec, sources: np.ndarray | None,
                   transfer: np.ndarray | None, p: float | None) -> FactorKernel:
    """Build the ``g_k`` tables for one factor.

    ``sources`` holds explicit source points (rows), or ``None`` to use the
    factor nodes.  ``transfer`` (sources x nodes, rows summing to the source
    weights) redistributes node columns onto sources.
    """
    grid = rho.grid
    yg = y_grid(grid, spec.epsilon)
    x_pts = grid.points()
    y_pts = yg.points()
    Ex, off = _pair_tables(x_pts, y_pts, spec.epsilon)
    # unit discrete mass per column keeps the marginal identity exact when h is comparable to sqrt(eps)
    Ex = Ex / (Ex.sum(axis=0) * yg.cell_volume)
    sigma = Ex @ (rho.values.reshape(-1) * grid.cell_volume)
    if sources is None:
        Ea = Ex
    else:
        Ea = _pair_tables(sources, y_pts, spec.epsilon)[0]
        Ea = Ea / (Ea.sum(axis=0) * yg.cell_volume)
    wy = (yg.cell_volume / sigma)[:, None] * Ea          # (ny, A)
    B = Ex.T @ wy
    dB = tuple((Ex * off[..., c]).T @ wy for c in range(grid.dim))
    pB = None
    if p is not None:
        pB = (Ex * np.sum(np.abs(off) ** p, axis=-1)).T @ wy
    if transfer is not None:
        w = transfer.sum(axis=1)
        Tn = (transfer / w[:, None]).T                    # (nodes, sources)
        B, dB = B @ Tn, tuple(g @ Tn for g in dB)
        pB = None if pB is None else pB @ Tn
    return FactorKernel(grid, yg, sigma, B, dB, pB)


def quantile_transfer(coords: np.ndarray, weights: np.ndarray, rho: DensityField,
                      tiebreak: Sequence[np.ndarray] = ()) -> np.ndarray:
    """Overlap matrix between atom quantile intervals and grid-cell CDF intervals.

    ``T[i, m] = |[C_{i-1}, C_i] ∩ [F_{m-1}, F_m]|`` with atoms ranked by
    ``coords`` (ties broken by ``tiebreak`` keys in order).  Rows sum to the
    atom weights and columns to the normalized cell masses of ``rho``.
    """
    order = np.lexsort(tuple(reversed([coords, *tiebreak])))
    cw = np.concatenate([[0.0], np.cumsum(weights[order])])
    cw /= cw[-1]
    cells = rho.values.reshape(-1) * rho.grid.cell_volume
    F = np.concatenate([[0.0], np.cumsum(cells)])
    F /= F[-1]
    lo = np.maximum(cw[:-1, None], F[None, :-1])
    hi = np.minimum(cw[1:, None], F[None, 1:])
    T_sorted = np.clip(hi - lo, 0.0, None)
    T = np.empty_like(T_sorted)
    T[order] = T_sorted
    return T


def _check_grid(grid: ProductGrid, marginals: MarginalSet, cfg: SmoothingConfig):
    if grid != marginals.product_grid():
        raise ValueError("product grid factors must be the marginal grids")
    if marginals.N != cfg.N or marginals.d != cfg.d:
        raise ValueError(f"config (N={cfg.N}, d={cfg.d}) does not match the marginals "
                         f"(N={marginals.N}, d={marginals.d})")


def lambda_eps(plan: AtomicPlan | DensityField, cfg: SmoothingConfig,
               grid: ProductGrid | None = None) -> DensityField:
    """Full product-kernel convolution of a plan, sampled on ``grid``."""
    spec = cfg.kernel
    if isinstance(plan, AtomicPlan):
        if grid is None:
            raise ValueError("an atomic plan needs an explicit grid")
        if plan.N != cfg.N or plan.d != cfg.d:
            raise ValueError("plan shape does not match the config")
        return convolve_atoms(plan, spec, grid)
    if not isinstance(plan.grid, ProductGrid):
        raise TypeError("grid plans must live on a ProductGrid")
    return convolve(plan, spec, target=grid)


def _plan_mismatch(plan, marginals: MarginalSet) -> float:
    if isinstance(plan, AtomicPlan):
        return max(l1_distance(marginal_atoms(plan, j, m.grid), m) for j, m in enumerate(marginals))
    return max(l1_distance(marginal(plan, j), m) for j, m in enumerate(marginals))


def _contract(weights: np.ndarray, mats: Sequence[np.ndarray], atomic: bool) -> np.ndarray:
    """``Σ_s w_s Π_k mats[k][x_k, s_k]`` as an array over the factor node sets."""
    if atomic:
        letters = "abcdefghjklmnopq"
        n = len(mats)
        expr = "i," + ",".join(f"{letters[k]}i" for k in range(n)) + "->" + letters[:n]
        return np.einsum(expr, weights, *mats, optimize=True)
    out = weights
    for ax, A in enumerate(mats):
        out = np.moveaxis(np.tensordot(A, out, axes=([1], [ax])), 0, ax)
    return out


def _outer(vectors: Sequence[np.ndarray]) -> np.ndarray:
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


def theta_eps(plan: AtomicPlan | DensityField, marginals: MarginalSet, cfg: SmoothingConfig,
              grid: ProductGrid | None = None, *, transfer: str = "auto",
              domination_p: float | None = None, strict: bool = True) -> SmoothedPlan:
    """Evaluate the smoothed plan, its ``Lambda`` and its gradients.

    ``transfer`` selects how atoms are attached to the factor grids:
    ``"quantile"``, ``"none"`` or ``"auto"`` (quantile for d=1, otherwise none).
    It is ignored for grid plans.  ``domination_p`` additionally tabulates
    the ``p``-moment kernels needed by :func:`nabla_domination`.  With
    ``strict`` the marginal identity is enforced to ``cfg.marginal_tol``.
    """
    grid = marginals.product_grid() if grid is None else grid
    _check_grid(grid, marginals, cfg)
    spec = cfg.kernel
    atomic = isinstance(plan, AtomicPlan)
    mismatch = _plan_mismatch(plan, marginals)
    if mismatch > MAX_PLAN_MISMATCH:
        raise ValueError(f"plan marginals differ from the supplied ones by {mismatch:.3g} in L1 "
                         f"(limit {MAX_PLAN_MISMATCH}); the plan is not a coupling of these marginals")

    if atomic:
        if plan.N != cfg.N or plan.d != cfg.d:
            raise ValueError("plan shape does not match the config")
        if transfer == "auto":
            transfer = "quantile" if cfg.d == 1 else "none"
        if transfer not in ("quantile", "none"):
            raise ValueError(f"unknown transfer mode {transfer!r}")
        if transfer == "quantile" and cfg.d != 1:
            raise ValueError("quantile transfer needs d = 1")
        weights = plan.weights
        factors = []
        for k, rho in enumerate(marginals):
            if transfer == "quantile":
                coords = plan.locations[:, :, 0]
                ties = [coords[:, (k + s) % cfg.N] for s in range(1, cfg.N)]
                T = quantile_transfer(coords[:, k], weights, rho, ties)
                factors.append(_factor_kernel(rho, spec, None, T, domination_p))
            else:
                factors.append(_factor_kernel(rho, spec, plan.locations[:, k, :], None, domination_p))
    else:
        if not isinstance(plan.grid, ProductGrid) or plan.grid != grid:
            raise ValueError("grid plan must live on the marginals' product grid")
        transfer = "grid"
        weights = (plan.values * grid.cell_volume).reshape(grid.factor_sizes)
        factors = [_factor_kernel(rho, spec, None, None, domination_p) for rho in marginals]

    rhos = [m.values.reshape(-1) for m in marginals]
    rho_all = _outer(rhos)
    core = _contract(weights, [f.B for f in factors], atomic)
    theta_vals = rho_all * core
    theta = DensityField(grid, theta_vals.reshape(grid.shape), False, label="theta")

    sob = cfg.sobolev()
    grads = []
    for j, fj in enumerate(factors):
        drho = gradient(marginals[j], sob).components
        comps = []
        for c in range(cfg.d):
            vecs = [drho[c].reshape(-1) if k == j else rhos[k] for k in range(cfg.N)]
            mats = [fj.dB[c] if k == j else factors[k].B for k in range(cfg.N)]
            dcore = _contract(weights, mats, atomic)
            g = _outer(vecs) * core + rho_all * dcore
            g = np.where(theta_vals < cfg.density_floor, 0.0, g)
            comps.append(g.reshape(grid.shape))
        grads.append(GradientField(grid, tuple(comps)))

    lam = lambda_eps(plan, cfg, grid)
    sp = SmoothedPlan(theta=theta, lam=lam, gradients=tuple(grads), source=plan,
                      marginals=marginals, config=cfg, transfer=transfer,
                      plan_mismatch=mismatch, factors=tuple(factors), source_weights=weights)
    if strict:
        bad = [c for c in verify_marginals(sp) if not c.passed]
        if bad:
            raise ArithmeticError(f"marginal identity violated: {bad[0].name} L1 = {bad[0].measured:.3e}")
    return sp


def theta_gradient(sp: SmoothedPlan, j: int) -> GradientField:
    """Closed-form gradient of the smoothed plan in the ``x_j`` block."""
    if not 0 <= j < sp.config.N:
        raise IndexError(f"factor index {j} out of range")
    return sp.gradients[j]


def full_gradient(sp: SmoothedPlan) -> GradientField:
    comps = tuple(c for g in sp.gradients for c in g.components)
    return GradientField(sp.grid, comps)


def verify_marginals(sp: SmoothedPlan, theta: DensityField | None = None) -> list[BoundCertificate]:
    """One certificate per factor: L1 distance of the projection to ``rho_j``."""
    theta = sp.theta if theta is None else theta
    out = []
    for j, rho in enumerate(sp.marginals):
        err = l1_distance(marginal(theta, j), rho)
        out.append(BoundCertificate(f"marginal[{j}]", err, sp.config.marginal_tol,
                                    {"plan_mismatch": sp.plan_mismatch, "transfer": sp.transfer}))
    return out


def smoothed_energy(sp: SmoothedPlan, p: float | None = None) -> float:
    return energy(sp.theta, sp.config.sobolev(p))


def energy_bound_p2(sp: SmoothedPlan) -> BoundCertificate:
    """``E(Theta) <= Σ_j E(rho_j) + N c(d)/eps`` with ``c(d) = d``."""
    cfg = sp.config
    if cfg.p != 2:
        raise ValueError(f"energy_bound_p2 needs p = 2, config has p = {cfg.p}")
    kc = kernel_constants(cfg.kernel, 2.0)
    sob = cfg.sobolev(2.0)
    marg = [energy(m, sob) for m in sp.marginals]
    bound = sum(marg) + cfg.N * kc.c_d_over_eps
    return BoundCertificate("energy_bound_p2", energy(sp.theta, sob), bound,
                            {"epsilon": cfg.epsilon, "marginal_energies": marg,
                             "c_d": kc.c_d, "c_d_quadrature": kc.c_d_over_eps_quad * cfg.epsilon})


def convolved_energy(rho: DensityField, cfg: SmoothingConfig, p: float) -> float:
    """``E(rho * eta)`` on the padded grid, so no kernel mass leaves the box."""
    sm = convolve(rho, cfg.kernel, target=y_grid(rho.grid, cfg.epsilon))
    return energy(sm, cfg.sobolev(p))


def _clamp(x: float, what: str) -> float:
    if x >= 0:
        return x
    if x >= -DELTA_CLAMP:
        return 0.0
    raise ArithmeticError(f"{what} is negative ({x:.3e}); mollification increased the energy")


def clarkson_branch(E: float, E_conv: float, p: float, branch: str,
                    coefficient: str = "derived") -> float:
    """Evaluate one branch of the energy defect term, regardless of ``p``.

    ``branch="upper"`` is ``(E - E')^{1/p}`` (the ``p >= 2`` branch);
    ``branch="lower"`` is ``[(E + E')^{1/(p-1)} - c E'^{1/(p-1)}]^{(p-1)/p}``
    (the ``1 < p < 2`` branch).  ``c`` is ``2^{1/(p-1)}`` for
    ``coefficient="derived"``, the value that comes out of Clarkson's second
    inequality and makes the bracket vanish at ``E' = E``, and ``2`` for
    ``coefficient="printed"``.  Both coincide at ``p = 2``.
    """
    if not p > 1:
        raise ValueError(f"the defect term needs p > 1, got {p}")
    if branch == "upper":
        return _clamp(E - E_conv, "E(rho) - E(rho*eta)") ** (1 / p)
    if branch != "lower":
        raise ValueError(f"unknown branch {branch!r}")
    q = 1.0 / (p - 1)
    coef = {"derived": 2.0**q, "printed": 2.0}[coefficient]
    inner = (E + E_conv) ** q - coef * E_conv**q
    return _clamp(inner, "Clarkson bracket") ** ((p - 1) / p)


def delta_from_energies(E: float, E_conv: float, p: float, coefficient: str = "derived") -> float:
    """Energy defect term from ``E(rho)`` and ``E(rho * eta)``, branch chosen by ``p``."""
    return clarkson_branch(E, E_conv, p, "upper" if p >= 2 else "lower", coefficient)


def delta_p(rho: DensityField, cfg: SmoothingConfig, coefficient: str = "derived") -> float:
    """Energy defect term of a single marginal at the config's ``p`` and ``epsilon``."""
    sob = cfg.sobolev()
    return delta_from_energies(energy(rho, sob), convolved_energy(rho, cfg, cfg.p), cfg.p, coefficient)


def energy_bound_p(sp: SmoothedPlan) -> BoundCertificate:
    """``E(Theta) <= Σ_j (E(rho_j)^{1/p} + c(d,p)/sqrt(eps))^p``."""
    cfg = sp.config
    p = cfg.p
    kc = kernel_constants(cfg.kernel, p)
    sob = cfg.sobolev()
    marg = [energy(m, sob) for m in sp.marginals]
    step = kc.c_d_p / math.sqrt(cfg.epsilon)
    bound = sum((e ** (1 / p) + step) ** p for e in marg)
    return BoundCertificate(f"energy_bound_p[p={p:g}]", energy(sp.theta, sob), bound,
                            {"epsilon": cfg.epsilon, "marginal_energies": marg, "c_d_p": kc.c_d_p,
                             "c_d_p_eps": kc.c_d_p_eps, "c_d_p_eps_quadrature": kc.c_d_p_eps_quad})


def _lambda_root_norms(mu: DensityField, cfg: SmoothingConfig, p: float) -> list[float]:
    lam = lambda_eps(mu, cfg, mu.grid)
    g = p_root_gradient(lam, cfg.sobolev(p))
    vol = mu.grid.cell_volume
    return [float((g.select(mu.grid.factor_axes(j)).power_sum(p).sum() * vol) ** (1 / p))
            for j in range(mu.grid.N)]


def energy_bound_p2_regular(mu: DensityField, marginals: MarginalSet, cfg: SmoothingConfig,
                            sp: SmoothedPlan | None = None) -> BoundCertificate:
    """``E(Theta) <= Σ_j (||∇_{x_j} sqrt(Lambda)||_2 + Δ_j)^2`` for a regular grid plan."""
    if cfg.p != 2:
        raise ValueError(f"energy_bound_p2_regular needs p = 2, config has p = {cfg.p}")
    sp = theta_eps(mu, marginals, cfg) if sp is None else sp
    sob = cfg.sobolev(2.0)
    norms = _lambda_root_norms(mu, cfg, 2.0)
    E = [energy(m, sob) for m in marginals]
    Ec = [convolved_energy(m, cfg, 2.0) for m in marginals]
    deltas = [math.sqrt(_clamp(a - b, "E(rho) - E(rho*eta)")) for a, b in zip(E, Ec)]
    bound = sum((n + dl) ** 2 for n, dl in zip(norms, deltas))
    return BoundCertificate("energy_bound_p2_regular", energy(sp.theta, sob), bound,
                            {"epsilon": cfg.epsilon, "lambda_root_norms": norms, "deltas": deltas,
                             "plan_energy": energy(mu, sob), "marginal_energies": E,
                             "convolved_energies": Ec})


def energy_bound_p_regular(mu: DensityField, marginals: MarginalSet, cfg: SmoothingConfig,
                           sp: SmoothedPlan | None = None) -> BoundCertificate:
    """``E(Theta) <= Σ_j (||∇_{x_j} Lambda^{1/p}||_p + c_p Δ_j)^p``, ``p > 1``."""
    p = cfg.p
    if not p > 1:
        raise ValueError(f"the regular-plan bound needs p > 1, got {p}")
    sp = theta_eps(mu, marginals, cfg) if sp is None else sp
    sob = cfg.sobolev()
    c_p = 2 ** ((p - 1) / p)
    norms = _lambda_root_norms(mu, cfg, p)
    E = [energy(m, sob) for m in marginals]
    Ec = [convolved_energy(m, cfg, p) for m in marginals]
    deltas = [delta_from_energies(a, b, p) for a, b in zip(E, Ec)]
    printed = [delta_from_energies(a, b, p, "printed") for a, b in zip(E, Ec)]
    bound = sum((n + c_p * dl) ** p for n, dl in zip(norms, deltas))
    return BoundCertificate(f"energy_bound_p_regular[p={p:g}]", energy(sp.theta, sob), bound,
                            {"epsilon": cfg.epsilon, "c_p": c_p, "lambda_root_norms": norms,
                             "deltas": deltas, "deltas_printed_coefficient": printed,
                             "plan_energy": energy(mu, sob), "marginal_energies": E,
                             "convolved_energies": Ec})


def lambda_upper_ratio(lam: DensityField, tau: Sequence[np.ndarray], epsilon: float,
                       exponent_divisor: int = 1) -> np.ndarray:
    """Node-wise ``Lambda / [(2 pi eps)^{-(N-1)d/(2 m)} Π_k tau_k^{1/N}]``.

    ``tau_k`` holds ``mu_k * eta`` on factor ``k`` (flattened).  With
    ``exponent_divisor = 1`` this is the bound obtained from Hölder's
    inequality and ``eta <= eta(0)``; ``exponent_divisor = N`` gives the
    sharper-looking constant, which fails for ``2 pi eps < 1``.
    """
    grid = lam.grid
    N, d = grid.N, grid.d
    m = exponent_divisor
    bound = (2 * math.pi * epsilon) ** (-(N - 1) * d / (2 * m)) * _outer([t ** (1.0 / N) for t in tau])
    return lam.values.reshape(bound.shape) / bound


def _source_marginal_convolutions(sp_or_plan, cfg: SmoothingConfig, grid: ProductGrid) -> list[np.ndarray]:
    spec = cfg.kernel
    plan = sp_or_plan
    out = []
    for k, fac in enumerate(grid.factors):
        if isinstance(plan, AtomicPlan):
            nodes = fac.points()
            diff = nodes[:, None, :] - plan.locations[None, :, k, :]
            tab = spec.peak * np.exp(-np.sum(diff**2, axis=-1) / (2 * spec.epsilon))
            out.append(tab @ plan.weights)
        else:
            out.append(convolve(marginal(plan, k), spec).values.reshape(-1))
    return out


def lambda_upper_bound(sp: SmoothedPlan) -> BoundCertificate:
    """Max over nodes of ``Lambda`` divided by its Hölder upper bound (must be <= 1)."""
    cfg = sp.config
    tau = _source_marginal_convolutions(sp.source, cfg, sp.grid)
    ratio = lambda_upper_ratio(sp.lam, tau, cfg.epsilon)
    printed = lambda_upper_ratio(sp.lam, tau, cfg.epsilon, exponent_divisor=cfg.N)
    return BoundCertificate("lambda_upper_bound", float(ratio.max()), 1.0,
                            {"epsilon": cfg.epsilon, "max_ratio_printed_exponent": float(printed.max())})


def ball_mass(rho: DensityField, R: float) -> float:
    pts = rho.grid.points()
    inside = np.sqrt(np.sum(pts**2, axis=-1)) <= R
    return float(rho.values.reshape(-1)[inside].sum() * rho.grid.cell_volume)


def marginal_conv_lower_bound(rho: DensityField, cfg: SmoothingConfig, R: float, gamma: float,
                              target: AxisGrid | None = None) -> BoundCertificate:
    """Max over nodes of ``gamma (2 pi eps)^{-d/2} exp(-(|y|+R)^2/2eps) / (rho*eta)(y)``."""
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    if not R > 0:
        raise ValueError("R must be positive")
    inside = ball_mass(rho, R)
    if inside < gamma:
        raise ValueError(f"rho(B(0,{R})) = {inside:.6g} < gamma = {gamma}")
    spec = cfg.kernel
    target = rho.grid if target is None else target
    conv = convolve(rho, spec, target=target).values.reshape(-1)
    r = np.sqrt(np.sum(target.points() ** 2, axis=-1))
    lower = gamma * spec.peak * np.exp(-((r + R) ** 2) / (2 * spec.epsilon))
    ratio = lower / conv
    return BoundCertificate("marginal_conv_lower_bound", float(ratio.max()), 1.0,
                            {"R": R, "gamma": gamma, "ball_mass": inside, "epsilon": cfg.epsilon})


def _sample_plan_sources(plan, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from ``mu`` as points of shape ``(n, N, d)``."""
    if isinstance(plan, AtomicPlan):
        idx = rng.choice(plan.M, size=n, p=plan.weights)
        return plan.locations[idx]
    grid = plan.grid
    w = plan.values.reshape(-1)
    idx = rng.choice(w.size, size=n, p=w / w.sum())
    coords = grid.coordinates().reshape(-1, grid.N * grid.d)[idx]
    return coords.reshape(n, grid.N, grid.d)


def _sample_conditional(rho: DensityField, y: np.ndarray, epsilon: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Draw ``x`` from ``rho(x) eta(y - x) / (rho * eta)(y)`` on the nodes of ``rho``."""
    nodes = rho.grid.points()
    logw = np.log(np.maximum(rho.values.reshape(-1), 1e-300))[None, :] \
        - np.sum((y[:, None, :] - nodes[None, :, :]) ** 2, axis=-1) / (2 * epsilon)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    cdf = np.cumsum(w, axis=1)
    u = rng.random(len(y)) * cdf[:, -1]
    idx = np.minimum((cdf < u[:, None]).sum(axis=1), nodes.shape[0] - 1)
    return nodes[idx]


def diagonal_mass(plan, marginals: MarginalSet, cfg: SmoothingConfig, r: float, *,
                  samples: int = 20000, seed: int = 0) -> BoundCertificate:
    """Off-diagonal mass ``{|X - Y| >= r}`` of the two couplings against ``N K(d) e^{-r^2/4N eps}``.

    The certified quantity is the union-bound surrogate
    ``Σ_j rho_j(R^d) * eta({|z| >= r/sqrt(N)})``.  Monte-Carlo estimates of
    the exact events under both couplings are attached in ``details``.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    N, d, eps = cfg.N, cfg.d, cfg.epsilon
    tau = r / math.sqrt(N)
    tail = float(special.gammaincc(d / 2, tau * tau / (2 * eps)))
    surrogate = sum(m.mass for m in marginals) * tail
    bound = N * tail_constant(d) * math.exp(-r * r / (4 * N * eps))

    rng = np.random.default_rng(seed)
    A = _sample_plan_sources(plan, samples, rng)
    Y = A + math.sqrt(eps) * rng.standard_normal(A.shape)
    X = np.stack([_sample_conditional(marginals[k], Y[:, k, :], eps, rng) for k in range(N)], axis=1)
    hit_p = np.sqrt(np.sum((X - Y) ** 2, axis=(1, 2))) >= r
    Z = math.sqrt(eps) * rng.standard_normal(A.shape)
    hit_q = np.sqrt(np.sum(Z**2, axis=(1, 2))) >= r
    est_p, est_q = float(hit_p.mean()), float(hit_q.mean())
    exact_q = float(special.gammaincc(N * d / 2, r * r / (2 * eps)))
    return BoundCertificate(f"diagonal_mass[r={r:.6g}]", surrogate, bound, {
        "epsilon": eps, "r": r, "surrogate": surrogate,
        "P_monte_carlo": est_p, "P_standard_error": math.sqrt(max(est_p * (1 - est_p), 1e-300) / samples),
        "Q_monte_carlo": est_q, "Q_standard_error": math.sqrt(max(est_q * (1 - est_q), 1e-300) / samples),
        "Q_exact": exact_q, "samples": samples, "seed": seed})


def nabla_domination(sp: SmoothedPlan, j: int, p: float) -> BoundCertificate:
    """Node-wise ``|∇_j Theta|^p Theta^{1-p} <= 2^{p-1}[|∇rho_j/rho_j|^p Theta + ∫|∇eta/eta|^p dP]``.

    Requires the smoothed plan to have been built with ``domination_p = p``.
    Reports the largest excess of the left side over the right side on the
    nodes where both ``Theta`` and ``rho_j`` exceed the density floor.
    """
    fj = sp.factors[j]
    if fj.pB is None:
        raise ValueError("smoothed plan was built without domination tables; pass domination_p")
    cfg = sp.config
    atomic = sp.is_atomic
    rhos = [m.values.reshape(-1) for m in sp.marginals]
    rho_all = _outer(rhos)
    mats = [fj.pB if k == j else sp.factors[k].B for k in range(cfg.N)]
    moment = rho_all * _contract(sp.source_weights, mats, atomic)
    theta = sp.theta.values.reshape(rho_all.shape)
    drho = gradient(sp.marginals[j], cfg.sobolev()).power_sum(p).reshape(-1)
    rj = rhos[j]
    ok_j = rj >= cfg.density_floor
    score = np.zeros_like(rj)
    score[ok_j] = drho[ok_j] / rj[ok_j] ** p
    shape = [1] * cfg.N
    shape[j] = -1
    score_b = score.reshape(shape)
    lhs_num = sum(np.abs(c.reshape(rho_all.shape)) ** p for c in sp.gradients[j].components)
    mask = (theta >= cfg.density_floor) & ok_j.reshape(shape)
    lhs = np.where(mask, lhs_num * np.where(mask, theta, 1.0) ** (1 - p), 0.0)
    rhs = 2 ** (p - 1) * (score_b * theta + moment)
    excess = np.where(mask, lhs - rhs, -np.inf)
    return BoundCertificate(f"nabla_domination[j={j},p={p:g}]", float(excess.max()), 0.0,
                            {"nodes_checked": int(mask.sum())})


def superadditivity(field: DensityField, cfg: SmoothingConfig, p: float | None = None) -> BoundCertificate:
    """``Σ_j E(mu_j) <= E(mu)`` for a grid plan density and its projections."""
    sob = cfg.sobolev(p)
    parts = [energy(marginal(field, j), sob) for j in range(field.grid.N)]
    return BoundCertificate(f"superadditivity[p={sob.p:g}]", sum(parts), energy(field, sob),
                            {"marginal_energies": parts})


def mollification_monotonicity(rho: DensityField, cfg: SmoothingConfig,
                               p: float | None = None) -> BoundCertificate:
    """``E(rho * eta) <= E(rho)`` at the config's epsilon."""
    sob = cfg.sobolev(p)
    return BoundCertificate(f"mollification[p={sob.p:g},eps={cfg.epsilon:g}]",
                            convolved_energy(rho, cfg, sob.p), energy(rho, sob), {"epsilon": cfg.epsilon})
