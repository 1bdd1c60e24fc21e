"""Drivers that tabulate how smoothed plans behave along parameter sequences.

Each driver returns a :class:`ConvergenceTable`: one row per value of the
varying parameter (``epsilon`` or the sequence index ``n``), one column per
tracked quantity, and a boolean verdict per checked column.  Verdicts are
trend-based: a column must be non-increasing along the rows and its final
entry must fall under a threshold.  No convergence rate is asserted.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grids import (AtomicPlan, DensityField, MarginalSet, ProductGrid, marginal,
                    mixture_plan, product_plan)
from .kernel import KernelSpec, convolve
from .smoothing import SmoothedPlan, SmoothingConfig, theta_eps, y_grid
from .sobolev import d1p_distance, energy, finite_integral_check, lp_root_distance

DEFAULT_EPSILONS = (0.4, 0.2, 0.1, 0.05, 0.025)
DEFAULT_SEQUENCE = (2, 4, 8, 16, 32)
TREND_SLACK = 1e-12


@dataclass(frozen=True)
class EpsilonSchedule:
    values: tuple[float, ...] = DEFAULT_EPSILONS

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("empty epsilon schedule")
        if any(not (np.isfinite(v) and v > 0) for v in vals):
            raise ValueError(f"epsilon values must be positive, got {vals}")
        if any(b >= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"epsilon schedule must be strictly decreasing, got {vals}")
        object.__setattr__(self, "values", vals)

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class TestFunction:
    """Bounded continuous function of the flattened plan coordinates ``(..., N*d)``."""

    __test__ = False  # not a pytest class

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    sup_norm: float
    lipschitz: float

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.fn(X)


def _logistic_bump(t: np.ndarray, width: float = 2.0) -> np.ndarray:
    return 1.0 / ((1.0 + np.exp(t - width)) * (1.0 + np.exp(-t - width)))


def clipped_quadratic(N: int, d: int, cap: float = 10.0, normalized: bool = False) -> TestFunction:
    """``Σ_{j<k} min(|x_j - x_k|^2, cap)``, optionally divided by its supremum."""
    pairs = N * (N - 1) // 2
    scale = 1.0 / (cap * pairs) if normalized else 1.0

    def fn(X):
        Xr = X.reshape(X.shape[:-1] + (N, d))
        tot = 0.0
        for j in range(N):
            for k in range(j + 1, N):
                tot = tot + np.minimum(np.sum((Xr[..., j, :] - Xr[..., k, :]) ** 2, axis=-1), cap)
        return scale * tot

    name = "clipped_quadratic" + ("_normalized" if normalized else "")
    return TestFunction(name, fn, cap * pairs * scale, 2 * math.sqrt(cap) * pairs * scale * math.sqrt(2))


@dataclass(frozen=True)
class TestFunctionSet:
    """Named bounded test functions; :meth:`default` builds the standard trio."""

    __test__ = False

    functions: tuple[TestFunction, ...]

    def __iter__(self):
        return iter(self.functions)

    def __len__(self) -> int:
        return len(self.functions)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.functions]

    @classmethod
    def default(cls, N: int = 2, d: int = 1) -> "TestFunctionSet":
        m = N * d
        cos_sum = TestFunction("cos_sum", lambda X: np.cos(X.sum(axis=-1)), 1.0, math.sqrt(m))
        # each bump factor is bounded by 1 and has slope at most 1/4
        bumps = TestFunction("logistic_bumps", lambda X: np.prod(_logistic_bump(X), axis=-1), 1.0,
                             0.25 * math.sqrt(m))
        return cls((cos_sum, bumps, clipped_quadratic(N, d, normalized=True)))


@dataclass
class ConvergenceTable:
    """Rows indexed by ``index``; ``columns`` maps names to per-row values."""

    index_name: str
    index: list[float]
    columns: dict[str, list[float]] = field(default_factory=dict)
    verdicts: dict[str, bool] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def column(self, name: str) -> np.ndarray:
        return np.asarray(self.columns[name], dtype=float)

    def to_csv(self, path) -> None:
        names = list(self.columns)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([self.index_name, *names])
            for r, idx in enumerate(self.index):
                w.writerow([format(idx, ".17g"), *(format(self.columns[c][r], ".17g") for c in names)])

    def as_dict(self) -> dict:
        return {"index_name": self.index_name, "index": list(self.index),
                "columns": {k: list(map(float, v)) for k, v in self.columns.items()},
                "verdicts": dict(self.verdicts), "passed": self.passed, "meta": self.meta}


def non_increasing(values: Sequence[float], slack: float = TREND_SLACK) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(np.all(np.diff(v) <= slack * np.maximum(1.0, np.abs(v[:-1]))))


def trend_verdict(values: Sequence[float], threshold: float) -> bool:
    """Non-increasing along the rows and final entry at most ``threshold``."""
    return non_increasing(values) and float(values[-1]) <= threshold


def integrate_plan(plan: AtomicPlan | DensityField, psi: Callable[[np.ndarray], np.ndarray]) -> float:
    """``∫ psi dmu``: an exact finite sum for atoms, midpoint quadrature for grids."""
    if isinstance(plan, AtomicPlan):
        return plan.integrate(psi)
    grid = plan.grid
    X = grid.coordinates()
    return float(np.sum(psi(X) * plan.values) * grid.cell_volume)


def smooth_schedule(plan, marginals: MarginalSet, cfg: SmoothingConfig,
                    schedule: EpsilonSchedule, **kw) -> list[SmoothedPlan]:
    return [theta_eps(plan, marginals, cfg.with_(epsilon=e), **kw) for e in schedule]


def weak_convergence(plan, marginals: MarginalSet, cfg: SmoothingConfig,
                     schedule: EpsilonSchedule | None = None, psis: TestFunctionSet | None = None,
                     tol: float = 0.01, smoothed: Sequence[SmoothedPlan] | None = None) -> ConvergenceTable:
    """Gaps ``|∫psi dTheta - ∫psi dmu|`` per epsilon and test function.

    A column passes when it is non-increasing and its final gap is at most
    ``max(tol, 2 * binned marginal mismatch of mu)``.
    """
    schedule = schedule or EpsilonSchedule()
    psis = psis or TestFunctionSet.default(cfg.N, cfg.d)
    smoothed = smoothed or smooth_schedule(plan, marginals, cfg, schedule)
    mismatch = smoothed[0].plan_mismatch
    threshold = max(tol, 2 * mismatch)
    table = ConvergenceTable("epsilon", list(schedule.values),
                             meta={"tol": tol, "plan_mismatch": mismatch, "threshold": threshold})
    for psi in psis:
        ref = integrate_plan(plan, psi)
        gaps = [abs(integrate_plan(sp.theta, psi) - ref) for sp in smoothed]
        table.columns[psi.name] = gaps
        table.verdicts[psi.name] = trend_verdict(gaps, threshold)
        table.meta[f"{psi.name}_reference"] = ref
    return table


def cost_convergence(plan, marginals: MarginalSet, cfg: SmoothingConfig,
                     schedule: EpsilonSchedule | None = None, cost: TestFunction | None = None,
                     tol: float = 0.02, smoothed: Sequence[SmoothedPlan] | None = None) -> ConvergenceTable:
    """Transport cost of the smoothed plans against the cost of ``mu``.

    Default cost is ``min(|x_j - x_k|^2, 10)`` summed over pairs.  The gap
    column must be non-increasing with final value at most ``tol``.
    """
    schedule = schedule or EpsilonSchedule()
    cost = cost or clipped_quadratic(cfg.N, cfg.d)
    smoothed = smoothed or smooth_schedule(plan, marginals, cfg, schedule)
    ref = integrate_plan(plan, cost)
    vals = [integrate_plan(sp.theta, cost) for sp in smoothed]
    gaps = [abs(v - ref) for v in vals]
    return ConvergenceTable("epsilon", list(schedule.values),
                            {"cost": vals, "cost_gap": gaps},
                            {"cost_gap": trend_verdict(gaps, tol)},
                            {"reference_cost": ref, "tol": tol, "cost": cost.name})


def d1p_convergence(mu: DensityField, marginals: MarginalSet, cfg: SmoothingConfig,
                    schedule: EpsilonSchedule | None = None, fraction: float = 0.05,
                    smoothed: Sequence[SmoothedPlan] | None = None) -> ConvergenceTable:
    """``d^{1,p}(Theta^eps[mu], mu)`` along the schedule for a regular grid plan.

    Raises ``ValueError`` if ``mu`` fails :func:`finite_integral_check`.
    """
    schedule = schedule or EpsilonSchedule()
    sob = cfg.sobolev()
    check = finite_integral_check(mu, sob, levels=3)
    if check.verdict != "convergent":
        raise ValueError(f"plan density is not W^1,p-regular on this grid ({check.verdict}, "
                         f"integrals {check.integrals})")
    smoothed = smoothed or smooth_schedule(mu, marginals, cfg, schedule)
    col = [d1p_distance(sp.theta, mu, sob) for sp in smoothed]
    ok = trend_verdict(col, fraction * col[0]) if col[0] > 0 else max(col) <= 1e-6
    return ConvergenceTable("epsilon", list(schedule.values), {f"d1p[p={cfg.p:g}]": col},
                            {f"d1p[p={cfg.p:g}]": ok},
                            {"fraction": fraction, "regularity": check.as_dict()})


def mixture_sequence(mu: DensityField, marginals: MarginalSet,
                     ns: Sequence[int] = DEFAULT_SEQUENCE) -> list[DensityField]:
    """``mu^n = (1 - 1/n) mu + (1/n) rho_1 x ... x rho_N``; marginals stay fixed."""
    prod = product_plan(marginals, mu.grid)
    return [mixture_plan([(mu, 1 - 1 / n), (prod, 1 / n)]) for n in ns]


def perturbed_sequence(mu: DensityField, ns: Sequence[int] = DEFAULT_SEQUENCE
                       ) -> tuple[list[DensityField], list[MarginalSet]]:
    """``mu^n = mu * eta^{1/n^2}`` renormalized, with its own projected marginals."""
    grid = mu.grid
    plans, margs = [], []
    for n in ns:
        mn = convolve(mu, KernelSpec(1.0 / n**2, grid.d)).normalized()
        plans.append(mn)
        margs.append(MarginalSet(tuple(marginal(mn, j) for j in range(grid.N))))
    return plans, margs


def mu_continuity(mu_sequence: Sequence[DensityField], mu_limit: DensityField,
                  marginals_sequence: Sequence[MarginalSet], marginals_limit: MarginalSet,
                  cfg: SmoothingConfig, ns: Sequence[int] = DEFAULT_SEQUENCE,
                  fraction: float = 0.1) -> ConvergenceTable:
    """``d^{1,p}(Theta[mu^n], Theta[mu])`` at fixed epsilon along a plan sequence.

    Also records the L^p distance of the p-th roots, the node-wise sup
    distance of the smoothed densities and the marginal distances
    ``max_j d^{1,p}(rho_j^n, rho_j)``; the latter must be non-increasing
    (or identically zero), otherwise ``ValueError`` is raised.
    """
    if not (len(mu_sequence) == len(marginals_sequence) == len(ns)):
        raise ValueError("sequence lengths differ")
    sob = cfg.sobolev()
    marg_d = [max(d1p_distance(a, b, sob) for a, b in zip(ms, marginals_limit)) for ms in marginals_sequence]
    if not (max(marg_d) <= 1e-12 or non_increasing(marg_d, slack=1e-9)):
        raise ValueError(f"marginals of the sequence do not converge: {marg_d}")
    limit = theta_eps(mu_limit, marginals_limit, cfg).theta
    d1p, lp, sup = [], [], []
    for mu_n, ms in zip(mu_sequence, marginals_sequence):
        th = theta_eps(mu_n, ms, cfg).theta
        d1p.append(d1p_distance(th, limit, sob))
        lp.append(lp_root_distance(th, limit, sob))
        sup.append(float(np.abs(th.values - limit.values).max()))
    ok = trend_verdict(d1p, fraction * d1p[0]) if d1p[0] > 0 else max(d1p) <= 1e-12
    table = ConvergenceTable("n", [float(n) for n in ns],
                             {"d1p": d1p, "lp_roots": lp, "sup": sup, "marginal_d1p": marg_d},
                             {"d1p": ok,
                              "lp_roots": non_increasing(lp),
                              "sup": non_increasing(sup),
                              "d1p_dominates_lp": all(a + 1e-12 >= b for a, b in zip(d1p, lp))},
                             {"epsilon": cfg.epsilon, "fraction": fraction, "p": cfg.p})
    return table


def energy_convergence_report(marginals: MarginalSet, cfg: SmoothingConfig,
                              schedule: EpsilonSchedule | None = None,
                              rel_tol: float = 0.01) -> ConvergenceTable:
    """``E(rho_j * eta^eps)`` per marginal along the schedule.

    Each column must grow (weakly) as epsilon decreases, stay below
    ``E(rho_j)`` up to 1e-8, and end within ``rel_tol`` of ``E(rho_j)``.
    """
    schedule = schedule or EpsilonSchedule()
    sob = cfg.sobolev()
    table = ConvergenceTable("epsilon", list(schedule.values), meta={"rel_tol": rel_tol, "p": cfg.p})
    for j, rho in enumerate(marginals):
        ref = energy(rho, sob)
        col = []
        for e in schedule:
            sm = convolve(rho, KernelSpec(e, rho.grid.dim), target=y_grid(rho.grid, e))
            col.append(energy(sm, sob))
        name = f"energy[{j}]"
        table.columns[name] = col
        table.meta[f"{name}_reference"] = ref
        increasing = bool(np.all(np.diff(col) >= -1e-8))
        below = all(c <= ref + 1e-8 for c in col)
        table.verdicts[f"{name}_monotone"] = increasing and below
        table.verdicts[f"{name}_limit"] = abs(col[-1] - ref) <= rel_tol * ref
    return table


def ball_radius(rho: DensityField, mass: float) -> float:
    """Smallest node radius ``R`` with ``rho(B(0,R)) >= mass`` (node quadrature)."""
    pts = rho.grid.points()
    r = np.sqrt(np.sum(pts**2, axis=-1))
    order = np.argsort(r, kind="stable")
    cum = np.cumsum(rho.values.reshape(-1)[order]) * rho.grid.cell_volume
    k = int(np.searchsorted(cum, mass))
    if k >= r.size:
        raise ValueError(f"grid holds only mass {cum[-1]:.6g} < {mass}")
    return float(r[order][k])


def tightness_check(smoothed: Sequence[SmoothedPlan], tol: float = 1e-4) -> ConvergenceTable:
    """Mass of each smoothed plan outside ``[-R, R]^{Nd}``, with ``R`` from the marginals.

    ``R`` is the largest radius needed for ``rho_j(B(0,R)) >= 1 - tol/N``; the
    union bound then caps the outside mass at ``tol`` for every epsilon.
    """
    marginals = smoothed[0].marginals
    N = marginals.N
    R = max(ball_radius(m, 1 - tol / N) for m in marginals)
    outside = []
    for sp in smoothed:
        grid: ProductGrid = sp.grid
        X = grid.coordinates()
        inside = np.all(np.abs(X) <= R, axis=-1)
        outside.append(float(sp.theta.mass - sp.theta.values[inside].sum() * grid.cell_volume))
    return ConvergenceTable("epsilon", [sp.config.epsilon for sp in smoothed],
                            {"outside_mass": outside},
                            {"outside_mass": max(outside) <= tol},
                            {"R": R, "tol": tol})
