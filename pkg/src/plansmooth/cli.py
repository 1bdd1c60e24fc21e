"""Command-line runner for the smoothing experiments.

Usage::

    plansmooth run --scenario product --output out/
    plansmooth run --config experiment.json
    plansmooth validate experiment.json
    plansmooth list-scenarios

Exit status of ``run``: 0 when every certificate and verdict passes, 1 when
any fails (the first failure is named on stderr), 2 for an invalid config.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .convergence import (ConvergenceTable, EpsilonSchedule, cost_convergence, d1p_convergence,
                          energy_convergence_report, mixture_sequence, mu_continuity,
                          perturbed_sequence, smooth_schedule, tightness_check, weak_convergence)
from .grids import (AxisGrid, DensityField, MarginalSet, ProductGrid, gaussian, gaussian_plan,
                    marginal, product_plan, quantile_coupling)
from .io import write_certificates, write_field
from .kernel import KernelSpec, kernel_constants, tail_mass
from .smoothing import (BoundCertificate, SmoothingConfig, diagonal_mass, energy_bound_p,
                        energy_bound_p2, energy_bound_p2_regular, energy_bound_p_regular,
                        lambda_upper_bound, mollification_monotonicity, nabla_domination,
                        superadditivity, verify_marginals)
from .sobolev import SobolevConfig, energy, finite_integral_check

log = logging.getLogger("plansmooth")

SCENARIOS = {
    "product": "independent coupling of shifted Gaussians; the smoothing must leave it unchanged",
    "quantile_gaussians": "comonotone atomic coupling of N(0,1) and N(1,1); bounds and weak convergence",
    "correlated_gaussian": "regular correlated Gaussian plan; energy bounds and d^{1,p} convergence",
    "mixture_sequence": "continuity in the plan along mixture and mollified sequences",
    "counterexample": "divergence detector on sin(x)^(p-1) over [0, pi] against a Gaussian control",
}

MAX_PRODUCT_NODES = 1 << 24

DEFAULT_TOLERANCES = {
    "marginal_tol": 1e-6,
    "density_floor": 1e-12,
    "fixed_point_tol": 1e-6,
    "weak_tol": 0.01,
    "cost_tol": 0.02,
    "d1p_fraction": 0.05,
    "continuity_fraction": 0.1,
}


class ConfigError(ValueError):
    """Invalid experiment configuration; ``errors`` lists ``field: message`` strings."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class ExperimentConfig:
    scenario: str = "product"
    d: int = 1
    N: int = 2
    n: int = 256
    p: float = 2.0
    epsilon_schedule: list = field(default_factory=lambda: [0.4, 0.2, 0.1, 0.05, 0.025])
    M: int = 4000
    seed: int = 0
    output_dir: str = "plansmooth-out"
    correlation: float = 0.5
    continuity_epsilon: float = 0.1
    levels: int = 4
    tolerances: dict = field(default_factory=dict)

    def tolerance(self, name: str) -> float:
        return float(self.tolerances.get(name, DEFAULT_TOLERANCES[name]))

    def as_dict(self) -> dict:
        out = asdict(self)
        out["tolerances"] = {k: self.tolerance(k) for k in DEFAULT_TOLERANCES}
        return out


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_real(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def validate_config(raw: dict) -> ExperimentConfig:
    """Check types and ranges; raises :class:`ConfigError` naming every bad field."""
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    errors = [f"{k}: unknown field" for k in raw if k not in known]
    cfg = ExperimentConfig()
    for k, v in raw.items():
        if k in known:
            setattr(cfg, k, v)

    def need(cond, name, msg):
        if not cond:
            errors.append(f"{name}: {msg}")

    need(cfg.scenario in SCENARIOS, "scenario", f"must be one of {sorted(SCENARIOS)}, got {cfg.scenario!r}")
    need(_is_int(cfg.d) and 1 <= cfg.d <= 3, "d", f"must be an integer in [1, 3], got {cfg.d!r}")
    need(_is_int(cfg.N) and cfg.N >= 2, "N", f"must be an integer >= 2, got {cfg.N!r}")
    need(_is_int(cfg.n) and cfg.n >= 8 and cfg.n % 4 == 0, "n",
         f"must be an integer >= 8 divisible by 4, got {cfg.n!r}")
    need(_is_real(cfg.p) and cfg.p >= 1, "p", f"must be a real number >= 1, got {cfg.p!r}")
    sched = cfg.epsilon_schedule
    if not (isinstance(sched, list) and sched and all(_is_real(e) for e in sched)):
        errors.append(f"epsilon_schedule: must be a non-empty list of numbers, got {sched!r}")
    else:
        need(all(e > 0 for e in sched), "epsilon_schedule", f"every epsilon must be > 0, got {sched}")
        need(all(b < a for a, b in zip(sched, sched[1:])), "epsilon_schedule",
             f"must be strictly decreasing, got {sched}")
    need(_is_int(cfg.M) and cfg.M >= 1, "M", f"must be a positive integer, got {cfg.M!r}")
    need(_is_int(cfg.seed) and cfg.seed >= 0, "seed", f"must be a non-negative integer, got {cfg.seed!r}")
    need(isinstance(cfg.output_dir, str) and cfg.output_dir != "", "output_dir", "must be a non-empty string")
    need(_is_real(cfg.correlation) and -1 < cfg.correlation < 1, "correlation",
         f"must lie in (-1, 1), got {cfg.correlation!r}")
    need(_is_real(cfg.continuity_epsilon) and cfg.continuity_epsilon > 0, "continuity_epsilon",
         f"must be > 0, got {cfg.continuity_epsilon!r}")
    need(_is_int(cfg.levels) and cfg.levels >= 2, "levels", f"must be an integer >= 2, got {cfg.levels!r}")
    if not isinstance(cfg.tolerances, dict):
        errors.append("tolerances: must be an object")
    else:
        for k, v in cfg.tolerances.items():
            if k not in DEFAULT_TOLERANCES:
                errors.append(f"tolerances.{k}: unknown tolerance")
            elif not (_is_real(v) and v > 0):
                errors.append(f"tolerances.{k}: must be a positive number, got {v!r}")
    if not errors:
        if cfg.scenario == "quantile_gaussians" and (cfg.d != 1 or cfg.N != 2):
            errors.append("scenario: quantile_gaussians supports only d=1, N=2")
        if cfg.scenario != "counterexample" and cfg.n ** (cfg.N * cfg.d) > MAX_PRODUCT_NODES:
            errors.append(f"n: product grid would have n^(N*d) = {cfg.n ** (cfg.N * cfg.d)} nodes "
                          f"(limit {MAX_PRODUCT_NODES})")
    if errors:
        raise ConfigError(errors)
    cfg.p = float(cfg.p)
    cfg.epsilon_schedule = [float(e) for e in cfg.epsilon_schedule]
    return cfg


def load_config_file(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"line {exc.lineno} column {exc.colno}: {exc.msg}"]) from None


@dataclass
class ScenarioResult:
    certificates: list[BoundCertificate] = field(default_factory=list)
    tables: dict[str, ConvergenceTable] = field(default_factory=dict)
    fields: dict[str, DensityField] = field(default_factory=dict)
    verdicts: dict[str, bool] = field(default_factory=dict)
    notes: dict = field(default_factory=dict)


def _box(cfg: ExperimentConfig) -> AxisGrid:
    # marginal k is centred at k; 8 standard deviations of margin on both ends
    return AxisGrid.covering(-8.0, 8.0 + (cfg.N - 1), cfg.n, cfg.d)


def _shifted_marginals(cfg: ExperimentConfig) -> MarginalSet:
    g = _box(cfg)
    return MarginalSet(tuple(gaussian(g, float(k), 1.0) for k in range(cfg.N)))


def _smoothing_config(cfg: ExperimentConfig, epsilon: float, p: float | None = None) -> SmoothingConfig:
    return SmoothingConfig(epsilon, cfg.p if p is None else p, cfg.d, cfg.N,
                           cfg.tolerance("density_floor"), cfg.tolerance("marginal_tol"))


def _energy_certificates(sp, scfg: SmoothingConfig) -> list[BoundCertificate]:
    out = [energy_bound_p(sp)]
    if scfg.p == 2:
        out.append(energy_bound_p2(sp))
    return out


def _tag(cert: BoundCertificate, suffix: str) -> BoundCertificate:
    return BoundCertificate(f"{cert.name}@{suffix}", cert.measured, cert.bound, cert.details)


def scenario_product(cfg: ExperimentConfig) -> ScenarioResult:
    res = ScenarioResult()
    ms = _shifted_marginals(cfg)
    mu = product_plan(ms)
    base = _smoothing_config(cfg, cfg.epsilon_schedule[0])
    sched = EpsilonSchedule(tuple(cfg.epsilon_schedule))
    smoothed = smooth_schedule(mu, ms, base, sched)
    for e, sp in zip(sched, smoothed):
        tag = f"eps={e:g}"
        res.certificates += [_tag(c, tag) for c in verify_marginals(sp)]
        sup = float(np.abs(sp.theta.values - mu.values).max())
        res.certificates.append(BoundCertificate(f"fixed_point@{tag}", sup, cfg.tolerance("fixed_point_tol")))
        res.certificates += [_tag(c, tag) for c in _energy_certificates(sp, sp.config)]
        res.certificates.append(_tag(lambda_upper_bound(sp), tag))
    res.tables["weak_convergence"] = weak_convergence(mu, ms, base, sched, tol=cfg.tolerance("weak_tol"),
                                                      smoothed=smoothed)
    res.fields["theta_final"] = smoothed[-1].theta
    return res


def scenario_quantile(cfg: ExperimentConfig) -> ScenarioResult:
    res = ScenarioResult()
    ms = _shifted_marginals(cfg)
    plan = quantile_coupling(ms, cfg.M)
    base = _smoothing_config(cfg, cfg.epsilon_schedule[0])
    sched = EpsilonSchedule(tuple(cfg.epsilon_schedule))
    smoothed = smooth_schedule(plan, ms, base, sched, domination_p=cfg.p)
    kc = kernel_constants(KernelSpec(sched.values[0], cfg.d), cfg.p)
    res.notes["kernel_constants"] = kc.as_dict()
    for e, sp in zip(sched, smoothed):
        tag = f"eps={e:g}"
        res.certificates += [_tag(c, tag) for c in verify_marginals(sp)]
        res.certificates += [_tag(c, tag) for c in _energy_certificates(sp, sp.config)]
        res.certificates.append(_tag(lambda_upper_bound(sp), tag))
        res.certificates += [_tag(nabla_domination(sp, j, cfg.p), tag) for j in range(cfg.N)]
        for mult in (1, 2, 3):
            r = mult * math.sqrt(cfg.N * e)
            res.certificates.append(_tag(diagonal_mass(plan, ms, sp.config, r, seed=cfg.seed), tag))
            measured, bound = tail_mass(mult * math.sqrt(e), KernelSpec(e, cfg.d))
            res.certificates.append(BoundCertificate(f"tail_mass[tau={mult}sqrt(eps)]@{tag}", measured, bound))
    res.tables["weak_convergence"] = weak_convergence(plan, ms, base, sched, tol=cfg.tolerance("weak_tol"),
                                                      smoothed=smoothed)
    res.tables["cost_convergence"] = cost_convergence(plan, ms, base, sched, tol=cfg.tolerance("cost_tol"),
                                                      smoothed=smoothed)
    res.tables["tightness"] = tightness_check(smoothed)
    res.fields["theta_final"] = smoothed[-1].theta
    res.notes["plan_mismatch"] = smoothed[0].plan_mismatch
    return res


def _correlated(cfg: ExperimentConfig) -> tuple[DensityField, MarginalSet]:
    g = _box(cfg)
    m = cfg.N * cfg.d
    cov = np.full((m, m), cfg.correlation)
    np.fill_diagonal(cov, 1.0)
    # coordinates of factor k are centred at k
    mean = np.repeat(np.arange(cfg.N, dtype=float), cfg.d)
    mu = gaussian_plan(ProductGrid.power(g, cfg.N), mean, cov)
    ms = MarginalSet(tuple(marginal(mu, j).normalized() for j in range(cfg.N)))
    return mu, ms


def scenario_correlated(cfg: ExperimentConfig) -> ScenarioResult:
    res = ScenarioResult()
    mu, ms = _correlated(cfg)
    base = _smoothing_config(cfg, cfg.epsilon_schedule[0])
    sched = EpsilonSchedule(tuple(cfg.epsilon_schedule))
    smoothed = smooth_schedule(mu, ms, base, sched)
    res.certificates.append(superadditivity(mu, base))
    for e, sp in zip(sched, smoothed):
        tag = f"eps={e:g}"
        scfg = sp.config
        res.certificates += [_tag(c, tag) for c in verify_marginals(sp)]
        res.certificates += [_tag(c, tag) for c in _energy_certificates(sp, scfg)]
        if scfg.p == 2:
            res.certificates.append(_tag(energy_bound_p2_regular(mu, ms, scfg, sp=sp), tag))
        if scfg.p > 1:
            res.certificates.append(_tag(energy_bound_p_regular(mu, ms, scfg, sp=sp), tag))
        res.certificates.append(_tag(superadditivity(sp.theta, scfg), tag))
        res.certificates += [_tag(mollification_monotonicity(m, scfg), f"{tag},j={j}") for j, m in enumerate(ms)]
    res.tables["d1p_convergence"] = d1p_convergence(mu, ms, base, sched, cfg.tolerance("d1p_fraction"),
                                                    smoothed=smoothed)
    res.tables["weak_convergence"] = weak_convergence(mu, ms, base, sched, tol=cfg.tolerance("weak_tol"),
                                                      smoothed=smoothed)
    res.tables["energy_convergence"] = energy_convergence_report(ms, base, sched)
    res.tables["tightness"] = tightness_check(smoothed)
    res.fields["mu"] = mu
    res.fields["theta_final"] = smoothed[-1].theta
    return res


def scenario_mixture(cfg: ExperimentConfig) -> ScenarioResult:
    res = ScenarioResult()
    mu, ms = _correlated(cfg)
    scfg = _smoothing_config(cfg, cfg.continuity_epsilon)
    ns = (2, 4, 8, 16, 32)
    frac = cfg.tolerance("continuity_fraction")
    seq = mixture_sequence(mu, ms, ns)
    res.tables["mu_continuity_mixture"] = mu_continuity(seq, mu, [ms] * len(ns), ms, scfg, ns, frac)
    pseq, pms = perturbed_sequence(mu, ns)
    res.tables["mu_continuity_perturbed"] = mu_continuity(pseq, mu, pms, ms, scfg, ns, frac)
    return res


def scenario_counterexample(cfg: ExperimentConfig) -> ScenarioResult:
    res = ScenarioResult()
    p = cfg.p
    sob = SobolevConfig(p, cfg.tolerance("density_floor"))
    coarse = AxisGrid.covering(0.0, math.pi, 64)
    check = finite_integral_check(lambda g: np.sin(g.nodes) ** (p - 1), sob, cfg.levels, grid=coarse)
    res.notes["counterexample"] = check.as_dict()
    res.verdicts["counterexample_divergent"] = check.verdict == "divergent"

    g = AxisGrid.covering(-8.0, 8.0, 64 * 2 ** (cfg.levels - 1))
    rho = gaussian(g, 0.0, 1.0)
    control = finite_integral_check(rho, sob, cfg.levels)
    res.notes["gaussian_control"] = control.as_dict()
    res.notes["gaussian_control"]["energy"] = energy(rho, sob)
    res.verdicts["gaussian_control_convergent"] = control.verdict == "convergent"
    table = ConvergenceTable("n", [float(c) for c in check.counts],
                             {"counterexample_integral": list(check.integrals),
                              "gaussian_integral": list(control.integrals)},
                             {"counterexample_divergent": check.verdict == "divergent",
                              "gaussian_convergent": control.verdict == "convergent"},
                             {"p": p})
    res.tables["finite_integral"] = table
    return res


RUNNERS: dict[str, Callable[[ExperimentConfig], ScenarioResult]] = {
    "product": scenario_product,
    "quantile_gaussians": scenario_quantile,
    "correlated_gaussian": scenario_correlated,
    "mixture_sequence": scenario_mixture,
    "counterexample": scenario_counterexample,
}


def _safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def execute(cfg: ExperimentConfig) -> tuple[int, ScenarioResult, list[str]]:
    """Run a validated config, write the output tree, return (exit code, result, failures)."""
    out = Path(cfg.output_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    threads = os.environ.get("PLANSMOOTH_THREADS")
    limit = int(threads) if threads and threads.isdigit() and int(threads) > 0 else None
    with threadpool_limits(limits=limit):
        result = RUNNERS[cfg.scenario](cfg)
    wall = time.perf_counter() - t0

    failures = [c.name for c in result.certificates if not c.passed]
    for name, table in result.tables.items():
        failures += [f"{name}.{col}" for col, ok in table.verdicts.items() if not ok]
    failures += [name for name, ok in result.verdicts.items() if not ok]

    write_certificates(result.certificates, out / "certificates.json", cfg.as_dict())
    summary = {name: t.as_dict() for name, t in result.tables.items()}
    for name, table in result.tables.items():
        table.to_csv(out / "tables" / f"{_safe_name(name)}.csv")
    (out / "tables" / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for name, fld in result.fields.items():
        write_field(fld, out / "fields" / _safe_name(name))
    manifest = {
        "config": cfg.as_dict(),
        "versions": {"plansmooth": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "wall_time_seconds": wall,
        "threads": limit,
        "verdicts": result.verdicts,
        "notes": result.notes,
        "failures": failures,
        "exit_code": 1 if failures else 0,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float) + "\n")
    return (1 if failures else 0), result, failures


def _merge_overrides(raw: dict, args) -> dict:
    raw = dict(raw)
    if args.scenario is not None:
        raw["scenario"] = args.scenario
    if args.output is not None:
        raw["output_dir"] = args.output
    if args.p is not None:
        raw["p"] = args.p
    if args.grid is not None:
        raw["n"] = args.grid
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.epsilon_schedule is not None:
        try:
            raw["epsilon_schedule"] = [float(x) for x in args.epsilon_schedule.split(",") if x.strip()]
        except ValueError:
            raise ConfigError([f"epsilon_schedule: cannot parse {args.epsilon_schedule!r} as a "
                               "comma-separated list of numbers"]) from None
    return raw


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plansmooth", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario and write certificates, tables and fields")
    run.add_argument("--config", help="JSON experiment file")
    run.add_argument("--output", help="output directory")
    run.add_argument("--epsilon-schedule", help="comma-separated, strictly decreasing")
    run.add_argument("--p", type=float)
    run.add_argument("--grid", type=int, help="nodes per axis")
    run.add_argument("--seed", type=int)
    run.add_argument("--scenario", choices=sorted(SCENARIOS))
    run.add_argument("-v", "--verbose", action="store_true")
    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("config", nargs="?")
    val.add_argument("--config", dest="config_flag")
    sub.add_parser("list-scenarios", help="print the available scenarios")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "list-scenarios":
        for name, desc in SCENARIOS.items():
            print(f"{name:22s} {desc}")
        return 0
    try:
        if args.command == "validate":
            path = args.config or args.config_flag
            if path is None:
                raise ConfigError(["config: a config file is required"])
            validate_config(load_config_file(path))
            print("ok")
            return 0
        raw = load_config_file(args.config) if args.config else {}
        cfg = validate_config(_merge_overrides(raw, args))
    except ConfigError as exc:
        for err in exc.errors:
            print(f"invalid config: {err}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    code, _, failures = execute(cfg)
    if failures:
        print(f"FAILED: {failures[0]}" + (f" (and {len(failures) - 1} more)" if len(failures) > 1 else ""),
              file=sys.stderr)
    else:
        print(f"all checks passed; artifacts in {cfg.output_dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
