"""Experiment runners behind the command line interface.

Each runner sweeps coarse levels and oversampling orders for one problem
family and returns :class:`~mspg.analysis.ErrorReport` rows.
"""
from __future__ import annotations

import logging
import math
import os
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import analysis as an
from . import problems as pr
from .correctors import cached_correctors, ideal_corrector
from .discrete import FineSystem, discretize
from .interpolation import build_interpolator
from .mesh import build_hierarchy
from .multiscale import asymmetry, multiscale_solution, reference_solution, standard_fem

log = logging.getLogger(__name__)

IDEAL_TOL = 1e-8


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    coarse_levels: list[int]
    fine_level: int
    ells: list[int | None]  # None: ideal (saturated patches)
    kappa: float | None = None
    eps: float | None = None
    seeds: list[int] = field(default_factory=lambda: [7])
    cache_dir: str | None = None
    out: str | None = None
    workers: int = 1
    dump_mesh: bool = False
    dump_fields: bool = False
    problem: pr.ProblemSpec | None = None  # overrides the command's default family

    def __post_init__(self):
        if not self.coarse_levels:
            raise ConfigError("no coarse levels given")
        if min(self.coarse_levels) < 1:
            raise ConfigError("coarse levels must be >= 1")
        if self.fine_level <= max(self.coarse_levels):
            raise ConfigError(f"fine level {self.fine_level} must exceed every coarse level "
                              f"(got {max(self.coarse_levels)})")
        if any(e is not None and e < 1 for e in self.ells):
            raise ConfigError("oversampling orders must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass
class RunResult:
    reports: list[an.ErrorReport]
    lines: list[str] = field(default_factory=list)  # human-readable summary
    ok: bool = True


@dataclass
class Case:
    """Everything that is shared between the runs at one coarse level."""

    fs: FineSystem
    interp: object
    u_ref: np.ndarray
    t_ref: float


def _case(problem: pr.ProblemSpec, Lc: int, Lf: int) -> Case:
    hier = build_hierarchy(problem.domain, Lc, Lf)
    fs = discretize(problem, hier)
    interp = build_interpolator(hier, fs.dirichlet_coarse)
    t = time.perf_counter()
    u_ref = reference_solution(fs)
    return Case(fs, interp, u_ref, time.perf_counter() - t)


def _dump_fields(cfg: RunConfig, tag: str, mesh, values: np.ndarray) -> None:
    if not (cfg.dump_fields and cfg.out):
        return
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, f"{tag}.txt"), "w") as fh:
        write_samples(fh, mesh.nodes, values)


def write_samples(fh, points: np.ndarray, values: np.ndarray) -> None:
    """Lines ``x [y] re [im]``; the imaginary column only for complex data."""
    cplx = np.iscomplexobj(values)
    for p, v in zip(points, values):
        cols = [repr(float(c)) for c in p] + [repr(float(np.real(v)))]
        if cplx:
            cols.append(repr(float(np.imag(v))))
        fh.write(" ".join(cols) + "\n")


def _dump_mesh(cfg: RunConfig, case: Case) -> None:
    if not (cfg.dump_mesh and cfg.out):
        return
    os.makedirs(cfg.out, exist_ok=True)
    h = case.fs.hierarchy
    for mesh in (h.coarse, h.fine):
        path = os.path.join(cfg.out, f"mesh_{case.fs.problem.name}_L{mesh.level}.txt")
        if not os.path.exists(path):
            with open(path, "w") as fh:
                mesh.dump(fh)


def _sweep(cfg: RunConfig, problem: pr.ProblemSpec, param: float, seed: int | None,
           exact: bool = False) -> list[an.ErrorReport]:
    """Standard and multiscale errors for every coarse level and ``ell``."""
    reports = []
    for Lc in cfg.coarse_levels:
        case = _case(problem, Lc, cfg.fine_level)
        fs = case.fs
        _dump_mesh(cfg, case)
        u_fem = standard_fem(fs)
        if exact:
            errs = lambda u: an.exact_errors_1d(fs, u)
            best_l2 = an.exact_best_approximation_1d(fs, "L2")
            best_v = an.exact_best_approximation_1d(fs, "V")
        else:
            errs = lambda u: an.error_norms(fs, u, case.u_ref)
            best_l2 = an.best_approximation(fs, case.u_ref, "L2")[0]
            best_v = an.best_approximation(fs, case.u_ref, "V")[0]
        fem_l2, fem_v = errs(u_fem)
        base = dict(problem=problem.name, d=fs.hierarchy.dim, H=fs.hierarchy.H, h=fs.hierarchy.h,
                    kappa_or_eps=param, seed=seed, err_fem_L2_rel=fem_l2, err_fem_V_rel=fem_v,
                    err_best_L2_rel=best_l2, err_best_V_rel=best_v)
        stem = f"{problem.name}_Lc{Lc}_Lf{cfg.fine_level}" + (f"_seed{seed}" if seed is not None else "")
        _dump_fields(cfg, f"{stem}_reference", fs.hierarchy.fine, case.u_ref)
        _dump_fields(cfg, f"{stem}_fem", fs.hierarchy.coarse, u_fem)
        for ell in cfg.ells:
            t = time.perf_counter()
            cs = cached_correctors(fs, case.interp, ell, cfg.cache_dir, cfg.workers)
            t_corr = time.perf_counter() - t
            t = time.perf_counter()
            u, system = multiscale_solution(fs, cs)
            t_solve = time.perf_counter() - t
            l2, v = errs(u)
            infsup = an.coarse_infsup(fs, system)
            reports.append(an.ErrorReport(ell=ell, err_L2_rel=l2, err_V_rel=v, infsup=infsup,
                                          t_correctors_s=t_corr, t_solve_s=t_solve, **base))
            _dump_fields(cfg, f"{stem}_ell{'inf' if ell is None else ell}_msfem",
                         fs.hierarchy.coarse, u)
            log.info("%s H=2^-%d ell=%s: L2 %.3e V %.3e (FEM %.3e, best %.3e)",
                     problem.name, Lc, ell, l2, v, fem_l2, best_l2)
    return reports


def run_homogenize1d(cfg: RunConfig) -> list[an.ErrorReport]:
    prob = cfg.problem or pr.periodic_1d(cfg.eps if cfg.eps is not None else 2.0**-5)
    if prob.name == "periodic_1d":
        pr.check_periodic_resolution(prob, cfg.fine_level)
    return _sweep(cfg, prob, prob.params.get("eps", math.nan), None)


def run_homogenize2d(cfg: RunConfig) -> list[an.ErrorReport]:
    if cfg.problem is not None:
        return _sweep(cfg, cfg.problem, math.nan, cfg.problem.params.get("seed"))
    out = []
    for seed in cfg.seeds:
        prob = pr.random_checkerboard(seed)
        pr.check_checkerboard_resolution(prob, cfg.fine_level)
        out += _sweep(cfg, prob, math.nan, seed)
    return out


def run_helmholtz1d(cfg: RunConfig) -> list[an.ErrorReport]:
    prob = cfg.problem or pr.helmholtz_1d(cfg.kappa if cfg.kappa is not None else 128.0)
    return _sweep(cfg, prob, prob.kappa, None, exact=prob.exact is not None)


def run_scatter2d(cfg: RunConfig) -> list[an.ErrorReport]:
    prob = cfg.problem or pr.scattering_2d(cfg.kappa if cfg.kappa is not None else 32.0)
    return _sweep(cfg, prob, prob.kappa, None)


def decay_rate(problem: pr.ProblemSpec, Lc: int, Lf: int, z: int | None = None) -> an.DecayProfile:
    """Decay profile of the ideal corrector at an interior coarse node."""
    hier = build_hierarchy(problem.domain, Lc, Lf)
    fs = discretize(problem, hier)
    interp = build_interpolator(hier, fs.dirichlet_coarse)
    z = an.interior_node(fs) if z is None else z
    return an.decay_profile(fs, ideal_corrector(fs, interp, z), z)


def run_decay(cfg: RunConfig) -> list[an.ErrorReport]:
    probs = ([(cfg.problem, cfg.problem.params.get("seed"))] if cfg.problem is not None
             else [(pr.random_checkerboard(s), s) for s in cfg.seeds])
    out = []
    for prob, seed in probs:
        for Lc in cfg.coarse_levels:
            t = time.perf_counter()
            prof = decay_rate(prob, Lc, cfg.fine_level)
            hier_h = 2.0**-cfg.fine_level
            out.append(an.ErrorReport(problem=prob.name, d=prob.domain.dim, H=2.0**-Lc, h=hier_h,
                                      ell=None, kappa_or_eps=prob.kappa or math.nan, seed=seed,
                                      decay_c=prof.slope, t_correctors_s=time.perf_counter() - t))
            log.info("%s seed=%s H=2^-%d: c=%.4f (per-layer ratio %.3f, R^2 %.3f)",
                     prob.name, seed, Lc, prof.slope, prof.layer_ratio, prof.r2)
    return out


def ideal_discrepancy(problem: pr.ProblemSpec, Lc: int, Lf: int, workers: int = 1,
                      cache_dir: str | None = None) -> tuple[float, float]:
    """``max|u_H,ideal - I_H u_h| / max|u_h|`` and the coarse matrix asymmetry."""
    case = _case(problem, Lc, Lf)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cs = cached_correctors(case.fs, case.interp, None, cache_dir, workers)
    u, system = multiscale_solution(case.fs, cs)
    ih = case.interp(case.u_ref)
    disc = np.abs(u[case.interp.free] - ih).max() / np.abs(case.u_ref).max()
    return float(disc), asymmetry(system)


def run_ideal_check(cfg: RunConfig) -> RunResult:
    if cfg.problem is not None:
        probs = [cfg.problem]
    else:
        grid = min(6, cfg.fine_level)
        probs = [pr.random_checkerboard(cfg.seeds[0], grid_level=grid),
                 pr.helmholtz_1d(cfg.kappa if cfg.kappa is not None else 8.0)]
    res = RunResult([])
    for prob in probs:
        for Lc in cfg.coarse_levels:
            t = time.perf_counter()
            disc, asym = ideal_discrepancy(prob, Lc, cfg.fine_level, cfg.workers, cfg.cache_dir)
            res.reports.append(an.ErrorReport(
                problem=prob.name, d=prob.domain.dim, H=2.0**-Lc, h=2.0**-cfg.fine_level, ell=None,
                kappa_or_eps=prob.kappa or math.nan, seed=prob.params.get("seed"),
                t_correctors_s=time.perf_counter() - t))
            ok = disc <= IDEAL_TOL
            res.ok &= ok
            res.lines.append(f"{prob.name} H=2^-{Lc} h=2^-{cfg.fine_level}: max discrepancy "
                             f"{disc:.3e} (tolerance {IDEAL_TOL:g}), coarse asymmetry {asym:.3e} "
                             f"{'ok' if ok else 'FAILED'}")
    return res


RUNNERS: dict[str, Callable[[RunConfig], list[an.ErrorReport] | RunResult]] = {
    "homogenize1d": run_homogenize1d,
    "homogenize2d": run_homogenize2d,
    "helmholtz1d": run_helmholtz1d,
    "scatter2d": run_scatter2d,
    "decay": run_decay,
    "ideal-check": run_ideal_check,
}

DEFAULTS: dict[str, dict] = {
    "homogenize1d": dict(coarse_levels="3..5", fine_level=12, ell="2", eps=2.0**-5),
    "homogenize2d": dict(coarse_levels="1..4", fine_level=8, ell="1,2,3", seed="7"),
    "helmholtz1d": dict(coarse_levels="7", fine_level=12, ell="1..5", kappa=128.0),
    "scatter2d": dict(coarse_levels="5,6", fine_level=8, ell="1,2,3", kappa=32.0),
    "decay": dict(coarse_levels="3", fine_level=6, ell="inf", seed="7,8,9"),
    "ideal-check": dict(coarse_levels="2", fine_level=5, ell="inf", seed="7", kappa=8.0),
}


def run(cfg: RunConfig) -> RunResult:
    out = RUNNERS[cfg.command](cfg)
    return out if isinstance(out, RunResult) else RunResult(out)
