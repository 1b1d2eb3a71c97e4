"""Command line entry point: ``mspg <command> [flags]``.

Writes one CSV row per run (see :data:`mspg.analysis.CSV_FIELDS`) to
``<out>/<command>.csv``, or to stdout when ``--out`` is not given.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings


from . import analysis as an
from . import experiments as ex
from . import problems as pr
from .assembly import AssemblyError, SolverError, export_coo
from .correctors import CacheError, CorrectorError
from .interpolation import InterpolationError
from .mesh import MeshError, build_hierarchy, parse_levels
from .multiscale import CoarseSolveError

CACHE_ENV = "MSPG_CACHE_DIR"

log = logging.getLogger("mspg")


def _ells(text: str) -> list[int | None]:
    out: list[int | None] = []
    for part in text.split(","):
        if part.strip() in ("inf", "ideal"):
            out.append(None)
        elif part.strip():
            out += parse_levels(part)
    return out


def _floats(text: str | None) -> float | None:
    if text is None:
        return None
    text = text.strip()
    if text.startswith("2^"):
        return 2.0 ** float(text[2:])
    return float(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mspg", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(ex.RUNNERS))
    p.add_argument("--coarse-levels", help="coarse levels, e.g. '1..4' or '5,6' (H = 2^-L)")
    p.add_argument("--fine-level", type=int, help="fine level (h = 2^-L)")
    p.add_argument("--ell", help="oversampling orders, e.g. '1..3'; 'inf' for saturated patches")
    p.add_argument("--kappa", help="wave number (accepts 2^k)")
    p.add_argument("--eps", help="period of the 1D coefficient (accepts 2^-k)")
    p.add_argument("--seed", help="checkerboard seeds, e.g. '7' or '7,8,9'")
    p.add_argument("--cache-dir", default=os.environ.get(CACHE_ENV),
                   help=f"corrector cache directory (default: ${CACHE_ENV}, else no cache)")
    p.add_argument("--out", help="output directory; CSV goes to stdout if omitted")
    p.add_argument("--workers", type=int, default=1, help="processes for corrector problems")
    p.add_argument("--config", metavar="FILE", help="problem file with a [problem] section")
    p.add_argument("--dump-mesh", action="store_true", help="write coarse and fine mesh files to --out")
    p.add_argument("--dump-fields", action="store_true", help="write nodal samples 'x [y] re [im]' to --out")
    p.add_argument("--dump-matrix", action="store_true",
                   help="debug: write the fine operator as 'row col value' triplets to --out")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def config_from_args(args: argparse.Namespace) -> ex.RunConfig:
    d = ex.DEFAULTS[args.command]
    problem = None
    run_section: dict[str, str] = {}
    if args.config:
        with open(args.config) as fh:
            cfg = pr.read_config(fh.read())
        problem = pr.problem_from_config(cfg)
        run_section = cfg.get("run", {})

    def pick(name, cast=lambda v: v):
        v = getattr(args, name.replace("-", "_"), None)
        if v is None:
            v = run_section.get(name.replace("-", "_"), d.get(name.replace("-", "_")))
        return None if v is None else cast(v)

    return ex.RunConfig(
        command=args.command,
        coarse_levels=parse_levels(str(pick("coarse-levels"))),
        fine_level=int(pick("fine-level")),
        ells=_ells(str(pick("ell"))),
        kappa=_floats(None if pick("kappa") is None else str(pick("kappa"))),
        eps=_floats(None if pick("eps") is None else str(pick("eps"))),
        seeds=parse_levels(str(pick("seed", str) or "7")),
        cache_dir=args.cache_dir, out=args.out, workers=args.workers,
        dump_mesh=args.dump_mesh, dump_fields=args.dump_fields, problem=problem)


def _dump_matrix(cfg: ex.RunConfig) -> None:
    from .discrete import discretize
    prob = cfg.problem or {
        "homogenize1d": lambda: pr.periodic_1d(cfg.eps or 2.0**-5),
        "homogenize2d": lambda: pr.random_checkerboard(cfg.seeds[0]),
        "helmholtz1d": lambda: pr.helmholtz_1d(cfg.kappa or 128.0),
        "scatter2d": lambda: pr.scattering_2d(cfg.kappa or 32.0),
        "decay": lambda: pr.random_checkerboard(cfg.seeds[0]),
        "ideal-check": lambda: pr.random_checkerboard(cfg.seeds[0], min(6, cfg.fine_level)),
    }[cfg.command]()
    fs = discretize(prob, build_hierarchy(prob.domain, cfg.coarse_levels[0], cfg.fine_level))
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, f"matrix_{prob.name}_L{cfg.fine_level}.coo"), "w") as fh:
        export_coo(fs.K, fh)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        cfg = config_from_args(args)
        if args.dump_matrix:
            if not cfg.out:
                parser.error("--dump-matrix needs --out")
            _dump_matrix(cfg)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            result = ex.run(cfg)
    except (ex.ConfigError, pr.ProblemError, MeshError, ValueError) as exc:
        print(f"mspg: error: {exc}", file=sys.stderr)
        return 2
    except CacheError as exc:
        print(f"mspg: corrector cache invalid: {exc}", file=sys.stderr)
        return 3
    except (CorrectorError, CoarseSolveError, SolverError, AssemblyError, InterpolationError) as exc:
        print(f"mspg: numerical failure: {exc}", file=sys.stderr)
        return 4

    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        path = os.path.join(cfg.out, f"{cfg.command}.csv")
        with open(path, "w", newline="") as fh:
            an.write_csv(result.reports, fh)
        print(f"wrote {len(result.reports)} rows to {path}")
    else:
        an.write_csv(result.reports, sys.stdout)
    for line in result.lines:
        print(line)
    return 0 if result.ok else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
