"""Model problems: periodic and random-checkerboard diffusion, 1D Helmholtz
and 2D scattering from a sound-soft triangle.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import mesh as m

DIFFUSION = "DIFFUSION"
HELMHOLTZ = "HELMHOLTZ"

SCATTERER = ((0.25, 0.25), (0.75, 0.75), (0.25, 0.75))
INCIDENT_ANGLE = 0.5


class ProblemError(ValueError):
    pass


MASK64 = (1 << 64) - 1


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of the SplitMix64 generator seeded with ``seed``."""
    out = np.empty(n, dtype=np.uint64)
    state = seed & MASK64
    for i in range(n):
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out[i] = z ^ (z >> 31)
    return out


def uniform_from_bits(bits: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Top 53 bits -> [0, 1) -> [lo, hi]."""
    u = (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return lo + (hi - lo) * u


@dataclass(frozen=True)
class ProblemSpec:
    """Immutable problem description.

    Coefficients are sampled per fine element by ``coefficient(centroids)``;
    ``dirichlet_data(points)`` gives boundary values (complex allowed).
    ``robin_sign`` selects the sign of the Robin term, ``-i*s*kappa*int u v``.
    """

    name: str
    kind: str
    domain: m.Domain
    params: dict = field(default_factory=dict)
    coefficient: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    rhs: float = 0.0
    dirichlet_data: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    kappa: float | None = None
    robin_sign: int = 1
    exact: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    exact_grad: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind == HELMHOLTZ:
            if self.kappa is None or not self.kappa > 0:
                raise ProblemError("Helmholtz problems need a positive wave number")
            tags = ([self.domain.left, self.domain.right] if self.domain.kind == "interval"
                    else [self.domain.outer, self.domain.hole_tag if self.domain.hole else None])
            if m.ROBIN not in tags:
                raise ProblemError("Helmholtz problems need a nonempty Robin boundary")
        elif self.kind != DIFFUSION:
            raise ProblemError(f"unknown problem kind {self.kind!r}")

    def sample_coefficient(self, mesh: m.Mesh) -> np.ndarray:
        if self.coefficient is None:
            return np.ones(mesh.n_elements)
        a = np.asarray(self.coefficient(mesh.centroids), dtype=float)
        a = np.broadcast_to(a, (mesh.n_elements,)).copy()
        if np.any(a <= 0):
            raise ProblemError("coefficient must be strictly positive")
        return a

    def canonical(self) -> dict:
        return {"name": self.name, "kind": self.kind, "params": self.params,
                "domain": self.domain.canonical()}

    def to_bytes(self) -> bytes:
        return json.dumps(self.canonical(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


# --- 1D periodic homogenization -------------------------------------------------

def periodic_coefficient(eps: float) -> Callable[[np.ndarray], np.ndarray]:
    def a(x):
        x = np.asarray(x)[..., 0]
        return 1.0 / (2.0 + np.cos(2 * np.pi * x / eps))
    return a


def periodic_exact(eps: float, x: np.ndarray) -> np.ndarray:
    """Solution of ``-(A u')' = 4``, u(0)=u(1)=0, for ``A = 1/(2+cos(2 pi x/eps))``."""
    x = np.asarray(x, dtype=float)
    s = np.sin(2 * np.pi * x / eps)
    c = np.cos(2 * np.pi * x / eps)
    return (4 * (x - x**2) + eps / np.pi * s - 2 * eps / np.pi * x * s
            - eps**2 / np.pi**2 * (c - 1))


def periodic_exact_grad(eps: float, x: np.ndarray) -> np.ndarray:
    """``u' = sigma / A`` with flux ``sigma = 2 - 4x``."""
    x = np.asarray(x, dtype=float)
    return (2 - 4 * x) * (2 + np.cos(2 * np.pi * x / eps))


def periodic_caption_formula(eps: float, x: np.ndarray) -> np.ndarray:
    """The closed form as printed alongside the original figure (opposite sign
    on the oscillatory terms relative to :func:`periodic_exact`)."""
    x = np.asarray(x, dtype=float)
    s = np.sin(2 * np.pi * x / eps)
    c = np.cos(2 * np.pi * x / eps)
    return 4 * (x - x**2) - 4 * eps * (s / (4 * np.pi) - x * s / (2 * np.pi)
                                        - eps * c / (4 * np.pi**2) + eps / (4 * np.pi**2))


def homogenized_limit(x):
    x = np.asarray(x, dtype=float)
    return 4 * (x - x**2)


def arithmetic_limit(x):
    x = np.asarray(x, dtype=float)
    return 2 * np.sqrt(3) * (x - x**2)


def periodic_1d(eps: float) -> ProblemSpec:
    k = -np.log2(eps)
    if eps <= 0 or abs(k - round(k)) > 1e-12 or round(k) < 1:
        raise ProblemError("eps must be 2^-k with k >= 1")
    return ProblemSpec(
        name="periodic_1d", kind=DIFFUSION, domain=m.interval(),
        params={"eps": float(eps)}, coefficient=periodic_coefficient(eps), rhs=4.0,
        exact=lambda x: periodic_exact(eps, np.asarray(x)[..., 0]),
        exact_grad=lambda x: periodic_exact_grad(eps, np.asarray(x)[..., 0]))


def check_periodic_resolution(problem: ProblemSpec, fine_level: int) -> None:
    eps = problem.params["eps"]
    if 2.0**-fine_level > eps / 8:
        raise ProblemError(f"h = 2^-{fine_level} does not resolve eps = {eps:g} (need h <= eps/8)")


# --- 2D random checkerboard -----------------------------------------------------

def checkerboard_values(seed: int, grid_level: int = 6, lo: float = 1.0, hi: float = 10.0) -> np.ndarray:
    """Cell values, shape (n, n) indexed [row j (y), column i (x)]."""
    n = 2 ** grid_level
    return uniform_from_bits(splitmix64(seed, n * n), lo, hi).reshape(n, n)


def random_checkerboard(seed: int, grid_level: int = 6, lo: float = 1.0, hi: float = 10.0) -> ProblemSpec:
    vals = checkerboard_values(seed, grid_level, lo, hi)
    n = 2 ** grid_level

    def a(x):
        x = np.asarray(x)
        i = np.minimum((x[:, 0] * n).astype(np.int64), n - 1)
        j = np.minimum((x[:, 1] * n).astype(np.int64), n - 1)
        return vals[j, i]

    return ProblemSpec(
        name="checkerboard", kind=DIFFUSION, domain=m.square(),
        params={"seed": int(seed), "grid_level": int(grid_level), "lo": float(lo), "hi": float(hi)},
        coefficient=a, rhs=1.0)


def check_checkerboard_resolution(problem: ProblemSpec, fine_level: int) -> None:
    if fine_level < problem.params["grid_level"]:
        raise ProblemError(
            f"h = 2^-{fine_level} does not resolve the 2^-{problem.params['grid_level']} coefficient grid")


# --- Helmholtz ------------------------------------------------------------------

def helmholtz_1d(kappa: float) -> ProblemSpec:
    """``-u'' - k^2 u = 0``, ``u(0) = 1``, ``u'(1) = -i k u(1)``; solution exp(-i k x)."""
    return ProblemSpec(
        name="helmholtz_1d", kind=HELMHOLTZ, domain=m.interval(left=m.DIRICHLET, right=m.ROBIN),
        params={"kappa": float(kappa)}, rhs=0.0, kappa=float(kappa), robin_sign=-1,
        dirichlet_data=lambda x: np.ones(len(x), dtype=complex),
        exact=lambda x: np.exp(-1j * kappa * np.asarray(x)[..., 0]),
        exact_grad=lambda x: -1j * kappa * np.exp(-1j * kappa * np.asarray(x)[..., 0]))


def incident_wave(kappa: float, x: np.ndarray) -> np.ndarray:
    d = np.array([np.cos(INCIDENT_ANGLE), np.sin(INCIDENT_ANGLE)])
    return np.exp(1j * kappa * (np.asarray(x) @ d))


def scattering_2d(kappa: float, scatterer=SCATTERER) -> ProblemSpec:
    """Scattered field around a sound-soft triangle, Robin on the unit square."""
    dom = m.square(outer=m.ROBIN, hole=scatterer, hole_tag=m.DIRICHLET)
    return ProblemSpec(
        name="scattering_2d", kind=HELMHOLTZ, domain=dom,
        params={"kappa": float(kappa)}, rhs=0.0, kappa=float(kappa), robin_sign=1,
        dirichlet_data=lambda x: -incident_wave(kappa, x))


def helmholtz_square(kappa: float) -> ProblemSpec:
    """Unit square with Robin condition everywhere (decay studies)."""
    return ProblemSpec(
        name="helmholtz_square", kind=HELMHOLTZ, domain=m.square(outer=m.ROBIN),
        params={"kappa": float(kappa)}, rhs=0.0, kappa=float(kappa), robin_sign=1)


def poisson(dim: int = 1, rhs: float = 1.0) -> ProblemSpec:
    dom = m.interval() if dim == 1 else m.square()
    return ProblemSpec(name=f"poisson_{dim}d", kind=DIFFUSION, domain=dom,
                       params={"rhs": float(rhs)}, rhs=float(rhs))


# --- config files ---------------------------------------------------------------

BUILDERS: dict[str, Callable[..., ProblemSpec]] = {
    "periodic_1d": lambda p: periodic_1d(float(p["eps"])),
    "checkerboard": lambda p: random_checkerboard(int(p.get("seed", 7)), int(p.get("grid_level", 6)),
                                                  float(p.get("lo", 1.0)), float(p.get("hi", 10.0))),
    "helmholtz_1d": lambda p: helmholtz_1d(float(p["kappa"])),
    "scattering_2d": lambda p: scattering_2d(float(p["kappa"])),
    "helmholtz_square": lambda p: helmholtz_square(float(p["kappa"])),
    "poisson_1d": lambda p: poisson(1, float(p.get("rhs", 1.0))),
    "poisson_2d": lambda p: poisson(2, float(p.get("rhs", 1.0))),
}


def from_params(name: str, params: dict[str, Any]) -> ProblemSpec:
    try:
        build = BUILDERS[name]
    except KeyError:
        raise ProblemError(f"unknown problem {name!r}; choose from {sorted(BUILDERS)}") from None
    return build(params)


def read_config(text: str) -> dict[str, dict[str, str]]:
    """Parse ``key = value`` lines grouped in ``[section]`` headers."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ProblemError(f"bad config file: {exc}") from exc
    return {s: dict(cp[s]) for s in cp.sections()}


def write_config(sections: dict[str, dict[str, Any]]) -> str:
    """Canonical text form: sections and keys sorted, one ``key = value`` per line."""
    buf = io.StringIO()
    for s in sorted(sections):
        buf.write(f"[{s}]\n")
        for k in sorted(sections[s]):
            buf.write(f"{k} = {sections[s][k]}\n")
        buf.write("\n")
    return buf.getvalue()


def problem_from_config(cfg: dict[str, dict[str, str]]) -> ProblemSpec:
    if "problem" not in cfg or "name" not in cfg["problem"]:
        raise ProblemError("config needs a [problem] section with a name")
    p = dict(cfg["problem"])
    return from_params(p.pop("name"), p)
