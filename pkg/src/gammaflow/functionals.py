"""
Integral functionals ``F(v) = int f(x, t, v, Dv) dx dt`` and their densities.

Built-in densities:

* double-well (Ginzburg-Landau) ``1/4 (u^2 - 1)^2 + eps^2/2 |Du|^2``;
* filtration ``1/2 a_ij d_i v^k d_j v^k - h^k v^k``;
* weighted p-Dirichlet ``a/p |Dv|^p``.

Densities are vectorized callables ``density(x, t, u, lam)`` where ``x`` has
a trailing axis of length ``dim``, ``u`` a trailing axis of length ``m`` and
``lam`` a trailing axis of length ``m * dim`` (row-major Jacobian).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate as sp_integrate

from . import fields as fl

SURFACE_TENSION = 2.0 * math.sqrt(2.0) / 3.0

GINZBURG_LANDAU = "ginzburg_landau"
FILTRATION = "filtration"
P_LAPLACE = "p_laplace"
CUSTOM = "custom"

# Magnitude range of the log-uniform validator samples.
SAMPLE_MAG_RANGE = (1e-3, 1e3)


@dataclass(frozen=True, eq=False)
class FunctionalSpec:
    """Density plus the structural constants of the growth and Hoelder bounds.

    ``d_u`` and ``d_lam`` are optional closed-form partial derivatives with
    the same calling convention as ``density``; they are needed for weak
    residuals only.
    """

    density: Callable
    p: float
    growth_C: float
    hoelder_alpha: float
    hoelder_C: float
    label: str = "custom"
    m: int = 1
    dim: int = 1
    d_u: Optional[Callable] = None
    d_lam: Optional[Callable] = None
    kind: str = CUSTOM
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"growth exponent p must exceed 1, got {self.p}")
        if not 0 < self.hoelder_alpha < 1:
            raise ValueError(f"hoelder_alpha must lie in (0, 1), got {self.hoelder_alpha}")
        if not (self.growth_C > 0 and self.hoelder_C > 0):
            raise ValueError("growth_C and hoelder_C must be positive")

    @property
    def q(self) -> float:
        """Conjugate exponent ``p / (p - 1)``."""
        return self.p / (self.p - 1.0)

    @property
    def differentiable(self) -> bool:
        return self.d_u is not None and self.d_lam is not None


@dataclass(frozen=True, eq=False)
class FunctionalFamily:
    """A sweep family ``eps -> F^eps`` with its limit.

    ``coefficient_at(eps)`` returns the coefficient ``a^eps(x, t)`` used by
    the flow solvers (filtration / p-Laplace families); ``limit_spec`` is
    the integral limit functional when one exists, ``limit_value`` a closed
    form evaluator of the limit otherwise.
    """

    kind: str
    member_at: Callable
    limit_spec: Optional[FunctionalSpec] = None
    limit_value: Optional[Callable] = None
    coefficient_at: Optional[Callable] = None
    normalization: str = "none"
    params: dict = field(default_factory=dict)


@dataclass
class ValidatorResult:
    passed: bool
    worst_ratio: float
    worst_sample: dict
    sample_count: int
    failures: int = 0

    def __bool__(self):
        return self.passed


# -- evaluation -------------------------------------------------------------

def _space_time_coords(grid: fl.Grid):
    x = grid.coords()[None]
    t = grid.times().reshape((-1,) + (1,) * grid.dim)
    return x, t


def density_values(v: fl.SpaceTimeField, spec: FunctionalSpec) -> np.ndarray:
    """``f(x, t, v, Dv)`` at every node, shape ``(n_levels, *space_shape)``."""
    if v.m != spec.m:
        raise ValueError(f"field has {v.m} components, functional expects {spec.m}")
    if v.grid.dim != spec.dim:
        raise ValueError(f"field is {v.grid.dim}D, functional expects {spec.dim}D")
    x, t = _space_time_coords(v.grid)
    dens = np.asarray(spec.density(x, t, v.values, fl.gradient(v).values), dtype=float)
    dens = np.broadcast_to(dens, (v.grid.n_levels,) + v.grid.space_shape)
    _require_finite(dens, v.grid)
    return dens


def _require_finite(dens, grid):
    bad = ~np.isfinite(dens)
    if np.any(bad):
        k, *node = np.argwhere(bad)[0]
        xs = grid.coords()[tuple(node)]
        raise ValueError(f"non-finite density at t={grid.times()[k]:.6g}, x={tuple(round(float(v), 8) for v in xs)}")


def evaluate_functional(v: fl.SpaceTimeField, spec: FunctionalSpec) -> float:
    """Trapezoid quadrature of ``int f(x, t, v, Dv) dx dt``."""
    return float(fl.integrate((v.grid, density_values(v, spec))))


def spatial_energy(level: np.ndarray, grid: fl.Grid, spec: FunctionalSpec, t: float = 0.0,
                   periodic: bool = False) -> float:
    """``int_Omega f(x, t, u, Du) dx`` for one time level of shape ``(*space, m)``."""
    level = np.asarray(level, dtype=float)
    if level.ndim == grid.dim:
        level = level[..., None]
    lam = fl.spatial_gradient(level, grid, periodic)
    dens = np.broadcast_to(spec.density(grid.coords(), t, level, lam), grid.space_shape)
    return float(fl.spatial_integrate(dens, grid))


# -- validators -------------------------------------------------------------

def _log_uniform_vectors(rng, n, size, lo=SAMPLE_MAG_RANGE[0], hi=SAMPLE_MAG_RANGE[1]):
    mag = np.exp(rng.uniform(np.log(lo), np.log(hi), n))
    direction = rng.normal(size=(n, size))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return mag[:, None] * direction


def _sample_points(spec, rng, n, extent, t_final):
    if extent is None:
        extent = ((0.0, 1.0),) * spec.dim
    lo = np.array([e[0] for e in extent])
    hi = np.array([e[1] for e in extent])
    x = lo + (hi - lo) * rng.random((n, spec.dim))
    t = t_final * rng.random(n)
    return x, t


def check_growth(spec: FunctionalSpec, sample_count: int = 10_000, seed: int = 0,
                 extent=None, t_final: float = 1.0) -> ValidatorResult:
    """Sample ``0 <= f <= C (1 + |u|^p + |lam|^p)``.

    The reported ratio is ``f / (1 + |u|^p + |lam|^p)``; the check passes
    when no sample is negative and the worst ratio does not exceed ``C``.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    x, t = _sample_points(spec, rng, sample_count, extent, t_final)
    u = _log_uniform_vectors(rng, sample_count, spec.m)
    lam = _log_uniform_vectors(rng, sample_count, spec.m * spec.dim)
    f = np.broadcast_to(np.asarray(spec.density(x, t, u, lam), dtype=float), (sample_count,))
    base = 1.0 + np.linalg.norm(u, axis=1) ** spec.p + np.linalg.norm(lam, axis=1) ** spec.p
    ratio = f / base
    bad = (f < 0) | (ratio > spec.growth_C) | ~np.isfinite(f)
    # a negative density dominates the ranking so it is the one reported
    key = np.where(f < 0, np.inf, ratio)
    i = int(np.nanargmax(np.where(np.isfinite(key), key, np.inf)))
    sample = {"x": x[i].tolist(), "t": float(t[i]), "u": u[i].tolist(), "lam": lam[i].tolist(), "f": float(f[i])}
    return ValidatorResult(not bad.any(), float(np.max(ratio)), sample, sample_count, int(bad.sum()))


def check_hoelder(spec: FunctionalSpec, sample_count: int = 10_000, seed: int = 0,
                  extent=None, t_final: float = 1.0) -> ValidatorResult:
    """Sample the Hoelder-type modulus

    ``|f(u1, l1) - f(u2, l2)| <= C (|u1-u2|^a + |l1-l2|^a)(1 + |u1|^(p-a) + |u2|^(p-a) + |l1|^(p-a) + |l2|^(p-a))``

    over pairs sharing ``(x, t)``.  Half of the pairs are independent draws,
    half are small perturbations of the first point.  Returns the worst
    ratio of left to right side (with ``C`` included), so passing means
    ``worst_ratio <= 1``.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    n = sample_count
    mn = spec.m * spec.dim
    x, t = _sample_points(spec, rng, n, extent, t_final)
    u1 = _log_uniform_vectors(rng, n, spec.m)
    l1 = _log_uniform_vectors(rng, n, mn)
    u2 = _log_uniform_vectors(rng, n, spec.m)
    l2 = _log_uniform_vectors(rng, n, mn)
    near = np.arange(n) % 2 == 1
    u2[near] = u1[near] + _log_uniform_vectors(rng, int(near.sum()), spec.m, 1e-6, 1.0)
    l2[near] = l1[near] + _log_uniform_vectors(rng, int(near.sum()), mn, 1e-6, 1.0)

    f1 = np.broadcast_to(np.asarray(spec.density(x, t, u1, l1), dtype=float), (n,))
    f2 = np.broadcast_to(np.asarray(spec.density(x, t, u2, l2), dtype=float), (n,))
    a, p = spec.hoelder_alpha, spec.p
    nrm = lambda v: np.linalg.norm(v, axis=1)
    growth = 1.0 + nrm(u1) ** (p - a) + nrm(u2) ** (p - a) + nrm(l1) ** (p - a) + nrm(l2) ** (p - a)
    rhs = spec.hoelder_C * (nrm(u1 - u2) ** a + nrm(l1 - l2) ** a) * growth
    lhs = np.abs(f1 - f2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lhs == 0, 0.0, lhs / rhs)
    ratio = np.where(np.isfinite(ratio), ratio, np.inf)
    i = int(np.argmax(ratio))
    sample = {
        "x": x[i].tolist(), "t": float(t[i]),
        "u1": u1[i].tolist(), "lam1": l1[i].tolist(),
        "u2": u2[i].tolist(), "lam2": l2[i].tolist(),
    }
    failures = int(np.sum(ratio > 1.0 + 1e-12))
    return ValidatorResult(failures == 0, float(ratio[i]), sample, n, failures)


# -- built-in families ------------------------------------------------------

def _jacobian(lam, m, dim):
    lam = np.asarray(lam, dtype=float)
    return lam.reshape(lam.shape[:-1] + (m, dim))


def make_ginzburg_landau(eps: float, dim: int = 1) -> FunctionalSpec:
    """Double-well density ``1/4 (u^2 - 1)^2 + eps^2/2 |Du|^2`` (scalar, p = 4)."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    e2 = eps * eps

    def density(x, t, u, lam):
        u = np.asarray(u)[..., 0]
        return 0.25 * (u * u - 1.0) ** 2 + 0.5 * e2 * np.sum(np.asarray(lam) ** 2, axis=-1)

    def d_u(x, t, u, lam):
        u = np.asarray(u)
        return u**3 - u

    def d_lam(x, t, u, lam):
        return e2 * np.asarray(lam)

    # constants: f <= (1 + eps^2)/4 (1 + u^4 + |lam|^4); modulus constant
    # max(2^(3/2), 2^(1/2) eps^2) for alpha = 1/2, rounded up.
    return FunctionalSpec(
        density, p=4.0, growth_C=2.0 * max(1.0, e2), hoelder_alpha=0.5,
        hoelder_C=max(3.0, 1.5 * e2), label=f"ginzburg_landau(eps={eps:g})",
        m=1, dim=dim, d_u=d_u, d_lam=d_lam, kind=GINZBURG_LANDAU, params={"eps": eps},
    )


def _sample_coefficient(coeff, dim, extent, t_final, samples, seed):
    rng = np.random.default_rng(seed)
    if extent is None:
        extent = ((0.0, 1.0),) * dim
    lo = np.array([e[0] for e in extent])
    hi = np.array([e[1] for e in extent])
    # a regular lattice catches periodic extremes, random points the rest
    lattice = np.stack(np.meshgrid(*[np.linspace(a, b, 257 if dim == 1 else 33) for a, b in extent],
                                   indexing="ij"), axis=-1).reshape(-1, dim)
    x = np.concatenate([lattice, lo + (hi - lo) * rng.random((samples, dim))])
    t = np.concatenate([np.zeros(len(lattice)), t_final * rng.random(samples)])
    return x, t, np.asarray(coeff(x, t), dtype=float)


def make_filtration(coeff: Callable, source: Optional[Callable] = None, dim: int = 1, m: int = 1,
                    extent=None, t_final: float = 1.0, samples: int = 512, seed: int = 0,
                    label: str = "filtration") -> FunctionalSpec:
    """Density ``1/2 a_ij(x,t) d_i v^k d_j v^k - h^k(x,t) v^k`` (p = 2).

    ``coeff(x, t)`` returns a scalar (isotropic) or a ``(dim, dim)`` matrix
    per point; ``source(x, t)`` returns ``m`` values per point or ``None``
    for ``h = 0``.  The coefficient is sampled over the box and rejected if
    any sample is non-symmetric or not positive-definite.
    """
    x, t, a = _sample_coefficient(coeff, dim, extent, t_final, samples, seed)
    mats = _matrix_field(a, dim, (len(x),)).reshape(-1, dim, dim)
    if not np.allclose(mats, np.swapaxes(mats, -1, -2), rtol=1e-12, atol=1e-14):
        i = int(np.argmax(np.abs(mats - np.swapaxes(mats, -1, -2)).reshape(len(mats), -1).max(axis=1)))
        raise ValueError(f"coefficient not symmetric at x={x[i].tolist()}, t={t[i]:.6g}")
    eig = np.linalg.eigvalsh(mats)
    if np.any(eig[:, 0] <= 0) or not np.all(np.isfinite(eig)):
        i = int(np.argmin(np.where(np.isfinite(eig[:, 0]), eig[:, 0], -np.inf)))
        raise ValueError(f"coefficient not positive-definite at x={x[i].tolist()}, t={t[i]:.6g}")
    lam_min, lam_max = float(eig[:, 0].min()), float(eig[:, -1].max())
    h_max = 0.0
    if source is not None:
        hs = np.asarray(source(x, t), dtype=float).reshape(len(x), -1)
        h_max = float(np.max(np.linalg.norm(hs, axis=1)))

    def matrix(xx, tt):
        shape = np.broadcast_shapes(np.shape(xx)[:-1], np.shape(tt))
        return _matrix_field(coeff(xx, tt), dim, shape)

    def density(xx, tt, u, lam):
        g = _jacobian(lam, m, dim)
        A = matrix(xx, tt)
        quad = 0.5 * np.einsum("...ki,...ij,...kj->...", g, A, g)
        if source is None:
            return quad
        return quad - np.sum(np.asarray(source(xx, tt)) * np.asarray(u), axis=-1)

    def d_u(xx, tt, u, lam):
        if source is None:
            return np.zeros(np.shape(u))
        return -np.broadcast_to(np.asarray(source(xx, tt), dtype=float), np.shape(u))

    def d_lam(xx, tt, u, lam):
        g = _jacobian(lam, m, dim)
        flux = np.einsum("...ij,...kj->...ki", matrix(xx, tt), g)
        return flux.reshape(np.shape(lam))

    margin = 1.1  # sampled bounds, not proven suprema
    return FunctionalSpec(
        density, p=2.0,
        growth_C=margin * max(0.5 * lam_max, 0.5 * h_max),
        hoelder_alpha=0.5,
        hoelder_C=margin * math.sqrt(2.0) * max(lam_max, h_max),
        label=label, m=m, dim=dim, d_u=d_u, d_lam=d_lam, kind=FILTRATION,
        params={"coeff": coeff, "source": source, "lam_min": lam_min, "lam_max": lam_max},
    )


def _matrix_field(a, dim, point_shape):
    """Broadcast a scalar or ``(dim, dim)`` coefficient to ``point_shape + (dim, dim)``."""
    a = np.asarray(a, dtype=float)
    if a.ndim == len(point_shape) + 2 and a.shape[-2:] == (dim, dim):
        return a
    return a[..., None, None] * np.eye(dim)


def make_p_laplace(coeff: Callable, p: float, dim: int = 1, m: int = 1, extent=None,
                   t_final: float = 1.0, samples: int = 512, seed: int = 0) -> FunctionalSpec:
    """Weighted p-Dirichlet density ``a(x,t)/p |Dv|^p``."""
    if not p > 1:
        raise ValueError(f"p must exceed 1, got {p}")
    x, t, a = _sample_coefficient(coeff, dim, extent, t_final, samples, seed)
    a = np.broadcast_to(a, (len(x),))
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        i = int(np.argmin(np.where(np.isfinite(a), a, -np.inf)))
        raise ValueError(f"coefficient not positive at x={x[i].tolist()}, t={t[i]:.6g}")
    a_max = float(a.max())

    def density(xx, tt, u, lam):
        mag = np.linalg.norm(np.asarray(lam), axis=-1)
        return np.asarray(coeff(xx, tt)) / p * mag**p

    def d_u(xx, tt, u, lam):
        return np.zeros(np.shape(u))

    def d_lam(xx, tt, u, lam):
        lam = np.asarray(lam)
        mag = np.linalg.norm(lam, axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(mag > 0, mag ** (p - 2.0), 0.0)
        return np.asarray(coeff(xx, tt))[..., None] * w * lam

    margin = 1.1
    return FunctionalSpec(
        density, p=float(p), growth_C=margin * a_max / p, hoelder_alpha=0.5,
        hoelder_C=margin * math.sqrt(2.0) * a_max, label=f"p_laplace(p={p:g})",
        m=m, dim=dim, d_u=d_u, d_lam=d_lam, kind=P_LAPLACE,
        params={"coeff": coeff, "a_min": float(a.min()), "a_max": a_max},
    )


def planted_counterexamples(dim: int = 1) -> dict:
    """Densities that break a structural bound, keyed by name.

    Each value is ``(spec, check)`` where ``check`` names the validator
    (``"growth"`` or ``"hoelder"``) that must reject it.
    """
    nrm = lambda v: np.linalg.norm(v, axis=-1)
    cubic = FunctionalSpec(lambda x, t, u, lam: nrm(lam) ** 3, p=2.0, growth_C=1.0, hoelder_alpha=0.5,
                           hoelder_C=1.0, label="cubic gradient growth", dim=dim)
    negative = FunctionalSpec(lambda x, t, u, lam: 0.5 * nrm(lam) ** 2 - 0.5 * nrm(u) ** 2, p=2.0,
                              growth_C=1.0, hoelder_alpha=0.5, hoelder_C=1.0, label="sign-indefinite", dim=dim)
    # quadratic growth but a derivative that grows like |lam|^3
    wiggly = FunctionalSpec(lambda x, t, u, lam: nrm(lam) ** 2 * (2.0 + np.sin(nrm(lam) ** 2)) / 3.0, p=2.0,
                            growth_C=1.0, hoelder_alpha=0.5, hoelder_C=1.0, label="oscillating quadratic", dim=dim)
    return {"cubic_growth": (cubic, "growth"), "negative_density": (negative, "growth"),
            "oscillating_quadratic": (wiggly, "hoelder")}


def limit_perimeter_value(interface_count: int, eps_normalized: bool = True) -> float:
    """Limit value of the double-well energy on a 1D sign pattern.

    With ``eps_normalized`` the energy divided by ``eps`` converges to
    ``interface_count * 2 sqrt(2) / 3``; the raw energy tends to zero.
    """
    if interface_count < 0:
        raise ValueError("interface_count must be >= 0")
    return interface_count * SURFACE_TENSION if eps_normalized else 0.0


def homogenized_coefficient_1d(a: Callable, breakpoints=None) -> float:
    """Effective coefficient ``1 / int_0^1 dy / a(y)`` of a 1-periodic ``a``."""
    y = np.linspace(0.0, 1.0, 4097)
    vals = np.asarray(a(y), dtype=float)
    if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
        raise ValueError(f"coefficient must be positive, found {vals.min():.6g}")
    inv, _ = sp_integrate.quad(lambda s: 1.0 / float(a(s)), 0.0, 1.0, points=breakpoints,
                               limit=400, epsabs=1e-14, epsrel=1e-13)
    return 1.0 / inv


# -- families ---------------------------------------------------------------

def ginzburg_landau_family(dim: int = 1, interface_count: int = 1) -> FunctionalFamily:
    return FunctionalFamily(
        kind=GINZBURG_LANDAU,
        member_at=lambda eps: make_ginzburg_landau(eps, dim),
        limit_value=lambda: limit_perimeter_value(interface_count),
        normalization="divide_by_eps",
        params={"interface_count": interface_count, "dim": dim},
    )


def oscillating_filtration_family(base: Callable = None, extent=((0.0, 1.0),), t_final: float = 1.0) -> FunctionalFamily:
    """1D family ``a(x/eps)`` with periodic ``base`` (default ``2 + sin(2 pi y)``)."""
    if base is None:
        base = lambda y: 2.0 + np.sin(2.0 * np.pi * y)

    def coefficient_at(eps):
        return lambda x, t: base(np.asarray(x)[..., 0] / eps) + 0.0 * np.asarray(t)

    a_hom = homogenized_coefficient_1d(base)
    limit = make_filtration(lambda x, t: np.full(np.shape(x)[:-1], a_hom) + 0.0 * np.asarray(t),
                            extent=extent, t_final=t_final, label=f"filtration(a={a_hom:.6f})")
    return FunctionalFamily(
        kind=FILTRATION,
        member_at=lambda eps: make_filtration(coefficient_at(eps), extent=extent, t_final=t_final,
                                              label=f"filtration(eps={eps:g})"),
        limit_spec=limit,
        coefficient_at=coefficient_at,
        params={"homogenized_coefficient": a_hom, "base": base},
    )


def constant_filtration_family(a: float = 1.0, extent=((0.0, 1.0),), t_final: float = 1.0) -> FunctionalFamily:
    """Degenerate family whose members do not depend on ``eps``."""
    coeff = lambda x, t: np.full(np.shape(x)[:-1], float(a)) + 0.0 * np.asarray(t)
    spec = make_filtration(coeff, extent=extent, t_final=t_final, label=f"filtration(a={a:g})")
    return FunctionalFamily(kind=FILTRATION, member_at=lambda eps: spec, limit_spec=spec,
                            coefficient_at=lambda eps: coeff, params={"homogenized_coefficient": float(a)})


def validate_family(family: FunctionalFamily, eps_list, sample_count: int = 2000, seed: int = 0) -> dict:
    """Check that members share ``p`` and satisfy the growth bound with one ``C``."""
    specs = [family.member_at(e) for e in eps_list]
    ps = {s.p for s in specs}
    C = max(s.growth_C for s in specs)
    results = []
    for s in specs:
        r = check_growth(s, sample_count, seed)
        results.append(r.passed and r.worst_ratio <= C)
    return {"common_p": len(ps) == 1, "growth_C": C, "all_pass": all(results)}
