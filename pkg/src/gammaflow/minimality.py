"""
Certificates for the parabolic-minimum inequality.

A field ``u`` is a parabolic minimum of ``F`` with respect to ``(Phi, u_0)``
when every admissible perturbation ``eta`` (smooth, compactly supported in
space, ``eta(., T) = 0``) has nonnegative slack

    slack(eta) = F(u - eta) + int u_0 . eta(x, 0) dx - F(u) + int Phi(u) . d_t eta dx dt.

The universal quantifier is replaced by a seeded bank of closed-form test
functions plus an adversarial candidate built from the first variation of
the slack.  Slack is reported per test function; the verdict is pass iff
the smallest slack is at least ``-tolerance``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import fields as fl
from . import functionals as fn

TIME_FACTORS = {
    # polynomials in s = (t - t0) / T of degree <= 2 vanishing at s = 1, so
    # second-order time differences of eta are exact
    "linear": lambda s: 1.0 - s,
    "quadratic": lambda s: (1.0 - s) ** 2,
    "ramp": lambda s: 1.0 - s * s,
}

MIN_CELLS = 12


def bump(r2: np.ndarray) -> np.ndarray:
    """``exp(1 - 1/(1 - r^2))`` inside the unit ball, exactly 0 outside."""
    out = np.zeros_like(r2, dtype=float)
    inside = r2 < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
    return out


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Perturbation ``eta(x, t) = profile(x) * time_profile(t)`` sampled on a grid.

    ``formula`` names the generating closed form and its parameters;
    ``support`` is the box (per axis ``(lo, hi)``) outside of which the
    profile vanishes identically.
    """

    id: int
    grid: fl.Grid
    profile: np.ndarray
    time_profile: np.ndarray
    family: str
    amplitude: float
    support: tuple
    formula: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    @property
    def eta(self) -> fl.SpaceTimeField:
        vals = self.time_profile.reshape((-1,) + (1,) * (self.profile.ndim)) * self.profile[None]
        return fl.SpaceTimeField(self.grid, vals, fl.DIRICHLET_ZERO)

    @property
    def m(self) -> int:
        return self.profile.shape[-1]

    @property
    def terminal_zero(self) -> bool:
        return bool(self.time_profile[-1] == 0.0)

    def scaled(self, c: float, new_id: Optional[int] = None, family: Optional[str] = None) -> "TestFunction":
        return TestFunction(self.id if new_id is None else new_id, self.grid, c * self.profile, self.time_profile,
                            family or self.family, c * self.amplitude, self.support, dict(self.formula))

    def check_admissible(self) -> None:
        """Raise if ``eta(., T) != 0`` or the support comes within ``2h`` of the boundary."""
        if not self.terminal_zero:
            raise ValueError(f"test function {self.id} does not vanish at the final time")
        g = self.grid
        nz = np.any(self.profile != 0.0, axis=-1)
        if not nz.any():
            return
        for ax, (h, (lo, hi), x) in enumerate(zip(g.h, g.extent, g.axes())):
            other = tuple(a for a in range(g.dim) if a != ax)
            used = np.any(nz, axis=other) if other else nz
            xs = x[used]
            if xs.min() - lo < 2 * h - 1e-12 or hi - xs.max() < 2 * h - 1e-12:
                raise ValueError(f"test function {self.id} support is closer than 2h to the boundary")


def _time_profile(grid: fl.Grid, name: str, power: int = 1) -> np.ndarray:
    s = np.arange(grid.n_levels) / grid.n_time_steps
    if name == "power":
        prof = (1.0 - s) ** power
    else:
        prof = TIME_FACTORS[name](s)
    prof[-1] = 0.0
    return prof


def _profile(grid: fl.Grid, center, half, family: str, modes=None) -> np.ndarray:
    x = grid.coords()
    r2 = np.sum(((x - np.asarray(center)) / np.asarray(half)) ** 2, axis=-1)
    prof = bump(r2)
    if family == "sine":
        for ax in range(grid.dim):
            lo = center[ax] - half[ax]
            prof = prof * np.sin(modes[ax] * np.pi * (x[..., ax] - lo) / (2.0 * half[ax]))
    return prof


def generate_eta_bank(grid: fl.Grid, m: int = 1, count: int = 64, seed: int = 0,
                      amplitude_range=(1e-2, 1.0)) -> list:
    """Seeded bank of admissible test functions.

    Even ids are smooth bumps on random sub-boxes, odd ids are sine modes
    cut off by such a bump; each is multiplied by one of the time factors
    in :data:`TIME_FACTORS`.  Amplitudes are log-uniform in
    ``amplitude_range`` with a random sign; an upper bound of zero yields
    zero test functions.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if min(grid.cells) < MIN_CELLS:
        raise ValueError(f"grid too coarse for compactly supported test functions: "
                         f"need at least {MIN_CELLS} cells per axis")
    a_lo, a_hi = (float(a) for a in amplitude_range)
    if a_lo < 0 or a_hi < a_lo:
        raise ValueError("amplitude_range must satisfy 0 <= lo <= hi")
    rng = np.random.default_rng(seed)
    names = sorted(TIME_FACTORS)
    bank = []
    for i in range(count):
        family = "bump" if i % 2 == 0 else "sine"
        center, half = [], []
        for h, (lo, hi) in zip(grid.h, grid.extent):
            length = hi - lo
            w_min = max(3.0 * h, 0.05 * length)
            w = rng.uniform(w_min, max(w_min, 0.3 * length))
            c = rng.uniform(lo + 2.0 * h + w, hi - 2.0 * h - w)
            center.append(c)
            half.append(w)
        modes = rng.integers(1, 5, size=grid.dim)
        tname = names[int(rng.integers(len(names)))]
        if a_hi == 0.0:
            amp = 0.0
        else:
            amp = float(np.exp(rng.uniform(np.log(max(a_lo, 1e-300)), np.log(a_hi)))) if a_lo > 0 else \
                float(rng.uniform(0.0, a_hi))
            amp *= 1.0 if rng.random() < 0.5 else -1.0
        direction = rng.normal(size=m)
        direction /= np.linalg.norm(direction)
        prof = _profile(grid, center, half, family, modes)
        profile = amp * prof[..., None] * direction
        support = tuple((c - w, c + w) for c, w in zip(center, half))
        formula = {"center": [float(c) for c in center], "half_width": [float(w) for w in half],
                   "time_factor": tname}
        if family == "sine":
            formula["modes"] = [int(k) for k in modes]
        tf = TestFunction(i, grid, profile, _time_profile(grid, tname), family, amp, support, formula)
        tf.check_admissible()
        bank.append(tf)
    return bank


def zero_test_function(grid: fl.Grid, m: int = 1, id: int = 0) -> TestFunction:
    return TestFunction(id, grid, np.zeros(grid.space_shape + (m,)), _time_profile(grid, "linear"),
                        "zero", 0.0, tuple(grid.extent), {"formula": "zero"})


# -- slack -------------------------------------------------------------------

class SlackTerms(NamedTuple):
    time_term: float
    functional_gap: float
    initial_term: float

    @property
    def slack(self) -> float:
        return self.functional_gap + self.initial_term + self.time_term


def _as_u0(u0, grid: fl.Grid, m: int) -> np.ndarray:
    u0 = np.asarray(u0, dtype=float)
    if u0.ndim == grid.dim:
        u0 = u0[..., None]
    if u0.shape != grid.space_shape + (m,):
        raise ValueError(f"u0 shape {u0.shape} does not match grid {grid.space_shape} x m={m}")
    return u0


class _SlackEvaluator:
    def __init__(self, u, phi, u0, spec):
        self.u = u
        self.grid = u.grid
        self.u0 = _as_u0(u0, u.grid, u.m)
        self.spec = spec
        self.phi_u = np.asarray(phi(u.values), dtype=float)
        self.F_u = fn.evaluate_functional(u, spec)

    def terms(self, tf) -> SlackTerms:
        eta = getattr(tf, "eta", tf)
        if not eta.grid.compatible(self.grid) or eta.m != self.u.m:
            raise ValueError("test function shape does not match the field")
        if np.any(eta.values[-1] != 0.0):
            raise ValueError("test function must vanish at the final time")
        if isinstance(tf, TestFunction):
            tf.check_admissible()
        g = self.grid
        if not np.any(eta.values):
            return SlackTerms(0.0, 0.0, 0.0)
        eta_t = fl.time_derivative(eta).values
        time_term = float(fl.integrate((g, np.sum(self.phi_u * eta_t, axis=-1))))
        gap = fn.evaluate_functional(self.u - eta, self.spec) - self.F_u
        initial = float(fl.spatial_integrate(np.sum(self.u0 * eta.values[0], axis=-1), g))
        return SlackTerms(time_term, gap, initial)

    def slack(self, tf) -> float:
        return self.terms(tf).slack


def slack_decomposition(u: fl.SpaceTimeField, phi, u0, spec: fn.FunctionalSpec, eta) -> SlackTerms:
    """The three summands of ``slack(eta)``:

    ``time_term = int Phi(u) d_t eta``, ``functional_gap = F(u - eta) - F(u)``
    and ``initial_term = int u_0 eta(x, 0) dx``.
    """
    return _SlackEvaluator(u, phi, u0, spec).terms(eta)


def default_tolerance(u: fl.SpaceTimeField, spec: fn.FunctionalSpec, factor: float = 5.0) -> float:
    """``factor * (h^2 + dt) * max |f(x, t, u, Du)|``."""
    g = u.grid
    scale = float(np.max(np.abs(fn.density_values(u, spec))))
    return factor * (max(g.h) ** 2 + g.dt) * max(scale, 1e-300)


# -- adversarial candidate ---------------------------------------------------

ADVERSARIAL_WIDTHS = (0.05, 0.075, 0.1, 0.15, 0.2, 0.35)
ADVERSARIAL_POWERS = (1, 2, 4)


def _candidate_lattice(grid: fl.Grid, centers_per_axis: int, widths) -> list:
    """``(center, half_widths)`` pairs whose support stays ``2h`` clear of the boundary."""
    axes_c = [lo + (hi - lo) * (np.arange(centers_per_axis) + 1) / (centers_per_axis + 1) for lo, hi in grid.extent]
    centers = np.array(np.meshgrid(*axes_c, indexing="ij")).reshape(grid.dim, -1).T
    out = []
    for frac in widths:
        half = np.array([frac * (hi - lo) for lo, hi in grid.extent])
        for c in centers:
            if all(ci - w >= lo + 2 * h and ci + w <= hi - 2 * h
                   for ci, w, h, (lo, hi) in zip(c, half, grid.h, grid.extent)):
                out.append((c, half))
    return out


class _FirstVariation:
    """First variation of the slack at ``eta = 0`` for separable ``eta = p(x) theta(t)``.

    ``L(p theta) = int [Phi(u) theta' - f_lam theta . Dp - f_u theta p] + int u_0 p theta(0)``
    reduces to a spatial integral against time moments of ``Phi(u)``,
    ``f_lam`` and ``f_u``, computed once per time profile.
    """

    def __init__(self, ev: "_SlackEvaluator"):
        self.ev = ev
        g = ev.grid
        x = g.coords()[None]
        t = g.times().reshape((-1,) + (1,) * g.dim)
        u = ev.u.values
        Du = fl.gradient(ev.u).values
        spec = ev.spec
        self.f_lam = np.asarray(spec.d_lam(x, t, u, Du), dtype=float)
        self.f_u = np.broadcast_to(np.asarray(spec.d_u(x, t, u, Du), dtype=float), u.shape)
        self.periodic = ev.u.boundary_kind == fl.PERIODIC
        self._moments = {}

    def moments(self, theta: np.ndarray, key):
        if key not in self._moments:
            g = self.ev.grid
            edge = 2 if g.n_levels >= 3 else 1
            dtheta = np.gradient(theta, g.dt, edge_order=edge)
            w = g.time_weights()
            A = np.tensordot(w * dtheta, self.ev.phi_u, axes=1)
            B = np.tensordot(w * theta, self.f_lam, axes=1)
            C = np.tensordot(w * theta, self.f_u, axes=1)
            self._moments[key] = (A, B, C, theta[0], float(np.sum(w * theta * theta)))
        return self._moments[key]

    def __call__(self, profile: np.ndarray, theta: np.ndarray, key) -> float:
        A, B, C, theta0, _ = self.moments(theta, key)
        g = self.ev.grid
        Dp = fl.spatial_gradient(profile, g)
        integrand = (np.sum((A - C + theta0 * self.ev.u0) * profile, axis=-1) - np.sum(B * Dp, axis=-1))
        return float(fl.spatial_integrate(integrand, g))


def adversarial_eta(u, phi, u0, spec, top: int = 5, max_amplitude: float = 10.0, centers_per_axis=None,
                    widths=ADVERSARIAL_WIDTHS, powers=ADVERSARIAL_POWERS, evaluator=None) -> list:
    """Most damaging scaled bump perturbations.

    Candidates are unit bumps on a lattice of centres and widths (fractions
    of the box) times ``(1 - s)^j``.  Each candidate ``g`` is ranked by
    ``L(g)^2 / ||D g||^2`` with ``L`` the first variation of the slack; for
    the best ``top`` the curvature ``Q`` of ``c -> slack(c g)`` is measured
    by a symmetric difference and ``c* g`` with ``c* = -L / (2 Q)`` is
    returned.  Non-differentiable densities use difference quotients for
    ``L`` as well (slow).
    """
    ev = evaluator or _SlackEvaluator(u, phi, u0, spec)
    g = ev.grid
    m = ev.u.m
    if centers_per_axis is None:
        centers_per_axis = 49 if g.dim == 1 else 13
    lattice = _candidate_lattice(g, centers_per_axis, widths)
    thetas = {pw: _time_profile(g, "power", pw) for pw in powers}
    fv = _FirstVariation(ev) if spec.differentiable else None
    scored = []
    for li, (c, half) in enumerate(lattice):
        prof = bump(np.sum(((g.coords() - c) / half) ** 2, axis=-1))
        grad_sq = float(fl.spatial_integrate(np.sum(fl.spatial_gradient(prof[..., None], g) ** 2, axis=-1), g))
        val_sq = float(fl.spatial_integrate(prof * prof, g))
        for comp in range(m):
            profile = np.zeros(g.space_shape + (m,))
            profile[..., comp] = prof
            for pw, theta in thetas.items():
                if fv is not None:
                    L = fv(profile, theta, pw)
                    tsq = fv.moments(theta, pw)[4]
                else:
                    tf = _lattice_test_function(g, profile, theta, c, half, pw, comp)
                    d = 1e-4
                    L = (ev.slack(tf.scaled(d)) - ev.slack(tf.scaled(-d))) / (2 * d)
                    tsq = float(np.sum(g.time_weights() * theta * theta))
                scored.append((L * L / (tsq * (grad_sq + val_sq)), L, li, comp, pw))
    scored.sort(key=lambda r: (-r[0], r[2], r[3], r[4]))
    out = []
    for _, L, li, comp, pw in scored[:top]:
        c, half = lattice[li]
        profile = np.zeros(g.space_shape + (m,))
        profile[..., comp] = bump(np.sum(((g.coords() - c) / half) ** 2, axis=-1))
        cand = _lattice_test_function(g, profile, thetas[pw], c, half, pw, comp)
        d = 1e-2
        Q = (ev.slack(cand.scaled(d)) + ev.slack(cand.scaled(-d))) / (2 * d * d)
        if Q > 0:
            amp = float(np.clip(-L / (2 * Q), -max_amplitude, max_amplitude))
        else:
            amp = -float(np.sign(L)) * max_amplitude if L != 0 else max_amplitude
        out.append(cand.scaled(amp))
    return out


def _lattice_test_function(g, profile, theta, c, half, pw, comp) -> TestFunction:
    return TestFunction(-1, g, profile, theta, "adversarial", 1.0,
                        tuple((ci - w, ci + w) for ci, w in zip(c, half)),
                        {"center": [float(v) for v in c], "half_width": [float(v) for v in half],
                         "time_power": int(pw), "component": int(comp)})


# -- report -------------------------------------------------------------------

@dataclass
class MinimalityReport:
    ids: list
    families: list
    amplitudes: list
    slacks: list
    tolerance_used: float
    terms: list = field(default_factory=list)

    @property
    def min_slack(self) -> float:
        return float(min(self.slacks))

    @property
    def worst_eta(self) -> int:
        # lowest position wins ties
        return self.ids[int(np.argmin(self.slacks))]

    @property
    def passed(self) -> bool:
        return self.min_slack >= -self.tolerance_used

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def summary(self) -> dict:
        return {"min_slack": self.min_slack, "worst_eta": self.worst_eta, "tolerance": self.tolerance_used,
                "verdict": self.verdict, "count": len(self.slacks)}

    def to_text(self) -> str:
        lines = ["id family amplitude slack"]
        for i, fam, a, s in zip(self.ids, self.families, self.amplitudes, self.slacks):
            lines.append(f"{i} {fam} {a!r} {s!r}")
        return "\n".join(lines) + "\n"

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)


def check_parabolic_minimum(u: fl.SpaceTimeField, phi, u0, spec: fn.FunctionalSpec, bank, tolerance=None,
                            adversarial: bool = True, workers: int = 1) -> MinimalityReport:
    """Evaluate ``slack(eta)`` over ``bank`` (plus adversarial candidates).

    ``tolerance=None`` uses :func:`default_tolerance`.  Never raises on a
    failing certificate; shape or admissibility errors raise ``ValueError``.
    """
    bank = list(bank)
    if not bank:
        raise ValueError("test-function bank is empty")
    if tolerance is None:
        tolerance = default_tolerance(u, spec)
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    ev = _SlackEvaluator(u, phi, u0, spec)
    if adversarial:
        next_id = max(getattr(b, "id", i) for i, b in enumerate(bank)) + 1
        extra = adversarial_eta(u, phi, u0, spec, evaluator=ev)
        bank = bank + [e.scaled(1.0, new_id=next_id + k) for k, e in enumerate(extra)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            terms = list(pool.map(ev.terms, bank))
    else:
        terms = [ev.terms(b) for b in bank]
    return MinimalityReport(
        ids=[getattr(b, "id", i) for i, b in enumerate(bank)],
        families=[getattr(b, "family", "field") for b in bank],
        amplitudes=[float(getattr(b, "amplitude", np.nan)) for b in bank],
        slacks=[t.slack for t in terms],
        tolerance_used=float(tolerance),
        terms=terms,
    )
