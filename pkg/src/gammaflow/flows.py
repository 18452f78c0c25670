"""
Gradient-flow solvers.

Three evolutions are covered, all written as ``d_t Phi(u) = -grad F(u)``:

* Allen-Cahn ``u_t - eps^2 Lap u + u^3 - u = 0`` (``Phi`` = identity),
  semi-implicit: implicit diffusion through a sine-transform solve, explicit
  (optionally stabilized) reaction;
* Newtonian filtration ``d_t phi^k(u) = div(a grad u^k) + h^k``, backward
  Euler with damped Newton for the monotone ``Phi``;
* p-Laplace ``d_t phi^k(u) = div(a |grad u|^(p-2) grad u)``, backward Euler
  with lagged (Kacanov) diffusivity regularized as
  ``(|grad u|^2 + delta^2)^((p-2)/2)``.

Every solve records all stored time levels, the discrete ``d_t Phi(u)``,
an energy trace and the two norms of the a-priori estimate
``||d_t Phi(u)||_{L^2} + ||u||_{V_2}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from . import discretization as disc
from . import fields as fl
from . import functionals as fn

ALLEN_CAHN = "allen_cahn"
FILTRATION = "filtration"
P_LAPLACE = "p_laplace"

CLAMPED = "clamped"
SEMI_IMPLICIT = "semi_implicit"
EXPLICIT = "explicit"
STRANG = "strang"  # Allen-Cahn only: exact reaction half-steps around an exact heat step


class FlowSolverError(RuntimeError):
    """A time step could not be completed.

    ``level`` is the stored time level being computed, ``history`` the
    residual (or update) norms of the failing iteration.
    """

    def __init__(self, message, level=None, history=None):
        super().__init__(message)
        self.level = level
        self.history = list(history or [])


# -- Phi maps ----------------------------------------------------------------

class _Component:
    def __init__(self, forward, inverse=None, derivative=None):
        self.forward = forward
        self.inverse = inverse
        self.derivative = derivative


def _bisect_inverse(func, y, tol=1e-12, max_iter=200):
    """Vectorized monotone bisection for ``func(s) = y``."""
    y = np.asarray(y, dtype=float)
    lo = -np.ones_like(y)
    hi = np.ones_like(y)
    for _ in range(200):
        grow = func(lo) > y
        if not grow.any():
            break
        lo = np.where(grow, 2.0 * lo, lo)
    for _ in range(200):
        grow = func(hi) < y
        if not grow.any():
            break
        hi = np.where(grow, 2.0 * hi, hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = func(mid) < y
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= tol * np.maximum(1.0, np.abs(mid))):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True, eq=False)
class PhiMap:
    """Component-wise monotone map ``Phi(s) = (phi^1(s_1), ..., phi^m(s_m))``.

    Build with :meth:`identity`, :meth:`power` or :meth:`monotone`.  A map
    with a single component is applied to every component of its argument.
    """

    kind: str
    components: tuple
    gamma: float = 1.0

    @classmethod
    def identity(cls, m: int = 1) -> "PhiMap":
        ident = _Component(lambda s: s, lambda y: y, lambda s: np.ones_like(s))
        return cls("identity", (ident,) * m)

    @classmethod
    def power(cls, gamma: float, m: int = 1) -> "PhiMap":
        """``phi(s) = |s|^(gamma - 1) s``."""
        if not gamma > 0:
            raise ValueError("power map needs gamma > 0")
        g = float(gamma)
        comp = _Component(
            lambda s: np.sign(s) * np.abs(s) ** g,
            lambda y: np.sign(y) * np.abs(y) ** (1.0 / g),
            lambda s: g * np.abs(s) ** (g - 1.0) if g >= 1 else g * np.minimum(np.abs(s) ** (g - 1.0), 1e8),
        )
        return cls("power", (comp,) * m, g)

    @classmethod
    def monotone(cls, funcs, inverses=None, derivatives=None) -> "PhiMap":
        """User-supplied nondecreasing components; missing inverses use bisection."""
        funcs = list(funcs) if isinstance(funcs, (list, tuple)) else [funcs]
        n = len(funcs)
        inverses = list(inverses) if inverses is not None else [None] * n
        derivatives = list(derivatives) if derivatives is not None else [None] * n
        comps = tuple(_Component(f, i, d) for f, i, d in zip(funcs, inverses, derivatives))
        phi = cls("user_monotone", comps)
        if not phi.check_monotone():
            raise ValueError("user map is not nondecreasing on sampled points")
        return phi

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def _apply(self, u, attr, fallback):
        u = np.asarray(u, dtype=float)
        if len(self.components) == 1:
            return fallback(self.components[0], attr, u)
        if u.shape[-1] != len(self.components):
            raise ValueError("component count mismatch")
        return np.stack([fallback(c, attr, u[..., k]) for k, c in enumerate(self.components)], axis=-1)

    @staticmethod
    def _call(comp, attr, u):
        f = getattr(comp, attr)
        if f is not None:
            return f(u)
        if attr == "inverse":
            return _bisect_inverse(comp.forward, u)
        step = 1e-6 * np.maximum(1.0, np.abs(u))
        return (comp.forward(u + step) - comp.forward(u - step)) / (2.0 * step)

    def __call__(self, u):
        if self.is_identity:
            return np.asarray(u, dtype=float)
        return self._apply(u, "forward", self._call)

    def inverse(self, y):
        if self.is_identity:
            return np.asarray(y, dtype=float)
        return self._apply(y, "inverse", self._call)

    def derivative(self, u):
        return self._apply(u, "derivative", self._call)

    def check_monotone(self, n: int = 1000, seed: int = 0, bound: float = 10.0) -> bool:
        s = np.sort(np.random.default_rng(seed).uniform(-bound, bound, n))
        return all(np.all(np.diff(c.forward(s)) >= 0) for c in self.components)


# -- problems and solutions -------------------------------------------------

@dataclass(frozen=True, eq=False)
class FlowProblem:
    """Everything a solver needs.

    ``grid`` carries the *stored* time levels; each stored interval is
    advanced with ``substeps`` solver steps.  ``initial`` is ``u_0`` either
    as a callable of node coordinates or as an array ``(space..., m)``; with
    ``initial_is_phi`` the solver starts from ``u(., 0) = Phi^{-1}(u_0)``,
    otherwise from ``u(., 0) = u_0``.
    """

    kind: str
    grid: fl.Grid
    initial: object
    spec: fn.FunctionalSpec
    phi: PhiMap = field(default_factory=PhiMap.identity)
    boundary: str = fl.DIRICHLET_ZERO
    stepper: str = SEMI_IMPLICIT
    step_safety: float = 1.0
    substeps: int = 1
    eps: Optional[float] = None
    coeff: Optional[Callable] = None
    source: Optional[Callable] = None
    p: float = 2.0
    m: int = 1
    stabilization: float = 0.0
    delta_reg: float = 1e-8
    newton_tol: float = 1e-11
    newton_maxiter: int = 50
    inner_tol: float = 1e-10
    inner_maxiter: int = 200
    initial_is_phi: bool = True

    def __post_init__(self):
        if not 0 < self.step_safety <= 1:
            raise ValueError("step_safety must lie in (0, 1]")
        if self.boundary not in (fl.DIRICHLET_ZERO, fl.PERIODIC, CLAMPED):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.stepper not in (SEMI_IMPLICIT, EXPLICIT, STRANG):
            raise ValueError(f"unknown stepper {self.stepper!r}")
        if int(self.substeps) < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def dt(self) -> float:
        return self.grid.dt / self.substeps

    def initial_data(self) -> np.ndarray:
        """``u_0`` sampled on the nodes, shape ``(space..., m)``."""
        g = self.grid
        u0 = self.initial(g.coords()) if callable(self.initial) else self.initial
        u0 = np.array(np.broadcast_to(np.asarray(u0, dtype=float), np.shape(u0)), dtype=float)
        if u0.ndim == g.dim:
            u0 = u0[..., None]
        if u0.shape != g.space_shape + (self.m,):
            raise ValueError(f"initial data shape {u0.shape} does not match grid {g.space_shape} x m={self.m}")
        if not np.all(np.isfinite(u0)):
            raise ValueError("initial data is not finite")
        return u0


@dataclass
class FlowSolution:
    field: fl.SpaceTimeField
    phi_time_derivative: fl.SpaceTimeField
    energy_trace: np.ndarray
    estimate_norms: dict
    u0: np.ndarray
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_field(cls, u: fl.SpaceTimeField, u0=None, phi: PhiMap = None, spec=None):
        """Wrap a given field (e.g. an exact solution) so it can be checked like a solve."""
        phi = phi or PhiMap.identity(u.m)
        if u0 is None:
            u0 = phi(u.values[0])
        u0 = np.asarray(u0, dtype=float)
        if u0.ndim == u.grid.dim:
            u0 = u0[..., None]
        dtphi = _phi_time_derivative(u, phi)
        trace = _energy_trace(u, spec) if spec is not None else np.full(u.grid.n_levels, np.nan)
        return cls(u, dtphi, trace, _estimate_norms(u, dtphi), u0, {"scheme": "given field"})


def _phi_time_derivative(u: fl.SpaceTimeField, phi: PhiMap) -> fl.SpaceTimeField:
    """Backward differences of ``Phi(u)``; level 0 repeats level 1."""
    ph = phi(u.values)
    d = np.empty_like(ph)
    d[1:] = np.diff(ph, axis=0) / u.grid.dt
    d[0] = d[1]
    kind = u.boundary_kind if phi.is_identity or u.boundary_kind != fl.DIRICHLET_ZERO else fl.FREE
    if kind == fl.DIRICHLET_ZERO and np.any(d[:, u.grid.boundary_mask()] != 0):
        kind = fl.FREE
    return fl.SpaceTimeField(u.grid, d, kind)


def _estimate_norms(u: fl.SpaceTimeField, dtphi: fl.SpaceTimeField) -> dict:
    l2 = fl.lp_norm(u, 2.0)
    grad = fl.lp_norm(fl.gradient(u), 2.0)
    return {"dt_phi_L2": fl.lp_norm(dtphi, 2.0), "V2": float(np.hypot(l2, grad))}


def _energy_trace(u: fl.SpaceTimeField, spec) -> np.ndarray:
    g = u.grid
    periodic = u.boundary_kind == fl.PERIODIC
    return np.array([fn.spatial_energy(u.values[k], g, spec, t, periodic) for k, t in enumerate(g.times())])


def _allen_cahn_energy_trace(u: fl.SpaceTimeField, eps: float) -> np.ndarray:
    """Double-well energy with the edge-difference gradient term the steppers dissipate."""
    g = u.grid
    w = g.space_weights()
    out = []
    for level in u.values[..., 0]:
        well = 0.25 * float(np.sum(w * (level * level - 1.0) ** 2))
        out.append(well + eps * eps * disc.edge_dirichlet_energy(level, g))
    return np.array(out)


def _finish(prob: FlowProblem, levels, u0, meta) -> FlowSolution:
    g = prob.grid
    kind = {fl.DIRICHLET_ZERO: fl.DIRICHLET_ZERO, fl.PERIODIC: fl.PERIODIC}.get(prob.boundary, fl.FREE)
    u = fl.SpaceTimeField(g, np.stack(levels), kind)
    dtphi = _phi_time_derivative(u, prob.phi)
    meta = {
        "kind": prob.kind, "stepper": prob.stepper, "boundary": prob.boundary,
        "solver_dt": prob.dt, "substeps": prob.substeps, "stored_levels": g.n_levels,
        "initial_is_phi": prob.initial_is_phi, **meta,
    }
    if prob.kind == ALLEN_CAHN:
        trace = _allen_cahn_energy_trace(u, prob.eps)
    else:
        trace = _energy_trace(u, prob.spec)
    return FlowSolution(u, dtphi, trace, _estimate_norms(u, dtphi), u0, meta)


def _start(prob: FlowProblem):
    u0 = prob.initial_data()
    start = prob.phi.inverse(u0) if prob.initial_is_phi else u0.copy()
    if prob.boundary == fl.DIRICHLET_ZERO:
        start[prob.grid.boundary_mask()] = 0.0
    elif prob.boundary == fl.PERIODIC:
        start = fl._enforce_boundary(start[None], prob.grid, fl.PERIODIC)[0]
    data = prob.phi(start) if not prob.initial_is_phi else u0
    return start, data


# -- Allen-Cahn --------------------------------------------------------------

def solve_allen_cahn(prob: FlowProblem) -> FlowSolution:
    """Allen-Cahn flow ``u_t = eps^2 Lap u - (u^3 - u)``.

    Boundary values are held at their initial values (``clamped``) or at
    zero.  The semi-implicit step solves

    ``(1/dt + S) u^{n+1} - eps^2 Lap_h u^{n+1} = (1/dt + S) u^n - (u^n^3 - u^n)``

    with stabilization constant ``S = prob.stabilization``.  The ``strang``
    stepper is second order in time: half a step of the exact reaction flow
    ``u / sqrt(u^2 + (1 - u^2) exp(-dt))``, a full step of the exact discrete
    heat semigroup, then the second reaction half-step.
    """
    if prob.m != 1 or not prob.phi.is_identity:
        raise ValueError("Allen-Cahn flow is scalar with Phi = identity")
    if prob.eps is None or not prob.eps > 0:
        raise ValueError("Allen-Cahn flow needs eps > 0")
    if prob.boundary == fl.PERIODIC:
        raise ValueError("Allen-Cahn solver supports clamped or dirichlet_zero boundaries")
    g = prob.grid
    dt = prob.dt
    e2 = prob.eps**2
    u, data = _start(prob)
    u = u[..., 0]
    bmask = g.boundary_mask()
    frame = np.where(bmask, u, 0.0)  # fixed boundary values
    inner = (slice(1, -1),) * g.dim

    if prob.stepper == EXPLICIT:
        limit = prob.step_safety * min(g.h) ** 2 / (2 * g.dim * e2)
        if dt > limit:
            raise ValueError(f"explicit step dt={dt:.3g} exceeds stability limit {limit:.3g}")
        solver = None
    elif prob.stepper == STRANG:
        solver = disc.DirichletHeatPropagator(g, e2, dt, frame)
        decay = np.exp(-dt)  # exp(-2 * (dt / 2))
    else:
        shift = 1.0 / dt + prob.stabilization
        solver = disc.ShiftedDirichletSolver(g, shift, e2)
        lift = e2 * disc.laplacian_5pt(frame, g)

    levels = [u[..., None].copy()]
    for k in range(g.n_time_steps):
        for _ in range(prob.substeps):
            if prob.stepper == STRANG:
                w = u[inner]
                w = w / np.sqrt(w * w + (1.0 - w * w) * decay)
                w = solver.step(w)
                w = w / np.sqrt(w * w + (1.0 - w * w) * decay)
                u = frame.copy()
                u[inner] = w
                continue
            react = u[inner] ** 3 - u[inner]
            if solver is None:
                new_inner = u[inner] + dt * (e2 * disc.laplacian_5pt(u, g) - react)
            else:
                rhs = shift * u[inner] - react + lift
                new_inner = solver.solve(rhs)
            u = frame.copy()
            u[inner] = new_inner
        if not np.all(np.isfinite(u)):
            raise FlowSolverError("Allen-Cahn step produced non-finite values", level=k + 1)
        levels.append(u[..., None].copy())
    schemes = {SEMI_IMPLICIT: "implicit diffusion / explicit reaction", EXPLICIT: "forward Euler",
               STRANG: "Strang splitting, exact reaction / exact discrete heat"}
    meta = {"eps": prob.eps, "stabilization": prob.stabilization, "scheme": schemes[prob.stepper]}
    return _finish(prob, levels, data, meta)


# -- filtration / p-Laplace -------------------------------------------------

class _Assembler:
    def __init__(self, prob: FlowProblem):
        g = prob.grid
        self.grid = g
        self.periodic = prob.boundary == fl.PERIODIC
        if prob.boundary == CLAMPED:
            raise ValueError("filtration and p-Laplace solvers use dirichlet_zero or periodic boundaries")
        self.idx = disc.node_index(g, self.periodic)
        self.free = disc.free_dofs(g, self.periodic)
        self.mass = disc.lumped_mass(g, self.periodic)[self.free]
        self.coeff = prob.coeff
        self.n = disc.n_dofs(g, self.periodic)
        self._cache = {}

    def gather(self, u_nodes):
        """Node array ``(space..., m)`` -> free-dof array ``(n_free, m)``."""
        full = np.zeros((self.n, u_nodes.shape[-1]))
        full[self.idx.ravel()] = u_nodes.reshape(-1, u_nodes.shape[-1])
        return full[self.free]

    def scatter(self, u_free):
        full = np.zeros((self.n, u_free.shape[-1]))
        full[self.free] = u_free
        return full[self.idx.ravel()].reshape(self.grid.space_shape + (u_free.shape[-1],))

    def stiffness(self, t, weight=None):
        """Free-free block of the stiffness for ``a(x, t) * weight`` (weight per cell)."""
        if weight is None and self._cache.get("t") == t:
            return self._cache["K"]
        ca = disc.cell_coefficient(self.coeff, self.grid, t)
        if weight is not None:
            ca = ca * weight[..., None, None]
        K = disc.stiffness(self.grid, ca, self.periodic)
        K = K[self.free][:, self.free].tocsc()
        if weight is None:
            self._cache = {"t": t, "K": K}
        return K


def _source_free(prob, asm, t):
    if prob.source is None:
        return None
    h = np.asarray(prob.source(prob.grid.coords(), t), dtype=float)
    h = np.broadcast_to(h, prob.grid.space_shape + (prob.m,)) if h.ndim > prob.grid.dim else np.broadcast_to(
        h[..., None], prob.grid.space_shape + (prob.m,))
    return asm.gather(np.ascontiguousarray(h))


def _coefficient_time_dependent(prob) -> bool:
    g = prob.grid
    xc = disc.cell_centers(g)
    a0 = np.asarray(prob.coeff(xc, g.t_start), dtype=float)
    a1 = np.asarray(prob.coeff(xc, g.t_start + 0.5 * g.t_final), dtype=float)
    return not np.array_equal(a0, a1)


def solve_filtration(prob: FlowProblem) -> FlowSolution:
    """Newtonian filtration by backward Euler and damped Newton.

    Each step solves, per component,
    ``M (Phi(u) - Phi(u^n)) + dt K(t^{n+1}) u = dt M h(t^{n+1})``
    with ``K`` the P1/Q1 stiffness of ``a`` and ``M`` the lumped mass.
    """
    if prob.coeff is None:
        raise ValueError("filtration problem needs a coefficient")
    g = prob.grid
    asm = _Assembler(prob)
    u_nodes, data = _start(prob)
    u = asm.gather(u_nodes)
    M = asm.mass
    levels = [asm.scatter(u)]
    dt = prob.dt
    varying = _coefficient_time_dependent(prob)
    newton_counts = []
    t = g.t_start
    K = asm.stiffness(t)

    if prob.stepper == STRANG:
        raise ValueError("the strang stepper is only available for Allen-Cahn flow")
    if prob.stepper == EXPLICIT:
        lam_max = prob.spec.params.get("lam_max", 1.0)
        limit = prob.step_safety * min(g.h) ** 2 / (2 * g.dim * lam_max)
        if dt > limit:
            raise ValueError(f"explicit step dt={dt:.3g} exceeds stability limit {limit:.3g}")

    for k in range(g.n_time_steps):
        for _ in range(prob.substeps):
            t_new = t + dt
            if varying:
                K = asm.stiffness(t_new if prob.stepper == SEMI_IMPLICIT else t)
            h = _source_free(prob, asm, t_new if prob.stepper == SEMI_IMPLICIT else t)
            if prob.stepper == EXPLICIT:
                phi_new = prob.phi(u) - dt * (K @ u) / M[:, None]
                if h is not None:
                    phi_new += dt * h
                u = prob.phi.inverse(phi_new)
            else:
                u, its = _newton_step(prob, K, M, u, h, dt, level=k + 1)
                newton_counts.append(its)
            t = t_new
        levels.append(asm.scatter(u))
    meta = {"scheme": "backward Euler, damped Newton", "newton_tol": prob.newton_tol,
            "newton_max_iterations_used": max(newton_counts, default=0)}
    return _finish(prob, levels, data, meta)


def _newton_step(prob, K, M, u_old, h, dt, level):
    phi = prob.phi
    phi_old = phi(u_old)
    u = u_old.copy()
    rhs_src = 0.0 if h is None else dt * M[:, None] * h

    def residual(v):
        return M[:, None] * (phi(v) - phi_old) + dt * (K @ v) - rhs_src

    scale = max(1.0, float(np.max(np.abs(M[:, None] * phi_old))))
    r = residual(u)
    history = [float(np.max(np.abs(r)))]
    if phi.is_identity:
        # linear system: one exact solve
        A = sps.diags(M) + dt * K
        u = _solve_columns(A, M[:, None] * phi_old + rhs_src)
        return u, 1
    for it in range(1, prob.newton_maxiter + 1):
        if history[-1] <= prob.newton_tol * scale:
            return u, it - 1
        du = np.empty_like(u)
        dphi = phi.derivative(u)
        for c in range(u.shape[1]):
            J = sps.diags(M * dphi[:, c]) + dt * K
            du[:, c] = spla.spsolve(J.tocsc(), -r[:, c])
        step = 1.0
        while True:
            trial = u + step * du
            r_trial = residual(trial)
            n_trial = float(np.max(np.abs(r_trial)))
            if n_trial < (1 - 1e-4 * step) * history[-1] or step < 1e-6:
                break
            step *= 0.5
        u, r = trial, r_trial
        history.append(n_trial)
    if history[-1] <= prob.newton_tol * scale:
        return u, prob.newton_maxiter
    raise FlowSolverError(f"Newton did not converge at level {level}", level=level, history=history)


def _solve_columns(A, B):
    lu = spla.splu(sps.csc_matrix(A))
    return np.column_stack([lu.solve(B[:, c]) for c in range(B.shape[1])])


def solve_p_laplace(prob: FlowProblem) -> FlowSolution:
    """Weighted p-Laplace flow by backward Euler with lagged diffusivity.

    Inner iteration ``j``: freeze ``kappa_j = (|grad u_j|^2 + delta^2)^((p-2)/2)``
    per cell and solve the linearized problem
    ``M (Phi'(u_j) (u_{j+1} - u_j) + Phi(u_j) - Phi(u^n)) + dt K(a kappa_j) u_{j+1} = 0``
    until the update falls below ``inner_tol``.  For ``p > 2`` the plain
    iteration can settle into a two-cycle where the diffusivity degenerates,
    so the update is relaxed, ``u_{j+1} = u_j + w (new - u_j)``, with ``w``
    halved (down to 1/64) whenever the update grows.
    """
    if prob.coeff is None:
        raise ValueError("p-Laplace problem needs a coefficient")
    if not prob.p > 1:
        raise ValueError("p must exceed 1")
    if prob.stepper != SEMI_IMPLICIT:
        raise ValueError("p-Laplace flow is only available with the semi_implicit stepper")
    g = prob.grid
    asm = _Assembler(prob)
    u_nodes, data = _start(prob)
    u = asm.gather(u_nodes)
    M = asm.mass
    dt = prob.dt
    levels = [asm.scatter(u)]
    inner_counts = []
    t = g.t_start
    exponent = 0.5 * (prob.p - 2.0)
    d2 = prob.delta_reg**2

    for k in range(g.n_time_steps):
        for _ in range(prob.substeps):
            t += dt
            phi_old = prob.phi(u)
            uj = u.copy()
            history = []
            relax = 1.0
            for it in range(1, prob.inner_maxiter + 1):
                kappa = (disc.cell_gradient_sq(asm.scatter(uj), g) + d2) ** exponent
                K = asm.stiffness(t, kappa)
                if prob.phi.is_identity:
                    new = _solve_columns(sps.diags(M) + dt * K, M[:, None] * phi_old)
                else:
                    dphi = prob.phi.derivative(uj)
                    new = np.empty_like(uj)
                    rhs = M[:, None] * (phi_old - prob.phi(uj) + dphi * uj)
                    for c in range(uj.shape[1]):
                        A = sps.diags(M * dphi[:, c]) + dt * K
                        new[:, c] = spla.spsolve(A.tocsc(), rhs[:, c])
                change = float(np.max(np.abs(new - uj)))
                if history and change > history[-1] and relax > 1.0 / 64:
                    relax *= 0.5
                history.append(change)
                uj = uj + relax * (new - uj)
                if change <= prob.inner_tol * max(1.0, float(np.max(np.abs(uj)))):
                    break
            else:
                raise FlowSolverError(f"lagged-diffusivity iteration stagnated at level {k + 1}",
                                      level=k + 1, history=history)
            inner_counts.append(it)
            u = uj
        levels.append(asm.scatter(u))
    meta = {"scheme": "backward Euler, lagged diffusivity", "p": prob.p, "delta_reg": prob.delta_reg,
            "inner_tol": prob.inner_tol, "inner_max_iterations_used": max(inner_counts, default=0)}
    return _finish(prob, levels, data, meta)


def solve(prob: FlowProblem) -> FlowSolution:
    solvers = {ALLEN_CAHN: solve_allen_cahn, FILTRATION: solve_filtration, P_LAPLACE: solve_p_laplace}
    try:
        return solvers[prob.kind](prob)
    except KeyError:
        raise ValueError(f"unknown flow kind {prob.kind!r}") from None


# -- problem builders --------------------------------------------------------

def allen_cahn_problem(grid: fl.Grid, eps: float, initial, boundary: str = CLAMPED, substeps: int = 1,
                       stepper: str = SEMI_IMPLICIT, stabilization: float = 0.0, **kw) -> FlowProblem:
    spec = fn.make_ginzburg_landau(eps, grid.dim)
    return FlowProblem(ALLEN_CAHN, grid, initial, spec, PhiMap.identity(), boundary, stepper,
                       substeps=substeps, eps=eps, stabilization=stabilization, **kw)


def filtration_problem(grid: fl.Grid, coeff: Callable, initial, source: Callable = None,
                       phi: PhiMap = None, boundary: str = fl.DIRICHLET_ZERO, m: int = 1,
                       substeps: int = 1, **kw) -> FlowProblem:
    spec = fn.make_filtration(coeff, source, dim=grid.dim, m=m, extent=grid.extent, t_final=grid.t_final)
    return FlowProblem(FILTRATION, grid, initial, spec, phi or PhiMap.identity(m), boundary,
                       coeff=coeff, source=source, m=m, substeps=substeps, p=2.0, **kw)


def p_laplace_problem(grid: fl.Grid, coeff: Callable, p: float, initial, phi: PhiMap = None,
                      boundary: str = fl.DIRICHLET_ZERO, m: int = 1, substeps: int = 1, **kw) -> FlowProblem:
    spec = fn.make_p_laplace(coeff, p, dim=grid.dim, m=m, extent=grid.extent, t_final=grid.t_final)
    return FlowProblem(P_LAPLACE, grid, initial, spec, phi or PhiMap.identity(m), boundary,
                       coeff=coeff, p=float(p), m=m, substeps=substeps, **kw)


def constant(value: float) -> Callable:
    """Coefficient callable ``(x, t) -> value``."""
    return lambda x, t: np.full(np.broadcast_shapes(np.shape(x)[:-1], np.shape(t)), float(value))


# -- weak residual -----------------------------------------------------------

def _eta_field(eta) -> fl.SpaceTimeField:
    return getattr(eta, "eta", eta)


def weak_residuals(sol: FlowSolution, spec: fn.FunctionalSpec, phi: PhiMap, test_bank) -> np.ndarray:
    """Weak-form residual of ``d_t Phi(u) - div f_lam + f_u = 0`` against each test function:

    ``| int [-Phi(u) d_t eta + f_lam(u, Du) : D eta + f_u(u, Du) . eta] dx dt - int u_0 . eta(x, 0) dx |``
    """
    if not spec.differentiable:
        raise ValueError("functional has no closed-form partial derivatives")
    u = sol.field
    g = u.grid
    x = g.coords()[None]
    t = g.times().reshape((-1,) + (1,) * g.dim)
    Du = fl.gradient(u).values
    f_lam = np.asarray(spec.d_lam(x, t, u.values, Du))
    f_u = np.broadcast_to(np.asarray(spec.d_u(x, t, u.values, Du)), u.values.shape)
    phi_u = phi(u.values)
    out = []
    for eta in test_bank:
        e = _eta_field(eta)
        if not e.grid.compatible(g) or e.m != u.m:
            raise ValueError("test function does not match the solution grid")
        if np.any(e.values[-1] != 0.0):
            raise ValueError("test function must vanish at the final time")
        e_t = fl.time_derivative(e).values
        De = fl.gradient(e).values
        integrand = -np.sum(phi_u * e_t, axis=-1) + np.sum(f_lam * De, axis=-1) + np.sum(f_u * e.values, axis=-1)
        space_time = float(fl.integrate((g, integrand)))
        initial = float(fl.spatial_integrate(np.sum(sol.u0 * e.values[0], axis=-1), g))
        out.append(abs(space_time - initial))
    return np.array(out)


def el_residual(sol: FlowSolution, spec: fn.FunctionalSpec, phi: PhiMap, test_bank) -> float:
    """Largest weak Euler-Lagrange residual over ``test_bank``."""
    return float(np.max(weak_residuals(sol, spec, phi, test_bank)))


# -- front tracking ----------------------------------------------------------

def zero_level_points(level: np.ndarray, grid: fl.Grid) -> np.ndarray:
    """Zero crossings of a 2D nodal field, by linear interpolation along grid lines."""
    u = np.asarray(level)
    if u.ndim == grid.dim + 1:
        u = u[..., 0]
    xs, ys = grid.axes()
    pts = []
    # crossings along x (between i and i+1 at fixed j)
    a, b = u[:-1, :], u[1:, :]
    ii, jj = np.nonzero(np.sign(a) * np.sign(b) < 0)
    s = a[ii, jj] / (a[ii, jj] - b[ii, jj])
    pts.append(np.column_stack([xs[ii] + s * (xs[ii + 1] - xs[ii]), ys[jj]]))
    a, b = u[:, :-1], u[:, 1:]
    ii, jj = np.nonzero(np.sign(a) * np.sign(b) < 0)
    s = a[ii, jj] / (a[ii, jj] - b[ii, jj])
    pts.append(np.column_stack([xs[ii], ys[jj] + s * (ys[jj + 1] - ys[jj])]))
    return np.concatenate(pts)


def front_radius(level: np.ndarray, grid: fl.Grid) -> float:
    """Mean distance of the zero level set to its centroid (``nan`` if no front)."""
    pts = zero_level_points(level, grid)
    if len(pts) == 0:
        return float("nan")
    return float(np.mean(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))


# -- checkpoints -------------------------------------------------------------

def save_solution(sol: FlowSolution, stem) -> list:
    """Write ``<stem>.field.bin``, ``<stem>.dtphi.bin`` and a ``<stem>.meta`` key-value sidecar."""
    stem = Path(stem)
    g = sol.field.grid
    paths = [stem.with_suffix(".field.bin"), stem.with_suffix(".dtphi.bin"), stem.with_suffix(".meta")]
    fl.write_binary(sol.field, paths[0])
    fl.write_binary(sol.phi_time_derivative, paths[1])
    meta = {
        "extent": ";".join(f"{lo!r},{hi!r}" for lo, hi in g.extent),
        "t_final": repr(g.t_final), "t_start": repr(g.t_start),
        "boundary_kind": sol.field.boundary_kind,
        "dtphi_boundary_kind": sol.phi_time_derivative.boundary_kind,
        "energy_trace": ",".join(repr(float(e)) for e in sol.energy_trace),
        "u0": ",".join(repr(float(v)) for v in sol.u0.ravel()),
        **{f"norm.{k}": repr(float(v)) for k, v in sol.estimate_norms.items()},
        **{f"meta.{k}": str(v) for k, v in sorted(sol.metadata.items())},
    }
    paths[2].write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))
    return paths


def load_solution(stem) -> FlowSolution:
    stem = Path(stem)
    meta = {}
    for line in stem.with_suffix(".meta").read_text().splitlines():
        if line.strip():
            k, _, v = line.partition(" = ")
            meta[k] = v
    extent = tuple(tuple(float(v) for v in part.split(",")) for part in meta["extent"].split(";"))
    kw = dict(extent=extent, t_final=float(meta["t_final"]), t_start=float(meta["t_start"]))
    u = fl.read_binary(stem.with_suffix(".field.bin"), boundary_kind=meta["boundary_kind"], **kw)
    dtphi = fl.read_binary(stem.with_suffix(".dtphi.bin"), boundary_kind=meta["dtphi_boundary_kind"], **kw)
    trace = np.array([float(v) for v in meta["energy_trace"].split(",")])
    u0 = np.array([float(v) for v in meta["u0"].split(",")]).reshape(u.grid.space_shape + (u.m,))
    norms = {k[5:]: float(v) for k, v in meta.items() if k.startswith("norm.")}
    md = {k[5:]: v for k, v in meta.items() if k.startswith("meta.")}
    return FlowSolution(u, dtphi, trace, norms, u0, md)
