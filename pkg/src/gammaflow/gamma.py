"""
Sweeps over the small parameter ``eps``.

A sweep solves the gradient flow of every member ``F^eps`` of a
:class:`~gammaflow.functionals.FunctionalFamily`, records energies and
convergence diagnostics against a limit candidate, and finally checks that
the limit candidate is a parabolic minimum of the limit functional.

Recovery sequences for the Ginzburg-Landau family are cut-off ``tanh``
layers that attain the surface tension ``2 sqrt(2) / 3`` per interface.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import fields as fl
from . import flows as fw
from . import functionals as fn
from . import minimality as mn

TIME_SCALES = {"eps^-2": lambda eps: eps**-2, "1": lambda eps: 1.0}

# allowed energy increase per stored step (solver round-off)
ENERGY_STEP_SLACK = 1e-10


# -- recovery sequences ------------------------------------------------------

@dataclass(frozen=True)
class SignPattern:
    """Piecewise constant 1D phase field: ``left_sign`` left of the first interface, flipping at each one."""

    interfaces: tuple = ()
    left_sign: float = 1.0

    def __post_init__(self):
        if self.left_sign not in (1.0, -1.0):
            raise ValueError("left_sign must be +1 or -1")
        if list(self.interfaces) != sorted(self.interfaces):
            raise ValueError("interfaces must be sorted")

    @property
    def k(self) -> int:
        return len(self.interfaces)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        flips = np.searchsorted(np.asarray(self.interfaces, dtype=float), x, side="right")
        return self.left_sign * np.where(flips % 2 == 0, 1.0, -1.0)

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        """Distance to the nearest interface, positive where the pattern is +1."""
        if not self.interfaces:
            return np.full_like(x, np.inf) * self(x)
        d = np.min(np.abs(x[..., None] - np.asarray(self.interfaces)), axis=-1)
        return d * self(x)


def layer_half_width(eps: float) -> float:
    """Half-width ``l`` beyond which the recovery profile equals +-1.

    ``l = sqrt(2) eps (log(1/eps) / 2 + 1/2)``; the energy defect of the cut
    is then of order ``eps``, so it dominates grid error and decays along a sweep.
    """
    return math.sqrt(2.0) * eps * (0.5 * math.log(1.0 / eps) + 0.5)


def recovery_sequence(pattern: SignPattern, eps: float, grid: fl.Grid) -> fl.SpaceTimeField:
    """Time-constant field with normalized ``tanh(d / (sqrt(2) eps))`` layers at the interfaces.

    Each layer is divided by its value at the cut ``l`` (see
    :func:`layer_half_width`, clipped to half the interface spacing and to
    the boundary distance) and equals the pure phase beyond it.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if grid.dim != 1:
        raise ValueError("recovery sequences are built on 1D grids")
    lo, hi = grid.extent[0]
    pts = np.asarray(pattern.interfaces, dtype=float)
    if np.any(pts <= lo) or np.any(pts >= hi):
        raise ValueError("interfaces must lie inside the domain")
    gaps = np.diff(np.concatenate([[lo], pts, [hi]]))
    spacing = np.diff(pts).min() if pattern.k > 1 else np.inf
    if pattern.k > 1 and 6.0 * math.sqrt(2.0) * eps >= spacing:
        raise ValueError(f"interfaces {spacing:.4g} apart are too close for eps={eps:g}: "
                         f"need spacing > 6 sqrt(2) eps = {6 * math.sqrt(2) * eps:.4g}")
    x = grid.axes()[0]
    if pattern.k == 0:
        prof = pattern(x)
    else:
        ell = min(layer_half_width(eps), 0.5 * spacing, gaps[0], gaps[-1])
        scale = math.sqrt(2.0) * eps
        d = pattern.signed_distance(x)
        prof = np.clip(np.tanh(d / scale) / math.tanh(ell / scale), -1.0, 1.0)
    vals = np.broadcast_to(prof[None, :, None], (grid.n_levels, grid.space_shape[0], 1))
    return fl.SpaceTimeField(grid, vals)


def sign_pattern_field(pattern: SignPattern, grid: fl.Grid) -> fl.SpaceTimeField:
    prof = pattern(grid.axes()[0])
    return fl.SpaceTimeField(grid, np.broadcast_to(prof[None, :, None], (grid.n_levels, prof.size, 1)))


@dataclass
class RecoveryRecord:
    eps: float
    normalized_energy: float
    relative_error: float
    l2_distance: float


def recovery_sweep(pattern: SignPattern, eps_list, grid: fl.Grid) -> list:
    """``E^eps(u^eps) / eps`` for the recovery members, with the distance to the sign pattern."""
    target = fn.limit_perimeter_value(pattern.k)
    limit = sign_pattern_field(pattern, grid)
    out = []
    for eps in eps_list:
        u = recovery_sequence(pattern, eps, grid)
        spec = fn.make_ginzburg_landau(eps, 1)
        value = fn.spatial_energy(u.values[0], grid, spec) / eps
        err = abs(value - target) / target if target else abs(value)
        dist = float(np.sqrt(fl.spatial_integrate(((u.values[0] - limit.values[0]) ** 2)[..., 0], grid)))
        out.append(RecoveryRecord(float(eps), float(value), float(err), dist))
    return out


# -- weak L1 diagnostic ------------------------------------------------------

def weak_l1_diagnostic(seq, limit, test_bank=None, grid: Optional[fl.Grid] = None, phi=None) -> np.ndarray:
    """``|int (Phi(v_eps) - Phi(v)) . psi|`` for every member and test field.

    ``seq`` and ``limit`` are spatial arrays ``(space...[, m])`` on ``grid``
    or space-time fields; ``test_bank`` defaults to the tensor sine bank.
    Returns an array ``(len(seq), len(test_bank))``.
    """
    phi = phi or (lambda v: v)
    spatial = not isinstance(limit, fl.SpaceTimeField)
    if spatial:
        if grid is None:
            raise ValueError("spatial fields need a grid")
        lim = np.asarray(limit, dtype=float)
        if lim.ndim == grid.dim:
            lim = lim[..., None]
        if lim.shape[:-1] != grid.space_shape:
            raise ValueError("limit does not match the grid")
        m = lim.shape[-1]
    else:
        grid, m = limit.grid, limit.m
        lim = limit.values
    if test_bank is None:
        test_bank = fl.sine_test_bank(grid, m)
    psis = [getattr(psi, "values", psi) for psi in test_bank]
    phi_lim = np.asarray(phi(lim), dtype=float)
    out = np.zeros((len(seq), len(psis)))
    for i, v in enumerate(seq):
        vals = np.asarray(getattr(v, "values", v), dtype=float)
        if spatial and vals.ndim == grid.dim:
            vals = vals[..., None]
        if vals.shape != lim.shape:
            raise ValueError(f"member {i} shape {vals.shape} does not match limit {lim.shape}")
        diff = np.asarray(phi(vals), dtype=float) - phi_lim
        for j, psi in enumerate(psis):
            if spatial:
                psi = psi[0] if psi.ndim == grid.dim + 2 else psi
                psi = psi[..., None] if psi.ndim == grid.dim else psi
                out[i, j] = abs(float(fl.spatial_integrate(np.sum(diff * psi, axis=-1), grid)))
            else:
                out[i, j] = abs(float(fl.integrate((grid, np.sum(diff * psi, axis=-1)))))
    return out


# -- sweeps ------------------------------------------------------------------

@dataclass(frozen=True)
class SweepFlowConfig:
    """How every member flow of a sweep is run.

    ``grid`` carries the stored time levels.  For Ginzburg-Landau families
    the final time is multiplied by ``TIME_SCALES[time_scale](eps)`` and the
    initial data is the recovery sequence of ``pattern``; otherwise
    ``initial`` is used for every member.
    """

    grid: fl.Grid
    initial: object = None
    substeps: int = 1
    stepper: str = fw.SEMI_IMPLICIT
    stabilization: float = 1.0
    time_scale: str = "eps^-2"
    pattern: SignPattern = SignPattern((0.0,), -1.0)
    phi: Optional[fw.PhiMap] = None

    def __post_init__(self):
        if self.time_scale not in TIME_SCALES:
            raise ValueError(f"unknown time scale {self.time_scale!r}; choose from {sorted(TIME_SCALES)}")


@dataclass(frozen=True)
class BankConfig:
    count: int = 64
    seed: int = 0
    amplitude_range: tuple = (1e-2, 1.0)
    tolerance_factor: float = 5.0
    check_members: bool = True


@dataclass
class EpsRecord:
    eps: float
    functional_value: float = math.nan
    normalized_value: float = math.nan
    initial_normalized: float = math.nan
    energy_nonincreasing: bool = False
    sw: Optional[fl.SwReport] = None
    min_slack: float = math.nan
    tolerance: float = math.nan
    estimate_norms: dict = field(default_factory=dict)
    failed: Optional[str] = None

    @property
    def complete(self) -> bool:
        return self.failed is None

    @property
    def minimality_passed(self) -> bool:
        return self.complete and self.min_slack >= -self.tolerance


COLUMNS = ("eps", "status", "functional_value", "normalized_value", "initial_normalized",
           "energy_nonincreasing", "strong_l2_distance", "max_pairing_error", "gradient_l2_bound",
           "dt_phi_L2", "V2", "min_slack", "tolerance")


@dataclass
class EpsSweepReport:
    eps_list: list
    records: list
    limit_candidate: str
    limit_value: float
    normalization: str
    limit_min_slack: float = math.nan
    limit_tolerance: float = math.nan
    time_scale: str = "1"
    limit_l2_norm: float = math.nan

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.eps_list, self.eps_list[1:])):
            raise ValueError("eps list must be strictly decreasing")

    def relative_distances(self) -> np.ndarray:
        """Strong L^2 distances divided by the L^2 norm of the limit candidate."""
        return self.column("strong_l2_distance") / self.limit_l2_norm

    @property
    def limit_passed(self) -> bool:
        return self.limit_min_slack >= -self.limit_tolerance

    def column(self, name: str) -> np.ndarray:
        return np.array([self._row(r)[name] for r in self.records], dtype=float)

    @staticmethod
    def _row(r: EpsRecord) -> dict:
        sw = r.sw
        return {
            "eps": r.eps, "status": "ok" if r.complete else f"failed: {r.failed}",
            "functional_value": r.functional_value, "normalized_value": r.normalized_value,
            "initial_normalized": r.initial_normalized, "energy_nonincreasing": int(r.energy_nonincreasing),
            "strong_l2_distance": sw.strong_lp_distance if sw else math.nan,
            "max_pairing_error": sw.max_pairing_error if sw else math.nan,
            "gradient_l2_bound": sw.gradient_lp_bound if sw else math.nan,
            "dt_phi_L2": r.estimate_norms.get("dt_phi_L2", math.nan), "V2": r.estimate_norms.get("V2", math.nan),
            "min_slack": r.min_slack, "tolerance": r.tolerance,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in self.records:
                row = self._row(r)
                w.writerow([row[c] if isinstance(row[c], str) else repr(float(row[c])) for c in COLUMNS])

    def summary(self) -> dict:
        """JSON-ready digest; undefined numbers become ``None``."""
        num = lambda v: None if v is None or not math.isfinite(v) else float(v)
        if not math.isfinite(self.limit_min_slack):
            verdict = "not_applicable"
        else:
            verdict = "pass" if self.limit_passed else "fail"
        return {"eps": [float(e) for e in self.eps_list], "limit_candidate": self.limit_candidate,
                "limit_value": num(self.limit_value), "normalization": self.normalization,
                "time_scale": self.time_scale, "limit_min_slack": num(self.limit_min_slack),
                "limit_tolerance": num(self.limit_tolerance), "limit_l2_norm": num(self.limit_l2_norm),
                "limit_verdict": verdict,
                "failed_members": [r.eps for r in self.records if not r.complete]}

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), sort_keys=True, indent=2, allow_nan=False) + "\n")

    def write_plot_files(self, directory, stem: str = "sweep") -> list:
        """Two-column text files ``eps value``, one per numeric diagnostic."""
        directory = Path(directory)
        paths = []
        for name in COLUMNS[2:]:
            path = directory / f"{stem}_{name}.dat"
            with open(path, "w") as fh:
                for r in self.records:
                    fh.write(f"{r.eps!r} {float(self._row(r)[name])!r}\n")
            paths.append(path)
        return paths


def _gl_member(family, eps, cfg: SweepFlowConfig):
    g0 = cfg.grid
    scale = TIME_SCALES[cfg.time_scale](eps)
    grid = g0.with_time(g0.n_time_steps, g0.t_final * scale, g0.t_start * scale)
    u0 = recovery_sequence(cfg.pattern, eps, grid).values[0]
    prob = fw.allen_cahn_problem(grid, eps, u0, substeps=cfg.substeps, stepper=cfg.stepper,
                                 stabilization=cfg.stabilization)
    return prob, grid


def _member_problem(family, eps, cfg: SweepFlowConfig):
    if family.kind == fn.GINZBURG_LANDAU:
        return _gl_member(family, eps, cfg)[0]
    if family.kind == fn.FILTRATION:
        return fw.filtration_problem(cfg.grid, family.coefficient_at(eps), cfg.initial, phi=cfg.phi,
                                     substeps=cfg.substeps, stepper=cfg.stepper)
    if family.kind == fn.P_LAPLACE:
        p = family.params["p"]
        return fw.p_laplace_problem(cfg.grid, family.coefficient_at(eps), p, cfg.initial, phi=cfg.phi,
                                    substeps=cfg.substeps)
    raise ValueError(f"no flow for family kind {family.kind!r}")


def _solve_member(family, eps, cfg: SweepFlowConfig):
    try:
        prob = _member_problem(family, eps, cfg)
        return fw.solve(prob), prob
    except (fw.FlowSolverError, ValueError, FloatingPointError) as exc:
        return exc, None


def _limit_candidate(family, cfg: SweepFlowConfig, solutions, eps_list):
    """Reference field for the sw diagnostics and its label."""
    if family.kind == fn.GINZBURG_LANDAU:
        return None, "sharp_interface"
    a_hom = family.params.get("homogenized_coefficient")
    if family.kind == fn.FILTRATION and a_hom is not None:
        prob = fw.filtration_problem(cfg.grid, fw.constant(a_hom), cfg.initial, phi=cfg.phi,
                                     substeps=cfg.substeps, stepper=cfg.stepper)
        return fw.solve(prob), f"homogenized(a={a_hom!r})"
    for eps, sol in sorted(zip(eps_list, solutions), key=lambda t: t[0]):
        if isinstance(sol, fw.FlowSolution):
            return sol, f"smallest_eps({eps!r})"
    raise RuntimeError("every member failed; no limit candidate")


def run_sweep(family: fn.FunctionalFamily, cfg: SweepFlowConfig, eps_list, bank_cfg: BankConfig = BankConfig(),
              workers: int = 1) -> EpsSweepReport:
    """Solve each member flow, measure it, and test the limit candidate for minimality."""
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ValueError("eps list is empty")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps list must be strictly decreasing")
    if family.limit_spec is None and family.limit_value is None:
        raise ValueError("family has no limit")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda e: _solve_member(family, e, cfg), eps_list))
    else:
        results = [_solve_member(family, e, cfg) for e in eps_list]
    solutions = [r[0] for r in results]

    limit_sol, label = _limit_candidate(family, cfg, solutions, eps_list)
    is_gl = family.kind == fn.GINZBURG_LANDAU
    bank = None
    if not is_gl:
        bank = mn.generate_eta_bank(cfg.grid, family.member_at(eps_list[0]).m, bank_cfg.count, bank_cfg.seed,
                                    bank_cfg.amplitude_range)

    records = []
    for eps, (sol, prob) in zip(eps_list, results):
        if not isinstance(sol, fw.FlowSolution):
            records.append(EpsRecord(eps, failed=f"{type(sol).__name__}: {sol}"))
            continue
        spec = prob.spec
        rec = EpsRecord(eps, estimate_norms=dict(sol.estimate_norms))
        trace = sol.energy_trace
        rec.energy_nonincreasing = bool(np.all(np.diff(trace) <= ENERGY_STEP_SLACK))
        if is_gl:
            # measure in rescaled time on the shared grid so members are comparable
            member = fl.SpaceTimeField(cfg.grid, sol.field.values, sol.field.boundary_kind)
            rec.functional_value = fn.evaluate_functional(member, spec)
            rec.normalized_value = rec.functional_value / (eps * (cfg.grid.t_final - cfg.grid.t_start))
            rec.initial_normalized = float(trace[0]) / eps
            ref = sign_pattern_field(cfg.pattern, cfg.grid)
        else:
            member = sol.field
            rec.functional_value = fn.evaluate_functional(member, spec)
            rec.normalized_value = rec.functional_value
            rec.initial_normalized = float(trace[0])
            ref = limit_sol.field
        rec.sw = fl.sw_distance(member, ref)
        if bank is not None and bank_cfg.check_members:
            rep = mn.check_parabolic_minimum(sol.field, prob.phi, sol.u0, spec, bank,
                                             mn.default_tolerance(sol.field, spec, bank_cfg.tolerance_factor))
            rec.min_slack, rec.tolerance = rep.min_slack, rep.tolerance_used
        records.append(rec)

    if is_gl:
        limit_value = float(family.limit_value())
        normalization = "energy / (eps * duration)"
        limit_slack = limit_tol = limit_norm = math.nan
    else:
        lim_spec = family.limit_spec
        limit_value = fn.evaluate_functional(limit_sol.field, lim_spec)
        normalization = "none"
        rep = mn.check_parabolic_minimum(limit_sol.field, cfg.phi or fw.PhiMap.identity(lim_spec.m), limit_sol.u0,
                                         lim_spec, bank,
                                         mn.default_tolerance(limit_sol.field, lim_spec, bank_cfg.tolerance_factor))
        limit_slack, limit_tol = rep.min_slack, rep.tolerance_used
        limit_norm = fl.lp_norm(limit_sol.field, 2.0)
    return EpsSweepReport(eps_list, records, label, limit_value, normalization, limit_slack, limit_tol,
                          cfg.time_scale if is_gl else "1", limit_norm)
