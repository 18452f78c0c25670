"""
Named batch experiments.

Every experiment takes a resolved parameter set and an :class:`ArtifactWriter`
and returns the list of assertions it checked.  All files go through the
writer, which hashes them into a manifest at the end of the run.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fields as fl
from . import flows as fw
from . import functionals as fn
from . import gamma as gm
from . import minimality as mn

MANIFEST = "manifest.sha256"


# -- artifacts ---------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class ArtifactWriter:
    """Single writer for one run directory; tracks files for the manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, name: str) -> Path:
        """Reserve ``name`` for a file written by another routine."""
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return p

    def csv(self, name: str, header, rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        return self.text(name, buf.getvalue())

    def text(self, name: str, content: str) -> Path:
        p = self.path(name)
        p.write_text(content)
        return p

    def json(self, name: str, obj) -> Path:
        return self.text(name, json.dumps(obj, sort_keys=True, indent=2, default=_fmt) + "\n")

    def write_manifest(self) -> Path:
        lines = [f"{_sha256(self.root / n)}  {n}" for n in sorted(self.files)]
        p = self.root / MANIFEST
        p.write_text("\n".join(lines) + "\n")
        return p


def verify_manifest(root) -> list:
    """Files whose content no longer matches the manifest (missing files included)."""
    root = Path(root)
    bad = []
    for line in (root / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        digest, name = line.split("  ", 1)
        p = root / name
        if not p.exists() or _sha256(p) != digest:
            bad.append(name)
    return bad


# -- results -----------------------------------------------------------------

@dataclass
class Assertion:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ExperimentResult:
    experiment: str
    assertions: list = field(default_factory=list)
    solver_failures: list = field(default_factory=list)

    def check(self, name: str, passed, detail: str = "") -> bool:
        self.assertions.append(Assertion(name, bool(passed), detail))
        return bool(passed)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions) and not self.solver_failures

    def report(self) -> str:
        lines = [f"experiment {self.experiment}"]
        for a in self.assertions:
            lines.append(f"{'PASS' if a.passed else 'FAIL'} {a.name}: {a.detail}")
        for f in self.solver_failures:
            lines.append(f"SOLVER-FAILURE {f}")
        return "\n".join(lines) + "\n"


# -- helpers -----------------------------------------------------------------

def _grid(P, dim=None, levels=None, t_final=None) -> fl.Grid:
    cells = tuple(P["cells"])
    extent = tuple(tuple(e) for e in P["extent"])
    if len(extent) == 1 and len(cells) > 1:
        extent = extent * len(cells)
    T = P["t_final"] if t_final is None else t_final
    n = levels if levels is not None else P.get("levels") or int(round(T / P["dt"]))
    return fl.Grid(len(cells), cells, extent, int(n), float(T))


def _substeps(P, grid: fl.Grid) -> int:
    return max(1, int(round(grid.dt / P["dt"])))


def _sin_pi(x):
    return np.sin(np.pi * x[..., 0])


# -- experiments -------------------------------------------------------------

def run_allen_cahn_kink(P, out: ArtifactWriter, workers: int = 1) -> ExperimentResult:
    res = ExperimentResult("allen_cahn_kink")
    eps = P["eps"][0]
    g = _grid(P)
    kink = lambda x: np.tanh(x[..., 0] / (math.sqrt(2.0) * eps))
    sol = fw.solve(fw.allen_cahn_problem(g, eps, kink, substeps=_substeps(P, g)))
    drift = np.abs(sol.field.values[..., 0] - kink(g.coords())[None]).max(axis=1)
    res.check("kink_drift", drift.max() <= P["tol_drift"], f"max drift {drift.max():.3e} <= {P['tol_drift']:g}")
    inc = np.diff(sol.energy_trace)
    res.check("energy_nonincreasing", inc.max() <= P["tol_energy_step"],
              f"largest energy increment {inc.max():.3e} <= {P['tol_energy_step']:g}")
    out.csv("kink_drift.csv", ["t", "max_drift", "energy"], zip(g.times(), drift, sol.energy_trace))

    # weak Euler-Lagrange residual of the exact kink on a finer grid
    gr = fl.Grid(1, (P["residual_cells"],), g.extent, P["residual_levels"], g.t_final)
    field_k = fl.SpaceTimeField(gr, np.broadcast_to(kink(gr.coords())[None, :, None],
                                                    (gr.n_levels, gr.space_shape[0], 1)))
    bank = mn.generate_eta_bank(gr, 1, P["bank_count"], P["seed"])
    r = fw.weak_residuals(fw.FlowSolution.from_field(field_k), fn.make_ginzburg_landau(eps), fw.PhiMap.identity(), bank)
    res.check("kink_el_residual", r.max() <= P["tol_residual"],
              f"max weak residual {r.max():.3e} <= {P['tol_residual']:g} at {gr.cells[0]} cells")
    out.csv("kink_el_residual.csv", ["eta_id", "residual"], enumerate(r))

    # maximum principle from data above the upper well
    above = lambda x: 1.0 + 0.5 * (1.0 + np.sin(3.0 * np.pi * x[..., 0]))
    sol_mp = fw.solve(fw.allen_cahn_problem(g, eps, above, substeps=_substeps(P, g)))
    low = sol_mp.field.values.min() - 1.0
    res.check("maximum_principle", low >= -P["tol_max_principle"], f"min(u) - 1 = {low:.3e}")
    out.csv("max_principle.csv", ["t", "min_u"], zip(g.times(), sol_mp.field.values.min(axis=(1, 2))))
    return res


def run_allen_cahn_circle(P, out: ArtifactWriter, workers: int = 1) -> ExperimentResult:
    res = ExperimentResult("allen_cahn_circle")
    eps, R0 = P["eps"][0], P["radius"]
    g = _grid(P)
    init = lambda x: np.tanh((R0 - np.linalg.norm(x, axis=-1)) / (math.sqrt(2.0) * eps))
    sol = fw.solve(fw.allen_cahn_problem(g, eps, init, substeps=_substeps(P, g), stepper=P["stepper"]))
    rows, worst = [], 0.0
    for k, t in enumerate(g.times()):
        R = fw.front_radius(sol.field.values[k, ..., 0], g)
        law = R0**2 - 2.0 * eps**2 * t
        rel = (R * R - law) / law if law > 0 else math.nan
        tracked = bool(np.isfinite(R) and R > P["min_radius_factor"] * eps)
        if tracked:
            worst = max(worst, abs(rel))
        rows.append((t, R, R * R, law, rel, tracked))
    out.csv("circle_radius.csv", ["t", "R", "R2", "R2_law", "rel_err", "tracked"], rows)
    n = sum(r[-1] for r in rows)
    res.check("mean_curvature_law", worst <= P["tol_rel"],
              f"max |R^2 - law| / law = {worst:.4f} <= {P['tol_rel']:g} over {n} levels with R > "
              f"{P['min_radius_factor']:g} eps")
    return res


def _heat_case(N, dt, T):
    g = fl.Grid(1, (N,), ((0.0, 1.0),), int(round(T / dt)), T)
    prob = fw.filtration_problem(g, fw.constant(1.0), _sin_pi)
    return g, prob, fw.solve(prob)


def bump_perturbation(grid: fl.Grid, seed: int, amplitude: float = 0.2, width_range=(0.05, 0.08)):
    """Seeded time-constant interior bump used by the negative control."""
    rng = np.random.default_rng(seed)
    lo, hi = grid.extent[0]
    c = lo + (hi - lo) * rng.uniform(0.25, 0.75)
    w = (hi - lo) * rng.uniform(*width_range)
    return amplitude * mn.bump(((grid.axes()[0] - c) / w) ** 2), c, w


def run_heat_minimality(P, out: ArtifactWriter, workers: int = 1) -> ExperimentResult:
    res = ExperimentResult("heat_minimality")
    T = P["t_final"]
    rows, tols = [], []
    last = None
    for N, dt in zip(P["refine_cells"], P["refine_dt"]):
        g, prob, sol = _heat_case(int(N), float(dt), T)
        bank = mn.generate_eta_bank(g, 1, P["bank_count"], P["seed"])
        tol = mn.default_tolerance(sol.field, prob.spec, P["tol_factor"])
        rep = mn.check_parabolic_minimum(sol.field, prob.phi, sol.u0, prob.spec, bank, tol, workers=workers)
        exact = np.exp(-np.pi**2 * g.times())[:, None] * np.sin(np.pi * g.axes()[0])[None]
        err = np.abs(sol.field.values[..., 0] - exact).max()
        rows.append((N, dt, rep.min_slack, tol, rep.worst_eta, err))
        tols.append(tol)
        res.check(f"positive_control_{N}", rep.passed, f"min_slack {rep.min_slack:.3e} >= -{tol:.3e}")
        out.text(f"slack_{N}.txt", rep.to_text())
        last = (g, prob, sol, bank, tol)
    out.csv("heat_refinement.csv", ["cells", "dt", "min_slack", "tolerance", "worst_eta", "max_error"], rows)
    ratios = [a / b for a, b in zip(tols, tols[1:])]
    expected = [max(n1 / n0, d0 / d1) for n0, n1, d0, d1 in
                zip(P["refine_cells"], P["refine_cells"][1:], P["refine_dt"], P["refine_dt"][1:])]
    res.check("tolerance_order", all(r >= P["order_fraction"] * e for r, e in zip(ratios, expected)),
              "tolerance ratios " + ", ".join(f"{r:.3f}" for r in ratios))

    g, prob, sol, bank, tol = last
    neg_rows = []
    for k in range(P["control_seeds"]):
        seed = P["seed"] + k
        b, c, w = bump_perturbation(g, seed, P["bump_amplitude"])
        bad = fl.SpaceTimeField(g, sol.field.values + b[None, :, None], fl.DIRICHLET_ZERO)
        rep = mn.check_parabolic_minimum(bad, prob.phi, sol.u0, prob.spec, bank, tol, workers=workers)
        neg_rows.append((seed, c, w, rep.min_slack, tol, rep.min_slack / tol, rep.worst_eta))
    out.csv("negative_control.csv", ["seed", "center", "half_width", "min_slack", "tolerance", "slack_over_tol",
                                     "worst_eta"], neg_rows)
    flagged = sum(r[3] < -P["flag_factor"] * tol for r in neg_rows)
    res.check("negative_control", flagged == len(neg_rows),
              f"{flagged}/{len(neg_rows)} perturbed fields have min_slack < -{P['flag_factor']:g} tol")
    return res


def run_plap_dissipation(P, out: ArtifactWriter, workers: int = 1) -> ExperimentResult:
    res = ExperimentResult("plap_dissipation")
    g = _grid(P)
    sub = _substeps(P, g)
    p = P["p"]
    sol_p = fw.solve(fw.p_laplace_problem(g, fw.constant(1.0), p, _sin_pi, substeps=sub))
    sol_2 = fw.solve(fw.p_laplace_problem(g, fw.constant(1.0), 2.0, _sin_pi, substeps=sub))
    sol_h = fw.solve(fw.p_laplace_problem(g, fw.constant(1.0), p, _sin_pi, substeps=2 * sub))
    inc = np.diff(sol_p.energy_trace)
    res.check("energy_nonincreasing", inc.max() <= P["tol_energy_step"],
              f"largest energy increment {inc.max():.3e}")
    u0 = sol_p.field.values[0, :, 0]
    steep = np.abs(np.gradient(u0, g.h[0])) > 1.0
    w = g.space_weights()
    change_p = float(np.sum((w * np.abs(sol_p.field.values[-1, :, 0] - u0))[steep]))
    change_2 = float(np.sum((w * np.abs(sol_2.field.values[-1, :, 0] - u0))[steep]))
    res.check("faster_where_steep", change_p > change_2,
              f"change on |u0'| > 1: p={p:g} {change_p:.4e} vs p=2 {change_2:.4e}")
    half = np.abs(sol_h.field.values - sol_p.field.values).max()
    res.check("halved_step_agreement", half <= P["tol_halved_step"], f"max |u_dt - u_dt/2| = {half:.3e}")
    out.csv("plap_energy.csv", ["t", f"energy_p{p:g}", "energy_p2"],
            zip(g.times(), sol_p.energy_trace, sol_2.energy_trace))
    out.csv("plap_profile.csv", ["x", "u0", f"u_p{p:g}", "u_p2"],
            zip(g.axes()[0], u0, sol_p.field.values[-1, :, 0], sol_2.field.values[-1, :, 0]))
    fl.write_binary(sol_p.field, out.path("plap_field.bin"))
    return res


def run_homogenization_sweep(P, out: ArtifactWriter, workers: int = 1) -> ExperimentResult:
    res = ExperimentResult("homogenization_sweep")
    g = _grid(P)
    fam = fn.oscillating_filtration_family(extent=g.extent, t_final=g.t_final)
    a_hom = fam.params["homogenized_coefficient"]
    res.check("homogenized_coefficient", abs(a_hom - math.sqrt(3.0)) <= 1e-12, f"harmonic mean {a_hom!r}")
    cfg = gm.SweepFlowConfig(g, initial=_sin_pi, substeps=_substeps(P, g))
    rep = gm.run_sweep(fam, cfg, P["eps"], gm.BankConfig(P["bank_count"], P["seed"],
                                                         tolerance_factor=P["tol_factor"]), workers)
    _write_sweep(rep, out, "homogenization")
    failed = [r.eps for r in rep.records if not r.complete]
    if failed:
        res.solver_failures.append(f"sweep members failed: {failed}")
    rel = rep.relative_distances()
    res.check("distance_monotone", np.all(np.diff(rel) < 0), "relative L2 distances " +
              ", ".join(f"{v:.4f}" for v in rel))
    res.check("distance_at_smallest_eps", rel[-1] <= P["tol_rel_l2"], f"{rel[-1]:.4f} <= {P['tol_rel_l2']:g}")
    gb = rep.column("gradient_l2_bound")
    res.check("gradient_bound_uniform", gb.max() <= P["bound_factor"] * gb.min(),
              f"gradient L2 in [{gb.min():.4f}, {gb.max():.4f}]")
    dphi = rep.column("dt_phi_L2")
    res.check("estimate_norms_bounded", dphi.max() <= P["bound_factor"] * dphi.min(),
              f"dt Phi L2 in [{dphi.min():.4f}, {dphi.max():.4f}]")
    members_pass = all(r.minimality_passed for r in rep.records)
    res.check("limit_minimality", rep.limit_passed,
              f"limit min_slack {rep.limit_min_slack:.3e} >= -{rep.limit_tolerance:.3e}; "
              f"members {'pass' if members_pass else 'do not all pass'}")
    return res


def run_gl_gamma_sweep(P, out: ArtifactWriter, workers: int = 1) -> ExperimentResult:
    res = ExperimentResult("gl_gamma_sweep")
    g = _grid(P)
    pattern = gm.SignPattern(tuple(P["interfaces"]), P["left_sign"])
    target = fn.limit_perimeter_value(pattern.k)
    recs = gm.recovery_sweep(pattern, P["eps"], g)
    out.csv("recovery.csv", ["eps", "normalized_energy", "relative_error", "l2_distance"],
            [(r.eps, r.normalized_energy, r.relative_error, r.l2_distance) for r in recs])
    errs = np.array([r.relative_error for r in recs])
    res.check("surface_tension", errs[-1] <= P["tol_rel"], f"|F/eps - {target:.6f}| / target = {errs[-1]:.3e}")
    res.check("recovery_monotone", np.all(np.diff(errs) < 0), "errors " + ", ".join(f"{e:.3e}" for e in errs))
    dist = np.array([r.l2_distance for r in recs])
    rates = dist[:-1] / dist[1:]
    lo, hi = P["sqrt_rate_band"]
    res.check("sqrt_eps_rate", np.all((rates >= lo) & (rates <= hi)),
              "distance ratios per halving " + ", ".join(f"{v:.3f}" for v in rates))

    cfg = gm.SweepFlowConfig(g, substeps=P["substeps"], time_scale=P["time_scale"], pattern=pattern)
    rep = gm.run_sweep(fn.ginzburg_landau_family(1, pattern.k), cfg, P["eps"], workers=workers)
    _write_sweep(rep, out, "gl")
    failed = [r.eps for r in rep.records if not r.complete]
    if failed:
        res.solver_failures.append(f"sweep members failed: {failed}")
    init = rep.column("initial_normalized")
    res.check("initial_energy_near_limit", np.all(np.abs(init - target) <= P["tol_flow_rel"] * target),
              "initial E/eps " + ", ".join(f"{v:.5f}" for v in init))
    res.check("member_energy_nonincreasing", all(r.energy_nonincreasing for r in rep.records), "per member")
    res.check("liminf_shadow", target <= (1.0 + P["tol_flow_rel"]) * init.min(),
              f"{target:.6f} <= (1 + {P['tol_flow_rel']:g}) * {init.min():.6f}")
    return res


def _write_sweep(rep: gm.EpsSweepReport, out: ArtifactWriter, stem: str):
    rep.write_csv(out.path(f"{stem}_sweep.csv"))
    rep.write_summary(out.path(f"{stem}_summary.json"))
    for name in gm.COLUMNS[2:]:
        out.path(f"{stem}_{name}.dat")
    rep.write_plot_files(out.root, stem)


def builtin_specs(eps_list=(0.1, 0.05, 0.025, 0.0125)) -> dict:
    specs = {f"ginzburg_landau(eps={e:g})": fn.make_ginzburg_landau(e) for e in eps_list}
    specs["ginzburg_landau_2d(eps=0.02)"] = fn.make_ginzburg_landau(0.02, 2)
    osc = fn.oscillating_filtration_family()
    for e in (1 / 4, 1 / 32):
        specs[f"filtration(a=2+sin, eps={e:g})"] = osc.member_at(e)
    specs["filtration(homogenized)"] = osc.limit_spec
    specs["filtration(tensor, m=2)"] = fn.make_filtration(
        lambda x, t: np.array([[2.0, 0.5], [0.5, 1.0]]) + 0 * np.asarray(t)[..., None, None], dim=2, m=2,
        extent=((0.0, 1.0), (0.0, 1.0)))
    for p in (1.5, 3.0, 4.0):
        specs[f"p_laplace(p={p:g})"] = fn.make_p_laplace(fw.constant(1.0), p)
    return specs


def run_validators(P, out: ArtifactWriter, workers: int = 1) -> ExperimentResult:
    res = ExperimentResult("validators")
    n, seed = P["samples"], P["seed"]
    rows = []
    for name, spec in builtin_specs().items():
        gr = fn.check_growth(spec, n, seed)
        ho = fn.check_hoelder(spec, n, seed)
        rows.append((name, "builtin", gr.worst_ratio, spec.growth_C, int(gr.passed), ho.worst_ratio, int(ho.passed)))
        res.check(f"builtin {name}", gr.passed and ho.passed,
                  f"growth ratio {gr.worst_ratio:.4f} <= C={spec.growth_C:.4f}; hoelder ratio {ho.worst_ratio:.4f} <= 1")
    for name, (spec, which) in fn.planted_counterexamples().items():
        gr = fn.check_growth(spec, n, seed)
        ho = fn.check_hoelder(spec, n, seed)
        rows.append((name, f"planted:{which}", gr.worst_ratio, spec.growth_C, int(gr.passed), ho.worst_ratio,
                     int(ho.passed)))
        caught = not (gr if which == "growth" else ho).passed
        res.check(f"planted {name}", caught, f"rejected by {which} check")
    out.csv("validators.csv", ["density", "role", "growth_worst_ratio", "growth_C", "growth_pass",
                               "hoelder_worst_ratio", "hoelder_pass"], rows)
    return res


# -- registry ----------------------------------------------------------------

@dataclass(frozen=True)
class Experiment:
    id: str
    module: str
    exercises: str
    run: object
    defaults: dict


_E = Experiment
EXPERIMENTS = {e.id: e for e in [
    _E("allen_cahn_kink", "flows", "stationary double-well layer, weak Euler-Lagrange residual, maximum principle",
       run_allen_cahn_kink,
       {"grid": {"cells": (2048,), "extent": ((-1.0, 1.0),), "t_final": 1.0, "dt": 0.01, "levels": 100},
        "sweep": {"eps": (0.05,)},
        "tolerances": {"tol_drift": 1e-3, "tol_residual": 1e-6, "tol_max_principle": 1e-12,
                       "tol_energy_step": 1e-10},
        "params": {"residual_cells": 4096, "residual_levels": 20, "bank_count": 64}}),
    _E("allen_cahn_circle", "flows", "shrinking circle under Allen-Cahn flow against the mean-curvature law",
       run_allen_cahn_circle,
       {"grid": {"cells": (512, 512), "extent": ((-1.0, 1.0), (-1.0, 1.0)), "t_final": 104.0, "dt": 0.1,
                 "levels": 52},
        "sweep": {"eps": (0.02,)},
        "tolerances": {"tol_rel": 0.02},
        "params": {"radius": 0.3, "min_radius_factor": 4.0, "stepper": fw.STRANG}}),
    _E("heat_minimality", "minimality", "parabolic-minimum certificate for the heat flow, positive and negative controls",
       run_heat_minimality,
       {"grid": {"t_final": 0.1},
        "sweep": {},
        "tolerances": {"tol_factor": 5.0, "flag_factor": 10.0, "order_fraction": 0.9},
        "params": {"refine_cells": (256, 512, 1024), "refine_dt": (4e-4, 2e-4, 1e-4), "bank_count": 64,
                   "control_seeds": 10, "bump_amplitude": 0.2}}),
    _E("plap_dissipation", "flows", "energy dissipation of the p-Laplace gradient flow",
       run_plap_dissipation,
       {"grid": {"cells": (512,), "extent": ((0.0, 1.0),), "t_final": 0.01, "dt": 1e-4, "levels": 100},
        "sweep": {},
        "tolerances": {"tol_energy_step": 1e-10, "tol_halved_step": 1e-2},
        "params": {"p": 4.0}}),
    _E("homogenization_sweep", "gamma", "oscillating filtration coefficients against the harmonic-mean limit",
       run_homogenization_sweep,
       {"grid": {"cells": (1024,), "extent": ((0.0, 1.0),), "t_final": 0.1, "dt": 1e-3, "levels": 100},
        "sweep": {"eps": (0.25, 0.125, 0.0625, 0.03125)},
        "tolerances": {"tol_rel_l2": 0.02, "tol_factor": 5.0, "bound_factor": 1.5},
        "params": {"bank_count": 64}}),
    _E("gl_gamma_sweep", "gamma", "Ginzburg-Landau energies of recovery sequences and their flows against the perimeter",
       run_gl_gamma_sweep,
       {"grid": {"cells": (8192,), "extent": ((-1.0, 1.0),), "t_final": 0.01, "dt": 1e-4, "levels": 10},
        "sweep": {"eps": (0.1, 0.05, 0.025, 0.0125)},
        "tolerances": {"tol_rel": 0.02, "tol_flow_rel": 0.05},
        "params": {"interfaces": (0.0,), "left_sign": -1.0, "substeps": 10, "time_scale": "eps^-2",
                   "sqrt_rate_band": (1.2, 1.6)}}),
    _E("validators", "functionals", "growth and Hoelder bounds of built-in densities and planted counterexamples",
       run_validators,
       {"grid": {}, "sweep": {}, "tolerances": {}, "params": {"samples": 10000}}),
]}


def list_experiments() -> str:
    """One line per experiment: id, module, what it exercises."""
    return "\n".join(f"{e.id:<22} [{e.module}] {e.exercises}" for e in EXPERIMENTS.values()) + "\n"
